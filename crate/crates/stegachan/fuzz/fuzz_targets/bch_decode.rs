#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::ecc::{BchCode, CODEWORD_BITS, CORRECT_CAPACITY, DATA_BITS};

fuzz_target!(|data: &[u8]| {
    if data.len() < 12 {
        return;
    }
    let code = BchCode::new();

    // Arbitrary 96-bit words must decode or fail without panicking.
    let mut word = [0u8; CODEWORD_BITS];
    for (i, w) in word.iter_mut().enumerate() {
        *w = (data[i / 8] >> (i % 8)) & 1;
    }
    let _ = code.decode(&word);

    // With more input, exercise the correction guarantee directly.
    if data.len() >= 12 + 7 + 1 + CORRECT_CAPACITY {
        let mut payload = [0u8; DATA_BITS];
        for (i, p) in payload.iter_mut().enumerate() {
            *p = (data[12 + i / 8] >> (i % 8)) & 1;
        }
        let mut cw = code.encode(&payload);
        let w = (data[19] as usize) % (CORRECT_CAPACITY + 1);
        let mut positions: Vec<usize> = data[20..20 + w]
            .iter()
            .map(|&b| b as usize % CODEWORD_BITS)
            .collect();
        positions.sort_unstable();
        positions.dedup();
        for &p in &positions {
            cw[p] ^= 1;
        }
        let (decoded, corrected) = code
            .decode(&cw)
            .expect("weight <= t error patterns always decode");
        assert_eq!(decoded, payload);
        assert_eq!(corrected, positions.len());
    }
});

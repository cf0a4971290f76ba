#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::geom::Quad;

fuzz_target!(|data: &[u8]| {
    let Ok(corners) = serde_json::from_slice::<[[f64; 2]; 4]>(data) else {
        return;
    };
    if let Ok(quad) = Quad::new(corners) {
        assert!(quad.area() > 0.0);
        assert!(quad.is_convex());
        // Ordering is idempotent.
        let again = quad.ordered();
        assert_eq!(again.corners, quad.corners);
    }
});

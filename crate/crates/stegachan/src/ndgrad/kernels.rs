//! Dense kernels for the graph executor.
//!
//! Layout is NHWC row-major throughout: `idx = ((n*H + y)*W + x)*C + c`.
//! Inner loops run over the channel axis with contiguous slices so LLVM can
//! vectorize them; all reductions have a fixed sequential order, which keeps
//! results bit-identical across runs.

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], kern: &[F], out: &mut [F], d: ConvDims) {
    let mut acc = vec![F::zero(); d.cout];
    for n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                acc.fill(F::zero());
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad_w as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let in_base = (((n * d.h + iy as usize) * d.w) + ix as usize) * d.cin;
                        let k_base = ((ky * d.k + kx) * d.cin) * d.cout;
                        for ci in 0..d.cin {
                            let v = x[in_base + ci];
                            let krow = &kern[k_base + ci * d.cout..k_base + (ci + 1) * d.cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += v * kv;
                            }
                        }
                    }
                }
                let ob = ((n * d.oh + oy) * d.ow + ox) * d.cout;
                out[ob..ob + d.cout].copy_from_slice(&acc);
            }
        }
    }
}

pub(crate) fn conv2d_backward_input<F: Scalar>(
    dout: &[F],
    kern: &[F],
    dx: &mut [F],
    d: ConvDims,
) {
    for n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gb = ((n * d.oh + oy) * d.ow + ox) * d.cout;
                let g = &dout[gb..gb + d.cout];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad_w as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let in_base = (((n * d.h + iy as usize) * d.w) + ix as usize) * d.cin;
                        let k_base = ((ky * d.k + kx) * d.cin) * d.cout;
                        for ci in 0..d.cin {
                            let krow = &kern[k_base + ci * d.cout..k_base + (ci + 1) * d.cout];
                            let mut s = F::zero();
                            for (&gv, &kv) in g.iter().zip(krow) {
                                s += gv * kv;
                            }
                            dx[in_base + ci] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_kernel<F: Scalar>(
    x: &[F],
    dout: &[F],
    dk: &mut [F],
    d: ConvDims,
) {
    for n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gb = ((n * d.oh + oy) * d.ow + ox) * d.cout;
                let g = &dout[gb..gb + d.cout];
                for ky in 0..d.k {
                    let iy = (oy * d.stride + ky) as isize - d.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let ix = (ox * d.stride + kx) as isize - d.pad_w as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let in_base = (((n * d.h + iy as usize) * d.w) + ix as usize) * d.cin;
                        let k_base = ((ky * d.k + kx) * d.cin) * d.cout;
                        for ci in 0..d.cin {
                            let v = x[in_base + ci];
                            let drow =
                                &mut dk[k_base + ci * d.cout..k_base + (ci + 1) * d.cout];
                            for (dkv, &gv) in drow.iter_mut().zip(g) {
                                *dkv += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, stride 1, same padding, one 2-D kernel per batch
/// image (`kern` is `[N,k,k]`). Kernel taps run in the outer loop so each tap
/// is one long saxpy over contiguous rows; zero taps (from kernels embedded
/// in a larger fixed-size buffer) are skipped outright.
pub(crate) fn depthwise_forward<F: Scalar>(
    x: &[F],
    kern: &[F],
    out: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    out.fill(F::zero());
    for ni in 0..n {
        let kimg = &kern[ni * k * k..(ni + 1) * k * k];
        for dy in 0..k {
            for dx in 0..k {
                let kv = kimg[dy * k + dx];
                if kv == F::zero() {
                    continue;
                }
                let oy_off = dy as isize - r;
                let ox_off = dx as isize - r;
                for y in 0..h {
                    let iy = y as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox_off).max(0) as usize;
                    let x1 = (w as isize - ox_off).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let ob = ((ni * h + y) * w + x0) * c;
                    let ib = ((ni * h + iy as usize) * w + (x0 as isize + ox_off) as usize) * c;
                    let len = (x1 - x0) * c;
                    let orow = &mut out[ob..ob + len];
                    let irow = &x[ib..ib + len];
                    for (o, &v) in orow.iter_mut().zip(irow) {
                        *o += kv * v;
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward_input<F: Scalar>(
    dout: &[F],
    kern: &[F],
    dx: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    for ni in 0..n {
        let kimg = &kern[ni * k * k..(ni + 1) * k * k];
        for dy in 0..k {
            for dx_ in 0..k {
                let kv = kimg[dy * k + dx_];
                if kv == F::zero() {
                    continue;
                }
                let oy_off = dy as isize - r;
                let ox_off = dx_ as isize - r;
                for y in 0..h {
                    let iy = y as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox_off).max(0) as usize;
                    let x1 = (w as isize - ox_off).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let ob = ((ni * h + y) * w + x0) * c;
                    let ib = ((ni * h + iy as usize) * w + (x0 as isize + ox_off) as usize) * c;
                    let len = (x1 - x0) * c;
                    let grow = &dout[ob..ob + len];
                    let drow = &mut dx[ib..ib + len];
                    for (dv, &g) in drow.iter_mut().zip(grow) {
                        *dv += kv * g;
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward_kernel<F: Scalar>(
    x: &[F],
    dout: &[F],
    dk: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
) {
    let r = (k / 2) as isize;
    for ni in 0..n {
        let dkimg = &mut dk[ni * k * k..(ni + 1) * k * k];
        for dy in 0..k {
            for dx_ in 0..k {
                let oy_off = dy as isize - r;
                let ox_off = dx_ as isize - r;
                let mut s = F::zero();
                for y in 0..h {
                    let iy = y as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox_off).max(0) as usize;
                    let x1 = (w as isize - ox_off).min(w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let ob = ((ni * h + y) * w + x0) * c;
                    let ib = ((ni * h + iy as usize) * w + (x0 as isize + ox_off) as usize) * c;
                    let len = (x1 - x0) * c;
                    let grow = &dout[ob..ob + len];
                    let irow = &x[ib..ib + len];
                    for (&g, &v) in grow.iter().zip(irow) {
                        s += g * v;
                    }
                }
                dkimg[dy * k + dx_] += s;
            }
        }
    }
}

pub(crate) fn dense_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    b: &[F],
    out: &mut [F],
    n: usize,
    d: usize,
    m: usize,
) {
    for ni in 0..n {
        let orow = &mut out[ni * m..(ni + 1) * m];
        orow.copy_from_slice(b);
        let xrow = &x[ni * d..(ni + 1) * d];
        for (di, &v) in xrow.iter().enumerate() {
            if v == F::zero() {
                continue;
            }
            let wrow = &w[di * m..(di + 1) * m];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += v * wv;
            }
        }
    }
}

pub(crate) fn dense_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dout: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
    n: usize,
    d: usize,
    m: usize,
) {
    if let Some(dx) = dx {
        for ni in 0..n {
            let grow = &dout[ni * m..(ni + 1) * m];
            for di in 0..d {
                let wrow = &w[di * m..(di + 1) * m];
                let mut s = F::zero();
                for (&g, &wv) in grow.iter().zip(wrow) {
                    s += g * wv;
                }
                dx[ni * d + di] += s;
            }
        }
    }
    if let Some(dw) = dw {
        for ni in 0..n {
            let grow = &dout[ni * m..(ni + 1) * m];
            let xrow = &x[ni * d..(ni + 1) * d];
            for (di, &v) in xrow.iter().enumerate() {
                if v == F::zero() {
                    continue;
                }
                let dwrow = &mut dw[di * m..(di + 1) * m];
                for (dwv, &g) in dwrow.iter_mut().zip(grow) {
                    *dwv += v * g;
                }
            }
        }
    }
    if let Some(db) = db {
        for ni in 0..n {
            let grow = &dout[ni * m..(ni + 1) * m];
            for (dbv, &g) in db.iter_mut().zip(grow) {
                *dbv += g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SampleDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
}

#[inline]
fn corner<F: Scalar>(x: &[F], d: &SampleDims, n: usize, iy: isize, ix: isize, c: usize) -> F {
    if iy < 0 || iy >= d.h as isize || ix < 0 || ix >= d.w as isize {
        F::zero()
    } else {
        x[(((n * d.h + iy as usize) * d.w) + ix as usize) * d.c + c]
    }
}

pub(crate) fn bilinear_forward<F: Scalar>(x: &[F], grid: &[F], out: &mut [F], d: SampleDims) {
    let one = F::one();
    for n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gb = ((n * d.oh + oy) * d.ow + ox) * 2;
                let gx = grid[gb];
                let gy = grid[gb + 1];
                let x0 = gx.floor();
                let y0 = gy.floor();
                let wx = gx - x0;
                let wy = gy - y0;
                let ix0 = x0.into_f64() as isize;
                let iy0 = y0.into_f64() as isize;
                let ob = ((n * d.oh + oy) * d.ow + ox) * d.c;
                for c in 0..d.c {
                    let v00 = corner(x, &d, n, iy0, ix0, c);
                    let v01 = corner(x, &d, n, iy0, ix0 + 1, c);
                    let v10 = corner(x, &d, n, iy0 + 1, ix0, c);
                    let v11 = corner(x, &d, n, iy0 + 1, ix0 + 1, c);
                    let top = v00 * (one - wx) + v01 * wx;
                    let bot = v10 * (one - wx) + v11 * wx;
                    out[ob + c] = top * (one - wy) + bot * wy;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter<F: Scalar>(
    dx: &mut [F],
    d: &SampleDims,
    n: usize,
    iy: isize,
    ix: isize,
    c: usize,
    v: F,
) {
    if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
        dx[(((n * d.h + iy as usize) * d.w) + ix as usize) * d.c + c] += v;
    }
}

pub(crate) fn bilinear_backward<F: Scalar>(
    x: &[F],
    grid: &[F],
    dout: &[F],
    dx: Option<&mut [F]>,
    dgrid: Option<&mut [F]>,
    d: SampleDims,
) {
    let one = F::one();
    let mut dx = dx;
    let mut dgrid = dgrid;
    for n in 0..d.n {
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let gb = ((n * d.oh + oy) * d.ow + ox) * 2;
                let gx = grid[gb];
                let gy = grid[gb + 1];
                let x0 = gx.floor();
                let y0 = gy.floor();
                let wx = gx - x0;
                let wy = gy - y0;
                let ix0 = x0.into_f64() as isize;
                let iy0 = y0.into_f64() as isize;
                let ob = ((n * d.oh + oy) * d.ow + ox) * d.c;
                let mut sx = F::zero();
                let mut sy = F::zero();
                for c in 0..d.c {
                    let g = dout[ob + c];
                    if let Some(dxm) = dx.as_deref_mut() {
                        scatter(dxm, &d, n, iy0, ix0, c, g * (one - wx) * (one - wy));
                        scatter(dxm, &d, n, iy0, ix0 + 1, c, g * wx * (one - wy));
                        scatter(dxm, &d, n, iy0 + 1, ix0, c, g * (one - wx) * wy);
                        scatter(dxm, &d, n, iy0 + 1, ix0 + 1, c, g * wx * wy);
                    }
                    if dgrid.is_some() {
                        let v00 = corner(x, &d, n, iy0, ix0, c);
                        let v01 = corner(x, &d, n, iy0, ix0 + 1, c);
                        let v10 = corner(x, &d, n, iy0 + 1, ix0, c);
                        let v11 = corner(x, &d, n, iy0 + 1, ix0 + 1, c);
                        sx += g * ((v01 - v00) * (one - wy) + (v11 - v10) * wy);
                        sy += g * ((v10 - v00) * (one - wx) + (v11 - v01) * wx);
                    }
                }
                if let Some(dg) = dgrid.as_deref_mut() {
                    dg[gb] += sx;
                    dg[gb + 1] += sy;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GridDims {
    pub n: usize,
    pub oh: usize,
    pub ow: usize,
    pub in_h: usize,
    pub in_w: usize,
}

/// Normalized output coordinate in [-1, 1], align-corners convention.
#[inline]
fn norm_coord(i: usize, dim: usize) -> f64 {
    let d = (dim - 1).max(1) as f64;
    2.0 * i as f64 / d - 1.0
}

/// Runs in f64 internally so an identity theta lands exactly on the pixel
/// lattice even when `F` is f32.
pub(crate) fn affine_grid_forward<F: Scalar>(theta: &[F], out: &mut [F], d: GridDims) {
    let sx = (d.in_w - 1) as f64;
    let sy = (d.in_h - 1) as f64;
    for n in 0..d.n {
        let t: Vec<f64> = theta[n * 6..(n + 1) * 6].iter().map(|v| v.into_f64()).collect();
        for oy in 0..d.oh {
            let yo: f64 = norm_coord(oy, d.oh);
            for ox in 0..d.ow {
                let xo: f64 = norm_coord(ox, d.ow);
                let xs = t[0] * xo + t[1] * yo + t[2];
                let ys = t[3] * xo + t[4] * yo + t[5];
                let gb = ((n * d.oh + oy) * d.ow + ox) * 2;
                out[gb] = F::from_f64((xs + 1.0) * 0.5 * sx);
                out[gb + 1] = F::from_f64((ys + 1.0) * 0.5 * sy);
            }
        }
    }
}

pub(crate) fn affine_grid_backward<F: Scalar>(dout: &[F], dtheta: &mut [F], d: GridDims) {
    let sx = F::from_f64((d.in_w - 1) as f64 * 0.5);
    let sy = F::from_f64((d.in_h - 1) as f64 * 0.5);
    for n in 0..d.n {
        let dt = &mut dtheta[n * 6..(n + 1) * 6];
        for oy in 0..d.oh {
            let yo = F::from_f64(norm_coord(oy, d.oh));
            for ox in 0..d.ow {
                let xo = F::from_f64(norm_coord(ox, d.ow));
                let gb = ((n * d.oh + oy) * d.ow + ox) * 2;
                let gx = dout[gb] * sx;
                let gy = dout[gb + 1] * sy;
                dt[0] += gx * xo;
                dt[1] += gx * yo;
                dt[2] += gx;
                dt[3] += gy * xo;
                dt[4] += gy * yo;
                dt[5] += gy;
            }
        }
    }
}

/// Orthonormal 8x8 DCT-II basis, row u holds c(u)*cos((2x+1)u*pi/16).
fn dct_basis<F: Scalar>() -> [[F; 8]; 8] {
    let mut d = [[F::zero(); 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let cu = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = F::from_f64(
                cu * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos(),
            );
        }
    }
    d
}

/// Applies `Y = D X D^T` (forward) or `X = D^T Y D` (inverse) on every 8x8
/// spatial block of every channel.
pub(crate) fn dct8x8_apply<F: Scalar>(
    x: &[F],
    out: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    inverse: bool,
) {
    let basis = dct_basis::<F>();
    let mut block = [[F::zero(); 8]; 8];
    let mut tmp = [[F::zero(); 8]; 8];
    let mut res = [[F::zero(); 8]; 8];
    for ni in 0..n {
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                for ch in 0..c {
                    for (i, brow) in block.iter_mut().enumerate() {
                        let rb = (((ni * h + by * 8 + i) * w) + bx * 8) * c + ch;
                        for (j, bv) in brow.iter_mut().enumerate() {
                            *bv = x[rb + j * c];
                        }
                    }
                    if !inverse {
                        // tmp = D * block ; res = tmp * D^T
                        for u in 0..8 {
                            for j in 0..8 {
                                let mut s = F::zero();
                                for i in 0..8 {
                                    s += basis[u][i] * block[i][j];
                                }
                                tmp[u][j] = s;
                            }
                        }
                        for u in 0..8 {
                            for v in 0..8 {
                                let mut s = F::zero();
                                for j in 0..8 {
                                    s += tmp[u][j] * basis[v][j];
                                }
                                res[u][v] = s;
                            }
                        }
                    } else {
                        // tmp = D^T * block ; res = tmp * D
                        for i in 0..8 {
                            for vj in 0..8 {
                                let mut s = F::zero();
                                for u in 0..8 {
                                    s += basis[u][i] * block[u][vj];
                                }
                                tmp[i][vj] = s;
                            }
                        }
                        for i in 0..8 {
                            for j in 0..8 {
                                let mut s = F::zero();
                                for v in 0..8 {
                                    s += tmp[i][v] * basis[v][j];
                                }
                                res[i][j] = s;
                            }
                        }
                    }
                    for (i, rrow) in res.iter().enumerate() {
                        let rb = (((ni * h + by * 8 + i) * w) + bx * 8) * c + ch;
                        for (j, &rv) in rrow.iter().enumerate() {
                            out[rb + j * c] = rv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample2x_forward<F: Scalar>(
    x: &[F],
    out: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    for ni in 0..n {
        for y in 0..2 * h {
            let iy = y / 2;
            for xo in 0..2 * w {
                let ix = xo / 2;
                let ib = ((ni * h + iy) * w + ix) * c;
                let ob = ((ni * 2 * h + y) * 2 * w + xo) * c;
                out[ob..ob + c].copy_from_slice(&x[ib..ib + c]);
            }
        }
    }
}

pub(crate) fn upsample2x_backward<F: Scalar>(
    dout: &[F],
    dx: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    for ni in 0..n {
        for y in 0..2 * h {
            let iy = y / 2;
            for xo in 0..2 * w {
                let ix = xo / 2;
                let ib = ((ni * h + iy) * w + ix) * c;
                let ob = ((ni * 2 * h + y) * 2 * w + xo) * c;
                for ch in 0..c {
                    dx[ib + ch] += dout[ob + ch];
                }
            }
        }
    }
}

pub(crate) fn maxpool2x2_forward<F: Scalar>(
    x: &[F],
    out: &mut [F],
    arg: &mut [u8],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    let (oh, ow) = (h / 2, w / 2);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let ob = ((ni * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0u8;
                    for (i, (dy, dx_)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let ib = ((ni * h + oy * 2 + dy) * w + ox * 2 + dx_) * c + ch;
                        if x[ib] > best {
                            best = x[ib];
                            best_i = i as u8;
                        }
                    }
                    out[ob + ch] = best;
                    arg[ob + ch] = best_i;
                }
            }
        }
    }
}

pub(crate) fn maxpool2x2_backward<F: Scalar>(
    dout: &[F],
    arg: &[u8],
    dx: &mut [F],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) {
    let (oh, ow) = (h / 2, w / 2);
    let offs = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let ob = ((ni * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let (dy, dx_) = offs[arg[ob + ch] as usize];
                    let ib = ((ni * h + oy * 2 + dy) * w + ox * 2 + dx_) * c + ch;
                    dx[ib] += dout[ob + ch];
                }
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Stable per-element binary cross-entropy with logits:
/// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
#[inline]
pub(crate) fn bce_term<F: Scalar>(z: F, t: F) -> F {
    z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln()
}

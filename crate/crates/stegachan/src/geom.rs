//! Homography estimation, quadrilateral detection, and rectification back to
//! the canonical stamp frame.
//!
//! Geometry runs in f64; image payloads stay f32 `[1,H,W,C]` tensors. The
//! canonical stamp frame uses pixel-edge corners, i.e. a `side x side` stamp
//! spans `[-0.5, side-0.5]` in both axes, so polygon areas line up with pixel
//! counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// 3x3 projective transform, row-major, normalized so `h[8] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            h: [1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let h = &self.h;
        let w = h[6] * p[0] + h[7] * p[1] + h[8];
        [
            (h[0] * p[0] + h[1] * p[1] + h[2]) / w,
            (h[3] * p[0] + h[4] * p[1] + h[5]) / w,
        ]
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() < 1e-9 {
            return Err(Error::Numeric("homography is not invertible".into()));
        }
        let h = &self.h;
        let adj = [
            h[4] * h[8] - h[5] * h[7],
            h[2] * h[7] - h[1] * h[8],
            h[1] * h[5] - h[2] * h[4],
            h[5] * h[6] - h[3] * h[8],
            h[0] * h[8] - h[2] * h[6],
            h[2] * h[3] - h[0] * h[5],
            h[3] * h[7] - h[4] * h[6],
            h[1] * h[6] - h[0] * h[7],
            h[0] * h[4] - h[1] * h[3],
        ];
        let mut inv = [0.0; 9];
        for (o, a) in inv.iter_mut().zip(&adj) {
            *o = a / d;
        }
        Homography::normalized(inv)
    }

    fn normalized(mut h: [f64; 9]) -> Result<Homography> {
        if h[8].abs() < 1e-12 {
            return Err(Error::Numeric("homography h33 vanishes".into()));
        }
        let s = h[8];
        for v in &mut h {
            *v /= s;
        }
        Ok(Homography { h })
    }

    /// `self` composed after `other`: `(self * other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let a = &self.h;
        let b = &other.h;
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] =
                    a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Homography::normalized(m)
    }
}

/// Solves the direct linear transform mapping `src[i] -> dst[i]` exactly.
///
/// Eight equations in the eight unknowns (h33 pinned to 1), Gaussian
/// elimination with partial pivoting. Collinear points degenerate the system
/// and are reported as an error.
pub fn solve_homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Homography> {
    let mut a = [[0.0f64; 9]; 8]; // augmented [A | b]
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Forward elimination.
    for col in 0..8 {
        let mut piv = col;
        for row in col + 1..8 {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Numeric(
                "degenerate point configuration for homography".into(),
            ));
        }
        a.swap(col, piv);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..9 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    // Back substitution.
    let mut sol = [0.0f64; 8];
    for col in (0..8).rev() {
        let mut s = a[col][8];
        for k in col + 1..8 {
            s -= a[col][k] * sol[k];
        }
        sol[col] = s / a[col][col];
    }
    let h = Homography {
        h: [
            sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0,
        ],
    };
    if h.det().abs() < 1e-9 {
        return Err(Error::Numeric("homography is singular".into()));
    }
    Ok(h)
}

/// Four scene-space corner points, clockwise from the top-left corner
/// (image coordinates, y down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub corners: [[f64; 2]; 4],
}

impl Quad {
    pub fn new(corners: [[f64; 2]; 4]) -> Result<Quad> {
        let q = Quad { corners }.ordered();
        q.validate()?;
        Ok(q)
    }

    /// Shoelace area (positive).
    pub fn area(&self) -> f64 {
        let c = &self.corners;
        let mut s = 0.0;
        for i in 0..4 {
            let j = (i + 1) % 4;
            s += c[i][0] * c[j][1] - c[j][0] * c[i][1];
        }
        (s / 2.0).abs()
    }

    /// Reorders corners clockwise (screen coordinates) starting from the one
    /// closest to the top-left.
    pub fn ordered(&self) -> Quad {
        let mut c = self.corners;
        let cx = c.iter().map(|p| p[0]).sum::<f64>() / 4.0;
        let cy = c.iter().map(|p| p[1]).sum::<f64>() / 4.0;
        // atan2 sorts counterclockwise in math coords, which is clockwise on
        // screen (y down).
        c.sort_by(|p, q| {
            let ap = (p[1] - cy).atan2(p[0] - cx);
            let aq = (q[1] - cy).atan2(q[0] - cx);
            ap.partial_cmp(&aq).unwrap()
        });
        let start = (0..4)
            .min_by(|&i, &j| {
                let si = c[i][0] + c[i][1];
                let sj = c[j][0] + c[j][1];
                si.partial_cmp(&sj).unwrap()
            })
            .unwrap();
        c.rotate_left(start);
        Quad { corners: c }
    }

    pub fn validate(&self) -> Result<()> {
        if self.area() <= 0.0 {
            return Err(Error::Numeric("quad has zero area".into()));
        }
        if !self.is_convex() {
            return Err(Error::Numeric("quad is not convex".into()));
        }
        Ok(())
    }

    pub fn is_convex(&self) -> bool {
        let c = &self.corners;
        let mut sign = 0.0f64;
        for i in 0..4 {
            let p = c[i];
            let q = c[(i + 1) % 4];
            let r = c[(i + 2) % 4];
            let cross = (q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0]);
            if cross.abs() < 1e-12 {
                return false;
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
        true
    }
}

/// Corners of the canonical stamp frame in pixel-edge convention.
pub fn canonical_corners(side: usize) -> [[f64; 2]; 4] {
    let s = side as f64 - 0.5;
    [[-0.5, -0.5], [s, -0.5], [s, s], [-0.5, s]]
}

fn expect_image(t: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Config(format!(
            "{} must be a [1,H,W,C] tensor, got {:?}",
            what, s
        )));
    }
    Ok((s[1], s[2], s[3]))
}

fn bilinear_pixel(data: &[f32], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f32]) {
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let wx = (x - x0 as f64) as f32;
    let wy = (y - y0 as f64) as f32;
    let fetch = |yy: isize, xx: isize, ch: usize| -> f32 {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            0.0
        } else {
            data[((yy as usize * w) + xx as usize) * c + ch]
        }
    };
    for (ch, o) in out.iter_mut().enumerate() {
        let v00 = fetch(y0, x0, ch);
        let v01 = fetch(y0, x0 + 1, ch);
        let v10 = fetch(y0 + 1, x0, ch);
        let v11 = fetch(y0 + 1, x0 + 1, ch);
        *o = (v00 * (1.0 - wx) + v01 * wx) * (1.0 - wy) + (v10 * (1.0 - wx) + v11 * wx) * wy;
    }
}

/// Warps `stamp` into `background` under `h` (canonical stamp frame to scene
/// coordinates). Returns the composited scene, the ground-truth mask
/// (`[1,H,W,1]`, 1.0 where the stamp landed) and the scene-space corner quad.
///
/// The quad must lie fully inside the background frame; otherwise the call is
/// rejected and the caller resamples its homography.
pub fn composite_stamp(
    stamp: &Tensor<f32>,
    background: &Tensor<f32>,
    h: &Homography,
) -> Result<(Tensor<f32>, Tensor<f32>, Quad)> {
    let (sh, sw, sc) = expect_image(stamp, "stamp")?;
    let (bh, bw, bc) = expect_image(background, "background")?;
    if sh != sw {
        return Err(Error::Config("stamp must be square".into()));
    }
    if sc != bc {
        return Err(Error::Config("stamp/background channel mismatch".into()));
    }
    let side = sh;
    let corners = canonical_corners(side).map(|p| h.apply(p));
    for p in &corners {
        if p[0] < -0.5 || p[0] > bw as f64 - 0.5 || p[1] < -0.5 || p[1] > bh as f64 - 0.5 {
            return Err(Error::Data(
                "stamp quad exits the background frame; resample the homography".into(),
            ));
        }
    }
    let quad = Quad::new(corners)?;
    let hinv = h.inverse()?;

    let mut scene = background.clone();
    let mut mask = Tensor::<f32>::zeros(&[1, bh, bw, 1]);
    let (x0, x1, y0, y1) = {
        let xs = corners.iter().map(|p| p[0]);
        let ys = corners.iter().map(|p| p[1]);
        let xmin = xs.clone().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let xmax = (xs.fold(f64::MIN, f64::max).ceil() as usize).min(bw - 1);
        let ymin = ys.clone().fold(f64::MAX, f64::min).floor().max(0.0) as usize;
        let ymax = (ys.fold(f64::MIN, f64::max).ceil() as usize).min(bh - 1);
        (xmin, xmax, ymin, ymax)
    };
    let sdata = stamp.data();
    let lim = side as f64 - 0.5;
    let mut px = vec![0.0f32; sc];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = hinv.apply([x as f64, y as f64]);
            if p[0] < -0.5 || p[0] >= lim || p[1] < -0.5 || p[1] >= lim {
                continue;
            }
            // Clamp the half-pixel edge band onto the stamp border instead of
            // blending with zero padding.
            let sx = p[0].clamp(0.0, side as f64 - 1.0);
            let sy = p[1].clamp(0.0, side as f64 - 1.0);
            bilinear_pixel(sdata, side, side, sc, sx, sy, &mut px);
            let ob = (y * bw + x) * bc;
            scene.data_mut()[ob..ob + bc].copy_from_slice(&px);
            mask.data_mut()[y * bw + x] = 1.0;
        }
    }
    Ok((scene, mask, quad))
}

/// Why no quad came back from a mask. An expected outcome, not a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectFailure {
    NoRegion,
    MultipleRegions(usize),
    RegionTooSmall(usize),
}

impl std::fmt::Display for DetectFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectFailure::NoRegion => write!(f, "no region found in mask"),
            DetectFailure::MultipleRegions(n) => write!(f, "{} disjoint regions in mask", n),
            DetectFailure::RegionTooSmall(a) => write!(f, "region too small ({} px)", a),
        }
    }
}

/// Thresholds the mask at 0.5, requires exactly one connected region of at
/// least 64 px, then fits a quadrilateral to its convex hull by merging the
/// shortest hull edges until four remain.
pub fn detect_quad(mask: &Tensor<f32>) -> std::result::Result<Quad, DetectFailure> {
    let s = mask.shape();
    let (h, w) = (s[1], s[2]);
    let data = mask.data();
    let on = |x: usize, y: usize| data[(y * w + x) * s[3]] > 0.5;

    // Connected components, 4-neighborhood.
    let mut label = vec![0u32; h * w];
    let mut regions: Vec<Vec<[f64; 2]>> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) || label[y * w + x] != 0 {
                continue;
            }
            let id = regions.len() as u32 + 1;
            let mut pts = Vec::new();
            let mut stack = vec![(x, y)];
            label[y * w + x] = id;
            while let Some((cx, cy)) = stack.pop() {
                pts.push([cx as f64, cy as f64]);
                let mut push = |nx: usize, ny: usize, stack: &mut Vec<(usize, usize)>| {
                    if on(nx, ny) && label[ny * w + nx] == 0 {
                        label[ny * w + nx] = id;
                        stack.push((nx, ny));
                    }
                };
                if cx > 0 {
                    push(cx - 1, cy, &mut stack);
                }
                if cx + 1 < w {
                    push(cx + 1, cy, &mut stack);
                }
                if cy > 0 {
                    push(cx, cy - 1, &mut stack);
                }
                if cy + 1 < h {
                    push(cx, cy + 1, &mut stack);
                }
            }
            regions.push(pts);
        }
    }
    match regions.len() {
        0 => return Err(DetectFailure::NoRegion),
        1 => {}
        n => return Err(DetectFailure::MultipleRegions(n)),
    }
    let pts = &regions[0];
    if pts.len() < 64 {
        return Err(DetectFailure::RegionTooSmall(pts.len()));
    }

    let hull = convex_hull(pts);
    let corners = hull_to_quad(hull).ok_or(DetectFailure::NoRegion)?;
    Quad::new(corners).map_err(|_| DetectFailure::NoRegion)
}

/// Andrew monotone chain; returns the hull counterclockwise in math coords.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn line_intersection(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> Option<[f64; 2]> {
    let r = [b[0] - a[0], b[1] - a[1]];
    let s = [d[0] - c[0], d[1] - c[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-9 {
        return None;
    }
    let t = ((c[0] - a[0]) * s[1] - (c[1] - a[1]) * s[0]) / denom;
    Some([a[0] + t * r[0], a[1] + t * r[1]])
}

/// Merges the shortest hull edge into the intersection of its neighbors until
/// exactly four vertices remain.
fn hull_to_quad(mut hull: Vec<[f64; 2]>) -> Option<[[f64; 2]; 4]> {
    if hull.len() < 4 {
        return None;
    }
    while hull.len() > 4 {
        let n = hull.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let li = edge_len(&hull, i);
            let lj = edge_len(&hull, j);
            li.partial_cmp(&lj).unwrap()
        });
        let mut merged = false;
        for &i in &order {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            let next2 = (i + 2) % n;
            if let Some(p) = line_intersection(hull[prev], hull[i], hull[next], hull[next2]) {
                hull[i] = p;
                hull.remove(next);
                merged = true;
                break;
            }
        }
        if !merged {
            // Neighbor edges parallel everywhere; drop the vertex with the
            // straightest interior angle instead.
            let mut best = 0;
            let mut best_dev = f64::MAX;
            for i in 0..n {
                let prev = hull[(i + n - 1) % n];
                let cur = hull[i];
                let next = hull[(i + 1) % n];
                let a = [cur[0] - prev[0], cur[1] - prev[1]];
                let b = [next[0] - cur[0], next[1] - cur[1]];
                let cross = (a[0] * b[1] - a[1] * b[0]).abs();
                if cross < best_dev {
                    best_dev = cross;
                    best = i;
                }
            }
            hull.remove(best);
        }
    }
    Some([hull[0], hull[1], hull[2], hull[3]])
}

fn edge_len(hull: &[[f64; 2]], i: usize) -> f64 {
    let j = (i + 1) % hull.len();
    let dx = hull[j][0] - hull[i][0];
    let dy = hull[j][1] - hull[i][1];
    (dx * dx + dy * dy).sqrt()
}

/// Warps the quad region of `scene` back to a `side x side` canonical stamp
/// via `solve_homography(canonical, quad)` and bilinear resampling.
pub fn rectify(scene: &Tensor<f32>, quad: &Quad, side: usize) -> Result<Tensor<f32>> {
    quad.validate()?;
    let (h, w, c) = expect_image(scene, "scene")?;
    let hmap = solve_homography(&canonical_corners(side), &quad.corners)?;
    let mut out = Tensor::<f32>::zeros(&[1, side, side, c]);
    let sdata = scene.data();
    let mut px = vec![0.0f32; c];
    for y in 0..side {
        for x in 0..side {
            let p = hmap.apply([x as f64, y as f64]);
            bilinear_pixel(sdata, h, w, c, p[0], p[1], &mut px);
            let ob = (y * side + x) * c;
            out.data_mut()[ob..ob + c].copy_from_slice(&px);
        }
    }
    Ok(out)
}

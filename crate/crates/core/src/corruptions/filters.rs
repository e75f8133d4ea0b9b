//! Plane-level filtering helpers shared by the corruptions.

use rand::Rng;

/// Half-sample symmetric reflection of `i` into `[0, n)`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 2-D convolution of one `size×size` plane with an odd-sized square kernel.
pub(crate) fn convolve(plane: &[f32], size: usize, kernel: &[f32], ksize: usize) -> Vec<f32> {
    let half = (ksize / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for ky in 0..ksize {
                let sy = reflect(y as isize + ky as isize - half, size);
                for kx in 0..ksize {
                    let w = kernel[ky * ksize + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - half, size);
                    acc += w * plane[sy * size + sx];
                }
            }
            out[y * size + x] = acc;
        }
    }
    out
}

pub(crate) fn gaussian_kernel_1d(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with reflect padding.
pub(crate) fn gaussian_blur(plane: &[f32], size: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel_1d(sigma);
    let half = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * plane[y * size + reflect(x as isize + i as isize - half, size)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[reflect(y as isize + i as isize - half, size) * size + x])
                .sum();
        }
    }
    out
}

/// Normalized disk of radius `r`; returns (kernel, side).
pub(crate) fn disk_kernel(r: f32) -> (Vec<f32>, usize) {
    let ri = r.ceil() as isize;
    let side = (2 * ri + 1) as usize;
    let mut k = vec![0.0; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dx * dx + dy * dy) as f32 <= r * r {
                k[((dy + ri) as usize) * side + (dx + ri) as usize] = 1.0;
            }
        }
    }
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    (k, side)
}

/// Normalized anti-aliased line of `length` pixels through the center at
/// `angle` radians.
pub(crate) fn line_kernel(length: f32, angle: f32) -> (Vec<f32>, usize) {
    let ri = (length / 2.0).ceil() as isize;
    let side = (2 * ri + 1) as usize;
    let mut k = vec![0.0; side * side];
    let samples = (length * 4.0).ceil() as usize + 1;
    let (dx, dy) = (angle.cos(), angle.sin());
    for s in 0..samples {
        let t = -length / 2.0 + length * s as f32 / (samples - 1).max(1) as f32;
        let (fx, fy) = (t * dx + ri as f32, t * dy + ri as f32);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (wx, wy) = (fx - x0, fy - y0);
        for (ox, oy, w) in [
            (0, 0, (1.0 - wx) * (1.0 - wy)),
            (1, 0, wx * (1.0 - wy)),
            (0, 1, (1.0 - wx) * wy),
            (1, 1, wx * wy),
        ] {
            let (x, y) = (x0 as isize + ox, y0 as isize + oy);
            if (0..side as isize).contains(&x) && (0..side as isize).contains(&y) {
                k[y as usize * side + x as usize] += w;
            }
        }
    }
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    (k, side)
}

/// Bilinear sample at fractional coordinates, reflecting outside the plane.
pub(crate) fn bilinear(plane: &[f32], size: usize, y: f32, x: f32) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (wy, wx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| plane[reflect(yy, size) * size + reflect(xx, size)];
    (1.0 - wy) * ((1.0 - wx) * at(y0, x0) + wx * at(y0, x0 + 1))
        + wy * ((1.0 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1))
}

/// Diamond-square fractal, cropped to `size×size` and normalized to `[0,1]`.
/// `decay` controls how fast the random amplitude shrinks per octave.
pub(crate) fn plasma<R: Rng>(rng: &mut R, size: usize, decay: f32) -> Vec<f32> {
    let mut n = 1;
    while n + 1 < size {
        n *= 2;
    }
    let side = n + 1;
    let mut g = vec![0.0f32; side * side];
    let mut amp = 1.0f32;
    let mut step = n;
    while step > 1 {
        let half = step / 2;
        // squares
        for y in (0..n).step_by(step) {
            for x in (0..n).step_by(step) {
                let avg = (g[y * side + x]
                    + g[y * side + x + step]
                    + g[(y + step) * side + x]
                    + g[(y + step) * side + x + step])
                    / 4.0;
                g[(y + half) * side + x + half] = avg + amp * rng.gen_range(-1.0..1.0);
            }
        }
        // diamonds
        for y in (0..side).step_by(half) {
            let start = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (start..side).step_by(step) {
                let mut total = 0.0;
                let mut count = 0.0;
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let yy = y as isize + dy * half as isize;
                    let xx = x as isize + dx * half as isize;
                    if (0..side as isize).contains(&yy) && (0..side as isize).contains(&xx) {
                        total += g[yy as usize * side + xx as usize];
                        count += 1.0;
                    }
                }
                g[y * side + x] = total / count + amp * rng.gen_range(-1.0..1.0);
            }
        }
        step = half;
        amp /= decay;
    }
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        out.extend_from_slice(&g[y * side..y * side + size]);
    }
    let lo = out.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    out.iter_mut().for_each(|v| *v = (*v - lo) / span);
    out
}

const LUMA_Q: [f32; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_Q: [f32; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56.,
    99., 99., 99., 99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99.,
];

/// Standard table scaled to a 1–100 quality (IJG convention).
fn quant_table(base: &[f32; 64], quality: f32) -> [f32; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(base) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_matrix() -> [[f32; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f32 * u as f32 * std::f32::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Lossy 8×8 DCT round trip on three RGB planes in `[0,1]`.
pub(crate) fn jpeg_roundtrip(planes: &mut [Vec<f32>; 3], size: usize, quality: f32) {
    let d = dct_matrix();
    let tables = [quant_table(&LUMA_Q, quality), quant_table(&CHROMA_Q, quality), quant_table(&CHROMA_Q, quality)];
    let n = size * size;
    // RGB → YCbCr in 0..255, level-shifted
    let mut ycc: [Vec<f32>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (r, g, b) = (planes[0][i] * 255.0, planes[1][i] * 255.0, planes[2][i] * 255.0);
        ycc[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
        ycc[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
        ycc[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    let blocks = size.div_ceil(8);
    for (plane, table) in ycc.iter_mut().zip(&tables) {
        for by in 0..blocks {
            for bx in 0..blocks {
                let mut block = [[0.0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by * 8 + y).min(size - 1);
                        let sx = (bx * 8 + x).min(size - 1);
                        *v = plane[sy * size + sx];
                    }
                }
                let mut coef = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            for x in 0..8 {
                                acc += d[u][y] * d[v][x] * block[y][x];
                            }
                        }
                        let q = table[u * 8 + v];
                        coef[u][v] = (acc / q).round() * q;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let sy = by * 8 + y;
                        let sx = bx * 8 + x;
                        if sy >= size || sx >= size {
                            continue;
                        }
                        let mut acc = 0.0;
                        for u in 0..8 {
                            for v in 0..8 {
                                acc += d[u][y] * d[v][x] * coef[u][v];
                            }
                        }
                        plane[sy * size + sx] = acc;
                    }
                }
            }
        }
    }
    for i in 0..n {
        let (y, cb, cr) = (ycc[0][i] + 128.0, ycc[1][i], ycc[2][i]);
        planes[0][i] = ((y + 1.402 * cr) / 255.0).clamp(0.0, 1.0);
        planes[1][i] = ((y - 0.344_136 * cb - 0.714_136 * cr) / 255.0).clamp(0.0, 1.0);
        planes[2][i] = ((y + 1.772 * cb) / 255.0).clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn kernels_are_normalized() {
        for r in [1.0, 2.5] {
            let (k, _) = disk_kernel(r);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let (k, _) = line_kernel(7.0, 0.3);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!((gaussian_kernel_1d(1.3).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn blur_preserves_constants() {
        let plane = vec![0.25; 16 * 16];
        let (k, side) = disk_kernel(2.0);
        for v in convolve(&plane, 16, &k, side).into_iter().chain(gaussian_blur(&plane, 16, 1.5)) {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let d = dct_matrix();
        for a in 0..8 {
            for b in 0..8 {
                let dot: f32 = (0..8).map(|x| d[a][x] * d[b][x]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn jpeg_near_lossless_at_top_quality() {
        let size = 16;
        let base: Vec<f32> = (0..size * size).map(|i| ((i % 7) as f32 / 7.0) * 0.5 + 0.25).collect();
        let mut planes = [base.clone(), base.clone(), base.clone()];
        jpeg_roundtrip(&mut planes, size, 100.0);
        let err: f32 = planes[0].iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 0.03, "max error {err}");
    }
}

//! Test-time image perturbations.
//!
//! Five corruption kinds applied to observation frames only (the simulator
//! state is never touched): upper-left shift, counterclockwise rotation,
//! color jitter, zero-filled occlusion rectangles, and uniform-noise
//! rectangles. Parameter ranges follow the evaluation protocol; all outputs
//! are clipped to `[0, 1]` and sampled from an explicit RNG stream so a
//! given seed reproduces the exact corruption.

use crate::error::CoreError;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PerturbKind {
    None,
    Shift,
    Rotation,
    ColorJitter,
    Occlusion,
    Noise,
}

pub const ALL_PERTURBATIONS: [PerturbKind; 5] = [
    PerturbKind::Shift,
    PerturbKind::Rotation,
    PerturbKind::ColorJitter,
    PerturbKind::Occlusion,
    PerturbKind::Noise,
];

impl PerturbKind {
    pub fn parse(s: &str) -> Result<PerturbKind, CoreError> {
        match s {
            "none" => Ok(PerturbKind::None),
            "shift" => Ok(PerturbKind::Shift),
            "rotation" => Ok(PerturbKind::Rotation),
            "color_jitter" => Ok(PerturbKind::ColorJitter),
            "occlusion" => Ok(PerturbKind::Occlusion),
            "noise" => Ok(PerturbKind::Noise),
            other => Err(CoreError::Config(format!(
                "unknown perturbation '{other}' (expected none|shift|rotation|color_jitter|occlusion|noise)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::None => "none",
            PerturbKind::Shift => "shift",
            PerturbKind::Rotation => "rotation",
            PerturbKind::ColorJitter => "color_jitter",
            PerturbKind::Occlusion => "occlusion",
            PerturbKind::Noise => "noise",
        }
    }
}

/// Bilinear sample of one channel plane at fractional (y, x); zero outside.
fn bilinear(plane: &[f32], size: usize, fy: f32, fx: f32) -> f32 {
    let y0 = fy.floor();
    let x0 = fx.floor();
    let wy = fy - y0;
    let wx = fx - x0;
    let mut acc = 0f32;
    for (dy, wy_) in [(0i64, 1.0 - wy), (1, wy)] {
        for (dx, wx_) in [(0i64, 1.0 - wx), (1, wx)] {
            let y = y0 as i64 + dy;
            let x = x0 as i64 + dx;
            let v = if y >= 0 && y < size as i64 && x >= 0 && x < size as i64 {
                plane[y as usize * size + x as usize]
            } else {
                0.0
            };
            acc += wy_ * wx_ * v;
        }
    }
    acc
}

fn warp(frame: &[f32], size: usize, map: impl Fn(f32, f32) -> (f32, f32)) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0f32; frame.len()];
    for c in 0..3 {
        let src = &frame[c * plane..(c + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = map(y as f32, x as f32);
                out[c * plane + y * size + x] = bilinear(src, size, fy, fx).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Translate content toward the upper-left by (sy, sx) pixels (>= 0);
/// the vacated lower-right band is zero-filled.
pub fn shift_frame(frame: &[f32], size: usize, sy: f32, sx: f32) -> Vec<f32> {
    warp(frame, size, |y, x| (y + sy, x + sx))
}

/// Rotate counterclockwise by `deg` degrees about the frame center,
/// bilinear resampling, zero fill at the corners.
pub fn rotate_frame(frame: &[f32], size: usize, deg: f32) -> Vec<f32> {
    let rad = deg.to_radians();
    let (s, c) = rad.sin_cos();
    let ctr = (size as f32 - 1.0) / 2.0;
    // Inverse map: rotate destination coordinates clockwise to find the
    // source pixel (y axis points down, so this is a CCW visual rotation).
    warp(frame, size, move |y, x| {
        let dy = y - ctr;
        let dx = x - ctr;
        (ctr + c * dy + s * dx, ctr + c * dx - s * dy)
    })
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Apply brightness, contrast, saturation, and sharpness factors, in that
/// fixed order; factor 1 is the identity for each stage.
pub fn color_jitter_frame(frame: &[f32], size: usize, factors: [f32; 4]) -> Vec<f32> {
    let plane = size * size;
    let [fb, fc, fs, fsh] = factors;
    let mut out = frame.to_vec();
    // Brightness.
    for v in &mut out {
        *v *= fb;
    }
    // Contrast about the mean luma.
    let mut mean = 0f64;
    for i in 0..plane {
        mean += luma(out[i], out[plane + i], out[2 * plane + i]) as f64;
    }
    let mean = (mean / plane as f64) as f32;
    for v in &mut out {
        *v = mean + (*v - mean) * fc;
    }
    // Saturation about per-pixel luma.
    for i in 0..plane {
        let l = luma(out[i], out[plane + i], out[2 * plane + i]);
        for c in 0..3 {
            let v = &mut out[c * plane + i];
            *v = l + (*v - l) * fs;
        }
    }
    // Sharpness: unsharp-mask blend against a 3x3 Gaussian blur.
    let mut blurred = vec![0f32; out.len()];
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    for c in 0..3 {
        let src = &out[c * plane..(c + 1) * plane];
        let dst = &mut blurred[c * plane..(c + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0f32;
                let mut wsum = 0f32;
                for dy in -1i64..=1 {
                    let yy = y as i64 + dy;
                    if yy < 0 || yy >= size as i64 {
                        continue;
                    }
                    for dx in -1i64..=1 {
                        let xx = x as i64 + dx;
                        if xx < 0 || xx >= size as i64 {
                            continue;
                        }
                        let w = K[(dy + 1) as usize] * K[(dx + 1) as usize];
                        acc += w * src[yy as usize * size + xx as usize];
                        wsum += w;
                    }
                }
                dst[y * size + x] = acc / wsum;
            }
        }
    }
    for (v, b) in out.iter_mut().zip(&blurred) {
        *v = (b + (*v - b) * fsh).clamp(0.0, 1.0);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub enum RectFill {
    Zero,
    UniformNoise,
}

/// Overwrite axis-aligned rectangles (x0, y0, w, h) with zeros or noise.
pub fn fill_rects(
    frame: &[f32],
    size: usize,
    rects: &[(usize, usize, usize, usize)],
    fill: RectFill,
    rng: &mut StreamRng,
) -> Vec<f32> {
    let plane = size * size;
    let mut out = frame.to_vec();
    for &(x0, y0, w, h) in rects {
        assert!(x0 + w <= size && y0 + h <= size, "rect out of bounds");
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    out[c * plane + y * size + x] = match fill {
                        RectFill::Zero => 0.0,
                        RectFill::UniformNoise => rng.uniform(),
                    };
                }
            }
        }
    }
    out
}

fn sample_rects(rng: &mut StreamRng, size: usize) -> Vec<(usize, usize, usize, usize)> {
    let max_side = ((0.3 * size as f32) as usize).max(1);
    let count = rng.int_in(1, 3);
    (0..count)
        .map(|_| {
            let w = rng.int_in(1, max_side);
            let h = rng.int_in(1, max_side);
            let x0 = rng.int_in(0, size - w);
            let y0 = rng.int_in(0, size - h);
            (x0, y0, w, h)
        })
        .collect()
}

fn log_uniform_factor(rng: &mut StreamRng, max: f32) -> f32 {
    // Symmetric in log space over [1/max, max].
    (rng.uniform_in(-max.ln(), max.ln())).exp()
}

/// Apply one randomly parameterized perturbation of the given kind.
pub fn apply(frame: &[f32], size: usize, kind: PerturbKind, rng: &mut StreamRng) -> Vec<f32> {
    match kind {
        PerturbKind::None => frame.to_vec(),
        PerturbKind::Shift => {
            let sy = rng.uniform_in(0.0, 0.1) * size as f32;
            let sx = rng.uniform_in(0.0, 0.1) * size as f32;
            shift_frame(frame, size, sy, sx)
        }
        PerturbKind::Rotation => {
            let deg = rng.uniform_in(0.0, 30.0);
            rotate_frame(frame, size, deg)
        }
        PerturbKind::ColorJitter => {
            let f = [
                log_uniform_factor(rng, 3.0),
                log_uniform_factor(rng, 3.0),
                log_uniform_factor(rng, 3.0),
                log_uniform_factor(rng, 3.0),
            ];
            color_jitter_frame(frame, size, f)
        }
        PerturbKind::Occlusion => {
            let rects = sample_rects(rng, size);
            fill_rects(frame, size, &rects, RectFill::Zero, rng)
        }
        PerturbKind::Noise => {
            let rects = sample_rects(rng, size);
            fill_rects(frame, size, &rects, RectFill::UniformNoise, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_frame(seed: u64, size: usize) -> Vec<f32> {
        let mut rng = StreamRng::derive(seed, "pframe", 0);
        (0..3 * size * size).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn zero_shift_is_identity() {
        let f = test_frame(0, 16);
        assert_eq!(shift_frame(&f, 16, 0.0, 0.0), f);
    }

    #[test]
    fn zero_rotation_is_identity_within_tolerance() {
        let f = test_frame(1, 16);
        let r = rotate_frame(&f, 16, 0.0);
        for (a, b) in f.iter().zip(&r) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_jitter_is_identity_within_tolerance() {
        let f = test_frame(2, 16);
        let j = color_jitter_frame(&f, 16, [1.0; 4]);
        for (a, b) in f.iter().zip(&j) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn integer_shift_moves_content_up_left() {
        // A single bright pixel at (8, 8) shifted by (2, 3) lands at (6, 5).
        let size = 16;
        let mut f = vec![0f32; 3 * size * size];
        for c in 0..3 {
            f[c * size * size + 8 * size + 8] = 1.0;
        }
        let s = shift_frame(&f, size, 2.0, 3.0);
        for c in 0..3 {
            assert_eq!(s[c * size * size + 6 * size + 5], 1.0);
            assert_eq!(s[c * size * size + 8 * size + 8], 0.0);
        }
    }

    #[test]
    fn occlusion_zeroes_exactly_the_rect() {
        let size = 16;
        let f = test_frame(3, size);
        let mut rng = StreamRng::derive(0, "unused", 0);
        let out = fill_rects(&f, size, &[(4, 6, 3, 2)], RectFill::Zero, &mut rng);
        let plane = size * size;
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let idx = c * plane + y * size + x;
                    let inside = (4..7).contains(&x) && (6..8).contains(&y);
                    if inside {
                        assert_eq!(out[idx], 0.0);
                    } else {
                        assert_eq!(out[idx], f[idx]);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_90_moves_known_pixel() {
        // CCW quarter turn about the center: content at the right-middle
        // moves to the top-middle (y axis points down).
        let size = 17; // odd so the center is exact
        let mut f = vec![0f32; 3 * size * size];
        let plane = size * size;
        for c in 0..3 {
            f[c * plane + 8 * size + 14] = 1.0; // (y=8, x=14), right of center
        }
        let r = rotate_frame(&f, size, 90.0);
        for c in 0..3 {
            assert!((r[c * plane + 2 * size + 8] - 1.0).abs() < 1e-5); // (y=2, x=8), above center
        }
    }

    #[test]
    fn same_stream_reproduces_perturbation() {
        let f = test_frame(4, 32);
        for kind in ALL_PERTURBATIONS {
            let a = apply(&f, 32, kind, &mut StreamRng::derive(9, "p", 3));
            let b = apply(&f, 32, kind, &mut StreamRng::derive(9, "p", 3));
            assert_eq!(a, b, "{:?} not reproducible", kind);
        }
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(seed in 0u64..500, kind_idx in 0usize..5) {
            let f = test_frame(seed, 32);
            let kind = ALL_PERTURBATIONS[kind_idx];
            let out = apply(&f, 32, kind, &mut StreamRng::derive(seed, "prop", 0));
            prop_assert_eq!(out.len(), f.len());
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }

        #[test]
        fn shift_parameters_respect_ratio_cap(seed in 0u64..200) {
            // The sampled shift never exceeds 0.1 * size: content at the
            // upper-left corner within that margin can only come from inside.
            let size = 32usize;
            let f = vec![1.0f32; 3 * size * size];
            let out = apply(&f, size, PerturbKind::Shift, &mut StreamRng::derive(seed, "sp", 0));
            // Bottom-right vacated band must be zero or interpolated < 1;
            // top-left pixel must remain fully bright (source in range).
            prop_assert!((out[0] - 1.0).abs() < 1e-6);
        }
    }
}

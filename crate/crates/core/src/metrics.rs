//! Image quality metrics for frame predictions in `[0, 1]`.

/// Mean squared error over two equal-length slices.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse length mismatch");
    assert!(!a.is_empty(), "mse of empty slices");
    let mut acc = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// PSNR in dB with peak 1.0, capped at 99 dB for (near-)identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    let m = mse(a, b);
    if m <= 1e-12 {
        return 99.0;
    }
    (10.0 * (1.0 / m).log10()).min(99.0)
}

/// SSIM between two single-channel images, 7x7 Gaussian window (sigma 1.5),
/// standard stabilizers for unit dynamic range.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    const R: i64 = 3; // 7x7 window

    // Gaussian weights, normalized per-position so borders stay unbiased.
    let mut kernel = [0f64; 7];
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - 3.0;
        *k = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }

    let at = |img: &[f32], y: i64, x: i64| img[(y as usize) * w + x as usize] as f64;
    let mut total = 0f64;
    for cy in 0..h as i64 {
        for cx in 0..w as i64 {
            let (mut wsum, mut ma, mut mb) = (0f64, 0f64, 0f64);
            let (mut saa, mut sbb, mut sab) = (0f64, 0f64, 0f64);
            for dy in -R..=R {
                let y = cy + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for dx in -R..=R {
                    let x = cx + dx;
                    if x < 0 || x >= w as i64 {
                        continue;
                    }
                    let wgt = kernel[(dy + R) as usize] * kernel[(dx + R) as usize];
                    let (va, vb) = (at(a, y, x), at(b, y, x));
                    wsum += wgt;
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            ma /= wsum;
            mb /= wsum;
            let va = (saa / wsum - ma * ma).max(0.0);
            let vb = (sbb / wsum - mb * mb).max(0.0);
            let cov = sab / wsum - ma * mb;
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
            total += num / den;
        }
    }
    total / (h * w) as f64
}

/// SSIM averaged over the channels of a `[C, H, W]` image pair.
pub fn ssim(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), c * h * w, "ssim shape mismatch");
    assert_eq!(b.len(), c * h * w, "ssim shape mismatch");
    let plane = h * w;
    let mut total = 0f64;
    for ch in 0..c {
        total += ssim_plane(&a[ch * plane..(ch + 1) * plane], &b[ch * plane..(ch + 1) * plane], h, w);
    }
    total / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn psnr_identical_is_capped() {
        let a = vec![0.3f32; 64];
        assert_eq!(psnr(&a, &a), 99.0);
    }

    #[test]
    fn psnr_known_mse_oracle() {
        // Constant offset 0.1 => MSE 0.01 => PSNR exactly 20 dB.
        let a = vec![0.0f32; 100];
        let b = vec![0.1f32; 100];
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = StreamRng::derive(0, "img", 0);
        let a: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.uniform()).collect();
        let s = ssim(&a, &a, 3, 16, 16);
        assert!((s - 1.0).abs() < 1e-9, "ssim {s}");
    }

    #[test]
    fn ssim_orders_degradations() {
        // Small noise should score closer to 1 than heavy noise.
        let mut rng = StreamRng::derive(1, "img", 0);
        let a: Vec<f32> = (0..3 * 16 * 16).map(|_| rng.uniform()).collect();
        let mut small = a.clone();
        let mut big = a.clone();
        let mut nrng = StreamRng::derive(1, "noise", 0);
        for i in 0..a.len() {
            let n = nrng.normal();
            small[i] = (a[i] + 0.02 * n).clamp(0.0, 1.0);
            big[i] = (a[i] + 0.4 * n).clamp(0.0, 1.0);
        }
        let s_small = ssim(&a, &small, 3, 16, 16);
        let s_big = ssim(&a, &big, 3, 16, 16);
        assert!(s_small > s_big, "{s_small} vs {s_big}");
        assert!(s_small > 0.9);
    }

    #[test]
    fn ssim_constant_vs_shifted_constant() {
        // Flat images differing by a constant: structure term is perfect,
        // luminance term penalizes — SSIM must be strictly below 1.
        let a = vec![0.2f32; 12 * 12];
        let b = vec![0.8f32; 12 * 12];
        let s = ssim(&a, &b, 1, 12, 12);
        assert!(s < 0.5, "ssim {s}");
    }
}

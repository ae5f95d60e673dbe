//! Reference implementations shared by the oracle and acceptance suites.
#![allow(dead_code)]

use moefield::image::Image;
use moefield::metrics::{gaussian_kernel, SSIM_SIGMA, SSIM_WINDOW};

/// Compositing straight from its recursive definition:
/// `C(s_0, rest) = a_0 c_0 + (1 - a_0) C(rest)`.
pub fn composite_recursive(samples: &[(f64, [f64; 3], f64)]) -> [f64; 3] {
    match samples.split_first() {
        None => [0.0; 3],
        Some((&(s, c, d), rest)) => {
            let a = 1.0 - (-s * d).exp();
            let tail = composite_recursive(rest);
            [0, 1, 2].map(|ch| a * c[ch] + (1.0 - a) * tail[ch])
        }
    }
}

/// SSIM evaluated window by window with explicit weighted moments.
pub fn ssim_naive(a: &Image, b: &Image) -> f64 {
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let n = SSIM_WINDOW;
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=a.height - n {
        for x0 in 0..=a.width - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let w = k[i] * k[j];
                    let p = (y0 + j) * a.width + x0 + i;
                    ma += w * ga[p];
                    mb += w * gb[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for j in 0..n {
                for i in 0..n {
                    let w = k[i] * k[j];
                    let p = (y0 + j) * a.width + x0 + i;
                    va += w * (ga[p] - ma).powi(2);
                    vb += w * (gb[p] - mb).powi(2);
                    cov += w * (ga[p] - ma) * (gb[p] - mb);
                }
            }
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

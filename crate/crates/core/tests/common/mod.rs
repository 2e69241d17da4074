//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Everything here is written as plain scalar
//! loops or dense linear algebra, deliberately unlike the library code.
#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1e-12)
}

pub fn l1_brute(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
        count += 1;
    }
    s / count as f64
}

pub fn adversarial_d_ls_brute(real: &[f64], fake: &[f64]) -> f64 {
    let mut r = 0.0;
    for v in real {
        r += (v - 1.0) * (v - 1.0);
    }
    let mut f = 0.0;
    for v in fake {
        f += v * v;
    }
    0.5 * (r / real.len() as f64 + f / fake.len() as f64)
}

pub fn adversarial_d_vanilla_brute(real: &[f64], fake: &[f64]) -> f64 {
    let mut r = 0.0;
    for v in real {
        r -= v.ln();
    }
    let mut f = 0.0;
    for v in fake {
        f -= (1.0 - v).ln();
    }
    r / real.len() as f64 + f / fake.len() as f64
}

pub fn adversarial_g_ls_brute(fake: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in fake {
        s += (v - 1.0) * (v - 1.0);
    }
    s / fake.len() as f64
}

pub fn adversarial_g_vanilla_brute(fake: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in fake {
        s -= v.ln();
    }
    s / fake.len() as f64
}

/// Cross-entropy from the direct softmax definition (no log-sum-exp shift).
pub fn classifier_brute(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let mut z = 0.0;
        for c in 0..classes {
            z += logits[n * classes + c].exp();
        }
        total += -(logits[n * classes + label].exp() / z).ln();
    }
    total / labels.len() as f64
}

pub fn softmax_brute(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for n in 0..logits.len() / classes {
        let mut z = 0.0;
        for c in 0..classes {
            z += logits[n * classes + c].exp();
        }
        for c in 0..classes {
            out[n * classes + c] = logits[n * classes + c].exp() / z;
        }
    }
    out
}

pub fn clcyc_brute(a: &[f64], b: &[f64], classes: usize) -> f64 {
    let rows = a.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..classes {
            total += (a[r * classes + c] - b[r * classes + c]).abs();
        }
    }
    total / rows as f64
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    j as usize
}

/// Per-pixel SSIM of one plane with an explicit 2-D Gaussian window,
/// mirrored borders and the product or sum of the two comparison terms.
#[allow(clippy::too_many_arguments)]
pub fn ssim_map_brute(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    k: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
    range: f64,
    product: bool,
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut weights = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for u in -r..=r {
        for v in -r..=r {
            let g = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
            weights[(u + r) as usize][(v + r) as usize] = g;
            norm += g;
        }
    }
    let q1 = (k1 * range) * (k1 * range);
    let q2 = (k2 * range) * (k2 * range);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in -r..=r {
                for v in -r..=r {
                    let wt = weights[(u + r) as usize][(v + r) as usize] / norm;
                    let p = mirror(i as isize + u, h) * w + mirror(j as isize + v, w);
                    mx += wt * x[p];
                    my += wt * y[p];
                    sxx += wt * x[p] * x[p];
                    syy += wt * y[p] * y[p];
                    sxy += wt * x[p] * y[p];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let lum = (2.0 * mx * my + q1) / (mx * mx + my * my + q1);
            let cs = (2.0 * cxy + q2) / (vx + vy + q2);
            out[i * w + j] = if product { lum * cs } else { lum + cs };
        }
    }
    out
}

/// Mean SSIM over all planes of a `n×3×h×w` batch.
#[allow(clippy::too_many_arguments)]
pub fn ssim_mean_brute(a: &[f64], b: &[f64], h: usize, w: usize, k: usize, sigma: f64, product: bool) -> f64 {
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..a.len() / plane {
        let m = ssim_map_brute(
            &a[p * plane..(p + 1) * plane],
            &b[p * plane..(p + 1) * plane],
            h,
            w,
            k,
            sigma,
            0.01,
            0.03,
            2.0,
            product,
        );
        total += m.iter().sum::<f64>();
    }
    total / a.len() as f64
}

/// Dense matting Laplacian: for every window fully inside the image,
/// accumulate `δ_ij − (1 + (I_i − μ)ᵀ (Σ + ε/|w|·I)⁻¹ (I_j − μ)) / |w|`.
pub fn dense_laplacian(guide: &[f64], h: usize, w: usize, radius: usize, eps: f64) -> DMatrix<f64> {
    let n = h * w;
    let side = 2 * radius + 1;
    let count = (side * side) as f64;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for cy in radius..h - radius {
        for cx in radius..w - radius {
            let mut pix = Vec::new();
            for y in cy - radius..=cy + radius {
                for x in cx - radius..=cx + radius {
                    pix.push(y * w + x);
                }
            }
            let colour = |p: usize| Vector3::new(guide[p], guide[n + p], guide[2 * n + p]);
            let mu = pix.iter().map(|&p| colour(p)).sum::<Vector3<f64>>() / count;
            let mut cov = Matrix3::<f64>::zeros();
            for &p in &pix {
                let d = colour(p) - mu;
                cov += d * d.transpose();
            }
            let cov = cov / count + Matrix3::identity() * (eps / count);
            let inv: SMatrix<f64, 3, 3> = cov.try_inverse().expect("regularised covariance is invertible");
            for &a in &pix {
                for &b in &pix {
                    let q = ((colour(a) - mu).transpose() * inv * (colour(b) - mu))[(0, 0)];
                    let delta = if a == b { 1.0 } else { 0.0 };
                    m[(a, b)] += delta - (1.0 + q) / count;
                }
            }
        }
    }
    m
}

/// Small default-mode config for fast training runs on `size`-pixel patches.
pub fn tiny_config(classes: usize, size: usize, filters: usize, iterations: u64) -> vstain::domain::ExperimentConfig {
    let mut cfg = vstain::domain::ExperimentConfig {
        num_classes: classes,
        patch_size: size,
        ..Default::default()
    };
    cfg.networks.gen_filters = filters;
    cfg.networks.disc_filters = filters;
    cfg.networks.resnet_blocks = 1;
    cfg.matting.resolution = size.min(64);
    cfg.optimizer.total_iterations = iterations;
    cfg
}

/// Writes a seeded synthetic fixture and returns its manifest.
pub fn fixture(dir: &std::path::Path, classes: usize, size: usize, per_class: usize, seed: u64) -> vstain::data::DatasetManifest {
    let spec = vstain::data::SyntheticSpec {
        num_classes: classes,
        patch_size: size,
        per_class_count: per_class,
        seed,
    };
    vstain::data::generate_synthetic(&spec, dir).expect("fixture")
}

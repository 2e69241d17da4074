//! Scalar training objectives with analytic gradients.
//!
//! Everything here works on flat `f64` buffers. Image batches are
//! channel-planar `N×C×H×W`; every L1 term is a mean over all elements.
//! Gradient variants return the loss value together with the derivative with
//! respect to the network-produced arguments only.

use crate::domain::{AdversarialMode, IdentityMode, SsimConfig, SsimMode, WindowKind};
use crate::error::{Error, Result};

/// Shape of a channel-planar image batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl BatchShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        BatchShape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

fn same_len(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape(format!("{what}: empty input")));
    }
    Ok(())
}

/// Mean absolute difference between `out` and `target`.
pub fn l1_mean(out: &[f64], target: &[f64]) -> Result<f64> {
    same_len("l1", out, target)?;
    let s: f64 = out.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / out.len() as f64)
}

/// [`l1_mean`] and its (sub)gradient with respect to `out`; zero at ties.
pub fn l1_mean_grad(out: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let v = l1_mean(out, target)?;
    let inv = 1.0 / out.len() as f64;
    let g = out
        .iter()
        .zip(target)
        .map(|(a, b)| signum0(a - b) * inv)
        .collect();
    Ok((v, g))
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Patch-level discriminator outputs on real and generated images.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialScores<'a> {
    pub real: &'a [f64],
    pub fake: &'a [f64],
    pub mode: AdversarialMode,
}

fn check_probabilities(what: &str, scores: &[f64]) -> Result<()> {
    if let Some(v) = scores.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!(
            "{what}: vanilla scores must lie in (0, 1), found {v}"
        )));
    }
    Ok(())
}

/// Discriminator loss. Gradients are with respect to the real and fake scores.
pub fn adversarial_loss_d_grad(scores: AdversarialScores<'_>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let AdversarialScores { real, fake, mode } = scores;
    if real.is_empty() || fake.is_empty() {
        return Err(Error::shape("adversarial loss needs non-empty score maps"));
    }
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    match mode {
        AdversarialMode::LeastSquares => {
            let lr = real.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / nr;
            let lf = fake.iter().map(|f| f * f).sum::<f64>() / nf;
            let gr = real.iter().map(|r| (r - 1.0) / nr).collect();
            let gf = fake.iter().map(|f| f / nf).collect();
            Ok((0.5 * (lr + lf), gr, gf))
        }
        AdversarialMode::Vanilla => {
            check_probabilities("real scores", real)?;
            check_probabilities("fake scores", fake)?;
            let lr = -real.iter().map(|r| r.ln()).sum::<f64>() / nr;
            let lf = -fake.iter().map(|f| (1.0 - f).ln()).sum::<f64>() / nf;
            let gr = real.iter().map(|r| -1.0 / (r * nr)).collect();
            let gf = fake.iter().map(|f| 1.0 / ((1.0 - f) * nf)).collect();
            Ok((lr + lf, gr, gf))
        }
    }
}

pub fn adversarial_loss_d(scores: AdversarialScores<'_>) -> Result<f64> {
    adversarial_loss_d_grad(scores).map(|(v, _, _)| v)
}

/// Generator-side adversarial loss (target label 1 for generated images).
pub fn adversarial_loss_g_grad(fake: &[f64], mode: AdversarialMode) -> Result<(f64, Vec<f64>)> {
    if fake.is_empty() {
        return Err(Error::shape("adversarial loss needs a non-empty score map"));
    }
    let n = fake.len() as f64;
    match mode {
        AdversarialMode::LeastSquares => {
            let v = fake.iter().map(|f| (f - 1.0).powi(2)).sum::<f64>() / n;
            let g = fake.iter().map(|f| 2.0 * (f - 1.0) / n).collect();
            Ok((v, g))
        }
        AdversarialMode::Vanilla => {
            check_probabilities("fake scores", fake)?;
            let v = -fake.iter().map(|f| f.ln()).sum::<f64>() / n;
            let g = fake.iter().map(|f| -1.0 / (f * n)).collect();
            Ok((v, g))
        }
    }
}

pub fn adversarial_loss_g(fake: &[f64], mode: AdversarialMode) -> Result<f64> {
    adversarial_loss_g_grad(fake, mode).map(|(v, _)| v)
}

/// Row-wise softmax of an `N×C` logit matrix.
pub fn softmax(logits: &[f64], num_classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(num_classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::INFINITY {
            let hits = row.iter().filter(|&&v| v == m).count() as f64;
            out.extend(row.iter().map(|&v| if v == m { 1.0 / hits } else { 0.0 }));
            continue;
        }
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], num_classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs
        .chunks_exact(num_classes)
        .zip(grad_probs.chunks_exact(num_classes))
    {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    out
}

fn check_logits(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<()> {
    if num_classes == 0 || logits.len() != labels.len() * num_classes || labels.is_empty() {
        return Err(Error::shape(format!(
            "classifier loss: {} logits for {} labels of {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!(
            "label index {l} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy. Gradient is with respect to the logits.
pub fn classifier_loss_grad(
    logits: &[f64],
    num_classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_logits(logits, num_classes, labels)?;
    let n = labels.len() as f64;
    let probs = softmax(logits, num_classes);
    let mut loss = 0.0;
    for (row, &label) in logits.chunks_exact(num_classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::INFINITY {
            // Saturated margin: contributes zero if the true class holds it.
            if row[label] != f64::INFINITY {
                loss += f64::INFINITY;
            }
            continue;
        }
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    let mut grad = probs;
    for (i, &label) in labels.iter().enumerate() {
        grad[i * num_classes + label] -= 1.0;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

pub fn classifier_loss(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<f64> {
    classifier_loss_grad(logits, num_classes, labels).map(|(v, _)| v)
}

/// Sum of the two reconstruction L1 terms. Gradients are with respect to
/// `x_rec` and `y_rec`.
pub fn cycle_loss_grad(
    x: &[f64],
    x_rec: &[f64],
    y: &[f64],
    y_rec: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (a, ga) = l1_mean_grad(x_rec, x)?;
    let (b, gb) = l1_mean_grad(y_rec, y)?;
    Ok((a + b, ga, gb))
}

pub fn cycle_loss(x: &[f64], x_rec: &[f64], y: &[f64], y_rec: &[f64]) -> Result<f64> {
    Ok(l1_mean(x_rec, x)? + l1_mean(y_rec, y)?)
}

fn check_distributions(what: &str, p: &[f64], num_classes: usize) -> Result<()> {
    for (i, row) in p.chunks_exact(num_classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "{what}: row {i} sums to {s}, expected a probability vector"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of the L1 distance between paired class distributions.
/// Gradients are with respect to both arguments.
pub fn classification_cycle_loss_grad(
    probs_a: &[f64],
    probs_b: &[f64],
    num_classes: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_len("classification cycle", probs_a, probs_b)?;
    if num_classes == 0 || probs_a.len() % num_classes != 0 {
        return Err(Error::shape("classification cycle: rows are not whole"));
    }
    check_distributions("probs_a", probs_a, num_classes)?;
    check_distributions("probs_b", probs_b, num_classes)?;
    let rows = (probs_a.len() / num_classes) as f64;
    let mut total = 0.0;
    let mut ga = Vec::with_capacity(probs_a.len());
    for (a, b) in probs_a.iter().zip(probs_b) {
        total += (a - b).abs();
        ga.push(signum0(a - b) / rows);
    }
    let gb = ga.iter().map(|g| -g).collect();
    Ok((total / rows, ga, gb))
}

pub fn classification_cycle_loss(probs_a: &[f64], probs_b: &[f64], num_classes: usize) -> Result<f64> {
    classification_cycle_loss_grad(probs_a, probs_b, num_classes).map(|(v, _, _)| v)
}

/// Identity-mapping penalty.
///
/// `enc_out` is always `G_enc(y)`. `dec_out` is `G_dec(x)` in
/// [`IdentityMode::SameDomain`] and `G_dec(y)` in
/// [`IdentityMode::PaperLiteral`]:
///
/// * same_domain: `mean|G_enc(y) - y| + mean|G_dec(x) - x|`
/// * paper_literal: `mean|G_enc(y) - x| + mean|G_dec(y) - y|`
pub fn identity_loss_grad(
    mode: IdentityMode,
    x: &[f64],
    y: &[f64],
    enc_out: &[f64],
    dec_out: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (enc_target, dec_target) = match mode {
        IdentityMode::SameDomain => (y, x),
        IdentityMode::PaperLiteral => (x, y),
    };
    let (a, ga) = l1_mean_grad(enc_out, enc_target)?;
    let (b, gb) = l1_mean_grad(dec_out, dec_target)?;
    Ok((a + b, ga, gb))
}

pub fn identity_loss(
    mode: IdentityMode,
    x: &[f64],
    y: &[f64],
    enc_out: &[f64],
    dec_out: &[f64],
) -> Result<f64> {
    identity_loss_grad(mode, x, y, enc_out, dec_out).map(|(v, _, _)| v)
}

/// Window and stabilizer constants for the per-pixel similarity map.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: WindowKind,
    pub k: usize,
    pub sigma: f64,
    pub q1: f64,
    pub q2: f64,
    pub dynamic_range: f64,
    kernel: Vec<f64>,
}

impl SsimParams {
    pub fn new(window: WindowKind, k: usize, sigma: f64, k1: f64, k2: f64, dynamic_range: f64) -> Result<Self> {
        if k < 3 || k % 2 == 0 {
            return Err(Error::invalid(format!("ssim window must be odd and >= 3, got {k}")));
        }
        if !(k1 > 0.0 && k2 > 0.0 && dynamic_range > 0.0) {
            return Err(Error::invalid("ssim constants must be positive"));
        }
        if window == WindowKind::Gaussian && !(sigma > 0.0) {
            return Err(Error::invalid("gaussian window needs a positive stddev"));
        }
        let r = (k / 2) as f64;
        let mut kernel: Vec<f64> = match window {
            WindowKind::Uniform => vec![1.0; k],
            WindowKind::Gaussian => (0..k)
                .map(|i| {
                    let d = i as f64 - r;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect(),
        };
        let s: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= s);
        Ok(SsimParams {
            window,
            k,
            sigma,
            q1: (k1 * dynamic_range).powi(2),
            q2: (k2 * dynamic_range).powi(2),
            dynamic_range,
            kernel,
        })
    }

    pub fn from_config(cfg: &SsimConfig) -> Result<Self> {
        Self::new(cfg.window, cfg.k, cfg.sigma, cfg.k1, cfg.k2, cfg.dynamic_range)
    }

    /// Normalized separable 1-D weights; the 2-D window is their outer product.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::from_config(&SsimConfig::default()).expect("default ssim config is valid")
    }
}

/// Mirror index without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn blur(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        let src = &plane[row * w..(row + 1) * w];
        for col in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * src[reflect(col as isize + t as isize - r, w)];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for (t, &k) in kernel.iter().enumerate() {
            let sr = reflect(row as isize + t as isize - r, h);
            let src = &tmp[sr * w..(sr + 1) * w];
            let dst = &mut out[row * w..(row + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

fn blur_adjoint(grad: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for (t, &k) in kernel.iter().enumerate() {
            let sr = reflect(row as isize + t as isize - r, h);
            for col in 0..w {
                tmp[sr * w + col] += k * grad[row * w + col];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let g = tmp[row * w + col];
            for (t, &k) in kernel.iter().enumerate() {
                out[row * w + reflect(col as isize + t as isize - r, w)] += k * g;
            }
        }
    }
    out
}

struct PlaneStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn plane_stats(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> PlaneStats {
    let k = p.kernel();
    let mu_a = blur(a, h, w, k);
    let mu_b = blur(b, h, w, k);
    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let prod: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
    let e_aa = blur(&sq_a, h, w, k);
    let e_bb = blur(&sq_b, h, w, k);
    let e_ab = blur(&prod, h, w, k);
    let n = h * w;
    let mut var_a = vec![0.0; n];
    let mut var_b = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_a[i] = e_aa[i] - mu_a[i] * mu_a[i];
        var_b[i] = e_bb[i] - mu_b[i] * mu_b[i];
        cov[i] = e_ab[i] - mu_a[i] * mu_b[i];
    }
    PlaneStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

fn check_window(h: usize, w: usize, p: &SsimParams) -> Result<()> {
    if p.k > h || p.k > w {
        return Err(Error::shape(format!(
            "ssim window {k}x{k} larger than {h}x{w} image",
            k = p.k
        )));
    }
    Ok(())
}

/// Per-pixel similarity map of two single-channel `h×w` planes.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams, mode: SsimMode) -> Result<Vec<f64>> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::shape(format!(
            "ssim planes of {} and {} values for {h}x{w}",
            x.len(),
            y.len()
        )));
    }
    check_window(h, w, p)?;
    let s = plane_stats(x, y, h, w, p);
    Ok((0..h * w)
        .map(|i| {
            let lum = (2.0 * s.mu_a[i] * s.mu_b[i] + p.q1)
                / (s.mu_a[i] * s.mu_a[i] + s.mu_b[i] * s.mu_b[i] + p.q1);
            let cs = (2.0 * s.cov[i] + p.q2) / (s.var_a[i] + s.var_b[i] + p.q2);
            match mode {
                SsimMode::StandardProduct => lum * cs,
                SsimMode::PaperSum => lum + cs,
            }
        })
        .collect())
}

/// Sum of the map over one plane and the gradient of `weight * sum(map)` with
/// respect to `a`.
fn ssim_plane_grad(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    p: &SsimParams,
    mode: SsimMode,
    weight: f64,
) -> (f64, Vec<f64>) {
    let n = h * w;
    let s = plane_stats(a, b, h, w, p);
    let mut total = 0.0;
    let mut g_mu = vec![0.0; n];
    let mut g_sq = vec![0.0; n];
    let mut g_prod = vec![0.0; n];
    for i in 0..n {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let a1 = 2.0 * ma * mb + p.q1;
        let b1 = ma * ma + mb * mb + p.q1;
        let lum = a1 / b1;
        let a2 = 2.0 * s.cov[i] + p.q2;
        let b2 = s.var_a[i] + s.var_b[i] + p.q2;
        let cs = a2 / b2;
        let (value, g_lum, g_cs) = match mode {
            SsimMode::StandardProduct => (lum * cs, weight * cs, weight * lum),
            SsimMode::PaperSum => (lum + cs, weight, weight),
        };
        total += value;
        let d_lum_d_mu = 2.0 * (mb - lum * ma) / b1;
        let g_var = -g_cs * cs / b2;
        let g_cov = g_cs * 2.0 / b2;
        g_mu[i] = g_lum * d_lum_d_mu - 2.0 * ma * g_var - mb * g_cov;
        g_sq[i] = g_var;
        g_prod[i] = g_cov;
    }
    let k = p.kernel();
    let d_mu = blur_adjoint(&g_mu, h, w, k);
    let d_sq = blur_adjoint(&g_sq, h, w, k);
    let d_prod = blur_adjoint(&g_prod, h, w, k);
    let grad = (0..n)
        .map(|i| d_mu[i] + 2.0 * a[i] * d_sq[i] + b[i] * d_prod[i])
        .collect();
    (total, grad)
}

/// Mean similarity between two batches (averaged over samples, channels and
/// pixels) and its gradient with respect to `out`.
pub fn ssim_mean_grad(
    out: &[f64],
    reference: &[f64],
    shape: BatchShape,
    p: &SsimParams,
    mode: SsimMode,
) -> Result<(f64, Vec<f64>)> {
    if out.len() != shape.len() || reference.len() != shape.len() || shape.is_empty() {
        return Err(Error::shape(format!(
            "ssim batch of {} and {} values for shape {shape:?}",
            out.len(),
            reference.len()
        )));
    }
    check_window(shape.h, shape.w, p)?;
    let plane = shape.plane();
    let weight = 1.0 / shape.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(shape.len());
    for (a, b) in out.chunks_exact(plane).zip(reference.chunks_exact(plane)) {
        let (s, g) = ssim_plane_grad(a, b, shape.h, shape.w, p, mode, weight);
        total += s;
        grad.extend(g);
    }
    Ok((total * weight, grad))
}

pub fn ssim_mean(out: &[f64], reference: &[f64], shape: BatchShape, p: &SsimParams, mode: SsimMode) -> Result<f64> {
    if out.len() != shape.len() || reference.len() != shape.len() || shape.is_empty() {
        return Err(Error::shape("ssim batch does not match its shape"));
    }
    let mut total = 0.0;
    for (a, b) in out.chunks_exact(shape.plane()).zip(reference.chunks_exact(shape.plane())) {
        total += ssim_map(a, b, shape.h, shape.w, p, mode)?.iter().sum::<f64>();
    }
    Ok(total / shape.len() as f64)
}

/// `(1 - Ssim(x_out, x_in)) + (1 - Ssim(y_out, y_in))`. Gradients are with
/// respect to `x_out` and `y_out`.
#[allow(clippy::too_many_arguments)]
pub fn ssim_loss_grad(
    x_in: &[f64],
    x_out: &[f64],
    y_in: &[f64],
    y_out: &[f64],
    shape: BatchShape,
    p: &SsimParams,
    mode: SsimMode,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (sx, gx) = ssim_mean_grad(x_out, x_in, shape, p, mode)?;
    let (sy, gy) = ssim_mean_grad(y_out, y_in, shape, p, mode)?;
    let neg = |g: Vec<f64>| g.into_iter().map(|v| -v).collect::<Vec<_>>();
    Ok(((1.0 - sx) + (1.0 - sy), neg(gx), neg(gy)))
}

pub fn ssim_loss(
    x_in: &[f64],
    x_out: &[f64],
    y_in: &[f64],
    y_out: &[f64],
    shape: BatchShape,
    p: &SsimParams,
    mode: SsimMode,
) -> Result<f64> {
    Ok((1.0 - ssim_mean(x_out, x_in, shape, p, mode)?) + (1.0 - ssim_mean(y_out, y_in, shape, p, mode)?))
}

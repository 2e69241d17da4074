//! Central finite-difference verification of every loss gradient on small
//! seeded random batches.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{AdversarialMode, IdentityMode, Image, MattingConfig, PhoMode, SsimMode, WindowKind};
use crate::error::{Error, Result};
use crate::losses::*;
use crate::matting::{laplacian_for_image, photorealism_loss_grad};

/// Deliberate gradient corruption, used to confirm the checker catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SsimSign,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim-sign" => Ok(Fault::SsimSign),
            _ => Err(Error::invalid(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Side length of the square test images.
    pub size: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per loss; larger inputs are subsampled.
    pub max_coords: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            size: 8,
            step: 1e-3,
            tolerance: 1e-4,
            max_coords: 512,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub size: usize,
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&GradcheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "gradcheck seed={} size={} tolerance={:e}", self.seed, self.size, self.tolerance).unwrap();
        for e in &self.entries {
            writeln!(
                out,
                "{:<24} max_rel_error={:.3e} coords={:<4} {}",
                e.name,
                e.max_rel_error,
                e.coords,
                if e.passed { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        let ok = self.entries.iter().filter(|e| e.passed).count();
        writeln!(
            out,
            "{} ({ok}/{} passed)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.entries.len()
        )
        .unwrap();
        out
    }
}

/// Central differences of `f` at `point` along each listed coordinate.
pub fn central_differences(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    Ok(numeric)
}

/// `max_i |a_i − n_i| / max_i |n_i|` between the analytic gradient `a` and
/// the central difference `n` over the chosen coordinates. Normalising by
/// the largest component keeps the O(step²) truncation error of near-zero
/// components from dominating.
pub fn max_relative_error(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<f64> {
    let numeric = central_differences(f, point, coords, step)?;
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = coords
        .iter()
        .zip(&numeric)
        .map(|(&i, n)| (analytic[i] - n).abs())
        .fold(0.0, f64::max);
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

struct Checker<'a> {
    opts: &'a GradcheckOptions,
    rng: ChaCha8Rng,
    entries: Vec<GradcheckEntry>,
}

impl Checker<'_> {
    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// `target` plus offsets of magnitude in `[0.05, 0.5]` with random sign,
    /// keeping every coordinate away from the L1 kink.
    fn offset_from(&mut self, target: &[f64]) -> Vec<f64> {
        target
            .iter()
            .map(|t| {
                let d = self.rng.gen_range(0.05..0.5);
                if self.rng.gen::<bool>() {
                    t + d
                } else {
                    t - d
                }
            })
            .collect()
    }

    fn coords(&mut self, n: usize) -> Vec<usize> {
        if n <= self.opts.max_coords {
            return (0..n).collect();
        }
        let mut c = sample(&mut self.rng, n, self.opts.max_coords).into_vec();
        c.sort_unstable();
        c
    }

    fn check(
        &mut self,
        name: &str,
        point: &[f64],
        analytic: &[f64],
        f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    ) -> Result<()> {
        let coords = self.coords(point.len());
        let err = max_relative_error(f, point, analytic, &coords, self.opts.step)?;
        self.entries.push(GradcheckEntry {
            name: name.to_string(),
            max_rel_error: err,
            coords: coords.len(),
            passed: err <= self.opts.tolerance,
        });
        Ok(())
    }
}

fn split(v: &[f64]) -> (&[f64], &[f64]) {
    v.split_at(v.len() / 2)
}

fn join(a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    let mut v = a;
    v.extend(b);
    v
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Runs every loss gradient check on a batch of two `3×size×size` images.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let size = opts.size;
    if size < 4 {
        return Err(Error::invalid(format!("gradcheck size must be at least 4, got {size}")));
    }
    let mut ck = Checker {
        opts,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        entries: Vec::new(),
    };
    let shape = BatchShape::new(2, 3, size, size);
    let n = shape.len();
    let x = ck.uniform(n, -1.0, 1.0);
    let y = ck.uniform(n, -1.0, 1.0);

    // cycle
    let rec = join(ck.offset_from(&x), ck.offset_from(&y));
    let (_, gx, gy) = cycle_loss_grad(&x, split(&rec).0, &y, split(&rec).1)?;
    ck.check("cycle", &rec, &join(gx, gy), &mut |v| {
        let (a, b) = split(v);
        cycle_loss(&x, a, &y, b)
    })?;

    // identity
    let out = join(ck.offset_from(&y), ck.offset_from(&x));
    let mode = IdentityMode::SameDomain;
    let (_, ga, gb) = identity_loss_grad(mode, &x, &y, split(&out).0, split(&out).1)?;
    ck.check("identity", &out, &join(ga, gb), &mut |v| {
        let (a, b) = split(v);
        identity_loss(mode, &x, &y, a, b)
    })?;

    // classifier
    let classes = 8;
    let logits = ck.uniform(2 * classes, -3.0, 3.0);
    let labels = [ck.rng.gen_range(0..classes), ck.rng.gen_range(0..classes)];
    let (_, g) = classifier_loss_grad(&logits, classes, &labels)?;
    ck.check("classifier", &logits, &g, &mut |v| classifier_loss(v, classes, &labels))?;

    // classification cycle, through the softmax producing the first distribution
    let la = ck.uniform(2 * classes, -3.0, 3.0);
    let pb = softmax(&ck.uniform(2 * classes, -3.0, 3.0), classes);
    let pa = softmax(&la, classes);
    let (_, gpa, _) = classification_cycle_loss_grad(&pa, &pb, classes)?;
    let g = softmax_backward(&pa, &gpa, classes);
    ck.check("classification_cycle", &la, &g, &mut |v| {
        classification_cycle_loss(&softmax(v, classes), &pb, classes)
    })?;

    // adversarial
    for (mode, tag) in [(AdversarialMode::LeastSquares, "ls"), (AdversarialMode::Vanilla, "vanilla")] {
        let (real, fake) = match mode {
            AdversarialMode::LeastSquares => (ck.uniform(18, -0.5, 1.5), ck.uniform(18, -0.5, 1.5)),
            AdversarialMode::Vanilla => (ck.uniform(18, 0.1, 0.9), ck.uniform(18, 0.1, 0.9)),
        };
        let scores = join(real.clone(), fake.clone());
        let (_, gr, gf) = adversarial_loss_d_grad(AdversarialScores {
            real: &real,
            fake: &fake,
            mode,
        })?;
        ck.check(&format!("adversarial_d_{tag}"), &scores, &join(gr, gf), &mut |v| {
            let (r, f) = split(v);
            adversarial_loss_d(AdversarialScores { real: r, fake: f, mode })
        })?;
        let (_, g) = adversarial_loss_g_grad(&fake, mode)?;
        ck.check(&format!("adversarial_g_{tag}"), &fake, &g, &mut |v| adversarial_loss_g(v, mode))?;
    }
    // vanilla scores produced by a sigmoid, as the networks do
    let raw = ck.uniform(18, -3.0, 3.0);
    let s: Vec<f64> = raw.iter().map(|&v| sigmoid(v)).collect();
    let (_, g) = adversarial_loss_g_grad(&s, AdversarialMode::Vanilla)?;
    let g: Vec<f64> = g.iter().zip(&s).map(|(g, s)| g * s * (1.0 - s)).collect();
    ck.check("adversarial_g_sigmoid", &raw, &g, &mut |v| {
        let s: Vec<f64> = v.iter().map(|&r| sigmoid(r)).collect();
        adversarial_loss_g(&s, AdversarialMode::Vanilla)
    })?;

    // SSIM
    let k = if size >= 11 { 11 } else { (size - 1) | 1 };
    let params = SsimParams::new(WindowKind::Gaussian, k, 1.5, 0.01, 0.03, 2.0)?;
    let outs = join(ck.uniform(n, -1.0, 1.0), ck.uniform(n, -1.0, 1.0));
    for (mode, tag) in [(SsimMode::StandardProduct, "ssim_product"), (SsimMode::PaperSum, "ssim_paper_sum")] {
        let (xo, yo) = split(&outs);
        let (_, gx, gy) = ssim_loss_grad(&x, xo, &y, yo, shape, &params, mode)?;
        let mut g = join(gx, gy);
        if opts.fault == Some(Fault::SsimSign) {
            g.iter_mut().for_each(|v| *v = -*v);
        }
        ck.check(tag, &outs, &g, &mut |v| {
            let (a, b) = split(v);
            ssim_loss(&x, a, &y, b, shape, &params, mode)
        })?;
    }

    // photorealism: the generated images' own Laplacians carry no gradient,
    // so the check uses the one-sided form whose value depends only on the
    // real images' Laplacians.
    let mcfg = MattingConfig {
        resolution: size,
        mode: PhoMode::Asymmetric,
        ..MattingConfig::default()
    };
    let image = |v: &[f64]| Image::new(size, size, v.iter().map(|&p| p as f32).collect());
    let per = 3 * size * size;
    let mut laps = Vec::new();
    for real in [&x, &y] {
        let mut side = Vec::new();
        for s in real.chunks_exact(per) {
            side.push(Arc::new(laplacian_for_image(&image(s)?, &mcfg)?));
        }
        laps.push(side);
    }
    let gens = join(ck.uniform(n, -1.0, 1.0), ck.uniform(n, -1.0, 1.0));
    let pho = |v: &[f64]| {
        let (a, b) = split(v);
        photorealism_loss_grad(&x, a, &laps[0], &y, b, &laps[1], size, size, &mcfg)
    };
    let (_, ga, gb) = pho(&gens)?;
    ck.check("photorealism", &gens, &join(ga, gb), &mut |v| pho(v).map(|r| r.0))?;

    Ok(GradcheckReport {
        seed: opts.seed,
        size,
        tolerance: opts.tolerance,
        entries: ck.entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_passes_and_fault_is_caught() {
        let ok = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(ok.passed(), "{}", ok.render());
        let bad = run_gradcheck(&GradcheckOptions {
            fault: Some(Fault::SsimSign),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(!bad.passed());
        assert!(!bad.entry("ssim_product").unwrap().passed);
        assert!(bad.entry("cycle").unwrap().passed);
    }
}

mod common;

use common::*;
use rand::Rng;
use vstain::domain::{AdversarialMode, IdentityMode, SsimMode, WindowKind};
use vstain::losses::*;

const TOL: f64 = 1e-6;
const SHAPE: BatchShape = BatchShape { n: 2, c: 3, h: 8, w: 8 };

fn small_window() -> SsimParams {
    SsimParams::new(WindowKind::Gaussian, 7, 1.5, 0.01, 0.03, 2.0).unwrap()
}

#[test]
fn cycle_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let xr = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let y = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let yr = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let want = l1_brute(&xr, &x) + l1_brute(&yr, &y);
        let got = cycle_loss(&x, &xr, &y, &yr).unwrap();
        assert!(rel_close(got, want, TOL), "{got} vs {want}");
        let swapped = cycle_loss(&y, &yr, &x, &xr).unwrap();
        assert!(rel_close(swapped, got, 1e-12));
    }
}

#[test]
fn identity_matches_brute_force_in_both_modes() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let x = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let y = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let enc = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let dec = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        let same = identity_loss(IdentityMode::SameDomain, &x, &y, &enc, &dec).unwrap();
        assert!(rel_close(same, l1_brute(&enc, &y) + l1_brute(&dec, &x), TOL));
        let literal = identity_loss(IdentityMode::PaperLiteral, &x, &y, &enc, &dec).unwrap();
        assert!(rel_close(literal, l1_brute(&enc, &x) + l1_brute(&dec, &y), TOL));
    }
}

#[test]
fn identity_uniform_offset() {
    let mut r = rng(5);
    let x = uniform(&mut r, SHAPE.len(), -0.8, 0.8);
    let y = uniform(&mut r, SHAPE.len(), -0.8, 0.8);
    let enc: Vec<f64> = y.iter().map(|v| v + 0.1).collect();
    let v = identity_loss(IdentityMode::SameDomain, &x, &y, &enc, &x).unwrap();
    assert!((v - 0.1).abs() < 1e-12);
}

#[test]
fn classifier_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let logits = uniform(&mut r, 2 * 8, -3.0, 3.0);
        let labels = [r.gen_range(0..8), r.gen_range(0..8)];
        let got = classifier_loss(&logits, 8, &labels).unwrap();
        assert!(rel_close(got, classifier_brute(&logits, 8, &labels), TOL));
        let p = softmax(&logits, 8);
        for (a, b) in p.iter().zip(softmax_brute(&logits, 8)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn classifier_rejects_out_of_range_label() {
    assert!(classifier_loss(&[0.0; 8], 8, &[8]).is_err());
}

#[test]
fn classification_cycle_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let a = softmax(&uniform(&mut r, 16, -2.0, 2.0), 8);
        let b = softmax(&uniform(&mut r, 16, -2.0, 2.0), 8);
        let got = classification_cycle_loss(&a, &b, 8).unwrap();
        assert!(rel_close(got, clcyc_brute(&a, &b, 8), TOL));
    }
}

#[test]
fn classification_cycle_rejects_non_distributions() {
    let a = [0.5, 0.6, 0.0];
    let b = [0.5, 0.5, 0.0];
    assert!(classification_cycle_loss(&a, &b, 3).is_err());
}

#[test]
fn adversarial_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(400 + seed);
        let real = uniform(&mut r, 2 * 30, -1.5, 2.0);
        let fake = uniform(&mut r, 2 * 30, -1.5, 2.0);
        let ls = AdversarialMode::LeastSquares;
        let d = adversarial_loss_d(AdversarialScores { real: &real, fake: &fake, mode: ls }).unwrap();
        assert!(rel_close(d, adversarial_d_ls_brute(&real, &fake), TOL));
        let g = adversarial_loss_g(&fake, ls).unwrap();
        assert!(rel_close(g, adversarial_g_ls_brute(&fake), TOL));

        let real = uniform(&mut r, 2 * 30, 0.01, 0.99);
        let fake = uniform(&mut r, 2 * 30, 0.01, 0.99);
        let v = AdversarialMode::Vanilla;
        let d = adversarial_loss_d(AdversarialScores { real: &real, fake: &fake, mode: v }).unwrap();
        assert!(rel_close(d, adversarial_d_vanilla_brute(&real, &fake), TOL));
        let g = adversarial_loss_g(&fake, v).unwrap();
        assert!(rel_close(g, adversarial_g_vanilla_brute(&fake), TOL));
    }
}

#[test]
fn ssim_matches_two_dimensional_window_oracle() {
    let p = small_window();
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let a = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
        // Correlated reference so both comparison terms are far from trivial.
        let b: Vec<f64> = a.iter().map(|v| 0.6 * v + r.gen_range(-0.4..0.4)).collect();
        for (mode, product) in [(SsimMode::StandardProduct, true), (SsimMode::PaperSum, false)] {
            let got = ssim_mean(&a, &b, SHAPE, &p, mode).unwrap();
            let want = ssim_mean_brute(&a, &b, 8, 8, 7, 1.5, product);
            assert!(rel_close(got, want, TOL), "{mode:?}: {got} vs {want}");
            let loss = ssim_loss(&b, &a, &b, &a, SHAPE, &p, mode).unwrap();
            assert!(rel_close(loss, 2.0 * (1.0 - want), TOL));
        }
    }
}

#[test]
fn ssim_default_window_matches_oracle_on_larger_images() {
    let p = SsimParams::default();
    let mut r = rng(9);
    let a = uniform(&mut r, 16 * 16, -1.0, 1.0);
    let b = uniform(&mut r, 16 * 16, -1.0, 1.0);
    let got = ssim_map(&a, &b, 16, 16, &p, SsimMode::StandardProduct).unwrap();
    let want = ssim_map_brute(&a, &b, 16, 16, 11, 1.5, 0.01, 0.03, 2.0, true);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
    }
}

#[test]
fn ssim_map_is_symmetric() {
    let p = small_window();
    let mut r = rng(11);
    let a = uniform(&mut r, 64, -1.0, 1.0);
    let b = uniform(&mut r, 64, -1.0, 1.0);
    let ab = ssim_map(&a, &b, 8, 8, &p, SsimMode::StandardProduct).unwrap();
    let ba = ssim_map(&b, &a, 8, 8, &p, SsimMode::StandardProduct).unwrap();
    for (u, v) in ab.iter().zip(&ba) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn ssim_scaling_with_rescaled_constants() {
    let p1 = SsimParams::new(WindowKind::Gaussian, 7, 1.5, 0.01, 0.03, 1.0).unwrap();
    let p2 = SsimParams::new(WindowKind::Gaussian, 7, 1.5, 0.01, 0.03, 2.0).unwrap();
    let mut r = rng(12);
    let a = uniform(&mut r, 64, 0.0, 1.0);
    let b = uniform(&mut r, 64, 0.0, 1.0);
    let m1 = ssim_map(&a, &b, 8, 8, &p1, SsimMode::StandardProduct).unwrap();
    let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
    let m2 = ssim_map(&a2, &b2, 8, 8, &p2, SsimMode::StandardProduct).unwrap();
    for (u, v) in m1.iter().zip(&m2) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn ssim_ranges_hold() {
    let p = small_window();
    let mut r = rng(13);
    let a = uniform(&mut r, SHAPE.len(), -1.0, 1.0);
    let b: Vec<f64> = a.iter().map(|v| -v + r.gen_range(-0.1..0.1)).collect();
    let prod = ssim_loss(&a, &b, &a, &b, SHAPE, &p, SsimMode::StandardProduct).unwrap();
    assert!((0.0..=4.0).contains(&prod));
    let sum = ssim_loss(&a, &b, &a, &b, SHAPE, &p, SsimMode::PaperSum).unwrap();
    assert!((-2.0..=6.0).contains(&sum));
}

#[test]
fn losses_are_nonnegative_in_default_modes() {
    let mut r = rng(14);
    for _ in 0..50 {
        let a = uniform(&mut r, 32, -1.0, 1.0);
        let b = uniform(&mut r, 32, -1.0, 1.0);
        assert!(cycle_loss(&a, &b, &b, &a).unwrap() >= 0.0);
        let ls = AdversarialMode::LeastSquares;
        assert!(adversarial_loss_d(AdversarialScores { real: &a, fake: &b, mode: ls }).unwrap() >= 0.0);
        assert!(adversarial_loss_g(&a, ls).unwrap() >= 0.0);
        assert!(classifier_loss(&a, 8, &[1, 2, 3, 4]).unwrap() >= 0.0);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    assert!(cycle_loss(&[0.0; 4], &[0.0; 3], &[0.0; 4], &[0.0; 4]).is_err());
    let p = small_window();
    assert!(ssim_mean(&[0.0; 10], &[0.0; 10], SHAPE, &p, SsimMode::StandardProduct).is_err());
}


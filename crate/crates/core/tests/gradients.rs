use vstain::gradcheck::*;

const NAMES: [&str; 10] = [
    "cycle",
    "identity",
    "classifier",
    "classification_cycle",
    "adversarial_d_ls",
    "adversarial_g_ls",
    "adversarial_d_vanilla",
    "adversarial_g_vanilla",
    "ssim_product",
    "photorealism",
];

#[test]
fn every_loss_passes_across_seeds() {
    for seed in 0..5 {
        let report = run_gradcheck(&GradcheckOptions { seed, ..GradcheckOptions::default() }).unwrap();
        assert!(report.passed(), "seed {seed}\n{}", report.render());
        for e in &report.entries {
            assert!(e.max_rel_error <= 1e-4 && e.coords > 0, "{e:?}");
        }
    }
}

#[test]
fn report_covers_every_loss() {
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    for name in NAMES {
        assert!(report.entry(name).is_some(), "missing {name}: {:?}", report.entries.iter().map(|e| &e.name).collect::<Vec<_>>());
    }
    assert!(report.entry("ssim_paper_sum").is_some());
    let text = report.render();
    assert!(text.lines().last().unwrap().starts_with("PASS"));
    assert_eq!(text.lines().count(), report.entries.len() + 2);
}

#[test]
fn larger_images_pass_with_subsampled_coordinates() {
    let report = run_gradcheck(&GradcheckOptions { size: 16, seed: 3, ..GradcheckOptions::default() }).unwrap();
    assert!(report.passed(), "{}", report.render());
    assert!(report.entries.iter().all(|e| e.coords <= 512));
}

#[test]
fn ssim_error_shrinks_quadratically_with_step() {
    let at = |step: f64| {
        run_gradcheck(&GradcheckOptions { step, tolerance: 1.0, seed: 1, ..GradcheckOptions::default() })
            .unwrap()
            .entry("ssim_product")
            .unwrap()
            .max_rel_error
    };
    let (coarse, fine) = (at(1e-2), at(1e-3));
    assert!(coarse / fine > 30.0, "{coarse:e} -> {fine:e}");
}

#[test]
fn injected_sign_fault_is_caught() {
    let report = run_gradcheck(&GradcheckOptions { fault: Some(Fault::SsimSign), ..GradcheckOptions::default() }).unwrap();
    assert!(!report.passed());
    let e = report.entry("ssim_product").unwrap();
    assert!(!e.passed && e.max_rel_error > 1.0, "{e:?}");
    assert!(report.entry("cycle").unwrap().passed);
    assert!(report.render().lines().last().unwrap().starts_with("FAIL"));
    assert!("ssim-sign".parse::<Fault>().is_ok());
    assert!("other".parse::<Fault>().is_err());
}

#[test]
fn same_seed_same_report() {
    let opts = GradcheckOptions { seed: 9, ..GradcheckOptions::default() };
    assert_eq!(run_gradcheck(&opts).unwrap(), run_gradcheck(&opts).unwrap());
    assert!(run_gradcheck(&GradcheckOptions { size: 3, ..GradcheckOptions::default() }).is_err());
}

#[test]
fn central_differences_of_known_functions() {
    let mut cubic = |v: &[f64]| Ok(v.iter().map(|x| x * x * x).sum::<f64>());
    let point = [0.5, -1.0, 2.0];
    let d = central_differences(&mut cubic, &point, &[0, 1, 2], 1e-3).unwrap();
    for (got, x) in d.iter().zip(point) {
        // Central difference of x³ is exactly 3x² + h².
        assert!((got - (3.0 * x * x + 1e-6)).abs() < 1e-9, "{got}");
    }
    let mut sines = |v: &[f64]| Ok(v.iter().map(|x| x.sin()).sum::<f64>());
    let analytic: Vec<f64> = point.iter().map(|x| x.cos()).collect();
    let e1 = max_relative_error(&mut sines, &point, &analytic, &[0, 1, 2], 1e-2).unwrap();
    let e2 = max_relative_error(&mut sines, &point, &analytic, &[0, 1, 2], 1e-3).unwrap();
    assert!((e1 / e2 - 100.0).abs() < 1.0, "{e1:e} {e2:e}");
    assert!(e2 < 1e-6);
}

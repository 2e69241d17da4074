mod common;

use common::*;
use proptest::prelude::*;
use vstain::data::{synthetic_base_colour, synthetic_patch, SyntheticSpec};
use vstain::domain::{Direction, Image, LabeledPatch, StainDomain, TissueClass};
use vstain::inference::*;
use vstain::networks::{Classifier, Generator, ModelBundle};

fn identity_bundle(classes: usize, size: usize) -> ModelBundle {
    let mut b = ModelBundle::new(&tiny_config(classes, size, 4, 1)).unwrap();
    b.g_enc = Generator::identity(classes);
    b.g_dec = Generator::identity(classes);
    b
}

fn colours(domain: StainDomain, classes: usize) -> Vec<[f32; 3]> {
    (0..classes).map(|c| synthetic_base_colour(domain, c, classes)).collect()
}

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::new(h, w, uniform(&mut r, 3 * h * w, -1.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

fn max_diff(a: &Image, b: &Image) -> f32 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn constant_image_matches_single_patch_under_any_tiling() {
    let random = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let rgb = [0.3, -0.2, 0.5];
    for bundle in [identity_bundle(3, 32), random] {
        let patch = translate_image(&bundle, &Image::filled(32, 32, rgb), Direction::XToY, TissueClass::F).unwrap();
        for c in 0..3 {
            let plane = patch.plane(c);
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-6));
        }
        let big = Image::filled(96, 80, rgb);
        for tiling in [Tiling::new(32), Tiling { tile: 32, overlap: 12 }, Tiling { tile: 32, overlap: 0 }, Tiling { tile: 64, overlap: 20 }] {
            let out = translate_tiled(&bundle, &big, Direction::XToY, tiling, ClassMap::Single(TissueClass::F)).unwrap();
            assert_eq!((out.height, out.width), (96, 80));
            for c in 0..3 {
                let want = patch.get(c, 0, 0);
                assert!(out.plane(c).iter().all(|v| (v - want).abs() < 1e-6), "{tiling:?}");
            }
        }
    }
}

#[test]
fn single_tile_image_is_bit_identical_to_patch_translation() {
    let bundle = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let img = random_image(32, 32, 1);
    let patch = LabeledPatch { pixels: img.clone(), domain: StainDomain::X, tissue_class: TissueClass::N, source_id: "p".into() };
    let one = translate_patch(&bundle, &patch, Direction::XToY, ClassSource::Given).unwrap();
    let tiled = translate_tiled(&bundle, &img, Direction::XToY, Tiling::new(32), ClassMap::Single(TissueClass::N)).unwrap();
    assert_eq!(one.pixels, tiled);
    assert_eq!(one.domain, StainDomain::Y);
    assert_eq!(one.tissue_class, TissueClass::N);
}

#[test]
fn tiled_output_keeps_shape_and_range() {
    let bundle = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let img = random_image(160, 160, 2);
    let out = translate_tiled(&bundle, &img, Direction::XToY, Tiling { tile: 64, overlap: 16 }, ClassMap::Single(TissueClass::H)).unwrap();
    assert_eq!((out.height, out.width), (160, 160));
    assert!(out.in_unit_range());
    let odd = random_image(70, 45, 3);
    let out = translate_tiled(&bundle, &odd, Direction::YToX, Tiling::new(32), ClassMap::PerTilePredicted).unwrap();
    assert_eq!((out.height, out.width), (70, 45));
}

#[test]
fn identity_tiling_reproduces_the_input() {
    let bundle = identity_bundle(3, 32);
    let img = random_image(100, 76, 4);
    for tiling in [Tiling::new(32), Tiling { tile: 64, overlap: 16 }, Tiling { tile: 32, overlap: 0 }] {
        let out = translate_tiled(&bundle, &img, Direction::XToY, tiling, ClassMap::Single(TissueClass::H)).unwrap();
        assert!(max_diff(&out, &img) < 1e-6, "{tiling:?}");
    }
}

#[test]
fn images_smaller_than_a_tile_are_padded_and_cropped() {
    let bundle = identity_bundle(3, 32);
    let img = random_image(20, 12, 5);
    let out = translate_tiled(&bundle, &img, Direction::XToY, Tiling::new(32), ClassMap::Single(TissueClass::H)).unwrap();
    assert_eq!((out.height, out.width), (20, 12));
    assert!(max_diff(&out, &img) < 1e-6);
    let random = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let out = translate_tiled(&random, &img, Direction::XToY, Tiling::new(32), ClassMap::Single(TissueClass::H)).unwrap();
    assert_eq!((out.height, out.width), (20, 12));
}

#[test]
fn patch_translation_shapes() {
    let bundle = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    for size in [64, 128, 256] {
        let out = translate_image(&bundle, &random_image(size, size, size as u64), Direction::XToY, TissueClass::F).unwrap();
        assert_eq!((out.height, out.width), (size, size));
        assert!(out.in_unit_range());
    }
}

#[test]
fn given_class_drives_the_condition() {
    let bundle = ModelBundle::new(&tiny_config(8, 32, 4, 1)).unwrap();
    let img = random_image(32, 32, 6);
    let patch = LabeledPatch { pixels: img.clone(), domain: StainDomain::X, tissue_class: TissueClass::TN, source_id: "t".into() };
    let out = translate_patch(&bundle, &patch, Direction::XToY, ClassSource::Given).unwrap();
    assert_eq!(out.tissue_class, TissueClass::TN);
    assert_eq!(TissueClass::TN.index(), 6);
    let direct = translate_image(&bundle, &img, Direction::XToY, TissueClass::TN).unwrap();
    assert_eq!(out.pixels, direct);
    let other = translate_image(&bundle, &img, Direction::XToY, TissueClass::H).unwrap();
    assert_ne!(direct, other);
}

#[test]
fn predicted_class_uses_source_classifier() {
    let mut bundle = identity_bundle(3, 32);
    bundle.s_enc = Classifier::nearest_mean(&colours(StainDomain::X, 3));
    bundle.s_dec = Classifier::nearest_mean(&colours(StainDomain::Y, 3));
    let spec = SyntheticSpec { num_classes: 3, patch_size: 32, per_class_count: 1, seed: 9 };
    for (k, &class) in TissueClass::first(3).iter().enumerate() {
        let x = synthetic_patch(&spec, StainDomain::X, k, 0);
        assert_eq!(predict_class(&bundle, &x, Direction::XToY).unwrap(), class);
        let y = synthetic_patch(&spec, StainDomain::Y, k, 0);
        assert_eq!(predict_class(&bundle, &y, Direction::YToX).unwrap(), class);
        // The label is ignored when predicting.
        let patch = LabeledPatch { pixels: x, domain: StainDomain::X, tissue_class: TissueClass::BG, source_id: "x".into() };
        let out = translate_patch(&bundle, &patch, Direction::XToY, ClassSource::Predicted).unwrap();
        assert_eq!(out.tissue_class, class);
    }
    assert!(std::ptr::eq(source_classifier(&bundle, Direction::XToY), &bundle.s_enc));
    assert!(std::ptr::eq(target_classifier(&bundle, Direction::XToY), &bundle.s_dec));
}

#[test]
fn domain_mismatch_is_rejected() {
    let bundle = identity_bundle(3, 32);
    let patch = LabeledPatch { pixels: random_image(32, 32, 7), domain: StainDomain::Y, tissue_class: TissueClass::H, source_id: "y".into() };
    assert!(translate_patch(&bundle, &patch, Direction::XToY, ClassSource::Given).is_err());
    assert!(translate_patch(&bundle, &patch, Direction::YToX, ClassSource::Given).is_ok());
}

#[test]
fn bad_tilings_are_rejected() {
    let bundle = identity_bundle(3, 32);
    let img = random_image(64, 64, 8);
    for tiling in [Tiling { tile: 0, overlap: 0 }, Tiling { tile: 30, overlap: 4 }, Tiling { tile: 32, overlap: 16 }] {
        assert!(translate_tiled(&bundle, &img, Direction::XToY, tiling, ClassMap::Single(TissueClass::H)).is_err());
    }
}

#[test]
fn tiled_translation_is_deterministic() {
    let bundle = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let img = random_image(80, 80, 9);
    let run = || translate_tiled(&bundle, &img, Direction::XToY, Tiling::new(32), ClassMap::PerTilePredicted).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn tile_starts_cover_with_required_overlap() {
    for len in 32..300 {
        for tiling in [Tiling::new(32), Tiling { tile: 64, overlap: 16 }, Tiling { tile: 32, overlap: 0 }] {
            let starts = tile_starts(len.max(tiling.tile), tiling);
            let len = len.max(tiling.tile);
            assert_eq!(starts[0], 0);
            assert_eq!(*starts.last().unwrap() + tiling.tile, len);
            for pair in starts.windows(2) {
                assert!(pair[0] < pair[1]);
                assert!(pair[0] + tiling.tile >= pair[1] + tiling.overlap, "{len} {tiling:?} {starts:?}");
            }
        }
    }
}

proptest! {
    #[test]
    fn feather_weights_partition_unity(len in 16usize..400, tile_quarter in 2usize..20, overlap_frac in 0usize..8) {
        let tile = 4 * tile_quarter;
        let len = len.max(tile);
        let tiling = Tiling { tile, overlap: overlap_frac * (tile / 2 - 1) / 8 };
        let starts = tile_starts(len, tiling);
        let w = feather_weights(len, tile, &starts);
        let mut total = vec![0.0; len];
        for (ws, &s) in w.iter().zip(&starts) {
            for (i, v) in ws.iter().enumerate() {
                prop_assert!(*v > 0.0 && *v <= 1.0 + 1e-12);
                total[s + i] += v;
            }
        }
        for t in total {
            prop_assert!((t - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn seam_ratio_is_small_on_smooth_outputs() {
    let bundle = ModelBundle::new(&tiny_config(3, 32, 4, 1)).unwrap();
    let spec = SyntheticSpec { num_classes: 3, patch_size: 160, per_class_count: 1, seed: 3 };
    let img = synthetic_patch(&spec, StainDomain::X, 1, 0);
    let tiling = Tiling { tile: 64, overlap: 16 };
    let out = translate_tiled(&bundle, &img, Direction::XToY, tiling, ClassMap::Single(TissueClass::F)).unwrap();
    let ratio = seam_gradient_ratio(&out, tiling);
    assert!(ratio <= 1.5, "seam ratio {ratio}");
    let identity = translate_tiled(&identity_bundle(3, 32), &img, Direction::XToY, tiling, ClassMap::Single(TissueClass::F)).unwrap();
    assert!(seam_gradient_ratio(&identity, tiling) <= 1.5);
}

#[test]
fn seam_ratio_flags_a_hard_seam() {
    let tiling = Tiling { tile: 32, overlap: 8 };
    let mut img = Image::filled(56, 56, [0.0; 3]);
    for c in 0..3 {
        for r in 0..56 {
            for col in 0..56 {
                let base = 0.01 * ((r * 7 + col * 3) % 5) as f32;
                img.set(c, r, col, if col >= 32 { base + 0.5 } else { base });
            }
        }
    }
    assert!(seam_gradient_ratio(&img, tiling) > 1.5);
}

#[test]
fn presets_only_rename_and_redirect() {
    let base = tiny_config(3, 32, 4, 1);
    assert_eq!(preset_mode(&base, Preset::HeToIhc), base);
    let rev = preset_mode(&base, Preset::IhcToHe);
    assert_eq!(rev.default_direction, Direction::YToX);
    assert_eq!(rev.networks, base.networks);
    let deconv = preset_mode(&base, Preset::HOnlyDeconvolution);
    assert_eq!(deconv.y_name, "H-only");
    assert_eq!(deconv.default_direction, Direction::XToY);
    assert_eq!(deconv.loss_weights, base.loss_weights);
    assert_eq!("ihc_to_he".parse::<Preset>().unwrap(), Preset::IhcToHe);
    assert!("sideways".parse::<Preset>().is_err());
}

//! Applying a trained bundle: single-patch translation, tiled whole-image
//! translation with feathered stitching, and direction presets.

use serde::{Deserialize, Serialize};

use crate::domain::{Direction, ExperimentConfig, Image, LabeledPatch, TissueClass};
use crate::error::{Error, Result};
use crate::networks::{Classifier, Generator, ModelBundle};
use crate::tensor::Tensor;

/// Where the class condition of a translation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSource {
    /// Use the patch's own label (or the given class for whole images).
    Given,
    /// Use the source-domain classifier's most likely class.
    Predicted,
}

/// Condition used for every tile of a tiled translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMap {
    Single(TissueClass),
    PerTilePredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

impl Tiling {
    /// Overlap defaults to a quarter of the tile.
    pub fn new(tile: usize) -> Tiling {
        Tiling { tile, overlap: tile / 4 }
    }

    fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.tile % 4 != 0 {
            return Err(Error::invalid(format!("tile {} must be a positive multiple of 4", self.tile)));
        }
        if 2 * self.overlap >= self.tile {
            return Err(Error::invalid(format!(
                "overlap {} must be less than half the tile {}",
                self.overlap, self.tile
            )));
        }
        Ok(())
    }
}

fn generator(bundle: &ModelBundle, direction: Direction) -> &Generator {
    bundle.generator(direction == Direction::XToY)
}

/// Classifier of the direction's source domain.
pub fn source_classifier(bundle: &ModelBundle, direction: Direction) -> &Classifier {
    match direction {
        Direction::XToY => &bundle.s_enc,
        Direction::YToX => &bundle.s_dec,
    }
}

/// Classifier of the direction's target domain.
pub fn target_classifier(bundle: &ModelBundle, direction: Direction) -> &Classifier {
    source_classifier(bundle, direction.reverse())
}

fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(1, 3, img.height, img.width, img.data.clone()).expect("image shape")
}

fn tensor_image(t: Tensor) -> Image {
    Image {
        height: t.h,
        width: t.w,
        data: t.data,
    }
}

/// Most likely source-domain class of an image.
pub fn predict_class(bundle: &ModelBundle, img: &Image, direction: Direction) -> Result<TissueClass> {
    Ok(source_classifier(bundle, direction).predict(&image_tensor(img))?[0])
}

/// Translates a whole image (sides divisible by 4) under one condition.
pub fn translate_image(bundle: &ModelBundle, img: &Image, direction: Direction, class: TissueClass) -> Result<Image> {
    let out = generator(bundle, direction).infer(&image_tensor(img), &[class])?;
    Ok(tensor_image(out))
}

/// Translates one patch into the direction's target domain. The returned
/// patch carries the condition that was used.
pub fn translate_patch(
    bundle: &ModelBundle,
    patch: &LabeledPatch,
    direction: Direction,
    class_source: ClassSource,
) -> Result<LabeledPatch> {
    if patch.domain != direction.source() {
        return Err(Error::invalid(format!(
            "patch {:?} is in domain {} but the direction translates from {}",
            patch.source_id,
            patch.domain,
            direction.source()
        )));
    }
    let class = match class_source {
        ClassSource::Given => patch.tissue_class,
        ClassSource::Predicted => predict_class(bundle, &patch.pixels, direction)?,
    };
    Ok(LabeledPatch {
        pixels: translate_image(bundle, &patch.pixels, direction, class)?,
        domain: direction.target(),
        tissue_class: class,
        source_id: patch.source_id.clone(),
    })
}

/// Tile start offsets along one axis of length `len >= tile`: evenly spread,
/// first at 0 and last flush with the end, neighbours overlapping by at least
/// `overlap`.
pub fn tile_starts(len: usize, tiling: Tiling) -> Vec<usize> {
    let Tiling { tile, overlap } = tiling;
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let gaps = (len - tile).div_ceil(stride);
    (0..=gaps).map(|i| i * (len - tile) / gaps).collect()
}

/// Per-tile blending weights along one axis: each tile ramps linearly over
/// the span it shares with its neighbours, and weights are normalised so
/// they sum to one at every position.
pub fn feather_weights(len: usize, tile: usize, starts: &[usize]) -> Vec<Vec<f64>> {
    let mut raw: Vec<Vec<f64>> = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let left = k.checked_sub(1).map(|p| (starts[p] + tile).saturating_sub(s)).unwrap_or(0);
            let right = starts.get(k + 1).map(|&n| (s + tile).saturating_sub(n)).unwrap_or(0);
            (0..tile)
                .map(|i| {
                    let mut w = 1.0f64;
                    if left > 0 {
                        w = w.min((i as f64 + 0.5) / left as f64);
                    }
                    if right > 0 {
                        w = w.min(((tile - i) as f64 - 0.5) / right as f64);
                    }
                    w
                })
                .collect()
        })
        .collect();
    let mut total = vec![0.0f64; len];
    for (w, &s) in raw.iter().zip(starts) {
        for (i, v) in w.iter().enumerate() {
            total[s + i] += v;
        }
    }
    for (w, &s) in raw.iter_mut().zip(starts) {
        for (i, v) in w.iter_mut().enumerate() {
            *v /= total[s + i];
        }
    }
    raw
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Extends an image to at least `h`×`w` by mirroring about its last row and
/// column (repeatedly if needed).
fn reflect_pad(img: &Image, h: usize, w: usize) -> Image {
    let mut out = Image::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        for r in 0..h {
            let sr = reflect_index(r as isize, img.height);
            for col in 0..w {
                out.set(c, r, col, img.get(c, sr, reflect_index(col as isize, img.width)));
            }
        }
    }
    out
}

/// Translates an image of any size by overlapping tiles. Images smaller than
/// a tile are mirror-padded to one tile and cropped back. Tiles are processed
/// one row band at a time and accumulated into the output with feathered
/// weights.
pub fn translate_tiled(
    bundle: &ModelBundle,
    image: &Image,
    direction: Direction,
    tiling: Tiling,
    class_map: ClassMap,
) -> Result<Image> {
    tiling.validate()?;
    if image.height == 0 || image.width == 0 {
        return Err(Error::shape("cannot translate an empty image"));
    }
    let tile = tiling.tile;
    let (h, w) = (image.height.max(tile), image.width.max(tile));
    let padded;
    let src = if (h, w) != (image.height, image.width) {
        padded = reflect_pad(image, h, w);
        &padded
    } else {
        image
    };
    let rows = tile_starts(h, tiling);
    let cols = tile_starts(w, tiling);
    let row_w = feather_weights(h, tile, &rows);
    let col_w = feather_weights(w, tile, &cols);
    let mut out = vec![0f32; 3 * h * w];
    for (&r0, wr) in rows.iter().zip(&row_w) {
        for (&c0, wc) in cols.iter().zip(&col_w) {
            let crop = src.crop(r0, c0, tile, tile);
            let class = match class_map {
                ClassMap::Single(c) => c,
                ClassMap::PerTilePredicted => predict_class(bundle, &crop, direction)?,
            };
            let t = translate_image(bundle, &crop, direction, class)?;
            for c in 0..3 {
                for i in 0..tile {
                    let base = (c * h + r0 + i) * w + c0;
                    for j in 0..tile {
                        let v = t.get(c, i, j) as f64 * wr[i] * wc[j];
                        out[base + j] += v as f32;
                    }
                }
            }
        }
    }
    let full = Image::new(h, w, out)?;
    Ok(if (h, w) == (image.height, image.width) {
        full
    } else {
        full.crop(0, 0, image.height, image.width)
    })
}

/// Ratio of the strongest mean absolute gradient across any tile boundary to
/// the median mean absolute gradient across interior (non-boundary) lines,
/// over both axes.
pub fn seam_gradient_ratio(img: &Image, tiling: Tiling) -> f64 {
    let mut seam = Vec::new();
    let mut interior = Vec::new();
    for vertical in [true, false] {
        let (len, across) = if vertical {
            (img.width, img.height)
        } else {
            (img.height, img.width)
        };
        if len < 2 {
            continue;
        }
        let starts = tile_starts(len.max(tiling.tile), tiling);
        let mut bounds: Vec<usize> = starts
            .iter()
            .flat_map(|&s| [s, s + tiling.tile])
            .filter(|&b| b > 0 && b < len)
            .collect();
        bounds.sort_unstable();
        bounds.dedup();
        // line k separates positions k-1 and k
        for k in 1..len {
            let mut sum = 0.0;
            for c in 0..3 {
                for a in 0..across {
                    let (p, q) = if vertical {
                        (img.get(c, a, k - 1), img.get(c, a, k))
                    } else {
                        (img.get(c, k - 1, a), img.get(c, k, a))
                    };
                    sum += (p - q).abs() as f64;
                }
            }
            let g = sum / (3 * across) as f64;
            if bounds.contains(&k) {
                seam.push(g);
            } else {
                interior.push(g);
            }
        }
    }
    if seam.is_empty() || interior.is_empty() {
        return 0.0;
    }
    interior.sort_by(f64::total_cmp);
    let median = interior[interior.len() / 2];
    let max_seam = seam.iter().cloned().fold(0.0, f64::max);
    max_seam / median
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    HeToIhc,
    IhcToHe,
    HOnlyDeconvolution,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he_to_ihc" => Ok(Preset::HeToIhc),
            "ihc_to_he" => Ok(Preset::IhcToHe),
            "h_only_deconvolution" => Ok(Preset::HOnlyDeconvolution),
            _ => Err(Error::invalid(format!("unknown preset {s:?}"))),
        }
    }
}

/// Configuration for one of the translation presets. Presets only rename the
/// domains and set the default direction; the method is unchanged.
pub fn preset_mode(cfg: &ExperimentConfig, mode: Preset) -> ExperimentConfig {
    let mut out = cfg.clone();
    match mode {
        Preset::HeToIhc => {}
        Preset::IhcToHe => out.default_direction = Direction::YToX,
        Preset::HOnlyDeconvolution => {
            out.x_name = "H&E".to_string();
            out.y_name = "H-only".to_string();
            out.default_direction = Direction::XToY;
        }
    }
    out
}

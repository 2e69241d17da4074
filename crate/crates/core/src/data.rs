//! Patch manifests, class-conditional sampling, image IO and the synthetic
//! two-domain fixture.
//!
//! Manifest format: UTF-8 text, one record per line,
//! `path<TAB>domain<TAB>class<TAB>source_id`. Lines starting with `#` are
//! comments; `# patch_size: N` and `# magnification: TAG` are recognised as
//! metadata. Relative paths resolve against the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{normalize_image, denormalize_image, ClassBalance, Image, LabeledPatch, StainDomain, TissueClass};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path as written in the manifest.
    pub path: String,
    /// Path resolved against the manifest directory.
    pub resolved: PathBuf,
    pub domain: StainDomain,
    pub class: TissueClass,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub patch_size: usize,
    pub magnification_tag: String,
}

impl DatasetManifest {
    /// Parses manifest text without touching the referenced files. Checks
    /// the token vocabulary, duplicate paths and that both domains occur.
    pub fn parse(text: &str, base: &Path) -> Result<DatasetManifest> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut patch_size = None;
        let mut magnification = "20x".to_string();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once(':') {
                    match k.trim() {
                        "patch_size" => {
                            patch_size = Some(v.trim().parse::<usize>().map_err(|_| Error::Manifest {
                                path: base.to_path_buf(),
                                message: format!("line {line_no}: bad patch_size {:?}", v.trim()),
                            })?)
                        }
                        "magnification" => magnification = v.trim().to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Manifest {
                    path: base.to_path_buf(),
                    message: format!("line {line_no}: expected 4 tab-separated fields, found {}", fields.len()),
                });
            }
            let domain = fields[1].parse::<StainDomain>().map_err(|_| Error::UnknownDomain {
                token: fields[1].to_string(),
                line: line_no,
            })?;
            let class = fields[2].parse::<TissueClass>().map_err(|_| Error::UnknownClass {
                token: fields[2].to_string(),
                line: Some(line_no),
            })?;
            let resolved = base.join(fields[0]);
            if !seen.insert(resolved.clone()) {
                return Err(Error::DuplicatePath {
                    line: line_no,
                    file: resolved,
                });
            }
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                resolved,
                domain,
                class,
                source_id: fields[3].to_string(),
            });
        }
        for d in [StainDomain::X, StainDomain::Y] {
            if !entries.iter().any(|e| e.domain == d) {
                return Err(Error::Manifest {
                    path: base.to_path_buf(),
                    message: format!("at least one entry per domain is required; domain {d} has none"),
                });
            }
        }
        Ok(DatasetManifest {
            entries,
            patch_size: patch_size.unwrap_or(0),
            magnification_tag: magnification,
        })
    }

    pub fn count(&self, domain: StainDomain, class: TissueClass) -> usize {
        self.entries.iter().filter(|e| e.domain == domain && e.class == class).count()
    }

    pub fn domain_count(&self, domain: StainDomain) -> usize {
        self.entries.iter().filter(|e| e.domain == domain).count()
    }

    /// Entry indices of one (domain, class) cell.
    pub fn cell(&self, domain: StainDomain, class: TissueClass) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].domain == domain && self.entries[i].class == class)
            .collect()
    }

    /// Classes with at least one entry in every listed domain.
    pub fn classes_in(&self, domains: &[StainDomain]) -> Vec<TissueClass> {
        TissueClass::ALL
            .iter()
            .copied()
            .filter(|&c| domains.iter().all(|&d| self.count(d, c) > 0))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if self.patch_size > 0 {
            writeln!(out, "# patch_size: {}", self.patch_size).unwrap();
        }
        writeln!(out, "# magnification: {}", self.magnification_tag).unwrap();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}\t{}", e.path, e.domain, e.class, e.source_id).unwrap();
        }
        out
    }

    pub fn load_patch(&self, index: usize) -> Result<LabeledPatch> {
        let e = &self.entries[index];
        Ok(LabeledPatch {
            pixels: load_image(&e.resolved)?,
            domain: e.domain,
            tissue_class: e.class,
            source_id: e.source_id.clone(),
        })
    }
}

/// Reads and fully validates a manifest: every file must exist and decode to
/// a square RGB image of the common patch size.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut m = DatasetManifest::parse(&text, base).map_err(|e| match e {
        Error::Manifest { message, .. } => Error::Manifest {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })?;
    let line_of = line_numbers(&text);
    for (e, &line) in m.entries.iter().zip(&line_of) {
        if !e.resolved.exists() {
            return Err(Error::MissingPatch {
                line,
                file: e.resolved.clone(),
            });
        }
        let unreadable = |message: String| Error::UnreadablePatch {
            line,
            file: e.resolved.clone(),
            message,
        };
        let (w, h) = image::image_dimensions(&e.resolved).map_err(|err| unreadable(err.to_string()))?;
        let (w, h) = (w as usize, h as usize);
        if w != h {
            return Err(unreadable(format!("patch is {w}x{h}, expected a square patch")));
        }
        if m.patch_size == 0 {
            m.patch_size = w;
        }
        if w != m.patch_size {
            return Err(unreadable(format!("patch is {w}x{h}, expected {0}x{0}", m.patch_size)));
        }
    }
    Ok(m)
}

fn line_numbers(text: &str) -> Vec<usize> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let l = l.trim_end_matches('\r');
            !l.trim().is_empty() && !l.starts_with('#')
        })
        .map(|(i, _)| i + 1)
        .collect()
}

/// Draws a class sequence of length `n`. `UniformClass` picks uniformly among
/// classes present in every listed domain; `Empirical` follows the entry
/// frequencies of the first domain.
pub fn sample_classes(
    manifest: &DatasetManifest,
    domains: &[StainDomain],
    balance: ClassBalance,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TissueClass>> {
    if n == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let available = manifest.classes_in(domains);
    if available.is_empty() {
        return Err(Error::EmptyCell {
            domain: domains.iter().map(|d| d.token()).collect::<Vec<_>>().join("+"),
            class: "any".into(),
        });
    }
    match balance {
        ClassBalance::UniformClass => Ok((0..n).map(|_| available[rng.gen_range(0..available.len())]).collect()),
        ClassBalance::Empirical => {
            let pool: Vec<TissueClass> = manifest
                .entries
                .iter()
                .filter(|e| e.domain == domains[0] && available.contains(&e.class))
                .map(|e| e.class)
                .collect();
            Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
        }
    }
}

/// One entry index per requested class, drawn uniformly within its cell.
pub fn sample_entries(
    manifest: &DatasetManifest,
    domain: StainDomain,
    classes: &[TissueClass],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    classes
        .iter()
        .map(|&c| {
            manifest.cell(domain, c).choose(rng).copied().ok_or_else(|| Error::EmptyCell {
                domain: domain.token().into(),
                class: c.token().into(),
            })
        })
        .collect()
}

/// `n` patches from `domain`, drawn as x ~ p(x|c) with c chosen by `balance`.
pub fn sample_conditional_batch(
    manifest: &DatasetManifest,
    domain: StainDomain,
    balance: ClassBalance,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledPatch>> {
    let classes = sample_classes(manifest, &[domain], balance, n, rng)?;
    sample_entries(manifest, domain, &classes, rng)?
        .into_iter()
        .map(|i| manifest.load_patch(i))
        .collect()
}

/// X and Y batches sharing one class sequence.
pub fn sample_paired_batches(
    manifest: &DatasetManifest,
    balance: ClassBalance,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<LabeledPatch>, Vec<LabeledPatch>)> {
    let classes = sample_classes(manifest, &[StainDomain::X, StainDomain::Y], balance, n, rng)?;
    let xs = sample_entries(manifest, StainDomain::X, &classes, rng)?;
    let ys = sample_entries(manifest, StainDomain::Y, &classes, rng)?;
    let load = |idx: Vec<usize>| idx.into_iter().map(|i| manifest.load_patch(i)).collect::<Result<Vec<_>>>();
    Ok((load(xs)?, load(ys)?))
}

/// Decoded patches kept in memory after first use.
#[derive(Debug, Default)]
pub struct PatchCache {
    patches: HashMap<usize, LabeledPatch>,
}

impl PatchCache {
    pub fn get(&mut self, manifest: &DatasetManifest, index: usize) -> Result<&LabeledPatch> {
        if !self.patches.contains_key(&index) {
            let p = manifest.load_patch(index)?;
            self.patches.insert(index, p);
        }
        Ok(&self.patches[&index])
    }
}

/// Loads an 8-bit PNG or TIFF as a normalized `[-1, 1]` image.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    normalize_image(img.as_raw(), h as usize, w as usize, 3)
}

/// Writes an image as 8-bit RGB; the format follows the file extension.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let raw = denormalize_image(img);
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
    buf.save(path)?;
    Ok(())
}

/// Parameters of the synthetic fixture. Domain X patches are a per-class base
/// colour plus a smooth seeded luminance texture; domain Y patches apply the
/// per-class colour affine map `y = base_y[c] + s·(x − base_x[c])` to a fresh
/// texture of the same class, so the true X→Y map is known and invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub patch_size: usize,
    pub per_class_count: usize,
    pub seed: u64,
}

pub const SYNTH_TEXTURE_AMPLITUDE: f32 = 0.25;
pub const SYNTH_Y_CONTRAST: f32 = 0.8;
const SYNTH_NOISE: f32 = 0.02;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base colours (in `[-1, 1]`) of every class in the given domain: evenly
/// spaced hues, with domain Y offset by half a step and rendered darker.
pub fn synthetic_base_colour(domain: StainDomain, class: usize, num_classes: usize) -> [f32; 3] {
    let step = 1.0 / num_classes as f64;
    let (hue, s, v) = match domain {
        StainDomain::X => (class as f64 * step, 0.5, 0.75),
        StainDomain::Y => ((class as f64 + 0.5) * step, 0.6, 0.6),
    };
    hsv_to_rgb(hue, s, v).map(|c| (2.0 * c - 1.0) as f32)
}

/// Smooth texture in `[-1, 1]`: a normalised sum of three random plane waves
/// with one to three cycles per patch.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1..=3) as f64 * if rng.gen::<bool>() { 1.0 } else { -1.0 },
                rng.gen_range(0..=3) as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut t = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (u, v) = (r as f64 / size as f64, c as f64 / size as f64);
            let s: f64 = waves.iter().map(|&(fu, fv, ph, a)| a * (2.0 * PI * (fu * u + fv * v) + ph).sin()).sum();
            t.push((s / norm) as f32);
        }
    }
    t
}

/// Deterministic fixture patch for (domain, class, index).
pub fn synthetic_patch(spec: &SyntheticSpec, domain: StainDomain, class: usize, index: usize) -> Image {
    let stream = ((domain == StainDomain::Y) as u64) << 40 | (class as u64) << 20 | index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let n = spec.patch_size;
    let tex = texture(n, &mut rng);
    let base = synthetic_base_colour(domain, class, spec.num_classes);
    let amp = match domain {
        StainDomain::X => SYNTH_TEXTURE_AMPLITUDE,
        StainDomain::Y => SYNTH_TEXTURE_AMPLITUDE * SYNTH_Y_CONTRAST,
    };
    let mut data = Vec::with_capacity(3 * n * n);
    for b in base {
        for t in &tex {
            let noise = rng.gen_range(-SYNTH_NOISE..SYNTH_NOISE);
            data.push((b + amp * t + noise).clamp(-1.0, 1.0));
        }
    }
    Image::new(n, n, data).expect("synthetic patch shape")
}

/// Writes the fixture under `out_dir` (`x/` and `y/` PNGs plus
/// `manifest.tsv`) and returns the validated manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    generate_synthetic_from(spec, out_dir, 0)
}

/// Like [`generate_synthetic`] but with patch indices starting at `first`,
/// so a later range gives a disjoint held-out set from the same distribution.
pub fn generate_synthetic_from(spec: &SyntheticSpec, out_dir: &Path, first: usize) -> Result<DatasetManifest> {
    if spec.num_classes == 0 || spec.num_classes > TissueClass::COUNT {
        return Err(Error::invalid(format!("num_classes must be in 1..=8, got {}", spec.num_classes)));
    }
    if spec.patch_size < 8 || spec.per_class_count == 0 {
        return Err(Error::invalid("synthetic patches need size >= 8 and at least one per class"));
    }
    let mut text = format!("# patch_size: {}\n# magnification: synthetic\n", spec.patch_size);
    for domain in [StainDomain::X, StainDomain::Y] {
        let sub = domain.token().to_lowercase();
        fs::create_dir_all(out_dir.join(&sub))?;
        for class in TissueClass::first(spec.num_classes) {
            for i in first..first + spec.per_class_count {
                let rel = format!("{sub}/{}_{i:04}.png", class.token());
                save_image(&out_dir.join(&rel), &synthetic_patch(spec, domain, class.index(), i))?;
                writeln!(text, "{rel}\t{domain}\t{class}\t{sub}-{}-{i:04}", class.token()).unwrap();
            }
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text)?;
    load_manifest(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn parse_rejects_bad_rows() {
        let base = Path::new("/nonexistent");
        assert!(matches!(
            DatasetManifest::parse("a.png\tX\tXX\ts\nb.png\tY\tH\ts\n", base),
            Err(Error::UnknownClass { line: Some(1), .. })
        ));
        assert!(matches!(
            DatasetManifest::parse("a.png\tZ\tH\ts\n", base),
            Err(Error::UnknownDomain { line: 1, .. })
        ));
        assert!(matches!(
            DatasetManifest::parse("a.png\tX\tH\ts\na.png\tY\tH\tt\n", base),
            Err(Error::DuplicatePath { line: 2, .. })
        ));
        let err = DatasetManifest::parse("# nothing\n", base).unwrap_err();
        assert!(err.to_string().contains("at least one entry per domain"));
    }

    #[test]
    fn texture_is_bounded() {
        let t = texture(16, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(t.iter().all(|v| v.abs() <= 1.0));
    }
}

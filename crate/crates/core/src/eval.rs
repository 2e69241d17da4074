//! Per-class evaluation of a trained bundle: structural similarity between
//! each patch and its translation, round-trip reconstruction error and
//! target-classifier agreement, reported in a fixed class-column table.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetManifest;
use crate::domain::{Direction, SsimMode, TissueClass};
use crate::error::{Error, Result};
use crate::inference::{target_classifier, translate_image};
use crate::losses::{ssim_mean, BatchShape, SsimParams};
use crate::networks::ModelBundle;
use crate::tensor::Tensor;

pub const DEFAULT_PER_CLASS: usize = 30;

/// Metric names in report row order.
pub const METRICS: [&str; 4] = ["n_patches", "ssim", "cycle_l1", "agreement"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassStats {
    pub n_patches: usize,
    /// Mean SSIM between input and translation.
    pub ssim: f64,
    /// Mean absolute error of the round trip.
    pub cycle_l1: f64,
    /// Fraction of translations the target classifier assigns to the
    /// condition used.
    pub agreement: f64,
}

impl ClassStats {
    fn metric(&self, i: usize) -> f64 {
        match i {
            0 => self.n_patches as f64,
            1 => self.ssim,
            2 => self.cycle_l1,
            _ => self.agreement,
        }
    }

    /// Patch-weighted mean of several rows.
    pub fn pooled(rows: &[ClassStats]) -> ClassStats {
        let n: usize = rows.iter().map(|r| r.n_patches).sum();
        if n == 0 {
            return ClassStats::default();
        }
        let avg = |f: fn(&ClassStats) -> f64| rows.iter().map(|r| f(r) * r.n_patches as f64).sum::<f64>() / n as f64;
        ClassStats {
            n_patches: n,
            ssim: avg(|r| r.ssim),
            cycle_l1: avg(|r| r.cycle_l1),
            agreement: avg(|r| r.agreement),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    /// Evaluated classes in index order.
    pub per_class: Vec<(TissueClass, ClassStats)>,
    pub overall: ClassStats,
}

impl EvalReport {
    pub fn new(direction: Direction, per_class: Vec<(TissueClass, ClassStats)>) -> EvalReport {
        let rows: Vec<ClassStats> = per_class.iter().map(|(_, s)| *s).collect();
        EvalReport {
            direction,
            overall: ClassStats::pooled(&rows),
            per_class,
        }
    }

    pub fn class(&self, class: TissueClass) -> Option<&ClassStats> {
        self.per_class.iter().find(|(c, _)| *c == class).map(|(_, s)| s)
    }

    pub fn total_patches(&self) -> usize {
        self.overall.n_patches
    }

    /// Checks rate ranges and that the overall row is the patch-weighted mean
    /// of the class rows.
    pub fn validate(&self) -> Result<()> {
        for (c, s) in &self.per_class {
            if !(0.0..=1.0).contains(&s.agreement) || !(-1.0..=1.0).contains(&s.ssim) || !(s.cycle_l1 >= 0.0) {
                return Err(Error::invalid(format!("report row {c} is out of range: {s:?}")));
            }
        }
        let rows: Vec<ClassStats> = self.per_class.iter().map(|(_, s)| *s).collect();
        let want = ClassStats::pooled(&rows);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        if want.n_patches != self.overall.n_patches
            || !close(want.ssim, self.overall.ssim)
            || !close(want.cycle_l1, self.overall.cycle_l1)
            || !close(want.agreement, self.overall.agreement)
        {
            return Err(Error::invalid("overall row is not the patch-weighted class mean"));
        }
        Ok(())
    }
}

/// Translates `n_per_class` source-domain patches of every model class,
/// sampled without replacement with a generator seeded from `seed`, and
/// aggregates per-class and overall metrics.
pub fn evaluate(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    direction: Direction,
    n_per_class: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be positive"));
    }
    let classes = TissueClass::first(bundle.s_enc.num_classes);
    let source = direction.source();
    let deficits: Vec<String> = classes
        .iter()
        .filter_map(|&c| {
            let have = manifest.count(source, c);
            (have < n_per_class).then(|| format!("{c} has {have} of {n_per_class}"))
        })
        .collect();
    if !deficits.is_empty() {
        return Err(Error::InsufficientPatches(format!(
            "domain {source}: {}",
            deficits.join(", ")
        )));
    }
    let ssim = SsimParams::default();
    let back = bundle.generator(direction != Direction::XToY);
    let judge = target_classifier(bundle, direction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let cell = manifest.cell(source, class);
        let mut picked: Vec<usize> = sample(&mut rng, cell.len(), n_per_class).into_iter().map(|i| cell[i]).collect();
        picked.sort_unstable();
        let mut acc = ClassStats {
            n_patches: n_per_class,
            ..ClassStats::default()
        };
        for index in picked {
            let patch = manifest.load_patch(index)?;
            let img = &patch.pixels;
            let out = translate_image(bundle, img, direction, class)?;
            let out_t = Tensor::from_vec(1, 3, out.height, out.width, out.data.clone())?;
            let rec = back.infer(&out_t, &[class])?;
            let input: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
            let translated: Vec<f64> = out.data.iter().map(|&v| v as f64).collect();
            let shape = BatchShape::new(1, 3, img.height, img.width);
            acc.ssim += ssim_mean(&translated, &input, shape, &ssim, SsimMode::StandardProduct)?;
            acc.cycle_l1 += img.data.iter().zip(&rec.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
                / img.data.len() as f64;
            if judge.predict(&out_t)?[0] == class {
                acc.agreement += 1.0;
            }
        }
        let n = n_per_class as f64;
        acc.ssim /= n;
        acc.cycle_l1 /= n;
        acc.agreement /= n;
        per_class.push((class, acc));
    }
    Ok(EvalReport::new(direction, per_class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Tsv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ReportFormat::Tsv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

/// Header cells: metric name, the eight classes in report order, overall.
pub fn report_header() -> Vec<String> {
    let mut h = vec!["metric".to_string()];
    h.extend(TissueClass::REPORT_ORDER.iter().map(|c| c.token().to_string()));
    h.push("Overall".to_string());
    h
}

fn cell(stats: Option<&ClassStats>, metric: usize) -> String {
    match stats {
        None => "-".to_string(),
        Some(s) if metric == 0 => s.n_patches.to_string(),
        Some(s) => format!("{:.3}", s.metric(metric)),
    }
}

fn report_rows(report: &EvalReport) -> Vec<Vec<String>> {
    METRICS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let mut row = vec![name.to_string()];
            row.extend(TissueClass::REPORT_ORDER.iter().map(|&c| cell(report.class(c), m)));
            row.push(cell(Some(&report.overall), m));
            row
        })
        .collect()
}

/// One row per metric, one column per class (absent classes shown as `-`)
/// plus the overall column; three decimals for means.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    let header = report_header();
    let rows = report_rows(report);
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            for r in std::iter::once(&header).chain(&rows) {
                writeln!(out, "{}", r.join("\t")).unwrap();
            }
        }
        ReportFormat::Markdown => {
            writeln!(out, "| {} |", header.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(header.len())).unwrap();
            for r in &rows {
                writeln!(out, "| {} |", r.join(" | ")).unwrap();
            }
        }
    }
    out
}

/// A parsed report table: header cells and rows of cells, with `None` for
/// `-` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Parses a rendered report in either format.
pub fn parse_report(text: &str) -> Result<ReportTable> {
    let mut lines = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let cells: Vec<String> = if line.starts_with('|') {
            let inner = line.trim_start_matches('|').trim_end_matches('|');
            if inner.split('|').all(|c| c.trim().chars().all(|ch| ch == '-' || ch == ':')) {
                continue;
            }
            inner.split('|').map(|c| c.trim().to_string()).collect()
        } else {
            line.split('\t').map(|c| c.trim().to_string()).collect()
        };
        lines.push(cells);
    }
    let mut it = lines.into_iter();
    let header = it.next().ok_or_else(|| Error::invalid("empty report"))?;
    let mut rows = Vec::new();
    for (i, cells) in it.enumerate() {
        if cells.len() != header.len() {
            return Err(Error::invalid(format!(
                "report row {} has {} cells, header has {}",
                i + 1,
                cells.len(),
                header.len()
            )));
        }
        let values = cells[1..]
            .iter()
            .map(|c| {
                if c == "-" {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::invalid(format!("report cell {c:?} is not a number")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((cells[0].clone(), values));
    }
    Ok(ReportTable { header, rows })
}

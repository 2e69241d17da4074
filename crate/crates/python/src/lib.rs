//! Python bindings: dataset synthesis, training, translation, evaluation and
//! the loss kernels. Images cross the boundary as `H×W×3` float32 arrays in
//! `[-1, 1]`.

use std::path::PathBuf;

use numpy::ndarray::Array3;
use numpy::{IntoPyArray, PyArray1, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use vstain::cli::exit_code;
use vstain::data::{generate_synthetic, load_manifest, SyntheticSpec};
use vstain::domain::{Direction, ExperimentConfig, Image, SsimMode, TissueClass};
use vstain::error::Error;
use vstain::eval::{evaluate as run_evaluate, render_report, ReportFormat};
use vstain::gradcheck::{run_gradcheck, GradcheckOptions};
use vstain::inference::{translate_tiled, ClassMap, Tiling};
use vstain::losses::{ssim_mean, BatchShape, SsimParams};
use vstain::matting::build_matting_laplacian;
use vstain::networks::load_checkpoint;
use vstain::training::{run_training, TrainOptions};

fn py_err(e: Error) -> PyErr {
    if exit_code(&e) == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: Option<&str>) -> PyResult<Option<T>> {
    s.map(|v| v.parse().map_err(py_err)).transpose()
}

fn to_image(arr: &PyReadonlyArray3<'_, f32>) -> PyResult<Image> {
    let a = arr.as_array();
    let (h, w, c) = a.dim();
    if c != 3 {
        return Err(PyValueError::new_err(format!("expected an HxWx3 array, got {h}x{w}x{c}")));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in 0..3 {
        for r in 0..h {
            for col in 0..w {
                data.push(a[[r, col, ch]]);
            }
        }
    }
    Image::new(h, w, data).map_err(py_err)
}

fn from_image(img: &Image) -> Array3<f32> {
    Array3::from_shape_fn((img.height, img.width, 3), |(r, c, ch)| img.get(ch, r, c))
}

fn planar(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

/// Writes a seeded synthetic two-domain dataset and returns its manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, classes=3, size=64, per_class=20, seed=7))]
fn synth(out_dir: PathBuf, classes: usize, size: usize, per_class: usize, seed: u64) -> PyResult<String> {
    let spec = SyntheticSpec { num_classes: classes, patch_size: size, per_class_count: per_class, seed };
    generate_synthetic(&spec, &out_dir).map_err(py_err)?;
    Ok(out_dir.join("manifest.tsv").display().to_string())
}

/// Trains on a manifest and returns the checkpoint path. `config` is a TOML
/// string; without it, defaults sized to the manifest are used.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config=None, iterations=None, seed=None, resume=false))]
fn train(
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    iterations: Option<u64>,
    seed: Option<u64>,
    resume: bool,
) -> PyResult<String> {
    let m = load_manifest(&manifest).map_err(py_err)?;
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_toml_str(text).map_err(py_err)?,
        None => vstain::cli::config_for_manifest(&m),
    };
    if let Some(v) = iterations {
        cfg.optimizer.total_iterations = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    let opts = TrainOptions { resume, ..TrainOptions::default() };
    let outcome = run_training(&cfg, &m, &out_dir, &opts).map_err(py_err)?;
    Ok(outcome.checkpoint.display().to_string())
}

/// Translates an image with a checkpoint. Without `tissue_class` every tile's
/// class is predicted by the source-domain classifier.
#[pyfunction]
#[pyo3(signature = (checkpoint, image, direction=None, tissue_class=None, tile=None, overlap=None))]
fn translate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    image: PyReadonlyArray3<'py, f32>,
    direction: Option<&str>,
    tissue_class: Option<&str>,
    tile: Option<usize>,
    overlap: Option<usize>,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let img = to_image(&image)?;
    let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
    let direction = parse::<Direction>(direction)?.unwrap_or(ck.config.default_direction);
    let class_map = match parse::<TissueClass>(tissue_class)? {
        Some(c) => ClassMap::Single(c),
        None => ClassMap::PerTilePredicted,
    };
    let tile = tile.unwrap_or(ck.config.patch_size);
    let tiling = Tiling { tile, overlap: overlap.unwrap_or(tile / 4) };
    let out = py
        .allow_threads(|| translate_tiled(&ck.bundle, &img, direction, tiling, class_map))
        .map_err(py_err)?;
    Ok(from_image(&out).into_pyarray(py))
}

/// Evaluates a checkpoint and returns the rendered report table.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, n_per_class=vstain::eval::DEFAULT_PER_CLASS, direction=None, seed=0, format="tsv"))]
fn evaluate(
    checkpoint: PathBuf,
    manifest: PathBuf,
    n_per_class: usize,
    direction: Option<&str>,
    seed: u64,
    format: &str,
) -> PyResult<String> {
    let ck = load_checkpoint(&checkpoint).map_err(py_err)?;
    let m = load_manifest(&manifest).map_err(py_err)?;
    let direction = parse::<Direction>(direction)?.unwrap_or(ck.config.default_direction);
    let fmt: ReportFormat = format.parse().map_err(py_err)?;
    let report = run_evaluate(&ck.bundle, &m, direction, n_per_class, seed).map_err(py_err)?;
    Ok(render_report(&report, fmt))
}

/// Checks every loss gradient against central differences. Returns
/// `(passed, report_text)`.
#[pyfunction]
#[pyo3(signature = (seed=0, size=8))]
fn gradcheck(seed: u64, size: usize) -> PyResult<(bool, String)> {
    let report = run_gradcheck(&GradcheckOptions { seed, size, ..GradcheckOptions::default() }).map_err(py_err)?;
    Ok((report.passed(), report.render()))
}

/// Mean SSIM of two images with the default 11×11 Gaussian window.
#[pyfunction]
#[pyo3(signature = (a, b, mode="standard_product"))]
fn ssim(a: PyReadonlyArray3<'_, f32>, b: PyReadonlyArray3<'_, f32>, mode: &str) -> PyResult<f64> {
    let (a, b) = (to_image(&a)?, to_image(&b)?);
    if (a.height, a.width) != (b.height, b.width) {
        return Err(PyValueError::new_err("images differ in size"));
    }
    let mode = match mode {
        "standard_product" => SsimMode::StandardProduct,
        "paper_sum" => SsimMode::PaperSum,
        _ => return Err(PyValueError::new_err(format!("unknown SSIM mode {mode:?}"))),
    };
    let shape = BatchShape::new(1, 3, a.height, a.width);
    ssim_mean(&planar(&a), &planar(&b), shape, &SsimParams::default(), mode).map_err(py_err)
}

/// Matting Laplacian of a guide image as COO triplets `(rows, cols, values)`
/// over row-major pixel indices.
#[pyfunction]
#[pyo3(signature = (guide, radius=1, eps=1e-7))]
#[allow(clippy::type_complexity)]
fn matting_laplacian<'py>(
    py: Python<'py>,
    guide: PyReadonlyArray3<'py, f32>,
    radius: usize,
    eps: f64,
) -> PyResult<(Bound<'py, PyArray1<usize>>, Bound<'py, PyArray1<usize>>, Bound<'py, PyArray1<f64>>)> {
    let img = to_image(&guide)?;
    let m = build_matting_laplacian(&planar(&img), img.height, img.width, radius, eps).map_err(py_err)?;
    let (mut rows, mut cols, mut vals) = (Vec::new(), Vec::new(), Vec::new());
    for (i, j, v) in m.triplets() {
        rows.push(i);
        cols.push(j);
        vals.push(v);
    }
    Ok((rows.into_pyarray(py), cols.into_pyarray(py), vals.into_pyarray(py)))
}

#[pymodule]
fn vstain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(matting_laplacian, m)?)?;
    Ok(())
}

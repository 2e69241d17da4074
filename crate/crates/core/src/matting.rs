//! Closed-form matting Laplacian and the photorealism penalty built on it.
//!
//! For every `(2r+1)²` window `w_k` with colour mean `μ_k` and covariance
//! `Σ_k`, pixels `i, j ∈ w_k` receive
//!
//! ```text
//! δ_ij − (1 + (I_i − μ_k)ᵀ (Σ_k + ε/|w_k| · I₃)⁻¹ (I_j − μ_k)) / |w_k|
//! ```
//!
//! summed over all windows containing both. The resulting matrix is
//! symmetric PSD, its rows sum to zero, and locally affine functions of the
//! guide colours lie (up to `ε`) in its null space.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sprs::CsMat;

use crate::domain::{Image, MattingConfig, PhoMode, PhoReduction};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MattingLaplacian {
    pub height: usize,
    pub width: usize,
    pub eps: f64,
    pub window_radius: usize,
    pub matrix: CsMat<f64>,
}

impl MattingLaplacian {
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j).copied().unwrap_or(0.0)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (row, vec) in self.matrix.outer_iterator().enumerate() {
            out[row] = vec.iter().map(|(col, &m)| m * v[col]).sum();
        }
        out
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut total = 0.0;
        for (row, vec) in self.matrix.outer_iterator().enumerate() {
            let mv: f64 = vec.iter().map(|(col, &m)| m * v[col]).sum();
            total += v[row] * mv;
        }
        total
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.matrix
            .outer_iterator()
            .enumerate()
            .flat_map(|(row, vec)| vec.iter().map(move |(col, &v)| (row, col, v)).collect::<Vec<_>>())
    }
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    let inv_det = 1.0 / det;
    [
        [
            c00 * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            c01 * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            c02 * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ]
}

/// Builds the Laplacian of a channel-planar `3×h×w` guide with values in
/// `[0, 1]`.
pub fn build_matting_laplacian(
    guide: &[f64],
    height: usize,
    width: usize,
    window_radius: usize,
    eps: f64,
) -> Result<MattingLaplacian> {
    let side = 2 * window_radius + 1;
    if window_radius == 0 || height < side || width < side {
        return Err(Error::shape(format!(
            "{height}x{width} image is smaller than a {side}x{side} matting window"
        )));
    }
    if guide.len() != 3 * height * width {
        return Err(Error::shape(format!(
            "guide of {} values does not hold 3x{height}x{width}",
            guide.len()
        )));
    }
    if let Some(v) = guide.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matting guide pixel ({v})")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("matting eps must be positive"));
    }

    let n_pix = height * width;
    let r = window_radius as isize;
    // Pixels co-occur in a window iff both offsets are within 2r.
    let reach = 2 * r;
    let stencil = (2 * reach + 1) as usize;
    let slot = |dy: isize, dx: isize| ((dy + reach) as usize) * stencil + (dx + reach) as usize;
    let mut acc = vec![0.0f64; n_pix * stencil * stencil];
    let mut touched = vec![false; n_pix * stencil * stencil];

    let win_n = side * side;
    let inv_n = 1.0 / win_n as f64;
    let plane = n_pix;
    let mut idx = vec![0usize; win_n];
    let mut cols = vec![[0.0f64; 3]; win_n];
    let mut centered = vec![[0.0f64; 3]; win_n];

    for cy in window_radius..height - window_radius {
        for cx in window_radius..width - window_radius {
            let mut t = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let p = (cy as isize + dy) as usize * width + (cx as isize + dx) as usize;
                    idx[t] = p;
                    cols[t] = [guide[p], guide[plane + p], guide[2 * plane + p]];
                    t += 1;
                }
            }
            let mut mu = [0.0; 3];
            for c in &cols {
                for k in 0..3 {
                    mu[k] += c[k];
                }
            }
            mu.iter_mut().for_each(|m| *m *= inv_n);
            let mut cov = [[0.0; 3]; 3];
            for (c, d) in cols.iter().zip(centered.iter_mut()) {
                for k in 0..3 {
                    d[k] = c[k] - mu[k];
                }
                for a in 0..3 {
                    for b in 0..3 {
                        cov[a][b] += d[a] * d[b];
                    }
                }
            }
            for (a, row) in cov.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v *= inv_n;
                }
                row[a] += eps * inv_n;
            }
            let s = invert3(cov);

            for a in 0..win_n {
                let da = centered[a];
                let sa = [
                    s[0][0] * da[0] + s[0][1] * da[1] + s[0][2] * da[2],
                    s[1][0] * da[0] + s[1][1] * da[1] + s[1][2] * da[2],
                    s[2][0] * da[0] + s[2][1] * da[1] + s[2][2] * da[2],
                ];
                for b in a..win_n {
                    let db = centered[b];
                    let q = sa[0] * db[0] + sa[1] * db[1] + sa[2] * db[2];
                    let delta = if a == b { 1.0 } else { 0.0 };
                    let v = delta - inv_n * (1.0 + q);
                    let (pa, pb) = (idx[a], idx[b]);
                    let dy = (pb / width) as isize - (pa / width) as isize;
                    let dx = (pb % width) as isize - (pa % width) as isize;
                    let s_ab = pa * stencil * stencil + slot(dy, dx);
                    acc[s_ab] += v;
                    touched[s_ab] = true;
                    if a != b {
                        let s_ba = pb * stencil * stencil + slot(-dy, -dx);
                        acc[s_ba] += v;
                        touched[s_ba] = true;
                    }
                }
            }
        }
    }

    let mut indptr = Vec::with_capacity(n_pix + 1);
    let mut indices = Vec::new();
    let mut data = Vec::new();
    indptr.push(0);
    let mut row_entries: Vec<(usize, f64)> = Vec::with_capacity(stencil * stencil);
    for p in 0..n_pix {
        let (py, px) = ((p / width) as isize, (p % width) as isize);
        row_entries.clear();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let s_i = p * stencil * stencil + slot(dy, dx);
                if !touched[s_i] {
                    continue;
                }
                let q = ((py + dy) as usize) * width + (px + dx) as usize;
                row_entries.push((q, acc[s_i]));
            }
        }
        row_entries.sort_by_key(|e| e.0);
        for &(q, v) in &row_entries {
            indices.push(q);
            data.push(v);
        }
        indptr.push(indices.len());
    }
    let matrix = CsMat::new((n_pix, n_pix), indptr, indices, data);
    Ok(MattingLaplacian {
        height,
        width,
        eps,
        window_radius,
        matrix,
    })
}

/// `Σ_k vec(img_k)ᵀ M vec(img_k)` over the three planes of `img`.
pub fn photorealism_penalty(m: &MattingLaplacian, img: &[f64]) -> Result<f64> {
    let n = m.dim();
    if img.len() != 3 * n {
        return Err(Error::shape(format!(
            "penalty image of {} values does not match a {}x{} Laplacian",
            img.len(),
            m.height,
            m.width
        )));
    }
    Ok(img.chunks_exact(n).map(|plane| m.quadratic_form(plane)).sum())
}

/// Penalty value and its gradient `2·M·vec(img_k)` per plane.
pub fn photorealism_penalty_grad(m: &MattingLaplacian, img: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = m.dim();
    if img.len() != 3 * n {
        return Err(Error::shape("penalty image does not match the Laplacian"));
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(img.len());
    for plane in img.chunks_exact(n) {
        let mv = m.mul_vec(plane);
        value += plane.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>();
        grad.extend(mv.iter().map(|v| 2.0 * v));
    }
    Ok((value, grad))
}

/// Bilinear resampling (half-pixel centres) between square or rectangular
/// planes, with its exact adjoint for backpropagation.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    taps: Vec<[(usize, f64); 4]>,
}

impl Resampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        let axis = |s: usize, d: usize, i: usize| -> (usize, usize, f64) {
            let scale = s as f64 / d as f64;
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(s - 1);
            let i1 = (i0 + 1).min(s - 1);
            let f = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, f)
        };
        let mut taps = Vec::with_capacity(dst.0 * dst.1);
        for r in 0..dst.0 {
            let (r0, r1, fr) = axis(src.0, dst.0, r);
            for c in 0..dst.1 {
                let (c0, c1, fc) = axis(src.1, dst.1, c);
                taps.push([
                    (r0 * src.1 + c0, (1.0 - fr) * (1.0 - fc)),
                    (r0 * src.1 + c1, (1.0 - fr) * fc),
                    (r1 * src.1 + c0, fr * (1.0 - fc)),
                    (r1 * src.1 + c1, fr * fc),
                ]);
            }
        }
        Resampler { src, dst, taps }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn apply(&self, plane: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return plane.to_vec();
        }
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * plane[i]).sum())
            .collect()
    }

    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return grad.to_vec();
        }
        let mut out = vec![0.0; self.src.0 * self.src.1];
        for (t, g) in self.taps.iter().zip(grad) {
            for &(i, w) in t {
                out[i] += w * g;
            }
        }
        out
    }
}

/// Resamples a `[-1, 1]` planar image to the working resolution and maps it
/// to `[0, 1]`.
fn to_working(img: &[f64], r: &Resampler) -> Vec<f64> {
    let n = r.src.0 * r.src.1;
    img.chunks_exact(n)
        .flat_map(|plane| r.apply(plane).into_iter().map(|v| 0.5 * (v + 1.0)))
        .collect()
}

/// Builds the Laplacian for a `[-1, 1]` patch at the configured working
/// resolution.
pub fn laplacian_for_image(img: &Image, cfg: &MattingConfig) -> Result<MattingLaplacian> {
    let data: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    laplacian_for_planes(&data, img.height, img.width, cfg)
}

fn laplacian_for_planes(data: &[f64], h: usize, w: usize, cfg: &MattingConfig) -> Result<MattingLaplacian> {
    let r = Resampler::new((h, w), (cfg.resolution, cfg.resolution));
    let guide: Vec<f64> = to_working(data, &r).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    build_matting_laplacian(&guide, cfg.resolution, cfg.resolution, cfg.window_radius, cfg.eps)
}

/// `Pho(generated, real)` for one sample and its gradient with respect to the
/// generated image (both `3×h×w` in `[-1, 1]`). `real_lap` must be the real
/// image's Laplacian at the working resolution. The Laplacian of the
/// generated image is rebuilt from its current value and held constant.
pub fn pho_pair_grad(
    generated: &[f64],
    real: &[f64],
    h: usize,
    w: usize,
    real_lap: &MattingLaplacian,
    cfg: &MattingConfig,
) -> Result<(f64, Vec<f64>)> {
    if generated.len() != 3 * h * w || real.len() != 3 * h * w {
        return Err(Error::shape("photorealism pair does not match its shape"));
    }
    let res = cfg.resolution;
    if real_lap.height != res || real_lap.width != res {
        return Err(Error::shape(format!(
            "cached Laplacian is {}x{}, working resolution is {res}",
            real_lap.height, real_lap.width
        )));
    }
    let rs = Resampler::new((h, w), (res, res));
    let gen_w = to_working(generated, &rs);
    let (mut value, g_work) = photorealism_penalty_grad(real_lap, &gen_w)?;
    if cfg.mode == PhoMode::Symmetric {
        let gen_guide: Vec<f64> = gen_w.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let gen_lap = build_matting_laplacian(&gen_guide, res, res, cfg.window_radius, cfg.eps)?;
        value += photorealism_penalty(&gen_lap, &to_working(real, &rs))?;
    }
    let grad = g_work
        .chunks_exact(res * res)
        .flat_map(|g| rs.adjoint(g).into_iter().map(|v| 0.5 * v))
        .collect();
    Ok((value, grad))
}

/// Batch photorealism loss `mean_n Pho(G_enc(x)_n, x_n) + mean_n Pho(G_dec(y)_n, y_n)`,
/// each per-sample penalty scaled according to `cfg.reduction`. Gradients are with respect to `g_enc_x` and `g_dec_y`.
#[allow(clippy::too_many_arguments)]
pub fn photorealism_loss_grad(
    x: &[f64],
    g_enc_x: &[f64],
    lap_x: &[Arc<MattingLaplacian>],
    y: &[f64],
    g_dec_y: &[f64],
    lap_y: &[Arc<MattingLaplacian>],
    h: usize,
    w: usize,
    cfg: &MattingConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let side = |imgs: &[f64], gen: &[f64], laps: &[Arc<MattingLaplacian>]| -> Result<(f64, Vec<f64>)> {
        let per = 3 * h * w;
        if imgs.len() != gen.len() || imgs.len() != laps.len() * per || laps.is_empty() {
            return Err(Error::shape("photorealism batch does not match its Laplacians"));
        }
        let scale = match cfg.reduction {
            PhoReduction::Mean => (3 * cfg.resolution * cfg.resolution) as f64,
            PhoReduction::Sum => 1.0,
        };
        let n = laps.len() as f64 * scale;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(gen.len());
        for ((g, r), lap) in gen.chunks_exact(per).zip(imgs.chunks_exact(per)).zip(laps) {
            let (v, gr) = pho_pair_grad(g, r, h, w, lap, cfg)?;
            total += v;
            grad.extend(gr.into_iter().map(|v| v / n));
        }
        Ok((total / n, grad))
    };
    let (a, ga) = side(x, g_enc_x, lap_x)?;
    let (b, gb) = side(y, g_dec_y, lap_y)?;
    Ok((a + b, ga, gb))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub source_id: String,
    pub resolution: usize,
    pub eps_bits: u64,
    pub radius: usize,
}

impl CacheKey {
    pub fn new(source_id: &str, cfg: &MattingConfig) -> Self {
        CacheKey {
            source_id: source_id.to_string(),
            resolution: cfg.resolution,
            eps_bits: cfg.eps.to_bits(),
            radius: cfg.window_radius,
        }
    }

    fn file_name(&self) -> String {
        // FNV-1a over the rendered key keeps names stable across platforms.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.render().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}.lap")
    }

    fn render(&self) -> String {
        format!(
            "{}\t{}\t{:016x}\t{}",
            self.source_id, self.resolution, self.eps_bits, self.radius
        )
    }
}

/// Laplacians of real patches keyed by `(source_id, resolution, eps, radius)`,
/// held in memory and optionally persisted to a directory.
///
/// Directory layout: `index.tsv` with one line per key
/// (`source_id<TAB>resolution<TAB>eps-bits-hex<TAB>radius<TAB>file`) and one
/// binary file per key holding `rows: u64, cols: u64, nnz: u64` followed by
/// `nnz` triplets `(row: u64, col: u64, value: f64)`, all little-endian.
#[derive(Debug)]
pub struct LaplacianCache {
    cfg: MattingConfig,
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<CacheKey, Arc<MattingLaplacian>>>,
    index_lock: Mutex<()>,
}

impl LaplacianCache {
    pub fn in_memory(cfg: MattingConfig) -> Self {
        LaplacianCache {
            cfg,
            dir: None,
            memory: RwLock::new(HashMap::new()),
            index_lock: Mutex::new(()),
        }
    }

    pub fn with_dir(cfg: MattingConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let cache = LaplacianCache {
            cfg,
            dir: Some(dir),
            memory: RwLock::new(HashMap::new()),
            index_lock: Mutex::new(()),
        };
        Ok(cache)
    }

    pub fn config(&self) -> &MattingConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Looks a Laplacian up in memory, then on disk. Never builds.
    pub fn lookup(&self, source_id: &str) -> Result<Option<Arc<MattingLaplacian>>> {
        let key = CacheKey::new(source_id, &self.cfg);
        if let Some(l) = self.memory.read().unwrap().get(&key) {
            return Ok(Some(l.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = dir.join(key.file_name());
        if !path.exists() {
            return Ok(None);
        }
        let lap = Arc::new(read_laplacian(&path, self.cfg.resolution, self.cfg.resolution, &self.cfg)?);
        self.memory.write().unwrap().insert(key, lap.clone());
        Ok(Some(lap))
    }

    /// Returns the cached Laplacian for `source_id`, building it from `img`
    /// when missing and `build_on_miss` is set.
    pub fn get_or_build(&self, source_id: &str, img: &Image) -> Result<Arc<MattingLaplacian>> {
        if let Some(l) = self.lookup(source_id)? {
            return Ok(l);
        }
        if !self.cfg.build_on_miss {
            return Err(Error::CacheMiss(source_id.to_string()));
        }
        self.insert(source_id, img)
    }

    /// Builds and stores the Laplacian for `img` unconditionally.
    pub fn insert(&self, source_id: &str, img: &Image) -> Result<Arc<MattingLaplacian>> {
        let key = CacheKey::new(source_id, &self.cfg);
        let lap = Arc::new(laplacian_for_image(img, &self.cfg)?);
        if let Some(dir) = &self.dir {
            let _guard = self.index_lock.lock().unwrap();
            let file = key.file_name();
            write_laplacian(&dir.join(&file), &lap)?;
            let mut index = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("index.tsv"))?;
            writeln!(index, "{}\t{file}", key.render())?;
        }
        self.memory.write().unwrap().insert(key, lap.clone());
        Ok(lap)
    }

    /// Entries listed in the on-disk index as `(source_id, file)` pairs.
    pub fn index_entries(&self) -> Result<Vec<(String, String)>> {
        let Some(dir) = &self.dir else {
            return Ok(Vec::new());
        };
        let path = dir.join("index.tsv");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() == 5 {
                out.push((fields[0].to_string(), fields[4].to_string()));
            }
        }
        Ok(out)
    }
}

/// Writes a Laplacian in the cache's binary triplet format (temp file then
/// rename).
pub fn write_laplacian(path: &Path, lap: &MattingLaplacian) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        let n = lap.dim() as u64;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&(lap.nnz() as u64).to_le_bytes())?;
        for (r, c, v) in lap.triplets() {
            w.write_all(&(r as u64).to_le_bytes())?;
            w.write_all(&(c as u64).to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_laplacian(path: &Path, height: usize, width: usize, cfg: &MattingConfig) -> Result<MattingLaplacian> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Checkpoint(format!("corrupt Laplacian file {}", path.display()));
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .map(|s| s.try_into().unwrap())
            .ok_or_else(bad)
    };
    let rows = u64::from_le_bytes(word(0)?) as usize;
    let cols = u64::from_le_bytes(word(1)?) as usize;
    let nnz = u64::from_le_bytes(word(2)?) as usize;
    if rows != height * width || cols != rows || bytes.len() != 24 + nnz * 24 {
        return Err(bad());
    }
    let mut indptr = vec![0usize; rows + 1];
    let mut indices = Vec::with_capacity(nnz);
    let mut data = Vec::with_capacity(nnz);
    let mut last_row = 0usize;
    for e in 0..nnz {
        let base = 3 + 3 * e;
        let r = u64::from_le_bytes(word(base)?) as usize;
        let c = u64::from_le_bytes(word(base + 1)?) as usize;
        let v = f64::from_le_bytes(word(base + 2)?);
        if r < last_row || r >= rows || c >= cols {
            return Err(bad());
        }
        last_row = r;
        indptr[r + 1] += 1;
        indices.push(c);
        data.push(v);
    }
    for i in 0..rows {
        indptr[i + 1] += indptr[i];
    }
    let matrix = CsMat::try_new((rows, cols), indptr, indices, data).map_err(|_| bad())?;
    Ok(MattingLaplacian {
        height,
        width,
        eps: cfg.eps,
        window_radius: cfg.window_radius,
        matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_guide(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn constant_image_annihilates_constants() {
        let guide = vec![0.4; 27];
        let m = build_matting_laplacian(&guide, 3, 3, 1, 1e-7).unwrap();
        let ones = vec![1.0; 9];
        assert!(m.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        assert!(m.mul_vec(&guide[..9]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_small_and_non_finite_images() {
        assert!(matches!(build_matting_laplacian(&[0.0; 12], 2, 2, 1, 1e-7), Err(Error::Shape(_))));
        let mut g = vec![0.5; 27];
        g[4] = f64::NAN;
        assert!(matches!(build_matting_laplacian(&g, 3, 3, 1, 1e-7), Err(Error::NonFinite(_))));
    }

    #[test]
    fn symmetric_with_zero_row_sums() {
        let g = random_guide(6, 7, 3);
        let m = build_matting_laplacian(&g, 6, 7, 1, 1e-7).unwrap();
        for (i, j, v) in m.triplets() {
            assert_eq!(v, m.entry(j, i));
        }
        for (row, vec) in m.matrix.outer_iterator().enumerate() {
            let s: f64 = vec.iter().map(|(_, v)| v).sum();
            assert!(s.abs() < 1e-8, "row {row} sums to {s}");
        }
    }

    #[test]
    fn penalty_examples_and_scaling() {
        let g = random_guide(5, 5, 9);
        let m = build_matting_laplacian(&g, 5, 5, 1, 1e-7).unwrap();
        assert_eq!(photorealism_penalty(&m, &vec![0.0; 75]).unwrap(), 0.0);
        let constant: Vec<f64> = (0..75).map(|i| [0.2, -0.7, 0.9][i / 25]).collect();
        assert!(photorealism_penalty(&m, &constant).unwrap().abs() < 1e-8);
        let img = random_guide(5, 5, 10);
        let base = photorealism_penalty(&m, &img).unwrap();
        assert!(base >= -1e-8);
        let scaled: Vec<f64> = img.iter().map(|v| 3.0 * v).collect();
        let s = photorealism_penalty(&m, &scaled).unwrap();
        assert!((s - 9.0 * base).abs() <= 1e-9 * s.abs());
        assert!(photorealism_penalty(&m, &img[..74]).is_err());
    }

    #[test]
    fn resampler_adjoint_is_transpose() {
        let r = Resampler::new((12, 12), (5, 5));
        let u = random_guide(4, 12, 1)[..144].to_vec();
        let v = random_guide(5, 5, 2)[..25].to_vec();
        let lhs: f64 = r.apply(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(r.adjoint(&v)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let id = Resampler::new((4, 4), (4, 4));
        assert_eq!(id.apply(&u[..16]), u[..16].to_vec());
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MattingConfig {
            resolution: 6,
            ..MattingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Image::new(6, 6, (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let built = {
            let cache = LaplacianCache::with_dir(cfg.clone(), dir.path()).unwrap();
            cache.get_or_build("patch-a", &img).unwrap()
        };
        let strict = MattingConfig {
            build_on_miss: false,
            ..cfg.clone()
        };
        let cache = LaplacianCache::with_dir(strict, dir.path()).unwrap();
        let loaded = cache.get_or_build("patch-a", &img).unwrap();
        assert_eq!(loaded.matrix, built.matrix);
        assert_eq!(cache.index_entries().unwrap().len(), 1);
        match cache.get_or_build("patch-b", &img) {
            Err(Error::CacheMiss(id)) => assert_eq!(id, "patch-b"),
            other => panic!("expected a cache miss, got {other:?}"),
        }
    }

    #[test]
    fn generated_equal_to_constant_real_gives_zero() {
        let cfg = MattingConfig {
            resolution: 8,
            ..MattingConfig::default()
        };
        let real = Image::filled(8, 8, [0.1, -0.2, 0.5]);
        let lap = laplacian_for_image(&real, &cfg).unwrap();
        let data: Vec<f64> = real.data.iter().map(|&v| v as f64).collect();
        let (v, _) = pho_pair_grad(&data, &data, 8, 8, &lap, &cfg).unwrap();
        assert!(v.abs() < 1e-8, "{v}");
    }
}

//! Shared vocabulary: tissue classes, stain domains, patches and the
//! experiment configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tissue category used as the translation condition.
///
/// The integer index is part of the on-disk contract (one-hot channel order,
/// checkpoint class counts) and must never be reordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TissueClass {
    /// Hepatocyte
    H,
    /// Fibrosis
    F,
    /// Necrosis
    N,
    /// Tumour and fibrosis
    TF,
    /// Hepatocyte and fibrosis
    HF,
    /// Hepatocyte and blood
    HB,
    /// Tumour and necrosis
    TN,
    /// Background
    BG,
}

impl TissueClass {
    pub const COUNT: usize = 8;

    pub const ALL: [TissueClass; 8] = [
        TissueClass::H,
        TissueClass::F,
        TissueClass::N,
        TissueClass::TF,
        TissueClass::HF,
        TissueClass::HB,
        TissueClass::TN,
        TissueClass::BG,
    ];

    /// Column order used by evaluation reports.
    pub const REPORT_ORDER: [TissueClass; 8] = [
        TissueClass::H,
        TissueClass::TF,
        TissueClass::N,
        TissueClass::F,
        TissueClass::HF,
        TissueClass::TN,
        TissueClass::HB,
        TissueClass::BG,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<TissueClass> {
        Self::ALL.get(index).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            TissueClass::H => "H",
            TissueClass::F => "F",
            TissueClass::N => "N",
            TissueClass::TF => "TF",
            TissueClass::HF => "HF",
            TissueClass::HB => "HB",
            TissueClass::TN => "TN",
            TissueClass::BG => "BG",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TissueClass::H => "hepatocyte",
            TissueClass::F => "fibrosis",
            TissueClass::N => "necrosis",
            TissueClass::TF => "tumour & fibrosis",
            TissueClass::HF => "hepatocyte & fibrosis",
            TissueClass::HB => "hepatocyte & blood",
            TissueClass::TN => "tumour & necrosis",
            TissueClass::BG => "background",
        }
    }

    /// The first `n` classes by index; models with fewer than eight classes
    /// use this prefix.
    pub fn first(n: usize) -> &'static [TissueClass] {
        &Self::ALL[..n.min(Self::COUNT)]
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TissueClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.token() == s)
            .ok_or_else(|| Error::UnknownClass {
                token: s.to_string(),
                line: None,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StainDomain {
    X,
    Y,
}

impl StainDomain {
    pub fn token(self) -> &'static str {
        match self {
            StainDomain::X => "X",
            StainDomain::Y => "Y",
        }
    }

    pub fn other(self) -> StainDomain {
        match self {
            StainDomain::X => StainDomain::Y,
            StainDomain::Y => StainDomain::X,
        }
    }
}

impl fmt::Display for StainDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for StainDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" => Ok(StainDomain::X),
            "Y" => Ok(StainDomain::Y),
            _ => Err(Error::invalid(format!("unknown stain domain {s:?}"))),
        }
    }
}

/// Translation direction between the two stain domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    XToY,
    YToX,
}

impl Direction {
    pub fn source(self) -> StainDomain {
        match self {
            Direction::XToY => StainDomain::X,
            Direction::YToX => StainDomain::Y,
        }
    }

    pub fn target(self) -> StainDomain {
        self.source().other()
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::XToY => Direction::YToX,
            Direction::YToX => Direction::XToY,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_to_y" | "X_to_Y" | "x2y" => Ok(Direction::XToY),
            "y_to_x" | "Y_to_X" | "y2x" => Ok(Direction::YToX),
            _ => Err(Error::invalid(format!("unknown direction {s:?}"))),
        }
    }
}

/// A three-channel image stored channel-planar (`[c][row][col]`) with values
/// normally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image buffer of {} values does not hold 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(plane));
        }
        Image { height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Copy of the `h`×`w` window with top-left corner at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for r in row..row + h {
                let start = (c * self.height + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }
}

/// One training or evaluation patch with its domain and class condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub pixels: Image,
    pub domain: StainDomain,
    pub tissue_class: TissueClass,
    pub source_id: String,
}

impl LabeledPatch {
    pub fn size(&self) -> usize {
        self.pixels.height
    }
}

/// Maps 8-bit interleaved pixels (`[row][col][channel]`) to a planar image in
/// `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_image(raw: &[u8], height: usize, width: usize, channels: usize) -> Result<Image> {
    if channels != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {channels}")));
    }
    if raw.len() != height * width * channels {
        return Err(Error::shape(format!(
            "raw buffer of {} bytes does not hold {height}x{width}x3",
            raw.len()
        )));
    }
    let plane = height * width;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Image { height, width, data })
}

/// Inverse of [`normalize_image`], rounding to the nearest 8-bit value and
/// clamping anything outside `[-1, 1]`.
pub fn denormalize_image(img: &Image) -> Vec<u8> {
    let plane = img.height * img.width;
    let mut raw = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = (img.data[c * plane + p] + 1.0) * 127.5;
            raw[3 * p + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    raw
}

/// Spatially broadcast one-hot condition map, channel-planar `C×H×W`.
pub fn one_hot_condition(
    class: TissueClass,
    num_classes: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f32>> {
    if class.index() >= num_classes {
        return Err(Error::invalid(format!(
            "class {class} (index {}) outside a {num_classes}-class model",
            class.index()
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("condition map needs a positive size"));
    }
    let plane = height * width;
    let mut map = vec![0f32; num_classes * plane];
    map[class.index() * plane..(class.index() + 1) * plane].fill(1.0);
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub delta_id: f64,
    pub gamma_cls: f64,
    pub alpha_ssim: f64,
    pub beta_pho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            delta_id: 5.0,
            gamma_cls: 0.5,
            alpha_ssim: 0.5,
            beta_pho: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_cyc", self.lambda_cyc),
            ("delta_id", self.delta_id),
            ("gamma_cls", self.gamma_cls),
            ("alpha_ssim", self.alpha_ssim),
            ("beta_pho", self.beta_pho),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss_weights.{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    LeastSquares,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimMode {
    /// Luminance term times contrast-structure term, in `[-1, 1]`.
    StandardProduct,
    /// Luminance term plus contrast-structure term, in `[-2, 2]`.
    PaperSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityMode {
    /// `|G_enc(y) - y| + |G_dec(x) - x|`
    SameDomain,
    /// `|G_enc(y) - x| + |G_dec(y) - y|`
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClcycMode {
    /// Compare classifier outputs along the translation cycle.
    TranslatedPair,
    /// Compare classifier outputs on the unpaired same-class real samples.
    UnpairedSameClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhoMode {
    /// Both quadratic forms (generated under real's Laplacian and real under
    /// generated's Laplacian).
    Symmetric,
    /// Only the generated image under the real image's Laplacian.
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhoReduction {
    /// Per-sample penalty divided by the number of working-resolution values
    /// (`3·resolution²`), matching the per-element mean of the L1 terms.
    Mean,
    /// Raw quadratic-form sum.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    InputConcatOnehot,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassBalance {
    UniformClass,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_iterations: u64,
    /// Iteration at which linear decay to zero starts; half of
    /// `total_iterations` when unset.
    pub decay_start: Option<u64>,
    pub batch_size: usize,
    pub checkpoint_every: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            total_iterations: 500,
            decay_start: None,
            batch_size: 1,
            checkpoint_every: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn decay_start(&self) -> u64 {
        self.decay_start.unwrap_or(self.total_iterations / 2)
    }

    /// Constant rate until `decay_start`, then linear decay reaching zero at
    /// `total_iterations`.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let start = self.decay_start();
        if iteration < start || self.total_iterations <= start {
            return self.learning_rate;
        }
        let span = (self.total_iterations - start) as f64;
        let done = (iteration - start) as f64;
        self.learning_rate * (1.0 - done / span).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: WindowKind,
    pub k: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: WindowKind::Gaussian,
            k: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            // Pixels live in [-1, 1].
            dynamic_range: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MattingConfig {
    pub window_radius: usize,
    pub eps: f64,
    /// Side length both real and generated patches are resampled to before
    /// the Laplacian is built or applied.
    pub resolution: usize,
    pub mode: PhoMode,
    pub reduction: PhoReduction,
    /// Build Laplacians for patches missing from the cache instead of failing.
    pub build_on_miss: bool,
}

impl Default for MattingConfig {
    fn default() -> Self {
        MattingConfig {
            window_radius: 1,
            eps: 1e-7,
            resolution: 64,
            mode: PhoMode::Symmetric,
            reduction: PhoReduction::Mean,
            build_on_miss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub generator_conditioning: Conditioning,
    pub discriminator_conditioning: Conditioning,
    pub gen_filters: usize,
    pub disc_filters: usize,
    pub resnet_blocks: usize,
    pub init_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            generator_conditioning: Conditioning::InputConcatOnehot,
            discriminator_conditioning: Conditioning::InputConcatOnehot,
            gen_filters: 64,
            disc_filters: 64,
            resnet_blocks: 9,
            init_std: 0.02,
        }
    }
}

/// Smallest patch the five-layer discriminator accepts.
pub const MIN_PATCH_SIZE: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub patch_size: usize,
    pub num_classes: usize,
    pub x_name: String,
    pub y_name: String,
    pub default_direction: Direction,
    pub adversarial_mode: AdversarialMode,
    pub ssim_mode: SsimMode,
    pub identity_mode: IdentityMode,
    pub clcyc_mode: ClcycMode,
    pub class_balance: ClassBalance,
    pub pool_capacity_per_class: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub ssim: SsimConfig,
    pub matting: MattingConfig,
    pub networks: NetworkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            patch_size: 256,
            num_classes: TissueClass::COUNT,
            x_name: "H&E".to_string(),
            y_name: "IHC".to_string(),
            default_direction: Direction::XToY,
            adversarial_mode: AdversarialMode::LeastSquares,
            ssim_mode: SsimMode::StandardProduct,
            identity_mode: IdentityMode::SameDomain,
            clcyc_mode: ClcycMode::TranslatedPair,
            class_balance: ClassBalance::UniformClass,
            pool_capacity_per_class: 50,
            seed: 0,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            ssim: SsimConfig::default(),
            matting: MattingConfig::default(),
            networks: NetworkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < MIN_PATCH_SIZE || self.patch_size % 4 != 0 {
            return Err(Error::Config(format!(
                "patch_size must be a multiple of 4 and at least {MIN_PATCH_SIZE}, got {}",
                self.patch_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > TissueClass::COUNT {
            return Err(Error::Config(format!(
                "num_classes must be in 1..=8, got {}",
                self.num_classes
            )));
        }
        self.loss_weights.validate()?;
        if self.pool_capacity_per_class == 0 {
            return Err(Error::Config("pool_capacity_per_class must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
            return Err(Error::Config("optimizer.learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be positive".into()));
        }
        let s = &self.ssim;
        if s.k < 3 || s.k % 2 == 0 {
            return Err(Error::Config(format!("ssim.k must be odd and >= 3, got {}", s.k)));
        }
        if !(s.k1 > 0.0 && s.k2 > 0.0 && s.dynamic_range > 0.0 && s.sigma > 0.0) {
            return Err(Error::Config("ssim constants must be positive".into()));
        }
        let m = &self.matting;
        if m.window_radius == 0 || !(m.eps > 0.0) || m.resolution < 2 * m.window_radius + 1 {
            return Err(Error::Config("invalid matting parameters".into()));
        }
        let n = &self.networks;
        if n.gen_filters == 0 || n.disc_filters == 0 {
            return Err(Error::Config("network filter counts must be positive".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> &'static [TissueClass] {
        TissueClass::first(self.num_classes)
    }

    pub fn domain_name(&self, d: StainDomain) -> &str {
        match d {
            StainDomain::X => &self.x_name,
            StainDomain::Y => &self.y_name,
        }
    }
}

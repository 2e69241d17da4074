//! The six networks of the model: two conditional generators, two conditional
//! patch discriminators and two classifiers, plus checkpoint storage.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive};
use crate::domain::{AdversarialMode, Conditioning, ExperimentConfig, TissueClass, MIN_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Layer, LayerSpec, Param, Sequential, Trace};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 8] = b"VSTAINCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Broadcast one-hot maps for a batch, `n × C × h × w`.
pub fn condition_tensor(classes: &[TissueClass], num_classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(classes.len() * num_classes * h * w);
    for &c in classes {
        data.extend(crate::domain::one_hot_condition(c, num_classes, h, w)?);
    }
    Tensor::from_vec(classes.len(), num_classes, h, w, data)
}

fn conditioned(x: &Tensor, classes: &[TissueClass], cond_channels: usize) -> Result<Tensor> {
    if x.c != 3 {
        return Err(Error::shape(format!("expected a 3-channel image batch, got {} channels", x.c)));
    }
    if cond_channels == 0 {
        return Ok(x.clone());
    }
    if classes.len() != x.n {
        return Err(Error::shape(format!("{} conditions for a batch of {}", classes.len(), x.n)));
    }
    Tensor::concat_channels(x, &condition_tensor(classes, cond_channels, x.h, x.w)?)
}

fn check_channels(input: &Tensor, want: usize, what: &str) -> Result<()> {
    if input.c != want {
        return Err(Error::shape(format!("{what} expects {want} input channels, got {}", input.c)));
    }
    Ok(())
}

fn trailing_channels(t: &Tensor, from: usize) -> Tensor {
    let keep = t.c - from;
    let plane = t.plane();
    let mut data = Vec::with_capacity(t.n * keep * plane);
    for i in 0..t.n {
        data.extend_from_slice(&t.sample(i)[from * plane..]);
    }
    Tensor::from_vec(t.n, keep, t.h, t.w, data).expect("channel slice")
}

/// ResNet-style encoder/decoder generator.
///
/// When conditioned, the one-hot map is concatenated to the image at the input
/// and again in front of the output block: the instance normalisation after
/// the first convolution removes every spatially constant signal, so the
/// input copy alone cannot carry the class past it.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cond_channels: usize,
    pub body: Sequential,
    pub head: Sequential,
    passthrough: bool,
}

#[derive(Debug)]
pub struct GeneratorTrace {
    body: Trace,
    head: Trace,
    body_channels: usize,
}

impl Generator {
    pub fn new(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Generator {
        let cond = match cfg.networks.generator_conditioning {
            Conditioning::InputConcatOnehot => cfg.num_classes,
            Conditioning::None => 0,
        };
        let f = cfg.networks.gen_filters;
        let std = cfg.networks.init_std;
        let mut body = vec![
            Layer::ReflectPad(3),
            Layer::Conv(Conv2d::new(3 + cond, f, 7, 1, 0, std, rng)),
            Layer::InstanceNorm,
            Layer::Relu,
        ];
        for mult in [1, 2] {
            body.push(Layer::Conv(Conv2d::new(f * mult, f * mult * 2, 3, 2, 1, std, rng)));
            body.push(Layer::InstanceNorm);
            body.push(Layer::Relu);
        }
        for _ in 0..cfg.networks.resnet_blocks {
            body.push(Layer::Residual(Sequential::new(vec![
                Layer::ReflectPad(1),
                Layer::Conv(Conv2d::new(4 * f, 4 * f, 3, 1, 0, std, rng)),
                Layer::InstanceNorm,
                Layer::Relu,
                Layer::ReflectPad(1),
                Layer::Conv(Conv2d::new(4 * f, 4 * f, 3, 1, 0, std, rng)),
                Layer::InstanceNorm,
            ])));
        }
        for mult in [4, 2] {
            body.push(Layer::ConvTranspose(ConvTranspose2d::new(f * mult, f * mult / 2, 3, 2, 1, 1, std, rng)));
            body.push(Layer::InstanceNorm);
            body.push(Layer::Relu);
        }
        let head = vec![
            Layer::ReflectPad(3),
            Layer::Conv(Conv2d::new(f + cond, 3, 7, 1, 0, std, rng)),
            Layer::Tanh,
        ];
        Generator {
            cond_channels: cond,
            body: Sequential::new(body),
            head: Sequential::new(head),
            passthrough: false,
        }
    }

    /// A parameter-free generator returning its input unchanged.
    pub fn identity(cond_channels: usize) -> Generator {
        Generator {
            cond_channels,
            body: Sequential::default(),
            head: Sequential::default(),
            passthrough: true,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.passthrough
    }

    pub fn input_channels(&self) -> usize {
        3 + self.cond_channels
    }

    pub fn forward(&self, x: &Tensor, classes: &[TissueClass]) -> Result<(Tensor, GeneratorTrace)> {
        self.forward_input(conditioned(x, classes, self.cond_channels)?)
    }

    pub fn infer(&self, x: &Tensor, classes: &[TissueClass]) -> Result<Tensor> {
        self.infer_input(conditioned(x, classes, self.cond_channels)?)
    }

    /// Forward pass on an already conditioned `3 + C` channel input.
    pub fn forward_input(&self, input: Tensor) -> Result<(Tensor, GeneratorTrace)> {
        check_channels(&input, self.input_channels(), "generator")?;
        self.check_size(&input)?;
        if self.passthrough {
            let out = input.leading_channels(3);
            let trace = GeneratorTrace {
                body: Trace::default(),
                head: Trace::default(),
                body_channels: 0,
            };
            return Ok((out, trace));
        }
        let cond = trailing_channels(&input, 3);
        let (h, body) = self.body.forward(input);
        let body_channels = h.c;
        let (out, head) = self.head.forward(Tensor::concat_channels(&h, &cond)?);
        Ok((
            out,
            GeneratorTrace {
                body,
                head,
                body_channels,
            },
        ))
    }

    pub fn infer_input(&self, input: Tensor) -> Result<Tensor> {
        check_channels(&input, self.input_channels(), "generator")?;
        self.check_size(&input)?;
        if self.passthrough {
            return Ok(input.leading_channels(3));
        }
        let cond = trailing_channels(&input, 3);
        let h = self.body.infer(input);
        Ok(self.head.infer(Tensor::concat_channels(&h, &cond)?))
    }

    fn check_size(&self, input: &Tensor) -> Result<()> {
        if input.h % 4 != 0 || input.w % 4 != 0 || input.h < 8 || input.w < 8 {
            return Err(Error::shape(format!(
                "generator input {}x{} must be at least 8 and divisible by 4",
                input.h, input.w
            )));
        }
        Ok(())
    }

    /// Returns the gradient with respect to the three image channels.
    pub fn backward(&mut self, trace: GeneratorTrace, grad: Tensor, param_grads: bool) -> Tensor {
        if self.passthrough {
            return grad;
        }
        let g = self.head.backward(trace.head, grad, param_grads);
        let g = self.body.backward(trace.body, g.leading_channels(trace.body_channels), param_grads);
        g.leading_channels(3)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.body.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.body.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            cond_channels: self.cond_channels,
            passthrough: self.passthrough,
            layers: self.body.spec(),
            head: self.head.spec(),
        }
    }
}

/// Five-layer fully convolutional patch discriminator.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cond_channels: usize,
    pub net: Sequential,
}

/// Convolutions shared by the discriminator and classifier bases:
/// three stride-2 4×4 convolutions and one stride-1.
fn patch_base(cin: usize, f: usize, norm: bool, std: f64, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = vec![Layer::Conv(Conv2d::new(cin, f, 4, 2, 1, std, rng)), Layer::LeakyRelu(0.2)];
    for (i, (a, b)) in [(1, 2), (2, 4), (4, 8)].into_iter().enumerate() {
        let stride = if i < 2 { 2 } else { 1 };
        layers.push(Layer::Conv(Conv2d::new(f * a, f * b, 4, stride, 1, std, rng)));
        if norm {
            layers.push(Layer::InstanceNorm);
        }
        layers.push(Layer::LeakyRelu(0.2));
    }
    layers
}

impl Discriminator {
    pub fn new(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Discriminator {
        let cond = match cfg.networks.discriminator_conditioning {
            Conditioning::InputConcatOnehot => cfg.num_classes,
            Conditioning::None => 0,
        };
        let f = cfg.networks.disc_filters;
        let std = cfg.networks.init_std;
        let mut layers = patch_base(3 + cond, f, true, std, rng);
        layers.push(Layer::Conv(Conv2d::new(8 * f, 1, 4, 1, 1, std, rng)));
        if cfg.adversarial_mode == AdversarialMode::Vanilla {
            layers.push(Layer::Sigmoid);
        }
        Discriminator {
            cond_channels: cond,
            net: Sequential::new(layers),
        }
    }

    pub fn input_channels(&self) -> usize {
        3 + self.cond_channels
    }

    pub fn forward(&self, x: &Tensor, classes: &[TissueClass]) -> Result<(Tensor, Trace)> {
        self.forward_input(conditioned(x, classes, self.cond_channels)?)
    }

    pub fn infer(&self, x: &Tensor, classes: &[TissueClass]) -> Result<Tensor> {
        self.infer_input(conditioned(x, classes, self.cond_channels)?)
    }

    pub fn forward_input(&self, input: Tensor) -> Result<(Tensor, Trace)> {
        check_channels(&input, self.input_channels(), "discriminator")?;
        check_min_size(&input, MIN_PATCH_SIZE, "discriminator")?;
        Ok(self.net.forward(input))
    }

    pub fn infer_input(&self, input: Tensor) -> Result<Tensor> {
        check_channels(&input, self.input_channels(), "discriminator")?;
        check_min_size(&input, MIN_PATCH_SIZE, "discriminator")?;
        Ok(self.net.infer(input))
    }

    /// Returns the gradient with respect to the three image channels.
    pub fn backward(&mut self, trace: Trace, grad: Tensor, param_grads: bool) -> Tensor {
        self.net.backward(trace, grad, param_grads).leading_channels(3)
    }
}

fn check_min_size(input: &Tensor, min: usize, what: &str) -> Result<()> {
    if input.h < min || input.w < min {
        return Err(Error::shape(format!(
            "{what} needs inputs of at least {min}x{min}, got {}x{}",
            input.h, input.w
        )));
    }
    Ok(())
}

/// Eight-convolution classifier on the discriminator base, globally pooled to
/// one logit per class. Unconditioned: it predicts the condition.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub num_classes: usize,
    pub net: Sequential,
}

impl Classifier {
    pub fn new(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Classifier {
        let f = cfg.networks.disc_filters;
        let std = cfg.networks.init_std;
        let mut layers = patch_base(3, f, false, std, rng);
        for stride in [2, 1, 1] {
            layers.push(Layer::Conv(Conv2d::new(8 * f, 8 * f, 3, stride, 1, std, rng)));
            layers.push(Layer::LeakyRelu(0.2));
        }
        layers.push(Layer::Conv(Conv2d::new(8 * f, cfg.num_classes, 1, 1, 0, std, rng)));
        layers.push(Layer::GlobalAvgPool);
        Classifier {
            num_classes: cfg.num_classes,
            net: Sequential::new(layers),
        }
    }

    /// Nearest-mean-colour classifier: logits `2·μ·m_c − |m_c|²` where `μ` is
    /// the image's mean colour, so the argmax is the closest centroid.
    pub fn nearest_mean(centroids: &[[f32; 3]]) -> Classifier {
        let c = centroids.len();
        let mut conv = Conv2d::new(3, c, 1, 1, 0, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        for (k, m) in centroids.iter().enumerate() {
            for ch in 0..3 {
                conv.weight.value[k * 3 + ch] = 2.0 * m[ch];
            }
            conv.bias.value[k] = -m.iter().map(|v| v * v).sum::<f32>();
        }
        Classifier {
            num_classes: c,
            net: Sequential::new(vec![Layer::GlobalAvgPool, Layer::Conv(conv)]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        check_channels(x, 3, "classifier")?;
        check_min_size(x, 16, "classifier")?;
        Ok(self.net.forward(x.clone()))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, 3, "classifier")?;
        check_min_size(x, 16, "classifier")?;
        Ok(self.net.infer(x.clone()))
    }

    pub fn backward(&mut self, trace: Trace, grad: Tensor, param_grads: bool) -> Tensor {
        self.net.backward(trace, grad, param_grads)
    }

    /// Most likely class per sample.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<TissueClass>> {
        let logits = self.infer(x)?;
        Ok(logits
            .data
            .chunks_exact(self.num_classes)
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                TissueClass::from_index(best).expect("class index")
            })
            .collect())
    }

    fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            cond_channels: 0,
            passthrough: false,
            layers: self.net.spec(),
            head: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetId {
    GEnc,
    GDec,
    DEnc,
    DDec,
    SEnc,
    SDec,
}

impl NetId {
    pub const ALL: [NetId; 6] = [NetId::GEnc, NetId::GDec, NetId::DEnc, NetId::DDec, NetId::SEnc, NetId::SDec];

    pub fn name(self) -> &'static str {
        match self {
            NetId::GEnc => "g_enc",
            NetId::GDec => "g_dec",
            NetId::DEnc => "d_enc",
            NetId::DDec => "d_dec",
            NetId::SEnc => "s_enc",
            NetId::SDec => "s_dec",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub cond_channels: usize,
    pub passthrough: bool,
    pub layers: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
}

/// Serialized layer layout of all six networks; checkpoints only load into a
/// bundle with an identical descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub num_classes: usize,
    pub generator_conditioning: Conditioning,
    pub discriminator_conditioning: Conditioning,
    pub networks: Vec<(NetId, NetworkSpec)>,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    /// X → Y
    pub g_enc: Generator,
    /// Y → X
    pub g_dec: Generator,
    /// judges domain Y
    pub d_enc: Discriminator,
    /// judges domain X
    pub d_dec: Discriminator,
    /// classifies domain X
    pub s_enc: Classifier,
    /// classifies domain Y
    pub s_dec: Classifier,
    pub generator_conditioning: Conditioning,
    pub discriminator_conditioning: Conditioning,
}

impl ModelBundle {
    /// Builds all six networks with weights drawn from `N(0, init_std)` using
    /// a generator seeded from `cfg.seed`.
    pub fn new(cfg: &ExperimentConfig) -> Result<ModelBundle> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(ModelBundle {
            g_enc: Generator::new(cfg, &mut rng),
            g_dec: Generator::new(cfg, &mut rng),
            d_enc: Discriminator::new(cfg, &mut rng),
            d_dec: Discriminator::new(cfg, &mut rng),
            s_enc: Classifier::new(cfg, &mut rng),
            s_dec: Classifier::new(cfg, &mut rng),
            generator_conditioning: cfg.networks.generator_conditioning,
            discriminator_conditioning: cfg.networks.discriminator_conditioning,
        })
    }

    pub fn arch_descriptor(&self) -> ArchDescriptor {
        ArchDescriptor {
            num_classes: self.s_enc.num_classes,
            generator_conditioning: self.generator_conditioning,
            discriminator_conditioning: self.discriminator_conditioning,
            networks: vec![
                (NetId::GEnc, self.g_enc.spec()),
                (NetId::GDec, self.g_dec.spec()),
                (NetId::DEnc, disc_spec(&self.d_enc)),
                (NetId::DDec, disc_spec(&self.d_dec)),
                (NetId::SEnc, self.s_enc.spec()),
                (NetId::SDec, self.s_dec.spec()),
            ],
        }
    }

    pub fn generator(&self, forward: bool) -> &Generator {
        if forward {
            &self.g_enc
        } else {
            &self.g_dec
        }
    }

    pub fn params(&self, id: NetId) -> Vec<&Param> {
        match id {
            NetId::GEnc => self.g_enc.params(),
            NetId::GDec => self.g_dec.params(),
            NetId::DEnc => self.d_enc.net.params(),
            NetId::DDec => self.d_dec.net.params(),
            NetId::SEnc => self.s_enc.net.params(),
            NetId::SDec => self.s_dec.net.params(),
        }
    }

    pub fn params_mut(&mut self, id: NetId) -> Vec<&mut Param> {
        match id {
            NetId::GEnc => self.g_enc.params_mut(),
            NetId::GDec => self.g_dec.params_mut(),
            NetId::DEnc => self.d_enc.net.params_mut(),
            NetId::DDec => self.d_dec.net.params_mut(),
            NetId::SEnc => self.s_enc.net.params_mut(),
            NetId::SDec => self.s_dec.net.params_mut(),
        }
    }

    /// Mutable parameters of several networks at once, in `ids` order.
    pub fn group_params_mut(&mut self, ids: &[NetId]) -> Vec<&mut Param> {
        let ModelBundle {
            g_enc,
            g_dec,
            d_enc,
            d_dec,
            s_enc,
            s_dec,
            ..
        } = self;
        let mut slots = [
            Some(g_enc.params_mut()),
            Some(g_dec.params_mut()),
            Some(d_enc.net.params_mut()),
            Some(d_dec.net.params_mut()),
            Some(s_enc.net.params_mut()),
            Some(s_dec.net.params_mut()),
        ];
        let mut out = Vec::new();
        for id in ids {
            let slot = NetId::ALL.iter().position(|x| x == id).expect("known network");
            out.extend(slots[slot].take().unwrap_or_default());
        }
        out
    }

    pub fn param_count(&self, id: NetId) -> usize {
        self.params(id).iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self, ids: &[NetId]) {
        for &id in ids {
            for p in self.params_mut(id) {
                p.grad.fill(0.0);
            }
        }
    }

    /// FNV-1a hash over the weight bits of the given networks.
    pub fn fingerprint(&self, ids: &[NetId]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &id in ids {
            for p in self.params(id) {
                for v in &p.value {
                    for b in v.to_bits().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        h
    }

    /// Copies weights from `other`, which must share this bundle's layout.
    pub fn load_weights_from(&mut self, other: &ModelBundle) -> Result<()> {
        if self.arch_descriptor() != other.arch_descriptor() {
            return Err(Error::Checkpoint("architecture descriptors differ".into()));
        }
        for id in NetId::ALL {
            let src: Vec<Vec<f32>> = other.params(id).iter().map(|p| p.value.clone()).collect();
            for (dst, v) in self.params_mut(id).into_iter().zip(src) {
                dst.value = v;
            }
        }
        Ok(())
    }
}

fn disc_spec(d: &Discriminator) -> NetworkSpec {
    NetworkSpec {
        cond_channels: d.cond_channels,
        passthrough: false,
        layers: d.net.spec(),
        head: Vec::new(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    config: ExperimentConfig,
    iteration: u64,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    network: NetId,
    index: usize,
}

/// Contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub config: ExperimentConfig,
    pub iteration: u64,
}

/// Stores the architecture descriptor, config snapshot, iteration counter and
/// one weight blob per parameter tensor.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, cfg: &ExperimentConfig, iteration: u64) -> Result<()> {
    let mut entries = Vec::new();
    let mut blobs: Vec<&[f32]> = Vec::new();
    for id in NetId::ALL {
        for (index, p) in bundle.params(id).into_iter().enumerate() {
            entries.push(BlobEntry { network: id, index });
            blobs.push(&p.value);
        }
    }
    let header = CheckpointHeader {
        arch: bundle.arch_descriptor(),
        config: cfg.clone(),
        iteration,
        blobs: entries,
    };
    write_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &blobs)
}

/// Reads a checkpoint, rebuilding the bundle from the stored config and
/// refusing files whose architecture does not match that rebuild.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (header, blobs): (CheckpointHeader, _) = read_archive(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut bundle = ModelBundle::new(&header.config)?;
    // pass-through generators have no config switch; restore them from the descriptor
    for (id, spec) in &header.arch.networks {
        if spec.passthrough {
            let g = Generator::identity(spec.cond_channels);
            match id {
                NetId::GEnc => bundle.g_enc = g,
                NetId::GDec => bundle.g_dec = g,
                _ => return Err(bad("only generators can be pass-through")),
            }
        }
    }
    if header.arch != bundle.arch_descriptor() {
        return Err(bad("architecture descriptor does not match the stored config"));
    }
    if header.blobs.len() != blobs.len() {
        return Err(bad("blob table does not match the stored blobs"));
    }
    for (entry, blob) in header.blobs.iter().zip(blobs) {
        let mut params = bundle.params_mut(entry.network);
        let p = params.get_mut(entry.index).ok_or_else(|| bad("blob table names a missing parameter"))?;
        if p.len() != blob.len() {
            return Err(bad("blob length does not match the architecture"));
        }
        p.value = blob;
    }
    Ok(Checkpoint {
        bundle,
        config: header.config,
        iteration: header.iteration,
    })
}

//! Alternating minimax optimisation of the composite objective.
//!
//! Each step first updates both generators and both classifiers on the full
//! generator-side objective, then both discriminators on real images versus
//! pool-queried generated images of the same class.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{read_archive, write_archive};
use crate::data::{sample_classes, sample_entries, DatasetManifest, PatchCache};
use crate::domain::{ClcycMode, ExperimentConfig, IdentityMode, Image, LabeledPatch, LossWeights, StainDomain, TissueClass};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_d_grad, adversarial_loss_g_grad, classification_cycle_loss_grad, classifier_loss_grad,
    cycle_loss_grad, identity_loss_grad, softmax, softmax_backward, ssim_loss_grad, AdversarialScores, BatchShape,
    SsimParams,
};
use crate::matting::{photorealism_loss_grad, LaplacianCache, MattingLaplacian};
use crate::networks::{load_checkpoint, save_checkpoint, ModelBundle, NetId};
use crate::nn::{Adam, Param};
use crate::pool::{ConditionalImagePool, PoolSnapshot};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESUME_FILE: &str = "resume.bin";
pub const METRICS_FILE: &str = "metrics.tsv";

const GEN_SIDE: [NetId; 4] = [NetId::GEnc, NetId::GDec, NetId::SEnc, NetId::SDec];
const DISC_SIDE: [NetId; 2] = [NetId::DEnc, NetId::DDec];
const HISTORY: usize = 256;
const RESUME_MAGIC: &[u8; 8] = b"VSTAINRS";
const RESUME_VERSION: u32 = 1;

/// The eight loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_enc: f64,
    pub adv_dec: f64,
    pub cyc: f64,
    pub id: f64,
    pub class: f64,
    pub clcyc: f64,
    pub ssim: f64,
    pub pho: f64,
}

impl LossParts {
    pub const NAMES: [&'static str; 8] = ["adv_enc", "adv_dec", "cyc", "id", "class", "clcyc", "ssim", "pho"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_enc,
            self.adv_dec,
            self.cyc,
            self.id,
            self.class,
            self.clcyc,
            self.ssim,
            self.pho,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        LossParts {
            adv_enc: v[0],
            adv_dec: v[1],
            cyc: v[2],
            id: v[3],
            class: v[4],
            clcyc: v[5],
            ssim: v[6],
            pho: v[7],
        }
    }
}

/// `adv_enc + adv_dec + λ·cyc + δ·id + γ·class + γ·clcyc + α·ssim + β·pho`.
pub fn total_objective(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in LossParts::NAMES.iter().zip(parts.values()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} ({v})")));
        }
    }
    Ok(parts.adv_enc
        + parts.adv_dec
        + w.lambda_cyc * parts.cyc
        + w.delta_id * parts.id
        + w.gamma_cls * parts.class
        + w.gamma_cls * parts.clcyc
        + w.alpha_ssim * parts.ssim
        + w.beta_pho * parts.pho)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub iteration: u64,
    pub parts: LossParts,
    pub total: f64,
    pub d_enc: f64,
    pub d_dec: f64,
}

impl StepRecord {
    /// `iter<TAB>term=value…<TAB>total=value`, values in shortest
    /// round-trip form.
    pub fn log_line(&self) -> String {
        let mut s = self.iteration.to_string();
        for (name, v) in LossParts::NAMES.iter().zip(self.parts.values()) {
            write!(s, "\t{name}={v}").unwrap();
        }
        write!(s, "\ttotal={}", self.total).unwrap();
        s
    }

    pub fn parse_line(line: &str) -> Result<(u64, LossParts, f64)> {
        let bad = || Error::invalid(format!("malformed metrics line {line:?}"));
        let mut fields = line.split('\t');
        let iter = fields.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let mut values = [0.0; 8];
        for (slot, name) in values.iter_mut().zip(LossParts::NAMES) {
            let (k, v) = fields.next().and_then(|f| f.split_once('=')).ok_or_else(bad)?;
            if k != name {
                return Err(bad());
            }
            *slot = v.parse().map_err(|_| bad())?;
        }
        let total = fields
            .next()
            .and_then(|f| f.strip_prefix("total="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        Ok((iter, LossParts::from_values(values), total))
    }
}

/// Stacks patches into an `n × 3 × h × w` batch.
pub fn patch_tensor(patches: &[LabeledPatch]) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.pixels.height, first.pixels.width);
    let samples: Vec<&[f32]> = patches.iter().map(|p| p.pixels.data.as_slice()).collect();
    Tensor::stack(&samples, 3, h, w)
}

pub fn images_of(t: &Tensor) -> Vec<Image> {
    (0..t.n)
        .map(|i| Image::new(t.h, t.w, t.sample(i).to_vec()).expect("3-channel batch"))
        .collect()
}

fn scaled(g: Vec<f64>, s: f64) -> Vec<f64> {
    g.into_iter().map(|v| v * s).collect()
}

fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn finite(name: &str, g: &[f64]) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient of {name}")))
    }
}

fn grad_tensor(shape: [usize; 4], g: &[f64]) -> Tensor {
    Tensor::from_f64(shape, g).expect("gradient shape")
}

fn param_sizes(bundle: &ModelBundle, ids: &[NetId]) -> Vec<usize> {
    ids.iter().flat_map(|&id| bundle.params(id).into_iter().map(Param::len)).collect()
}

/// Complete mutable state of a training run.
pub struct TrainState {
    pub cfg: ExperimentConfig,
    pub bundle: ModelBundle,
    pub iteration: u64,
    pub opt_gs: Adam,
    pub opt_d: Adam,
    /// Generated X images (fakes for `d_dec`).
    pub pool_x: ConditionalImagePool,
    /// Generated Y images (fakes for `d_enc`).
    pub pool_y: ConditionalImagePool,
    pub data_rng: ChaCha8Rng,
    pub history: VecDeque<StepRecord>,
    pub laplacians: LaplacianCache,
    ssim: SsimParams,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<TrainState> {
        Self::with_bundle(cfg, ModelBundle::new(cfg)?)
    }

    pub fn with_bundle(cfg: &ExperimentConfig, bundle: ModelBundle) -> Result<TrainState> {
        cfg.validate()?;
        let o = &cfg.optimizer;
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(1);
        Ok(TrainState {
            opt_gs: Adam::new(&param_sizes(&bundle, &GEN_SIDE), o.beta1, o.beta2, o.eps),
            opt_d: Adam::new(&param_sizes(&bundle, &DISC_SIDE), o.beta1, o.beta2, o.eps),
            pool_x: ConditionalImagePool::new(cfg.pool_capacity_per_class, cfg.seed.wrapping_add(0x5eed_0001)),
            pool_y: ConditionalImagePool::new(cfg.pool_capacity_per_class, cfg.seed.wrapping_add(0x5eed_0002)),
            data_rng,
            history: VecDeque::with_capacity(HISTORY),
            laplacians: LaplacianCache::in_memory(cfg.matting.clone()),
            ssim: SsimParams::from_config(&cfg.ssim)?,
            cfg: cfg.clone(),
            bundle,
            iteration: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.optimizer.learning_rate_at(self.iteration)
    }

    /// Draws the next X and Y batches with a shared class sequence.
    pub fn next_batch(
        &mut self,
        manifest: &DatasetManifest,
        cache: &mut PatchCache,
    ) -> Result<(Vec<LabeledPatch>, Vec<LabeledPatch>)> {
        let n = self.cfg.optimizer.batch_size;
        let classes = sample_classes(
            manifest,
            &[StainDomain::X, StainDomain::Y],
            self.cfg.class_balance,
            n,
            &mut self.data_rng,
        )?;
        let xs = sample_entries(manifest, StainDomain::X, &classes, &mut self.data_rng)?;
        let ys = sample_entries(manifest, StainDomain::Y, &classes, &mut self.data_rng)?;
        let mut load = |idx: Vec<usize>| -> Result<Vec<LabeledPatch>> {
            idx.into_iter().map(|i| cache.get(manifest, i).cloned()).collect()
        };
        Ok((load(xs)?, load(ys)?))
    }

    fn laplacians_for(&self, batch: &[LabeledPatch]) -> Result<Vec<Arc<MattingLaplacian>>> {
        batch
            .iter()
            .map(|p| self.laplacians.get_or_build(&p.source_id, &p.pixels))
            .collect()
    }

    /// One full alternating update; returns the step's loss record.
    pub fn train_step(&mut self, x_batch: &[LabeledPatch], y_batch: &[LabeledPatch]) -> Result<StepRecord> {
        let classes = check_batches(&self.cfg, x_batch, y_batch)?;
        let x = patch_tensor(x_batch)?;
        let y = patch_tensor(y_batch)?;
        let (parts, fake_y, fake_x) = self.generator_step(&x, &y, x_batch, y_batch, &classes)?;
        let (d_enc, d_dec) = self.discriminator_step(&x, &y, &fake_x, &fake_y, &classes)?;
        self.iteration += 1;
        let record = StepRecord {
            iteration: self.iteration,
            total: total_objective(&parts, &self.cfg.loss_weights)?,
            parts,
            d_enc,
            d_dec,
        };
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(record);
        Ok(record)
    }

    /// Half-step (a): both generators and both classifiers. Returns the loss
    /// terms and the (detached) generated batches `G_enc(x)`, `G_dec(y)`.
    pub fn generator_step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        x_batch: &[LabeledPatch],
        y_batch: &[LabeledPatch],
        classes: &[TissueClass],
    ) -> Result<(LossParts, Tensor, Tensor)> {
        let w = self.cfg.loss_weights;
        let mode = self.cfg.adversarial_mode;
        let c = self.cfg.num_classes;
        let labels: Vec<usize> = classes.iter().map(|c| c.index()).collect();
        let shape = x.shape();
        let bshape = BatchShape::new(shape[0], shape[1], shape[2], shape[3]);
        let lap_x = if w.beta_pho > 0.0 { self.laplacians_for(x_batch)? } else { Vec::new() };
        let lap_y = if w.beta_pho > 0.0 { self.laplacians_for(y_batch)? } else { Vec::new() };
        let d_fingerprint = self.bundle.fingerprint(&DISC_SIDE);
        self.bundle.zero_grad(&GEN_SIDE);
        let b = &mut self.bundle;

        let (fake_y, t_fy) = b.g_enc.forward(x, classes)?;
        let (fake_x, t_fx) = b.g_dec.forward(y, classes)?;
        let (rec_x, t_rx) = b.g_dec.forward(&fake_y, classes)?;
        let (rec_y, t_ry) = b.g_enc.forward(&fake_x, classes)?;
        let (id_enc, t_ie) = b.g_enc.forward(y, classes)?;
        let id_dec_in = match self.cfg.identity_mode {
            IdentityMode::SameDomain => x,
            IdentityMode::PaperLiteral => y,
        };
        let (id_dec, t_id) = b.g_dec.forward(id_dec_in, classes)?;

        let (xf, yf) = (x.to_f64(), y.to_f64());
        let (fyf, fxf) = (fake_y.to_f64(), fake_x.to_f64());

        // adversarial terms, pulled back through frozen discriminators
        let (sy, t_dy) = b.d_enc.forward(&fake_y, classes)?;
        let (sx, t_dx) = b.d_dec.forward(&fake_x, classes)?;
        let (adv_enc, g_sy) = adversarial_loss_g_grad(&sy.to_f64(), mode)?;
        let (adv_dec, g_sx) = adversarial_loss_g_grad(&sx.to_f64(), mode)?;
        finite("adv_enc", &g_sy)?;
        finite("adv_dec", &g_sx)?;

        // classification on real images
        let (lx, t_sx) = b.s_enc.forward(x)?;
        let (ly, t_sy) = b.s_dec.forward(y)?;
        let (lxf, lyf) = (lx.to_f64(), ly.to_f64());
        let (cls_x, mut g_lx) = classifier_loss_grad(&lxf, c, &labels)?;
        let (cls_y, mut g_ly) = classifier_loss_grad(&lyf, c, &labels)?;
        let class = cls_x + cls_y;
        finite("class", &g_lx)?;
        finite("class", &g_ly)?;

        // classification cycle
        let (px, py) = (softmax(&lxf, c), softmax(&lyf, c));
        let mut clcyc_traces = None;
        let clcyc = match self.cfg.clcyc_mode {
            ClcycMode::TranslatedPair => {
                let (l_fy, t_sfy) = b.s_dec.forward(&fake_y)?;
                let (l_fx, t_sfx) = b.s_enc.forward(&fake_x)?;
                let (p_fy, p_fx) = (softmax(&l_fy.to_f64(), c), softmax(&l_fx.to_f64(), c));
                let (va, ga_x, ga_fy) = classification_cycle_loss_grad(&px, &p_fy, c)?;
                let (vb, gb_y, gb_fx) = classification_cycle_loss_grad(&py, &p_fx, c)?;
                add(&mut g_lx, &scaled(softmax_backward(&px, &ga_x, c), 1.0));
                add(&mut g_ly, &scaled(softmax_backward(&py, &gb_y, c), 1.0));
                let g_lfy = softmax_backward(&p_fy, &ga_fy, c);
                let g_lfx = softmax_backward(&p_fx, &gb_fx, c);
                finite("clcyc", &g_lfy)?;
                finite("clcyc", &g_lfx)?;
                clcyc_traces = Some((t_sfy, l_fy.shape(), g_lfy, t_sfx, l_fx.shape(), g_lfx));
                va + vb
            }
            ClcycMode::UnpairedSameClass => {
                let (v, ga, gb) = classification_cycle_loss_grad(&px, &py, c)?;
                add(&mut g_lx, &softmax_backward(&px, &ga, c));
                add(&mut g_ly, &softmax_backward(&py, &gb, c));
                v
            }
        };
        finite("clcyc", &g_lx)?;
        finite("clcyc", &g_ly)?;

        let (cyc, g_rx, g_ry) = cycle_loss_grad(&xf, &rec_x.to_f64(), &yf, &rec_y.to_f64())?;
        let (id, g_ie, g_id) = identity_loss_grad(
            self.cfg.identity_mode,
            &xf,
            &yf,
            &id_enc.to_f64(),
            &id_dec.to_f64(),
        )?;
        let (ssim, g_ssim_fy, g_ssim_fx) = ssim_loss_grad(&xf, &fyf, &yf, &fxf, bshape, &self.ssim, self.cfg.ssim_mode)?;
        finite("ssim", &g_ssim_fy)?;
        finite("ssim", &g_ssim_fx)?;
        let (pho, g_pho_fy, g_pho_fx) = if w.beta_pho > 0.0 {
            photorealism_loss_grad(
                &xf,
                &fyf,
                &lap_x,
                &yf,
                &fxf,
                &lap_y,
                shape[2],
                shape[3],
                &self.cfg.matting,
            )?
        } else {
            (0.0, vec![0.0; fyf.len()], vec![0.0; fxf.len()])
        };
        finite("pho", &g_pho_fy)?;
        finite("pho", &g_pho_fx)?;
        let parts = LossParts {
            adv_enc,
            adv_dec,
            cyc,
            id,
            class,
            clcyc,
            ssim,
            pho,
        };
        total_objective(&parts, &w)?;

        // backward: reconstruction paths first, they feed the translated images
        let mut d_fy = b.g_dec.backward(t_rx, grad_tensor(shape, &scaled(g_rx, w.lambda_cyc)), true).to_f64();
        let mut d_fx = b.g_enc.backward(t_ry, grad_tensor(shape, &scaled(g_ry, w.lambda_cyc)), true).to_f64();
        add(&mut d_fy, &b.d_enc.backward(t_dy, grad_tensor(sy.shape(), &g_sy), false).to_f64());
        add(&mut d_fx, &b.d_dec.backward(t_dx, grad_tensor(sx.shape(), &g_sx), false).to_f64());
        if let Some((t_sfy, sh_fy, g_lfy, t_sfx, sh_fx, g_lfx)) = clcyc_traces {
            let g = grad_tensor(sh_fy, &scaled(g_lfy, w.gamma_cls));
            add(&mut d_fy, &b.s_dec.backward(t_sfy, g, true).to_f64());
            let g = grad_tensor(sh_fx, &scaled(g_lfx, w.gamma_cls));
            add(&mut d_fx, &b.s_enc.backward(t_sfx, g, true).to_f64());
        }
        b.s_enc.backward(t_sx, grad_tensor(lx.shape(), &scaled(g_lx, w.gamma_cls)), true);
        b.s_dec.backward(t_sy, grad_tensor(ly.shape(), &scaled(g_ly, w.gamma_cls)), true);
        add(&mut d_fy, &scaled(g_ssim_fy, w.alpha_ssim));
        add(&mut d_fx, &scaled(g_ssim_fx, w.alpha_ssim));
        add(&mut d_fy, &scaled(g_pho_fy, w.beta_pho));
        add(&mut d_fx, &scaled(g_pho_fx, w.beta_pho));
        b.g_enc.backward(t_fy, grad_tensor(shape, &d_fy), true);
        b.g_dec.backward(t_fx, grad_tensor(shape, &d_fx), true);
        b.g_enc.backward(t_ie, grad_tensor(shape, &scaled(g_ie, w.delta_id)), true);
        b.g_dec.backward(t_id, grad_tensor(shape, &scaled(g_id, w.delta_id)), true);

        let lr = self.cfg.optimizer.learning_rate_at(self.iteration);
        let mut params = self.bundle.group_params_mut(&GEN_SIDE);
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite("generator/classifier parameter gradients".into()));
        }
        self.opt_gs.update(&mut params, lr);
        if self.bundle.fingerprint(&DISC_SIDE) != d_fingerprint {
            return Err(Error::invalid("generator half-step modified discriminator weights"));
        }
        Ok((parts, fake_y, fake_x))
    }

    /// Half-step (b): discriminators on real images versus generated images
    /// drawn through the class-conditioned history pools. Returns the
    /// `d_enc` and `d_dec` losses before the update.
    pub fn discriminator_step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        fake_x: &Tensor,
        fake_y: &Tensor,
        classes: &[TissueClass],
    ) -> Result<(f64, f64)> {
        let mode = self.cfg.adversarial_mode;
        let g_fingerprint = self.bundle.fingerprint(&GEN_SIDE);
        let query = |pool: &mut ConditionalImagePool, fake: &Tensor| -> Result<Tensor> {
            let items: Vec<(Image, TissueClass)> = images_of(fake).into_iter().zip(classes.iter().copied()).collect();
            let out = pool.query(&items);
            let samples: Vec<&[f32]> = out.iter().map(|i| i.data.as_slice()).collect();
            Tensor::stack(&samples, 3, fake.h, fake.w)
        };
        let fy = query(&mut self.pool_y, fake_y)?;
        let fx = query(&mut self.pool_x, fake_x)?;
        self.bundle.zero_grad(&DISC_SIDE);
        let b = &mut self.bundle;
        let mut losses = [0.0; 2];
        for (k, (real, fake)) in [(y, &fy), (x, &fx)].into_iter().enumerate() {
            let d = if k == 0 { &mut b.d_enc } else { &mut b.d_dec };
            let (sr, tr) = d.forward(real, classes)?;
            let (sf, tf) = d.forward(fake, classes)?;
            let (loss, gr, gf) = adversarial_loss_d_grad(AdversarialScores {
                real: &sr.to_f64(),
                fake: &sf.to_f64(),
                mode,
            })?;
            let name = if k == 0 { "d_enc" } else { "d_dec" };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name}")));
            }
            finite(name, &gr)?;
            finite(name, &gf)?;
            d.backward(tr, grad_tensor(sr.shape(), &gr), true);
            d.backward(tf, grad_tensor(sf.shape(), &gf), true);
            losses[k] = loss;
        }
        let lr = self.cfg.optimizer.learning_rate_at(self.iteration);
        let mut params = self.bundle.group_params_mut(&DISC_SIDE);
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite("discriminator parameter gradients".into()));
        }
        self.opt_d.update(&mut params, lr);
        if self.bundle.fingerprint(&GEN_SIDE) != g_fingerprint {
            return Err(Error::invalid("discriminator half-step modified generator or classifier weights"));
        }
        Ok((losses[0], losses[1]))
    }

    /// Discriminator losses on a fixed batch without updating anything.
    pub fn discriminator_losses(&self, x: &Tensor, y: &Tensor, fake_x: &Tensor, fake_y: &Tensor, classes: &[TissueClass]) -> Result<(f64, f64)> {
        let mode = self.cfg.adversarial_mode;
        let b = &self.bundle;
        let score = |real: &[f64], fake: &[f64]| adversarial_loss_d_grad(AdversarialScores { real, fake, mode }).map(|r| r.0);
        let enc = score(&b.d_enc.infer(y, classes)?.to_f64(), &b.d_enc.infer(fake_y, classes)?.to_f64())?;
        let dec = score(&b.d_dec.infer(x, classes)?.to_f64(), &b.d_dec.infer(fake_x, classes)?.to_f64())?;
        Ok((enc, dec))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&ckpt, &self.bundle, &self.cfg, self.iteration)?;
        self.save_resume(&dir.join(RESUME_FILE))?;
        Ok(ckpt)
    }

    fn save_resume(&self, path: &Path) -> Result<()> {
        let mut blobs: Vec<&[f32]> = Vec::new();
        for opt in [&self.opt_gs, &self.opt_d] {
            blobs.extend(opt.m.iter().map(Vec::as_slice));
            blobs.extend(opt.v.iter().map(Vec::as_slice));
        }
        let snaps = [self.pool_x.snapshot(), self.pool_y.snapshot()];
        let mut pools = Vec::new();
        for s in &snaps {
            let mut buckets = Vec::new();
            for bucket in &s.buckets {
                buckets.push(bucket.iter().map(|i| (i.height, i.width)).collect());
                blobs.extend(bucket.iter().map(|i| i.data.as_slice()));
            }
            pools.push(PoolHeader {
                capacity: s.capacity,
                seed: s.seed,
                word_pos: s.word_pos.to_string(),
                swaps: s.swaps,
                full_queries: s.full_queries,
                buckets,
            });
        }
        let header = ResumeHeader {
            iteration: self.iteration,
            adam_steps: [self.opt_gs.step, self.opt_d.step],
            adam_lens: [self.opt_gs.m.len(), self.opt_d.m.len()],
            data_rng_seed: self.cfg.seed,
            data_rng_word_pos: self.data_rng.get_word_pos().to_string(),
            pools,
            history: self.history.iter().map(|r| (r.iteration, r.parts, r.total, r.d_enc, r.d_dec)).collect(),
        };
        write_archive(path, RESUME_MAGIC, RESUME_VERSION, &header, &blobs)
    }

    /// Restores a run from the checkpoint and resume files in `dir`.
    pub fn resume(dir: &Path) -> Result<TrainState> {
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        if !ckpt_path.exists() {
            return Err(Error::Checkpoint(format!("no checkpoint to resume from in {}", dir.display())));
        }
        let ckpt = load_checkpoint(&ckpt_path)?;
        let mut state = TrainState::with_bundle(&ckpt.config, ckpt.bundle)?;
        state.iteration = ckpt.iteration;
        let path = dir.join(RESUME_FILE);
        let (h, blobs): (ResumeHeader, Vec<Vec<f32>>) = read_archive(&path, RESUME_MAGIC, RESUME_VERSION)?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if h.iteration != ckpt.iteration {
            return Err(bad("resume state and checkpoint are from different iterations"));
        }
        let mut blobs = blobs.into_iter();
        for (k, opt) in [&mut state.opt_gs, &mut state.opt_d].into_iter().enumerate() {
            if h.adam_lens[k] != opt.m.len() {
                return Err(bad("optimizer state does not match the architecture"));
            }
            opt.step = h.adam_steps[k];
            for slot in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                let b = blobs.next().ok_or_else(|| bad("missing optimizer moments"))?;
                if b.len() != slot.len() {
                    return Err(bad("optimizer moment length mismatch"));
                }
                *slot = b;
            }
        }
        let mut restored = Vec::new();
        for p in &h.pools {
            let mut buckets = Vec::new();
            for dims in &p.buckets {
                let mut bucket = Vec::new();
                for &(hh, ww) in dims {
                    let data = blobs.next().ok_or_else(|| bad("missing pool image"))?;
                    bucket.push(Image::new(hh, ww, data)?);
                }
                buckets.push(bucket);
            }
            restored.push(ConditionalImagePool::restore(PoolSnapshot {
                capacity: p.capacity,
                seed: p.seed,
                word_pos: p.word_pos.parse().map_err(|_| bad("bad pool rng position"))?,
                swaps: p.swaps,
                full_queries: p.full_queries,
                buckets,
            }));
        }
        if restored.len() != 2 || blobs.next().is_some() {
            return Err(bad("unexpected pool layout"));
        }
        state.pool_y = restored.pop().expect("two pools");
        state.pool_x = restored.pop().expect("two pools");
        let mut rng = ChaCha8Rng::seed_from_u64(h.data_rng_seed);
        rng.set_stream(1);
        rng.set_word_pos(h.data_rng_word_pos.parse().map_err(|_| bad("bad data rng position"))?);
        state.data_rng = rng;
        state.history = h
            .history
            .into_iter()
            .map(|(iteration, parts, total, d_enc, d_dec)| StepRecord {
                iteration,
                parts,
                total,
                d_enc,
                d_dec,
            })
            .collect();
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolHeader {
    capacity: usize,
    seed: u64,
    word_pos: String,
    swaps: u64,
    full_queries: u64,
    buckets: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeHeader {
    iteration: u64,
    adam_steps: [u64; 2],
    adam_lens: [usize; 2],
    data_rng_seed: u64,
    data_rng_word_pos: String,
    pools: Vec<PoolHeader>,
    history: Vec<(u64, LossParts, f64, f64, f64)>,
}

fn check_batches(cfg: &ExperimentConfig, x: &[LabeledPatch], y: &[LabeledPatch]) -> Result<Vec<TissueClass>> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid(format!(
            "X and Y batches must be non-empty and equally long ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let mut classes = Vec::with_capacity(x.len());
    for (a, b) in x.iter().zip(y) {
        if a.domain != StainDomain::X || b.domain != StainDomain::Y {
            return Err(Error::invalid("batches must hold domain X and domain Y patches respectively"));
        }
        if a.tissue_class != b.tissue_class {
            return Err(Error::invalid("X and Y batches must share one class sequence"));
        }
        if a.tissue_class.index() >= cfg.num_classes {
            return Err(Error::invalid(format!("class {} outside the {}-class model", a.tissue_class, cfg.num_classes)));
        }
        classes.push(a.tissue_class);
    }
    Ok(classes)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps have completed.
    pub stop_after: Option<u64>,
    /// Persist matting Laplacians here.
    pub cache_dir: Option<PathBuf>,
    /// Print one progress line per logged step to stderr.
    pub progress_every: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub iteration: u64,
    pub records: Vec<StepRecord>,
}

/// Runs (or resumes) training into `out_dir`, appending one metrics line per
/// step and checkpointing every `checkpoint_every` steps and at the end.
pub fn run_training(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if manifest.patch_size != 0 && manifest.patch_size != cfg.patch_size {
        return Err(Error::Config(format!(
            "patch_size is {} but the manifest holds {}px patches",
            cfg.patch_size, manifest.patch_size
        )));
    }
    fs::create_dir_all(out_dir)?;
    for class in cfg.classes() {
        for d in [StainDomain::X, StainDomain::Y] {
            if manifest.count(d, *class) == 0 {
                return Err(Error::EmptyCell {
                    domain: d.token().into(),
                    class: class.token().into(),
                });
            }
        }
    }
    let log_path = out_dir.join(METRICS_FILE);
    let mut state = if opts.resume {
        let s = TrainState::resume(out_dir)?;
        if s.cfg != *cfg {
            return Err(Error::Config("config differs from the one stored in the checkpoint".into()));
        }
        truncate_log(&log_path, s.iteration)?;
        s
    } else {
        fs::write(&log_path, "")?;
        TrainState::new(cfg)?
    };
    if let Some(dir) = &opts.cache_dir {
        state.laplacians = LaplacianCache::with_dir(cfg.matting.clone(), dir)?;
    }
    let mut log = fs::OpenOptions::new().append(true).open(&log_path)?;
    let mut cache = PatchCache::default();
    let mut records = Vec::new();
    let total = cfg.optimizer.total_iterations;
    let every = cfg.optimizer.checkpoint_every.max(1);
    let mut checkpoint = state.save(out_dir)?;
    while state.iteration < total {
        if opts.stop_after.is_some_and(|s| state.iteration >= s) {
            break;
        }
        let (xb, yb) = state.next_batch(manifest, &mut cache)?;
        let rec = state.train_step(&xb, &yb)?;
        writeln!(log, "{}", rec.log_line())?;
        if let Some(p) = opts.progress_every {
            if rec.iteration % p.max(1) == 0 {
                eprintln!("step {}/{total}  {}", rec.iteration, rec.log_line());
            }
        }
        records.push(rec);
        if state.iteration % every == 0 || state.iteration == total {
            log.flush()?;
            checkpoint = state.save(out_dir)?;
        }
    }
    log.flush()?;
    checkpoint = if state.iteration % every != 0 && state.iteration != total {
        state.save(out_dir)?
    } else {
        checkpoint
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics_log: log_path,
        iteration: state.iteration,
        records,
    })
}

/// Drops log lines past `iteration` (written after the last checkpoint).
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = String::new();
    for line in text.lines() {
        let iter: u64 = line.split('\t').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
        if iter <= iteration {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// Reads a metrics log back into `(iteration, parts, total)` rows.
pub fn read_metrics_log(path: &Path) -> Result<Vec<(u64, LossParts, f64)>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(StepRecord::parse_line)
        .collect()
}

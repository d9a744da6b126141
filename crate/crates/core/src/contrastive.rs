//! InfoNCE with manifold feature augmentations and toy-scale ManifoldCLR.
//!
//! A ManifoldCLR step encodes two views with the backbone, fits the pair with
//! posterior coefficients (manifold loss plus KL to the prior), replaces the
//! anchor by a prior-sampled transport of itself and contrasts it against the
//! second view with the other in-batch second views as negatives. All
//! parameter groups are updated together.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, SynthClassDataset};
use crate::error::{Error, Result};
use crate::inference::{
    best_of_many, kl_laplacian, sample_laplacian, LaplaceSample, LaplacianParams, SoftThresholdSt,
    VariationalConfig,
};
use crate::metrics::{effective_rank, MetricsRecord};
use crate::nn::{encode_posterior, encode_prior, posterior_backward, prior_backward, Head, MlpCache, MlpNet, WarmupSchedule};
use crate::operators::{init_dictionary, InitConfig, OperatorDictionary};
use crate::optim::{OptimConfig, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `‖a − b‖²` on raw (or projected) features.
    Squared,
    /// `‖â − b̂‖²` on unit-normalized features.
    Normalized,
}

/// What replaces the anchor in the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentSource {
    /// `T_Ψ(c̃) z` with `c̃` drawn from the prior.
    Prior,
    /// `T_Ψ(c) z` with `c` from the posterior draw used for the manifold loss.
    Encoder,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub distance: Distance,
    pub use_projection: bool,
    pub augment_source: AugmentSource,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            distance: Distance::Squared,
            use_projection: false,
            augment_source: AugmentSource::Prior,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Features after the optional projection and normalization.
struct Mapped {
    out: Vec<f64>,
    cache: Option<MlpCache>,
    norm: Option<f64>,
}

fn map_forward(x: &[f64], cfg: &ContrastiveConfig, head: Option<&MlpNet>) -> Result<Mapped> {
    let (u, cache) = match (cfg.use_projection, head) {
        (true, Some(h)) => {
            let c = h.forward(x)?;
            (c.output().to_vec(), Some(c))
        }
        (true, None) => return Err(Error::invalid("projection enabled but no projection head given")),
        (false, _) => (x.to_vec(), None),
    };
    if cfg.distance == Distance::Normalized {
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out = if n > 0.0 { u.iter().map(|v| v / n).collect() } else { u };
        return Ok(Mapped { out, cache, norm: Some(n) });
    }
    Ok(Mapped { out: u, cache, norm: None })
}

fn map_backward(m: &Mapped, g: &[f64], head: Option<&MlpNet>, head_grads: Option<&mut [f64]>) -> Result<Vec<f64>> {
    let mut g = g.to_vec();
    if let Some(n) = m.norm {
        if n > 0.0 {
            let dot: f64 = m.out.iter().zip(&g).map(|(y, v)| y * v).sum();
            for (v, y) in g.iter_mut().zip(&m.out) {
                *v = (*v - y * dot) / n;
            }
        } else {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    match (&m.cache, head) {
        (Some(cache), Some(h)) => {
            let mut scratch;
            let grads = match head_grads {
                Some(buf) => buf,
                None => {
                    scratch = vec![0.0; h.n_params()];
                    &mut scratch[..]
                }
            };
            h.backward_into(cache, &g, grads)
        }
        _ => Ok(g),
    }
}

/// Cross-entropy of logits `−D(a, x_k)/τ` at `pos`. Returns the loss,
/// `∂/∂a` and `∂/∂x_k`.
fn nce_core(a: &[f64], cands: &[&[f64]], pos: usize, tau: f64) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let logits: Vec<f64> = cands
        .iter()
        .map(|x| -a.iter().zip(x.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / tau)
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let lse = mx + sum.ln();
    let loss = lse - logits[pos];
    let mut ga = vec![0.0; a.len()];
    let mut gx = Vec::with_capacity(cands.len());
    for (k, x) in cands.iter().enumerate() {
        // ∂loss/∂logit_k = softmax_k − [k = pos]; ∂logit/∂a = −2(a − x)/τ
        let w = (logits[k] - lse).exp() - if k == pos { 1.0 } else { 0.0 };
        let s = -2.0 * w / tau;
        let mut g = vec![0.0; a.len()];
        for d in 0..a.len() {
            let diff = a[d] - x[d];
            ga[d] += s * diff;
            g[d] = -s * diff;
        }
        gx.push(g);
    }
    (loss, ga, gx)
}

/// InfoNCE value and gradients for one anchor.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
    /// Projection-head parameter gradients when a head was used.
    pub grad_head: Option<Vec<f64>>,
}

/// `−log[e^{−D(a,p)/τ} / (Σ_j e^{−D(a,n_j)/τ} + e^{−D(a,p)/τ})]`.
pub fn info_nce(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    cfg: &ContrastiveConfig,
    head: Option<&MlpNet>,
) -> Result<InfoNce> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::invalid("InfoNCE needs at least one negative"));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::invalid("InfoNCE features must share one dimension"));
    }
    let ma = map_forward(anchor, cfg, head)?;
    let mut mapped = vec![map_forward(positive, cfg, head)?];
    for n in negatives {
        mapped.push(map_forward(n, cfg, head)?);
    }
    let cands: Vec<&[f64]> = mapped.iter().map(|m| m.out.as_slice()).collect();
    let (loss, ga, gx) = nce_core(&ma.out, &cands, 0, cfg.temperature);
    let mut hg = if cfg.use_projection { head.map(|h| vec![0.0; h.n_params()]) } else { None };
    let grad_anchor = map_backward(&ma, &ga, head, hg.as_deref_mut())?;
    let mut back = Vec::with_capacity(mapped.len());
    for (m, g) in mapped.iter().zip(&gx) {
        back.push(map_backward(m, g, head, hg.as_deref_mut())?);
    }
    let grad_positive = back.remove(0);
    Ok(InfoNce {
        loss,
        grad_anchor,
        grad_positive,
        grad_negatives: back,
        grad_head: hg,
    })
}

/// Batch InfoNCE: anchor `i` against positive `i`, with every other
/// positive as a negative. Loss is the batch mean.
#[derive(Debug, Clone)]
pub struct BatchInfoNce {
    pub loss: f64,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_head: Option<Vec<f64>>,
}

pub fn batch_info_nce(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    cfg: &ContrastiveConfig,
    head: Option<&MlpNet>,
) -> Result<BatchInfoNce> {
    cfg.validate()?;
    let n = anchors.len();
    if n < 2 || positives.len() != n {
        return Err(Error::invalid("batch InfoNCE needs at least two matched pairs"));
    }
    let ma: Vec<Mapped> = anchors.iter().map(|a| map_forward(a, cfg, head)).collect::<Result<_>>()?;
    let mp: Vec<Mapped> = positives.iter().map(|p| map_forward(p, cfg, head)).collect::<Result<_>>()?;
    let cands: Vec<&[f64]> = mp.iter().map(|m| m.out.as_slice()).collect();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut gma = Vec::with_capacity(n);
    let mut gmp = vec![vec![0.0; cands[0].len()]; n];
    for (i, a) in ma.iter().enumerate() {
        let (l, ga, gx) = nce_core(&a.out, &cands, i, cfg.temperature);
        loss += l * scale;
        gma.push(ga.into_iter().map(|v| v * scale).collect::<Vec<_>>());
        for (acc, g) in gmp.iter_mut().zip(&gx) {
            for (s, v) in acc.iter_mut().zip(g) {
                *s += v * scale;
            }
        }
    }
    let mut hg = if cfg.use_projection { head.map(|h| vec![0.0; h.n_params()]) } else { None };
    let grad_anchors = ma
        .iter()
        .zip(&gma)
        .map(|(m, g)| map_backward(m, g, head, hg.as_deref_mut()))
        .collect::<Result<_>>()?;
    let grad_positives = mp
        .iter()
        .zip(&gmp)
        .map(|(m, g)| map_backward(m, g, head, hg.as_deref_mut()))
        .collect::<Result<_>>()?;
    Ok(BatchInfoNce {
        loss,
        grad_anchors,
        grad_positives,
        grad_head: hg,
    })
}

/// Toy-scale ManifoldCLR settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldClrConfig {
    pub contrastive: ContrastiveConfig,
    pub lambda_manifold: f64,
    /// Posterior sampling for the manifold loss; `beta_kl` weights the KL term.
    pub variational: VariationalConfig,
    /// Stop-gradient on the second view inside the manifold loss.
    pub stop_grad_target: bool,
    /// Prior network `p_θ(c | z)`; when off, the fixed warm-up parameters
    /// `(mu0, b0)` are used throughout.
    pub learned_prior: bool,
    /// Soft-threshold prior samples with the posterior threshold.
    pub threshold_prior_samples: bool,
    /// Block the KL gradient into the prior network.
    pub prior_kl_stop_grad: bool,
    pub warmup: WarmupSchedule,
    pub n_ops: usize,
    pub feature_dim: usize,
    pub block_size: usize,
    pub init: InitConfig,
    pub backbone_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub negative_slope: f64,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
    pub backbone_optim: OptimConfig,
    pub projection_optim: OptimConfig,
    pub dict_optim: OptimConfig,
    pub encoder_optim: OptimConfig,
    pub prior_optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Latent perturbation between the two views of an instance.
    pub view_step_sd: f64,
    /// Held-out effective rank every `eval_every` epochs; `0` disables.
    pub eval_every: usize,
    pub wall_clock: bool,
}

fn adamw(lr: f64, weight_decay: f64, clip_norm: f64) -> OptimConfig {
    OptimConfig {
        kind: OptimizerKind::Adamw,
        lr,
        weight_decay,
        clip_norm,
    }
}

impl Default for ManifoldClrConfig {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveConfig::default(),
            lambda_manifold: 1.0,
            variational: VariationalConfig {
                samples: 1,
                zeta: 0.01,
                use_threshold: false,
                beta_kl: 1.0e-5,
            },
            stop_grad_target: true,
            learned_prior: true,
            threshold_prior_samples: false,
            prior_kl_stop_grad: false,
            warmup: WarmupSchedule {
                total_iters: 200,
                mu0: 0.05,
                b0: 0.01,
            },
            n_ops: 4,
            feature_dim: 8,
            block_size: 4,
            init: InitConfig {
                beta_eig: 1.0,
                ..InitConfig::default()
            },
            backbone_hidden: vec![64, 64],
            encoder_hidden: vec![64, 64],
            prior_hidden: vec![64, 32],
            projection_hidden: vec![32],
            projection_dim: 8,
            negative_slope: 0.01,
            log_scale_min: -6.0,
            log_scale_max: 2.0,
            backbone_optim: adamw(3.0e-3, 1.0e-5, 0.0),
            projection_optim: adamw(3.0e-3, 1.0e-5, 0.0),
            dict_optim: adamw(1.0e-3, 1.0e-3, 1.0),
            encoder_optim: adamw(1.0e-3, 1.0e-5, 1.0),
            prior_optim: adamw(1.0e-3, 1.0e-5, 1.0),
            epochs: 30,
            batch_size: 100,
            view_step_sd: 0.3,
            eval_every: 10,
            wall_clock: true,
        }
    }
}

/// Ablation systems: `S0` full, `S1` no stop-grad, `S2` no Lie group
/// augmentation, `S3` no manifold loss, `S4` fixed prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    S0,
    S1,
    S2,
    S3,
    S4,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::S0, Ablation::S1, Ablation::S2, Ablation::S3, Ablation::S4];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::S0 => "s0",
            Ablation::S1 => "s1",
            Ablation::S2 => "s2",
            Ablation::S3 => "s3",
            Ablation::S4 => "s4",
        }
    }

    /// Switches off this system's component in `cfg`.
    pub fn apply(self, mut cfg: ManifoldClrConfig) -> ManifoldClrConfig {
        match self {
            Ablation::S0 => {}
            Ablation::S1 => cfg.stop_grad_target = false,
            Ablation::S2 => cfg.contrastive.augment_source = AugmentSource::None,
            Ablation::S3 => cfg.lambda_manifold = 0.0,
            Ablation::S4 => cfg.learned_prior = false,
        }
        cfg
    }
}

impl ManifoldClrConfig {
    pub fn ablation(system: Ablation) -> Self {
        system.apply(Self::default())
    }

    /// Same settings with every manifold component switched off: plain
    /// InfoNCE between the two views.
    pub fn simclr(mut self) -> Self {
        self.contrastive.augment_source = AugmentSource::None;
        self.lambda_manifold = 0.0;
        self.variational.beta_kl = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.variational.validate()?;
        if !(self.lambda_manifold >= 0.0) || !(self.variational.beta_kl >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if self.feature_dim == 0 || self.block_size == 0 || self.feature_dim % self.block_size != 0 {
            return Err(Error::invalid("block size must divide the feature dimension"));
        }
        Ok(())
    }

    fn laplacian_head(&self) -> Head {
        Head::Laplacian {
            log_scale_min: self.log_scale_min,
            log_scale_max: self.log_scale_max,
        }
    }

    fn uses_posterior(&self) -> bool {
        self.lambda_manifold > 0.0 || self.variational.beta_kl > 0.0 || self.contrastive.augment_source == AugmentSource::Encoder
    }

    fn uses_prior(&self) -> bool {
        self.variational.beta_kl > 0.0 || self.contrastive.augment_source == AugmentSource::Prior
    }
}

/// All trainable parts of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct ClrModel {
    pub backbone: MlpNet,
    pub projection: Option<MlpNet>,
    pub dict: OperatorDictionary,
    pub encoder: MlpNet,
    pub prior: MlpNet,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl ClrModel {
    pub fn new(input_dim: usize, cfg: &ManifoldClrConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let slope = cfg.negative_slope;
        let d = cfg.feature_dim;
        let backbone = MlpNet::new(&dims(input_dim, &cfg.backbone_hidden, d), slope, Head::Plain, rng)?;
        let projection = if cfg.contrastive.use_projection {
            Some(MlpNet::new(&dims(d, &cfg.projection_hidden, cfg.projection_dim), slope, Head::Plain, rng)?)
        } else {
            None
        };
        let dict = init_dictionary(cfg.n_ops, d, cfg.block_size, &cfg.init, rng)?;
        let encoder = MlpNet::new(&dims(2 * d, &cfg.encoder_hidden, 2 * cfg.n_ops), slope, cfg.laplacian_head(), rng)?;
        let prior = MlpNet::new(&dims(d, &cfg.prior_hidden, 2 * cfg.n_ops), slope, cfg.laplacian_head(), rng)?;
        Ok(Self {
            backbone,
            projection,
            dict,
            encoder,
            prior,
        })
    }

    pub fn features(&self, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        points.iter().map(|x| self.backbone.predict(x)).collect()
    }
}

/// Batch means of the loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClrLosses {
    pub total: f64,
    pub contrastive: f64,
    pub manifold: f64,
    pub kl: f64,
    /// Mean `‖c‖₁` of the posterior coefficients.
    pub l1: f64,
}

struct Optimizers {
    backbone: Optimizer,
    projection: Option<Optimizer>,
    dict: Optimizer,
    encoder: Optimizer,
    prior: Optimizer,
}

/// Model, optimizer state and iteration counter.
pub struct ManifoldClr {
    pub model: ClrModel,
    cfg: ManifoldClrConfig,
    opts: Optimizers,
    iter: usize,
}

enum Augment {
    Identity,
    Transport { coeffs: Vec<f64>, sample: LaplaceSample, scale: Vec<f64> },
}

impl ManifoldClr {
    pub fn new(model: ClrModel, cfg: ManifoldClrConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.contrastive.use_projection != model.projection.is_some() {
            return Err(Error::invalid("projection flag does not match the model"));
        }
        let opts = Optimizers {
            backbone: Optimizer::new(cfg.backbone_optim, model.backbone.n_params()),
            projection: model.projection.as_ref().map(|p| Optimizer::new(cfg.projection_optim, p.n_params())),
            dict: Optimizer::new(cfg.dict_optim, model.dict.params().len()),
            encoder: Optimizer::new(cfg.encoder_optim, model.encoder.n_params()),
            prior: Optimizer::new(cfg.prior_optim, model.prior.n_params()),
        };
        Ok(Self {
            model,
            cfg,
            opts,
            iter: 0,
        })
    }

    pub fn config(&self) -> &ManifoldClrConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    fn prior_params(&self, z: &[f64]) -> Result<(LaplacianParams, Option<crate::nn::PriorEncoding>)> {
        if self.cfg.learned_prior {
            let enc = encode_prior(&self.model.prior, z, &self.cfg.warmup, self.iter)?;
            Ok((enc.params.clone(), Some(enc)))
        } else {
            Ok((self.cfg.warmup.fixed_params(self.cfg.n_ops)?, None))
        }
    }

    /// One optimizer step on a batch of view pairs `(x_i, x'_i)`.
    pub fn step(&mut self, views: &[Vec<f64>], views2: &[Vec<f64>], rng: &mut Rng) -> Result<ClrLosses> {
        let n = views.len();
        if n < 2 || views2.len() != n {
            return Err(Error::invalid("a step needs at least two matched view pairs"));
        }
        let cfg = self.cfg.clone();
        let m = &self.model;
        let lambda = cfg.lambda_manifold;
        let beta = cfg.variational.beta_kl;
        let inv_n = 1.0 / n as f64;
        let c1: Vec<MlpCache> = views.iter().map(|x| m.backbone.forward(x)).collect::<Result<_>>()?;
        let c2: Vec<MlpCache> = views2.iter().map(|x| m.backbone.forward(x)).collect::<Result<_>>()?;
        let z: Vec<Vec<f64>> = c1.iter().map(|c| c.output().to_vec()).collect();
        let zp: Vec<Vec<f64>> = c2.iter().map(|c| c.output().to_vec()).collect();
        let mut gz = vec![vec![0.0; cfg.feature_dim]; n];
        let mut gzp = vec![vec![0.0; cfg.feature_dim]; n];
        let mut g_dict = vec![0.0; m.dict.params().len()];
        let mut g_enc = vec![0.0; m.encoder.n_params()];
        let mut g_prior = vec![0.0; m.prior.n_params()];
        let mut losses = ClrLosses::default();
        let needs_rng = cfg.uses_posterior() || cfg.contrastive.augment_source == AugmentSource::Prior;
        let step_seed: u64 = if needs_rng { rng.gen() } else { 0 };
        let mut augments = Vec::with_capacity(n);
        let mut anchors = Vec::with_capacity(n);
        // Per-pair state needed after the contrastive backward pass.
        let mut posts = Vec::with_capacity(n);
        let mut priors = Vec::with_capacity(n);
        for i in 0..n {
            let mut prng = stream(step_seed, i as u64);
            let mut post = None;
            if cfg.uses_posterior() {
                let (q, cache) = encode_posterior(&m.encoder, &z[i], &zp[i])?;
                let bom = best_of_many(&m.dict, &z[i], &zp[i], &q, &cfg.variational, &mut prng)?;
                let mut g_mu = vec![0.0; cfg.n_ops];
                let mut g_ls = vec![0.0; cfg.n_ops];
                losses.l1 += bom.coeffs.iter().map(|c| c.abs()).sum::<f64>() * inv_n;
                if lambda > 0.0 {
                    let ml = m.dict.manifold_loss(&z[i], &zp[i], &bom.coeffs, cfg.stop_grad_target)?;
                    losses.manifold += ml.loss * inv_n;
                    let w = lambda * inv_n;
                    for (g, v) in g_dict.iter_mut().zip(&ml.grad_dict) {
                        *g += w * v;
                    }
                    for d in 0..cfg.feature_dim {
                        gz[i][d] += w * ml.grad_source[d];
                        gzp[i][d] += w * ml.grad_target[d];
                    }
                    let gc: Vec<f64> = ml.grad_coeffs.iter().map(|v| w * v).collect();
                    let (a, b) = bom.sample.backward(&gc, &q.scale());
                    g_mu = a;
                    g_ls = b;
                }
                post = Some((q, cache, bom, g_mu, g_ls));
            }
            let mut prior = None;
            if cfg.uses_prior() {
                let (p, enc) = self.prior_params(&z[i])?;
                prior = Some((p, enc, vec![0.0; cfg.n_ops], vec![0.0; cfg.n_ops]));
            }
            if beta > 0.0 {
                let (q, _, _, g_mu, g_ls) = post.as_mut().expect("posterior present when beta > 0");
                let (p, _, gp_mu, gp_ls) = prior.as_mut().expect("prior present when beta > 0");
                let kl = kl_laplacian(q, p)?;
                losses.kl += kl.value * inv_n;
                let w = beta * inv_n;
                for k in 0..cfg.n_ops {
                    g_mu[k] += w * kl.grad_q_shift[k];
                    g_ls[k] += w * kl.grad_q_log_scale[k];
                    if !cfg.prior_kl_stop_grad {
                        gp_mu[k] += w * kl.grad_p_shift[k];
                        gp_ls[k] += w * kl.grad_p_log_scale[k];
                    }
                }
            }
            let aug = match cfg.contrastive.augment_source {
                AugmentSource::None => Augment::Identity,
                AugmentSource::Encoder => {
                    let (q, _, bom, _, _) = post.as_ref().expect("posterior present");
                    Augment::Transport {
                        coeffs: bom.coeffs.clone(),
                        sample: bom.sample.clone(),
                        scale: q.scale(),
                    }
                }
                AugmentSource::Prior => {
                    let (p, ..) = prior.as_ref().expect("prior present");
                    let scale = p.scale();
                    let sample = sample_laplacian(&p.shift, &scale, &mut prng);
                    let coeffs = if cfg.threshold_prior_samples {
                        SoftThresholdSt::forward(&sample.values, cfg.variational.zeta).values
                    } else {
                        sample.values.clone()
                    };
                    Augment::Transport { coeffs, sample, scale }
                }
            };
            anchors.push(match &aug {
                Augment::Identity => z[i].clone(),
                Augment::Transport { coeffs, .. } => m.dict.transport(coeffs, &z[i])?,
            });
            augments.push(aug);
            posts.push(post);
            priors.push(prior);
        }
        let head = m.projection.as_ref();
        let nce = batch_info_nce(&anchors, &zp, &cfg.contrastive, head)?;
        losses.contrastive = nce.loss;
        losses.total = losses.contrastive + lambda * losses.manifold + beta * losses.kl;
        if !losses.total.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iter,
                detail: format!(
                    "contrastive = {}, manifold = {}, kl = {}",
                    losses.contrastive, losses.manifold, losses.kl
                ),
            });
        }
        let mut g_bb = vec![0.0; m.backbone.n_params()];
        for i in 0..n {
            match &augments[i] {
                Augment::Identity => {
                    for (g, v) in gz[i].iter_mut().zip(&nce.grad_anchors[i]) {
                        *g += v;
                    }
                }
                Augment::Transport { coeffs, sample, scale } => {
                    let tg = m.dict.transport_backward(coeffs, &z[i], &nce.grad_anchors[i])?;
                    for (g, v) in g_dict.iter_mut().zip(&tg.grad_dict) {
                        *g += v;
                    }
                    for (g, v) in gz[i].iter_mut().zip(&tg.grad_source) {
                        *g += v;
                    }
                    let (a, b) = sample.backward(&tg.grad_coeffs, scale);
                    let target = match cfg.contrastive.augment_source {
                        AugmentSource::Encoder => posts[i].as_mut().map(|(_, _, _, gm, gl)| (gm, gl)),
                        _ => priors[i].as_mut().map(|(_, _, gm, gl)| (gm, gl)),
                    };
                    if let Some((gm, gl)) = target {
                        for k in 0..cfg.n_ops {
                            gm[k] += a[k];
                            gl[k] += b[k];
                        }
                    }
                }
            }
            for (g, v) in gzp[i].iter_mut().zip(&nce.grad_positives[i]) {
                *g += v;
            }
            m.backbone.backward_into(&c1[i], &gz[i], &mut g_bb)?;
            m.backbone.backward_into(&c2[i], &gzp[i], &mut g_bb)?;
            if let Some((_, cache, _, gm, gl)) = &posts[i] {
                posterior_backward(&m.encoder, cache, gm, gl, &mut g_enc)?;
            }
            if let Some((_, Some(enc), gm, gl)) = &priors[i] {
                prior_backward(&m.prior, enc, gm, gl, &mut g_prior)?;
            }
        }
        let dict_active = lambda > 0.0 || cfg.contrastive.augment_source != AugmentSource::None;
        let model = &mut self.model;
        self.opts.backbone.step(model.backbone.params_mut(), &mut g_bb);
        if let (Some(p), Some(opt), Some(mut g)) = (model.projection.as_mut(), self.opts.projection.as_mut(), nce.grad_head) {
            opt.step(p.params_mut(), &mut g);
        }
        if dict_active {
            self.opts.dict.step(model.dict.params_mut(), &mut g_dict);
        }
        if cfg.uses_posterior() {
            self.opts.encoder.step(model.encoder.params_mut(), &mut g_enc);
        }
        if cfg.learned_prior && cfg.uses_prior() {
            self.opts.prior.step(model.prior.params_mut(), &mut g_prior);
        }
        self.iter += 1;
        Ok(losses)
    }
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClrEpoch {
    pub epoch: usize,
    pub losses: ClrLosses,
}

pub struct ClrOutput {
    pub trainer: ManifoldClr,
    pub records: Vec<MetricsRecord>,
    pub epochs: Vec<ClrEpoch>,
}

/// Trains on positive pairs drawn from `data`; effective rank is measured on
/// the backbone features of `heldout`.
pub fn train_manifoldclr(
    data: &SynthClassDataset,
    heldout: Option<&[Vec<f64>]>,
    cfg: &ManifoldClrConfig,
    seed: u64,
) -> Result<ClrOutput> {
    if data.len() < 2 {
        return Err(Error::invalid("need at least two instances"));
    }
    let input = data.points[0].len();
    let model = ClrModel::new(input, cfg, &mut stream(seed, 200))?;
    let mut trainer = ManifoldClr::new(model, cfg.clone())?;
    let mut order_rng = stream(seed, 201);
    let mut view_rng = stream(seed, 202);
    let mut step_rng = stream(seed, 203);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut elapsed = 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = ClrLosses::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let (a, b): (Vec<_>, Vec<_>) = chunk
                .iter()
                .map(|&i| data.positive_pair(i, cfg.view_step_sd, &mut view_rng))
                .unzip();
            let t0 = std::time::Instant::now();
            let l = trainer.step(&a, &b, &mut step_rng).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { iteration: epoch, detail },
                other => other,
            })?;
            if cfg.wall_clock {
                elapsed += t0.elapsed().as_secs_f64();
            }
            sum.total += l.total;
            sum.contrastive += l.contrastive;
            sum.manifold += l.manifold;
            sum.kl += l.kl;
            sum.l1 += l.l1;
            batches += 1;
        }
        let k = 1.0 / batches as f64;
        let mean = ClrLosses {
            total: sum.total * k,
            contrastive: sum.contrastive * k,
            manifold: sum.manifold * k,
            kl: sum.kl * k,
            l1: sum.l1 * k,
        };
        let evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let effective_rank = match (heldout, evaluate) {
            (Some(h), true) => Some(effective_rank(&trainer.model.features(h)?)?),
            _ => None,
        };
        records.push(MetricsRecord {
            epoch,
            mse: mean.manifold,
            l1: mean.l1,
            kl: mean.kl,
            di_mean: None,
            runtime_s: elapsed,
            effective_rank,
            op_fro: trainer.model.dict.operator_norms(),
        });
        epochs.push(ClrEpoch { epoch, losses: mean });
    }
    Ok(ClrOutput {
        trainer,
        records,
        epochs,
    })
}

/// Linear readout settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate decays exponentially from `lr_start` to `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    /// Fraction of each class held out for evaluation.
    pub test_fraction: f64,
    /// Standardize features with training-set statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            lr_start: 1.0e-2,
            lr_end: 1.0e-5,
            test_fraction: 0.3,
            standardize: true,
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Trains a softmax-regression readout on `train` and returns accuracy on `test`.
pub fn linear_probe_split(
    train: (&[Vec<f64>], &[usize]),
    test: (&[Vec<f64>], &[usize]),
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let (xs, ys) = train;
    let (xt, yt) = test;
    if xs.is_empty() || xs.len() != ys.len() || xt.len() != yt.len() || xt.is_empty() {
        return Err(Error::invalid("probe needs non-empty, matched features and labels"));
    }
    let k = ys.iter().chain(yt).copied().max().unwrap_or(0) + 1;
    let mut seen = vec![false; k];
    ys.iter().for_each(|&y| seen[y] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::invalid("probe labels contain a single class"));
    }
    let d = xs[0].len();
    let (mean, sd) = if cfg.standardize {
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| {
                let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        (mean, sd)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let prep = |x: &[f64]| -> Vec<f64> { x.iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect() };
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| prep(x)).collect();
    // weights k × (d + 1), bias last
    let width = d + 1;
    let mut w = vec![0.0; k * width];
    let mut opt = Optimizer::new(adamw(cfg.lr_start, 0.0, 0.0), w.len());
    let mut rng = stream(seed, 300);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let decay = if cfg.epochs > 1 {
        (cfg.lr_end / cfg.lr_start).powf(1.0 / (cfg.epochs - 1) as f64)
    } else {
        1.0
    };
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| {
                let row = &w[c * width..(c + 1) * width];
                row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    };
    for epoch in 0..cfg.epochs {
        opt.set_lr_factor(decay.powi(epoch as i32));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = vec![0.0; w.len()];
            let s = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mut p = logits(&w, &xs[i]);
                softmax_in_place(&mut p);
                p[ys[i]] -= 1.0;
                for c in 0..k {
                    let row = &mut g[c * width..(c + 1) * width];
                    for j in 0..d {
                        row[j] += s * p[c] * xs[i][j];
                    }
                    row[d] += s * p[c];
                }
            }
            opt.step(&mut w, &mut g);
        }
    }
    let correct = xt
        .iter()
        .zip(yt)
        .filter(|(x, &y)| {
            let l = logits(&w, &prep(x));
            let best = (0..k).fold(0, |b, c| if l[c] > l[b] { c } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / xt.len() as f64)
}

/// Stratified train/test split of `features`, then [`linear_probe_split`].
pub fn linear_probe(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let mut rng = stream(derive_seed(seed, &[301]), 0);
    let (tr, te) = stratified_split(labels, cfg.test_fraction, &mut rng);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| features[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (xa, ya) = pick(&tr);
    let (xb, yb) = pick(&te);
    linear_probe_split((&xa, &ya), (&xb, &yb), cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_sq(t: f64) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: t,
            ..Default::default()
        }
    }

    #[test]
    fn equal_distances_give_log_two() {
        let r = info_nce(&[0.0, 0.0], &[1.0, 0.0], &[vec![0.0, -1.0]], &cfg_sq(0.7), None).unwrap();
        assert!((r.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn far_negatives_give_zero_loss() {
        let r = info_nce(&[1.0, 2.0], &[1.0, 2.0], &[vec![1e3, 0.0]], &cfg_sq(1.0), None).unwrap();
        assert!(r.loss.abs() < 1e-12);
    }

    #[test]
    fn empty_negatives_rejected() {
        assert!(info_nce(&[0.0], &[0.0], &[], &cfg_sq(1.0), None).is_err());
    }

    #[test]
    fn simclr_preset_disables_manifold_parts() {
        let c = ManifoldClrConfig::default().simclr();
        assert!(!c.uses_posterior() && !c.uses_prior());
        assert_eq!(ManifoldClrConfig::ablation(Ablation::S3).lambda_manifold, 0.0);
    }

    #[test]
    fn probe_rejects_single_class() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = vec![0, 0];
        assert!(linear_probe_split((&x, &y), (&x, &y), &ProbeConfig::default(), 1).is_err());
    }
}

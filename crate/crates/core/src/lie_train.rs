//! Alternating minimization for operator dictionaries on point-pair data:
//! infer coefficients with the operators fixed, then take one gradient step on
//! the operators (and on the coefficient encoder for variational inference)
//! with the coefficients fixed.

use serde::{Deserialize, Serialize};

use crate::data::PointPairBatch;
use crate::error::{Error, Result};
use crate::inference::{
    best_of_many, fista_infer, kl_laplacian, FistaConfig, LaplacianParams, VariationalConfig,
};
use crate::metrics::MetricsRecord;
use crate::nn::{encode_posterior, posterior_backward, Head, MlpCache, MlpNet};
use crate::operators::OperatorDictionary;
use crate::optim::{LrSchedule, OptimConfig, Optimizer, OptimizerKind};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceKind {
    Fista,
    Variational,
}

/// Coefficient-encoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub negative_slope: f64,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
    /// When set, output biases start at `(0, init_log_scale)` and the output
    /// weights are shrunk by `init_weight_scale`, so the initial posterior
    /// is close to a narrow Laplacian at zero.
    pub init_log_scale: Option<f64>,
    pub init_weight_scale: f64,
    /// Features are multiplied by this factor before entering the encoder.
    pub input_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 32],
            negative_slope: 0.01,
            log_scale_min: -6.0,
            log_scale_max: 2.0,
            init_log_scale: Some(-4.6),
            init_weight_scale: 0.1,
            input_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn head(&self) -> Head {
        Head::Laplacian {
            log_scale_min: self.log_scale_min,
            log_scale_max: self.log_scale_max,
        }
    }

    /// Network `input → hidden… → 2·n_ops` with a Laplacian head.
    pub fn build(&self, input: usize, n_ops: usize, rng: &mut Rng) -> Result<MlpNet> {
        let mut dims = vec![input];
        dims.extend_from_slice(&self.hidden);
        dims.push(2 * n_ops);
        let mut net = MlpNet::new(&dims, self.negative_slope, self.head(), rng)?;
        if let Some(ls) = self.init_log_scale {
            net.init_laplacian_head(0.0, ls, self.init_weight_scale)?;
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LieTrainConfig {
    pub epochs: usize,
    /// Weight of `Σ_m ‖Ψ_m‖²_F` in the operator objective.
    pub fro_weight: f64,
    pub dict_optim: OptimConfig,
    pub fista: FistaConfig,
    pub variational: VariationalConfig,
    pub encoder: EncoderConfig,
    pub encoder_optim: OptimConfig,
    /// Applied to both the operator and encoder learning rates over `epochs`.
    pub lr_schedule: LrSchedule,
    /// Fixed prior `Laplace(prior_shift, prior_scale)` for the KL term.
    pub prior_shift: f64,
    pub prior_scale: f64,
    /// Held-out distance improvement is evaluated every `eval_every` epochs
    /// (and at the last epoch); `0` disables it.
    pub eval_every: usize,
    /// Record wall-clock runtime; when off, `runtime_s` is reported as 0.
    pub wall_clock: bool,
}

impl Default for LieTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            fro_weight: 1.0e-3,
            dict_optim: OptimConfig {
                kind: OptimizerKind::Adamw,
                lr: 1.0e-3,
                weight_decay: 1.0e-3,
                clip_norm: 10.0,
            },
            fista: FistaConfig::default(),
            variational: VariationalConfig::default(),
            encoder: EncoderConfig::default(),
            encoder_optim: OptimConfig {
                kind: OptimizerKind::Adamw,
                lr: 1.0e-2,
                weight_decay: 1.0e-5,
                clip_norm: 10.0,
            },
            lr_schedule: LrSchedule::Cosine { min_factor: 0.01 },
            prior_shift: 0.0,
            prior_scale: 0.01,
            eval_every: 50,
            wall_clock: true,
        }
    }
}

/// Per-step batch averages.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub mse: f64,
    pub l1: f64,
    pub kl: f64,
}

pub struct LieTrainer {
    pub dict: OperatorDictionary,
    pub encoder: Option<MlpNet>,
    kind: InferenceKind,
    cfg: LieTrainConfig,
    prior: LaplacianParams,
    dict_opt: Optimizer,
    enc_opt: Option<Optimizer>,
}

impl LieTrainer {
    pub fn new(dict: OperatorDictionary, kind: InferenceKind, cfg: LieTrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.variational.validate()?;
        let prior = LaplacianParams::constant(dict.n_ops(), cfg.prior_shift, cfg.prior_scale)?;
        let (encoder, enc_opt) = match kind {
            InferenceKind::Fista => (None, None),
            InferenceKind::Variational => {
                let net = cfg.encoder.build(2 * dict.dim(), dict.n_ops(), rng)?;
                let opt = Optimizer::new(cfg.encoder_optim, net.n_params());
                (Some(net), Some(opt))
            }
        };
        let dict_opt = Optimizer::new(cfg.dict_optim, dict.params().len());
        Ok(Self {
            dict,
            encoder,
            kind,
            cfg,
            prior,
            dict_opt,
            enc_opt,
        })
    }

    pub fn kind(&self) -> InferenceKind {
        self.kind
    }

    pub fn config(&self) -> &LieTrainConfig {
        &self.cfg
    }

    fn encode(&self, enc: &MlpNet, source: &[f64], target: &[f64]) -> Result<(LaplacianParams, MlpCache)> {
        let k = self.cfg.encoder.input_scale;
        if k == 1.0 {
            return encode_posterior(enc, source, target);
        }
        let scale = |v: &[f64]| v.iter().map(|x| x * k).collect::<Vec<_>>();
        encode_posterior(enc, &scale(source), &scale(target))
    }

    /// Coefficients for one pair under the current model.
    pub fn infer(&self, source: &[f64], target: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        match &self.encoder {
            None => Ok(fista_infer(&self.dict, source, target, &self.cfg.fista)?.coeffs),
            Some(enc) => {
                let (q, _) = self.encode(enc, source, target)?;
                Ok(best_of_many(&self.dict, source, target, &q, &self.cfg.variational, rng)?.coeffs)
            }
        }
    }

    /// One inference pass plus one parameter update on `batch`.
    /// Scales both learning rates, e.g. from a schedule.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.dict_opt.set_lr_factor(factor);
        if let Some(opt) = self.enc_opt.as_mut() {
            opt.set_lr_factor(factor);
        }
    }

    pub fn step(&mut self, batch: &PointPairBatch, rng: &mut Rng) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::invalid("empty pair batch"));
        }
        let n = batch.len() as f64;
        let mut stats = StepStats::default();
        let mut g_dict = vec![0.0; self.dict.params().len()];
        let mut g_enc = self.encoder.as_ref().map(|e| vec![0.0; e.n_params()]);
        let beta = self.cfg.variational.beta_kl;
        for (src, tgt) in batch.sources.iter().zip(&batch.targets) {
            let (coeffs, enc_state) = match &self.encoder {
                None => (fista_infer(&self.dict, src, tgt, &self.cfg.fista)?.coeffs, None),
                Some(enc) => {
                    let (q, cache) = self.encode(enc, src, tgt)?;
                    let bom = best_of_many(&self.dict, src, tgt, &q, &self.cfg.variational, rng)?;
                    (bom.coeffs.clone(), Some((q, cache, bom)))
                }
            };
            let ml = self.dict.manifold_loss(src, tgt, &coeffs, true)?;
            stats.mse += ml.loss;
            stats.l1 += coeffs.iter().map(|c| c.abs()).sum::<f64>();
            for (g, v) in g_dict.iter_mut().zip(&ml.grad_dict) {
                *g += v;
            }
            if let (Some((q, cache, bom)), Some(enc), Some(ge)) = (enc_state, &self.encoder, g_enc.as_mut()) {
                let (mut g_mu, mut g_ls) = bom.sample.backward(&ml.grad_coeffs, &q.scale());
                let kl = kl_laplacian(&q, &self.prior)?;
                stats.kl += kl.value;
                for i in 0..q.len() {
                    g_mu[i] += beta * kl.grad_q_shift[i];
                    g_ls[i] += beta * kl.grad_q_log_scale[i];
                }
                posterior_backward(enc, &cache, &g_mu, &g_ls, ge)?;
            }
        }
        stats.mse /= n;
        stats.l1 /= n;
        stats.kl /= n;
        if !(stats.mse.is_finite() && stats.kl.is_finite()) {
            return Err(Error::Divergence {
                iteration: 0,
                detail: format!("mse = {}, kl = {}", stats.mse, stats.kl),
            });
        }
        let fro = self.dict.frobenius_penalty_grad();
        for (g, f) in g_dict.iter_mut().zip(&fro) {
            *g = *g / n + self.cfg.fro_weight * f;
        }
        self.dict_opt.step(self.dict.params_mut(), &mut g_dict);
        if let (Some(enc), Some(opt), Some(mut ge)) = (self.encoder.as_mut(), self.enc_opt.as_mut(), g_enc) {
            ge.iter_mut().for_each(|g| *g /= n);
            opt.step(enc.params_mut(), &mut ge);
        }
        if self.dict.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: 0,
                detail: "operator entries became non-finite".into(),
            });
        }
        Ok(stats)
    }

    /// Mean distance improvement over `pairs`, skipping coincident pairs.
    pub fn mean_distance_improvement(&self, pairs: &PointPairBatch, rng: &mut Rng) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (src, tgt) in pairs.sources.iter().zip(&pairs.targets) {
            if src == tgt {
                continue;
            }
            let c = self.infer(src, tgt, rng)?;
            sum += self.dict.distance_improvement(src, tgt, &c)?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::UndefinedRatio("no distinct held-out pairs".into()));
        }
        Ok(sum / count as f64)
    }
}

pub struct LieTrainOutput {
    pub trainer: LieTrainer,
    pub records: Vec<MetricsRecord>,
}

/// Runs `cfg.epochs` alternating-minimization steps. `next_batch(epoch)`
/// supplies the pairs for each epoch; pair generation is not timed.
pub fn train_lie_operators<F>(
    dict: OperatorDictionary,
    kind: InferenceKind,
    cfg: &LieTrainConfig,
    seed: u64,
    mut next_batch: F,
    heldout: Option<&PointPairBatch>,
) -> Result<LieTrainOutput>
where
    F: FnMut(usize) -> Result<PointPairBatch>,
{
    let mut init_rng = stream(seed, 100);
    let mut trainer = LieTrainer::new(dict, kind, cfg.clone(), &mut init_rng)?;
    let mut step_rng = stream(seed, 101);
    let mut eval_rng = stream(seed, 102);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut elapsed = 0.0;
    for epoch in 1..=cfg.epochs {
        trainer.set_lr_factor(cfg.lr_schedule.factor(epoch - 1, cfg.epochs));
        let batch = next_batch(epoch)?;
        let stats = if cfg.wall_clock {
            let t0 = std::time::Instant::now();
            let s = trainer.step(&batch, &mut step_rng);
            elapsed += t0.elapsed().as_secs_f64();
            s
        } else {
            trainer.step(&batch, &mut step_rng)
        }
        .map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence {
                iteration: epoch,
                detail,
            },
            other => other,
        })?;
        let evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let di_mean = match (heldout, evaluate) {
            (Some(h), true) => Some(trainer.mean_distance_improvement(h, &mut eval_rng)?),
            _ => None,
        };
        records.push(MetricsRecord {
            epoch,
            mse: stats.mse,
            l1: stats.l1,
            kl: stats.kl,
            di_mean,
            runtime_s: elapsed,
            effective_rank: None,
            op_fro: trainer.dict.operator_norms(),
        });
    }
    Ok(LieTrainOutput { trainer, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation_pairs(n: usize, angle: f64) -> PointPairBatch {
        let mut rng = stream(0, 0);
        use rand::Rng as _;
        let sources: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let targets = sources
            .iter()
            .map(|s| vec![angle.cos() * s[0] - angle.sin() * s[1], angle.sin() * s[0] + angle.cos() * s[1]])
            .collect();
        PointPairBatch::new(sources, targets).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_dictionary() {
        let dict = OperatorDictionary::from_params(2, 2, 2, vec![0.1, -0.9, 1.1, 0.0, 0.3, 0.2, -0.1, 0.4]).unwrap();
        let mut cfg = LieTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        cfg.dict_optim.lr = 0.0;
        cfg.fista.max_iters = 20;
        for kind in [InferenceKind::Fista, InferenceKind::Variational] {
            let out = train_lie_operators(dict.clone(), kind, &cfg, 1, |_| Ok(rotation_pairs(8, 0.3)), None).unwrap();
            assert_eq!(out.trainer.dict, dict);
            assert_eq!(out.records.len(), 3);
        }
    }

    #[test]
    fn fista_training_reduces_loss_on_rotations() {
        let dict = OperatorDictionary::from_params(1, 2, 2, vec![0.05, -0.3, 0.2, 0.0]).unwrap();
        let mut cfg = LieTrainConfig {
            epochs: 60,
            eval_every: 20,
            wall_clock: false,
            ..Default::default()
        };
        cfg.dict_optim.lr = 0.05;
        cfg.fista.l1_weight = 0.01;
        let held = rotation_pairs(10, 0.4);
        let out = train_lie_operators(dict, InferenceKind::Fista, &cfg, 2, |_| Ok(rotation_pairs(16, 0.4)), Some(&held)).unwrap();
        let first = out.records.first().unwrap().mse;
        let last = out.records.last().unwrap();
        assert!(last.mse < 0.1 * first, "{first} -> {}", last.mse);
        assert!(last.di_mean.unwrap() < 0.1);
        assert!(out.records.iter().all(|r| r.runtime_s == 0.0));
        assert!(out.records[0].di_mean.is_none() && out.records[19].di_mean.is_some());
    }
}

//! Semi-supervised consistency training on frozen features.
//!
//! A single-hidden-layer classifier is trained with cross-entropy on a few
//! labeled features plus pseudo-label consistency on unlabeled features:
//! confident EMA-classifier predictions on clean features become targets for
//! the live classifier on augmented features.

use std::thread;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{sample_laplacian, LaplacianParams, SoftThresholdSt};
use crate::nn::{encode_prior, EmaState, Head, MlpNet, WarmupSchedule};
use crate::operators::OperatorDictionary;
use crate::optim::{OptimConfig, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemiMethod {
    /// Labeled cross-entropy only.
    Supervised,
    /// Pseudo-labels on un-augmented features.
    PseudoLabel,
    /// Pseudo-labels on `λz + (1 − λ)z₂`, `λ ~ U(0, 1)`, where `z₂` is a
    /// batch feature sharing the pseudo-label.
    Mixup,
    /// Pseudo-labels on `T_Ψ(c̃) z`, `c̃ ~ p_θ(c | z)`.
    Vlgo,
}

impl SemiMethod {
    pub const ALL: [SemiMethod; 4] = [SemiMethod::Supervised, SemiMethod::PseudoLabel, SemiMethod::Mixup, SemiMethod::Vlgo];

    pub fn name(self) -> &'static str {
        match self {
            SemiMethod::Supervised => "supervised",
            SemiMethod::PseudoLabel => "pseudo_label",
            SemiMethod::Mixup => "mixup",
            SemiMethod::Vlgo => "vlgo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiSupConfig {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Confidence threshold on the max class probability; values above 1
    /// disable the consistency term.
    pub confidence: f64,
    pub iterations: usize,
    pub ema_decay: f64,
    pub hidden: usize,
    pub negative_slope: f64,
    pub optim: OptimConfig,
    /// Produce pseudo-labels with the EMA classifier (otherwise the live one).
    pub pseudo_from_ema: bool,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            labeled_batch: 32,
            unlabeled_batch: 480,
            confidence: 0.95,
            iterations: 3000,
            ema_decay: 0.999,
            hidden: 64,
            negative_slope: 0.01,
            optim: OptimConfig {
                kind: OptimizerKind::Adamw,
                lr: 1.0e-3,
                weight_decay: 5.0e-4,
                clip_norm: 0.0,
            },
            pseudo_from_ema: true,
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::invalid("batch sizes must be at least 1"));
        }
        if !(self.confidence > 0.0) {
            return Err(Error::invalid("confidence threshold must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Frozen Lie group augmentation: operators plus a prior over coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LieAugmenter {
    pub dict: OperatorDictionary,
    /// Learned prior network; `None` uses `fixed` throughout.
    pub prior: Option<MlpNet>,
    pub fixed: WarmupSchedule,
    /// Soft threshold applied to prior draws.
    pub zeta: Option<f64>,
}

impl LieAugmenter {
    pub fn prior_params(&self, z: &[f64]) -> Result<LaplacianParams> {
        match &self.prior {
            Some(net) => Ok(encode_prior(net, z, &self.fixed, usize::MAX)?.params),
            None => self.fixed.fixed_params(self.dict.n_ops()),
        }
    }

    pub fn augment(&self, z: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let p = self.prior_params(z)?;
        let s = sample_laplacian(&p.shift, &p.scale(), rng);
        let c = match self.zeta {
            Some(zeta) => SoftThresholdSt::forward(&s.values, zeta).values,
            None => s.values,
        };
        self.dict.transport(&c, z)
    }
}

/// Augmentation applied to confident unlabeled features.
#[derive(Debug, Clone, Copy)]
pub enum Augmentation<'a> {
    None,
    Mixup,
    Lie(&'a LieAugmenter),
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, k| if v[k] > v[b] { k } else { b })
}

/// Adds `w·∂H(r(x), y)/∂θ` to `grads` and returns `H`.
fn cross_entropy_into(net: &MlpNet, x: &[f64], y: usize, w: f64, grads: &mut [f64]) -> Result<f64> {
    let cache = net.forward(x)?;
    let mut p = softmax(cache.output());
    let loss = -p[y].max(f64::MIN_POSITIVE).ln();
    p[y] -= 1.0;
    p.iter_mut().for_each(|v| *v *= w);
    net.backward_into(&cache, &p, grads)?;
    Ok(loss)
}

/// Loss value, classifier gradient and the number of confident unlabeled points.
#[derive(Debug, Clone)]
pub struct SemiLoss {
    pub loss: f64,
    pub supervised: f64,
    pub consistency: f64,
    pub grads: Vec<f64>,
    pub n_confident: usize,
}

/// `1/B^l Σ H(q^l, y^l) + 1/N^u Σ 1[max q^u ≥ τ] H(r(z̃^u), ŷ^u)`.
/// Pseudo-labels come from `teacher` on clean features and carry no gradient.
pub fn semisup_loss(
    net: &MlpNet,
    teacher: &MlpNet,
    labeled: (&[&[f64]], &[usize]),
    unlabeled: &[&[f64]],
    aug: Augmentation<'_>,
    confidence: f64,
    rng: &mut Rng,
) -> Result<SemiLoss> {
    let (zl, yl) = labeled;
    if zl.is_empty() || zl.len() != yl.len() {
        return Err(Error::invalid("labeled batch must be non-empty with one label per feature"));
    }
    let k = net.output_dim();
    if let Some(&y) = yl.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
    }
    let mut grads = vec![0.0; net.n_params()];
    let wl = 1.0 / zl.len() as f64;
    let mut supervised = 0.0;
    for (x, &y) in zl.iter().zip(yl) {
        supervised += wl * cross_entropy_into(net, x, y, wl, &mut grads)?;
    }
    let mut confident = Vec::new();
    for (i, x) in unlabeled.iter().enumerate() {
        let q = softmax(&teacher.predict(x)?);
        let y = argmax(&q);
        if q[y] >= confidence {
            confident.push((i, y));
        }
    }
    let mut consistency = 0.0;
    if !confident.is_empty() {
        let wu = 1.0 / confident.len() as f64;
        for &(i, y) in &confident {
            let z = unlabeled[i];
            let zt = match aug {
                Augmentation::None => z.to_vec(),
                Augmentation::Mixup => {
                    let same: Vec<usize> = confident.iter().filter(|c| c.1 == y && c.0 != i).map(|c| c.0).collect();
                    let lam: f64 = rng.gen();
                    match same.choose(rng) {
                        Some(&j) => z.iter().zip(unlabeled[j]).map(|(a, b)| lam * a + (1.0 - lam) * b).collect(),
                        None => z.to_vec(),
                    }
                }
                Augmentation::Lie(a) => a.augment(z, rng)?,
            };
            consistency += wu * cross_entropy_into(net, &zt, y, wu, &mut grads)?;
        }
    }
    Ok(SemiLoss {
        loss: supervised + consistency,
        supervised,
        consistency,
        grads,
        n_confident: confident.len(),
    })
}

/// Labeled indices grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub per_class: Vec<Vec<usize>>,
}

impl LabelSplit {
    /// `per_class` random indices of every class.
    pub fn random(labels: &[usize], per_class: usize, seed: u64) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut rng = stream(seed, 400);
        let mut out = Vec::with_capacity(k);
        for c in 0..k {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.len() < per_class {
                return Err(Error::invalid(format!("class {c} has fewer than {per_class} examples")));
            }
            idx.shuffle(&mut rng);
            idx.truncate(per_class);
            idx.sort_unstable();
            out.push(idx);
        }
        Ok(Self { per_class: out })
    }

    pub fn indices(&self) -> Vec<(usize, usize)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
            .collect()
    }
}

/// Frozen features for one semi-supervised problem.
#[derive(Debug, Clone, Copy)]
pub struct SemiData<'a> {
    pub train: &'a [Vec<f64>],
    pub train_labels: &'a [usize],
    pub test: &'a [Vec<f64>],
    pub test_labels: &'a [usize],
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiIter {
    pub iteration: usize,
    pub loss: f64,
    pub n_confident: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub accuracy: f64,
    pub history: Vec<SemiIter>,
}

pub fn accuracy(net: &MlpNet, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::invalid("no evaluation features"));
    }
    let mut correct = 0usize;
    for (v, &t) in x.iter().zip(y) {
        if argmax(&net.predict(v)?) == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / x.len() as f64)
}

/// Trains a single-hidden-layer classifier and returns the EMA classifier's
/// test accuracy. Initialization and labeled batches depend only on `seed`,
/// so methods are paired within a split.
pub fn run_semisup_trial(
    data: SemiData<'_>,
    split: &LabelSplit,
    method: SemiMethod,
    aug: Option<&LieAugmenter>,
    cfg: &SemiSupConfig,
    seed: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    if split.per_class.len() != data.n_classes || split.per_class.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("split must label at least one example of every class"));
    }
    let labeled = split.indices();
    if labeled.iter().any(|&(i, c)| i >= data.train.len() || data.train_labels[i] != c) {
        return Err(Error::invalid("split indices do not match the training labels"));
    }
    let augmentation = match method {
        SemiMethod::Supervised | SemiMethod::PseudoLabel => Augmentation::None,
        SemiMethod::Mixup => Augmentation::Mixup,
        SemiMethod::Vlgo => Augmentation::Lie(aug.ok_or_else(|| Error::invalid("VLGO trial needs a Lie augmenter"))?),
    };
    let d = data.train[0].len();
    let mut net = MlpNet::new(
        &[d, cfg.hidden, data.n_classes],
        cfg.negative_slope,
        Head::Plain,
        &mut stream(seed, 410),
    )?;
    let mut ema = EmaState::new(&net, cfg.ema_decay)?;
    let mut opt = Optimizer::new(cfg.optim, net.n_params());
    let mut lab_rng = stream(seed, 411);
    let mut unl_rng = stream(seed, 412);
    let mut aug_rng = stream(seed, 413);
    let mut history = Vec::with_capacity(cfg.iterations);
    let threshold = if method == SemiMethod::Supervised { f64::INFINITY } else { cfg.confidence };
    for it in 0..cfg.iterations {
        let lb: Vec<(usize, usize)> = (0..cfg.labeled_batch)
            .map(|_| labeled[lab_rng.gen_range(0..labeled.len())])
            .collect();
        let zl: Vec<&[f64]> = lb.iter().map(|&(i, _)| data.train[i].as_slice()).collect();
        let yl: Vec<usize> = lb.iter().map(|&(_, c)| c).collect();
        let zu: Vec<&[f64]> = if threshold.is_finite() {
            (0..cfg.unlabeled_batch)
                .map(|_| data.train[unl_rng.gen_range(0..data.train.len())].as_slice())
                .collect()
        } else {
            Vec::new()
        };
        let teacher = if cfg.pseudo_from_ema { ema.network().clone() } else { net.clone() };
        let mut l = semisup_loss(&net, &teacher, (&zl, &yl), &zu, augmentation, threshold, &mut aug_rng)?;
        if !l.loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("supervised = {}, consistency = {}", l.supervised, l.consistency),
            });
        }
        opt.step(net.params_mut(), &mut l.grads);
        ema.update(&net)?;
        history.push(SemiIter {
            iteration: it + 1,
            loss: l.loss,
            n_confident: l.n_confident,
        });
    }
    Ok(TrialResult {
        accuracy: accuracy(ema.network(), data.test, data.test_labels)?,
        history,
    })
}

/// One row of the per-split results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub method: SemiMethod,
    pub accuracy: f64,
    /// Relative accuracy change over the supervised baseline of the same split, in percent.
    pub improvement_pct: f64,
}

/// Runs every method on `n_splits` random splits using `workers` threads.
/// Results are ordered by split then method and do not depend on `workers`.
pub fn run_paired_splits(
    data: SemiData<'_>,
    labels_per_class: usize,
    n_splits: usize,
    methods: &[SemiMethod],
    aug: Option<&LieAugmenter>,
    cfg: &SemiSupConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<SplitResult>> {
    let run_split = |s: usize| -> Result<Vec<SplitResult>> {
        let split_seed = derive_seed(seed, &[s as u64]);
        let split = LabelSplit::random(data.train_labels, labels_per_class, split_seed)?;
        let trial_seed = derive_seed(split_seed, &[1]);
        let mut accs = Vec::with_capacity(methods.len());
        for &m in methods {
            accs.push((m, run_semisup_trial(data, &split, m, aug, cfg, trial_seed)?.accuracy));
        }
        let base = match accs.iter().find(|(m, _)| *m == SemiMethod::Supervised) {
            Some(&(_, a)) => a,
            None => run_semisup_trial(data, &split, SemiMethod::Supervised, None, cfg, trial_seed)?.accuracy,
        };
        Ok(accs
            .into_iter()
            .map(|(method, accuracy)| SplitResult {
                split_id: s,
                method,
                accuracy,
                improvement_pct: if base > 0.0 { 100.0 * (accuracy - base) / base } else { f64::NAN },
            })
            .collect())
    };
    let workers = workers.clamp(1, n_splits.max(1));
    let mut slots: Vec<Option<Result<Vec<SplitResult>>>> = (0..n_splits).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run_split = &run_split;
                scope.spawn(move || (w..n_splits).step_by(workers).map(|s| (s, run_split(s))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (s, r) in h.join().expect("split worker panicked") {
                slots[s] = Some(r);
            }
        }
    });
    let mut out = Vec::new();
    for r in slots.into_iter().flatten() {
        out.extend(r?);
    }
    Ok(out)
}

/// `split_id,method,accuracy,improvement_pct` rows.
pub fn split_results_csv(rows: &[SplitResult]) -> String {
    let mut s = String::from("split_id,method,accuracy,improvement_pct\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.split_id, r.method.name(), r.accuracy, r.improvement_pct));
    }
    s
}

/// Mean and standard error of the improvement of `method` over the baseline.
pub fn improvement_summary(rows: &[SplitResult], method: SemiMethod) -> Option<(f64, f64)> {
    let v: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.improvement_pct).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let se = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Some((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = SemiSupConfig::default();
        assert_eq!((c.labeled_batch, c.unlabeled_batch), (32, 480));
        assert_eq!(c.confidence, 0.95);
        assert_eq!(c.ema_decay, 0.999);
    }

    #[test]
    fn no_confident_points_leaves_supervised_term() {
        let mut rng = stream(1, 0);
        let net = MlpNet::new(&[2, 4, 3], 0.01, Head::Plain, &mut rng).unwrap();
        let zl: Vec<&[f64]> = vec![&[0.1, 0.2]];
        let zu: Vec<&[f64]> = vec![&[1.0, -1.0], &[0.3, 0.0]];
        let with_u = semisup_loss(&net, &net, (&zl, &[1]), &zu, Augmentation::None, 1.5, &mut rng).unwrap();
        let without = semisup_loss(&net, &net, (&zl, &[1]), &[], Augmentation::None, 1.5, &mut rng).unwrap();
        assert_eq!(with_u.n_confident, 0);
        assert_eq!(with_u.loss, without.loss);
        assert_eq!(with_u.grads, without.grads);
    }

    #[test]
    fn split_has_requested_size() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = LabelSplit::random(&labels, 4, 9).unwrap();
        assert!(s.per_class.iter().enumerate().all(|(c, v)| v.len() == 4 && v.iter().all(|&i| labels[i] == c)));
        assert!(LabelSplit::random(&labels, 11, 9).is_err());
    }
}

//! Coefficient inference for operator dictionaries.
//!
//! Two routes are provided: exact ℓ1-regularized inference with FISTA, used as
//! the baseline, and amortized variational inference that draws reparameterized
//! Laplacian samples (optionally soft-thresholded, straight-through) and keeps
//! the best of `J` draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::OperatorDictionary;

/// Default clamp interval for encoded log-scales.
pub const DEFAULT_LOG_SCALE_RANGE: (f64, f64) = (-6.0, 2.0);

/// Per-coefficient Laplacian shift and log-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplacianParams {
    pub shift: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl LaplacianParams {
    pub fn new(shift: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if shift.len() != log_scale.len() {
            return Err(Error::invalid("shift and log_scale lengths differ"));
        }
        Ok(Self { shift, log_scale })
    }

    /// Same shift and scale on every component.
    pub fn constant(len: usize, shift: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("Laplacian scale must be positive, got {scale}")));
        }
        Ok(Self {
            shift: vec![shift; len],
            log_scale: vec![scale.ln(); len],
        })
    }

    pub fn len(&self) -> usize {
        self.shift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|l| l.exp()).collect()
    }

    pub fn clamp_log_scale(&mut self, lo: f64, hi: f64) {
        for l in &mut self.log_scale {
            *l = l.clamp(lo, hi);
        }
    }

    /// Reparameterized draw; see [`sample_laplacian`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LaplaceSample {
        sample_laplacian(&self.shift, &self.scale(), rng)
    }
}

/// A reparameterized Laplacian draw `s = μ + b·u` with
/// `u = sign(ε)·ln(1 − 2|ε|)`, `ε ~ U(−½, ½)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceSample {
    pub values: Vec<f64>,
    /// The standardized noise `u`; `∂s/∂b = u`.
    pub noise: Vec<f64>,
}

impl LaplaceSample {
    /// Maps `∂L/∂s` to `(∂L/∂μ, ∂L/∂log b)` for the scales used in the draw.
    pub fn backward(&self, grad_values: &[f64], scale: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let grad_shift = grad_values.to_vec();
        let grad_log_scale = grad_values
            .iter()
            .zip(&self.noise)
            .zip(scale)
            .map(|((g, u), b)| g * u * b)
            .collect();
        (grad_shift, grad_log_scale)
    }
}

fn open_uniform_half<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u - 0.5;
        }
    }
}

/// Componentwise reparameterized Laplacian sample.
pub fn sample_laplacian<R: Rng + ?Sized>(shift: &[f64], scale: &[f64], rng: &mut R) -> LaplaceSample {
    let noise: Vec<f64> = shift
        .iter()
        .map(|_| {
            let eps = open_uniform_half(rng);
            eps.signum() * (1.0 - 2.0 * eps.abs()).ln()
        })
        .collect();
    let values = shift
        .iter()
        .zip(scale)
        .zip(&noise)
        .map(|((m, b), u)| m + b * u)
        .collect();
    LaplaceSample { values, noise }
}

/// `T_ζ(s) = sign(s)·max(|s| − ζ, 0)`.
pub fn soft_threshold(s: f64, zeta: f64) -> f64 {
    let mag = s.abs() - zeta;
    if mag > 0.0 {
        s.signum() * mag
    } else {
        0.0
    }
}

/// Soft threshold with a straight-through gradient: the forward value is
/// thresholded, the backward pass is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftThresholdSt {
    pub values: Vec<f64>,
}

impl SoftThresholdSt {
    pub fn forward(s: &[f64], zeta: f64) -> Self {
        Self {
            values: s.iter().map(|&x| soft_threshold(x, zeta)).collect(),
        }
    }

    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        upstream.to_vec()
    }
}

/// Variational sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalConfig {
    /// Number of draws `J` in best-of-many selection.
    pub samples: usize,
    pub zeta: f64,
    pub use_threshold: bool,
    pub beta_kl: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            zeta: 0.01,
            use_threshold: false,
            beta_kl: 5.0e-3,
        }
    }
}

impl VariationalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("sample count J must be at least 1"));
        }
        if !(self.zeta >= 0.0) {
            return Err(Error::invalid("threshold zeta must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of best-of-many selection.
#[derive(Debug, Clone)]
pub struct BestOfMany {
    /// Coefficients of the selected draw (thresholded when enabled).
    pub coeffs: Vec<f64>,
    pub index: usize,
    /// Reparameterization of the selected draw; gradients flow only here.
    pub sample: LaplaceSample,
    /// Transport loss of every draw, in draw order.
    pub losses: Vec<f64>,
}

/// Draws `J` coefficient vectors from `params` and keeps the one with the
/// lowest transport loss. Ties resolve to the lowest index.
pub fn best_of_many<R: Rng + ?Sized>(
    dict: &OperatorDictionary,
    source: &[f64],
    target: &[f64],
    params: &LaplacianParams,
    cfg: &VariationalConfig,
    rng: &mut R,
) -> Result<BestOfMany> {
    cfg.validate()?;
    if params.len() != dict.n_ops() {
        return Err(Error::invalid("Laplacian parameter length must equal dictionary size"));
    }
    let scale = params.scale();
    let mut best: Option<(f64, usize, Vec<f64>, LaplaceSample)> = None;
    let mut losses = Vec::with_capacity(cfg.samples);
    for j in 0..cfg.samples {
        let sample = sample_laplacian(&params.shift, &scale, rng);
        let coeffs = if cfg.use_threshold {
            SoftThresholdSt::forward(&sample.values, cfg.zeta).values
        } else {
            sample.values.clone()
        };
        let loss = match dict.manifold_loss_value(source, target, &coeffs) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::Divergence { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        losses.push(loss);
        let better = match &best {
            None => true,
            Some((b, ..)) => loss < *b,
        };
        if better {
            best = Some((loss, j, coeffs, sample));
        }
    }
    let (_, index, coeffs, sample) = best.expect("at least one draw");
    Ok(BestOfMany {
        coeffs,
        index,
        sample,
        losses,
    })
}

/// KL divergence between univariate Laplacians `KL(Lap(μq, bq) ‖ Lap(μp, bp))`.
pub fn kl_laplace_scalar(mu_q: f64, b_q: f64, mu_p: f64, b_p: f64) -> f64 {
    let a = (mu_q - mu_p).abs();
    (b_p / b_q).ln() + (b_q * (-a / b_q).exp() + a) / b_p - 1.0
}

/// KL value and gradients with respect to shifts and log-scales of both sides.
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub value: f64,
    pub grad_q_shift: Vec<f64>,
    pub grad_q_log_scale: Vec<f64>,
    pub grad_p_shift: Vec<f64>,
    pub grad_p_log_scale: Vec<f64>,
}

/// Summed componentwise KL between factorial Laplacians.
pub fn kl_laplacian(q: &LaplacianParams, p: &LaplacianParams) -> Result<KlTerm> {
    if q.len() != p.len() {
        return Err(Error::invalid("KL operands have different lengths"));
    }
    let n = q.len();
    let mut out = KlTerm {
        value: 0.0,
        grad_q_shift: vec![0.0; n],
        grad_q_log_scale: vec![0.0; n],
        grad_p_shift: vec![0.0; n],
        grad_p_log_scale: vec![0.0; n],
    };
    for i in 0..n {
        let bq = q.log_scale[i].exp();
        let bp = p.log_scale[i].exp();
        if !(bq > 0.0 && bq.is_finite() && bp > 0.0 && bp.is_finite()) {
            return Err(Error::invalid(format!(
                "Laplacian scales must be positive and finite (component {i}: {bq}, {bp})"
            )));
        }
        let delta = q.shift[i] - p.shift[i];
        let a = delta.abs();
        let e = (-a / bq).exp();
        out.value += (bp / bq).ln() + (bq * e + a) / bp - 1.0;
        let d_mu = delta.signum() * (1.0 - e) / bp;
        out.grad_q_shift[i] = d_mu;
        out.grad_p_shift[i] = -d_mu;
        out.grad_q_log_scale[i] = -1.0 + e * (bq + a) / bp;
        out.grad_p_log_scale[i] = 1.0 - (bq * e + a) / bp;
    }
    Ok(out)
}

/// Step-size policy for FISTA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepSizePolicy {
    /// Fixed Lipschitz estimate; step is `1 / lipschitz`.
    Fixed { lipschitz: f64 },
    /// Beck–Teboulle backtracking starting from `initial_lipschitz`, grown by
    /// `growth` on each rejected step.
    Backtracking { initial_lipschitz: f64, growth: f64 },
}

impl Default for StepSizePolicy {
    fn default() -> Self {
        StepSizePolicy::Backtracking {
            initial_lipschitz: 1.0,
            growth: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FistaConfig {
    pub l1_weight: f64,
    pub max_iters: usize,
    /// Stop once `‖c_k − c_{k−1}‖ ≤ tol·max(1, ‖c_k‖)`.
    pub tol: f64,
    pub step: StepSizePolicy,
}

impl Default for FistaConfig {
    fn default() -> Self {
        Self {
            l1_weight: 0.6,
            max_iters: 200,
            tol: 1e-5,
            step: StepSizePolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FistaResult {
    pub coeffs: Vec<f64>,
    pub iterations: usize,
    /// `L_m(c) + l1_weight·‖c‖₁` at the returned coefficients.
    pub objective: f64,
    pub final_lipschitz: f64,
}

fn l1(c: &[f64]) -> f64 {
    c.iter().map(|v| v.abs()).sum()
}

fn diverged(iteration: usize, what: &str) -> Error {
    Error::Divergence {
        iteration,
        detail: format!("FISTA {what} became non-finite"),
    }
}

/// Minimizes `‖z' − T_Ψ(c) z‖² + l1_weight·‖c‖₁` from `c = 0` with FISTA,
/// function-value momentum restart and backtracking on the step size.
pub fn fista_infer(
    dict: &OperatorDictionary,
    source: &[f64],
    target: &[f64],
    cfg: &FistaConfig,
) -> Result<FistaResult> {
    if cfg.max_iters == 0 {
        return Err(Error::invalid("FISTA needs max_iters >= 1"));
    }
    if !(cfg.l1_weight >= 0.0) {
        return Err(Error::invalid("l1 weight must be non-negative"));
    }
    let m = dict.n_ops();
    let (mut lip, growth, backtrack) = match cfg.step {
        StepSizePolicy::Fixed { lipschitz } => (lipschitz, 1.0, false),
        StepSizePolicy::Backtracking {
            initial_lipschitz,
            growth,
        } => (initial_lipschitz, growth, true),
    };
    if !(lip > 0.0) || (backtrack && !(growth > 1.0)) {
        return Err(Error::invalid("FISTA step policy needs lipschitz > 0 and growth > 1"));
    }
    let lam = cfg.l1_weight;
    let prox = |v: &[f64], step: f64| -> Vec<f64> { v.iter().map(|&x| soft_threshold(x, lam * step)).collect() };

    let mut x = vec![0.0; m];
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    let mut obj_x = dict.manifold_loss_value(source, target, &x)?;
    let mut iterations = 0;
    for k in 1..=cfg.max_iters {
        iterations = k;
        let at_y = dict
            .manifold_loss(source, target, &y, true)
            .map_err(|_| diverged(k, "smooth loss"))?;
        let grad = &at_y.grad_coeffs;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged(k, "gradient"));
        }
        let (x_new, f_new) = loop {
            let step = 1.0 / lip;
            let trial_in: Vec<f64> = y.iter().zip(grad).map(|(yi, gi)| yi - step * gi).collect();
            let cand = prox(&trial_in, step);
            let f_cand = match dict.manifold_loss_value(source, target, &cand) {
                Ok(v) => v,
                Err(Error::Divergence { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if !backtrack {
                break (cand, f_cand);
            }
            let mut lin = 0.0;
            let mut sq = 0.0;
            for i in 0..m {
                let d = cand[i] - y[i];
                lin += grad[i] * d;
                sq += d * d;
            }
            let model = at_y.loss + lin + 0.5 * lip * sq;
            if f_cand <= model + 1e-12 * at_y.loss.abs().max(1.0) {
                break (cand, f_cand);
            }
            lip *= growth;
            if !lip.is_finite() {
                return Err(diverged(k, "step size"));
            }
        };
        if !f_new.is_finite() {
            return Err(diverged(k, "objective"));
        }
        let obj_new = f_new + lam * l1(&x_new);
        let diff: f64 = x_new.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = x_new.iter().map(|v| v * v).sum::<f64>().sqrt();
        if obj_new > obj_x {
            // restart momentum from the last accepted iterate
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        y = x_new.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
        t = t_next;
        x = x_new;
        obj_x = obj_new;
        if diff <= cfg.tol * norm.max(1.0) {
            break;
        }
    }
    Ok(FistaResult {
        coeffs: x,
        iterations,
        objective: obj_x,
        final_lipschitz: lip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotation_dict() -> OperatorDictionary {
        OperatorDictionary::from_params(1, 2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn soft_threshold_values() {
        assert_eq!(soft_threshold(0.005, 0.01), 0.0);
        assert_eq!(soft_threshold(-0.01, 0.01), 0.0);
        assert!((soft_threshold(0.5, 0.01) - 0.49).abs() < 1e-15);
        assert!((soft_threshold(-0.5, 0.01) + 0.49).abs() < 1e-15);
        let st = SoftThresholdSt::forward(&[0.5, 0.0, -0.001], 0.01);
        assert_eq!(st.backward(&[1.5, -2.0, 0.25]), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_scale_returns_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_laplacian(&[0.3, -1.0], &[0.0, 0.0], &mut rng);
        assert_eq!(s.values, vec![0.3, -1.0]);
    }

    #[test]
    fn sample_backward_matches_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample_laplacian(&[0.0], &[2.0], &mut rng);
        let (gm, gl) = s.backward(&[1.0], &[2.0]);
        assert_eq!(gm, vec![1.0]);
        // s = μ + e^l·u ⇒ ∂s/∂l = e^l·u
        assert!((gl[0] - 2.0 * s.noise[0]).abs() < 1e-15);
    }

    #[test]
    fn kl_identity_and_errors() {
        let q = LaplacianParams::new(vec![0.2, -0.1], vec![-2.0, 0.5]).unwrap();
        let kl = kl_laplacian(&q, &q).unwrap();
        assert!(kl.value.abs() < 1e-15);
        let bad = LaplacianParams::new(vec![0.0, 0.0], vec![f64::NEG_INFINITY, 0.0]).unwrap();
        assert!(matches!(kl_laplacian(&bad, &q), Err(Error::InvalidArgument(_))));
        let short = LaplacianParams::new(vec![0.0], vec![0.0]).unwrap();
        assert!(kl_laplacian(&short, &q).is_err());
    }

    #[test]
    fn kl_half_scale_closed_form() {
        let v = kl_laplace_scalar(0.0, 0.01, 0.0, 0.02);
        assert!((v - (2f64.ln() + 0.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn best_of_many_single_draw() {
        let dict = rotation_dict();
        let params = LaplacianParams::constant(1, 0.2, 0.1).unwrap();
        let cfg = VariationalConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let out = best_of_many(&dict, &[1.0, 0.0], &[0.0, 1.0], &params, &cfg, &mut a).unwrap();
        let direct = params.sample(&mut b);
        assert_eq!(out.index, 0);
        assert_eq!(out.coeffs, direct.values);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn best_of_many_picks_exact_transport() {
        // Zero scale makes every draw equal the shift; the shift is the exact
        // rotation angle, so every draw has zero loss and index 0 wins ties.
        let dict = rotation_dict();
        let z = [1.0, 0.0];
        let zt = dict.transport(&[0.4], &z).unwrap();
        let params = LaplacianParams::new(vec![0.4], vec![-700.0]).unwrap();
        let cfg = VariationalConfig {
            samples: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = best_of_many(&dict, &z, &zt, &params, &cfg, &mut rng).unwrap();
        assert_eq!(out.index, 0);
        assert!(out.losses[out.index] < 1e-20);
        let min = out.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.losses[out.index], min);
    }

    #[test]
    fn best_of_many_rejects_zero_samples() {
        let dict = rotation_dict();
        let params = LaplacianParams::constant(1, 0.0, 0.1).unwrap();
        let cfg = VariationalConfig {
            samples: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(best_of_many(&dict, &[1.0, 0.0], &[0.0, 1.0], &params, &cfg, &mut rng).is_err());
    }

    #[test]
    fn fista_zero_when_target_equals_source() {
        let dict = rotation_dict();
        let cfg = FistaConfig {
            l1_weight: 10.0,
            ..Default::default()
        };
        let r = fista_infer(&dict, &[1.0, 0.5], &[1.0, 0.5], &cfg).unwrap();
        assert_eq!(r.coeffs, vec![0.0]);
    }

    #[test]
    fn fista_recovers_rotation_angle() {
        let dict = rotation_dict();
        let z = [1.0, 0.0];
        let zt = [0.3f64.cos(), 0.3f64.sin()];
        let cfg = FistaConfig {
            l1_weight: 1e-4,
            max_iters: 500,
            tol: 1e-10,
            ..Default::default()
        };
        let r = fista_infer(&dict, &z, &zt, &cfg).unwrap();
        assert!((r.coeffs[0] - 0.3).abs() < 1e-2, "{:?}", r.coeffs);
    }

    #[test]
    fn fista_rejects_zero_iterations() {
        let cfg = FistaConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(fista_infer(&rotation_dict(), &[1.0, 0.0], &[0.0, 1.0], &cfg).is_err());
    }
}

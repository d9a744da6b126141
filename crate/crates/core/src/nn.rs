//! Small fully connected networks with hand-written reverse mode.
//!
//! Every network stores its weights and biases in one flat vector so the
//! optimizers in [`crate::optim`] and the EMA tracker can treat it as a single
//! parameter group. Layer `l` occupies `W_l` (row-major, `out × in`) followed
//! by `b_l`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{LaplacianParams, DEFAULT_LOG_SCALE_RANGE};

/// Output head applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Plain,
    /// Output `2M` values read as `M` shifts then `M` log-scales; log-scales
    /// are clamped to `[log_scale_min, log_scale_max]`.
    Laplacian { log_scale_min: f64, log_scale_max: f64 },
    /// Output divided by its Euclidean norm.
    Normalized,
}

impl Head {
    pub fn laplacian_default() -> Self {
        let (lo, hi) = DEFAULT_LOG_SCALE_RANGE;
        Head::Laplacian {
            log_scale_min: lo,
            log_scale_max: hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    dims: Vec<usize>,
    params: Vec<f64>,
    negative_slope: f64,
    head: Head,
    generation: u64,
}

/// Intermediate values from a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    generation: u64,
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    /// Final output after the head.
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl MlpNet {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], negative_slope: f64, head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, negative_slope, head)?;
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut net.params[off..off + fan_in * fan_out + fan_out] {
                *v = rng.gen_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], negative_slope: f64, head: Head) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("network needs at least two positive layer dims, got {dims:?}")));
        }
        if let Head::Laplacian {
            log_scale_min,
            log_scale_max,
        } = head
        {
            if dims[dims.len() - 1] % 2 != 0 {
                return Err(Error::invalid("Laplacian head needs an even output dimension"));
            }
            if !(log_scale_min <= log_scale_max) {
                return Err(Error::invalid("log-scale clamp interval is empty"));
            }
        }
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; n],
            negative_slope,
            head,
            generation: 0,
        })
    }

    pub fn from_params(dims: &[usize], negative_slope: f64, head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims, negative_slope, head)?;
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "expected {} network parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("network parameters must be finite"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn negative_slope(&self) -> f64 {
        self.negative_slope
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// Offsets of `W_l` and `b_l` for layer `l`.
    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.dims.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        (off, off + fan_in * fan_out)
    }

    fn activate(&self, v: f64) -> f64 {
        if v >= 0.0 {
            v
        } else {
            self.negative_slope * v
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network input has length {}, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let n_layers = self.dims.len() - 1;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut h = x.to_vec();
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let w = &self.params[w_off..w_off + fan_in * fan_out];
            let b = &self.params[b_off..b_off + fan_out];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + dot(row, &h)
                })
                .collect();
            let next = if l + 1 < n_layers {
                z.iter().map(|&v| self.activate(v)).collect()
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        let output = match self.head {
            Head::Plain => h,
            Head::Laplacian {
                log_scale_min,
                log_scale_max,
            } => {
                let m = h.len() / 2;
                h.iter()
                    .enumerate()
                    .map(|(i, &v)| if i < m { v } else { v.clamp(log_scale_min, log_scale_max) })
                    .collect()
            }
            Head::Normalized => {
                let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                h.iter().map(|v| v / norm).collect()
            }
        };
        Ok(MlpCache {
            generation: self.generation,
            inputs,
            pre,
            output,
        })
    }

    /// Forward pass returning only the output.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Accumulates parameter gradients into `param_grads` and returns the
    /// gradient with respect to the input.
    pub fn backward_into(&self, cache: &MlpCache, upstream: &[f64], param_grads: &mut [f64]) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.pre.len() != self.dims.len() - 1 {
            return Err(Error::InvalidState(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::invalid("upstream gradient has the wrong length"));
        }
        if param_grads.len() != self.params.len() {
            return Err(Error::invalid("parameter gradient buffer has the wrong length"));
        }
        let n_layers = self.dims.len() - 1;
        let last_pre = &cache.pre[n_layers - 1];
        // gradient w.r.t. the final affine output
        let mut g: Vec<f64> = match self.head {
            Head::Plain => upstream.to_vec(),
            Head::Laplacian {
                log_scale_min,
                log_scale_max,
            } => {
                let m = upstream.len() / 2;
                upstream
                    .iter()
                    .enumerate()
                    .map(|(i, &u)| {
                        let v = last_pre[i];
                        if i >= m && (v < log_scale_min || v > log_scale_max) {
                            0.0
                        } else {
                            u
                        }
                    })
                    .collect()
            }
            Head::Normalized => {
                let norm = last_pre.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let y = &cache.output;
                let dot: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
                upstream.iter().zip(y).map(|(u, yi)| (u - yi * dot) / norm).collect()
            }
        };
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                for (gi, &z) in g.iter_mut().zip(&cache.pre[l]) {
                    if z < 0.0 {
                        *gi *= self.negative_slope;
                    }
                }
            }
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &cache.inputs[l][..fan_in];
            let w = &self.params[w_off..w_off + fan_in * fan_out];
            let (gw, gb) = param_grads[w_off..b_off + fan_out].split_at_mut(fan_in * fan_out);
            let mut g_in = vec![0.0; fan_in];
            // Weight gradient and input gradient in one sweep over the rows.
            for ((&go, (grow, wrow)), gbo) in g
                .iter()
                .zip(gw.chunks_exact_mut(fan_in).zip(w.chunks_exact(fan_in)))
                .zip(gb.iter_mut())
            {
                if go == 0.0 {
                    continue;
                }
                *gbo += go;
                for ((gr, gi), (&x, &wv)) in grow.iter_mut().zip(g_in.iter_mut()).zip(input.iter().zip(wrow)) {
                    *gr += go * x;
                    *gi += go * wv;
                }
            }
            g = g_in;
        }
        Ok(g)
    }

    /// Parameter and input gradients for one sample.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let gin = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, gin))
    }

    /// Reads a Laplacian head output as distribution parameters.
    /// Scales the output layer weights by `weight_scale` and sets the output
    /// biases to `shift` (first half) and `log_scale` (second half).
    pub fn init_laplacian_head(&mut self, shift: f64, log_scale: f64, weight_scale: f64) -> Result<()> {
        if !matches!(self.head, Head::Laplacian { .. }) {
            return Err(Error::invalid("network does not have a Laplacian head"));
        }
        let last = self.dims.len() - 2;
        let (w0, b0) = self.layer_offsets(last);
        let m = self.output_dim() / 2;
        let params = self.params_mut();
        for w in &mut params[w0..b0] {
            *w *= weight_scale;
        }
        for (i, b) in params[b0..b0 + 2 * m].iter_mut().enumerate() {
            *b = if i < m { shift } else { log_scale };
        }
        Ok(())
    }

    pub fn laplacian_output(&self, cache: &MlpCache) -> Result<LaplacianParams> {
        if !matches!(self.head, Head::Laplacian { .. }) {
            return Err(Error::invalid("network does not have a Laplacian head"));
        }
        let m = cache.output.len() / 2;
        LaplacianParams::new(cache.output[..m].to_vec(), cache.output[m..].to_vec())
    }
}

/// Dot product with four independent partial sums, so the compiler can keep
/// several multiply-adds in flight instead of waiting on one accumulator.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[f64; 4], &[f64; 4]) = (x.try_into().unwrap(), y.try_into().unwrap());
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Posterior encoder `q_φ(c | z, z')`: the features are detached, concatenated
/// and mapped to Laplacian parameters. No gradient is returned for `z` or `z'`.
pub fn encode_posterior(net: &MlpNet, source: &[f64], target: &[f64]) -> Result<(LaplacianParams, MlpCache)> {
    if source.len() != target.len() || source.len() * 2 != net.input_dim() {
        return Err(Error::invalid(format!(
            "posterior encoder expects two features of length {}, got {} and {}",
            net.input_dim() / 2,
            source.len(),
            target.len()
        )));
    }
    let mut input = Vec::with_capacity(net.input_dim());
    input.extend_from_slice(source);
    input.extend_from_slice(target);
    let cache = net.forward(&input)?;
    let params = net.laplacian_output(&cache)?;
    Ok((params, cache))
}

/// Accumulates posterior-network gradients from `(∂/∂μ, ∂/∂log b)`; the input
/// gradient is dropped.
pub fn posterior_backward(
    net: &MlpNet,
    cache: &MlpCache,
    grad_shift: &[f64],
    grad_log_scale: &[f64],
    param_grads: &mut [f64],
) -> Result<()> {
    let mut up = grad_shift.to_vec();
    up.extend_from_slice(grad_log_scale);
    net.backward_into(cache, &up, param_grads)?;
    Ok(())
}

/// Linear warm-up from fixed prior parameters `(mu0, b0)` to the encoded
/// prior over the first `total_iters` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupSchedule {
    pub total_iters: usize,
    pub mu0: f64,
    pub b0: f64,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self {
            total_iters: 5000,
            mu0: 0.05,
            b0: 0.01,
        }
    }
}

impl WarmupSchedule {
    /// Blend weight `κ` on the encoded parameters at `iter`.
    pub fn kappa(&self, iter: usize) -> f64 {
        if iter >= self.total_iters {
            1.0
        } else {
            iter as f64 / self.total_iters as f64
        }
    }

    pub fn fixed_params(&self, len: usize) -> Result<LaplacianParams> {
        LaplacianParams::constant(len, self.mu0, self.b0)
    }
}

/// Encoded prior and what is needed to backpropagate through the warm-up.
#[derive(Debug, Clone)]
pub struct PriorEncoding {
    pub params: LaplacianParams,
    pub kappa: f64,
    raw: LaplacianParams,
    cache: MlpCache,
}

/// Prior network `p_θ(c | z)` with warm-up blending
/// `(κμ + (1−κ)μ0, κb + (1−κ)b0)`, `κ = iter / total_iters`.
pub fn encode_prior(net: &MlpNet, z: &[f64], schedule: &WarmupSchedule, iter: usize) -> Result<PriorEncoding> {
    let cache = net.forward(z)?;
    let raw = net.laplacian_output(&cache)?;
    let kappa = schedule.kappa(iter);
    let params = if kappa >= 1.0 {
        raw.clone()
    } else {
        let shift = raw.shift.iter().map(|m| kappa * m + (1.0 - kappa) * schedule.mu0).collect();
        let log_scale = raw
            .log_scale
            .iter()
            .map(|l| (kappa * l.exp() + (1.0 - kappa) * schedule.b0).ln())
            .collect();
        LaplacianParams::new(shift, log_scale)?
    };
    Ok(PriorEncoding {
        params,
        kappa,
        raw,
        cache,
    })
}

/// Backpropagates `(∂/∂μ, ∂/∂log b)` of the blended prior into the prior
/// network; the input gradient is dropped.
pub fn prior_backward(
    net: &MlpNet,
    enc: &PriorEncoding,
    grad_shift: &[f64],
    grad_log_scale: &[f64],
    param_grads: &mut [f64],
) -> Result<()> {
    let k = enc.kappa;
    if k == 0.0 {
        return Ok(());
    }
    let gs: Vec<f64> = grad_shift.iter().map(|g| k * g).collect();
    // log b = ln(κ e^r + (1−κ) b0) ⇒ ∂/∂r = κ e^r / b
    let gl: Vec<f64> = grad_log_scale
        .iter()
        .zip(&enc.raw.log_scale)
        .zip(&enc.params.log_scale)
        .map(|((g, r), l)| g * k * (r - l).exp())
        .collect();
    posterior_backward(net, &enc.cache, &gs, &gl, param_grads)
}

/// Exponential moving average of a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    shadow: MlpNet,
    decay: f64,
}

impl EmaState {
    pub fn new(net: &MlpNet, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            shadow: net.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `shadow ← decay·shadow + (1 − decay)·current`
    pub fn update(&mut self, net: &MlpNet) -> Result<()> {
        if net.dims != self.shadow.dims {
            return Err(Error::invalid("EMA shadow shape does not match network"));
        }
        let d = self.decay;
        for (s, &c) in self.shadow.params_mut().iter_mut().zip(&net.params) {
            *s = d * *s + (1.0 - d) * c;
        }
        Ok(())
    }

    /// The shadow parameters as a network.
    pub fn network(&self) -> &MlpNet {
        &self.shadow
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(mut ema: EmaState, net: &MlpNet) -> Result<EmaState> {
    ema.update(net)?;
    Ok(ema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let mut net = MlpNet::zeros(&[3, 2], 0.01, Head::Plain).unwrap();
        let p = net.params_mut();
        p[6] = 0.7;
        p[7] = -1.5;
        assert_eq!(net.predict(&[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -1.5]);
    }

    #[test]
    fn zero_slope_zeroes_negative_preactivations() {
        // 1 -> 2 -> 1 with hidden pre-activations (x, -x) and unit readout.
        let params = vec![1.0, -1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let net = MlpNet::from_params(&[1, 2, 1], 0.0, Head::Plain, params).unwrap();
        assert_eq!(net.predict(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(net.predict(&[-3.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn input_length_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpNet::new(&[3, 4, 2], 0.01, Head::Plain, &mut rng).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(MlpNet::zeros(&[3], 0.01, Head::Plain).is_err());
        assert!(MlpNet::zeros(&[3, 3], 0.01, Head::laplacian_default()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpNet::new(&[3, 5, 2], 0.01, Head::Plain, &mut rng).unwrap();
        let cache = net.forward(&[0.1, -0.2, 0.3]).unwrap();
        let (gp, gx) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(gp.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_net_input_gradient_is_transpose() {
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut params = w.clone();
        params.extend_from_slice(&[0.0, 0.0]);
        let net = MlpNet::from_params(&[3, 2], 0.01, Head::Plain, params).unwrap();
        let cache = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let (_, gx) = net.backward(&cache, &[1.0, -1.0]).unwrap();
        assert_eq!(gx, vec![1.0 - 4.0, 2.0 - 5.0, 3.0 - 6.0]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = MlpNet::new(&[2, 2], 0.01, Head::Plain, &mut rng).unwrap();
        let cache = net.forward(&[1.0, 2.0]).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &[1.0, 1.0]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn laplacian_head_clamps_log_scale() {
        let params = vec![0.0, 0.0, 0.0, 0.0, 0.3, 10.0];
        let net = MlpNet::from_params(&[2, 2], 0.01, Head::laplacian_default(), params).unwrap();
        let cache = net.forward(&[1.0, 1.0]).unwrap();
        let lp = net.laplacian_output(&cache).unwrap();
        assert_eq!(lp.shift, vec![0.3]);
        assert_eq!(lp.log_scale, vec![2.0]);
        // clamped component passes no gradient
        let (gp, _) = net.backward(&cache, &[1.0, 1.0]).unwrap();
        assert_eq!(gp[4], 1.0);
        assert_eq!(gp[5], 0.0);
    }

    #[test]
    fn posterior_output_dim_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [1, 4, 7] {
            let net = MlpNet::new(&[6, 8, 2 * m], 0.01, Head::laplacian_default(), &mut rng).unwrap();
            let (a, _) = encode_posterior(&net, &[0.1, 0.2, 0.3], &[0.0, -0.1, 0.5]).unwrap();
            let (b, _) = encode_posterior(&net, &[0.1, 0.2, 0.3], &[0.0, -0.1, 0.5]).unwrap();
            assert_eq!(a.len(), m);
            assert_eq!(a, b);
        }
        let net = MlpNet::new(&[6, 4], 0.01, Head::laplacian_default(), &mut rng).unwrap();
        assert!(encode_posterior(&net, &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn prior_warmup_endpoints() {
        let sched = WarmupSchedule::default();
        assert_eq!((sched.total_iters, sched.mu0, sched.b0), (5000, 0.05, 0.01));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MlpNet::new(&[3, 8, 4], 0.01, Head::laplacian_default(), &mut rng).unwrap();
        let z = [0.5, -0.3, 0.2];
        let start = encode_prior(&net, &z, &sched, 0).unwrap();
        for i in 0..2 {
            assert!((start.params.shift[i] - 0.05).abs() < 1e-15);
            assert!((start.params.log_scale[i].exp() - 0.01).abs() < 1e-15);
        }
        let done = encode_prior(&net, &z, &sched, 5000).unwrap();
        let raw = net.laplacian_output(&net.forward(&z).unwrap()).unwrap();
        assert_eq!(done.params, raw);
        let mid = encode_prior(&net, &z, &sched, 2500).unwrap();
        assert_eq!(mid.kappa, 0.5);
        assert!((mid.params.shift[0] - 0.5 * (raw.shift[0] + 0.05)).abs() < 1e-15);
    }

    #[test]
    fn ema_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = MlpNet::new(&[2, 3], 0.01, Head::Plain, &mut rng).unwrap();
        let other = MlpNet::new(&[2, 3], 0.01, Head::Plain, &mut rng).unwrap();
        let ema = EmaState::new(&other, 0.0).unwrap();
        let ema = ema_update(ema, &net).unwrap();
        assert_eq!(ema.network().params(), net.params());

        let mut ema = EmaState::new(&other, 0.9).unwrap();
        let gap0: f64 = other.params().iter().zip(net.params()).map(|(a, b)| (a - b).abs()).sum();
        for _ in 0..50 {
            ema.update(&net).unwrap();
        }
        let gap: f64 = ema.network().params().iter().zip(net.params()).map(|(a, b)| (a - b).abs()).sum();
        assert!((gap - gap0 * 0.9f64.powi(50)).abs() < 1e-10);

        assert!(EmaState::new(&net, 1.0).is_err());
        let wrong = MlpNet::new(&[2, 4], 0.01, Head::Plain, &mut rng).unwrap();
        assert!(ema.update(&wrong).is_err());
    }
}

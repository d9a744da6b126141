//! Lie group operator dictionaries and the manifold transport loss.
//!
//! A dictionary holds `M` generators acting on `d`-dimensional features. When
//! the block size `b` is smaller than `d`, every generator is block diagonal
//! with `d / b` independent `b × b` blocks, and transport acts on each feature
//! segment separately.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expm::{expm_rm, vjp_rm, BlockDiagMatrix, Matrix};
use crate::optim::{clip_global_norm, sgdw_step};

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorDictionary {
    n_ops: usize,
    dim: usize,
    block_size: usize,
    /// Indexed `[op][block][row][col]`, row-major.
    params: Vec<f64>,
}

/// Eigen-structured initialization: every `2 × 2` diagonal cell is
/// `[[alpha, beta_eig], [-beta_eig, alpha]]`, whose eigenvalues are
/// `alpha ± i·beta_eig`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub alpha: f64,
    pub beta_eig: f64,
    /// Standard deviation of Gaussian noise added to every entry. Zero keeps
    /// the pure cell structure; any positive value breaks the symmetry
    /// between otherwise identical operators.
    pub noise_std: f64,
    /// Allow odd block sizes by ending each block with a `1 × 1` cell set to
    /// `alpha`.
    pub allow_trailing_cell: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0e-4,
            beta_eig: 6.0,
            noise_std: 0.0,
            allow_trailing_cell: false,
        }
    }
}

/// Gradients of a scalar loss through `T_Ψ(c) z`.
#[derive(Debug, Clone)]
pub struct TransportGrad {
    pub grad_dict: Vec<f64>,
    pub grad_coeffs: Vec<f64>,
    pub grad_source: Vec<f64>,
}

/// Loss value and gradients of the blockwise transport objective.
#[derive(Debug, Clone)]
pub struct ManifoldLoss {
    pub loss: f64,
    /// Same layout as the dictionary parameters.
    pub grad_dict: Vec<f64>,
    pub grad_coeffs: Vec<f64>,
    pub grad_source: Vec<f64>,
    /// Identically zero when the target is under stop-gradient.
    pub grad_target: Vec<f64>,
}

impl OperatorDictionary {
    pub fn zeros(n_ops: usize, dim: usize, block_size: usize) -> Result<Self> {
        validate_shape(n_ops, dim, block_size)?;
        Ok(Self {
            n_ops,
            dim,
            block_size,
            params: vec![0.0; n_ops * dim * block_size],
        })
    }

    /// Builds a dictionary from per-operator block lists.
    pub fn from_operators(ops: &[BlockDiagMatrix]) -> Result<Self> {
        let first = ops
            .first()
            .ok_or_else(|| Error::invalid("dictionary needs at least one operator"))?;
        let (dim, b) = (first.dim(), first.block_size());
        let mut params = Vec::with_capacity(ops.len() * dim * b);
        for (m, op) in ops.iter().enumerate() {
            if op.dim() != dim || op.block_size() != b {
                return Err(Error::invalid(format!("operator {m} has mismatched shape")));
            }
            for blk in op.blocks() {
                for r in 0..b {
                    for c in 0..b {
                        params.push(blk[(r, c)]);
                    }
                }
            }
        }
        let dict = Self {
            n_ops: ops.len(),
            dim,
            block_size: b,
            params,
        };
        dict.check_finite()?;
        Ok(dict)
    }

    pub fn from_params(n_ops: usize, dim: usize, block_size: usize, params: Vec<f64>) -> Result<Self> {
        validate_shape(n_ops, dim, block_size)?;
        if params.len() != n_ops * dim * block_size {
            return Err(Error::invalid(format!(
                "expected {} dictionary entries, got {}",
                n_ops * dim * block_size,
                params.len()
            )));
        }
        let dict = Self {
            n_ops,
            dim,
            block_size,
            params,
        };
        dict.check_finite()?;
        Ok(dict)
    }

    fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("dictionary entries must be finite"))
        }
    }

    pub fn n_ops(&self) -> usize {
        self.n_ops
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.dim / self.block_size
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, op: usize, block: usize) -> usize {
        let b2 = self.block_size * self.block_size;
        (op * self.n_blocks() + block) * b2
    }

    /// Block `j` of operator `m`.
    pub fn block(&self, op: usize, block: usize) -> Matrix {
        let b = self.block_size;
        let off = self.offset(op, block);
        Matrix::from_row_slice(b, b, &self.params[off..off + b * b])
    }

    pub fn operator(&self, op: usize) -> BlockDiagMatrix {
        let blocks = (0..self.n_blocks()).map(|j| self.block(op, j)).collect();
        BlockDiagMatrix::new(blocks).expect("blocks share a size")
    }

    /// `Σ_m c_m Ψ^j_m` for block `j`.
    pub fn generator(&self, coeffs: &[f64], block: usize) -> Matrix {
        let b = self.block_size;
        Matrix::from_row_slice(b, b, &self.generator_rm(coeffs, block))
    }

    fn generator_rm(&self, coeffs: &[f64], block: usize) -> Vec<f64> {
        let b2 = self.block_size * self.block_size;
        let mut out = vec![0.0; b2];
        for (m, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let off = self.offset(m, block);
            for (o, p) in out.iter_mut().zip(&self.params[off..off + b2]) {
                *o += c * p;
            }
        }
        out
    }

    /// Row-major transport blocks.
    fn transport_rm(&self, coeffs: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_coeffs(coeffs)?;
        let b = self.block_size;
        let blocks: Vec<Vec<f64>> = (0..self.n_blocks())
            .map(|j| expm_rm(&self.generator_rm(coeffs, j), b))
            .collect();
        if blocks.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                iteration: 0,
                detail: "transport matrix is non-finite".into(),
            });
        }
        Ok(blocks)
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.n_ops {
            return Err(Error::invalid(format!(
                "coefficient vector has length {}, dictionary has {} operators",
                coeffs.len(),
                self.n_ops
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(())
    }

    fn check_feature(&self, z: &[f64], what: &str) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::invalid(format!(
                "{what} has length {}, dictionary dimension is {}",
                z.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Per-block transport matrices `T_{Ψ^j}(c) = expm(Σ_m c_m Ψ^j_m)`.
    pub fn transport_blocks(&self, coeffs: &[f64]) -> Result<Vec<Matrix>> {
        let b = self.block_size;
        Ok(self
            .transport_rm(coeffs)?
            .iter()
            .map(|t| Matrix::from_row_slice(b, b, t))
            .collect())
    }

    /// `T_Ψ(c) z`.
    pub fn transport(&self, coeffs: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(z, "feature")?;
        let blocks = self.transport_rm(coeffs)?;
        Ok(apply_rm(&blocks, self.block_size, z))
    }

    /// Pulls `∂L/∂(T_Ψ(c) z)` back to the dictionary, the coefficients and `z`.
    pub fn transport_backward(&self, coeffs: &[f64], z: &[f64], upstream: &[f64]) -> Result<TransportGrad> {
        self.check_feature(z, "feature")?;
        self.check_feature(upstream, "upstream gradient")?;
        self.check_coeffs(coeffs)?;
        let b = self.block_size;
        let mut out = TransportGrad {
            grad_dict: vec![0.0; self.params.len()],
            grad_coeffs: vec![0.0; self.n_ops],
            grad_source: vec![0.0; self.dim],
        };
        for j in 0..self.n_blocks() {
            let (zs, up) = (&z[j * b..(j + 1) * b], &upstream[j * b..(j + 1) * b]);
            let a = self.generator_rm(coeffs, j);
            let t = expm_rm(&a, b);
            let mut g = vec![0.0; b * b];
            for r in 0..b {
                for c in 0..b {
                    g[r * b + c] = up[r] * zs[c];
                }
            }
            let h = vjp_rm(&a, &g, b);
            for m in 0..self.n_ops {
                let off = self.offset(m, j);
                let mut dot = 0.0;
                for k in 0..b * b {
                    out.grad_dict[off + k] += coeffs[m] * h[k];
                    dot += self.params[off + k] * h[k];
                }
                out.grad_coeffs[m] += dot;
            }
            for c in 0..b {
                out.grad_source[j * b + c] = (0..b).map(|r| t[r * b + c] * up[r]).sum();
            }
        }
        Ok(out)
    }

    /// `Σ_j ‖z'_j − T_{Ψ^j}(c) z_j‖²` without gradients.
    pub fn manifold_loss_value(&self, source: &[f64], target: &[f64], coeffs: &[f64]) -> Result<f64> {
        self.check_feature(source, "source")?;
        self.check_feature(target, "target")?;
        let moved = self.transport(coeffs, source)?;
        Ok(moved
            .iter()
            .zip(target)
            .map(|(m, t)| (t - m) * (t - m))
            .sum())
    }

    /// Blockwise transport loss with analytic gradients through the
    /// adjoint of the matrix exponential.
    pub fn manifold_loss(
        &self,
        source: &[f64],
        target: &[f64],
        coeffs: &[f64],
        stop_grad_target: bool,
    ) -> Result<ManifoldLoss> {
        self.check_feature(source, "source")?;
        self.check_feature(target, "target")?;
        self.check_coeffs(coeffs)?;
        let b = self.block_size;
        let mut out = ManifoldLoss {
            loss: 0.0,
            grad_dict: vec![0.0; self.params.len()],
            grad_coeffs: vec![0.0; self.n_ops],
            grad_source: vec![0.0; self.dim],
            grad_target: vec![0.0; self.dim],
        };
        for j in 0..self.n_blocks() {
            let seg = j * b..(j + 1) * b;
            let (z, zt) = (&source[seg.clone()], &target[seg.clone()]);
            let a = self.generator_rm(coeffs, j);
            let t = expm_rm(&a, b);
            let resid: Vec<f64> = (0..b)
                .map(|r| zt[r] - (0..b).map(|c| t[r * b + c] * z[c]).sum::<f64>())
                .collect();
            out.loss += resid.iter().map(|v| v * v).sum::<f64>();
            // dL/dT = -2 r zᵀ, dL/dA = L*(A, dL/dT)
            let mut g = vec![0.0; b * b];
            for r in 0..b {
                for c in 0..b {
                    g[r * b + c] = -2.0 * resid[r] * z[c];
                }
            }
            let h = vjp_rm(&a, &g, b);
            for m in 0..self.n_ops {
                let off = self.offset(m, j);
                let blk = &self.params[off..off + b * b];
                let gd = &mut out.grad_dict[off..off + b * b];
                let mut dot = 0.0;
                for k in 0..b * b {
                    gd[k] += coeffs[m] * h[k];
                    dot += blk[k] * h[k];
                }
                out.grad_coeffs[m] += dot;
            }
            for c in 0..b {
                out.grad_source[j * b + c] = -2.0 * (0..b).map(|r| t[r * b + c] * resid[r]).sum::<f64>();
            }
            if !stop_grad_target {
                for r in 0..b {
                    out.grad_target[j * b + r] = 2.0 * resid[r];
                }
            }
        }
        if !out.loss.is_finite() {
            return Err(Error::Divergence {
                iteration: 0,
                detail: "manifold loss is non-finite".into(),
            });
        }
        Ok(out)
    }

    /// `‖z' − T_Ψ(c) z‖² / ‖z' − z‖²`.
    pub fn distance_improvement(&self, source: &[f64], target: &[f64], coeffs: &[f64]) -> Result<f64> {
        self.check_feature(source, "source")?;
        self.check_feature(target, "target")?;
        let base: f64 = source.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        if base == 0.0 {
            return Err(Error::UndefinedRatio(
                "distance improvement needs distinct source and target".into(),
            ));
        }
        Ok(self.manifold_loss_value(source, target, coeffs)? / base)
    }

    /// `Σ_m ‖Ψ_m‖²_F`.
    pub fn frobenius_penalty(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum()
    }

    /// Gradient of [`Self::frobenius_penalty`].
    pub fn frobenius_penalty_grad(&self) -> Vec<f64> {
        self.params.iter().map(|v| 2.0 * v).collect()
    }

    /// `‖Ψ_m‖_F` for every operator.
    pub fn operator_norms(&self) -> Vec<f64> {
        let len = self.dim * self.block_size;
        self.params
            .chunks(len)
            .map(|op| op.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Global-norm clipping followed by a decoupled-weight-decay SGD step.
    pub fn grad_clip_and_step(&mut self, grads: &[f64], lr: f64, clip_norm: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::invalid("gradient shape does not match dictionary"));
        }
        if lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let mut g = grads.to_vec();
        clip_global_norm(&mut g, clip_norm);
        sgdw_step(&mut self.params, &g, lr, weight_decay);
        Ok(())
    }
}

fn apply_rm(blocks: &[Vec<f64>], b: usize, z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for (j, t) in blocks.iter().enumerate() {
        let seg = &z[j * b..(j + 1) * b];
        for r in 0..b {
            out.push(t[r * b..(r + 1) * b].iter().zip(seg).map(|(a, x)| a * x).sum());
        }
    }
    out
}

fn validate_shape(n_ops: usize, dim: usize, block_size: usize) -> Result<()> {
    if n_ops == 0 {
        return Err(Error::invalid("dictionary size M must be at least 1"));
    }
    if dim == 0 || block_size == 0 {
        return Err(Error::invalid("feature and block dimensions must be positive"));
    }
    if dim % block_size != 0 {
        return Err(Error::invalid(format!(
            "block size {block_size} does not divide feature dimension {dim}"
        )));
    }
    Ok(())
}

/// Initializes `n_ops` block-diagonal operators from `2 × 2` rotation-like
/// cells.
pub fn init_dictionary<R: Rng + ?Sized>(
    n_ops: usize,
    dim: usize,
    block_size: usize,
    cfg: &InitConfig,
    rng: &mut R,
) -> Result<OperatorDictionary> {
    validate_shape(n_ops, dim, block_size)?;
    if block_size % 2 == 1 && !cfg.allow_trailing_cell {
        return Err(Error::invalid(format!(
            "block size {block_size} is odd; enable the trailing 1x1 cell to allow it"
        )));
    }
    if !cfg.alpha.is_finite() || !cfg.beta_eig.is_finite() || !(cfg.noise_std >= 0.0) {
        return Err(Error::invalid("init parameters must be finite, noise_std >= 0"));
    }
    let mut dict = OperatorDictionary::zeros(n_ops, dim, block_size)?;
    let b = block_size;
    for m in 0..n_ops {
        for j in 0..dict.n_blocks() {
            let off = dict.offset(m, j);
            let cell = &mut dict.params[off..off + b * b];
            let mut i = 0;
            while i + 1 < b {
                cell[i * b + i] = cfg.alpha;
                cell[i * b + i + 1] = cfg.beta_eig;
                cell[(i + 1) * b + i] = -cfg.beta_eig;
                cell[(i + 1) * b + i + 1] = cfg.alpha;
                i += 2;
            }
            if i < b {
                cell[i * b + i] = cfg.alpha;
            }
            if cfg.noise_std > 0.0 {
                for v in cell.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += cfg.noise_std * n;
                }
            }
        }
    }
    Ok(dict)
}

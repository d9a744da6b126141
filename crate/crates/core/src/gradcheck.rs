//! Runtime gradient and oracle checks, reported as a table.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::contrastive::{info_nce, ContrastiveConfig, Distance};
use crate::error::Result;
use crate::expm::{expm, expm_frechet, expm_vjp, frobenius_dot, Matrix};
use crate::inference::{kl_laplace_scalar, kl_laplacian, LaplacianParams};
use crate::nn::{Head, MlpNet};
use crate::operators::OperatorDictionary;
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random instances per check.
    pub trials: usize,
    /// Central-difference step.
    pub fd_step: f64,
    /// Multiplies every analytic gradient by `1 + perturb`; a negative
    /// control that must make the suite fail.
    pub perturb: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            fd_step: 1e-5,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of a scalar function.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = xp[i];
            xp[i] = v + h;
            let up = f(&xp);
            xp[i] = v - h;
            let down = f(&xp);
            xp[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rand_vec(rng: &mut Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

fn rand_mat(rng: &mut Rng, n: usize, s: f64) -> Matrix {
    Matrix::from_vec(n, n, rand_vec(rng, n * n, s))
}

struct Suite {
    cfg: GradCheckConfig,
    rows: Vec<CheckRow>,
}

impl Suite {
    fn scale(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x * (1.0 + self.cfg.perturb)).collect()
    }

    fn record(&mut self, name: &str, errors: impl IntoIterator<Item = f64>, tolerance: f64) {
        let max = errors.into_iter().fold(0.0, |m: f64, e| if e.is_nan() { f64::NAN } else { m.max(e) });
        self.rows.push(CheckRow {
            name: name.into(),
            max_rel_error: max,
            tolerance,
            passed: max < tolerance,
        });
    }
}

/// Runs every check with random instances drawn from `seed`.
pub fn run_checks(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<CheckRow>> {
    let mut s = Suite { cfg: *cfg, rows: Vec::new() };
    let mut rng = stream(seed, 500);
    let h = cfg.fd_step;

    let half_pi = std::f64::consts::FRAC_PI_2;
    let rot = expm(&Matrix::from_row_slice(2, 2, &[0.0, -half_pi, half_pi, 0.0]))?;
    let want = Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
    s.record("expm rotation closed form", [(rot - want).amax()], 1e-10);

    let mut errs = Vec::new();
    for _ in 0..cfg.trials {
        let a = rand_mat(&mut rng, 3, 1.0);
        let e = rand_mat(&mut rng, 3, 1.0);
        let (_, l) = expm_frechet(&a, &e)?;
        let fd = (expm(&(&a + &e * h))? - expm(&(&a - &e * h))?) / (2.0 * h);
        errs.push(rel_error(&s.scale(l.as_slice()), fd.as_slice()));
    }
    s.record("expm Frechet vs central differences", errs, 1e-6);

    let mut errs = Vec::new();
    for _ in 0..cfg.trials {
        let a = rand_mat(&mut rng, 4, 1.0);
        let g = rand_mat(&mut rng, 4, 1.0);
        let adj = Matrix::from_vec(4, 4, s.scale(expm_vjp(&a, &g)?.as_slice()));
        for _ in 0..20 {
            let e = rand_mat(&mut rng, 4, 1.0);
            let lhs = frobenius_dot(&g, &expm_frechet(&a, &e)?.1);
            let rhs = frobenius_dot(&adj, &e);
            errs.push((lhs - rhs).abs() / lhs.abs().max(1e-12));
        }
    }
    s.record("expm adjoint identity", errs, 1e-8);

    let (mut ed, mut ec, mut es, mut et) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut etr = Vec::new();
    for _ in 0..cfg.trials {
        let (m, d, b) = (3, 4, 2);
        let dict = OperatorDictionary::from_params(m, d, b, rand_vec(&mut rng, m * d * b, 0.8))?;
        let z = rand_vec(&mut rng, d, 1.0);
        let zt = rand_vec(&mut rng, d, 1.0);
        let c = rand_vec(&mut rng, m, 0.7);
        let ml = dict.manifold_loss(&z, &zt, &c, false)?;
        let fd_dict = fd_gradient(dict.params(), h, |p| {
            OperatorDictionary::from_params(m, d, b, p.to_vec())
                .and_then(|dd| dd.manifold_loss_value(&z, &zt, &c))
                .unwrap_or(f64::NAN)
        });
        ed.push(rel_error(&s.scale(&ml.grad_dict), &fd_dict));
        let fd_c = fd_gradient(&c, h, |cc| dict.manifold_loss_value(&z, &zt, cc).unwrap_or(f64::NAN));
        ec.push(rel_error(&s.scale(&ml.grad_coeffs), &fd_c));
        let fd_z = fd_gradient(&z, h, |zz| dict.manifold_loss_value(zz, &zt, &c).unwrap_or(f64::NAN));
        es.push(rel_error(&s.scale(&ml.grad_source), &fd_z));
        let fd_t = fd_gradient(&zt, h, |tt| dict.manifold_loss_value(&z, tt, &c).unwrap_or(f64::NAN));
        et.push(rel_error(&s.scale(&ml.grad_target), &fd_t));

        let up = rand_vec(&mut rng, d, 1.0);
        let tg = dict.transport_backward(&c, &z, &up)?;
        let dot = |v: Vec<f64>| v.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let fd_c = fd_gradient(&c, h, |cc| dict.transport(cc, &z).map(dot).unwrap_or(f64::NAN));
        etr.push(rel_error(&s.scale(&tg.grad_coeffs), &fd_c));
    }
    s.record("manifold loss d/dPsi", ed, 1e-5);
    s.record("manifold loss d/dc", ec, 1e-5);
    s.record("manifold loss d/dz", es, 1e-5);
    s.record("manifold loss d/dz'", et, 1e-5);
    s.record("transport d/dc", etr, 1e-5);

    let (mut ep, mut ex) = (Vec::new(), Vec::new());
    for t in 0..cfg.trials {
        let head = match t % 3 {
            0 => Head::Plain,
            1 => Head::Normalized,
            _ => Head::Laplacian {
                log_scale_min: -50.0,
                log_scale_max: 50.0,
            },
        };
        let net = MlpNet::new(&[3, 5, 4], 0.1, head, &mut rng)?;
        let x = rand_vec(&mut rng, 3, 1.0);
        let up = rand_vec(&mut rng, 4, 1.0);
        let cache = net.forward(&x)?;
        let (gp, gx) = net.backward(&cache, &up)?;
        let obj = |n: &MlpNet, xx: &[f64]| -> f64 {
            n.predict(xx).map(|o| o.iter().zip(&up).map(|(a, b)| a * b).sum()).unwrap_or(f64::NAN)
        };
        let fd_p = fd_gradient(net.params(), h, |p| {
            MlpNet::from_params(net.dims(), 0.1, head, p.to_vec()).map_or(f64::NAN, |n| obj(&n, &x))
        });
        ep.push(rel_error(&s.scale(&gp), &fd_p));
        let fd_x = fd_gradient(&x, h, |xx| obj(&net, xx));
        ex.push(rel_error(&s.scale(&gx), &fd_x));
    }
    s.record("MLP parameter gradients", ep, 1e-5);
    s.record("MLP input gradients", ex, 1e-5);

    let mut en = Vec::new();
    for t in 0..cfg.trials {
        let cfg_n = ContrastiveConfig {
            temperature: 0.7,
            distance: if t % 2 == 0 { Distance::Squared } else { Distance::Normalized },
            ..Default::default()
        };
        let a = rand_vec(&mut rng, 3, 1.0);
        let p = rand_vec(&mut rng, 3, 1.0);
        let negs: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
        let r = info_nce(&a, &p, &negs, &cfg_n, None)?;
        let fd_a = fd_gradient(&a, h, |aa| info_nce(aa, &p, &negs, &cfg_n, None).map_or(f64::NAN, |v| v.loss));
        let fd_p = fd_gradient(&p, h, |pp| info_nce(&a, pp, &negs, &cfg_n, None).map_or(f64::NAN, |v| v.loss));
        en.push(rel_error(&s.scale(&r.grad_anchor), &fd_a));
        en.push(rel_error(&s.scale(&r.grad_positive), &fd_p));
    }
    s.record("InfoNCE feature gradients", en, 1e-5);

    let (mut eq, mut ek) = (Vec::new(), Vec::new());
    for _ in 0..cfg.trials {
        let (mq, bq, mp, bp) = (
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.1..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.1..1.0),
        );
        let exact = kl_laplace_scalar(mq, bq, mp, bp);
        let quad = kl_quadrature(mq, bq, mp, bp);
        eq.push((exact - quad).abs() / exact.abs().max(1e-12));
        let q = LaplacianParams::new(vec![mq], vec![bq.ln()])?;
        let p = LaplacianParams::new(vec![mp], vec![bp.ln()])?;
        let kl = kl_laplacian(&q, &p)?;
        let analytic = s.scale(&[kl.grad_q_shift[0], kl.grad_q_log_scale[0], kl.grad_p_shift[0], kl.grad_p_log_scale[0]]);
        let fd = fd_gradient(&[mq, bq.ln(), mp, bp.ln()], h, |v| kl_laplace_scalar(v[0], v[1].exp(), v[2], v[3].exp()));
        ek.push(rel_error(&analytic, &fd));
    }
    s.record("Laplace KL vs quadrature", eq, 1e-6);
    s.record("Laplace KL gradients", ek, 1e-5);

    let mut eb = Vec::new();
    for _ in 0..cfg.trials {
        let (m, d) = (2, 4);
        let blocked = OperatorDictionary::from_params(m, d, 2, rand_vec(&mut rng, m * d * 2, 0.8))?;
        let dense_ops: Vec<_> = (0..m)
            .map(|k| crate::expm::BlockDiagMatrix::new(vec![blocked.operator(k).to_dense()]))
            .collect::<Result<_>>()?;
        let dense = OperatorDictionary::from_operators(&dense_ops)?;
        let z = rand_vec(&mut rng, d, 1.0);
        let zt = rand_vec(&mut rng, d, 1.0);
        let c = rand_vec(&mut rng, m, 0.7);
        let a = blocked.manifold_loss_value(&z, &zt, &c)?;
        let b = dense.manifold_loss_value(&z, &zt, &c)?;
        eb.push((a - b).abs() / b.abs().max(1e-12));
    }
    s.record("block-diagonal vs dense loss", eb, 1e-12);

    Ok(s.rows)
}

/// `∫ q log(q/p)` for univariate Laplacians by composite Simpson over
/// `±60` scales around both shifts, split at the kinks.
pub fn kl_quadrature(mq: f64, bq: f64, mp: f64, bp: f64) -> f64 {
    let lo = (mq - 60.0 * bq).min(mp - 60.0 * bp);
    let hi = (mq + 60.0 * bq).max(mp + 60.0 * bp);
    let integrand = |x: f64| {
        let lq = -(x - mq).abs() / bq - (2.0 * bq).ln();
        let lp = -(x - mp).abs() / bp - (2.0 * bp).ln();
        lq.exp() * (lq - lp)
    };
    let mut knots = vec![lo, mq.min(mp), mq.max(mp), hi];
    knots.dedup();
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let w = (b - a) / n as f64;
        let mut acc = integrand(a) + integrand(b);
        for i in 1..n {
            acc += integrand(a + i as f64 * w) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * w / 3.0
    };
    knots.windows(2).filter(|k| k[1] > k[0]).map(|k| simpson(k[0], k[1])).sum()
}

/// Fixed-width text table of the check results.
pub fn render_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<40} {:>14} {:>10}  result\n", "check", "max rel err", "tol");
    for r in rows {
        out.push_str(&format!(
            "{:<40} {:>14.3e} {:>10.0e}  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let rows = run_checks(&GradCheckConfig::default(), 11).unwrap();
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{}", render_table(&rows));
    }

    #[test]
    fn perturbation_is_detected() {
        let cfg = GradCheckConfig {
            perturb: 1e-3,
            ..Default::default()
        };
        let rows = run_checks(&cfg, 11).unwrap();
        assert!(rows.iter().filter(|r| r.name.contains("gradients")).all(|r| !r.passed));
    }
}

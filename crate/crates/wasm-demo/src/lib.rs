//! Browser bindings for the demo page in `www/`.
//!
//! The page drives three things: incremental operator training on a swiss
//! roll, a histogram of (optionally thresholded) Laplacian samples, and the
//! orbit of a hand-entered 2x2 generator.

use vlgo::config::SwissRollConfig;
use vlgo::data::{swiss_roll, NeighborTable};
use vlgo::inference::sample_laplacian;
use vlgo::inference::soft_threshold;
use vlgo::lie_train::{InferenceKind, LieTrainConfig, LieTrainer};
use vlgo::metrics::{operator_paths, symmetric_grid};
use vlgo::operators::{init_dictionary, OperatorDictionary};
use vlgo::rng::{stream, Rng};
use wasm_bindgen::prelude::*;

fn js(e: vlgo::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Swiss-roll operator learning, advanced a few batches at a time.
#[wasm_bindgen]
pub struct SwissRollDemo {
    points: Vec<Vec<f64>>,
    table: NeighborTable,
    trainer: LieTrainer,
    cfg: SwissRollConfig,
    pair_rng: Rng,
    step_rng: Rng,
    epoch: usize,
}

#[wasm_bindgen]
impl SwissRollDemo {
    /// `method` is `"fista"` or `"variational"`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, points: usize, method: &str, samples: usize, thresholded: bool) -> Result<SwissRollDemo, JsValue> {
        let kind = match method {
            "fista" => InferenceKind::Fista,
            "variational" => InferenceKind::Variational,
            other => return Err(JsValue::from_str(&format!("unknown inference method `{other}`"))),
        };
        let mut cfg = SwissRollConfig {
            points,
            batch_size: 100,
            ..SwissRollConfig::default()
        };
        cfg.train = LieTrainConfig {
            wall_clock: false,
            ..cfg.train
        };
        cfg.train.variational.samples = samples.max(1);
        cfg.train.variational.use_threshold = thresholded;
        // A faster operator step than the batch experiment, so that something
        // visible happens within a few hundred clicks' worth of batches.
        cfg.train.dict_optim.lr = 1e-2;
        let roll = swiss_roll(cfg.points, cfg.noise_sd, seed).map_err(js)?;
        let table = NeighborTable::build(&roll.points, cfg.k_hi).map_err(js)?;
        let dict = init_dictionary(cfg.n_ops, 3, 3, &cfg.init, &mut stream(seed, 50)).map_err(js)?;
        let trainer = LieTrainer::new(dict, kind, cfg.train.clone(), &mut stream(seed, 100)).map_err(js)?;
        Ok(Self {
            points: roll.points,
            table,
            trainer,
            cfg,
            pair_rng: stream(seed, 51),
            step_rng: stream(seed, 101),
            epoch: 0,
        })
    }

    /// Runs `steps` batches; returns `[epoch, mse, l1]` of the last one.
    pub fn train(&mut self, steps: usize) -> Result<Vec<f64>, JsValue> {
        let mut last = vec![self.epoch as f64, f64::NAN, f64::NAN];
        for _ in 0..steps {
            let (batch, _) = self
                .table
                .sample_pairs(&self.points, self.cfg.k_lo, self.cfg.k_hi, self.cfg.batch_size, &mut self.pair_rng)
                .map_err(js)?;
            let stats = self.trainer.step(&batch, &mut self.step_rng).map_err(js)?;
            self.epoch += 1;
            last = vec![self.epoch as f64, stats.mse, stats.l1];
        }
        Ok(last)
    }

    /// Point cloud as `[x0, y0, z0, x1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn operator_norms(&self) -> Vec<f64> {
        self.trainer.dict.operator_norms()
    }

    /// Path of point `start` under operator `op` for `c` in `[-n_c, n_c]`,
    /// flattened like `points`.
    pub fn path(&self, op: usize, start: usize, n_c: f64, step: f64) -> Result<Vec<f64>, JsValue> {
        let s = self
            .points
            .get(start)
            .ok_or_else(|| JsValue::from_str("start index out of range"))?;
        let path = operator_paths(&self.trainer.dict, s, op, &symmetric_grid(n_c, step)).map_err(js)?;
        Ok(path.into_iter().flatten().collect())
    }
}

/// `n` draws from `Laplace(shift, scale)`, soft-thresholded by `zeta` when
/// `thresholded` is set.
#[wasm_bindgen]
pub fn laplace_samples(shift: f64, scale: f64, zeta: f64, thresholded: bool, n: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    if !(scale > 0.0) {
        return Err(JsValue::from_str("scale must be positive"));
    }
    let mut rng = stream(seed, 0);
    let shift = vec![shift; n];
    let scale = vec![scale; n];
    let s = sample_laplacian(&shift, &scale, &mut rng);
    Ok(if thresholded {
        s.values.iter().map(|&v| soft_threshold(v, zeta)).collect()
    } else {
        s.values
    })
}

/// Orbit of `(x, y)` under `expm(c·[[a, b], [c2, d]])`, flattened.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn generator_orbit(a: f64, b: f64, c2: f64, d: f64, x: f64, y: f64, n_c: f64, step: f64) -> Result<Vec<f64>, JsValue> {
    let dict = OperatorDictionary::from_params(1, 2, 2, vec![a, b, c2, d]).map_err(js)?;
    let path = operator_paths(&dict, &[x, y], 0, &symmetric_grid(n_c, step)).map_err(js)?;
    Ok(path.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_orbit_stays_on_the_circle() {
        let orbit = generator_orbit(0.0, -1.0, 1.0, 0.0, 1.0, 0.0, 3.0, 0.5).unwrap();
        for p in orbit.chunks(2) {
            assert!((p[0].hypot(p[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholding_produces_exact_zeros() {
        let s = laplace_samples(0.0, 0.01, 0.01, true, 1000, 3).unwrap();
        let zeros = s.iter().filter(|&&v| v == 0.0).count();
        // P(|s| <= zeta) = 1 - exp(-1) for zeta equal to the scale.
        assert!((zeros as f64 / 1000.0 - 0.632).abs() < 0.06);
    }

    #[test]
    fn swissroll_training_runs() {
        let mut demo = SwissRollDemo::new(0, 300, "variational", 5, true).unwrap();
        let out = demo.train(3).unwrap();
        assert_eq!(out[0], 3.0);
        assert!(out[1].is_finite());
        assert_eq!(demo.points().len(), 900);
        assert_eq!(demo.path(2, 10, 1.0, 0.5).unwrap().len(), 15);
    }
}

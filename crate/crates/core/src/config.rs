//! Run configuration for the experiment runner.
//!
//! Every field has a default, so `{}` plus an `experiment` is a complete
//! config. Unknown fields are rejected and errors carry the JSON path of the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{Ablation, ManifoldClrConfig, ProbeConfig};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::inference::StepSizePolicy;
use crate::lie_train::LieTrainConfig;
use crate::operators::InitConfig;
use crate::semisup::{SemiMethod, SemiSupConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Swissroll,
    ManifoldclrToy,
    SemisupToy,
    CheckGrads,
    Paths,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Swissroll => "swissroll",
            ExperimentKind::ManifoldclrToy => "manifoldclr-toy",
            ExperimentKind::SemisupToy => "semisup-toy",
            ExperimentKind::CheckGrads => "check-grads",
            ExperimentKind::Paths => "paths",
        }
    }
}

/// Operator-path extraction settings shared by `swissroll` and `paths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Coefficients run over `[-n_c, n_c]` in steps of `step`.
    pub n_c: f64,
    pub step: f64,
    /// Number of start points, spread evenly over the data set.
    pub starts: usize,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            n_c: 2.0,
            step: 0.1,
            starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwissRollConfig {
    pub points: usize,
    pub noise_sd: f64,
    pub k_lo: usize,
    pub k_hi: usize,
    pub batch_size: usize,
    /// Pairs in the held-out distance-improvement set.
    pub heldout_pairs: usize,
    pub n_ops: usize,
    pub init: InitConfig,
    pub train: LieTrainConfig,
    pub run_fista: bool,
    /// Best-of-many sample counts `J`, each run standard and thresholded.
    pub samples: Vec<usize>,
    pub standard: bool,
    pub thresholded: bool,
    pub paths: PathConfig,
}

impl Default for SwissRollConfig {
    fn default() -> Self {
        Self {
            points: 5000,
            noise_sd: 0.0,
            k_lo: 20,
            k_hi: 60,
            batch_size: 500,
            heldout_pairs: 500,
            n_ops: 6,
            init: InitConfig {
                alpha: 0.0,
                beta_eig: 0.0,
                noise_std: 0.1,
                allow_trailing_cell: true,
            },
            train: LieTrainConfig::default(),
            run_fista: true,
            samples: vec![1, 5, 10, 20],
            standard: true,
            thresholded: true,
            paths: PathConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClrToyConfig {
    pub data: SynthConfig,
    /// Fresh points per class for the probe and effective rank.
    pub probe_per_class: usize,
    pub clr: ManifoldClrConfig,
    pub probe: ProbeConfig,
    /// Also train the SimCLR-degenerate configuration.
    pub compare_simclr: bool,
    /// Extra ablation systems, each trained with the `clr` settings as base.
    pub ablations: Vec<Ablation>,
}

impl Default for ClrToyConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            probe_per_class: 200,
            clr: ManifoldClrConfig::default(),
            probe: ProbeConfig::default(),
            compare_simclr: true,
            ablations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiToyConfig {
    pub data: SynthConfig,
    pub test_per_class: usize,
    /// ManifoldCLR pretraining that supplies features, operators and prior.
    pub pretrain: ManifoldClrConfig,
    pub semisup: SemiSupConfig,
    pub labels_per_class: usize,
    pub splits: usize,
    pub methods: Vec<SemiMethod>,
}

impl Default for SemiToyConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            test_per_class: 200,
            pretrain: ManifoldClrConfig::default(),
            semisup: SemiSupConfig::default(),
            labels_per_class: 5,
            splits: 20,
            methods: SemiMethod::ALL.to_vec(),
        }
    }
}

impl SemiToyConfig {
    /// Label-budget presets: 5, 50 or 100 labels per class.
    pub fn preset(labels_per_class: usize) -> Result<Self> {
        if ![5, 50, 100].contains(&labels_per_class) {
            return Err(Error::config("semisup_toy.labels_per_class", "presets exist for 5, 50 and 100 labels"));
        }
        Ok(Self {
            labels_per_class,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsRunConfig {
    /// Dictionary checkpoint to extrapolate.
    pub dictionary: Option<PathBuf>,
    /// Start points; when empty, points of a swiss roll are used.
    pub start_points: Vec<Vec<f64>>,
    pub paths: PathConfig,
}

impl Default for PathsRunConfig {
    fn default() -> Self {
        Self {
            dictionary: None,
            start_points: Vec::new(),
            paths: PathConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub swissroll: SwissRollConfig,
    pub manifoldclr_toy: ClrToyConfig,
    pub semisup_toy: SemiToyConfig,
    pub check_grads: GradCheckConfig,
    pub paths: PathsRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Swissroll,
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 1,
            swissroll: SwissRollConfig::default(),
            manifoldclr_toy: ClrToyConfig::default(),
            semisup_toy: SemiToyConfig::default(),
            check_grads: GradCheckConfig::default(),
            paths: PathsRunConfig::default(),
        }
    }
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

fn check(cond: bool, field: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Semantic checks beyond what the types enforce; only the selected
    /// experiment's section is checked.
    pub fn validate(&self) -> Result<()> {
        check(self.workers >= 1, "workers", "must be at least 1")?;
        match self.experiment {
            ExperimentKind::Swissroll => validate_swissroll(&self.swissroll),
            ExperimentKind::ManifoldclrToy => {
                let c = &self.manifoldclr_toy;
                validate_synth(&c.data, "manifoldclr_toy.data")?;
                validate_clr(&c.clr, "manifoldclr_toy.clr")?;
                check(c.probe_per_class >= 2, "manifoldclr_toy.probe_per_class", "must be at least 2")?;
                check(c.probe.epochs >= 1, "manifoldclr_toy.probe.epochs", "must be at least 1")?;
                check(
                    c.probe.test_fraction > 0.0 && c.probe.test_fraction < 1.0,
                    "manifoldclr_toy.probe.test_fraction",
                    "must lie in (0, 1)",
                )
            }
            ExperimentKind::SemisupToy => {
                let c = &self.semisup_toy;
                validate_synth(&c.data, "semisup_toy.data")?;
                validate_clr(&c.pretrain, "semisup_toy.pretrain")?;
                c.semisup.validate().map_err(|e| Error::config("semisup_toy.semisup", e.to_string()))?;
                check(c.labels_per_class >= 1, "semisup_toy.labels_per_class", "must be at least 1")?;
                check(
                    c.labels_per_class <= c.data.per_class,
                    "semisup_toy.labels_per_class",
                    "exceeds the examples per class",
                )?;
                check(c.splits >= 1, "semisup_toy.splits", "must be at least 1")?;
                check(!c.methods.is_empty(), "semisup_toy.methods", "must not be empty")?;
                check(c.test_per_class >= 1, "semisup_toy.test_per_class", "must be at least 1")
            }
            ExperimentKind::CheckGrads => {
                let c = &self.check_grads;
                check(c.trials >= 1, "check_grads.trials", "must be at least 1")?;
                check(positive(c.fd_step), "check_grads.fd_step", "must be positive")
            }
            ExperimentKind::Paths => {
                let p = &self.paths;
                match &p.dictionary {
                    None => return Err(Error::config("paths.dictionary", "a dictionary checkpoint is required")),
                    Some(path) => check(path.is_file(), "paths.dictionary", &format!("{} is not a file", path.display()))?,
                }
                validate_paths(&p.paths, "paths.paths")
            }
        }
    }
}

fn validate_paths(p: &PathConfig, at: &str) -> Result<()> {
    check(p.n_c >= 0.0 && p.n_c.is_finite(), &format!("{at}.n_c"), "must be finite and non-negative")?;
    check(positive(p.step), &format!("{at}.step"), "must be positive")?;
    check(p.n_c / p.step <= 1e5, &format!("{at}.step"), "grid would exceed 2e5 points")
}

fn validate_swissroll(c: &SwissRollConfig) -> Result<()> {
    check(c.points >= 2, "swissroll.points", "must be at least 2")?;
    check(c.noise_sd >= 0.0, "swissroll.noise_sd", "must be non-negative")?;
    check(c.k_lo >= 1 && c.k_lo < c.k_hi, "swissroll.k_lo", "need 1 <= k_lo < k_hi")?;
    check(c.k_hi < c.points, "swissroll.k_hi", "must be smaller than the number of points")?;
    check(c.batch_size >= 1, "swissroll.batch_size", "must be at least 1")?;
    check(c.n_ops >= 1, "swissroll.n_ops", "must be at least 1")?;
    check(c.train.epochs >= 1, "swissroll.train.epochs", "must be at least 1")?;
    check(c.train.fista.l1_weight >= 0.0, "swissroll.train.fista.l1_weight", "must be non-negative")?;
    check(c.train.fro_weight >= 0.0, "swissroll.train.fro_weight", "must be non-negative")?;
    check(positive(c.train.prior_scale), "swissroll.train.prior_scale", "must be positive")?;
    check(c.train.variational.beta_kl >= 0.0, "swissroll.train.variational.beta_kl", "must be non-negative")?;
    check(c.train.variational.zeta >= 0.0, "swissroll.train.variational.zeta", "must be non-negative")?;
    check(c.samples.iter().all(|&j| j >= 1), "swissroll.samples", "every J must be at least 1")?;
    check(
        c.run_fista || ((c.standard || c.thresholded) && !c.samples.is_empty()),
        "swissroll",
        "no variant selected",
    )?;
    if let StepSizePolicy::Backtracking { initial_lipschitz, growth } = c.train.fista.step {
        check(
            positive(initial_lipschitz) && growth > 1.0,
            "swissroll.train.fista.step",
            "need initial_lipschitz > 0 and growth > 1",
        )?;
    }
    validate_paths(&c.paths, "swissroll.paths")
}

fn validate_synth(c: &SynthConfig, at: &str) -> Result<()> {
    check(c.classes >= 2, &format!("{at}.classes"), "need at least two classes")?;
    check(c.per_class >= 1, &format!("{at}.per_class"), "must be at least 1")?;
    check(c.ambient_dim >= 1, &format!("{at}.ambient_dim"), "must be at least 1")?;
    check(c.intrinsic_dim <= c.ambient_dim, &format!("{at}.intrinsic_dim"), "exceeds ambient_dim")?;
    check(c.noise_sd >= 0.0 && c.center_sd >= 0.0, &format!("{at}.noise_sd"), "must be non-negative")
}

fn validate_clr(c: &ManifoldClrConfig, at: &str) -> Result<()> {
    c.validate().map_err(|e| Error::config(at, e.to_string()))?;
    check(c.epochs >= 1, &format!("{at}.epochs"), "must be at least 1")?;
    check(c.n_ops >= 1, &format!("{at}.n_ops"), "must be at least 1")
}

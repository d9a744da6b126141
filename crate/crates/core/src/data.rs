//! Synthetic datasets: the 3-D swiss roll with nearest-neighbor point pairs,
//! and class-structured manifolds for the contrastive and semi-supervised toys.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Paired source and target points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointPairBatch {
    pub sources: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl PointPairBatch {
    pub fn new(sources: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::invalid("pair batch has unequal source and target counts"));
        }
        if let Some(d) = sources.first().map(Vec::len) {
            if sources.iter().chain(&targets).any(|p| p.len() != d) {
                return Err(Error::invalid("pair batch points have unequal dimensions"));
            }
        }
        Ok(Self { sources, targets })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Point on the swiss-roll surface `(t cos t, h, t sin t)`.
pub fn swiss_roll_surface(t: f64, h: f64) -> [f64; 3] {
    [t * t.cos(), h, t * t.sin()]
}

/// Swiss-roll samples with their latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SwissRoll {
    pub points: Vec<Vec<f64>>,
    /// `(t, h)` for every point.
    pub latents: Vec<[f64; 2]>,
}

/// `n` points with `t ~ U(1.5π, 4.5π)`, `h ~ U(0, 21)` and isotropic Gaussian
/// noise of standard deviation `noise_sd`.
pub fn swiss_roll(n: usize, noise_sd: f64, seed: u64) -> Result<SwissRoll> {
    if n == 0 {
        return Err(Error::invalid("swiss roll needs n >= 1"));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::invalid("noise_sd must be non-negative"));
    }
    let mut rng = stream(seed, 0);
    let mut points = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.gen_range(1.5 * PI..4.5 * PI);
        let h = rng.gen_range(0.0..21.0);
        let mut p = swiss_roll_surface(t, h).to_vec();
        if noise_sd > 0.0 {
            for v in &mut p {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sd * e;
            }
        }
        points.push(p);
        latents.push([t, h]);
    }
    Ok(SwissRoll { points, latents })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbors of every point ordered by `(distance, index)`, excluding the
/// point itself, truncated to rank `k_max`.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    k_max: usize,
    neighbors: Vec<Vec<usize>>,
}

impl NeighborTable {
    pub fn build(points: &[Vec<f64>], k_max: usize) -> Result<Self> {
        let n = points.len();
        if k_max == 0 || k_max >= n {
            return Err(Error::invalid(format!(
                "neighbor rank {k_max} must be in [1, n) for n = {n}"
            )));
        }
        let mut neighbors = Vec::with_capacity(n);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for (i, p) in points.iter().enumerate() {
            order.clear();
            order.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, q)| (sq_dist(p, q), j)),
            );
            let cmp = |a: &(f64, usize), b: &(f64, usize)| {
                a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
            };
            if k_max < order.len() {
                order.select_nth_unstable_by(k_max - 1, cmp);
                order.truncate(k_max);
            }
            order.sort_unstable_by(cmp);
            neighbors.push(order.iter().map(|&(_, j)| j).collect());
        }
        Ok(Self { k_max, neighbors })
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Index of the `rank`-th nearest neighbor of `point` (rank 1 is nearest).
    pub fn neighbor(&self, point: usize, rank: usize) -> usize {
        self.neighbors[point][rank - 1]
    }

    /// Samples `batch_size` anchors uniformly and pairs each with its `k`-th
    /// neighbor, `k ~ U{k_lo..=k_hi}`. Returns the pair batch and the
    /// `(anchor, partner, rank)` triples.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        points: &[Vec<f64>],
        k_lo: usize,
        k_hi: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<(PointPairBatch, Vec<(usize, usize, usize)>)> {
        if k_lo == 0 || k_lo > k_hi || k_hi > self.k_max {
            return Err(Error::invalid(format!(
                "neighbor rank range [{k_lo}, {k_hi}] must lie within [1, {}]",
                self.k_max
            )));
        }
        let n = points.len();
        let mut sources = Vec::with_capacity(batch_size);
        let mut targets = Vec::with_capacity(batch_size);
        let mut picks = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let a = rng.gen_range(0..n);
            let k = rng.gen_range(k_lo..=k_hi);
            let b = self.neighbor(a, k);
            sources.push(points[a].clone());
            targets.push(points[b].clone());
            picks.push((a, b, k));
        }
        Ok((PointPairBatch { sources, targets }, picks))
    }
}

/// One batch of nearest-neighbor pairs; see [`NeighborTable::sample_pairs`].
pub fn neighbor_pairs(
    points: &[Vec<f64>],
    k_lo: usize,
    k_hi: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PointPairBatch> {
    if k_lo >= k_hi {
        return Err(Error::invalid(format!("need k_lo < k_hi, got {k_lo} and {k_hi}")));
    }
    if k_hi >= points.len() {
        return Err(Error::invalid(format!(
            "k_hi = {k_hi} must be smaller than the number of points {}",
            points.len()
        )));
    }
    let table = NeighborTable::build(points, k_hi)?;
    let mut rng = stream(seed, 1);
    Ok(table.sample_pairs(points, k_lo, k_hi, batch_size, &mut rng)?.0)
}

/// Smooth embedding of a torus segment for one class:
/// `x(θ) = center + W·[cos(Ωθ + φ), sin(Ωθ + φ)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub center: Vec<f64>,
    /// `n_freq × intrinsic_dim`, row-major.
    pub frequencies: Vec<f64>,
    pub phases: Vec<f64>,
    /// `ambient_dim × 2·n_freq`, row-major.
    pub mixing: Vec<f64>,
    pub intrinsic_dim: usize,
}

impl ClassEmbedding {
    pub fn ambient_dim(&self) -> usize {
        self.center.len()
    }

    pub fn embed(&self, latent: &[f64]) -> Vec<f64> {
        let n_freq = self.phases.len();
        let mut feats = Vec::with_capacity(2 * n_freq);
        for f in 0..n_freq {
            let arg: f64 = self.phases[f]
                + (0..self.intrinsic_dim)
                    .map(|k| self.frequencies[f * self.intrinsic_dim + k] * latent[k])
                    .sum::<f64>();
            feats.push(arg.cos());
            feats.push(arg.sin());
        }
        let cols = feats.len();
        self.center
            .iter()
            .enumerate()
            .map(|(r, c)| {
                c + self.mixing[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&feats)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// Generator settings for [`synth_class_manifolds`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    /// Number of sinusoid pairs in each embedding.
    pub n_freq: usize,
    /// Latent segment is `[0, extent)` per intrinsic coordinate.
    pub extent: f64,
    /// Standard deviation of class centers.
    pub center_sd: f64,
    /// Scale of the mixing matrix entries.
    pub mixing_sd: f64,
    pub noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 200,
            ambient_dim: 32,
            intrinsic_dim: 2,
            n_freq: 4,
            extent: 2.0 * PI,
            center_sd: 0.1,
            mixing_sd: 0.5,
            noise_sd: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClassDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub latents: Vec<Vec<f64>>,
    pub classes: Vec<ClassEmbedding>,
    pub noise_sd: f64,
}

impl SynthClassDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// A fresh point of `class` at `latent` with observation noise.
    pub fn render<R: Rng + ?Sized>(&self, class: usize, latent: &[f64], rng: &mut R) -> Vec<f64> {
        let mut x = self.classes[class].embed(latent);
        if self.noise_sd > 0.0 {
            for v in &mut x {
                let e: f64 = StandardNormal.sample(rng);
                *v += self.noise_sd * e;
            }
        }
        x
    }

    /// Two views of instance `i`: its latent perturbed twice by Gaussian
    /// steps of standard deviation `step_sd`.
    pub fn positive_pair<R: Rng + ?Sized>(&self, i: usize, step_sd: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let class = self.labels[i];
        let base = &self.latents[i];
        let view = |rng: &mut R| {
            let lat: Vec<f64> = base
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(rng);
                    t + step_sd * e
                })
                .collect();
            self.render(class, &lat, rng)
        };
        let a = view(rng);
        let b = view(rng);
        (a, b)
    }

    /// Fresh dataset from the same class embeddings.
    pub fn resample(&self, per_class: usize, extent: f64, seed: u64) -> SynthClassDataset {
        let mut rng = stream(seed, 7);
        let dim = self.classes.first().map_or(0, |c| c.intrinsic_dim);
        let mut out = SynthClassDataset {
            points: Vec::new(),
            labels: Vec::new(),
            latents: Vec::new(),
            classes: self.classes.clone(),
            noise_sd: self.noise_sd,
        };
        for k in 0..self.classes.len() {
            for _ in 0..per_class {
                let lat: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..extent)).collect();
                let x = out.render(k, &lat, &mut rng);
                out.points.push(x);
                out.labels.push(k);
                out.latents.push(lat);
            }
        }
        out
    }
}

/// `K` classes, each a random smooth embedding of an `intrinsic_dim` torus
/// segment into `ambient_dim` dimensions.
pub fn synth_class_manifolds(cfg: &SynthConfig, seed: u64) -> Result<SynthClassDataset> {
    if cfg.classes == 0 || cfg.ambient_dim == 0 {
        return Err(Error::invalid("need at least one class and a positive ambient dimension"));
    }
    if cfg.intrinsic_dim > cfg.ambient_dim {
        return Err(Error::invalid(format!(
            "intrinsic_dim {} exceeds ambient_dim {}",
            cfg.intrinsic_dim, cfg.ambient_dim
        )));
    }
    let mut rng = stream(seed, 6);
    let center_dist = Normal::new(0.0, cfg.center_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mix_scale = cfg.mixing_sd / (2.0 * cfg.n_freq as f64).sqrt();
    let classes = (0..cfg.classes)
        .map(|_| {
            let center = (0..cfg.ambient_dim).map(|_| center_dist.sample(&mut rng)).collect();
            let frequencies = (0..cfg.n_freq * cfg.intrinsic_dim)
                .map(|_| {
                    let f: f64 = rng.gen_range(0.5..1.5);
                    if rng.gen_bool(0.5) {
                        f
                    } else {
                        -f
                    }
                })
                .collect();
            let phases = (0..cfg.n_freq).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mixing = (0..cfg.ambient_dim * 2 * cfg.n_freq)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    mix_scale * e
                })
                .collect();
            ClassEmbedding {
                center,
                frequencies,
                phases,
                mixing,
                intrinsic_dim: cfg.intrinsic_dim,
            }
        })
        .collect();
    let template = SynthClassDataset {
        points: Vec::new(),
        labels: Vec::new(),
        latents: Vec::new(),
        classes,
        noise_sd: cfg.noise_sd,
    };
    Ok(template.resample(cfg.per_class, cfg.extent, seed))
}

/// Stratified split of indices into `(train, test)` with `test_fraction` of
/// each class held out.
pub fn stratified_split<R: Rng + ?Sized>(labels: &[usize], test_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(rng);
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Writes one point per row with an optional trailing label column.
pub fn write_points_csv(path: &Path, points: &[Vec<f64>], labels: Option<&[usize]>) -> Result<()> {
    let dim = points.first().map_or(0, Vec::len);
    let mut out = String::new();
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, p) in points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            row.push(l[i].to_string());
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

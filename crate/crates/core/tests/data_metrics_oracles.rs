mod common;

use common::*;
use rand::Rng as _;
use vlgo::data::{swiss_roll, synth_class_manifolds, NeighborTable, SynthConfig};
use vlgo::metrics::{effective_rank, emit, metrics_csv, parse_metrics_csv, MetricsRecord, RunSummary};
use vlgo::rng::stream;

/// Rank of `b` among the neighbors of `a` under `(distance, index)` order.
fn brute_rank(points: &[Vec<f64>], a: usize, b: usize) -> usize {
    let mut order: Vec<usize> = (0..points.len()).filter(|&j| j != a).collect();
    order.sort_by(|&i, &j| {
        sq_dist(&points[a], &points[i])
            .partial_cmp(&sq_dist(&points[a], &points[j]))
            .unwrap()
            .then(i.cmp(&j))
    });
    order.iter().position(|&j| j == b).unwrap() + 1
}

#[test]
fn neighbor_ranks_agree_with_brute_force_sort() {
    let roll = swiss_roll(1500, 0.0, 50).unwrap();
    let table = NeighborTable::build(&roll.points, 60).unwrap();
    let (batch, picks) = table.sample_pairs(&roll.points, 20, 60, 500, &mut stream(50, 1)).unwrap();
    assert_eq!(batch.len(), 500);
    for (i, &(a, b, k)) in picks.iter().enumerate() {
        assert!((20..=60).contains(&k));
        assert_eq!(brute_rank(&roll.points, a, b), k);
        assert_eq!(batch.sources[i], roll.points[a]);
        assert_eq!(batch.targets[i], roll.points[b]);
    }
}

#[test]
fn duplicate_points_break_ties_by_index() {
    let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
    let table = NeighborTable::build(&pts, 3).unwrap();
    assert_eq!((1..=3).map(|k| table.neighbor(0, k)).collect::<Vec<_>>(), vec![1, 2, 3]);
    for a in 0..4 {
        for k in 1..=3 {
            assert_eq!(brute_rank(&pts, a, table.neighbor(a, k)), k);
        }
    }
}

/// Two-NN maximum-likelihood intrinsic dimension.
fn two_nn_dimension(points: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<f64> = points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, q)| sq_dist(p, q).sqrt()).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sum += (d[1] / d[0]).ln();
    }
    points.len() as f64 / sum
}

#[test]
fn class_manifolds_have_the_configured_intrinsic_dimension() {
    for intrinsic in [1, 2, 3] {
        let cfg = SynthConfig {
            classes: 2,
            per_class: 1500,
            intrinsic_dim: intrinsic,
            noise_sd: 0.0,
            ..SynthConfig::default()
        };
        let data = synth_class_manifolds(&cfg, 51).unwrap();
        let class0: Vec<Vec<f64>> = data.points.iter().zip(&data.labels).filter(|(_, &l)| l == 0).map(|(p, _)| p.clone()).collect();
        let est = two_nn_dimension(&class0);
        assert!((est - intrinsic as f64).abs() <= 1.0, "intrinsic {intrinsic}: estimate {est}");
    }
}

#[test]
fn swiss_roll_points_lie_on_the_surface() {
    let roll = swiss_roll(5000, 0.0, 52).unwrap();
    for (p, [t, h]) in roll.points.iter().zip(&roll.latents) {
        let want = [t * t.cos(), *h, t * t.sin()];
        assert!(p.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn isotropic_gaussian_has_full_effective_rank() {
    let mut r = stream(53, 0);
    let rows: Vec<Vec<f64>> = (0..10_000)
        .map(|_| (0..6).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect();
    let er = effective_rank(&rows).unwrap();
    assert!((er - 6.0).abs() < 0.3, "{er}");
}

#[test]
fn effective_rank_is_bounded_by_shape() {
    let mut r = rng(54);
    for (n, d) in [(2, 5), (3, 3), (4, 10), (20, 3), (7, 7)] {
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(d, 1.0, &mut r)).collect();
            let er = effective_rank(&rows).unwrap();
            assert!(er >= 1.0 - 1e-12 && er <= (n - 1).min(d) as f64 + 1e-9, "{n}x{d}: {er}");
        }
    }
}

fn record(epoch: usize, r: &mut impl rand::Rng) -> MetricsRecord {
    MetricsRecord {
        epoch,
        mse: r.gen(),
        l1: r.gen::<f64>() * 1e-7,
        kl: r.gen::<f64>() * 1e9,
        di_mean: if epoch % 2 == 0 { Some(r.gen()) } else { None },
        runtime_s: epoch as f64 * 0.1,
        effective_rank: None,
        op_fro: vec![r.gen(), 1.0 / 3.0],
    }
}

#[test]
fn csv_is_byte_stable_and_round_trips() {
    let fixed = MetricsRecord {
        epoch: 3,
        mse: 0.1,
        l1: 2.5e-8,
        kl: 1e21,
        di_mean: Some(0.75),
        runtime_s: 1.0,
        effective_rank: None,
        op_fro: vec![1.0 / 3.0, 0.0],
    };
    assert_eq!(
        metrics_csv(&[fixed], 2).unwrap(),
        "epoch,mse,l1,kl,di_mean,runtime_s,effective_rank,op_fro_1,op_fro_2\n\
         3,0.1,0.000000025,1000000000000000000000,0.75,1,,0.3333333333333333,0\n"
    );
    let mut r = rng(55);
    let recs: Vec<MetricsRecord> = (1..=30).map(|e| record(e, &mut r)).collect();
    assert_eq!(parse_metrics_csv(&metrics_csv(&recs, 2).unwrap()).unwrap(), recs);
}

#[test]
fn summary_echoes_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = vlgo::config::RunConfig::default();
    let summary = RunSummary {
        experiment: "swissroll".into(),
        seed: 9,
        config: serde_json::to_value(&cfg).unwrap(),
        final_metrics: None,
        wall_clock_s: 0.0,
        results: serde_json::Value::Null,
    };
    let csv = dir.path().join("m.csv");
    let json = dir.path().join("s.json");
    emit(&[], 6, &csv, &json, &summary).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1);
    let back: RunSummary = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let echoed: vlgo::config::RunConfig = serde_json::from_value(back.config).unwrap();
    assert_eq!(echoed, cfg);
    let err = emit(&[], 6, &dir.path().join("m.csv/x"), &json, &summary).unwrap_err();
    assert!(matches!(err, vlgo::Error::Io { .. }));
}

mod common;

use common::*;
use rand::{Rng as _, RngCore};
use vlgo::contrastive::{
    batch_info_nce, info_nce, linear_probe, ClrModel, ContrastiveConfig, Distance, ManifoldClr, ManifoldClrConfig,
    ProbeConfig,
};
use vlgo::inference::sample_laplacian;
use vlgo::nn::{Head, MlpNet};
use vlgo::optim::Optimizer;
use vlgo::rng::stream;

/// Eq. 4 written out: `−log(e^{s_p} / (e^{s_p} + Σ e^{s_n}))`, `s = −D/τ`.
fn direct_info_nce(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64, normalized: bool) -> f64 {
    let unit = |v: &[f64]| -> Vec<f64> {
        if normalized {
            let n = norm(v);
            v.iter().map(|x| x / n).collect()
        } else {
            v.to_vec()
        }
    };
    let (a, p) = (unit(a), unit(p));
    let sp = (-sq_dist(&a, &p) / tau).exp();
    let sn: f64 = negs.iter().map(|n| (-sq_dist(&a, &unit(n)) / tau).exp()).sum();
    -(sp / (sp + sn)).ln()
}

fn cfg(distance: Distance, tau: f64) -> ContrastiveConfig {
    ContrastiveConfig { temperature: tau, distance, ..ContrastiveConfig::default() }
}

#[test]
fn value_matches_direct_formula() {
    let mut r = rng(40);
    for distance in [Distance::Squared, Distance::Normalized] {
        for tau in [0.1, 0.5, 2.0] {
            let a = random_vec(3, 1.0, &mut r);
            let p = random_vec(3, 1.0, &mut r);
            let negs = vec![random_vec(3, 1.0, &mut r)];
            let got = info_nce(&a, &p, &negs, &cfg(distance, tau), None).unwrap().loss;
            let want = direct_info_nce(&a, &p, &negs, tau, distance == Distance::Normalized);
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn permuting_negatives_leaves_the_loss_unchanged() {
    let mut r = rng(41);
    let a = random_vec(5, 1.0, &mut r);
    let p = random_vec(5, 1.0, &mut r);
    let mut negs: Vec<Vec<f64>> = (0..7).map(|_| random_vec(5, 1.0, &mut r)).collect();
    let c = cfg(Distance::Squared, 0.5);
    let base = info_nce(&a, &p, &negs, &c, None).unwrap().loss;
    for _ in 0..10 {
        let i = r.gen_range(0..negs.len());
        let j = r.gen_range(0..negs.len());
        negs.swap(i, j);
        assert!((info_nce(&a, &p, &negs, &c, None).unwrap().loss - base).abs() < 1e-12);
    }
}

#[test]
fn loss_falls_as_the_positive_approaches() {
    let mut r = rng(42);
    let a = random_vec(4, 1.0, &mut r);
    let dir = random_vec(4, 1.0, &mut r);
    let negs: Vec<Vec<f64>> = (0..5).map(|_| random_vec(4, 1.0, &mut r)).collect();
    let c = cfg(Distance::Squared, 0.5);
    let mut prev = f64::INFINITY;
    for k in (0..=20).rev() {
        let t = k as f64 * 0.1;
        let p: Vec<f64> = a.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
        let l = info_nce(&a, &p, &negs, &c, None).unwrap().loss;
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(43);
    let h = 1e-6;
    let head = MlpNet::new(&[4, 6, 3], 0.01, Head::Plain, &mut stream(43, 0)).unwrap();
    for distance in [Distance::Squared, Distance::Normalized] {
        for use_projection in [false, true] {
            let c = ContrastiveConfig { use_projection, ..cfg(distance, 0.7) };
            let hd = use_projection.then_some(&head);
            let a = random_vec(4, 1.0, &mut r);
            let p = random_vec(4, 1.0, &mut r);
            let negs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(4, 1.0, &mut r)).collect();
            let out = info_nce(&a, &p, &negs, &c, hd).unwrap();
            let f = |a: &[f64], p: &[f64], negs: &[Vec<f64>], hd: Option<&MlpNet>| info_nce(a, p, negs, &c, hd).unwrap().loss;
            assert!(rel_err(&out.grad_anchor, &central_diff(&a, h, |x| f(x, &p, &negs, hd))) < 1e-5);
            assert!(rel_err(&out.grad_positive, &central_diff(&p, h, |x| f(&a, x, &negs, hd))) < 1e-5);
            for k in 0..negs.len() {
                let fd = central_diff(&negs[k], h, |x| {
                    let mut n2 = negs.clone();
                    n2[k] = x.to_vec();
                    f(&a, &p, &n2, hd)
                });
                assert!(rel_err(&out.grad_negatives[k], &fd) < 1e-5);
            }
            if use_projection {
                let fd = central_diff(head.params(), h, |w| {
                    let hh = MlpNet::from_params(head.dims(), 0.01, Head::Plain, w.to_vec()).unwrap();
                    f(&a, &p, &negs, Some(&hh))
                });
                assert!(rel_err(out.grad_head.as_ref().unwrap(), &fd) < 1e-5);
            }
        }
    }
}

#[test]
fn batch_loss_uses_other_positives_as_negatives() {
    let mut r = rng(44);
    let anchors: Vec<Vec<f64>> = (0..5).map(|_| random_vec(3, 1.0, &mut r)).collect();
    let positives: Vec<Vec<f64>> = (0..5).map(|_| random_vec(3, 1.0, &mut r)).collect();
    let c = cfg(Distance::Squared, 0.5);
    let batch = batch_info_nce(&anchors, &positives, &c, None).unwrap();
    let mut want = 0.0;
    for i in 0..5 {
        let negs: Vec<Vec<f64>> = (0..5).filter(|&j| j != i).map(|j| positives[j].clone()).collect();
        want += direct_info_nce(&anchors[i], &positives[i], &negs, 0.5, false) / 5.0;
    }
    assert!((batch.loss - want).abs() < 1e-12);
}

fn toy_views(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let a: Vec<Vec<f64>> = (0..n).map(|_| random_vec(d, 1.0, &mut r)).collect();
    let b = a.iter().map(|x| x.iter().map(|v| v + 0.05 * r.gen_range(-1.0..1.0)).collect()).collect();
    (a, b)
}

#[test]
fn degenerate_config_is_a_plain_simclr_step() {
    let cfg = ManifoldClrConfig::default().simclr();
    let model = ClrModel::new(6, &cfg, &mut stream(45, 0)).unwrap();
    let mut reference = model.backbone.clone();
    let mut trainer = ManifoldClr::new(model, cfg.clone()).unwrap();
    let mut opt = Optimizer::new(cfg.backbone_optim, reference.n_params());
    for step in 0..3 {
        let (v1, v2) = toy_views(16, 6, 100 + step);
        // Reference: InfoNCE between the two views' features, backpropagated
        // through the backbone and applied with the backbone optimizer.
        let c1: Vec<_> = v1.iter().map(|x| reference.forward(x).unwrap()).collect();
        let c2: Vec<_> = v2.iter().map(|x| reference.forward(x).unwrap()).collect();
        let z: Vec<Vec<f64>> = c1.iter().map(|c| c.output().to_vec()).collect();
        let zp: Vec<Vec<f64>> = c2.iter().map(|c| c.output().to_vec()).collect();
        let nce = batch_info_nce(&z, &zp, &cfg.contrastive, None).unwrap();
        let mut g = vec![0.0; reference.n_params()];
        for i in 0..z.len() {
            reference.backward_into(&c1[i], &nce.grad_anchors[i], &mut g).unwrap();
            reference.backward_into(&c2[i], &nce.grad_positives[i], &mut g).unwrap();
        }
        opt.step(reference.params_mut(), &mut g);

        let mut rng_a = stream(46, step);
        let losses = trainer.step(&v1, &v2, &mut rng_a).unwrap();
        assert_eq!(losses.contrastive, nce.loss);
        assert_eq!(losses.total, nce.loss);
        assert_eq!((losses.manifold, losses.kl), (0.0, 0.0));
        assert_eq!(trainer.model.backbone.params(), reference.params());
        // The degenerate step draws nothing from the rng.
        assert_eq!(rng_a.next_u64(), stream(46, step).next_u64());
    }
}

#[test]
fn zero_prior_leaves_features_in_place() {
    let cfg = ManifoldClrConfig::default();
    let model = ClrModel::new(6, &cfg, &mut stream(47, 0)).unwrap();
    let z = random_vec(cfg.feature_dim, 1.0, &mut rng(47));
    let s = sample_laplacian(&vec![0.0; cfg.n_ops], &vec![0.0; cfg.n_ops], &mut stream(47, 1));
    assert!(s.values.iter().all(|&c| c == 0.0));
    assert_eq!(model.dict.transport(&s.values, &z).unwrap(), z);
}

fn blobs(k: usize, per: usize, d: usize, sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| random_vec(d, sep, &mut r)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            xs.push(center.iter().map(|v| v + 0.1 * r.gen_range(-1.0..1.0)).collect());
            ys.push(c);
        }
    }
    (xs, ys)
}

#[test]
fn probe_separates_blobs() {
    let (x, y) = blobs(2, 200, 4, 3.0, 48);
    let acc = linear_probe(&x, &y, &ProbeConfig::default(), 1).unwrap();
    assert!(acc > 0.99, "{acc}");
    assert_eq!(acc, linear_probe(&x, &y, &ProbeConfig::default(), 1).unwrap());
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let k = 4;
    let (x, _) = blobs(k, 250, 6, 3.0, 49);
    let mut accs = Vec::new();
    for seed in 0..5 {
        let mut r = rng(500 + seed);
        let y: Vec<usize> = (0..x.len()).map(|_| r.gen_range(0..k)).collect();
        accs.push(linear_probe(&x, &y, &ProbeConfig::default(), seed).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    // 300 test points per probe, 5 probes: binomial sd ≈ 0.011.
    let sd = (0.25f64 * 0.75 / 1500.0).sqrt();
    assert!((mean - 0.25).abs() < 4.0 * sd, "{accs:?}");
}

use amil_core::anomaly::{mahalanobis, mahalanobis_with_gradient};
use amil_core::autodiff::{softmax_rows, Graph};
use amil_core::data::{generate, split_by_group};
use amil_core::linalg::Cholesky;
use amil_core::metrics::{auroc, evaluate, histogram};
use amil_core::model::{encode, forward_bag, AttentionNorm, ModelParams};
use amil_core::training::{beta, combined_loss};
use amil_core::{em_fit, AnomalyReference, Bag, Dataset, EmConfig, GeneratorConfig, GmmParams, Instance, ModelConfig, Tensor2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn random_spd(k: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let b = random_matrix(k, k, rng);
    let mut a = b.matmul_t(&b).unwrap();
    for i in 0..k {
        a[(i, i)] += 0.1;
    }
    a
}

fn small_model() -> ModelConfig {
    ModelConfig {
        input_dim: 5,
        embed_dim: 3,
        n_classes: 3,
        encoder_hidden: vec![6, 4],
        attention_hidden: 4,
        ..ModelConfig::default()
    }
}

fn reference_for(params: &ModelParams, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> AnomalyReference {
    let x = random_matrix(40, cfg.input_dim, rng);
    let bag = bag_from(&x, 0);
    let z = encode(params, &bag, cfg).unwrap();
    let g = em_fit(&z, 1, &EmConfig::default(), None).unwrap();
    AnomalyReference::calibrate(g, &z, true).unwrap()
}

fn bag_from(x: &Tensor2, label: usize) -> Bag {
    Bag {
        bag_id: "b".into(),
        group_id: "g".into(),
        label,
        instances: x.iter_rows().map(|r| Instance::new(r.to_vec())).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(rows, cols, &mut rng).map(|v| v * scale);
        let s = softmax_rows(&x);
        for row in s.iter_rows() {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_leaf_has_zero_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let a = g.leaf(random_matrix(3, 4, &mut rng));
        let unused = g.leaf(random_matrix(2, 2, &mut rng));
        let t = g.tanh(a);
        let _dead = g.relu(unused);
        let loss = g.sum(t);
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(grads.get(unused).max_abs(), 0.0);
        prop_assert_eq!(grads.get(a).shape(), (3, 4));
    }

    #[test]
    fn cholesky_round_trip(seed in any::<u64>(), k in 1usize..65) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_spd(k, &mut rng);
        let c = Cholesky::factor(&a).unwrap();
        let r = c.reconstruct();
        let err = r.zip_map(&a, |x, y| x - y).norm();
        prop_assert!(err <= 1e-10 * a.norm(), "k={} err={}", k, err);
    }

    #[test]
    fn mahalanobis_nondecreasing_along_rays(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = GmmParams::new(vec![1.0], vec![mean.clone()], vec![random_spd(k, &mut rng)]).unwrap();
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut prev = 0.0;
        for step in 0..30 {
            let t = step as f64 * 0.25;
            let z: Vec<f64> = mean.iter().zip(&v).map(|(m, d)| m + t * d).collect();
            let d = mahalanobis(&g, &z).unwrap();
            prop_assert!(d >= prev - 1e-12);
            prev = d;
        }
    }

    #[test]
    fn whitening_reduces_to_euclidean(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cov = random_spd(k, &mut rng);
        let g = GmmParams::new(vec![1.0], vec![mean.clone()], vec![cov]).unwrap();
        let chol = &g.cholesky()[0];
        // z = mu + L w  =>  d(z) = |w|.
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lw = chol.lower().matmul(&Tensor2::col_vector(&w)).unwrap();
        let z: Vec<f64> = mean.iter().zip(lw.as_slice()).map(|(m, v)| m + v).collect();
        let euclid = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = mahalanobis(&g, &z).unwrap();
        prop_assert!((d - euclid).abs() <= 1e-10 * (1.0 + euclid), "{} vs {}", d, euclid);
    }

    #[test]
    fn mahalanobis_gradient_away_from_center(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GmmParams::new(vec![1.0], vec![vec![0.0; k]], vec![random_spd(k, &mut rng)]).unwrap();
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        prop_assume!(mahalanobis(&g, &z).unwrap() > 1e-3);
        let (_, grad) = mahalanobis_with_gradient(&g, &z).unwrap();
        for i in 0..k {
            let (mut p, mut m) = (z.clone(), z.clone());
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (mahalanobis(&g, &p).unwrap() - mahalanobis(&g, &m).unwrap()) / 2e-5;
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            prop_assert!(rel < 1e-4);
        }
    }

    #[test]
    fn em_states_stay_valid_after_every_iteration(seed in any::<u64>(), comps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_matrix(120, 3, &mut rng);
        let mut prev_ll = f64::NEG_INFINITY;
        for iters in 1..8 {
            let cfg = EmConfig { max_iterations: iters, seed, ..EmConfig::default() };
            let g = em_fit(&data, comps, &cfg, None).unwrap();
            let wsum: f64 = g.weights().iter().sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
            prop_assert!(g.weights().iter().all(|&w| w >= 0.0));
            for c in g.covariances() {
                prop_assert!(c.is_symmetric(1e-12));
                prop_assert!(Cholesky::factor_exact(c, 0.0).is_ok());
            }
            let ll = g.log_likelihood(&data).unwrap();
            prop_assert!(ll >= prev_ll - 1e-9);
            prev_ll = ll;
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let pos: Vec<bool> = (0..n).map(|i| i == 0 || (i != 1 && rng.random_bool(0.4))).collect();
        let base = auroc(&scores, &pos).unwrap();
        let t1: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp()).collect();
        let t2: Vec<f64> = scores.iter().map(|s| s * s * s - 4.0).collect();
        prop_assert_eq!(base, auroc(&t1, &pos).unwrap());
        prop_assert_eq!(base, auroc(&t2, &pos).unwrap());
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((base + auroc(&neg, &pos).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_invariant_under_relabeling(seed in any::<u64>(), n in 3usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 4;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random::<f64>()).collect()).collect();
        let perm = [2, 0, 3, 1];
        let a = evaluate(&preds, &labels, &scores, c).unwrap();
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = preds.iter().map(|&l| perm[l]).collect();
        let ps: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| {
                let mut out = vec![0.0; c];
                for (i, &v) in s.iter().enumerate() {
                    out[perm[i]] = v;
                }
                out
            })
            .collect();
        let b = evaluate(&pp, &pl, &ps, c).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
        for (i, row) in a.confusion.iter().enumerate() {
            let count = labels.iter().filter(|&&l| l == i).count();
            prop_assert_eq!(row.iter().sum::<usize>(), count);
        }
    }

    #[test]
    fn histogram_counts_every_value(seed in any::<u64>(), n in 0usize..200, bins in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let h = histogram(&values, &classes, 3, bins, None).unwrap();
        prop_assert_eq!(h.total(), n);
        prop_assert_eq!(h.edges.len(), bins + 1);
    }

    #[test]
    fn beta_decreasing_and_loss_convex(e in 0usize..400, base in 0.01f64..0.99, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        prop_assert!(beta(e + 1, base) < beta(e, base) || beta(e, base) == 0.0);
        let bt = beta(e, base);
        let l = combined_loss(a, b, bt);
        prop_assert!(l >= a.min(b) - 1e-12 && l <= a.max(b) + 1e-12);
    }

    #[test]
    fn group_folds_partition_bags(seed in any::<u64>(), folds in 2usize..5) {
        let ds = generate(&GeneratorConfig {
            n_classes: 3,
            dim: 2,
            bags_per_class: 12,
            bag_size: [1, 2],
            bags_per_group: 2,
            seed,
            ..GeneratorConfig::default()
        }).unwrap();
        let bags = ds.training_view();
        let f = split_by_group(bags, folds, seed).unwrap();
        let mut seen = vec![0; bags.len()];
        let mut group_fold = std::collections::HashMap::new();
        for k in 0..folds {
            for i in f.validation_indices(k) {
                seen[i] += 1;
                let prev = group_fold.insert(bags[i].group_id.clone(), k);
                prop_assert!(prev.is_none() || prev == Some(k));
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn logits_invariant_under_bag_permutation(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { seed, ..small_model() };
        let params = ModelParams::init(&cfg).unwrap();
        let reference = reference_for(&params, &cfg, &mut rng);
        let x = random_matrix(n, cfg.input_dim, &mut rng).map(|v| v * 2.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let a = forward_bag(&params, Some(&reference), &bag_from(&x, 0), &cfg).unwrap();
        let b = forward_bag(&params, Some(&reference), &bag_from(&x.select_rows(&perm), 0), &cfg).unwrap();
        for (u, v) in a.bag_logits.iter().zip(&b.bag_logits) {
            prop_assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn instances_are_scored_independently(seed in any::<u64>(), n in 1usize..10, m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { attention_norm: AttentionNorm::Raw, seed, ..small_model() };
        let params = ModelParams::init(&cfg).unwrap();
        let reference = reference_for(&params, &cfg, &mut rng);
        let x = random_matrix(n, cfg.input_dim, &mut rng);
        let y = random_matrix(m, cfg.input_dim, &mut rng);
        let fx = forward_bag(&params, Some(&reference), &bag_from(&x, 0), &cfg).unwrap();
        let fy = forward_bag(&params, Some(&reference), &bag_from(&y, 0), &cfg).unwrap();
        // Splice the first instance of y into x.
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        rows.push(y.row(0).to_vec());
        let spliced = Tensor2::from_rows(&rows).unwrap();
        let fs = forward_bag(&params, Some(&reference), &bag_from(&spliced, 0), &cfg).unwrap();
        for i in 0..n {
            prop_assert_eq!(fs.embeddings.row(i), fx.embeddings.row(i));
            prop_assert_eq!(fs.attention[i].to_bits(), fx.attention[i].to_bits());
            prop_assert_eq!(fs.anomaly[i].to_bits(), fx.anomaly[i].to_bits());
        }
        prop_assert_eq!(fs.embeddings.row(n), fy.embeddings.row(0));
        prop_assert_eq!(fs.attention[n].to_bits(), fy.attention[0].to_bits());
    }

    #[test]
    fn dataset_jsonl_round_trip(seed in any::<u64>()) {
        let ds = generate(&GeneratorConfig {
            n_classes: 3,
            dim: 3,
            bags_per_class: 3,
            bag_size: [1, 5],
            seed,
            ..GeneratorConfig::default()
        }).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn removing_zero_weight_instance_keeps_bag_embedding() {
    let cfg = ModelConfig {
        attention_norm: AttentionNorm::Raw,
        ..small_model()
    };
    let mut params = ModelParams::init(&cfg).unwrap();
    // Zero attention output for every instance, and no anomaly term.
    params.attention_out.weight = Tensor2::zeros(cfg.attention_hidden, 1);
    params.attention_out.bias = Tensor2::zeros(1, 1);
    params.w_d = Tensor2::scalar(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(6, cfg.input_dim, &mut rng);
    let mut withp = params.clone();
    withp.attention_out.bias = Tensor2::scalar(0.5);
    let full = forward_bag(&withp, None, &bag_from(&x, 0), &ModelConfig { anomaly_pooling: false, ..cfg.clone() }).unwrap();
    assert!(full.pooling.iter().all(|&p| p != 0.0));

    // Now weight only depends on the anomaly score; an instance sitting on
    // the mixture mean gets p = 0.
    let cfg = ModelConfig {
        attention_pooling: false,
        ..cfg
    };
    params.w_a = Tensor2::scalar(0.0);
    params.w_d = Tensor2::scalar(1.0);
    let bag = bag_from(&x, 0);
    let z = encode(&params, &bag, &cfg).unwrap();
    let centre = z.row(2).to_vec();
    let g = GmmParams::new(vec![1.0], vec![centre], vec![Tensor2::identity(cfg.embed_dim)]).unwrap();
    let reference = AnomalyReference { gmm: g, scale: 1.0 };
    let with = forward_bag(&params, Some(&reference), &bag, &cfg).unwrap();
    assert_eq!(with.pooling[2], 0.0);
    let keep: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
    let without = forward_bag(&params, Some(&reference), &bag_from(&x.select_rows(&keep), 0), &cfg).unwrap();
    for (a, b) in with.bag_embedding.iter().zip(&without.bag_embedding) {
        assert!((a - b).abs() < 1e-12);
    }
}

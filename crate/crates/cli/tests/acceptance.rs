//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The process exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use amil_core::anomaly::mahalanobis;
use amil_core::autodiff::Graph;
use amil_core::data::{generate, split_by_group};
use amil_core::metrics::{auroc, average_precision, evaluate};
use amil_core::model::{build_forward, forward_bag, Activation};
use amil_core::training::{beta, combined_loss_node, control_embeddings, sic_targets};
use amil_core::{
    cross_validate_many, em_fit, holdout, train, AnomalyReference, Bag, EmConfig, GeneratorConfig, GmmParams,
    ModelConfig, ModelParams, Preset, Tensor2, TrainConfig, Variant,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("EM monotonicity and determinism", c2_em),
        ("Mahalanobis oracle equivalence", c3_mahalanobis),
        ("permutation invariance", c4_permutation),
        ("baseline reduction", c5_baseline),
        ("ablation ordering on preset hard", c6_ablation),
        ("separable benchmark accuracy", c7_separable),
        ("unseen-class anomaly recognition", c8_holdout),
        ("metrics oracle", c9_metrics),
        ("reproducibility from manifests", c10_replay),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {status} {name}: {} [{:.1}s]",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn small_separable(bags_per_class: usize, seed: u64) -> Vec<Bag> {
    generate(&GeneratorConfig {
        bags_per_class,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .training_view()
    .to_vec()
}

fn fitted_reference(params: &ModelParams, bags: &[Bag], cfg: &ModelConfig) -> AnomalyReference {
    let z = control_embeddings(params, bags, cfg).unwrap();
    let g = em_fit(&z, 1, &EmConfig::default(), None).unwrap();
    AnomalyReference::calibrate(g, &z, true).unwrap()
}

// ---------------------------------------------------------------- 1

fn full_loss(params: &ModelParams, reference: &AnomalyReference, bag: &Bag, cfg: &ModelConfig, b: f64) -> (f64, Vec<Tensor2>) {
    let mut g = Graph::new();
    let fv = build_forward(&mut g, params, Some(reference), &bag.feature_matrix(), cfg).unwrap();
    let mil = g.cross_entropy(fv.bag_logits, &[bag.label]).unwrap();
    let sic = g.cross_entropy(fv.sic_logits, &sic_targets(bag)).unwrap();
    let loss = combined_loss_node(&mut g, mil, sic, b).unwrap();
    let value = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    (value, fv.params.iter().map(|&v| grads.get(v)).collect())
}

/// Signs of every encoder pre-activation; a finite difference is only
/// meaningful when both probes see the same pattern.
fn relu_pattern(params: &ModelParams, x: &Tensor2) -> Vec<bool> {
    let mut h = x.clone();
    let mut pattern = Vec::new();
    for (i, layer) in params.encoder.iter().enumerate() {
        h = layer.apply(&h).unwrap();
        if i + 1 < params.encoder.len() {
            pattern.extend(h.as_slice().iter().map(|&v| v > 0.0));
            h = h.map(|v| v.max(0.0));
        }
    }
    pattern
}

const GRAD_FLOOR: f64 = 1e-6;

fn c1_gradients() -> Outcome {
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut failures = Vec::new();
    let bags = small_separable(4, 77);
    // The default ReLU model on all seeds, plus a smooth tanh encoder on a
    // few so that no probe needs skipping there.
    for (activation, seeds) in [(Activation::Relu, 20u64), (Activation::Tanh, 5)] {
        for seed in 0..seeds {
            let mut cfg = ModelConfig {
                activation,
                seed,
                ..ModelConfig::default()
            };
            cfg.apply_variant(Variant::AnomalyAttSic);
            let mut params = ModelParams::init(&cfg).unwrap();
            let reference = fitted_reference(&params, &bags, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bag = bags.choose(&mut rng).unwrap();
            let x = bag.feature_matrix();
            let b = beta(seed as usize % 10, 0.95);
            let (_, analytic) = full_loss(&params, &reference, bag, &cfg, b);
            let mask = params.trainable_mask(&cfg);
            let names = params.names();
            for (t, &train) in mask.iter().enumerate() {
                if !train {
                    continue;
                }
                for j in 0..analytic[t].len() {
                    let orig = params.tensors()[t].as_slice()[j];
                    params.tensors_mut()[t].as_mut_slice()[j] = orig + step;
                    let (plus, _) = full_loss(&params, &reference, bag, &cfg, b);
                    let pat_plus = relu_pattern(&params, &x);
                    params.tensors_mut()[t].as_mut_slice()[j] = orig - step;
                    let (minus, _) = full_loss(&params, &reference, bag, &cfg, b);
                    let pat_minus = relu_pattern(&params, &x);
                    params.tensors_mut()[t].as_mut_slice()[j] = orig;
                    if activation == Activation::Relu && pat_plus != pat_minus {
                        skipped += 1;
                        continue;
                    }
                    let fd = (plus - minus) / (2.0 * step);
                    let an = analytic[t].as_slice()[j];
                    // Central differences carry about eps * |loss| / step of
                    // rounding noise (~1e-11 here), so the denominator is
                    // floored well above that.
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR);
                    checked += 1;
                    worst = worst.max(err);
                    if err >= 1e-4 && failures.len() < 5 {
                        failures.push(format!("{activation:?} seed {seed} {}[{j}]: fd {fd:e} vs {an:e}", names[t]));
                    }
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{checked} entries (relu x 20 seeds, tanh x 5), max |fd - grad| / max(|fd|, |grad|, {GRAD_FLOOR:e}) = {worst:.2e} (< 1e-4), {skipped} relu probes straddling a kink skipped{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c2_em() -> Outcome {
    let mut worst_drop = 0.0f64;
    let mut problems = Vec::new();
    let mut total_iters = 0;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let comps = (case % 3) as usize + 1;
        let k = rng.random_range(1..=16);
        let n = rng.random_range(50..=2000);
        let centres: Vec<Vec<f64>> = (0..comps)
            .map(|_| (0..k).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            let c = &centres[i % comps];
            let s = rng.random_range(0.5..1.5);
            data.extend(c.iter().map(|m| m + s * rng.random_range(-1.0..1.0)));
        }
        let data = Tensor2::from_vec(n, k, data).unwrap();
        let cfg = EmConfig {
            seed: case,
            ..EmConfig::default()
        };
        let a = em_fit(&data, comps, &cfg, None).unwrap();
        let b = em_fit(&data, comps, &cfg, None).unwrap();
        total_iters += a.fit.iterations;
        for w in a.fit.log_likelihood.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop);
            if drop > 1e-9 {
                problems.push(format!("case {case}: ll fell by {drop:e}"));
            }
        }
        if a.to_json().unwrap() != b.to_json().unwrap() || a.fit != b.fit {
            problems.push(format!("case {case}: repeated fit differs"));
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "50 datasets, {total_iters} EM iterations, largest per-iteration decrease {worst_drop:.1e} (<= 1e-9), repeats bit-identical{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Independent explicit inverse by Gauss-Jordan with partial pivoting.
fn explicit_inverse(a: &Tensor2) -> Vec<Vec<f64>> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|row| row[n..].to_vec()).collect()
}

fn c3_mahalanobis() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let k = case % 32 + 1;
        let b = random_matrix(k, k, &mut rng);
        let mut cov = b.matmul_t(&b).unwrap();
        for i in 0..k {
            cov[(i, i)] += rng.random_range(0.05..1.0);
        }
        let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inv = explicit_inverse(&cov);
        let g = GmmParams::new(vec![1.0], vec![mean.clone()], vec![cov]).unwrap();
        for _ in 0..5 {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let diff: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let mut q = 0.0;
            for r in 0..k {
                for c in 0..k {
                    q += diff[r] * inv[r][c] * diff[c];
                }
            }
            let d = mahalanobis(&g, &z).unwrap();
            worst = worst.max((d - q.sqrt()).abs() / d.max(1.0));
        }
    }
    outcome(
        worst < 1e-8,
        format!("100 SPD covariances k=1..32, 5 points each, max |d - d_inv| / max(d, 1) = {worst:.2e} (< 1e-8)"),
    )
}

// ---------------------------------------------------------------- 4

fn c4_permutation() -> Outcome {
    let bags = small_separable(10, 4);
    let mut cfg = ModelConfig::default();
    cfg.apply_variant(Variant::AnomalyAttSic);
    let params = ModelParams::init(&cfg).unwrap();
    let reference = fitted_reference(&params, &bags, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let bag = bags.choose(&mut rng).unwrap();
        let mut shuffled = bag.clone();
        shuffled.instances.shuffle(&mut rng);
        let a = forward_bag(&params, Some(&reference), bag, &cfg).unwrap();
        let b = forward_bag(&params, Some(&reference), &shuffled, &cfg).unwrap();
        for (x, y) in a.bag_logits.iter().zip(&b.bag_logits) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst < 1e-6, format!("200 random (bag, permutation) pairs, max logit change {worst:.2e} (< 1e-6)"))
}

// ---------------------------------------------------------------- 5

/// Attention-MIL written out by hand: ReLU MLP encoder, tanh attention net
/// with softmax over the bag, weighted-mean pooling, linear head, explicit
/// backward pass and Adam with decoupled weight decay.
struct Baseline {
    /// `(weight in x out row-major, bias, in, out)`.
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

struct BaselineAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn affine_rows(x: &[f64], n: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut s = 0.0;
            for k in 0..din {
                s += x[i * din + k] * w[k * dout + o];
            }
            out[i * dout + o] = s + b[o];
        }
    }
    out
}

impl Baseline {
    /// Layer order: encoder layers, attention hidden, attention out, head.
    fn from_params(p: &ModelParams) -> Baseline {
        let mut layers = Vec::new();
        let mut push = |w: &Tensor2, b: &Tensor2| {
            layers.push((w.as_slice().to_vec(), b.as_slice().to_vec(), w.rows(), w.cols()));
        };
        for l in &p.encoder {
            push(&l.weight, &l.bias);
        }
        push(&p.attention_hidden.weight, &p.attention_hidden.bias);
        push(&p.attention_out.weight, &p.attention_out.bias);
        push(&p.bag_head.weight, &p.bag_head.bias);
        Baseline { layers }
    }

    fn n_enc(&self) -> usize {
        self.layers.len() - 3
    }

    /// Returns `(loss, logits, gradients per layer as (dW, db))`.
    fn forward_backward(&self, x: &[f64], n: usize, label: usize) -> (f64, Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) {
        let ne = self.n_enc();
        // Encoder.
        let mut acts = vec![x.to_vec()];
        let mut pres = Vec::new();
        for (l, (w, b, din, dout)) in self.layers[..ne].iter().enumerate() {
            let pre = affine_rows(acts.last().unwrap(), n, w, b, *din, *dout);
            let act = if l + 1 < ne { pre.iter().map(|&v| v.max(0.0)).collect() } else { pre.clone() };
            pres.push(pre);
            acts.push(act);
        }
        let z = acts.last().unwrap().clone();
        let k = self.layers[ne - 1].3;
        // Attention.
        let (vw, vb, _, h) = &self.layers[ne];
        let g: Vec<f64> = affine_rows(&z, n, vw, vb, k, *h).into_iter().map(f64::tanh).collect();
        let (ow, ob, _, _) = &self.layers[ne + 1];
        let s = affine_rows(&g, n, ow, ob, *h, 1);
        let smax = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - smax).exp()).collect();
        let total: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|v| v / total).collect();
        // Pooling and head.
        let mut zb = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                zb[j] += a[i] * z[i * k + j];
            }
        }
        let (hw, hb, _, c) = &self.layers[ne + 2];
        let logits = affine_rows(&zb, 1, hw, hb, k, *c);
        let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lmax + logits.iter().map(|v| (v - lmax).exp()).sum::<f64>().ln();
        let loss = lse - logits[label];

        // Backward.
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> =
            self.layers.iter().map(|(w, b, _, _)| (vec![0.0; w.len()], vec![0.0; b.len()])).collect();
        let e: Vec<f64> = logits.iter().map(|v| (v - lmax).exp()).collect();
        let total: f64 = e.iter().fold(0.0, |acc, v| acc + v);
        let dlogits: Vec<f64> = (0..*c)
            .map(|i| e[i] / total - if i == label { 1.0 } else { 0.0 })
            .collect();
        let mut dzb = vec![0.0; k];
        for j in 0..k {
            for o in 0..*c {
                grads[ne + 2].0[j * c + o] = zb[j] * dlogits[o];
                dzb[j] += hw[j * c + o] * dlogits[o];
            }
        }
        grads[ne + 2].1 = dlogits.clone();
        let mut dz = vec![0.0; n * k];
        let mut da = vec![0.0; n];
        for i in 0..n {
            for j in 0..k {
                dz[i * k + j] += a[i] * dzb[j];
                da[i] += z[i * k + j] * dzb[j];
            }
        }
        let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
        let ds: Vec<f64> = (0..n).map(|i| a[i] * (da[i] - dot)).collect();
        let mut dpg = vec![0.0; n * h];
        for i in 0..n {
            for u in 0..*h {
                grads[ne + 1].0[u] += g[i * h + u] * ds[i];
                dpg[i * h + u] = ds[i] * ow[u] * (1.0 - g[i * h + u] * g[i * h + u]);
            }
            grads[ne + 1].1[0] += ds[i];
        }
        for i in 0..n {
            for u in 0..*h {
                for j in 0..k {
                    grads[ne].0[j * h + u] += z[i * k + j] * dpg[i * h + u];
                }
                grads[ne].1[u] += dpg[i * h + u];
            }
            // The attention branch's contribution is summed on its own and
            // then added to the pooling branch's, as the graph does.
            for j in 0..k {
                let mut back = 0.0;
                for u in 0..*h {
                    back += dpg[i * h + u] * vw[j * h + u];
                }
                dz[i * k + j] += back;
            }
        }
        let mut dh = dz;
        for l in (0..ne).rev() {
            let (w, _, din, dout) = &self.layers[l];
            let dpre: Vec<f64> = if l + 1 < ne {
                dh.iter().zip(&pres[l]).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }).collect()
            } else {
                dh.clone()
            };
            let input = &acts[l];
            let mut dx = vec![0.0; n * din];
            for i in 0..n {
                for o in 0..*dout {
                    let g = dpre[i * dout + o];
                    grads[l].1[o] += g;
                    for q in 0..*din {
                        grads[l].0[q * dout + o] += input[i * din + q] * g;
                        dx[i * din + q] += g * w[q * dout + o];
                    }
                }
            }
            dh = dx;
        }
        (loss, logits, grads)
    }

    fn adam(&mut self, grads: &[(Vec<f64>, Vec<f64>)], st: &mut BaselineAdam, tc: &TrainConfig) {
        st.t += 1;
        let c1 = 1.0 - tc.adam_beta1.powi(st.t);
        let c2 = 1.0 - tc.adam_beta2.powi(st.t);
        let mut slot = 0;
        for (l, (dw, db)) in grads.iter().enumerate() {
            let (w, b, _, _) = &mut self.layers[l];
            for (p, g) in [(w, dw), (b, db)] {
                let (m, v) = (&mut st.m[slot], &mut st.v[slot]);
                for i in 0..p.len() {
                    m[i] = tc.adam_beta1 * m[i] + (1.0 - tc.adam_beta1) * g[i];
                    v[i] = tc.adam_beta2 * v[i] + (1.0 - tc.adam_beta2) * g[i] * g[i];
                    let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + tc.adam_eps);
                    p[i] -= tc.learning_rate * (upd + tc.weight_decay * p[i]);
                }
                slot += 1;
            }
        }
    }
}

fn c5_baseline() -> Outcome {
    let bags = small_separable(12, 5);
    let mut cfg = ModelConfig {
        seed: 5,
        ..ModelConfig::default()
    };
    cfg.apply_variant(Variant::Att);
    let tc = TrainConfig {
        epochs: 1,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg).unwrap();
    let reference = fitted_reference(&params, &bags, &cfg);
    let mut base = Baseline::from_params(&params);

    let mut fwd_err = 0.0f64;
    for bag in &bags {
        let ours = forward_bag(&params, Some(&reference), bag, &cfg).unwrap();
        let x = bag.feature_matrix();
        let (_, logits, _) = base.forward_backward(x.as_slice(), bag.len(), bag.label);
        for (a, b) in ours.bag_logits.iter().zip(&logits) {
            fwd_err = fwd_err.max((a - b).abs());
        }
    }

    let out = train(&bags, None, Variant::Att, &cfg, &tc).unwrap();

    let mut st = BaselineAdam {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    for (w, b, _, _) in &base.layers {
        st.m.extend([vec![0.0; w.len()], vec![0.0; b.len()]]);
        st.v.extend([vec![0.0; w.len()], vec![0.0; b.len()]]);
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    order.shuffle(&mut rng);
    let mut loss_sum = 0.0;
    for &i in &order {
        let x = bags[i].feature_matrix();
        let (loss, _, grads) = base.forward_backward(x.as_slice(), bags[i].len(), bags[i].label);
        loss_sum += loss;
        base.adam(&grads, &mut st, &tc);
    }
    let trained = Baseline::from_params(&out.checkpoint.params);
    let mut param_err = 0.0f64;
    for (a, b) in trained.layers.iter().zip(&base.layers) {
        for (x, y) in a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)) {
            param_err = param_err.max((x - y).abs());
        }
    }
    let loss_err = (out.records[0].mil_loss - loss_sum / bags.len() as f64).abs();
    let frozen = out.checkpoint.params.w_d.item() == 0.0 && out.checkpoint.params.w_a.item() == 1.0;
    let worst = fwd_err.max(param_err).max(loss_err);
    outcome(
        worst < 1e-12 && frozen && out.records[0].beta == 0.0,
        format!(
            "{} bags: forward max diff {fwd_err:.1e}, after one epoch ({} Adam steps) max param diff {param_err:.1e}, mean-loss diff {loss_err:.1e} (< 1e-12); W_D = 0, W_A = 1, beta = 0",
            bags.len(),
            bags.len()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_ablation() -> Outcome {
    let ds = generate(&GeneratorConfig::preset(Preset::Hard)).unwrap();
    let tc = TrainConfig::default();
    let reports = cross_validate_many(ds.training_view(), &ModelConfig::default(), &tc, &Variant::ALL).unwrap();
    let acc = |v: Variant| reports.iter().find(|r| r.variant == v).unwrap().summary.accuracy;
    let full = acc(Variant::AnomalyAttSic).mean;
    let att = acc(Variant::Att).mean;
    let anomaly = acc(Variant::Anomaly).mean;
    let weakest = Variant::ALL
        .iter()
        .filter(|&&v| v != Variant::Anomaly)
        .all(|&v| acc(v).mean > anomaly);
    let table: Vec<String> = reports
        .iter()
        .map(|r| format!("{} {:.3}±{:.3}", r.variant, r.summary.accuracy.mean, r.summary.accuracy.std))
        .collect();
    outcome(
        full >= att && weakest,
        format!(
            "{} repeats x {} folds; mean accuracy {}; anomaly-att-sic >= att: {}, anomaly weakest: {}",
            tc.repeats,
            tc.folds,
            table.join(", "),
            full >= att,
            weakest
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_separable() -> Outcome {
    let ds = generate(&GeneratorConfig::preset(Preset::Separable)).unwrap();
    let bags = ds.training_view();
    let tc = TrainConfig::default();
    let folds = split_by_group(bags, tc.folds, tc.seed).unwrap();
    let pick = |idx: Vec<usize>| -> Vec<Bag> { idx.into_iter().map(|i| bags[i].clone()).collect() };
    let (tr, va) = (pick(folds.training_indices(0)), pick(folds.validation_indices(0)));
    let out = train(&tr, Some(&va), Variant::AnomalyAttSic, &ModelConfig::default(), &tc).unwrap();
    let accs: Vec<f64> = out.records.iter().map(|r| r.val_accuracy.unwrap()).collect();
    let first = accs.iter().position(|&a| a >= 0.95);
    let last = *accs.last().unwrap();
    outcome(
        last >= 0.95,
        format!(
            "{} epochs, {} training / {} validation bags; validation accuracy first >= 0.95 at epoch {}, final {last:.3}",
            accs.len(),
            tr.len(),
            va.len(),
            first.map_or("never".into(), |e| e.to_string())
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_holdout() -> Outcome {
    let ds = generate(&GeneratorConfig::preset(Preset::Separable)).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for class in 1..ds.n_classes() {
        let (r, _) = holdout(&ds, class, Variant::AnomalyAttSic, &ModelConfig::default(), &TrainConfig::default()).unwrap();
        let excluded = !r.training_classes.contains(&class);
        let ok = excluded && r.anomaly_auroc >= 0.9 && r.anomaly_auroc > r.attention_auroc;
        pass &= ok;
        parts.push(format!(
            "class {class}: anomaly {:.3} vs attention {:.3} (all instances {:.3} vs {:.3})",
            r.anomaly_auroc, r.attention_auroc, r.anomaly_auroc_all, r.attention_auroc_all
        ));
    }
    outcome(pass, format!("held-out anomalous instances vs unseen controls; {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 9

fn pairwise_auroc(scores: &[f64], pos: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !pos[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if pos[j] {
                continue;
            }
            pairs += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

/// Average precision by sweeping every distinct score as a threshold.
fn sweep_ap(scores: &[f64], pos: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = pos.iter().filter(|&&p| p).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && p).count() as f64;
        let fp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && !p).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

fn c9_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=500);
        let levels = if case % 2 == 0 { 7 } else { 100_000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        pos[0] = true;
        pos[1] = false;
        worst = worst.max((auroc(&scores, &pos).unwrap() - pairwise_auroc(&scores, &pos)).abs());
        worst = worst.max((average_precision(&scores, &pos).unwrap() - sweep_ap(&scores, &pos)).abs());
    }
    // evaluate() on multi-class bag predictions against the same oracles.
    for _ in 0..10 {
        let n = rng.random_range(10..=500);
        let c = 4;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(0..50) as f64 / 50.0).collect())
            .collect();
        let preds: Vec<usize> = scores
            .iter()
            .map(|s| amil_core::model::argmax(s))
            .collect();
        let report = evaluate(&preds, &labels, &scores, c).unwrap();
        for class in 0..c {
            let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            if !pos.iter().any(|&p| p) || pos.iter().all(|&p| p) {
                continue;
            }
            let col: Vec<f64> = scores.iter().map(|s| s[class]).collect();
            worst = worst.max((report.auroc[class].unwrap() - pairwise_auroc(&col, &pos)).abs());
            worst = worst.max((report.auprc[class].unwrap() - sweep_ap(&col, &pos)).abs());
        }
    }
    outcome(
        worst < 1e-12,
        format!("100 random binary sets (n <= 500, with ties) + 10 multi-class reports, max deviation from pairwise/threshold-sweep oracles {worst:.1e} (< 1e-12)"),
    )
}

// ---------------------------------------------------------------- 10

fn amil(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_amil"))
        .args(args)
        .output()
        .expect("amil binary runs")
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
}

fn c10_replay() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let small = [
        "--set", "generator.bags_per_class=8",
        "--set", "generator.dim=8",
        "--set", "generator.bags_per_group=2",
        "--set", "model.encoder_hidden=[8, 8]",
        "--set", "model.embed_dim=3",
        "--set", "model.attention_hidden=4",
        "--epochs", "3",
        "--set", "train.learning_rate=1e-3",
    ];
    let data = format!("{}/dataset.jsonl", p("gen"));
    let checkpoint = format!("{}/checkpoint.json", p("train"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("gen", vec!["generate".into(), "--out".into(), p("gen")]),
        (
            "train",
            vec!["train", "--data", &data, "--out", &p("train"), "--set", "experiment.validation_fold=0"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "ablation",
            vec!["ablation", "--data", &data, "--out", &p("ablation"), "--repeats", "2", "--folds", "2"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "score",
            vec!["score", "--checkpoint", &checkpoint, "--data", &data, "--out", &p("score")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "holdout",
            vec!["holdout", "--data", &data, "--class", "2", "--out", &p("holdout")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
    ];
    let mut problems = Vec::new();
    let mut compared = 0;
    for (name, mut args) in runs {
        args.extend(small.iter().map(|s| s.to_string()));
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = amil(&argv);
        if !first.status.success() {
            problems.push(format!("{name}: {}", String::from_utf8_lossy(&first.stderr).trim()));
            continue;
        }
        let manifest = format!("{}/manifest.json", p(name));
        let replay_dir = p(&format!("{name}-replay"));
        let second = amil(&["replay", &manifest, "--out", &replay_dir]);
        if !second.status.success() {
            problems.push(format!("{name} replay: {}", String::from_utf8_lossy(&second.stderr).trim()));
            continue;
        }
        let originals = csv_files(&root.join(name));
        if name != "gen" && originals.is_empty() {
            problems.push(format!("{name}: no CSV output"));
        }
        for f in originals {
            let copy = Path::new(&replay_dir).join(f.file_name().unwrap());
            compared += 1;
            if std::fs::read(&f).unwrap() != std::fs::read(&copy).unwrap_or_default() {
                problems.push(format!("{} differs after replay", f.display()));
            }
        }
        if name == "gen" {
            compared += 1;
            let a = std::fs::read(root.join("gen/dataset.jsonl")).unwrap();
            let b = std::fs::read(Path::new(&replay_dir).join("dataset.jsonl")).unwrap_or_default();
            if a != b {
                problems.push("dataset.jsonl differs after replay".into());
            }
        }
    }
    outcome(
        problems.is_empty() && compared > 0,
        format!(
            "generate/train/ablation/score/holdout replayed from manifest.json; {compared} output files byte-identical{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

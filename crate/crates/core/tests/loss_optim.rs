use gcm_core::loss::*;
use gcm_core::optim::*;
use gcm_core::params::{seeded, uniform, ParamStore};
use gcm_core::tensor::{Graph, Tensor, Var};
use proptest::prelude::*;

fn proto(g: &mut Graph, w: f64, b: f64) -> AngularProtoParams {
    AngularProtoParams { w: g.param(Tensor::scalar(w).unwrap()), b: g.param(Tensor::scalar(b).unwrap()) }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn proto_oracle(x: &Tensor, w: f64, b: f64) -> f64 {
    let (n, m, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let row = |j: usize, u: usize| &x.data()[(j * m + u) * d..(j * m + u + 1) * d];
    let centroid = |k: usize| -> Vec<f64> {
        (0..d).map(|e| (0..m - 1).map(|u| row(k, u)[e]).sum::<f64>() / (m - 1) as f64).collect()
    };
    let cents: Vec<Vec<f64>> = (0..n).map(centroid).collect();
    let mut loss = 0.0;
    for j in 0..n {
        let q = row(j, m - 1);
        let s: Vec<f64> = cents.iter().map(|c| w * cos(q, c) + b).collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + s.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - s[j];
    }
    loss / n as f64
}

#[test]
fn prototypes_match_loop_mean() {
    let x = uniform(&[3, 4, 5], 1.0, &mut seeded(1));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let all = prototypes(&mut g, xv).unwrap();
    for j in 0..3 {
        let c = speaker_prototype(&mut g, xv, j).unwrap();
        for e in 0..5 {
            let want = (0..3).map(|u| x.at(&[j, u, e])).sum::<f64>() / 3.0;
            assert!((g.value(c).data()[e] - want).abs() < 1e-12);
            assert!((g.value(all).at(&[j, e]) - want).abs() < 1e-12);
        }
    }
    assert!(speaker_prototype(&mut g, xv, 3).is_err());
    let two = g.constant(uniform(&[2, 2, 3], 1.0, &mut seeded(2)));
    let c = speaker_prototype(&mut g, two, 1).unwrap();
    assert_eq!(g.value(c).data(), &g.value(two).data()[6..9]);
}

#[test]
fn angular_loss_matches_loop_oracle() {
    for (seed, m) in [(3, 2), (4, 3), (5, 4)] {
        let x = uniform(&[4, m, 6], 1.0, &mut seeded(seed));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = proto(&mut g, 7.5, -2.0);
        let l = angular_proto_loss(&mut g, xv, &p).unwrap();
        assert!((g.value(l).data()[0] - proto_oracle(&x, 7.5, -2.0)).abs() < 1e-12);
    }
}

#[test]
fn angular_loss_closed_form_and_clamped_scale() {
    let x = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = proto(&mut g, 10.0, 0.0);
    let l = angular_proto_loss(&mut g, xv, &p).unwrap();
    assert!((g.value(l).data()[0] - 4.5399e-5).abs() < 1e-9);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = proto(&mut g, -3.0, 0.0);
    let l = angular_proto_loss(&mut g, xv, &p).unwrap();
    assert!((g.value(l).data()[0] - proto_oracle(&x, PROTO_SCALE_FLOOR, 0.0)).abs() < 1e-12);
}

#[test]
fn clamp_keeps_scale_above_floor() {
    let mut store = ParamStore::new();
    init_proto(&mut store).unwrap();
    assert_eq!(store.get("proto.w").unwrap().data(), &[PROTO_SCALE_INIT]);
    assert_eq!(store.get("proto.b").unwrap().data(), &[PROTO_BIAS_INIT]);
    store.set("proto.w", Tensor::scalar(-1.0).unwrap()).unwrap();
    clamp_proto_scale(&mut store).unwrap();
    assert_eq!(store.get("proto.w").unwrap().data(), &[PROTO_SCALE_FLOOR]);
}

fn head(g: &mut Graph, w: &Tensor, b: &Tensor) -> ClassifierHead {
    ClassifierHead { weight: g.param(w.clone()), bias: g.param(b.clone()) }
}

#[test]
fn cross_entropy_matches_per_sample_oracle() {
    let mut rng = seeded(6);
    let (rows, d, classes) = (5, 4, 3);
    let e = uniform(&[rows, d], 1.0, &mut rng);
    let w = uniform(&[classes, d], 1.0, &mut rng);
    let b = uniform(&[classes], 1.0, &mut rng);
    let labels = [0, 2, 1, 1, 0];
    let mut g = Graph::new();
    let ev = g.constant(e.clone());
    let h = head(&mut g, &w, &b);
    let l = softmax_ce_loss(&mut g, ev, &labels, &h).unwrap();
    let mut want = 0.0;
    for r in 0..rows {
        let z: Vec<f64> = (0..classes).map(|c| b.data()[c] + (0..d).map(|k| w.at(&[c, k]) * e.at(&[r, k])).sum::<f64>()).collect();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - z[labels[r]];
    }
    assert!((g.value(l).data()[0] - want / rows as f64).abs() < 1e-12);
    assert!(softmax_ce_loss(&mut g, ev, &[0, 1, 2, 3, 0], &h).is_err());
}

#[test]
fn cross_entropy_uniform_and_margins() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(vec![2, 7]).unwrap());
    let l = logits_ce(&mut g, z, &[3, 6]).unwrap();
    assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for margin in [0.0, 5.0, 10.0, 20.0] {
        let z = g.constant(Tensor::new(vec![1, 3], vec![margin, 0.0, 0.0]).unwrap());
        let lv = logits_ce(&mut g, z, &[0]).unwrap();
        let l = g.value(lv).data()[0];
        assert!(l < prev);
        assert!((l - (1.0 + 2.0 * (-margin).exp()).ln()).abs() < 1e-12);
        prev = l;
    }
    assert!(prev < 1e-8);
}

#[test]
fn combined_loss_is_sum_and_gradients_add() {
    let mut rng = seeded(7);
    let e = uniform(&[6, 4], 1.0, &mut rng);
    let w = uniform(&[3, 4], 1.0, &mut rng);
    let b = uniform(&[3], 1.0, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2];
    let grads = |which: u8| -> (f64, Tensor) {
        let mut g = Graph::new();
        let ev: Var = g.param(e.clone());
        let h = head(&mut g, &w, &b);
        let p = proto(&mut g, 10.0, -5.0);
        let grouped = g.reshape(ev, &[3, 2, 4]).unwrap();
        let parts = combined_loss(&mut g, grouped, ev, &labels, &h, &p).unwrap();
        let out = match which {
            0 => parts.ce,
            1 => parts.proto,
            _ => parts.total,
        };
        let v = g.value(out).data()[0];
        let (ce, pr, tot) = (g.value(parts.ce).data()[0], g.value(parts.proto).data()[0], g.value(parts.total).data()[0]);
        assert_eq!(tot, ce + pr);
        g.backward(out).unwrap();
        (v, g.grad(ev).unwrap())
    };
    let (ce, gce) = grads(0);
    let (pr, gpr) = grads(1);
    let (tot, gtot) = grads(2);
    assert_eq!(tot, ce + pr);
    for ((a, b), c) in gce.data().iter().zip(gpr.data()).zip(gtot.data()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn angular_loss_is_scale_invariant(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let x = uniform(&[3, 2, 5], 1.0, &mut seeded(seed));
        let y = x.map(|v| v * scale).unwrap();
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(t.clone());
            let p = proto(&mut g, 10.0, -5.0);
            let l = angular_proto_loss(&mut g, xv, &p).unwrap();
            g.value(l).data()[0]
        };
        prop_assert!((eval(&x) - eval(&y)).abs() < 1e-10);
    }

    #[test]
    fn schedule_never_rises_after_warmup(start in 5usize..200, span in 1usize..100) {
        let cfg = ScheduleConfig::default();
        let mut prev = lr_schedule(start, &cfg);
        for e in start + 1..start + span {
            let lr = lr_schedule(e, &cfg);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }
}

#[test]
fn schedule_examples() {
    let cfg = ScheduleConfig::default();
    assert!((lr_schedule(0, &cfg) - 2e-4).abs() < 1e-15);
    assert!((lr_schedule(4, &cfg) - 1e-3).abs() < 1e-15);
    assert!((lr_schedule(5, &cfg) - 1e-3).abs() < 1e-15);
    assert!((lr_schedule(23, &cfg) - 7.5e-4).abs() < 1e-15);
    for e in 0..4 {
        assert!(lr_schedule(e, &cfg) < lr_schedule(e + 1, &cfg));
    }
}

#[test]
fn adamw_matches_reference_recurrence_for_ten_steps() {
    let cfg = AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() };
    let lr = 0.05;
    let mut store = ParamStore::new();
    store.insert("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let mut state = AdamState::new();
    let mut x = vec![1.0f64, -2.0, 0.5];
    let (mut m, mut v) = (vec![0.0f64; 3], vec![0.0f64; 3]);
    for step in 1..=10 {
        let grad: Vec<f64> = x.iter().enumerate().map(|(i, xi)| 2.0 * xi + (i as f64 + 1.0) * (step as f64).sin()).collect();
        let mut grads = ParamStore::new();
        grads.insert("x", Tensor::new(vec![3], grad.clone()).unwrap()).unwrap();
        adamw_step(&mut store, &grads, &mut state, lr, &cfg).unwrap();
        let t = step as i32;
        for i in 0..3 {
            x[i] -= lr * cfg.weight_decay * x[i];
            m[i] = 0.9 * m[i] + 0.1 * grad[i];
            v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
            let step_size = lr / (1.0 - 0.9f64.powi(t));
            let denom = v[i].sqrt() / (1.0 - 0.999f64.powi(t)).sqrt() + cfg.eps;
            x[i] -= step_size * m[i] / denom;
        }
        for (a, b) in store.get("x").unwrap().data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
        }
    }
    assert_eq!(state.step, 10);
}

#[test]
fn adamw_zero_gradient_decay_and_descent() {
    let cfg = AdamWConfig::default();
    let mut store = ParamStore::new();
    store.insert("p", Tensor::new(vec![2], vec![3.0, -1.5]).unwrap()).unwrap();
    let mut grads = ParamStore::new();
    grads.insert("p", Tensor::zeros(vec![2]).unwrap()).unwrap();
    adamw_step(&mut store, &grads, &mut AdamState::new(), 0.1, &cfg).unwrap();
    let shrink = 1.0 - 0.1 * cfg.weight_decay;
    assert_eq!(store.get("p").unwrap().data(), &[3.0 * shrink, -1.5 * shrink]);

    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut store = ParamStore::new();
    store.insert("x", Tensor::scalar(1.0).unwrap()).unwrap();
    let mut grads = ParamStore::new();
    grads.insert("x", Tensor::scalar(2.0).unwrap()).unwrap();
    adamw_step(&mut store, &grads, &mut AdamState::new(), 0.01, &cfg).unwrap();
    let x = store.get("x").unwrap().data()[0];
    assert!(x * x < 1.0);
}

#[test]
fn adamw_rejects_bad_gradients_without_mutation() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::scalar(1.0).unwrap()).unwrap();
    let before = store.clone();
    let mut state = AdamState::new();
    let mut unknown = ParamStore::new();
    unknown.insert("a", Tensor::scalar(0.5).unwrap()).unwrap();
    unknown.insert("zzz", Tensor::scalar(0.5).unwrap()).unwrap();
    assert!(adamw_step(&mut store, &unknown, &mut state, 0.1, &AdamWConfig::default()).is_err());
    let mut wrong = ParamStore::new();
    wrong.insert("a", Tensor::zeros(vec![2]).unwrap()).unwrap();
    assert!(adamw_step(&mut store, &wrong, &mut state, 0.1, &AdamWConfig::default()).is_err());
    assert!(adamw_step(&mut store, &before.clone(), &mut state, f64::NAN, &AdamWConfig::default()).is_err());
    assert_eq!(store, before);
    assert_eq!(state.step, 0);
}

#[test]
fn angular_loss_single_speaker_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(uniform(&[1, 3, 4], 1.0, &mut seeded(9)));
    let p = proto(&mut g, 10.0, -5.0);
    let l = angular_proto_loss(&mut g, x, &p).unwrap();
    assert!(g.value(l).data()[0].abs() < 1e-12);
    let x = uniform(&[3, 3, 4], 1.0, &mut seeded(10));
    let err = gcm_core::tensor::finite_diff_check(
        |g, x| {
            let p = proto(g, 10.0, -5.0);
            angular_proto_loss(g, x, &p)
        },
        &x,
        gcm_core::tensor::DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

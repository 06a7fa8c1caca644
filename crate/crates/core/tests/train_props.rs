mod common;

use asgmamba::data::{chronological_split, make_windows, synth_generate, SplitSpec, SynthKind, Windowed};
use asgmamba::params::Params;
use asgmamba::train::{
    adam_step, evaluate, evaluate_naive, evaluate_with, mae, mse, train, AdamConfig, AdamState, EarlyStopping,
    StopDecision,
};
use asgmamba::{AsgMamba, Error, ModelConfig, Tensor};
use common::{rand_tensor, rng, tiny_config};

fn params_of(tensors: &[(&str, Tensor)]) -> Params {
    let mut p = Params::new();
    for (n, t) in tensors {
        p.insert(*n, t.clone());
    }
    p
}

fn grads_of(names: &[&str], ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    names.iter().map(|n| n.to_string()).zip(ts).collect()
}

/// Adam written out from the published recurrence, one scalar at a time.
struct BruteAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl BruteAdam {
    fn step(&mut self, theta: &mut [f64], g: &[f64], c: &AdamConfig) {
        self.t += 1;
        for i in 0..theta.len() {
            let grad = if c.decoupled { g[i] } else { g[i] + c.weight_decay * theta[i] };
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad * grad;
            let mh = self.m[i] / (1.0 - c.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - c.beta2.powi(self.t));
            let wd = if c.decoupled { c.lr * c.weight_decay * theta[i] } else { 0.0 };
            theta[i] = theta[i] - c.lr * mh / (vh.sqrt() + c.eps) - wd;
        }
    }
}

#[test]
fn adam_matches_brute_force_over_100_steps() {
    for decoupled in [true, false] {
        let cfg = AdamConfig { weight_decay: 0.01, decoupled, ..AdamConfig::default() };
        let mut r = rng(1);
        let mut params = params_of(&[("a", rand_tensor(&mut r, &[3, 2], 1.0)), ("b", rand_tensor(&mut r, &[4], 1.0))]);
        let mut flat: Vec<f64> = params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut brute = BruteAdam { m: vec![0.0; 10], v: vec![0.0; 10], t: 0 };
        let mut state = AdamState::default();
        for _ in 0..100 {
            let ga = rand_tensor(&mut r, &[3, 2], 2.0);
            let gb = rand_tensor(&mut r, &[4], 0.01);
            let g: Vec<f64> = ga.data().iter().chain(gb.data()).copied().collect();
            adam_step(&mut params, &grads_of(&["a", "b"], vec![ga, gb]), &mut state, &cfg).unwrap();
            brute.step(&mut flat, &g, &cfg);
        }
        let got: Vec<f64> = params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for (u, v) in got.iter().zip(&flat) {
            assert!((u - v).abs() <= 1e-12, "decoupled={decoupled}: {u} vs {v}");
        }
        assert!(state.v.iter().flatten().all(|&v| v >= 0.0));
    }
}

#[test]
fn adam_hand_steps() {
    let cfg = AdamConfig::default();
    // zero gradient: only the decay moves θ
    let mut p = params_of(&[("w", Tensor::from_vec(vec![2.0]))]);
    adam_step(&mut p, &grads_of(&["w"], vec![Tensor::zeros(vec![1])]), &mut AdamState::default(), &cfg).unwrap();
    assert_eq!(p.get("w").unwrap().data()[0], 2.0 - 1e-3 * 1e-5 * 2.0);

    let mut p = params_of(&[("w", Tensor::zeros(vec![1]))]);
    adam_step(&mut p, &grads_of(&["w"], vec![Tensor::ones(vec![1])]), &mut AdamState::default(), &cfg).unwrap();
    assert!((p.get("w").unwrap().data()[0] + 1e-3 / (1.0 + 1e-8)).abs() <= 1e-15);

    // constant gradient: both bias-corrected moments equal g, g² on every step
    let cfg = AdamConfig { weight_decay: 0.0, ..cfg };
    let (g, theta0) = (0.37, 1.5);
    let mut p = params_of(&[("w", Tensor::from_vec(vec![theta0]))]);
    let mut st = AdamState::default();
    for _ in 0..2 {
        adam_step(&mut p, &grads_of(&["w"], vec![Tensor::from_vec(vec![g])]), &mut st, &cfg).unwrap();
    }
    let m1 = 0.1 * g;
    let v1 = 0.001 * g * g;
    let step1 = 1e-3 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
    let m2 = 0.9 * m1 + 0.1 * g;
    let v2 = 0.999 * v1 + 0.001 * g * g;
    let step2 = 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
    assert!((p.get("w").unwrap().data()[0] - (theta0 - step1 - step2)).abs() <= 1e-12);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = params_of(&[("ok", Tensor::zeros(vec![2])), ("bad", Tensor::zeros(vec![2]))]);
    let grads = grads_of(&["ok", "bad"], vec![Tensor::zeros(vec![2]), Tensor::from_vec(vec![0.0, f64::NAN])]);
    match adam_step(&mut p, &grads, &mut AdamState::default(), &AdamConfig::default()) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("bad"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(p.get("ok").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn early_stopping_follows_the_patience_rule() {
    let mut s = EarlyStopping::new(3);
    let script = [1.0, 0.8, 0.85, 0.9, 0.79, 0.8, 0.8, 0.8];
    let got: Vec<StopDecision> = script.iter().map(|&v| s.update(v)).collect();
    use StopDecision::*;
    assert_eq!(got, [Improved, Improved, Continue, Continue, Improved, Continue, Continue, Stop]);
    assert_eq!(s.best_epoch, Some(4));
    let mut one = EarlyStopping::new(1);
    assert_eq!(one.update(1.0), Improved);
    assert_eq!(one.update(1.0), Stop);
}

#[test]
fn metric_examples() {
    assert_eq!(mse(&[1.0, 2.0], &[0.0, 2.0]), 0.5);
    assert_eq!(mae(&[1.0, 2.0], &[0.0, 2.0]), 0.5);
    assert_eq!((mse(&[3.0, 1.0], &[3.0, 1.0]), mae(&[3.0, 1.0], &[3.0, 1.0])), (0.0, 0.0));
}

fn sine_data(config: &ModelConfig, len: usize) -> Windowed {
    let s = synth_generate(SynthKind::SinePlusNoise, len, config.variates, 20.0, 4).unwrap();
    let ranges = chronological_split(len, &SplitSpec::default()).unwrap();
    make_windows(&s, &ranges, config.lookback, config.horizon).unwrap()
}

#[test]
fn evaluator_matches_direct_computation() {
    let cfg = tiny_config();
    let data = sine_data(&cfg, 400);
    let m = evaluate_naive(&data.test).unwrap();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0);
    let mut h_se = vec![0.0; cfg.horizon];
    for i in 0..data.test.len() {
        let x = data.test.input(i);
        let last = &x[x.len() - 2..];
        for (k, y) in data.test.target(i).iter().enumerate() {
            let d = last[k % 2] - y;
            se += d * d;
            ae += d.abs();
            h_se[k / 2] += d * d;
            n += 1;
        }
    }
    assert_eq!(m.windows, data.test.len());
    assert!((m.mse - se / n as f64).abs() <= 1e-12);
    assert!((m.mae - ae / n as f64).abs() <= 1e-12);
    for (k, h) in m.horizon_mse.iter().enumerate() {
        assert!((h - h_se[k] / (data.test.len() * 2) as f64).abs() <= 1e-12);
    }
    let perfect = evaluate_with(&data.test, |_| Ok(Tensor::zeros(vec![0]))).is_err();
    assert!(perfect, "a wrongly shaped prediction must be rejected");
}

#[test]
fn training_is_deterministic_and_learns() {
    let mut cfg = tiny_config();
    cfg.train.max_epochs = 4;
    cfg.train.lr = 3e-3;
    let data = sine_data(&cfg, 500);
    let run_once = || {
        let mut model = AsgMamba::new(cfg.clone(), 21).unwrap();
        let run = train(&mut model, &data.train, &data.val, 21).unwrap();
        (model, run)
    };
    let (m1, r1) = run_once();
    let (m2, r2) = run_once();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1.step_losses), bits(&r2.step_losses));
    assert_eq!(m1.params.iter().count(), m2.params.iter().count());
    for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(bits(a.data()), bits(b.data()));
    }
    let first = r1.epochs.first().unwrap().train_loss;
    let last = r1.epochs.last().unwrap().train_loss;
    assert!(last < first, "train loss {first} -> {last}");
    assert!(r1.max_fusion_error <= 1e-12);
    assert!(r1.step_losses.iter().all(|l| l.is_finite()));
    // the restored parameters are those of the best validation epoch
    let val = evaluate(&m1, &data.val).unwrap().mse;
    assert!((val - r1.best_val).abs() <= 1e-12);
}

#[test]
fn empty_training_split_is_an_error() {
    let cfg = tiny_config();
    let data = sine_data(&cfg, 500);
    let mut model = AsgMamba::new(cfg, 0).unwrap();
    let mut none = data.val.clone();
    none.horizon = 10_000;
    assert!(none.is_empty());
    assert!(matches!(train(&mut model, &none, &data.val, 0), Err(Error::Data(_))));
}

mod common;

use std::time::Instant;

use asgmamba::params::{Bound, Params};
use asgmamba::ssm::{
    discretize, init_mamba, mamba_block, selective_scan_values, ssm_parameters, MambaDims, MambaParams,
};
use asgmamba::tape::{Tape, Var};
use asgmamba::Tensor;
use common::{grad_check, rand_tensor, rng, unroll_scan, weighted_sum};
use rand::Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn random_instance(seed: u64, steps: usize, di: usize, ds: usize) -> [Tensor; 5] {
    let mut r = rng(seed);
    let delta = Tensor::from_fn(vec![steps, di], |_| r.random_range(0.01..1.5));
    let a = Tensor::from_fn(vec![di, ds], |_| -r.random_range(0.1..3.0));
    let b = rand_tensor(&mut r, &[steps, ds], 1.0);
    let c = rand_tensor(&mut r, &[steps, ds], 1.0);
    let x = rand_tensor(&mut r, &[steps, di], 1.0);
    [delta, a, b, c, x]
}

#[test]
fn scalar_hand_recurrence() {
    let delta = Tensor::new(vec![2, 1], vec![LN2; 2]).unwrap();
    let a = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
    let b = Tensor::ones(vec![2, 1]);
    let x = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    let (abar, bx) = discretize(&delta, &a, &b, &x).unwrap();
    assert!((abar.data()[0] - 0.5).abs() < 1e-15);
    let y = selective_scan_values(&abar, &bx, &Tensor::ones(vec![2, 1]), &Tensor::zeros(vec![1]), &x).unwrap();
    assert_eq!(format!("{:.3} {:.3}", y.data()[0], y.data()[1]), "0.693 0.347");
}

#[test]
fn discretization_limits() {
    let x = Tensor::ones(vec![1, 1]);
    let b = Tensor::ones(vec![1, 1]);
    let (abar, bx) = discretize(&Tensor::full(vec![1, 1], 0.3), &Tensor::zeros(vec![1, 1]), &b, &x).unwrap();
    assert_eq!((abar.data()[0], bx.data()[0]), (1.0, 0.3));
    let (abar, bx) = discretize(&Tensor::full(vec![1, 1], 1e-12), &Tensor::full(vec![1, 1], -2.0), &b, &x).unwrap();
    assert!((abar.data()[0] - 1.0).abs() < 1e-11 && bx.data()[0].abs() < 1e-11);
}

#[test]
fn zero_readout_is_pure_skip() {
    let [delta, a, b, _, x] = random_instance(1, 6, 2, 3);
    let (abar, bx) = discretize(&delta, &a, &b, &x).unwrap();
    let y = selective_scan_values(&abar, &bx, &Tensor::zeros(vec![6, 3]), &Tensor::ones(vec![2]), &x).unwrap();
    assert_eq!(y, x);
}

#[test]
fn scan_matches_unroll_on_random_instances() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let [delta, a, b, c, x] = random_instance(seed, 6, 2, 3);
        let mut r = rng(seed + 1000);
        let d = rand_tensor(&mut r, &[2], 1.0);
        let (abar, bx) = discretize(&delta, &a, &b, &x).unwrap();
        let y = selective_scan_values(&abar, &bx, &c, &d, &x).unwrap();
        for (u, v) in y.data().iter().zip(unroll_scan(&abar, &bx, &c, d.data(), &x)) {
            worst = worst.max((u - v).abs());
        }
    }
    assert!(worst <= 1e-12, "worst {worst:e}");
}

#[test]
fn state_path_is_homogeneous() {
    let [delta, a, b, c, x] = random_instance(2, 8, 3, 4);
    let (abar, bx) = discretize(&delta, &a, &b, &x).unwrap();
    let bx2 = Tensor::from_fn(bx.shape().to_vec(), |k| 2.0 * bx.data()[k]);
    let zero = Tensor::zeros(vec![3]);
    let y = selective_scan_values(&abar, &bx, &c, &zero, &x).unwrap();
    let y2 = selective_scan_values(&abar, &bx2, &c, &zero, &x).unwrap();
    for (u, v) in y.data().iter().zip(y2.data()) {
        assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn long_scan_stays_bounded() {
    let steps = 10_000;
    let mut r = rng(3);
    let delta = Tensor::from_fn(vec![steps, 2], |_| r.random_range(0.0..2.0));
    let a = Tensor::new(vec![2, 2], vec![-1.0, -2.0, -1e-3, -4.0]).unwrap();
    let b = rand_tensor(&mut r, &[steps, 2], 1.0);
    let c = rand_tensor(&mut r, &[steps, 2], 1.0);
    let x = rand_tensor(&mut r, &[steps, 2], 1.0);
    let (abar, bx) = discretize(&delta, &a, &b, &x).unwrap();
    assert!(abar.data().iter().all(|&v| v <= 1.0 && v > 0.0));
    let y = selective_scan_values(&abar, &bx, &c, &Tensor::ones(vec![2]), &x).unwrap();
    assert!(y.is_finite());
    assert!(y.data().iter().all(|v| v.abs() < 1e4));
}

#[test]
fn parameters_at_zero_weights() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_fn(vec![3, 4], |k| k as f64 - 5.0));
    let zero = |t: &mut Tape, s: Vec<usize>| t.constant(Tensor::zeros(s));
    let p = MambaParams {
        w_in: x,
        conv_w: x,
        conv_b: x,
        w_b: t.param(Tensor::ones(vec![2, 4])),
        w_c: zero(&mut t, vec![2, 4]),
        w_dt: zero(&mut t, vec![4, 4]),
        b_dt: zero(&mut t, vec![4]),
        a_log: x,
        d_skip: x,
        w_out: x,
    };
    let (delta, _, c) = ssm_parameters(&mut t, x, &p).unwrap();
    assert!(t.value(delta).data().iter().all(|&v| (v - LN2).abs() < 1e-15));
    assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    let x0 = t.constant(Tensor::zeros(vec![3, 4]));
    let (_, b0, _) = ssm_parameters(&mut t, x0, &p).unwrap();
    assert!(t.value(b0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn delta_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let inputs = vec![rand_tensor(&mut r, &[5, 3], 1.0), rand_tensor(&mut r, &[3, 3], 1.0), rand_tensor(&mut r, &[3], 1.0)];
    let err = grad_check(
        &inputs,
        |t, v| {
            let dt = t.linear(v[0], v[1], Some(v[2]))?;
            let delta = t.softplus(dt);
            Ok(t.sum(delta))
        },
        1e-5,
        1e-6,
    );
    assert!(err <= 1e-5, "{err:e}");
}

fn block_params(dims: &MambaDims, seed: u64) -> Params {
    let mut params = Params::new();
    init_mamba(&mut params, "m", dims, &mut rng(seed));
    params
}

fn bind_slice(v: &[Var]) -> MambaParams {
    MambaParams {
        w_in: v[0],
        conv_w: v[1],
        conv_b: v[2],
        w_b: v[3],
        w_c: v[4],
        w_dt: v[5],
        b_dt: v[6],
        a_log: v[7],
        d_skip: v[8],
        w_out: v[9],
    }
}

fn run_block(params: &Params, z: &Tensor, seqs: usize, dims: &MambaDims) -> Tensor {
    let mut t = Tape::new();
    let bound = Bound::new(&mut t, params, false);
    let p = MambaParams::bind(&bound, "m").unwrap();
    let zv = t.constant(z.clone());
    let y = mamba_block(&mut t, zv, seqs, &p, dims).unwrap();
    t.value(y).clone()
}

#[test]
fn zero_weights_give_zero_output() {
    let dims = MambaDims::new(8, 2, 4, 4);
    let mut params = block_params(&dims, 5);
    for (_, v) in params.iter_mut() {
        v.data_mut().fill(0.0);
    }
    let z = rand_tensor(&mut rng(6), &[8, 8], 1.0);
    assert!(run_block(&params, &z, 2, &dims).data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let dims = MambaDims::new(8, 2, 4, 4);
    let params = block_params(&dims, 7);
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(rand_tensor(&mut rng(8), &[4, 8], 1.0));
    let err = grad_check(
        &inputs,
        |t, v| {
            let p = bind_slice(v);
            let y = mamba_block(t, v[10], 1, &p, &dims)?;
            weighted_sum(t, y, 9)
        },
        1e-4,
        1e-6,
    );
    assert!(err <= 1e-3, "block rel err {err:e}");
}

#[test]
fn single_token_matches_closed_form() {
    let dims = MambaDims::new(4, 2, 3, 4);
    let params = block_params(&dims, 10);
    let z = rand_tensor(&mut rng(11), &[1, 4], 1.0);
    let got = run_block(&params, &z, 1, &dims);
    // one token: the causal conv sees only the last tap, h₁ = B̄x₁
    let g = |n: &str| params.get(&format!("m.{n}")).unwrap();
    let (d, di, ds) = (4, dims.d_inner, 3);
    let lin = |w: &Tensor, x: &[f64], rows: usize| -> Vec<f64> {
        (0..rows).map(|i| (0..x.len()).map(|k| w.at(&[i, k]) * x[k]).sum()).collect()
    };
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let xz = lin(g("W_in"), z.data(), 2 * di);
    let conv = g("conv_w");
    let u: Vec<f64> = (0..di)
        .map(|i| silu(xz[i] * conv.at(&[dims.d_conv - 1, i]) + g("conv_b").data()[i]))
        .collect();
    let dt = lin(g("W_dt"), &u, di);
    let b = lin(g("W_B"), &u, ds);
    let c = lin(g("W_C"), &u, ds);
    let y: Vec<f64> = (0..di)
        .map(|i| {
            let delta = (dt[i] + g("b_dt").data()[i]).exp().ln_1p();
            let h: f64 = (0..ds).map(|j| delta * b[j] * u[i] * c[j]).sum();
            (h + g("D_skip").data()[i] * u[i]) * silu(xz[di + i])
        })
        .collect();
    let want = lin(g("W_out"), &y, d);
    for (a, b) in got.data().iter().zip(want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn perturbing_a_token_never_changes_the_past() {
    let dims = MambaDims::new(4, 2, 3, 4);
    let params = block_params(&dims, 12);
    let steps = 7;
    let z = rand_tensor(&mut rng(13), &[steps, 4], 1.0);
    let base = run_block(&params, &z, 1, &dims);
    for t in 0..steps {
        let mut bumped = z.clone();
        bumped.set(&[t, 1], bumped.at(&[t, 1]) + 0.5);
        let out = run_block(&params, &bumped, 1, &dims);
        for s in 0..steps {
            let same = base.row(s) == out.row(s);
            assert_eq!(same, s < t, "token {t} output {s}");
        }
    }
}

#[test]
fn forward_time_is_linear_in_tokens() {
    let dims = MambaDims::new(16, 2, 16, 4);
    let params = block_params(&dims, 14);
    let mut fastest = Vec::new();
    for n in [512usize, 4096] {
        let z = rand_tensor(&mut rng(15), &[n, 16], 1.0);
        run_block(&params, &z, 1, &dims);
        // the fastest repetition is the one least disturbed by tests
        // running alongside in this binary
        let best = (0..7)
            .map(|_| {
                let s = Instant::now();
                run_block(&params, &z, 1, &dims);
                s.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        fastest.push(best);
    }
    // 8x the tokens; cache effects push this above 8, a quadratic scan
    // would land near 64
    let ratio = fastest[1] / fastest[0];
    assert!(ratio <= 16.0, "ratio {ratio} ({fastest:?})");
}

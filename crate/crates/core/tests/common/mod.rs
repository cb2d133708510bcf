#![allow(dead_code)]

use mlrl_core::rng::{self, Rng};
use mlrl_core::tensor::{Matrix, Tape, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

pub fn normal_matrix(r: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// `A·Aᵀ + d·I` with Gaussian `A`.
pub fn random_spd(r: &mut Rng, d: usize) -> Matrix {
    let a = normal_matrix(r, d, d);
    let mut s = a.matmul_t(&a).unwrap();
    for i in 0..d {
        s.data_mut()[i * d + i] += 0.5 + r.random::<f64>();
    }
    s
}

pub fn rng(seed: u64) -> Rng {
    rng::stream(seed, &[0xfd])
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// entry contributes to the gradient.
pub fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let mut g = rng(seed);
    let w = tape.constant(normal_matrix(&mut g, r, c));
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

/// Tape gradient of `build` at `x0` against central differences.
pub fn op_grad_error(x0: &Matrix, build: impl Fn(&mut Tape, Var) -> Var, h: f64) -> f64 {
    let (rows, cols) = x0.shape();
    let eval = |data: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::new(rows, cols, data.to_vec()).unwrap());
        let out = build(&mut tape, x);
        let root = contract(&mut tape, out, 77);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let out = build(&mut tape, x);
    let root = contract(&mut tape, out, 77);
    tape.backward(root).unwrap();
    let analytic = tape.grad_or_zeros(x).data().to_vec();
    let numeric = central_diff(eval, x0.data(), h);
    rel_err(&analytic, &numeric, 1e-8)
}

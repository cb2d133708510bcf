mod common;

use common::{normal_matrix, random_spd, rng};
use mlrl_core::gaussian::{
    default_weights, fit_gaussian, kl_divergence, weighted_penalty, GaussianDist, KlWeights, PenaltyOptions,
};
use mlrl_core::tensor::Matrix;
use mlrl_core::Error;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Plain Cholesky, kept separate from the library's.
fn chol(a: &Matrix) -> Vec<Vec<f64>> {
    let d = a.rows();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a.row(i)[i] - s).sqrt();
            } else {
                l[i][j] = (a.row(i)[j] - s) / l[j][j];
            }
        }
    }
    l
}

struct Density {
    mean: Vec<f64>,
    l: Vec<Vec<f64>>,
    log_norm: f64,
}

impl Density {
    fn new(g: &GaussianDist) -> Self {
        let l = chol(&g.cov);
        let d = g.mean.len();
        let logdet: f64 = (0..d).map(|i| 2.0 * l[i][i].ln()).sum();
        Self {
            mean: g.mean.clone(),
            l,
            log_norm: -0.5 * (logdet + d as f64 * (2.0 * std::f64::consts::PI).ln()),
        }
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut z = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| self.l[i][k] * z[k]).sum();
            z[i] = (x[i] - self.mean[i] - s) / self.l[i][i];
        }
        self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn sample(&self, e: &[f64], out: &mut [f64]) {
        for i in 0..out.len() {
            out[i] = self.mean[i] + (0..=i).map(|k| self.l[i][k] * e[k]).sum::<f64>();
        }
    }
}

fn random_gaussian(r: &mut mlrl_core::rng::Rng, d: usize) -> GaussianDist {
    let mean: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
    GaussianDist::new(mean, random_spd(r, d)).unwrap()
}

#[test]
fn kl_of_a_distribution_with_itself_is_zero() {
    let mut r = rng(11);
    for i in 0..1000 {
        let d = 1 + i % 6;
        let p = random_gaussian(&mut r, d);
        let kl = kl_divergence(&p, &p, true).unwrap();
        assert!(kl.abs() < 1e-9, "dim {d}: {kl:e}");
    }
}

#[test]
fn hand_computed_values() {
    let n01 = GaussianDist::new(vec![0.0], Matrix::identity(1)).unwrap();
    let n11 = GaussianDist::new(vec![1.0], Matrix::identity(1)).unwrap();
    assert!((kl_divergence(&n01, &n11, true).unwrap() - 0.5).abs() < 1e-9);

    let p = GaussianDist::new(vec![0.0, 0.0], Matrix::identity(2)).unwrap();
    let q = GaussianDist::new(vec![0.0, 0.0], Matrix::identity(2).scale(4.0)).unwrap();
    let expected = 0.5 * (0.5 - 2.0 + 16f64.ln());
    assert!((expected - 0.63629).abs() < 1e-5);
    assert!((kl_divergence(&p, &q, true).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn dimension_constant_flag_shifts_by_half_d() {
    let mut r = rng(12);
    let p = random_gaussian(&mut r, 3);
    let q = random_gaussian(&mut r, 3);
    let with = kl_divergence(&p, &q, true).unwrap();
    let without = kl_divergence(&p, &q, false).unwrap();
    assert!((without - with - 1.5).abs() < 1e-12);
}

#[test]
fn closed_form_matches_monte_carlo() {
    let mut r = rng(13);
    for pair in 0..20 {
        let d = 2 + pair % 2;
        let p = random_gaussian(&mut r, d);
        let q = random_gaussian(&mut r, d);
        let (dp, dq) = (Density::new(&p), Density::new(&q));
        let samples = 1_000_000;
        let mut e = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for _ in 0..samples {
            for v in e.iter_mut() {
                *v = StandardNormal.sample(&mut r);
            }
            dp.sample(&e, &mut x);
            acc += dp.log_pdf(&x) - dq.log_pdf(&x);
        }
        let mc = acc / samples as f64;
        let exact = kl_divergence(&p, &q, true).unwrap();
        let tol = (0.02 * exact.abs()).max(1e-3);
        assert!((mc - exact).abs() <= tol, "pair {pair}: mc {mc} exact {exact}");
    }
}

#[test]
fn fit_recovers_known_gaussian() {
    let mut r = rng(14);
    let truth = random_gaussian(&mut r, 3);
    let dens = Density::new(&truth);
    let mut rows = Vec::with_capacity(10_000);
    let mut e = [0.0; 3];
    for _ in 0..10_000 {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut r);
        }
        let mut x = vec![0.0; 3];
        dens.sample(&e, &mut x);
        rows.push(x);
    }
    let fit = fit_gaussian(&Matrix::from_rows(&rows).unwrap(), 1e-3).unwrap();
    let fro = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mean_err: Vec<f64> = fit.mean.iter().zip(&truth.mean).map(|(a, b)| a - b).collect();
    let cov_err: Vec<f64> = fit.cov.data().iter().zip(truth.cov.data()).map(|(a, b)| a - b).collect();
    assert!(fro(&mean_err) / fro(&truth.mean) < 0.05);
    assert!(fro(&cov_err) / fro(truth.cov.data()) < 0.05);
}

#[test]
fn identical_rows_stay_positive_definite_with_shrinkage() {
    let rows = vec![vec![1.0, 2.0, 3.0]; 5];
    let fit = fit_gaussian(&Matrix::from_rows(&rows).unwrap(), 1e-3).unwrap();
    assert!(fit.cov.data().iter().all(|v| v.is_finite()));
    assert!(matches!(
        fit_gaussian(&Matrix::from_rows(&rows).unwrap(), 0.0),
        Err(Error::NotPositiveDefinite { .. })
    ));
}

#[test]
fn one_sample_is_insufficient() {
    assert!(matches!(
        fit_gaussian(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), 1e-3),
        Err(Error::InsufficientSamples { .. })
    ));
}

#[test]
fn weights_must_descend() {
    let err = KlWeights::new(vec![0.5, 1.0]).unwrap_err().to_string();
    assert!(err.contains("weights must be strictly descending"), "{err}");
    assert!(KlWeights::new(vec![1.0, 1.0]).is_err());
    assert!(KlWeights::new(vec![1.0, -0.5]).is_err());
    assert_eq!(default_weights(4).unwrap().as_slice(), &[1.0, 0.5, 0.25]);
    assert_eq!(default_weights(6).unwrap().as_slice(), &[1.0, 0.5, 0.25, 0.125, 0.06]);
}

#[test]
fn penalty_has_one_term_per_failed_class() {
    let mut r = rng(15);
    let policy = random_gaussian(&mut r, 2);
    let classes: Vec<_> = (0..3).map(|c| (c, Some(random_gaussian(&mut r, 2)))).collect();
    let w = default_weights(4).unwrap();
    let report = weighted_penalty(&classes, &policy, &w, PenaltyOptions::default()).unwrap();
    let got: Vec<usize> = report.terms.iter().map(|t| t.class).collect();
    assert_eq!(got, vec![0, 1, 2]);
    let sum: f64 = report.terms.iter().map(|t| t.weighted).sum();
    assert!((report.total - sum).abs() < 1e-12);

    let top = vec![(3, Some(random_gaussian(&mut r, 2)))];
    assert!(matches!(
        weighted_penalty(&top, &policy, &w, PenaltyOptions::default()),
        Err(Error::InvalidClass { class: 3, max: 2 })
    ));
}

#[test]
fn empty_classes_are_skipped() {
    let mut r = rng(16);
    let policy = random_gaussian(&mut r, 2);
    let classes = vec![(0, None), (1, Some(random_gaussian(&mut r, 2))), (2, None)];
    let report = weighted_penalty(&classes, &policy, &default_weights(4).unwrap(), PenaltyOptions::default())
        .unwrap();
    assert_eq!(report.skipped, vec![0, 2]);
    assert_eq!(report.terms.len(), 1);
}

#[test]
fn equal_divergences_are_weighted_in_descending_order() {
    let mut r = rng(17);
    let policy = random_gaussian(&mut r, 2);
    let class = random_gaussian(&mut r, 2);
    let classes: Vec<_> = (0..5).map(|c| (c, Some(class.clone()))).collect();
    let report =
        weighted_penalty(&classes, &policy, &default_weights(6).unwrap(), PenaltyOptions::default()).unwrap();
    for pair in report.terms.windows(2) {
        assert!(pair[0].weighted > pair[1].weighted);
    }
}

fn gaussian_strategy(d: usize) -> impl Strategy<Value = GaussianDist> {
    (
        proptest::collection::vec(-3.0..3.0f64, d),
        proptest::collection::vec(-1.5..1.5f64, d * d),
        proptest::collection::vec(0.1..2.0f64, d),
    )
        .prop_map(move |(mean, a, diag)| {
            let a = Matrix::new(d, d, a).unwrap();
            let mut cov = a.matmul_t(&a).unwrap();
            for i in 0..d {
                cov.data_mut()[i * d + i] += diag[i];
            }
            GaussianDist::new(mean, cov).unwrap()
        })
}

fn pair_strategy() -> impl Strategy<Value = (GaussianDist, GaussianDist)> {
    (1usize..=6).prop_flat_map(|d| (gaussian_strategy(d), gaussian_strategy(d)))
}

proptest! {
    #[test]
    fn kl_is_nonnegative((p, q) in pair_strategy()) {
        let kl = kl_divergence(&p, &q, true).unwrap();
        prop_assert!(kl >= -1e-9, "{}", kl);
    }

    #[test]
    fn fit_is_positive_definite(rows in 2usize..12, d in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, rows, d);
        let scale: f64 = r.random_range(0.1..10.0);
        let fit = fit_gaussian(&x.map(|v| v * scale), 1e-3).unwrap();
        prop_assert!(mlrl_core::tensor::linalg::cholesky(&fit.cov).is_ok());
    }
}

//! Multivariate Gaussian fits, their closed-form KL divergence, and the
//! descending-weight penalty over sub-maximal rating classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{linalg, Matrix, Tape, Var};

/// Default relative covariance shrinkage.
pub const DEFAULT_LAMBDA_REL: f64 = 1e-3;

/// Penalty weights in the order of Table-1 style defaults.
pub const DEFAULT_OMEGA: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.06];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub sample_count: usize,
    /// Diagonal inflation actually applied.
    pub shrinkage: f64,
}

impl GaussianDist {
    /// Builds a distribution from explicit parameters, checking SPD-ness.
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::dim(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        let cov = linalg::symmetrized_spd_input(&cov)?;
        linalg::cholesky(&cov)?;
        Ok(Self {
            mean,
            cov,
            sample_count: 0,
            shrinkage: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let l = linalg::cholesky(&self.cov)?;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let z = linalg::solve_lower(&l, &Matrix::column(&diff))?;
        let maha: f64 = z.data().iter().map(|v| v * v).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * (maha + linalg::logdet_from_cholesky(&l) + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// Shrinkage for a sample covariance: `λ_rel·mean(diag)`, or `λ_rel` when
/// the diagonal mean is zero.
pub fn shrinkage_for(sample_cov: &Matrix, lambda_rel: f64) -> f64 {
    let d = sample_cov.rows().max(1) as f64;
    let mean_diag = sample_cov.trace() / d;
    if mean_diag > 0.0 {
        lambda_rel * mean_diag
    } else {
        lambda_rel
    }
}

/// Unbiased sample covariance of the rows of `x`.
pub fn sample_covariance(x: &Matrix) -> Result<(Matrix, Matrix)> {
    let m = x.rows();
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let mean = x.col_means();
    let mut centered = x.clone();
    for i in 0..m {
        for (v, mu) in centered.row_mut(i).iter_mut().zip(mean.data()) {
            *v -= mu;
        }
    }
    let cov = centered.t_matmul(&centered)?.scale(1.0 / (m - 1) as f64);
    Ok((mean, cov.symmetrize()?))
}

/// Mean and shrunk sample covariance of the rows of `features`.
pub fn fit_gaussian(features: &Matrix, lambda_rel: f64) -> Result<GaussianDist> {
    if features.cols() == 0 {
        return Err(Error::dim("cannot fit a zero-dimensional Gaussian"));
    }
    if !features.is_finite() {
        return Err(Error::InvalidInput("features contain non-finite values".into()));
    }
    if !(lambda_rel >= 0.0) || !lambda_rel.is_finite() {
        return Err(Error::config(format!("lambda_rel must be >= 0, got {lambda_rel}")));
    }
    let (mean, cov) = sample_covariance(features)?;
    let lambda = if lambda_rel > 0.0 {
        shrinkage_for(&cov, lambda_rel)
    } else {
        0.0
    };
    let cov = cov.add(&Matrix::identity(features.cols()).scale(lambda))?;
    linalg::cholesky(&cov)?;
    Ok(GaussianDist {
        mean: mean.into_data(),
        cov,
        sample_count: features.rows(),
        shrinkage: lambda,
    })
}

/// `D_KL(p ∥ q)` in closed form.
///
/// `½(tr(Σq⁻¹Σp) + (μp−μq)ᵀΣq⁻¹(μp−μq) − d + ln det Σq − ln det Σp)`; the
/// `−d` term is dropped when `include_dim_constant` is false.
pub fn kl_divergence(p: &GaussianDist, q: &GaussianDist, include_dim_constant: bool) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::dim(format!(
            "KL between dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let lq = linalg::cholesky(&q.cov)?;
    let lp = linalg::cholesky(&p.cov)?;
    let trace = linalg::cholesky_solve(&lq, &p.cov)?.trace();
    let diff: Vec<f64> = p.mean.iter().zip(&q.mean).map(|(a, b)| a - b).collect();
    let z = linalg::solve_lower(&lq, &Matrix::column(&diff))?;
    let quad: f64 = z.data().iter().map(|v| v * v).sum();
    let d = if include_dim_constant { p.dim() as f64 } else { 0.0 };
    Ok(0.5 * (trace + quad - d + linalg::logdet_from_cholesky(&lq) - linalg::logdet_from_cholesky(&lp)))
}

/// A Gaussian whose mean (`1×d`) and covariance (`d×d`) live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeGaussian {
    pub mean: Var,
    pub cov: Var,
}

impl TapeGaussian {
    pub fn constant(tape: &mut Tape, dist: &GaussianDist) -> Self {
        Self {
            mean: tape.constant(Matrix::row_vector(&dist.mean)),
            cov: tape.constant(dist.cov.clone()),
        }
    }

    pub fn to_dist(&self, tape: &Tape) -> Result<GaussianDist> {
        GaussianDist::new(tape.value(self.mean).data().to_vec(), tape.value(self.cov).clone())
    }
}

/// Recorded version of [`fit_gaussian`], differentiable through the
/// shrinkage term as well. Returns the shrinkage value used.
pub fn fit_gaussian_tape(tape: &mut Tape, x: Var, lambda_rel: f64) -> Result<(TapeGaussian, f64)> {
    let (m, d) = tape.shape(x);
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let mean = tape.mean_rows(x);
    let centered = tape.sub_row(x, mean)?;
    let ct = tape.transpose(centered);
    let scatter = tape.matmul(ct, centered)?;
    let cov = tape.scale(scatter, 1.0 / (m - 1) as f64);
    let lambda = if lambda_rel > 0.0 {
        shrinkage_for(tape.value(cov), lambda_rel)
    } else {
        0.0
    };
    let cov = if lambda_rel > 0.0 && tape.value(cov).trace() > 0.0 {
        let tr = tape.trace(cov)?;
        let lam = tape.scale(tr, lambda_rel / d as f64);
        let eye = tape.constant(Matrix::identity(d));
        let shrink = tape.mul_scalar(eye, lam)?;
        tape.add(cov, shrink)?
    } else {
        tape.add_const(cov, &Matrix::identity(d).scale(lambda))?
    };
    Ok((TapeGaussian { mean, cov }, lambda))
}

/// Recorded `D_KL(p ∥ q)`; either side may carry gradients.
pub fn kl_divergence_tape(
    tape: &mut Tape,
    p: TapeGaussian,
    q: TapeGaussian,
    include_dim_constant: bool,
) -> Result<Var> {
    let d = tape.shape(p.cov).0;
    if tape.shape(q.cov).0 != d || tape.shape(p.mean) != (1, d) || tape.shape(q.mean) != (1, d) {
        return Err(Error::dim("KL operands have mismatched dimensions"));
    }
    let ratio = tape.solve_spd(q.cov, p.cov)?;
    let trace = tape.trace(ratio)?;
    let diff_row = tape.sub(p.mean, q.mean)?;
    let diff = tape.transpose(diff_row);
    let solved = tape.solve_spd(q.cov, diff)?;
    let quad = tape.matmul(diff_row, solved)?;
    let ld_q = tape.logdet_spd(q.cov)?;
    let ld_p = tape.logdet_spd(p.cov)?;
    let s = tape.add(trace, quad)?;
    let s = tape.add(s, ld_q)?;
    let s = tape.sub(s, ld_p)?;
    let s = if include_dim_constant {
        tape.add_scalar(s, -(d as f64))
    } else {
        s
    };
    Ok(tape.scale(s, 0.5))
}

/// Strictly descending positive penalty weights `ω_0 > ω_1 > … > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct KlWeights(Vec<f64>);

impl KlWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("weights must not be empty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config("weights must be positive and finite"));
        }
        if weights.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config("weights must be strictly descending"));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of rating classes these weights serve (one more than weights).
    pub fn class_count(&self) -> usize {
        self.0.len() + 1
    }
}

impl TryFrom<Vec<f64>> for KlWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        KlWeights::new(v)
    }
}

impl From<KlWeights> for Vec<f64> {
    fn from(w: KlWeights) -> Self {
        w.0
    }
}

/// The first `n − 1` default weights, for `2 ≤ n ≤ 6`.
pub fn default_weights(n: usize) -> Result<KlWeights> {
    if !(2..=6).contains(&n) {
        return Err(Error::config(format!("class count n = {n} must be in 2..=6")));
    }
    KlWeights::new(DEFAULT_OMEGA[..n - 1].to_vec())
}

/// Which way round the class and policy distributions enter the KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `D_KL(D_i ∥ D_π)`.
    ClassToPolicy,
    /// `D_KL(D_π ∥ D_i)`. Experimental.
    PolicyToClass,
}

impl KlDirection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "class_to_policy" | "forward" => Ok(KlDirection::ClassToPolicy),
            "policy_to_class" | "reverse" => Ok(KlDirection::PolicyToClass),
            other => Err(Error::config(format!("unknown kl_direction `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KlDirection::ClassToPolicy => "class_to_policy",
            KlDirection::PolicyToClass => "policy_to_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyTerm {
    pub class: usize,
    pub weight: f64,
    pub kl: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub terms: Vec<PenaltyTerm>,
    pub skipped: Vec<usize>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PenaltyOptions {
    pub include_dim_constant: bool,
    pub direction: KlDirection,
}

impl Default for PenaltyOptions {
    fn default() -> Self {
        Self {
            include_dim_constant: true,
            direction: KlDirection::ClassToPolicy,
        }
    }
}

/// `Σ_i ω_i·D_KL(D_i ∥ D_π)` over the listed classes, recorded on `tape`.
///
/// `class_dists` pairs a class index with its fit, or `None` when the class
/// buffer is empty; those are skipped and listed in the report. The top
/// class `ω.len()` is never accepted. Returns `None` for the penalty when
/// every class was skipped.
pub fn weighted_penalty_tape(
    tape: &mut Tape,
    class_dists: &[(usize, Option<GaussianDist>)],
    policy: TapeGaussian,
    weights: &KlWeights,
    opts: PenaltyOptions,
) -> Result<(Option<Var>, PenaltyReport)> {
    let top = weights.len();
    let mut report = PenaltyReport::default();
    let mut total: Option<Var> = None;
    for (class, dist) in class_dists {
        let class = *class;
        if class >= top {
            return Err(Error::InvalidClass { class, max: top - 1 });
        }
        let Some(dist) = dist else {
            report.skipped.push(class);
            continue;
        };
        let c = TapeGaussian::constant(tape, dist);
        let kl = match opts.direction {
            KlDirection::ClassToPolicy => kl_divergence_tape(tape, c, policy, opts.include_dim_constant)?,
            KlDirection::PolicyToClass => kl_divergence_tape(tape, policy, c, opts.include_dim_constant)?,
        };
        let w = weights.as_slice()[class];
        let term = tape.scale(kl, w);
        let kl_value = tape.value(kl).item();
        report.terms.push(PenaltyTerm {
            class,
            weight: w,
            kl: kl_value,
            weighted: w * kl_value,
        });
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    report.total = total.map(|t| tape.value(t).item()).unwrap_or(0.0);
    Ok((total, report))
}

/// Value-level [`weighted_penalty_tape`].
pub fn weighted_penalty(
    class_dists: &[(usize, Option<GaussianDist>)],
    policy: &GaussianDist,
    weights: &KlWeights,
    opts: PenaltyOptions,
) -> Result<PenaltyReport> {
    let mut tape = Tape::new();
    let p = TapeGaussian::constant(&mut tape, policy);
    let (_, report) = weighted_penalty_tape(&mut tape, class_dists, p, weights, opts)?;
    Ok(report)
}

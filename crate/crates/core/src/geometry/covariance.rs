//! Oracle Approximating Shrinkage (OAS) of pooled residuals toward a
//! scaled identity, and its precision matrix.

use nalgebra::DMatrix;

use super::{GeometryError, SquareMatrix};

/// Jitter multipliers tried, in order, when the factorization fails.
const JITTER_STEPS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone)]
pub struct CovarianceFit {
    pub covariance: SquareMatrix,
    pub precision: SquareMatrix,
    /// Shrinkage intensity in `[0, 1]`.
    pub shrinkage: f64,
    /// Multiple of `tr(S)/d` added to the diagonal, zero when none was needed.
    pub jitter: f64,
}

/// Plug-in second-moment matrix `S = (1/n) Σ r rᵀ` of mean-zero residuals.
pub fn second_moment(residuals: &[Vec<f64>]) -> DMatrix<f64> {
    let n = residuals.len();
    let d = residuals[0].len();
    let r = DMatrix::from_fn(n, d, |i, j| residuals[i][j]);
    let mut s = r.transpose() * &r;
    s /= n as f64;
    s
}

/// OAS intensity:
/// `ρ = min(1, [(1 - 2/d) tr(S²) + tr(S)²] / [(n + 1 - 2/d)(tr(S²) - tr(S)²/d)])`,
/// with `ρ = 1` when the denominator is not positive.
pub fn oas_shrinkage(s: &DMatrix<f64>, n: usize) -> f64 {
    let d = s.nrows() as f64;
    let n = n as f64;
    let tr = s.trace();
    let tr_sq = s.iter().map(|v| v * v).sum::<f64>();
    let num = (1.0 - 2.0 / d) * tr_sq + tr * tr;
    let den = (n + 1.0 - 2.0 / d) * (tr_sq - tr * tr / d);
    if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

pub fn fit_covariance(residuals: &[Vec<f64>]) -> Result<CovarianceFit, GeometryError> {
    let n = residuals.len();
    if n < 2 {
        return Err(GeometryError::DegenerateResiduals(n));
    }
    let d = residuals[0].len();
    if d < 2 || residuals.iter().any(|r| r.len() != d) {
        return Err(GeometryError::DimensionMismatch { expected: d.max(2), got: d });
    }
    let s = second_moment(residuals);
    let shrinkage = oas_shrinkage(&s, n);
    let mu = s.trace() / d as f64;
    let mut sigma = &s * (1.0 - shrinkage);
    for i in 0..d {
        sigma[(i, i)] += shrinkage * mu;
    }
    let (sigma, precision, jitter) = invert_spd(sigma)?;
    Ok(CovarianceFit {
        covariance: SquareMatrix::from_dmatrix(&sigma),
        precision: SquareMatrix::from_dmatrix(&precision),
        shrinkage,
        jitter,
    })
}

/// Cholesky-based inverse with escalating diagonal jitter. Returns the
/// (possibly jittered) matrix alongside its symmetrised inverse.
fn invert_spd(sigma: DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64), GeometryError> {
    let d = sigma.nrows();
    let scale = sigma.trace() / d as f64;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::IllConditionedCovariance);
    }
    let attempts = std::iter::once(0.0).chain(JITTER_STEPS);
    for eps in attempts {
        let mut m = sigma.clone();
        for i in 0..d {
            m[(i, i)] += eps * scale;
        }
        if let Some(chol) = m.clone().cholesky() {
            let inv = chol.inverse();
            let sym = (&inv + inv.transpose()) * 0.5;
            if sym.iter().all(|v| v.is_finite()) {
                return Ok((m, sym, eps));
            }
        }
    }
    Err(GeometryError::IllConditionedCovariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn frobenius(a: &DMatrix<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_second_moment_is_fixed_point() {
        let residuals = vec![
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ];
        let fit = fit_covariance(&residuals).unwrap();
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!(fit.covariance.to_dmatrix(), eye);
        assert_eq!(fit.precision.to_dmatrix(), eye);
        assert_eq!(fit.jitter, 0.0);
    }

    #[test]
    fn paired_basis_vectors_give_scaled_identity_exactly() {
        let residuals = vec![
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let fit = fit_covariance(&residuals).unwrap();
        let s = second_moment(&residuals);
        assert_eq!(fit.covariance.to_dmatrix(), s);
    }

    #[test]
    fn rank_one_residuals_are_regularised() {
        let dir = [0.3, -0.2, 0.9, 0.1, 0.05];
        let residuals: Vec<Vec<f64>> = (0..40)
            .map(|i| dir.iter().map(|v| v * (i as f64 - 19.5)).collect())
            .collect();
        let fit = fit_covariance(&residuals).unwrap();
        let sigma = fit.covariance.to_dmatrix();
        let prec = fit.precision.to_dmatrix();
        let eig = sigma.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e)));
        assert!(lo > 0.0 && hi / lo < 1e8, "shrinkage {} cond {}", fit.shrinkage, hi / lo);
        let err = frobenius(&(&sigma * &prec - DMatrix::identity(5, 5)));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn shrinkage_matches_closed_form() {
        // S = diag(4, 1): tr = 5, tr(S²) = 17, d = 2 → (1 - 2/d) = 0
        // ρ = 25 / ((n + 1 - 1)(17 - 12.5)) = 25 / (4.5 n)
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let n = 50;
        assert!((oas_shrinkage(&s, n) - 25.0 / (4.5 * 50.0)).abs() < 1e-15);
        // d = 4, S = diag(1,1,1,5): tr = 8, tr(S²) = 28
        // num = 0.5*28 + 64 = 78, den = (n + 0.5)(28 - 16) = 12(n + 0.5)
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0, 5.0]));
        assert!((oas_shrinkage(&s, 100) - 78.0 / (12.0 * 100.5)).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_no_worse_than_sample_estimate() {
        let d = 8;
        // known SPD covariance near a scaled identity: C = 0.05 A Aᵀ + 0.5 I
        let a = DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
        let c = &a * a.transpose() * 0.05 + DMatrix::identity(d, d) * 0.5;
        let l = c.clone().cholesky().unwrap().l();
        let mut wins = 0;
        for trial in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let residuals: Vec<Vec<f64>> = (0..10_000)
                .map(|_| {
                    let z = nalgebra::DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                    (&l * z).iter().copied().collect()
                })
                .collect();
            let s = second_moment(&residuals);
            let fit = fit_covariance(&residuals).unwrap();
            if frobenius(&(fit.covariance.to_dmatrix() - &c)) <= frobenius(&(s - &c)) {
                wins += 1;
            }
        }
        assert!(wins >= 16, "{wins}/20");
    }

    #[test]
    fn too_few_or_zero_residuals_fail() {
        assert!(matches!(
            fit_covariance(&[vec![1.0, 2.0]]),
            Err(GeometryError::DegenerateResiduals(1))
        ));
        assert!(matches!(
            fit_covariance(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
            Err(GeometryError::IllConditionedCovariance)
        ));
    }
}

//! Modified Cholesky parameterization of a random-effect covariance,
//! `Omega = Lambda Gamma Gamma' Lambda'`, with `Lambda = diag(lambda)` and
//! `Gamma` unit lower-triangular.
//!
//! Subdiagonal entries of `Gamma` are packed row-major:
//! `(2,1), (3,1), (3,2), (4,1), ...` (1-based), i.e. entry `(u, v)` with
//! `u > v` (0-based) sits at `u (u - 1) / 2 + v`.

use crate::error::{Error, Result};

/// Default tolerance for treating a diagonal entry as zero.
pub const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactors {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CholeskyFactors {
    pub fn q(&self) -> usize {
        self.lambda.len()
    }
}

/// Index of `gamma_{uv}` (0-based, `u > v`) in the packed vector.
pub fn packed_index(u: usize, v: usize) -> usize {
    debug_assert!(u > v);
    u * (u - 1) / 2 + v
}

/// Inverse of [`packed_index`].
pub fn unpack_index(j: usize) -> (usize, usize) {
    let mut u = 1;
    while (u + 1) * u / 2 <= j {
        u += 1;
    }
    (u, j - u * (u - 1) / 2)
}

/// Indicator-masked, constraint-projected factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveFactors {
    pub lambda: Vec<f64>,
    /// Full `q x q` unit lower-triangular matrix, row-major.
    pub gamma: Vec<f64>,
}

impl EffectiveFactors {
    pub fn q(&self) -> usize {
        self.lambda.len()
    }

    pub fn gamma_at(&self, u: usize, v: usize) -> f64 {
        self.gamma[u * self.q() + v]
    }

    /// `Lambda Gamma` as a row-major `q x q` lower-triangular matrix.
    pub fn loading(&self) -> Vec<f64> {
        let q = self.q();
        let mut l = vec![0.0; q * q];
        for u in 0..q {
            for v in 0..=u {
                l[u * q + v] = self.lambda[u] * self.gamma[u * q + v];
            }
        }
        l
    }

    /// Whether effect `k` is switched off (its row and column are forced).
    pub fn is_zero(&self, k: usize) -> bool {
        self.lambda[k] == 0.0
    }
}

/// Applies the indicator mask and the zero-row/column rule on Gamma.
///
/// Raw values are never modified; only the returned copy is masked.
pub fn project_constraints(factors: &CholeskyFactors, included: &[bool]) -> EffectiveFactors {
    let q = factors.q();
    debug_assert_eq!(included.len(), q);
    debug_assert_eq!(factors.gamma.len(), q * q.saturating_sub(1) / 2);
    let lambda: Vec<f64> = factors
        .lambda
        .iter()
        .zip(included)
        .map(|(&l, &on)| if on { l } else { 0.0 })
        .collect();
    let mut gamma = vec![0.0; q * q];
    for u in 0..q {
        gamma[u * q + u] = 1.0;
        for v in 0..u {
            if lambda[u] != 0.0 && lambda[v] != 0.0 {
                gamma[u * q + v] = factors.gamma[packed_index(u, v)];
            }
        }
    }
    EffectiveFactors { lambda, gamma }
}

/// `Omega = Lambda Gamma Gamma' Lambda'`, row-major `q x q`. Mirrored
/// entries are bitwise equal.
pub fn assemble_covariance(eff: &EffectiveFactors) -> Vec<f64> {
    let q = eff.q();
    let l = eff.loading();
    let mut omega = vec![0.0; q * q];
    for i in 0..q {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..=j {
                s += l[i * q + k] * l[j * q + k];
            }
            omega[i * q + j] = s;
            omega[j * q + i] = s;
        }
    }
    omega
}

/// Recovers factors from a symmetric PSD matrix.
///
/// Rows whose diagonal is at most `tol` map to `lambda_k = 0` (the whole row
/// must then vanish within `tol`). The remaining block goes through a
/// standard lower Cholesky factorization `L`, giving `lambda_u = L_uu` and
/// `gamma_uv = L_uv / L_uu`.
pub fn decompose_covariance(omega: &[f64], tol: f64) -> Result<CholeskyFactors> {
    let q = (omega.len() as f64).sqrt().round() as usize;
    if q * q != omega.len() {
        return Err(Error::Decomposition(format!(
            "matrix with {} entries is not square",
            omega.len()
        )));
    }
    let at = |i: usize, j: usize| omega[i * q + j];
    for i in 0..q {
        for j in 0..i {
            if (at(i, j) - at(j, i)).abs() > tol {
                return Err(Error::Decomposition(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
        if !at(i, i).is_finite() {
            return Err(Error::Decomposition(format!("non-finite diagonal at {i}")));
        }
    }
    let mut active = vec![false; q];
    for k in 0..q {
        let d = at(k, k);
        if d < -tol {
            return Err(Error::Decomposition(format!("negative diagonal {d} at {k}")));
        }
        if d <= tol {
            if let Some(j) = (0..q).find(|&j| at(k, j).abs() > tol) {
                return Err(Error::Decomposition(format!(
                    "row {k} has zero variance but covariance {} with {j}",
                    at(k, j)
                )));
            }
        } else {
            active[k] = true;
        }
    }

    // Cholesky on the active rows/columns, stored in full q x q.
    let mut l = vec![0.0; q * q];
    for i in (0..q).filter(|&i| active[i]) {
        for j in (0..=i).filter(|&j| active[j]) {
            let mut s = at(i, j);
            for k in (0..j).filter(|&k| active[k]) {
                s -= l[i * q + k] * l[j * q + k];
            }
            if i == j {
                if s <= tol {
                    return Err(Error::Decomposition(format!(
                        "matrix is not positive definite on its nonzero rows (pivot {s} at {i})"
                    )));
                }
                l[i * q + i] = s.sqrt();
            } else {
                l[i * q + j] = s / l[j * q + j];
            }
        }
    }

    let lambda: Vec<f64> = (0..q).map(|k| l[k * q + k]).collect();
    let mut gamma = vec![0.0; q * q.saturating_sub(1) / 2];
    for u in 0..q {
        for v in 0..u {
            if active[u] && active[v] {
                gamma[packed_index(u, v)] = l[u * q + v] / lambda[u];
            }
        }
    }
    Ok(CholeskyFactors { lambda, gamma })
}

/// `rho_i = Lambda Gamma xi_i`; component `k` is exactly zero when
/// `lambda_k` is.
pub fn random_effect_vector(eff: &EffectiveFactors, xi: &[f64]) -> Vec<f64> {
    let q = eff.q();
    (0..q)
        .map(|u| {
            if eff.lambda[u] == 0.0 {
                return 0.0;
            }
            let mut s = 0.0;
            for v in 0..=u {
                s += eff.gamma[u * q + v] * xi[v];
            }
            eff.lambda[u] * s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    const BLOCK: [f64; 9] = [0.08, 0.04, 0.02, 0.04, 0.15, 0.09, 0.02, 0.09, 0.06];

    /// Textbook Cholesky written out for 3x3, independent of the code above.
    fn oracle_cholesky3(a: &[f64; 9]) -> [[f64; 3]; 3] {
        let l11 = a[0].sqrt();
        let l21 = a[3] / l11;
        let l31 = a[6] / l11;
        let l22 = (a[4] - l21 * l21).sqrt();
        let l32 = (a[7] - l31 * l21) / l22;
        let l33 = (a[8] - l31 * l31 - l32 * l32).sqrt();
        [[l11, 0.0, 0.0], [l21, l22, 0.0], [l31, l32, l33]]
    }

    fn ones(q: usize) -> Vec<bool> {
        vec![true; q]
    }

    #[test]
    fn packing_order() {
        assert_eq!(packed_index(1, 0), 0);
        assert_eq!(packed_index(2, 0), 1);
        assert_eq!(packed_index(2, 1), 2);
        assert_eq!(packed_index(3, 0), 3);
        for j in 0..45 {
            let (u, v) = unpack_index(j);
            assert_eq!(packed_index(u, v), j);
        }
    }

    #[test]
    fn projection_without_active_constraint_copies_gamma() {
        let f = CholeskyFactors {
            lambda: vec![0.5, 1.0, 2.0],
            gamma: vec![0.1, 0.2, 0.3],
        };
        let e = project_constraints(&f, &ones(3));
        assert_eq!(e.lambda, f.lambda);
        assert_eq!(e.gamma_at(1, 0), 0.1);
        assert_eq!(e.gamma_at(2, 0), 0.2);
        assert_eq!(e.gamma_at(2, 1), 0.3);
    }

    #[test]
    fn projection_zeroes_row_and_column() {
        let f = CholeskyFactors {
            lambda: vec![0.5, 1.0, 2.0],
            gamma: vec![0.1, 0.2, 0.3],
        };
        let e = project_constraints(&f, &[true, false, true]);
        assert_eq!(e.gamma_at(1, 0), 0.0);
        assert_eq!(e.gamma_at(2, 1), 0.0);
        assert_eq!(e.gamma_at(2, 0), 0.2);
        assert_eq!(e.lambda, vec![0.5, 0.0, 2.0]);
        assert_eq!(e.gamma_at(1, 1), 1.0);
    }

    #[test]
    fn projection_all_off_is_identity() {
        let f = CholeskyFactors {
            lambda: vec![0.5, 1.0, 2.0],
            gamma: vec![0.1, 0.2, 0.3],
        };
        let e = project_constraints(&f, &[false; 3]);
        assert_eq!(e.lambda, vec![0.0; 3]);
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(e.gamma_at(u, v), if u == v { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn identity_assembles_to_identity() {
        let f = CholeskyFactors {
            lambda: vec![1.0; 3],
            gamma: vec![0.0; 3],
        };
        let omega = assemble_covariance(&project_constraints(&f, &ones(3)));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(omega[i * 3 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn block_factors_match_oracle() {
        let l = oracle_cholesky3(&BLOCK);
        let f = decompose_covariance(&BLOCK, ZERO_TOL).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(f.lambda[k], l[k][k], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(f.gamma[0], l[1][0] / l[1][1], epsilon = 1e-12);
        assert_abs_diff_eq!(f.gamma[1], l[2][0] / l[2][2], epsilon = 1e-12);
        assert_abs_diff_eq!(f.gamma[2], l[2][1] / l[2][2], epsilon = 1e-12);
        // frozen from the oracle
        assert_abs_diff_eq!(f.lambda[0], 0.282_842_712_474_619, epsilon = 1e-12);
        assert_abs_diff_eq!(f.lambda[1], 0.360_555_127_546_398_9, epsilon = 1e-12);
        assert_abs_diff_eq!(f.gamma[0], 0.392_232_270_276_368_1, epsilon = 1e-12);

        let omega = assemble_covariance(&project_constraints(&f, &ones(3)));
        for (a, b) in omega.iter().zip(BLOCK.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_lambda_gives_zero_row() {
        let f = CholeskyFactors {
            lambda: vec![0.7, 0.0, 1.1],
            gamma: vec![0.4, -0.2, 0.9],
        };
        let omega = assemble_covariance(&project_constraints(&f, &ones(3)));
        for j in 0..3 {
            assert_eq!(omega[3 + j], 0.0);
            assert_eq!(omega[j * 3 + 1], 0.0);
        }
    }

    #[test]
    fn decompose_identity_and_diagonal() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let f = decompose_covariance(&id, ZERO_TOL).unwrap();
        assert_eq!(f.lambda, vec![1.0; 3]);
        assert_eq!(f.gamma, vec![0.0; 3]);

        let diag = [0.08, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.06];
        let f = decompose_covariance(&diag, ZERO_TOL).unwrap();
        assert_abs_diff_eq!(f.lambda[0], 0.08f64.sqrt(), epsilon = 1e-15);
        assert_eq!(f.lambda[1], 0.0);
        assert_abs_diff_eq!(f.lambda[2], 0.06f64.sqrt(), epsilon = 1e-15);
        assert_eq!(f.gamma, vec![0.0; 3]);
    }

    #[test]
    fn decompose_rejects_non_psd() {
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            decompose_covariance(&bad, ZERO_TOL),
            Err(Error::Decomposition(_))
        ));
        let zero_row_with_cov = [1.0, 0.1, 0.1, 0.0];
        assert!(decompose_covariance(&zero_row_with_cov, ZERO_TOL).is_err());
    }

    #[test]
    fn random_effect_vector_examples() {
        let f = decompose_covariance(&BLOCK, ZERO_TOL).unwrap();
        let e = project_constraints(&f, &ones(3));
        assert_eq!(random_effect_vector(&e, &[0.0; 3]), vec![0.0; 3]);

        let one = project_constraints(
            &CholeskyFactors {
                lambda: vec![0.3],
                gamma: vec![],
            },
            &[true],
        );
        assert_abs_diff_eq!(random_effect_vector(&one, &[2.0])[0], 0.6, epsilon = 1e-15);

        let l = oracle_cholesky3(&BLOCK);
        let rho = random_effect_vector(&e, &[1.0; 3]);
        for u in 0..3 {
            let expected: f64 = l[u].iter().sum();
            assert_abs_diff_eq!(rho[u], expected, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(rho[1], 0.501_976_483_869_139_5, epsilon = 1e-9);
    }

    #[test]
    fn sample_covariance_converges() {
        let f = decompose_covariance(&BLOCK, ZERO_TOL).unwrap();
        let e = project_constraints(&f, &ones(3));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sums = [[0.0f64; 3]; 3];
        let mut sq = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let xi: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r = random_effect_vector(&e, &xi);
            for i in 0..3 {
                for j in 0..3 {
                    let p = r[i] * r[j];
                    sums[i][j] += p;
                    sq[i][j] += p * p;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mean = sums[i][j] / n as f64;
                let var = sq[i][j] / n as f64 - mean * mean;
                let se = (var / n as f64).sqrt();
                assert!(
                    (mean - BLOCK[i * 3 + j]).abs() < 3.0 * se,
                    "({i},{j}) {mean} vs {}",
                    BLOCK[i * 3 + j]
                );
            }
        }
    }

    fn factors_strategy() -> impl Strategy<Value = CholeskyFactors> {
        (1usize..=6).prop_flat_map(|q| {
            (
                proptest::collection::vec(0.05..3.0f64, q),
                proptest::collection::vec(-2.0..2.0f64, q * (q - 1) / 2),
            )
                .prop_map(|(lambda, gamma)| CholeskyFactors { lambda, gamma })
        })
    }

    proptest! {
        #[test]
        fn round_trip_recovers_factors(f in factors_strategy()) {
            let q = f.q();
            let omega = assemble_covariance(&project_constraints(&f, &ones(q)));
            let back = decompose_covariance(&omega, ZERO_TOL).unwrap();
            for (a, b) in back.lambda.iter().zip(&f.lambda) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in back.gamma.iter().zip(&f.gamma) {
                prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }

        #[test]
        fn projection_is_idempotent(f in factors_strategy(), mask in proptest::collection::vec(any::<bool>(), 6)) {
            let q = f.q();
            let inc = &mask[..q];
            let e1 = project_constraints(&f, inc);
            let packed: Vec<f64> = (0..q * (q - 1) / 2)
                .map(|j| { let (u, v) = unpack_index(j); e1.gamma_at(u, v) })
                .collect();
            let again = CholeskyFactors { lambda: e1.lambda.clone(), gamma: packed };
            let e2 = project_constraints(&again, inc);
            prop_assert_eq!(e1, e2);
        }

        #[test]
        fn assembled_matrix_is_exactly_symmetric(f in factors_strategy(), mask in proptest::collection::vec(any::<bool>(), 6)) {
            let q = f.q();
            let omega = assemble_covariance(&project_constraints(&f, &mask[..q]));
            for i in 0..q {
                for j in 0..q {
                    prop_assert_eq!(omega[i * q + j].to_bits(), omega[j * q + i].to_bits());
                }
                if !mask[i] {
                    for j in 0..q {
                        prop_assert_eq!(omega[i * q + j], 0.0);
                    }
                }
            }
        }
    }
}

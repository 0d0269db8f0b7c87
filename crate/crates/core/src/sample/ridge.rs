//! Weighted ridge regression with an unpenalised intercept.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest one mark the system singular.
const SINGULAR_RATIO: f64 = 1e-13;

/// Minimises `sum_i s_i (y_i - w.f_i - b)^2 + alpha |w|^2` through the
/// normal equations on weight-centred data. Returns `(w, b)`.
pub fn ridge_fit(
    features: &[Vec<f64>],
    labels: &[f64],
    sample_weights: &[f64],
    alpha: f64,
) -> Result<(Vec<f64>, f64)> {
    let rows = features.len();
    if rows == 0 || rows != labels.len() || rows != sample_weights.len() {
        return Err(Error::Regression(format!(
            "{} feature rows, {} labels, {} weights",
            rows,
            labels.len(),
            sample_weights.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Regression("ragged feature matrix".into()));
    }
    if !(alpha >= 0.0) || sample_weights.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::Regression("alpha and sample weights must be nonnegative".into()));
    }
    let total: f64 = sample_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Regression("sample weights sum to zero".into()));
    }

    let mut x_mean = vec![0.0; d];
    let mut y_mean = 0.0;
    for ((row, &y), &s) in features.iter().zip(labels).zip(sample_weights) {
        for (m, &v) in x_mean.iter_mut().zip(row) {
            *m += s * v;
        }
        y_mean += s * y;
    }
    x_mean.iter_mut().for_each(|m| *m /= total);
    y_mean /= total;

    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut centred = vec![0.0; d];
    for ((row, &y), &s) in features.iter().zip(labels).zip(sample_weights) {
        for (c, (&v, &m)) in centred.iter_mut().zip(row.iter().zip(&x_mean)) {
            *c = v - m;
        }
        let yc = y - y_mean;
        for i in 0..d {
            rhs[i] += s * centred[i] * yc;
            for j in 0..d {
                a[(i, j)] += s * centred[i] * centred[j];
            }
        }
    }
    for i in 0..d {
        a[(i, i)] += alpha;
    }

    let w = if d == 0 {
        DVector::zeros(0)
    } else {
        let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Regression("normal matrix is singular".into()))?;
        let l = chol.l_dirty();
        if (0..d).any(|i| l[(i, i)] * l[(i, i)] <= SINGULAR_RATIO * scale) {
            return Err(Error::Regression("normal matrix is singular".into()));
        }
        chol.solve(&rhs)
    };
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), intercept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    /// Independent solver: augmented least squares with the intercept as an
    /// extra unpenalised column, solved by Gaussian elimination with partial
    /// pivoting.
    fn oracle(f: &[Vec<f64>], y: &[f64], s: &[f64], alpha: f64) -> (Vec<f64>, f64) {
        let d = f[0].len() + 1;
        let mut m = vec![vec![0.0; d + 1]; d];
        for ((row, &yi), &si) in f.iter().zip(y).zip(s) {
            let mut z = row.clone();
            z.push(1.0);
            for i in 0..d {
                for j in 0..d {
                    m[i][j] += si * z[i] * z[j];
                }
                m[i][d] += si * z[i] * yi;
            }
        }
        for (i, row) in m.iter_mut().enumerate().take(d - 1) {
            row[i] += alpha;
        }
        for col in 0..d {
            let p = (col..d)
                .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
                .unwrap();
            m.swap(col, p);
            for r in 0..d {
                if r != col {
                    let k = m[r][col] / m[col][col];
                    for c in col..=d {
                        m[r][c] -= k * m[col][c];
                    }
                }
            }
        }
        let sol: Vec<f64> = (0..d).map(|i| m[i][d] / m[i][i]).collect();
        (sol[..d - 1].to_vec(), sol[d - 1])
    }

    #[test]
    fn exact_interpolation() {
        let (w, b) = ridge_fit(&[vec![1.0], vec![0.0]], &[2.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn huge_alpha_shrinks_to_weighted_mean() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let (w, b) = ridge_fit(&f, &[1.0, 2.0, 6.0], &[1.0, 1.0, 2.0], 1e12).unwrap();
        assert!(w.iter().all(|v| v.abs() < 1e-9));
        assert!((b - 15.0 / 4.0).abs() < 1e-9);
    }

    #[test]
    fn singular_without_ridge() {
        let f = vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(matches!(
            ridge_fit(&f, &[1.0, 0.0, 1.0], &[1.0; 3], 0.0),
            Err(Error::Regression(_))
        ));
        let constant = vec![vec![1.0], vec![1.0]];
        assert!(ridge_fit(&constant, &[1.0, 2.0], &[1.0; 2], 0.0).is_err());
    }

    #[test]
    fn matches_elimination_oracle() {
        let mut r = XorShift64Star::new(21);
        for trial in 0..20 {
            let (n, d) = (30 + trial, 1 + trial % 6);
            let f: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.uniform(-2.0, 2.0)).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| r.uniform(-5.0, 5.0)).collect();
            let s: Vec<f64> = (0..n).map(|_| r.uniform(0.1, 1.0)).collect();
            let alpha = [0.0, 0.5, 1.0][trial % 3];
            let (w, b) = ridge_fit(&f, &y, &s, alpha).unwrap();
            let (wo, bo) = oracle(&f, &y, &s, alpha);
            for (a, o) in w.iter().zip(&wo) {
                assert!((a - o).abs() < 1e-10, "{a} vs {o}");
            }
            assert!((b - bo).abs() < 1e-10);
        }
    }
}

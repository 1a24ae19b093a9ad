//! Expansive dilation matrices, the anisotropic quasi-norm and related
//! spectral data.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on eigenvalue moduli for expansiveness.
pub const EXPANSIVE_TOL: f64 = 1e-12;

const SHAPE_TAIL_TOL: f64 = 1e-12;
const SHAPE_MAX_TERMS: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum QuasiNormMode {
    #[default]
    Step,
    Smooth,
}

/// Real eigen-decomposition used by the smooth quasi-norm.
#[derive(Clone, Debug)]
struct EigenBasis {
    log_moduli: Vec<f64>,
    v: DMatrix<f64>,
    weights: Vec<f64>,
    v_inv: DMatrix<f64>,
}

/// A validated expansive dilation together with cached spectral data.
#[derive(Clone, Debug)]
pub struct DilationInfo {
    pub matrix: DMatrix<f64>,
    pub dimension: usize,
    pub determinant_abs: f64,
    /// Eigenvalues sorted by increasing modulus.
    pub eigenvalues: Vec<Complex64>,
    pub lambda_min_mod: f64,
    pub lambda_max_mod: f64,
    pub condition_number: f64,
    pub quasi_norm_mode: QuasiNormMode,
    pub shape_matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    // forms[j + form_range] = (A^{-j})^T M A^{-j}
    forms: Vec<DMatrix<f64>>,
    form_range: i32,
    eigen: Option<EigenBasis>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuasiNormValue {
    pub value: f64,
    pub integer_scale: Option<i32>,
}

/// Serializable summary used by the CLI `validate` subcommand.
#[derive(Clone, Debug, Serialize)]
pub struct GeometryReport {
    pub dimension: usize,
    pub matrix: Vec<Vec<f64>>,
    pub determinant_abs: f64,
    pub eigenvalues_re: Vec<f64>,
    pub eigenvalues_im: Vec<f64>,
    pub lambda_min_mod: f64,
    pub lambda_max_mod: f64,
    pub condition_number: f64,
    pub quasi_norm_mode: QuasiNormMode,
    pub smooth_mode_available: bool,
    pub shape_matrix: Vec<Vec<f64>>,
}

/// Build a square matrix from row-major rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidMatrix(format!(
            "expected a square matrix, got {} rows with lengths {:?}",
            n,
            rows.iter().map(|r| r.len()).collect::<Vec<_>>()
        )));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Validate `matrix` as an expansive dilation (Step quasi-norm).
pub fn validate_dilation(matrix: &DMatrix<f64>) -> Result<DilationInfo> {
    DilationInfo::new(matrix, QuasiNormMode::Step)
}

impl DilationInfo {
    pub fn new(matrix: &DMatrix<f64>, mode: QuasiNormMode) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return Err(Error::InvalidMatrix(format!(
                "{}x{} is not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let det = matrix.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular);
        }
        let inverse = matrix.clone().try_inverse().ok_or(Error::Singular)?;

        let mut eigenvalues: Vec<Complex64> = matrix.complex_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        let lambda_min_mod = eigenvalues[0].norm();
        let lambda_max_mod = eigenvalues[n - 1].norm();
        if lambda_min_mod <= 1.0 + EXPANSIVE_TOL {
            return Err(Error::NotExpansive {
                min_modulus: lambda_min_mod,
            });
        }

        let sv = matrix.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        let condition_number = smax / smin;

        let shape_matrix = shape_series(&inverse, lambda_min_mod);
        let (forms, form_range) = build_forms(matrix, &inverse, &shape_matrix, lambda_max_mod);
        let eigen = real_eigenbasis(matrix, &eigenvalues);
        if mode == QuasiNormMode::Smooth {
            if let Err(e) = &eigen {
                return Err(Error::SmoothModeUnavailable(e.clone()));
            }
        }

        Ok(DilationInfo {
            matrix: matrix.clone(),
            dimension: n,
            determinant_abs: det.abs(),
            eigenvalues,
            lambda_min_mod,
            lambda_max_mod,
            condition_number,
            quasi_norm_mode: mode,
            shape_matrix,
            inverse,
            forms,
            form_range,
            eigen: eigen.ok(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        validate_dilation(&matrix_from_rows(rows)?)
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        validate_dilation(&DMatrix::from_diagonal(&DVector::from_column_slice(entries)))
    }

    /// Same dilation with a different quasi-norm mode.
    pub fn with_mode(&self, mode: QuasiNormMode) -> Result<Self> {
        if mode == QuasiNormMode::Smooth && self.eigen.is_none() {
            return Err(Error::SmoothModeUnavailable(
                "matrix has complex or defective spectrum".into(),
            ));
        }
        let mut d = self.clone();
        d.quasi_norm_mode = mode;
        Ok(d)
    }

    /// The transpose A*, validated with the same mode when possible.
    pub fn adjoint(&self) -> Result<Self> {
        let t = DilationInfo::new(&self.matrix.transpose(), QuasiNormMode::Step)?;
        if self.quasi_norm_mode == QuasiNormMode::Smooth {
            t.with_mode(QuasiNormMode::Smooth)
        } else {
            Ok(t)
        }
    }

    pub fn smooth_available(&self) -> bool {
        self.eigen.is_some()
    }

    /// Radii (r_in, r_out) with {|x| ≤ r_in} ⊂ {t(x) ≤ 0} ⊂ {|x| ≤ r_out} for
    /// the smooth scale t; None without a real eigenbasis.
    pub fn smooth_ball_radii(&self) -> Option<(f64, f64)> {
        let e = self.eigen.as_ref()?;
        let spec_norm = |m: &DMatrix<f64>| m.clone().svd(false, false).singular_values.max();
        let wmax = e.weights.iter().cloned().fold(0.0, f64::max);
        let r_in = 1.0 / (spec_norm(&e.v_inv) * wmax.sqrt());
        let r_out = spec_norm(&e.v) * e.weights.iter().map(|w| 1.0 / w).sum::<f64>().sqrt();
        Some((r_in, r_out))
    }

    pub fn spectral_norm(&self) -> f64 {
        self.matrix.clone().svd(false, false).singular_values.max()
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// A^j for any integer j.
    pub fn power(&self, j: i32) -> DMatrix<f64> {
        let base = if j >= 0 { &self.matrix } else { &self.inverse };
        let mut out = DMatrix::identity(self.dimension, self.dimension);
        for _ in 0..j.unsigned_abs() {
            out = base * out;
        }
        out
    }

    pub fn is_integer(&self) -> bool {
        self.matrix
            .iter()
            .all(|v| (v - v.round()).abs() <= 1e-12 * v.abs().max(1.0))
    }

    /// True when A is a positive multiple of the identity.
    pub fn is_scalar(&self) -> bool {
        let c = self.matrix[(0, 0)];
        let n = self.dimension;
        (0..n).all(|i| {
            (0..n).all(|j| {
                let target = if i == j { c } else { 0.0 };
                (self.matrix[(i, j)] - target).abs() <= 1e-14 * c.abs()
            })
        })
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dimension;
        (0..n).all(|i| (0..n).all(|j| i == j || self.matrix[(i, j)] == 0.0))
    }

    /// ‖x‖_M squared.
    pub fn shape_norm_sq(&self, x: &[f64]) -> f64 {
        quad_form(&self.shape_matrix, x)
    }

    fn scale_form(&self, j: i32, x: &[f64]) -> f64 {
        if j.abs() <= self.form_range {
            return quad_form(&self.forms[(j + self.form_range) as usize], x);
        }
        let mut y = DVector::from_column_slice(x);
        let step = if j > 0 { &self.inverse } else { &self.matrix };
        for _ in 0..j.unsigned_abs() {
            y = step * y;
        }
        quad_form(&self.shape_matrix, y.as_slice())
    }

    /// Smallest integer j with ‖A^{-j}x‖_M ≤ 1 (x ≠ 0).
    pub fn step_scale(&self, x: &[f64]) -> i32 {
        let inside = |j: i32| self.scale_form(j, x) <= 1.0;
        let (mut lo, mut hi);
        if inside(0) {
            hi = 0;
            let mut step = 1;
            lo = -1;
            while inside(lo) {
                hi = lo;
                step *= 2;
                lo = hi - step;
                if lo < -4096 {
                    break;
                }
            }
        } else {
            lo = 0;
            let mut step = 1;
            hi = 1;
            while !inside(hi) {
                lo = hi;
                step *= 2;
                hi = lo + step;
                if hi > 4096 {
                    break;
                }
            }
        }
        // invariant: !inside(lo), inside(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if inside(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// Continuous scale t with Σ w_i |λ_i|^{-2t} c_i² = 1, c = V⁻¹x.
    pub fn smooth_scale(&self, x: &[f64]) -> Result<f64> {
        let eig = self
            .eigen
            .as_ref()
            .ok_or_else(|| Error::SmoothModeUnavailable("matrix has complex or defective spectrum".into()))?;
        let c = &eig.v_inv * DVector::from_column_slice(x);
        let terms: Vec<(f64, f64)> = c
            .iter()
            .zip(eig.weights.iter().zip(&eig.log_moduli))
            .filter(|(ci, _)| **ci != 0.0)
            .map(|(ci, (w, l))| ((w * ci * ci).ln(), *l))
            .collect();
        if terms.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        // ln g(t) is convex and decreasing; Newton from the left converges monotonically.
        let mut t = terms
            .iter()
            .map(|(la, l)| la / (2.0 * l))
            .fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..200 {
            let m = terms
                .iter()
                .map(|(la, l)| la - 2.0 * l * t)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut g = 0.0;
            let mut dg = 0.0;
            for (la, l) in &terms {
                let e = (la - 2.0 * l * t - m).exp();
                g += e;
                dg += -2.0 * l * e;
            }
            let f = m + g.ln();
            let df = dg / g;
            let dt = -f / df;
            t += dt;
            if dt.abs() <= 1e-13 * t.abs().max(1.0) {
                break;
            }
        }
        Ok(t)
    }

    /// ρ_A(x) in the configured mode.
    pub fn quasi_norm(&self, x: &[f64]) -> QuasiNormValue {
        self.quasi_norm_mode_checked(self.quasi_norm_mode, x)
            .expect("mode validated at construction")
    }

    /// ρ_A(x) in an explicitly requested mode.
    pub fn quasi_norm_mode_checked(&self, mode: QuasiNormMode, x: &[f64]) -> Result<QuasiNormValue> {
        if x.iter().all(|v| *v == 0.0) {
            return Ok(QuasiNormValue {
                value: 0.0,
                integer_scale: None,
            });
        }
        match mode {
            QuasiNormMode::Step => {
                let j = self.step_scale(x);
                Ok(QuasiNormValue {
                    value: self.determinant_abs.powi(j),
                    integer_scale: Some(j),
                })
            }
            QuasiNormMode::Smooth => {
                let t = self.smooth_scale(x)?;
                Ok(QuasiNormValue {
                    value: self.determinant_abs.powf(t),
                    integer_scale: None,
                })
            }
        }
    }

    /// Shorthand for the quasi-norm value.
    pub fn rho(&self, x: &[f64]) -> f64 {
        self.quasi_norm(x).value
    }

    pub fn report(&self) -> GeometryReport {
        GeometryReport {
            dimension: self.dimension,
            matrix: matrix_to_rows(&self.matrix),
            determinant_abs: self.determinant_abs,
            eigenvalues_re: self.eigenvalues.iter().map(|z| z.re).collect(),
            eigenvalues_im: self.eigenvalues.iter().map(|z| z.im).collect(),
            lambda_min_mod: self.lambda_min_mod,
            lambda_max_mod: self.lambda_max_mod,
            condition_number: self.condition_number,
            quasi_norm_mode: self.quasi_norm_mode,
            smooth_mode_available: self.smooth_available(),
            shape_matrix: matrix_to_rows(&self.shape_matrix),
        }
    }
}

fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        s += x[i] * row;
    }
    s
}

fn shape_series(inverse: &DMatrix<f64>, lambda_min: f64) -> DMatrix<f64> {
    let n = inverse.nrows();
    let mut p = DMatrix::<f64>::identity(n, n);
    let mut m = DMatrix::<f64>::zeros(n, n);
    let r = lambda_min.powi(-2);
    let geometric = if r < 1.0 { r / (1.0 - r) } else { f64::INFINITY };
    for _ in 0..SHAPE_MAX_TERMS {
        let term = p.transpose() * &p;
        let tn = term.norm();
        m += term;
        // the tail behaves like a geometric series with ratio |λ_min|^{-2}
        if tn * geometric.max(1.0) < SHAPE_TAIL_TOL * m.norm().max(1.0) {
            break;
        }
        p = inverse * p;
    }
    // symmetrize against rounding
    (&m + m.transpose()) * 0.5
}

fn build_forms(a: &DMatrix<f64>, inv: &DMatrix<f64>, m: &DMatrix<f64>, lambda_max: f64) -> (Vec<DMatrix<f64>>, i32) {
    let range = ((500.0 / lambda_max.log2().max(1e-3)).floor() as i32).clamp(1, 64);
    let n = a.nrows();
    let mut forms = vec![DMatrix::<f64>::zeros(n, n); (2 * range + 1) as usize];
    let mut pos = DMatrix::<f64>::identity(n, n); // A^{-j}, j >= 0
    let mut neg = DMatrix::<f64>::identity(n, n); // A^{j}
    for j in 0..=range {
        let fp = pos.transpose() * m * &pos;
        let fnf = neg.transpose() * m * &neg;
        forms[(range + j) as usize] = (&fp + fp.transpose()) * 0.5;
        forms[(range - j) as usize] = (&fnf + fnf.transpose()) * 0.5;
        pos = inv * pos;
        neg = a * neg;
    }
    (forms, range)
}

fn real_eigenbasis(a: &DMatrix<f64>, eigenvalues: &[Complex64]) -> std::result::Result<EigenBasis, String> {
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    if eigenvalues.iter().any(|z| z.im.abs() > 1e-10 * z.norm().max(1.0)) {
        return Err("complex eigenvalues".into());
    }
    let mut reals: Vec<f64> = eigenvalues.iter().map(|z| z.re).collect();
    reals.sort_by(|x, y| x.total_cmp(y));
    // cluster repeated eigenvalues
    let mut clusters: Vec<(f64, usize)> = Vec::new();
    for v in reals {
        match clusters.last_mut() {
            Some((c, k)) if (v - *c).abs() <= 1e-8 * scale => {
                *c = (*c * *k as f64 + v) / (*k as f64 + 1.0);
                *k += 1;
            }
            _ => clusters.push((v, 1)),
        }
    }
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut lambdas = Vec::with_capacity(n);
    for (lam, mult) in clusters {
        let shifted = a - DMatrix::<f64>::identity(n, n) * lam;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.ok_or("svd failed")?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
        for &i in idx.iter().take(mult) {
            if svd.singular_values[i] > 1e-8 * scale {
                return Err("defective (non-diagonalizable) matrix".into());
            }
            let v = vt.row(i).transpose();
            cols.push(v.normalize());
            lambdas.push(lam);
        }
    }
    let v = DMatrix::from_columns(&cols);
    let sv = v.clone().svd(false, false).singular_values;
    if sv.min() <= 1e-12 * sv.max() {
        return Err("eigenvector matrix is singular".into());
    }
    let v_inv = v.clone().try_inverse().ok_or("eigenvector matrix is singular")?;
    let log_moduli: Vec<f64> = lambdas.iter().map(|l: &f64| l.abs().ln()).collect();
    let weights = lambdas.iter().map(|l: &f64| 1.0 / (1.0 - l.abs().powi(-2))).collect();
    Ok(EigenBasis {
        log_moduli,
        v,
        weights,
        v_inv,
    })
}

/// N_p(A) = ⌊(1/p − 1) ln b / ln |λ_min|⌋.
pub fn max_vanishing_order(p: f64, d: &DilationInfo) -> Result<i64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let v = (1.0 / p - 1.0) * d.determinant_abs.ln() / d.lambda_min_mod.ln();
    Ok((v + 1e-9).floor() as i64)
}

#[derive(Clone, Debug, Serialize)]
pub struct DistortionReport {
    /// Exponent ln b / ln|λ_max| of the lower power bound.
    pub lower_exponent: f64,
    /// Exponent ln b / ln|λ_min| of the upper power bound.
    pub upper_exponent: f64,
    /// Smallest C with C⁻¹|x|^lower ≤ ρ(x) ≤ C|x|^upper on the samples.
    pub constant: f64,
    pub samples: usize,
}

/// Fit the constant of the power-type comparison between ρ_A and |x| on
/// samples with ρ_A(x) ≥ 1.
pub fn distortion_check(d: &DilationInfo, samples: &[Vec<f64>]) -> Result<DistortionReport> {
    let lb = d.determinant_abs.ln();
    let lower = lb / d.lambda_max_mod.ln();
    let upper = lb / d.lambda_min_mod.ln();
    let mut c: f64 = 1.0;
    for (i, x) in samples.iter().enumerate() {
        let rho = d.rho(x);
        if rho < 1.0 {
            return Err(Error::SampleTooSmall { index: i, rho });
        }
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        c = c.max(rho / r.powf(upper)).max(r.powf(lower) / rho);
    }
    Ok(DistortionReport {
        lower_exponent: lower,
        upper_exponent: upper,
        constant: c,
        samples: samples.len(),
    })
}

/// Condition number of a 2×2 matrix from the closed-form singular values.
pub fn kappa_2x2(m: &DMatrix<f64>) -> f64 {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let t = a * a + b * b + c * c + d * d;
    let det = (a * d - b * c).abs();
    let disc = (t * t - 4.0 * det * det).max(0.0).sqrt();
    let s_max2 = (t + disc) / 2.0;
    // s_min² = det² / s_max² avoids cancellation
    let s_min2 = det * det / s_max2;
    (s_max2 / s_min2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(a: f64, b: f64) -> DilationInfo {
        DilationInfo::diagonal(&[a, b]).unwrap()
    }

    #[test]
    fn scalar_dilation() {
        let d = diag(2.0, 2.0);
        assert_relative_eq!(d.determinant_abs, 4.0);
        assert_relative_eq!(d.condition_number, 1.0, epsilon = 1e-14);
        assert!(d.is_scalar());
    }

    #[test]
    fn diagonal_condition_number() {
        let d = diag(2.0, 8.0);
        assert_relative_eq!(d.determinant_abs, 16.0);
        assert_relative_eq!(d.condition_number, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn pure_shear_rejected() {
        let m = matrix_from_rows(&[vec![1.0, 3.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(validate_dilation(&m), Err(Error::NotExpansive { .. })));
    }

    #[test]
    fn singular_rejected() {
        let m = matrix_from_rows(&[vec![2.0, 4.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(validate_dilation(&m), Err(Error::Singular)));
    }

    #[test]
    fn rotation_like_dilation_has_unit_kappa() {
        // 2·R(θ) is a scalar multiple of an orthogonal matrix
        let (s, c) = 0.7f64.sin_cos();
        let m = matrix_from_rows(&[vec![2.0 * c, -2.0 * s], vec![2.0 * s, 2.0 * c]]).unwrap();
        let d = validate_dilation(&m).unwrap();
        assert_relative_eq!(d.condition_number, 1.0, epsilon = 1e-12);
        assert!(!d.smooth_available());
        assert!(matches!(
            d.with_mode(QuasiNormMode::Smooth),
            Err(Error::SmoothModeUnavailable(_))
        ));
    }

    #[test]
    fn determinant_matches_eigen_product() {
        let m = matrix_from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let d = validate_dilation(&m).unwrap();
        let prod: f64 = d.eigenvalues.iter().map(|z| z.norm()).product();
        assert_relative_eq!(prod, d.determinant_abs, max_relative = 1e-12);
    }

    #[test]
    fn shape_matrix_nests_under_dilation() {
        let m = matrix_from_rows(&[vec![2.0, 1.5], vec![0.0, 1.5]]).unwrap();
        let d = validate_dilation(&m).unwrap();
        // boundary points of Δ must map strictly inside AΔ: ‖A^{-1}x‖_M < 1 for ‖x‖_M = 1
        for i in 0..360 {
            let th = i as f64 * std::f64::consts::PI / 180.0;
            let x = [th.cos(), th.sin()];
            let s = d.shape_norm_sq(&x).sqrt();
            let x = [x[0] / s, x[1] / s];
            let y = d.inverse() * DVector::from_column_slice(&x);
            assert!(d.shape_norm_sq(y.as_slice()) < 1.0 - 1e-6);
        }
        let eig = d.shape_matrix.clone().symmetric_eigenvalues();
        assert!(eig.min() > 0.0);
    }

    #[test]
    fn quasi_norm_zero_and_homogeneity() {
        let m = matrix_from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let d = validate_dilation(&m).unwrap();
        assert_eq!(d.rho(&[0.0, 0.0]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let ax = &d.matrix * DVector::from_column_slice(&x);
            assert_eq!(d.rho(ax.as_slice()), d.determinant_abs * d.rho(&x));
        }
    }

    #[test]
    fn smooth_scalar_closed_form() {
        // A = 2I: M = (4/3)I, so (4/3)·4·2^{-2t} = 1 and ρ = 4^t = 16/3.
        let d = diag(2.0, 2.0).with_mode(QuasiNormMode::Smooth).unwrap();
        let v = d.quasi_norm(&[2.0, 0.0]);
        assert_relative_eq!(v.value, 16.0 / 3.0, max_relative = 1e-10);
        assert!(v.integer_scale.is_none());
    }

    #[test]
    fn smooth_and_step_within_one_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [diag(2.0, 2.0), diag(2.0, 8.0), diag(1.5, 3.0)] {
            let s = d.with_mode(QuasiNormMode::Smooth).unwrap();
            for _ in 0..200 {
                let x = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
                let a = d.rho(&x);
                let b = s.rho(&x);
                assert!(b <= a * (1.0 + 1e-9) && b * d.determinant_abs >= a * (1.0 - 1e-9));
            }
        }
    }

    #[test]
    fn smooth_exact_homogeneity() {
        let m = matrix_from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let d = DilationInfo::new(&m, QuasiNormMode::Smooth).unwrap();
        let x = [0.3, -1.7];
        let ax = &d.matrix * DVector::from_column_slice(&x);
        assert_relative_eq!(d.rho(ax.as_slice()), 6.0 * d.rho(&x), max_relative = 1e-11);
    }

    #[test]
    fn vanishing_order_examples() {
        assert_eq!(max_vanishing_order(1.0, &diag(2.0, 8.0)).unwrap(), 0);
        assert_eq!(max_vanishing_order(2.0 / 3.0, &diag(2.0, 2.0)).unwrap(), 1);
        assert_eq!(max_vanishing_order(0.5, &diag(2.0, 8.0)).unwrap(), 4);
        assert!(matches!(
            max_vanishing_order(1.5, &diag(2.0, 2.0)),
            Err(Error::InvalidExponent(_))
        ));
    }

    #[test]
    fn distortion_isotropic() {
        let d = diag(2.0, 2.0);
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let th = i as f64 * 0.37;
                let r = 1.5 + i as f64;
                vec![r * th.cos(), r * th.sin()]
            })
            .collect();
        let rep = distortion_check(&d, &samples).unwrap();
        assert_relative_eq!(rep.lower_exponent, 2.0);
        assert_relative_eq!(rep.upper_exponent, 2.0);
        assert!(rep.constant < 8.0);
    }

    #[test]
    fn distortion_rejects_small_samples() {
        let d = diag(2.0, 2.0);
        assert!(matches!(
            distortion_check(&d, &[vec![0.01, 0.0]]),
            Err(Error::SampleTooSmall { index: 0, .. })
        ));
    }

    #[test]
    fn slow_direction_tracks_large_exponent() {
        let d = diag(2.0, 8.0);
        // along e1, ρ(2^m e1) = 16^m = |x|^4 up to the fixed shape offset
        let ratios: Vec<f64> = (2..12)
            .map(|m| {
                let x = [2f64.powi(m), 0.0];
                d.rho(&x) / x[0].powf(4.0)
            })
            .collect();
        assert!(ratios.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12 * w[0]));
    }

    #[test]
    fn kappa_closed_form_pure_shear() {
        let s = 3.0f64;
        let m = matrix_from_rows(&[vec![1.0, s], vec![0.0, 1.0]]).unwrap();
        let expected = ((s * s + 2.0) + s * (s * s + 4.0).sqrt()) / 2.0;
        assert_relative_eq!(kappa_2x2(&m), expected, max_relative = 1e-12);
    }

    #[test]
    fn deterministic_validation() {
        let m = matrix_from_rows(&[vec![2.0, 0.5], vec![0.25, 3.0]]).unwrap();
        let a = validate_dilation(&m).unwrap();
        let b = validate_dilation(&m).unwrap();
        assert_eq!(a.shape_matrix, b.shape_matrix);
        assert_eq!(a.condition_number.to_bits(), b.condition_number.to_bits());
    }
}

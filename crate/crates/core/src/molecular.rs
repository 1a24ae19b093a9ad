//! Molecular norms ‖g‖_{D,N} = sup_{|β| ≤ N} ∫ (1 + ρ_A(x))^D |∂^β g(x)| dx,
//! pair constants and the determinant lower-bound ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{EvalFn, Generator};
use crate::geometry::{max_vanishing_order, DilationInfo};
use crate::quadrature::{integrate_doubling, multi_indices, QuadBox};

pub const DEFAULT_QUAD_HALF: f64 = 24.0;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularParams {
    /// decay order D
    pub decay: f64,
    /// smoothness order N
    pub smoothness: u32,
    /// half-width of the integration cube; the doubled cube is the check
    pub quad_half: f64,
    /// quadrature step; chosen from the generator's bandwidth when absent
    #[serde(default)]
    pub quad_step: Option<f64>,
    /// relative tolerance for the box-doubling check
    pub tol: f64,
}

impl MolecularParams {
    pub fn new(decay: f64, smoothness: u32) -> Self {
        MolecularParams {
            decay,
            smoothness,
            quad_half: DEFAULT_QUAD_HALF,
            quad_step: None,
            tol: DEFAULT_TOL,
        }
    }

    /// D = n/p + 2 and N = N_p(A) + 1.
    pub fn defaults(p: f64, d: &DilationInfo) -> Result<Self> {
        let np = max_vanishing_order(p, d)?;
        Ok(Self::new(d.dimension as f64 / p + 2.0, (np + 1).max(0) as u32))
    }

    fn validate(&self) -> Result<()> {
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("decay order {}", self.decay)));
        }
        if !(self.quad_half > 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(
                "quadrature box and tolerance must be positive".into(),
            ));
        }
        if let Some(h) = self.quad_step {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!("quadrature step {h}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaIntegral {
    pub beta: Vec<u32>,
    pub integral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolecularReport {
    #[serde(rename = "D")]
    pub decay: f64,
    #[serde(rename = "N")]
    pub smoothness: u32,
    pub per_beta_integrals: Vec<BetaIntegral>,
    pub norm: f64,
    /// largest change between the box and the doubled box
    pub doubling_change: f64,
    pub quad_half: f64,
    pub quad_step: f64,
}

/// Step resolving g: a quarter of the Nyquist spacing for its bandwidth,
/// at most 0.1, or half the sample spacing for gridded data.
fn default_step(g: &Generator) -> f64 {
    if let Some(grid) = g.sampled_grid() {
        return grid.spec.spacing.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    }
    (std::f64::consts::PI / (2.0 * g.frequency_radius())).min(0.1)
}

/// Integration cube: the requested half-width, widened to contain the
/// generator's essential support.
fn quad_box(g: &Generator, params: &MolecularParams) -> QuadBox {
    let n = g.dim();
    let (c, r) = g.spatial_ball();
    let reach = c.iter().map(|v| v.abs()).fold(0.0, f64::max) + r;
    let half = params.quad_half.max(reach);
    let step = params.quad_step.unwrap_or_else(|| default_step(g));
    QuadBox::cube(n, half, step)
}

pub fn molecular_report(g: &Generator, d: &DilationInfo, params: &MolecularParams) -> Result<MolecularReport> {
    params.validate()?;
    if g.dim() != d.dimension {
        return Err(Error::DimensionMismatch(
            "generator and dilation differ in dimension".into(),
        ));
    }
    let betas = multi_indices(g.dim(), params.smoothness);
    let fns: Vec<EvalFn> = betas.iter().map(|b| g.derivative_fn(b)).collect::<Result<_>>()?;
    let qb = quad_box(g, params);
    let decay = params.decay;
    let est = integrate_doubling(&qb, fns.len(), |x, out| {
        let w = if decay == 0.0 {
            1.0
        } else {
            (1.0 + d.rho(x)).powf(decay)
        };
        for (o, f) in out.iter_mut().zip(&fns) {
            *o = w * f(x).norm();
        }
    });
    let norm = est.outer.iter().cloned().fold(0.0, f64::max);
    let change = est.max_change();
    if !est.outer.iter().all(|v| v.is_finite()) || change > params.tol * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::QuadratureNotConverged(format!(
            "molecular integrals of {} change by {change:e} (norm {norm:e}) when the box [-{h}, {h}]^n is doubled",
            g.name(),
            h = qb.half[0]
        )));
    }
    Ok(MolecularReport {
        decay,
        smoothness: params.smoothness,
        per_beta_integrals: betas
            .into_iter()
            .zip(&est.outer)
            .map(|(beta, &integral)| BetaIntegral { beta, integral })
            .collect(),
        norm,
        doubling_change: change,
        quad_half: qb.half[0],
        quad_step: qb.step[0],
    })
}

pub fn molecular_norm(g: &Generator, d: &DilationInfo, params: &MolecularParams) -> Result<f64> {
    Ok(molecular_report(g, d, params)?.norm)
}

/// M_p(ψ, φ) = ‖ψ‖_{D,N} + ‖φ‖_{D,N}.
pub fn pair_constant(psi: &Generator, phi: &Generator, d: &DilationInfo, params: &MolecularParams) -> Result<f64> {
    Ok(molecular_norm(psi, d, params)? + molecular_norm(phi, d, params)?)
}

/// M / b^{1/p − 1/2}; p ∈ (0, 1] or the Hilbert case p = 2.
pub fn lower_bound_ratio(m_value: f64, d: &DilationInfo, p: f64) -> Result<f64> {
    if !((p > 0.0 && p <= 1.0) || p == 2.0) {
        return Err(Error::InvalidExponent(p));
    }
    if !(m_value >= 0.0) {
        return Err(Error::InvalidArgument(format!("molecular constant {m_value}")));
    }
    Ok(m_value / d.determinant_abs.powf(1.0 / p - 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::gaussian_derivative;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn iso() -> DilationInfo {
        DilationInfo::diagonal(&[2.0, 2.0]).unwrap()
    }

    #[test]
    fn zero_generator() {
        let r = molecular_report(&Generator::zero(2), &iso(), &MolecularParams::new(4.0, 2)).unwrap();
        assert_eq!(r.norm, 0.0);
        assert_eq!(r.per_beta_integrals.len(), 6);
    }

    #[test]
    fn gaussian_norm_is_two_pi() {
        for d in [iso(), DilationInfo::diagonal(&[2.0, 8.0]).unwrap()] {
            let v = molecular_norm(&Generator::gaussian(2), &d, &MolecularParams::new(0.0, 0)).unwrap();
            assert_relative_eq!(v, 2.0 * PI, max_relative = 1e-8);
        }
    }

    #[test]
    fn gaussian_first_derivative_integral() {
        // ∫|x₁| e^{−|x|²/2} dx = 2 · √(2π); the kink on x₁ = 0 costs O(h²)
        let r = molecular_report(&Generator::gaussian(2), &iso(), &MolecularParams::new(0.0, 1)).unwrap();
        let b = r.per_beta_integrals.iter().find(|b| b.beta == vec![1, 0]).unwrap();
        assert_relative_eq!(b.integral, 2.0 * (2.0 * PI).sqrt(), max_relative = 2e-3);
    }

    #[test]
    fn mexican_hat_norm_is_finite() {
        let r = molecular_report(&Generator::mexican_hat_2d(), &iso(), &MolecularParams::new(4.0, 2)).unwrap();
        assert!(r.norm.is_finite() && r.norm > 0.0);
        assert!(r.doubling_change <= 1e-6 * r.norm);
    }

    #[test]
    fn mexican_hat_against_polar_quadrature() {
        use crate::geometry::QuasiNormMode;
        let d = iso().with_mode(QuasiNormMode::Smooth).unwrap();
        let c = d.rho(&[1.0, 0.0]);
        let r = molecular_report(&Generator::mexican_hat_2d(), &d, &MolecularParams::new(4.0, 0)).unwrap();
        let n = 200_000;
        let h = 30.0 / n as f64;
        let polar = (0..n)
            .map(|i| {
                let r = (i as f64 + 0.5) * h;
                2.0 * PI * r * (2.0 - r * r).abs() * (-r * r / 2.0).exp() * (1.0 + c * r * r).powi(4)
            })
            .sum::<f64>()
            * h;
        assert_relative_eq!(r.norm, polar, max_relative = 1e-3);
    }

    #[test]
    fn smooth_mode_matches_polar_oracle() {
        use crate::geometry::QuasiNormMode;
        // for 2I the smooth quasi-norm is |x|² up to the normalising constant
        let d = iso().with_mode(QuasiNormMode::Smooth).unwrap();
        let c = d.rho(&[1.0, 0.0]);
        let params = MolecularParams {
            quad_step: Some(0.05),
            ..MolecularParams::new(1.0, 0)
        };
        let v = molecular_norm(&Generator::gaussian(2), &d, &params).unwrap();
        // ∫ (1 + c r²) e^{−r²/2} dx = 2π(1 + 2c)
        assert_relative_eq!(v, 2.0 * PI * (1.0 + 2.0 * c), max_relative = 1e-8);
    }

    #[test]
    fn derivative_integrals_match_closed_form_evaluation() {
        let g = Generator::mexican_hat_2d();
        let f = g.derivative_fn(&[1, 1]).unwrap();
        let x = [0.3, -1.2];
        let want = -(gaussian_derivative(&[3, 1], &x) + gaussian_derivative(&[1, 3], &x));
        assert_relative_eq!(f(&x).re, want, epsilon = 1e-14);
    }

    #[test]
    fn monotone_in_orders() {
        let g = Generator::mexican_hat_2d();
        let d = iso();
        let a = molecular_norm(&g, &d, &MolecularParams::new(1.0, 0)).unwrap();
        let b = molecular_norm(&g, &d, &MolecularParams::new(3.0, 0)).unwrap();
        let c = molecular_norm(&g, &d, &MolecularParams::new(3.0, 2)).unwrap();
        assert!(a <= b && b <= c);
    }

    #[test]
    fn rotation_invariance_for_radial_generator() {
        let g = Generator::mexican_hat_2d();
        let t: f64 = 0.7;
        let rot = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let p = MolecularParams::new(4.0, 0);
        let a = molecular_norm(&g, &iso(), &p).unwrap();
        let b = molecular_norm(&g.rotated(&rot).unwrap(), &iso(), &p).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-8);
    }

    #[test]
    fn pair_constant_properties() {
        let d = iso();
        let p = MolecularParams::new(2.0, 1);
        let psi = Generator::mexican_hat_2d();
        let phi = Generator::gaussian_deriv(vec![1, 0]);
        let alone = molecular_norm(&psi, &d, &p).unwrap();
        assert_eq!(pair_constant(&psi, &Generator::zero(2), &d, &p).unwrap(), alone);
        assert_relative_eq!(
            pair_constant(&psi, &phi, &d, &p).unwrap(),
            pair_constant(&phi, &psi, &d, &p).unwrap(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn ratio_arithmetic() {
        let d16 = DilationInfo::diagonal(&[2.0, 8.0]).unwrap();
        assert_relative_eq!(lower_bound_ratio(8.0, &d16, 1.0).unwrap(), 2.0, epsilon = 1e-14);
        assert_eq!(lower_bound_ratio(3.0, &d16, 2.0).unwrap(), 3.0);
        assert!(matches!(
            lower_bound_ratio(3.0, &d16, 1.5),
            Err(Error::InvalidExponent(_))
        ));
    }

    #[test]
    fn defaults_follow_dimension_and_order() {
        let p = MolecularParams::defaults(1.0, &iso()).unwrap();
        assert_eq!(p.decay, 4.0);
        assert_eq!(p.smoothness, 1);
        let p = MolecularParams::defaults(0.5, &iso()).unwrap();
        assert_eq!(p.decay, 6.0);
        assert_eq!(p.smoothness, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn homogeneous_and_subadditive(c in -3.0f64..3.0, s in 0.5f64..2.0, w in -1.0f64..1.0) {
            let d = iso();
            let p = MolecularParams { quad_half: 12.0, quad_step: Some(0.2), ..MolecularParams::new(1.0, 1) };
            let f = Generator::mexican_hat_2d();
            let g = Generator::gaussian_deriv(vec![0, 1])
                .affine(Complex64::new(1.0, 0.0), &DMatrix::from_diagonal_element(2, 2, s), &[w, 0.0])
                .unwrap();
            let nf = molecular_norm(&f, &d, &p).unwrap();
            let ncf = molecular_norm(&f.scaled(Complex64::new(c, 0.0)), &d, &p).unwrap();
            prop_assert!((ncf - c.abs() * nf).abs() <= 1e-12 * nf.max(1.0));
            let ng = molecular_norm(&g, &d, &p).unwrap();
            let sum = Generator::combination(2, vec![(Complex64::new(1.0, 0.0), f.clone()), (Complex64::new(1.0, 0.0), g.clone())]).unwrap();
            let ns = molecular_norm(&sum, &d, &p).unwrap();
            prop_assert!(ns <= (nf + ng) * (1.0 + 1e-9));
        }
    }
}

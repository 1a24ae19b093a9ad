//! Wavelet prototypes: analytic closed forms, the band-limited partition
//! generator and sampled grids, with derivative and Fourier access.
//!
//! Fourier convention: ĝ(ξ) = ∫ g(x) e^{−i⟨x,ξ⟩} dx.

pub mod grid;
pub mod io;
pub mod meyer;

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DilationInfo;
use crate::quadrature::{integrate_doubling, multi_indices, QuadBox};

pub use grid::{fft_transform, ifft_transform, GridFunction, GridSpec};
pub use meyer::MeyerData;

/// Pointwise evaluator shared across threads.
pub type EvalFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeneratorKind {
    MexicanHat2D,
    GaussianDeriv(Vec<u32>),
    MeyerPartition { order: u32 },
    SampledGrid,
    Affine,
    Combination,
}

/// A wavelet prototype; cheap to clone.
#[derive(Clone)]
pub struct Generator {
    node: Arc<Node>,
}

// always behind an Arc, so the variant sizes do not matter
#[allow(clippy::large_enum_variant)]
enum Node {
    MexicanHat2D,
    GaussianDeriv {
        order: Vec<u32>,
    },
    Meyer(MeyerData),
    Sampled(SampledData),
    Affine(AffineData),
    Sum {
        dim: usize,
        terms: Vec<(Complex64, Generator)>,
    },
}

struct SampledData {
    grid: GridFunction,
    derivatives: Mutex<HashMap<Vec<u32>, Arc<GridFunction>>>,
}

struct AffineData {
    base: Generator,
    amp: Complex64,
    lin: DMatrix<f64>,
    lin_inv: DMatrix<f64>,
    shift: DVector<f64>,
    det_abs: f64,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Generator({})", self.name())
    }
}

/// Probabilists' Hermite polynomial He_n.
pub fn hermite(n: u32, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    match n {
        0 => a,
        1 => b,
        _ => {
            for k in 1..n {
                let c = x * b - k as f64 * a;
                a = b;
                b = c;
            }
            b
        }
    }
}

/// ∂^α e^{−|x|²/2}.
pub fn gaussian_derivative(alpha: &[u32], x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let mut p = 1.0;
    for (a, xi) in alpha.iter().zip(x) {
        let h = hermite(*a, *xi);
        p *= if a % 2 == 1 { -h } else { h };
    }
    p * (-r2 / 2.0).exp()
}

fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

impl Generator {
    fn from_node(node: Node) -> Self {
        Generator { node: Arc::new(node) }
    }

    /// ψ(x) = (2 − |x|²) e^{−|x|²/2} on ℝ².
    pub fn mexican_hat_2d() -> Self {
        Self::from_node(Node::MexicanHat2D)
    }

    /// ∂^α e^{−|x|²/2}; α = 0 gives the plain Gaussian.
    pub fn gaussian_deriv(order: Vec<u32>) -> Self {
        assert!(!order.is_empty(), "Gaussian derivative needs a dimension");
        Self::from_node(Node::GaussianDeriv { order })
    }

    pub fn gaussian(dim: usize) -> Self {
        Self::gaussian_deriv(vec![0; dim])
    }

    /// Band-limited partition-of-unity generator for the dilation `d`.
    pub fn meyer_partition(d: &DilationInfo, order: u32) -> Result<Self> {
        Ok(Self::from_node(Node::Meyer(MeyerData::new(d, order)?)))
    }

    pub fn sampled(grid: GridFunction) -> Self {
        Self::from_node(Node::Sampled(SampledData {
            grid,
            derivatives: Mutex::new(HashMap::new()),
        }))
    }

    pub fn zero(dim: usize) -> Self {
        Self::from_node(Node::Sum { dim, terms: Vec::new() })
    }

    pub fn combination(dim: usize, terms: Vec<(Complex64, Generator)>) -> Result<Self> {
        if terms.iter().any(|(_, g)| g.dim() != dim) {
            return Err(Error::DimensionMismatch("combination terms differ in dimension".into()));
        }
        Ok(Self::from_node(Node::Sum { dim, terms }))
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self::from_node(Node::Sum {
            dim: self.dim(),
            terms: vec![(c, self.clone())],
        })
    }

    /// x ↦ amp · g(Lx − s); nested affine maps are flattened.
    pub fn affine(&self, amp: Complex64, lin: &DMatrix<f64>, shift: &[f64]) -> Result<Self> {
        let n = self.dim();
        if lin.nrows() != n || lin.ncols() != n || shift.len() != n {
            return Err(Error::DimensionMismatch("affine map does not match generator".into()));
        }
        let shift = DVector::from_column_slice(shift);
        if let Node::Affine(inner) = &*self.node {
            // a1·g(L1(Lx − s) − s1)
            let lin2 = &inner.lin * lin;
            let shift2 = &inner.lin * &shift + &inner.shift;
            return inner.base.affine(inner.amp * amp, &lin2, shift2.as_slice());
        }
        let lin_inv = lin.clone().try_inverse().ok_or(Error::Singular)?;
        Ok(Self::from_node(Node::Affine(AffineData {
            base: self.clone(),
            amp,
            det_abs: lin.determinant().abs(),
            lin: lin.clone(),
            lin_inv,
            shift,
        })))
    }

    /// Rotate the argument: x ↦ g(Rᵀx) for an orthogonal R.
    pub fn rotated(&self, rotation: &DMatrix<f64>) -> Result<Self> {
        self.affine(Complex64::new(1.0, 0.0), &rotation.transpose(), &vec![0.0; self.dim()])
    }

    pub fn dim(&self) -> usize {
        match &*self.node {
            Node::MexicanHat2D => 2,
            Node::GaussianDeriv { order } => order.len(),
            Node::Meyer(m) => m.dim(),
            Node::Sampled(s) => s.grid.dim(),
            Node::Affine(a) => a.base.dim(),
            Node::Sum { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match &*self.node {
            Node::MexicanHat2D => GeneratorKind::MexicanHat2D,
            Node::GaussianDeriv { order } => GeneratorKind::GaussianDeriv(order.clone()),
            Node::Meyer(m) => GeneratorKind::MeyerPartition { order: m.order },
            Node::Sampled(_) => GeneratorKind::SampledGrid,
            Node::Affine(_) => GeneratorKind::Affine,
            Node::Sum { .. } => GeneratorKind::Combination,
        }
    }

    pub fn name(&self) -> String {
        match &*self.node {
            Node::MexicanHat2D => "mexican_hat_2d".into(),
            Node::GaussianDeriv { order } => format!("gaussian_deriv{order:?}"),
            Node::Meyer(m) => format!("meyer_partition(order={})", m.order),
            Node::Sampled(s) => format!("sampled{:?}", s.grid.spec.extents),
            Node::Affine(a) => format!("affine({})", a.base.name()),
            Node::Sum { terms, .. } => format!("combination[{}]", terms.len()),
        }
    }

    pub fn meyer_data(&self) -> Option<&MeyerData> {
        match &*self.node {
            Node::Meyer(m) => Some(m),
            _ => None,
        }
    }

    pub fn sampled_grid(&self) -> Option<&GridFunction> {
        match &*self.node {
            Node::Sampled(s) => Some(&s.grid),
            _ => None,
        }
    }

    /// Whether ĝ has a closed form (no direct DFT sums involved).
    pub fn has_closed_fourier(&self) -> bool {
        match &*self.node {
            Node::Sampled(_) => false,
            Node::Affine(a) => a.base.has_closed_fourier(),
            Node::Sum { terms, .. } => terms.iter().all(|(_, g)| g.has_closed_fourier()),
            _ => true,
        }
    }

    /// Radius beyond which ĝ is exactly zero, when compactly supported.
    pub fn band_limit(&self) -> Option<f64> {
        match &*self.node {
            Node::Meyer(m) => Some(m.support_radius),
            Node::Affine(a) => a.base.band_limit().map(|r| r * op_norm(&a.lin)),
            Node::Sum { terms, .. } => {
                let mut r: f64 = 0.0;
                for (_, g) in terms {
                    r = r.max(g.band_limit()?);
                }
                Some(r)
            }
            _ => None,
        }
    }

    /// Radius around the origin where ĝ vanishes identically.
    pub fn frequency_gap(&self) -> Option<f64> {
        match &*self.node {
            Node::Meyer(m) => Some(m.gap_radius),
            Node::Affine(a) => a.base.frequency_gap().map(|r| r / op_norm(&a.lin_inv)),
            Node::Sum { terms, .. } if !terms.is_empty() => {
                let mut r = f64::INFINITY;
                for (_, g) in terms {
                    r = r.min(g.frequency_gap()?);
                }
                Some(r)
            }
            _ => None,
        }
    }

    /// Radius beyond which |ĝ| is negligible (below ~1e-16 of its peak).
    pub fn frequency_radius(&self) -> f64 {
        match &*self.node {
            Node::MexicanHat2D => 10.0,
            Node::GaussianDeriv { order } => 10.0 + 2.0 * (order.iter().sum::<u32>() as f64).sqrt(),
            Node::Meyer(m) => m.support_radius,
            Node::Sampled(s) => {
                let h = &s.grid.spec.spacing;
                h.iter().map(|h| (PI / h).powi(2)).sum::<f64>().sqrt()
            }
            Node::Affine(a) => a.base.frequency_radius() * op_norm(&a.lin),
            Node::Sum { terms, .. } => terms.iter().map(|(_, g)| g.frequency_radius()).fold(0.0, f64::max),
        }
    }

    /// Ball (centre, radius) outside of which |g| is negligible.
    pub fn spatial_ball(&self) -> (Vec<f64>, f64) {
        let n = self.dim();
        match &*self.node {
            Node::MexicanHat2D => (vec![0.0; 2], 10.0),
            Node::GaussianDeriv { order } => (vec![0.0; n], 10.0 + 2.0 * (order.iter().sum::<u32>() as f64).sqrt()),
            Node::Meyer(m) => (vec![0.0; n], m.spatial_radius()),
            Node::Sampled(s) => {
                let lo = &s.grid.spec.origin;
                let hi = s.grid.spec.upper();
                let c: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (a + b) / 2.0).collect();
                let r = lo
                    .iter()
                    .zip(&hi)
                    .map(|(a, b)| ((b - a) / 2.0).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (c, r)
            }
            Node::Affine(a) => {
                let (c, r) = a.base.spatial_ball();
                let c = &a.lin_inv * (DVector::from_column_slice(&c) + &a.shift);
                (c.as_slice().to_vec(), r * op_norm(&a.lin_inv))
            }
            Node::Sum { terms, .. } => {
                if terms.is_empty() {
                    return (vec![0.0; n], 0.0);
                }
                let balls: Vec<(Vec<f64>, f64)> = terms.iter().map(|(_, g)| g.spatial_ball()).collect();
                let mut c = vec![0.0; n];
                for (bc, _) in &balls {
                    for i in 0..n {
                        c[i] += bc[i] / balls.len() as f64;
                    }
                }
                let r = balls
                    .iter()
                    .map(|(bc, r)| bc.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() + r)
                    .fold(0.0, f64::max);
                (c, r)
            }
        }
    }

    /// Pointwise evaluator for g.
    pub fn eval_fn(&self) -> EvalFn {
        match &*self.node {
            Node::MexicanHat2D => Arc::new(|x: &[f64]| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                Complex64::new((2.0 - r2) * (-r2 / 2.0).exp(), 0.0)
            }),
            _ => self
                .derivative_fn(&vec![0; self.dim()])
                .expect("order-zero access always exists"),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Complex64 {
        (self.eval_fn())(x)
    }

    /// Evaluator for ∂^β g.
    pub fn derivative_fn(&self, beta: &[u32]) -> Result<EvalFn> {
        let n = self.dim();
        if beta.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "multi-index {beta:?} for a {n}-dimensional generator"
            )));
        }
        match &*self.node {
            Node::MexicanHat2D => {
                // ψ = −Δ G
                let beta = beta.to_vec();
                Ok(Arc::new(move |x: &[f64]| {
                    let mut s = 0.0;
                    for i in 0..2 {
                        let mut a = beta.clone();
                        a[i] += 2;
                        s -= gaussian_derivative(&a, x);
                    }
                    Complex64::new(s, 0.0)
                }))
            }
            Node::GaussianDeriv { order } => {
                let a: Vec<u32> = order.iter().zip(beta).map(|(o, b)| o + b).collect();
                Ok(Arc::new(move |x: &[f64]| {
                    Complex64::new(gaussian_derivative(&a, x), 0.0)
                }))
            }
            Node::Meyer(_) => {
                let table = self.meyer_data().unwrap().derivative_table(beta);
                Ok(Arc::new(move |x: &[f64]| table.interpolate(x)))
            }
            Node::Sampled(s) => {
                let g = if beta.iter().all(|&b| b == 0) {
                    Arc::new(s.grid.clone())
                } else {
                    let mut cache = s.derivatives.lock().expect("derivative cache poisoned");
                    cache
                        .entry(beta.to_vec())
                        .or_insert_with(|| Arc::new(s.grid.derivative(beta)))
                        .clone()
                };
                Ok(Arc::new(move |x: &[f64]| g.interpolate(x)))
            }
            Node::Affine(a) => {
                let coeffs = chain_rule(&a.lin, beta);
                let mut parts: Vec<(f64, EvalFn)> = Vec::with_capacity(coeffs.len());
                for (alpha, c) in coeffs {
                    parts.push((c, a.base.derivative_fn(&alpha)?));
                }
                let lin = a.lin.clone();
                let shift = a.shift.clone();
                let amp = a.amp;
                Ok(Arc::new(move |x: &[f64]| {
                    let y = &lin * DVector::from_column_slice(x) - &shift;
                    let mut acc = ZERO;
                    for (c, f) in &parts {
                        acc += f(y.as_slice()) * *c;
                    }
                    acc * amp
                }))
            }
            Node::Sum { terms, .. } => {
                let mut parts: Vec<(Complex64, EvalFn)> = Vec::with_capacity(terms.len());
                for (c, g) in terms {
                    parts.push((*c, g.derivative_fn(beta)?));
                }
                Ok(Arc::new(move |x: &[f64]| parts.iter().map(|(c, f)| c * f(x)).sum()))
            }
        }
    }

    pub fn derivative(&self, beta: &[u32], x: &[f64]) -> Result<Complex64> {
        Ok((self.derivative_fn(beta)?)(x))
    }

    /// Evaluator for ĝ.
    pub fn fourier_fn(&self) -> EvalFn {
        match &*self.node {
            Node::MexicanHat2D => Arc::new(|xi: &[f64]| {
                let r2 = xi[0] * xi[0] + xi[1] * xi[1];
                Complex64::new(2.0 * PI * r2 * (-r2 / 2.0).exp(), 0.0)
            }),
            Node::GaussianDeriv { order } => {
                let order = order.clone();
                let norm = (2.0 * PI).powf(order.len() as f64 / 2.0);
                Arc::new(move |xi: &[f64]| {
                    let r2: f64 = xi.iter().map(|v| v * v).sum();
                    let mut c = Complex64::new(norm * (-r2 / 2.0).exp(), 0.0);
                    for (a, x) in order.iter().zip(xi) {
                        c *= Complex64::new(0.0, *x).powu(*a);
                    }
                    c
                })
            }
            Node::Meyer(_) => {
                let g = self.clone();
                Arc::new(move |xi: &[f64]| Complex64::new(g.meyer_data().unwrap().fourier(xi), 0.0))
            }
            Node::Sampled(s) => {
                let grid = s.grid.clone();
                Arc::new(move |xi: &[f64]| direct_dft(&grid, xi))
            }
            Node::Affine(a) => {
                let base = a.base.fourier_fn();
                let lin_inv_t = a.lin_inv.transpose();
                let pre_shift = &a.lin_inv * &a.shift;
                let amp = a.amp / a.det_abs;
                Arc::new(move |xi: &[f64]| {
                    let v = DVector::from_column_slice(xi);
                    let phase = -pre_shift.dot(&v);
                    let eta = &lin_inv_t * v;
                    amp * Complex64::from_polar(1.0, phase) * base(eta.as_slice())
                })
            }
            Node::Sum { terms, .. } => {
                let parts: Vec<(Complex64, EvalFn)> = terms.iter().map(|(c, g)| (*c, g.fourier_fn())).collect();
                Arc::new(move |xi: &[f64]| parts.iter().map(|(c, f)| c * f(xi)).sum())
            }
        }
    }

    pub fn fourier(&self, xi: &[f64]) -> Complex64 {
        (self.fourier_fn())(xi)
    }

    /// Samples of g on a grid. Band-limited generators whose spectrum fits
    /// under the grid's Nyquist limit are synthesized spectrally (the result
    /// is the periodization over the grid period); all others are
    /// evaluated pointwise.
    pub fn sample_grid(&self, spec: &GridSpec) -> GridFunction {
        if let Some(r) = self.band_limit() {
            let nyq = spec.spacing.iter().map(|h| PI / h).fold(f64::INFINITY, f64::min);
            if r <= nyq && self.has_closed_fourier() {
                let f = self.fourier_fn();
                let spectrum = spec.frequency_spec().sample(|xi| f(xi));
                let mut out = ifft_transform(&spectrum, &spec.origin);
                out.spec = spec.clone();
                return out;
            }
        }
        let f = self.eval_fn();
        spec.sample(|x| f(x))
    }
}

fn direct_dft(grid: &GridFunction, xi: &[f64]) -> Complex64 {
    let spec = &grid.spec;
    let n = spec.dim();
    // separable phases
    let phases: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            spec.axis(i)
                .into_iter()
                .map(|x| Complex64::from_polar(1.0, -x * xi[i]))
                .collect()
        })
        .collect();
    let mut acc = ZERO;
    let mut idx = vec![0usize; n];
    for (flat, v) in grid.values.iter().enumerate() {
        if v.re == 0.0 && v.im == 0.0 {
            continue;
        }
        spec.unravel(flat, &mut idx);
        let mut p = *v;
        for i in 0..n {
            p *= phases[i][idx[i]];
        }
        acc += p;
    }
    acc * spec.cell_volume()
}

/// ∂^β[g(Lx − s)] = Σ_α c_α (∂^α g)(Lx − s).
pub fn chain_rule(lin: &DMatrix<f64>, beta: &[u32]) -> Vec<(Vec<u32>, f64)> {
    let n = beta.len();
    let mut terms: HashMap<Vec<u32>, f64> = HashMap::new();
    terms.insert(vec![0; n], 1.0);
    for (i, &b) in beta.iter().enumerate() {
        for _ in 0..b {
            let mut next: HashMap<Vec<u32>, f64> = HashMap::new();
            for (alpha, c) in &terms {
                for k in 0..n {
                    let l = lin[(k, i)];
                    if l != 0.0 {
                        let mut a = alpha.clone();
                        a[k] += 1;
                        *next.entry(a).or_insert(0.0) += c * l;
                    }
                }
            }
            terms = next;
        }
    }
    let mut out: Vec<(Vec<u32>, f64)> = terms.into_iter().filter(|(_, c)| *c != 0.0).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// x ↦ b^{j/2} g(A^j x − k).
pub fn dilate_translate(g: &Generator, d: &DilationInfo, j: i32, k: &[i64]) -> Result<Generator> {
    if j == 0 && k.iter().all(|&v| v == 0) {
        return Ok(g.clone());
    }
    let amp = d.determinant_abs.powf(j as f64 / 2.0);
    let shift: Vec<f64> = k.iter().map(|&v| v as f64).collect();
    g.affine(Complex64::new(amp, 0.0), &d.power(j), &shift)
}

/// Largest m ≤ `up_to` such that all moments of total degree ≤ m vanish
/// within `tol`; −1 when the mean does not vanish.
pub fn vanishing_moments(g: &Generator, up_to: u32, quad_box: &QuadBox, tol: f64) -> Result<i32> {
    if g.frequency_gap().is_some() {
        // ĝ ≡ 0 near the origin: every derivative of ĝ at 0 vanishes.
        return Ok(up_to as i32);
    }
    let n = g.dim();
    let idx = multi_indices(n, up_to);
    let f = g.eval_fn();
    let est = integrate_doubling(quad_box, idx.len(), |x, out| {
        let v = f(x).re;
        for (k, a) in idx.iter().enumerate() {
            let mut m = v;
            for (xi, e) in x.iter().zip(a) {
                m *= xi.powi(*e as i32);
            }
            out[k] = m;
        }
    });
    if est.max_change() > tol {
        return Err(Error::QuadratureNotConverged(format!(
            "moment box doubling changed a moment by {:.3e} > {tol:.1e}",
            est.max_change()
        )));
    }
    let mut result = up_to as i32;
    for (k, a) in idx.iter().enumerate() {
        if est.outer[k].abs() > tol {
            let deg: u32 = a.iter().sum();
            result = result.min(deg as i32 - 1);
        }
    }
    Ok(result)
}

/// Moments ∫ g(x) x^γ dx for all |γ| ≤ `up_to` over the doubled box.
pub fn moments(g: &Generator, up_to: u32, quad_box: &QuadBox) -> Vec<(Vec<u32>, f64, f64)> {
    let idx = multi_indices(g.dim(), up_to);
    let f = g.eval_fn();
    let est = integrate_doubling(quad_box, idx.len(), |x, out| {
        let v = f(x).re;
        for (k, a) in idx.iter().enumerate() {
            let mut m = v;
            for (xi, e) in x.iter().zip(a) {
                m *= xi.powi(*e as i32);
            }
            out[k] = m;
        }
    });
    idx.into_iter()
        .enumerate()
        .map(|(k, a)| {
            let change = (est.outer[k] - est.inner[k]).abs();
            (a, est.outer[k], change)
        })
        .collect()
}

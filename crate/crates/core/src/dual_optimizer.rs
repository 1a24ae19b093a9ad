//! Windowed optimal duals.
//!
//! The synthesis operator on a finite window is discretized as a P×m matrix S
//! (grid samples of each atom times √cell). Dual families are written in atom
//! coefficients, Φ = S·M, and every M = M_can + Y·K^* with S·K = 0 reproduces
//! the window exactly: S Φ^* S = S. The optimizer moves Y.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{chain_rule, dilate_translate, Generator, GridFunction, GridSpec};
use crate::geometry::{kappa_2x2, DilationInfo};
use crate::lattice::{cube, omega_weight, LatticeIndex, TruncationWindow, WeightParams};
use crate::molecular::{molecular_norm, MolecularParams};
use crate::par;
use crate::quadrature::multi_indices;
use crate::stats::{linear_fit, LinearFit};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub const DEFAULT_KERNEL_TOL: f64 = 1e-8;
pub const TIKHONOV_MU: f64 = 1e-10;
pub const ARMIJO_SLOPE: f64 = 1e-4;
/// gradient-sampling radii relative to the natural coordinate unit
pub const SAMPLING_RADIUS_START: f64 = 1e-1;
pub const SAMPLING_RADIUS_MIN: f64 = 1e-6;
const CERTIFY_SEED: u64 = 0xe1_0c;
pub const ARMIJO_MAX_HALVINGS: usize = 60;

#[derive(Clone, Debug)]
pub struct SynthesisMatrix {
    pub window: TruncationWindow,
    /// Column labels; an index may appear more than once.
    pub columns: Vec<LatticeIndex>,
    pub grid: GridSpec,
    /// column Q = samples of ψ_Q times √cell
    pub entries: DMatrix<Complex64>,
    generator: Generator,
    dilation: DilationInfo,
}

impl SynthesisMatrix {
    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn dilation(&self) -> &DilationInfo {
        &self.dilation
    }

    pub fn atom(&self, q: usize) -> Result<Generator> {
        let idx = &self.columns[q];
        dilate_translate(&self.generator, &self.dilation, idx.j, &idx.k)
    }

    /// Grid samples of the combination Σ_P a_P ψ_P.
    pub fn combine(&self, a: &DVector<Complex64>) -> GridFunction {
        let v = (&self.entries * a).unscale(self.grid.cell_volume().sqrt());
        GridFunction {
            spec: self.grid.clone(),
            values: v.as_slice().to_vec(),
        }
    }

    /// Position of the reference index (scale 0 at the origin), or 0.
    pub fn reference_column(&self) -> usize {
        let origin = LatticeIndex::new(0, vec![0; self.grid.dim()]);
        self.columns.iter().position(|q| *q == origin).unwrap_or(0)
    }

    /// Append another copy of an index that is already a column.
    pub fn duplicate(&self, idx: &LatticeIndex) -> Result<Self> {
        let q = self
            .columns
            .iter()
            .position(|c| c == idx)
            .ok_or_else(|| Error::InvalidArgument(format!("{idx:?} is not a column")))?;
        let mut out = self.clone();
        out.entries = self.entries.clone().insert_column(self.entries.ncols(), ZERO);
        let col = self.entries.column(q).clone_owned();
        out.entries.set_column(self.entries.ncols(), &col);
        out.columns.push(idx.clone());
        Ok(out)
    }

    fn is_real(&self) -> bool {
        self.entries.iter().all(|z| z.im == 0.0)
    }
}

/// Per-axis frequency reach of ψ_Q: R‖A^j e_i‖.
fn frequency_reach(g: &Generator, d: &DilationInfo, j: i32) -> Vec<f64> {
    let r = g.frequency_radius();
    let aj = d.power(j);
    (0..d.dimension).map(|i| r * aj.column(i).norm()).collect()
}

fn check_grid(g: &Generator, d: &DilationInfo, columns: &[LatticeIndex], grid: &GridSpec) -> Result<()> {
    let lo = &grid.origin;
    let hi = grid.upper();
    let mut scales: Vec<i32> = columns.iter().map(|q| q.j).collect();
    scales.sort_unstable();
    scales.dedup();
    for j in scales {
        let reach = frequency_reach(g, d, j);
        for (i, r) in reach.iter().enumerate() {
            let h = grid.spacing[i];
            if h * r > std::f64::consts::PI {
                return Err(Error::GridTooCoarse {
                    cube: format!("scale {j}, axis {i}"),
                    points: (std::f64::consts::PI / (h * r) * 100.0).floor() as usize,
                    required: 100,
                });
            }
        }
    }
    for q in columns {
        let atom = dilate_translate(g, d, q.j, &q.k)?;
        let (c, r) = atom.spatial_ball();
        for i in 0..grid.dim() {
            if c[i] - r < lo[i] - 1e-9 || c[i] + r > hi[i] + 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "grid [{}, {}] on axis {i} does not cover the support of atom {q:?}",
                    lo[i], hi[i]
                )));
            }
        }
    }
    Ok(())
}

/// Sample every atom of `columns` on `grid`.
pub fn discretize_columns(
    psi: &Generator,
    d: &DilationInfo,
    window: &TruncationWindow,
    columns: Vec<LatticeIndex>,
    grid: &GridSpec,
) -> Result<SynthesisMatrix> {
    if psi.dim() != d.dimension || grid.dim() != d.dimension {
        return Err(Error::DimensionMismatch(
            "generator, dilation and grid must agree".into(),
        ));
    }
    check_grid(psi, d, &columns, grid)?;
    let scale = grid.cell_volume().sqrt();
    let mut entries = DMatrix::from_element(grid.len(), columns.len(), ZERO);
    for (c, q) in columns.iter().enumerate() {
        let f = dilate_translate(psi, d, q.j, &q.k)?.eval_fn();
        let col = grid.sample(|x| f(x) * scale);
        entries.set_column(c, &DVector::from_vec(col.values));
    }
    Ok(SynthesisMatrix {
        window: window.clone(),
        columns,
        grid: grid.clone(),
        entries,
        generator: psi.clone(),
        dilation: d.clone(),
    })
}

pub fn discretize_synthesis(
    psi: &Generator,
    d: &DilationInfo,
    window: &TruncationWindow,
    grid: &GridSpec,
) -> Result<SynthesisMatrix> {
    discretize_columns(psi, d, window, window.indices().to_vec(), grid)
}

struct Svd {
    v: DMatrix<Complex64>,
    sigma: Vec<f64>,
}

fn svd(s: &SynthesisMatrix) -> Svd {
    let m = s.entries.ncols();
    // S^*S = V Σ² V^* for the right factor; singular values from the full SVD
    let full = s.entries.clone().svd(false, true);
    let vt = full.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..full.singular_values.len()).collect();
    order.sort_by(|&a, &b| full.singular_values[b].total_cmp(&full.singular_values[a]));
    let mut v = DMatrix::from_element(m, m, ZERO);
    let mut sigma = vec![0.0; m];
    for (c, &i) in order.iter().enumerate() {
        sigma[c] = full.singular_values[i];
        for r in 0..m {
            v[(r, c)] = vt[(i, r)].conj();
        }
    }
    // a tall matrix yields m singular values; a wide one leaves null directions
    if order.len() < m {
        let extra = complete_basis(&v.columns(0, order.len()).clone_owned(), m);
        for c in order.len()..m {
            v.set_column(c, &extra.column(c - order.len()).clone_owned());
        }
    }
    Svd { v, sigma }
}

/// Orthonormal completion of the columns of `basis` to ℂ^m.
fn complete_basis(basis: &DMatrix<Complex64>, m: usize) -> DMatrix<Complex64> {
    let mut cols: Vec<DVector<Complex64>> = basis.column_iter().map(|c| c.clone_owned()).collect();
    let start = cols.len();
    for e in 0..m {
        let mut v = DVector::from_element(m, ZERO);
        v[e] = Complex64::new(1.0, 0.0);
        for c in &cols {
            let proj = c.dotc(&v);
            v -= c * proj;
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            cols.push(v / Complex64::new(nrm, 0.0));
        }
        if cols.len() == m {
            break;
        }
    }
    DMatrix::from_columns(&cols[start..])
}

#[derive(Clone, Debug)]
pub struct CanonicalDual {
    /// grid samples of each dual element, in column order
    pub duals: Vec<GridFunction>,
    /// column Q holds the atom coefficients of dual element Q
    pub coefficients: DMatrix<Complex64>,
    pub singular_values: Vec<f64>,
    pub tikhonov: Option<f64>,
    pub condition_number: f64,
    pub warnings: Vec<String>,
}

/// Least-squares duals Φ = S (S^*S)^+, with Tikhonov μ on the retained
/// spectrum when S is rank deficient.
pub fn canonical_dual(s: &SynthesisMatrix) -> Result<CanonicalDual> {
    let m = s.entries.ncols();
    if m == 0 {
        return Err(Error::EmptyMatrix);
    }
    let Svd { v, sigma } = svd(s);
    let smax = sigma[0];
    if !(smax > 0.0) {
        return Err(Error::ZeroNorm("synthesis matrix".into()));
    }
    let smin = *sigma.last().unwrap();
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let deficient = sigma.iter().any(|&x| x <= 1e-10 * smax);
    let mu = if deficient { TIKHONOV_MU } else { 0.0 };
    let mut warnings = Vec::new();
    if condition_number > 1e8 {
        warnings.push(format!(
            "IllConditioned: synthesis condition number {condition_number:.3e}"
        ));
    }
    let mut coefficients = DMatrix::from_element(m, m, ZERO);
    for (c, &sg) in sigma.iter().enumerate() {
        if sg <= DEFAULT_KERNEL_TOL * smax {
            continue;
        }
        let g = Complex64::new(1.0 / (sg * sg + mu), 0.0);
        let col = v.column(c);
        coefficients += col * col.adjoint() * g;
    }
    let duals = (0..m)
        .map(|q| s.combine(&coefficients.column(q).clone_owned()))
        .collect();
    Ok(CanonicalDual {
        duals,
        coefficients,
        singular_values: sigma,
        tikhonov: deficient.then_some(mu),
        condition_number,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct KernelBasis {
    /// m×r, orthonormal columns
    pub vectors: DMatrix<Complex64>,
    pub dimension: usize,
}

/// Right singular directions of S with σ ≤ tol·σ_max.
pub fn kernel_basis(s: &SynthesisMatrix, tol: f64) -> KernelBasis {
    let m = s.entries.ncols();
    if m == 0 {
        return KernelBasis {
            vectors: DMatrix::from_element(0, 0, ZERO),
            dimension: 0,
        };
    }
    let Svd { v, sigma } = svd(s);
    let smax = sigma[0];
    let keep: Vec<usize> = (0..m).filter(|&c| sigma[c] <= tol * smax).collect();
    let cols: Vec<DVector<Complex64>> = keep.iter().map(|&c| v.column(c).clone_owned()).collect();
    let vectors = if cols.is_empty() {
        DMatrix::from_element(m, 0, ZERO)
    } else {
        DMatrix::from_columns(&cols)
    };
    KernelBasis {
        dimension: keep.len(),
        vectors,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    MolecularNorm,
    AlgebraProxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationStatus {
    Converged,
    MaxIterations,
    NoDescent,
    /// no kernel direction
    Trivial,
}

#[derive(Clone, Debug)]
pub struct OptimizeOptions {
    pub objective: ObjectiveKind,
    pub max_iter: usize,
    pub el_tol: f64,
    /// relative finite-difference step
    pub fd_step: f64,
    pub kernel_tol: f64,
    /// random start with this seed instead of the canonical dual
    pub random_start: Option<u64>,
    /// weight for the algebra proxy
    pub weights: WeightParams,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            objective: ObjectiveKind::MolecularNorm,
            max_iter: 500,
            el_tol: 1e-4,
            fd_step: 1e-5,
            kernel_tol: DEFAULT_KERNEL_TOL,
            random_start: None,
            weights: WeightParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationResult {
    /// dual element at the reference index
    #[serde(skip)]
    pub dual_samples: GridFunction,
    /// Y, row-major (atom, kernel direction)
    #[serde(skip)]
    pub kernel_coefficients: Vec<Complex64>,
    pub objective_kind: ObjectiveKind,
    pub trace: Vec<f64>,
    pub el_residual: f64,
    /// the same residual with half the finite-difference step
    pub el_residual_half_step: f64,
    pub initial_el_residual: f64,
    pub iterations: usize,
    pub kernel_dim: usize,
    pub status: OptimizationStatus,
    /// changes of the active multi-index between iterates
    pub beta_crossings: usize,
    /// ‖ψ‖_{D,N}
    pub psi_norm: f64,
    /// mean pulled-back molecular norm of the dual family
    pub dual_norm: f64,
    pub warnings: Vec<String>,
}

impl OptimizationResult {
    pub fn final_objective(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }

    /// Half-step re-measurement of the residual moves it by less than half,
    /// counted against el_tol once both values sit below it.
    pub fn step_robust(&self, el_tol: f64) -> bool {
        let change = (self.el_residual_half_step - self.el_residual).abs();
        change < 0.5 * self.el_residual.max(el_tol)
    }

    /// M_p(ψ, φ*) = ‖ψ‖ + ‖φ*‖.
    pub fn pair_constant(&self) -> f64 {
        self.psi_norm + self.dual_norm
    }
}

/// Objective over real parameters with optional fast finite differences.
trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, c: &[f64]) -> f64;
    /// central differences with per-coordinate steps
    fn gradient(&self, c: &[f64], rel: f64) -> Vec<f64> {
        fd_gradient(|x| self.value(x), c, rel)
    }
    /// multi-index attaining the sup, per column; empty when not meaningful
    fn active(&self, _c: &[f64]) -> Vec<usize> {
        Vec::new()
    }
    /// Lipschitz bound of J along each coordinate: the objective's own
    /// seminorm of the direction
    fn scales(&self) -> Vec<f64>;
    /// largest slope relative to its Lipschitz bound
    fn el_from(&self, g: &[f64]) -> f64 {
        g.iter()
            .zip(self.scales())
            .filter(|(_, l)| *l > 0.0)
            .map(|(g, l)| g.abs() / l)
            .fold(0.0, f64::max)
    }
}

fn fd_step(ci: f64, rel: f64) -> f64 {
    rel * ci.abs().max(1.0)
}

fn fd_gradient<F: Fn(&[f64]) -> f64 + Sync>(f: F, c: &[f64], rel: f64) -> Vec<f64> {
    par::map_range(c.len(), |i| {
        let h = fd_step(c[i], rel);
        let mut x = c.to_vec();
        x[i] = c[i] + h;
        let up = f(&x);
        x[i] = c[i] - h;
        let down = f(&x);
        (up - down) / (2.0 * h)
    })
}

/// Parameter layout: Y = B·Z with B an m×q basis of atom coefficients and
/// Z[a, i] the coordinates for kernel direction i; real parts first, then
/// imaginary parts when the data are complex.
#[derive(Clone)]
struct Layout {
    basis: DMatrix<Complex64>,
    r: usize,
    complex: bool,
}

impl Layout {
    fn q(&self) -> usize {
        self.basis.ncols()
    }

    fn dim(&self) -> usize {
        self.q() * self.r * if self.complex { 2 } else { 1 }
    }

    fn z(&self, c: &[f64]) -> DMatrix<Complex64> {
        let q = self.q();
        let half = q * self.r;
        DMatrix::from_fn(q, self.r, |a, i| {
            let re = c[a * self.r + i];
            let im = if self.complex { c[half + a * self.r + i] } else { 0.0 };
            Complex64::new(re, im)
        })
    }

    fn y(&self, c: &[f64]) -> DMatrix<Complex64> {
        &self.basis * self.z(c)
    }

    /// (basis vector, direction, unit) for a parameter slot
    fn slot(&self, s: usize) -> (usize, usize, Complex64) {
        let half = self.q() * self.r;
        let (t, unit) = if s < half {
            (s, Complex64::new(1.0, 0.0))
        } else {
            (s - half, Complex64::new(0.0, 1.0))
        };
        (t / self.r, t % self.r, unit)
    }
}

/// Pulled-back molecular functional of the dual family on the grid.
struct MolecularObjective {
    layout: Layout,
    m: usize,
    /// one entry per column whose coefficients move
    active: Vec<ActiveColumn>,
    constant: f64,
    psi_norm: f64,
}

struct ActiveColumn {
    /// conj(K_{Q,i})
    kq: Vec<Complex64>,
    /// per β: weighted derivative samples of the basis (P×q) and of the
    /// canonical dual element
    blocks: Vec<(DMatrix<Complex64>, DVector<Complex64>)>,
}

fn l1(v: &DVector<Complex64>) -> f64 {
    v.iter().map(|z| z.norm()).sum()
}

impl ActiveColumn {
    fn shift(&self, z: &DMatrix<Complex64>) -> DVector<Complex64> {
        let mut s = DVector::from_element(z.nrows(), ZERO);
        for (i, k) in self.kq.iter().enumerate() {
            if *k != ZERO {
                s += z.column(i) * *k;
            }
        }
        s
    }

    fn vectors(&self, z: &DMatrix<Complex64>) -> Vec<DVector<Complex64>> {
        let s = self.shift(z);
        self.blocks.iter().map(|(b, base)| base + b * &s).collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl MolecularObjective {
    /// central differences of one β term of one column, per coordinate
    fn piece_gradient(&self, col: &ActiveColumn, b: usize, v: &DVector<Complex64>, c: &[f64], rel: f64) -> Vec<f64> {
        par::map_range(self.dim(), |s| {
            let (p, i, unit) = self.layout.slot(s);
            let k = col.kq[i];
            if k == ZERO {
                return 0.0;
            }
            let h = fd_step(c[s], rel);
            let dcol = col.blocks[b].0.column(p);
            let step = k * unit * h;
            let mut diff = 0.0;
            for x in 0..v.len() {
                let delta = dcol[x] * step;
                diff += (v[x] + delta).norm() - (v[x] - delta).norm();
            }
            diff / (2.0 * h * self.m as f64)
        })
    }
}

/// Least-norm point of the convex hull of `points` (Wolfe's algorithm).
fn min_norm_hull(points: &[Vec<f64>]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let combine = |set: &[usize], lam: &[f64]| {
        let mut x = vec![0.0; points[0].len()];
        for (&i, &l) in set.iter().zip(lam) {
            for (xi, pi) in x.iter_mut().zip(&points[i]) {
                *xi += l * pi;
            }
        }
        x
    };
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0, f64::max);
    if scale == 0.0 {
        return vec![0.0; points[0].len()];
    }
    let first = (0..points.len())
        .min_by(|&a, &b| dot(&points[a], &points[a]).total_cmp(&dot(&points[b], &points[b])))
        .unwrap();
    let mut set = vec![first];
    let mut lam = vec![1.0];
    let mut x = points[first].clone();
    for _ in 0..10 * points.len() + 10 {
        let j = (0..points.len())
            .min_by(|&a, &b| dot(&x, &points[a]).total_cmp(&dot(&x, &points[b])))
            .unwrap();
        if dot(&x, &x) - dot(&x, &points[j]) <= 1e-14 * scale || set.contains(&j) {
            break;
        }
        set.push(j);
        lam.push(0.0);
        loop {
            // affine least-norm point of the current set
            let k = set.len();
            let kkt = DMatrix::from_fn(k + 1, k + 1, |a, b| match (a < k, b < k) {
                (true, true) => dot(&points[set[a]], &points[set[b]]),
                (false, false) => 0.0,
                _ => 1.0,
            });
            let mut rhs = DVector::zeros(k + 1);
            rhs[k] = 1.0;
            let alpha = match kkt.clone().lu().solve(&rhs) {
                Some(v) if v.iter().all(|x| x.is_finite()) => v,
                _ => kkt.svd(true, true).solve(&rhs, 1e-14).unwrap_or(rhs),
            };
            let alpha: Vec<f64> = alpha.iter().take(k).cloned().collect();
            if alpha.iter().all(|&a| a > 1e-14) {
                lam = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (l, a) in lam.iter().zip(&alpha) {
                if *a <= 1e-14 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lam.iter_mut().zip(&alpha) {
                *l += theta * (a - *l);
            }
            let keep: Vec<usize> = (0..k).filter(|&i| lam[i] > 1e-14).collect();
            set = keep.iter().map(|&i| set[i]).collect();
            lam = keep.iter().map(|&i| lam[i]).collect();
            let total: f64 = lam.iter().sum();
            lam.iter_mut().for_each(|l| *l /= total);
        }
        x = combine(&set, &lam);
    }
    x
}

impl Objective for MolecularObjective {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn value(&self, c: &[f64]) -> f64 {
        let z = self.layout.z(c);
        let parts: Vec<f64> = par::map_slice(&self.active, |col| col.vectors(&z).iter().map(l1).fold(0.0, f64::max));
        self.psi_norm + (self.constant + parts.iter().sum::<f64>()) / self.m as f64
    }

    fn gradient(&self, c: &[f64], rel: f64) -> Vec<f64> {
        let z = self.layout.z(c);
        let mut g = vec![0.0; self.dim()];
        for col in &self.active {
            let vs = col.vectors(&z);
            let vals: Vec<f64> = vs.iter().map(l1).collect();
            let top = vals.iter().cloned().fold(0.0, f64::max);
            // multi-indices tied with the sup share the gradient
            let tied: Vec<usize> = (0..vals.len())
                .filter(|&b| vals[b] >= top - 1e-12 * top.max(1.0))
                .collect();
            for &b in &tied {
                let pg = self.piece_gradient(col, b, &vs[b], c, rel);
                for (gi, pi) in g.iter_mut().zip(pg) {
                    *gi += pi / tied.len() as f64;
                }
            }
        }
        g
    }

    fn scales(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|s| {
                let (p, i, _) = self.layout.slot(s);
                self.active
                    .iter()
                    .map(|col| {
                        let k = col.kq[i].norm();
                        col.blocks
                            .iter()
                            .map(|(b, _)| b.column(p).iter().map(|z| z.norm()).sum::<f64>())
                            .fold(0.0, f64::max)
                            * k
                    })
                    .sum::<f64>()
                    / self.m as f64
            })
            .collect()
    }

    fn active(&self, c: &[f64]) -> Vec<usize> {
        let z = self.layout.z(c);
        self.active
            .iter()
            .map(|col| {
                let vals: Vec<f64> = col.vectors(&z).iter().map(l1).collect();
                argmax(&vals)
            })
            .collect()
    }
}

/// C_M of the cross-Gram Φ^*S = M^*G over the column labels.
struct AlgebraObjective {
    layout: Layout,
    base: DMatrix<Complex64>,
    k: DMatrix<Complex64>,
    gram: DMatrix<Complex64>,
    inv_omega: DMatrix<f64>,
}

impl Objective for AlgebraObjective {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn scales(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|s| {
                let (p, i, unit) = self.layout.slot(s);
                let y = self.layout.basis.column(p) * unit;
                let x = self.k.column(i) * y.adjoint() * &self.gram;
                x.iter()
                    .zip(self.inv_omega.iter())
                    .map(|(z, w)| z.norm() * w)
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    fn value(&self, c: &[f64]) -> f64 {
        let y = self.layout.y(c);
        let x = &self.base + &self.k * y.adjoint() * &self.gram;
        x.iter()
            .zip(self.inv_omega.iter())
            .map(|(z, w)| z.norm() * w)
            .fold(0.0, f64::max)
    }
}

/// Quadrature weights b^{j/2}(1 + ρ(A^j x − k))^D·cell of the pulled-back
/// column q.
fn column_weights(s: &SynthesisMatrix, q: usize, decay: f64) -> Vec<f64> {
    let d = s.dilation();
    let grid = &s.grid;
    let idx = &s.columns[q];
    let fwd = d.power(idx.j);
    let bj = d.determinant_abs.powf(idx.j as f64 / 2.0);
    let k = DVector::from_iterator(idx.k.len(), idx.k.iter().map(|&v| v as f64));
    let cell = grid.cell_volume();
    par::map_range(grid.len(), |flat| {
        let y = &fwd * DVector::from_vec(grid.point_vec(flat)) - &k;
        let w = if decay == 0.0 {
            1.0
        } else {
            (1.0 + d.rho(y.as_slice())).powf(decay)
        };
        bj * w * cell
    })
}

/// Basis of the range directions of S, orthonormal for the weighted inner
/// product Σ w|f|² of the reference column. This is the metric in which the
/// descent runs; it evens out the polynomial weight.
fn weighted_basis(s: &SynthesisMatrix, kernel_tol: f64, decay: f64) -> DMatrix<Complex64> {
    let Svd { v, sigma } = svd(s);
    let m = s.columns.len();
    let rank = sigma.iter().filter(|&&x| x > kernel_tol * sigma[0]).count();
    if rank == 0 {
        return DMatrix::from_element(m, 0, ZERO);
    }
    let vr = v.columns(0, rank).clone_owned();
    let w = column_weights(s, s.reference_column(), decay);
    let cell = s.grid.cell_volume();
    // rows of S scaled by √(w/cell) give the weighted Gram
    let mut ws = &s.entries * &vr;
    for (x, wx) in w.iter().enumerate() {
        let f = (wx / cell).sqrt();
        for c in 0..rank {
            ws[(x, c)] *= f;
        }
    }
    let g = ws.adjoint() * &ws;
    let eig = g.symmetric_eigen();
    let mut basis = DMatrix::from_element(m, rank, ZERO);
    for c in 0..rank {
        let lam = eig.eigenvalues[c].max(f64::MIN_POSITIVE);
        let col = &vr * eig.eigenvectors.column(c) / Complex64::new(lam.sqrt(), 0.0);
        basis.set_column(c, &col);
    }
    basis
}

fn build_molecular(
    s: &SynthesisMatrix,
    m_can: &DMatrix<Complex64>,
    kernel: &KernelBasis,
    params: &MolecularParams,
    layout: Layout,
) -> Result<MolecularObjective> {
    let d = s.dilation();
    let n = d.dimension;
    let m = s.columns.len();
    let grid = &s.grid;
    let betas = multi_indices(n, params.smoothness);
    // derivative samples T_α[x, P] of every atom
    let mut tables: HashMap<Vec<u32>, DMatrix<Complex64>> = HashMap::new();
    for alpha in &betas {
        let mut t = DMatrix::from_element(grid.len(), m, ZERO);
        for q in 0..m {
            let f = s.atom(q)?.derivative_fn(alpha)?;
            let col = grid.sample(|x| f(x));
            t.set_column(q, &DVector::from_vec(col.values));
        }
        tables.insert(alpha.clone(), t);
    }
    let mut constant = 0.0;
    let mut active = Vec::new();
    for (q, idx) in s.columns.iter().enumerate() {
        let lin = d.power(-idx.j);
        let weights = column_weights(s, q, params.decay);
        let a = m_can.column(q).clone_owned();
        let mut blocks = Vec::with_capacity(betas.len());
        for beta in &betas {
            let mut b = DMatrix::from_element(grid.len(), m, ZERO);
            for (alpha, coef) in chain_rule(&lin, beta) {
                b += &tables[&alpha] * Complex64::new(coef, 0.0);
            }
            for (x, &w) in weights.iter().enumerate() {
                for col in 0..m {
                    b[(x, col)] *= w;
                }
            }
            let base = &b * &a;
            blocks.push((b * &layout.basis, base));
        }
        let kq: Vec<Complex64> = (0..kernel.dimension).map(|i| kernel.vectors[(q, i)].conj()).collect();
        if kq.iter().any(|z| z.norm() > 1e-12) {
            active.push(ActiveColumn { kq, blocks });
        } else {
            constant += blocks.iter().map(|(_, v)| l1(v)).fold(0.0, f64::max);
        }
    }
    let psi_norm = molecular_norm(s.generator(), d, params)?;
    Ok(MolecularObjective {
        layout,
        m,
        active,
        constant,
        psi_norm,
    })
}

fn build_algebra(
    s: &SynthesisMatrix,
    m_can: &DMatrix<Complex64>,
    kernel: &KernelBasis,
    w: WeightParams,
    layout: Layout,
) -> AlgebraObjective {
    let d = s.dilation();
    let gram = s.entries.adjoint() * &s.entries;
    let cubes: Vec<_> = s.columns.iter().map(|q| cube(d, q)).collect();
    let m = cubes.len();
    let inv_omega = DMatrix::from_fn(m, m, |a, b| {
        1.0 / omega_weight(&cubes[a], &cubes[b], w.delta, w.epsilon, w.p, d)
    });
    AlgebraObjective {
        layout,
        base: m_can.adjoint() * &gram,
        k: kernel.vectors.clone(),
        gram,
        inv_omega,
    }
}

/// max over coordinate directions of |∂J| / J, central differences.
pub fn el_residual<F: Fn(&[f64]) -> f64 + Sync>(objective: F, c: &[f64], rel_step: f64) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let j = objective(c);
    let g = fd_gradient(&objective, c, rel_step);
    normalized_max(&g, j)
}

fn normalized_max(g: &[f64], j: f64) -> f64 {
    let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    gmax / j.abs().max(f64::MIN_POSITIVE)
}

struct Descent {
    c: Vec<f64>,
    trace: Vec<f64>,
    iterations: usize,
    status: OptimizationStatus,
    el: f64,
    radius: f64,
    crossings: usize,
}

/// Least-norm element of the hull of gradients at c and at dim + 1 points
/// drawn uniformly from the ball of the given radius around c; a computable
/// stand-in for the generalized gradient where J has kinks.
fn sampled_gradient(obj: &dyn Objective, c: &[f64], rel: f64, radius: f64, seed: u64) -> Vec<f64> {
    let dim = c.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![c.to_vec()];
    if radius > 0.0 {
        for _ in 0..=dim {
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rng.gen::<f64>().powf(1.0 / dim as f64);
            points.push(c.iter().zip(&dir).map(|(ci, di)| ci + radius * u * di / len).collect());
        }
    }
    let grads: Vec<Vec<f64>> = points.iter().map(|p| obj.gradient(p, rel)).collect();
    min_norm_hull(&grads)
}

/// EL residual of the descent: the sampled generalized gradient at the
/// certification radius, per coordinate relative to its Lipschitz bound.
fn certify(obj: &dyn Objective, c: &[f64], rel: f64, radius: f64) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    obj.el_from(&sampled_gradient(obj, c, rel, radius, CERTIFY_SEED))
}

/// Gradient-sampling descent: Armijo steps along the least-norm sampled
/// gradient; the sampling radius shrinks by 10 whenever the sampled
/// residual passes el_tol or no step is accepted.
fn descend(obj: &dyn Objective, start: Vec<f64>, opts: &OptimizeOptions, unit: f64) -> Descent {
    let mut c = start;
    let mut j = obj.value(&c);
    let mut trace = vec![j];
    let mut t: f64 = 1.0;
    let mut status = OptimizationStatus::MaxIterations;
    let mut iterations = 0;
    let mut crossings = 0;
    let mut active = obj.active(&c);
    let r_min = SAMPLING_RADIUS_MIN * unit;
    let mut radius = SAMPLING_RADIUS_START * unit;
    let mut draws: u64 = 0;
    while iterations < opts.max_iter {
        draws += 1;
        // at the final radius the stopping test is the certification itself
        let seed = if radius <= r_min { CERTIFY_SEED } else { draws };
        let g = sampled_gradient(obj, &c, opts.fd_step, radius, seed);
        if obj.el_from(&g) <= opts.el_tol {
            if radius <= r_min {
                status = OptimizationStatus::Converged;
                break;
            }
            radius = (radius / 10.0).max(r_min);
            continue;
        }
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut step = (2.0 * t).min(1e12);
        let mut accepted = None;
        for _ in 0..ARMIJO_MAX_HALVINGS {
            let trial: Vec<f64> = c.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let jt = obj.value(&trial);
            if jt <= j - ARMIJO_SLOPE * step * gg {
                accepted = Some((trial, jt));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, jt)) => {
                c = trial;
                j = jt;
                t = step;
                trace.push(j);
                iterations += 1;
                let now = obj.active(&c);
                crossings += now.iter().zip(&active).filter(|(a, b)| a != b).count();
                active = now;
            }
            None if radius > r_min => radius = (radius / 10.0).max(r_min),
            None => {
                status = OptimizationStatus::NoDescent;
                break;
            }
        }
    }
    let el = certify(obj, &c, opts.fd_step, r_min);
    if status == OptimizationStatus::Converged && el > opts.el_tol {
        status = OptimizationStatus::MaxIterations;
    }
    Descent {
        c,
        trace,
        iterations,
        status,
        el,
        radius: r_min,
        crossings,
    }
}

/// Minimize the chosen objective over the affine family of windowed duals.
pub fn optimize_prepared(
    s: &SynthesisMatrix,
    params: &MolecularParams,
    opts: &OptimizeOptions,
) -> Result<OptimizationResult> {
    let can = canonical_dual(s)?;
    let kernel = kernel_basis(s, opts.kernel_tol);
    let layout = Layout {
        basis: if kernel.dimension == 0 {
            DMatrix::from_element(s.columns.len(), 0, ZERO)
        } else {
            weighted_basis(s, opts.kernel_tol, params.decay)
        },
        r: kernel.dimension,
        complex: !(s.is_real() && kernel.vectors.iter().all(|z| z.im == 0.0)),
    };
    let mut warnings = can.warnings.clone();
    let mol = build_molecular(s, &can.coefficients, &kernel, params, layout.clone())?;
    let algebra;
    let obj: &dyn Objective = match opts.objective {
        ObjectiveKind::MolecularNorm => &mol,
        ObjectiveKind::AlgebraProxy => {
            algebra = build_algebra(s, &can.coefficients, &kernel, opts.weights, layout.clone());
            &algebra
        }
    };
    let dim = obj.dim();
    let reference = s.reference_column();
    let finish = |c: &[f64], d: Descent, initial_el: f64, warnings: Vec<String>| {
        let y = layout.y(c);
        let coeffs = &can.coefficients + &y * kernel.vectors.adjoint();
        let dual_samples = s.combine(&coeffs.column(reference).clone_owned());
        let dual_norm = (mol.value(c) - mol.psi_norm).max(0.0);
        OptimizationResult {
            dual_samples,
            kernel_coefficients: y.transpose().iter().cloned().collect(),
            objective_kind: opts.objective,
            trace: d.trace,
            el_residual: d.el,
            el_residual_half_step: if dim == 0 {
                0.0
            } else {
                certify(obj, c, opts.fd_step / 2.0, d.radius)
            },
            initial_el_residual: initial_el,
            iterations: d.iterations,
            kernel_dim: kernel.dimension,
            status: d.status,
            beta_crossings: d.crossings,
            psi_norm: mol.psi_norm,
            dual_norm,
            warnings,
        }
    };
    if dim == 0 {
        let j = obj.value(&[]);
        let d = Descent {
            c: Vec::new(),
            trace: vec![j],
            iterations: 0,
            status: OptimizationStatus::Trivial,
            el: 0.0,
            radius: 0.0,
            crossings: 0,
        };
        return Ok(finish(&[], d, 0.0, warnings));
    }
    // coordinate length of the reference dual in the weighted basis
    let unit = (weighted_size(s, &can.coefficients, params.decay) / (dim as f64).sqrt()).max(1e-12);
    let start = match opts.random_start {
        None => vec![0.0; dim],
        Some(seed) => {
            // about a 10% perturbation of the reference dual in the weighted norm
            let scale = 0.1 * unit;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        }
    };
    let initial_el = certify(obj, &vec![0.0; dim], opts.fd_step, SAMPLING_RADIUS_MIN * unit);
    let d = descend(obj, start, opts, unit);
    if d.status == OptimizationStatus::NoDescent {
        warnings.push("NoDescent: Armijo backtracking failed 60 times; best iterate returned".into());
    }
    let c = d.c.clone();
    Ok(finish(&c, d, initial_el, warnings))
}

fn weighted_size(s: &SynthesisMatrix, m_can: &DMatrix<Complex64>, decay: f64) -> f64 {
    let q = s.reference_column();
    let w = column_weights(s, q, decay);
    let f = s.combine(&m_can.column(q).clone_owned());
    f.values
        .iter()
        .zip(&w)
        .map(|(v, w)| v.norm_sqr() * w)
        .sum::<f64>()
        .sqrt()
}

/// Discretize, optionally duplicate some columns, and optimize.
pub fn optimize_dual(
    psi: &Generator,
    d: &DilationInfo,
    window: &TruncationWindow,
    grid: &GridSpec,
    duplicates: &[LatticeIndex],
    params: &MolecularParams,
    opts: &OptimizeOptions,
) -> Result<OptimizationResult> {
    let mut s = discretize_synthesis(psi, d, window, grid)?;
    for idx in duplicates {
        s = s.duplicate(idx)?;
    }
    optimize_prepared(&s, params, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub kappa: f64,
    pub det: f64,
    pub psi_norm: f64,
    pub dual_norm: f64,
    pub m_p: f64,
    pub kernel_dim: usize,
    pub el_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    /// fitted exponent of M_p against κ; absent when κ does not vary
    pub alpha: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Least-squares slope of log value against log κ.
pub fn fit_power_law(kappa: &[f64], values: &[f64]) -> Option<LinearFit> {
    let x: Vec<f64> = kappa.iter().map(|k| k.ln()).collect();
    let y: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    linear_fit(&x, &y)
}

/// Per dilation: optimize the dual with the reference index duplicated and
/// record M_p of the optimized pair. `params` falls back to the per-dilation
/// defaults for exponent p.
pub fn kappa_scaling_experiment(
    psi: &Generator,
    p: f64,
    dilations: &[DilationInfo],
    window: &TruncationWindow,
    grid: &GridSpec,
    params: Option<&MolecularParams>,
    opts: &OptimizeOptions,
) -> Result<ScalingResult> {
    if dilations.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} dilations; at least 3 are needed",
            dilations.len()
        )));
    }
    let reference = LatticeIndex::new(0, vec![0; psi.dim()]);
    let mut rows = Vec::with_capacity(dilations.len());
    for d in dilations {
        let mp = match params {
            Some(p) => p.clone(),
            None => MolecularParams::defaults(p, d)?,
        };
        let res = optimize_dual(psi, d, window, grid, std::slice::from_ref(&reference), &mp, opts)?;
        let kappa = if d.dimension == 2 {
            kappa_2x2(&d.matrix)
        } else {
            d.condition_number
        };
        rows.push(ScalingRow {
            kappa,
            det: d.determinant_abs,
            psi_norm: res.psi_norm,
            dual_norm: res.dual_norm,
            m_p: res.pair_constant(),
            kernel_dim: res.kernel_dim,
            el_residual: res.el_residual,
        });
    }
    let k: Vec<f64> = rows.iter().map(|r| r.kappa).collect();
    let v: Vec<f64> = rows.iter().map(|r| r.m_p).collect();
    let fit = fit_power_law(&k, &v);
    Ok(ScalingResult {
        rows,
        alpha: fit.map(|f| f.slope),
        r_squared: fit.map(|f| f.r_squared),
    })
}

pub fn write_scaling_csv<W: std::io::Write>(w: W, rows: &[ScalingRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "kappa",
        "det",
        "psi_norm",
        "dual_norm",
        "M_p",
        "kernel_dim",
        "el_residual",
    ])?;
    for r in rows {
        wr.write_record(&[
            format!("{:.12e}", r.kappa),
            format!("{}", r.det),
            format!("{:.12e}", r.psi_norm),
            format!("{:.12e}", r.dual_norm),
            format!("{:.12e}", r.m_p),
            r.kernel_dim.to_string(),
            format!("{:.6e}", r.el_residual),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

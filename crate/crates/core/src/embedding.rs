//! L^q norms against an H^p proxy and the embedding-constant scan.
//!
//! H^p_A is measured through analysis coefficients against an auxiliary
//! Meyer partition frame and the anisotropic sequence norm. Test functions
//! are mollified double-Haar cube atoms and random sparse syntheses through
//! ψ; the worst L^q/H^p ratio estimates the embedding constant, which is then
//! factored against the molecular pair constant.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame_ops::{analysis, boundary_fraction, synthesis, FrameSystem, BOUNDARY_ENERGY_LIMIT};
use crate::generators::{Generator, GridFunction, GridSpec};
use crate::geometry::DilationInfo;
use crate::lattice::{
    sequence_norm, CoefficientSequence, LatticeIndex, SequenceNormMode, TruncationWindow, WindowSpec,
};
use crate::molecular::{molecular_norm, MolecularParams};
use crate::par;

/// Riemann-sum L^q norm; q = ∞ gives the largest sample.
pub fn lq_norm(f: &GridFunction, q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::InvalidExponent(q));
    }
    if q.is_infinite() {
        return Ok(f.max_abs());
    }
    let cell = f.spec.cell_volume();
    let sum: f64 = f.values.iter().map(|v| v.norm().powf(q)).sum();
    Ok((sum * cell).powf(1.0 / q))
}

/// Sequence norm of the analysis coefficients of f against the auxiliary
/// frame; fails when more than 1% of the coefficient energy sits on the
/// window boundary.
pub fn hp_proxy_norm(
    f: &GridFunction,
    d: &DilationInfo,
    p: f64,
    window: &TruncationWindow,
    aux: &Generator,
) -> Result<f64> {
    Ok(hp_proxy(f, d, p, window, aux)?.0)
}

fn hp_proxy(
    f: &GridFunction,
    d: &DilationInfo,
    p: f64,
    window: &TruncationWindow,
    aux: &Generator,
) -> Result<(f64, CoefficientSequence)> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidExponent(p));
    }
    let sys = FrameSystem::self_dual(aux.clone(), d.clone(), window.clone())?;
    let coeffs = analysis(&sys, f)?;
    if coeffs.values.iter().all(|v| v.norm() == 0.0) {
        return Ok((0.0, coeffs));
    }
    let fraction = boundary_fraction(&coeffs);
    if fraction > BOUNDARY_ENERGY_LIMIT {
        return Err(Error::WindowTooSmall { fraction });
    }
    let kept = prune(&coeffs, p, d, PRUNE_BUDGET);
    let norm = sequence_norm(&kept, p, d, &SequenceNormMode::Adaptive)?;
    Ok((norm, coeffs))
}

/// relative error allowed in ‖s‖^p when dropping small coefficients
const PRUNE_BUDGET: f64 = 1e-6;

/// Zero the smallest coefficients while their single-cube norms sum to at
/// most budget·max. Since p ≤ 2 makes ‖·‖^p subadditive and every single
/// cube bounds ‖s‖^p from below, this moves ‖s‖^p by at most that fraction.
fn prune(s: &CoefficientSequence, p: f64, d: &DilationInfo, budget: f64) -> CoefficientSequence {
    if p > 2.0 {
        return s.clone();
    }
    // ‖s_Q e_Q‖^p = |s_Q|^p |Q|^{1 − p/2}
    let single: Vec<f64> = s
        .window
        .indices()
        .iter()
        .zip(&s.values)
        .map(|(q, v)| v.norm().powf(p) * d.determinant_abs.powf(-(q.j as f64) * (1.0 - p / 2.0)))
        .collect();
    let top = single.iter().cloned().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..single.len()).collect();
    order.sort_by(|&a, &b| single[a].total_cmp(&single[b]));
    let mut out = s.clone();
    let mut spent = 0.0;
    for i in order {
        spent += single[i];
        if spent > budget * top {
            break;
        }
        out.values[i] = Complex64::new(0.0, 0.0);
    }
    out
}

/// ½[erf(t/σ√2) − erf((t − 1)/σ√2)]: the unit interval blurred by a
/// Gaussian of width σ.
fn soft_box(t: f64, lo: f64, hi: f64, sigma: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (libm::erf((t - lo) / s) - libm::erf((t - hi) / s))
}

/// Mollified double-Haar atom of the cube Q_{j,k}: |Q|^{−1/p}·g(A^j x − k)
/// with g = (χ_{[0,½)} − χ_{[½,1)}) ⊗ χ_{[0,1)}^{n−1}, each factor blurred
/// by σ = `mollifier` in cube coordinates. It has mean zero, so it is an
/// H^p atom for p close to 1.
pub fn cube_atom(
    d: &DilationInfo,
    idx: &LatticeIndex,
    p: f64,
    mollifier: f64,
    grid: &GridSpec,
) -> Result<GridFunction> {
    if grid.dim() != d.dimension || idx.k.len() != d.dimension {
        return Err(Error::DimensionMismatch("atom, dilation and grid must agree".into()));
    }
    if !(mollifier > 0.0) {
        return Err(Error::InvalidArgument("mollifier width must be positive".into()));
    }
    let a = d.power(idx.j);
    let amp = d.determinant_abs.powf(idx.j as f64 / p);
    let k: Vec<f64> = idx.k.iter().map(|&v| v as f64).collect();
    let n = d.dimension;
    Ok(grid.sample(|x| {
        let y = &a * DVector::from_column_slice(x);
        let first = soft_box(y[0] - k[0], 0.0, 0.5, mollifier) - soft_box(y[0] - k[0], 0.5, 1.0, mollifier);
        let rest: f64 = (1..n).map(|i| soft_box(y[i] - k[i], 0.0, 1.0, mollifier)).product();
        Complex64::new(amp * first * rest, 0.0)
    }))
}

/// Test functions scanned by `embedding_scan`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestFamily {
    /// scales of the cube atoms, all at k = 0
    pub atom_scales: Vec<i32>,
    /// blur of the atoms in cube coordinates
    pub mollifier: f64,
    /// number of random sparse coefficient vectors synthesized through ψ
    pub syntheses: usize,
    /// nonzero coefficients per synthesis
    pub nonzeros: usize,
    /// indices the random coefficients are drawn from
    pub synthesis_window: TruncationWindow,
    pub seed: u64,
}

impl TestFamily {
    pub fn default_for(dim: usize) -> Result<Self> {
        Ok(TestFamily {
            atom_scales: vec![-1, 0, 1],
            mollifier: 0.125,
            syntheses: 3,
            nonzeros: 2,
            synthesis_window: TruncationWindow::uniform(0, 0, vec![(-1, 1); dim])?,
            seed: 0x0e_b3d,
        })
    }

    pub fn len(&self) -> usize {
        self.atom_scales.len() + self.syntheses
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sampling grid and auxiliary frame. Each test function is analyzed on its
/// own window: scales j₀ + `scales`, where j₀ is the function's own scale,
/// and per scale the k covering its numerical support plus `margin` steps.
#[derive(Clone, Debug)]
pub struct EmbeddingSetup {
    pub grid: GridSpec,
    pub aux: Generator,
    pub scales: (i32, i32),
    pub margin: i64,
}

impl EmbeddingSetup {
    /// Meyer partition of order 3 for `d`.
    pub fn meyer(d: &DilationInfo, grid: GridSpec, scales: (i32, i32), margin: i64) -> Result<Self> {
        Ok(EmbeddingSetup {
            grid,
            aux: Generator::meyer_partition(d, 3)?,
            scales,
            margin,
        })
    }

    /// Settings that resolve the default family under isotropic dilations in
    /// the plane: spacing 1/32 on [−10, 10]², scales j₀−4..j₀+5, margin 5.
    /// Coarser grids or a half-width below 10 let syntheses trip the gate.
    pub fn standard(d: &DilationInfo) -> Result<Self> {
        let grid = GridSpec::symmetric(d.dimension, 641, 1.0 / 32.0);
        Self::meyer(d, grid, (-4, 5), 5)
    }

    /// Analysis window for a function of scale `j0`, clipped to the grid:
    /// the analysis is periodic, so k beyond the grid would alias.
    pub fn window_for(&self, d: &DilationInfo, f: &GridFunction, j0: i32) -> Result<TruncationWindow> {
        let (lo, hi) = support_box(f, SUPPORT_THRESHOLD);
        let (j_min, j_max) = (j0 + self.scales.0, j0 + self.scales.1);
        let wide = TruncationWindow::footprint(d, j_min, j_max, &lo, &hi, self.margin)?;
        let grid = TruncationWindow::footprint(d, j_min, j_max, &self.grid.origin, &self.grid.upper(), 0)?;
        let k_boxes = wide
            .spec()
            .k_boxes
            .iter()
            .zip(&grid.spec().k_boxes)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x.0.max(y.0), x.1.min(y.1))).collect())
            .collect();
        TruncationWindow::new(WindowSpec { j_min, j_max, k_boxes })
    }
}

/// samples below this fraction of the peak count as outside the support
const SUPPORT_THRESHOLD: f64 = 1e-6;

/// Bounding box of the samples with |f| ≥ threshold·max|f|.
fn support_box(f: &GridFunction, threshold: f64) -> (Vec<f64>, Vec<f64>) {
    let n = f.dim();
    let cut = threshold * f.max_abs();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut x = vec![0.0; n];
    for (flat, v) in f.values.iter().enumerate() {
        if v.norm() >= cut && cut > 0.0 {
            f.spec.point(flat, &mut x);
            for i in 0..n {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
        }
    }
    if lo[0] > hi[0] {
        return (vec![0.0; n], vec![0.0; n]);
    }
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub label: String,
    pub lq: f64,
    pub hp: f64,
    pub ratio: f64,
    /// ratio / M
    pub k: f64,
}

/// Ratio of a rescaled atom against the scale-0 atom, compared with the
/// exact factor b^{j(1/p − 1/q)} that the H^p proxy's dilation invariance
/// predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityCheck {
    pub j: i32,
    pub measured: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub p: f64,
    pub q: f64,
    pub rows: Vec<EmbeddingRow>,
    pub c_opt_estimate: f64,
    pub m_factor: f64,
    pub k_estimate: f64,
    /// max/min of the per-function K
    pub k_spread: f64,
    pub homogeneity: Vec<HomogeneityCheck>,
}

impl EmbeddingReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["label", "Lq", "Hp_proxy", "ratio", "K"])?;
        for r in &self.rows {
            wr.write_record(&[
                r.label.clone(),
                format!("{:.12e}", r.lq),
                format!("{:.12e}", r.hp),
                format!("{:.12e}", r.ratio),
                format!("{:.12e}", r.k),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn test_functions(
    psi: &Generator,
    d: &DilationInfo,
    p: f64,
    setup: &EmbeddingSetup,
    family: &TestFamily,
) -> Result<Vec<(String, i32, GridFunction)>> {
    let n = d.dimension;
    let mut out = Vec::with_capacity(family.len());
    for &j in &family.atom_scales {
        let idx = LatticeIndex::new(j, vec![0; n]);
        out.push((
            format!("atom_j{j}"),
            j,
            cube_atom(d, &idx, p, family.mollifier, &setup.grid)?,
        ));
    }
    if family.syntheses > 0 {
        let sys = FrameSystem::self_dual(psi.clone(), d.clone(), family.synthesis_window.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(family.seed);
        let size = family.synthesis_window.len();
        let take = family.nonzeros.min(size);
        for r in 0..family.syntheses {
            let mut c = CoefficientSequence::zeros(family.synthesis_window.clone());
            for i in sample(&mut rng, size, take).into_iter() {
                let v: f64 = StandardNormal.sample(&mut rng);
                c.values[i] = Complex64::new(v, 0.0);
            }
            let j0 = family.synthesis_window.spec().j_min;
            out.push((format!("synth_{r}"), j0, synthesis(&sys, &c, &setup.grid)?));
        }
    }
    Ok(out)
}

/// Scan the family: per test function ‖f‖_{L^q} / ‖f‖_{H^p proxy}, the
/// largest ratio as C_opt estimate, and K = C_opt / M with M the pair
/// constant ‖ψ‖ + max‖φ‖ over the given duals (ψ itself when none).
#[allow(clippy::too_many_arguments)]
pub fn embedding_scan(
    psi: &Generator,
    duals: &[GridFunction],
    d: &DilationInfo,
    p: f64,
    q: f64,
    setup: &EmbeddingSetup,
    family: &TestFamily,
    params: &MolecularParams,
) -> Result<EmbeddingReport> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidExponent(p));
    }
    if !(q > p) {
        return Err(Error::InvalidArgument(format!(
            "embedding needs p < q, got p = {p}, q = {q}"
        )));
    }
    if family.is_empty() {
        return Err(Error::InvalidArgument("test family is empty".into()));
    }
    let psi_norm = molecular_norm(psi, d, params)?;
    let mut dual_norm = if duals.is_empty() { psi_norm } else { 0.0 };
    for phi in duals {
        dual_norm = dual_norm.max(molecular_norm(&Generator::sampled(phi.clone()), d, params)?);
    }
    let m_factor = psi_norm + dual_norm;
    let functions = test_functions(psi, d, p, setup, family)?;
    let measured: Vec<Result<(f64, f64)>> = par::map_slice(&functions, |(label, j0, f)| {
        let lq = lq_norm(f, q)?;
        let window = setup.window_for(d, f, *j0)?;
        let (hp, _) = hp_proxy(f, d, p, &window, &setup.aux)?;
        if hp == 0.0 {
            return Err(Error::ZeroNorm(format!("H^p proxy of {label}")));
        }
        Ok((lq, hp))
    });
    let mut rows = Vec::with_capacity(functions.len());
    for ((label, _, _), m) in functions.iter().zip(measured) {
        let (lq, hp) = m?;
        let ratio = lq / hp;
        rows.push(EmbeddingRow {
            label: label.clone(),
            lq,
            hp,
            ratio,
            k: ratio / m_factor,
        });
    }
    let c_opt_estimate = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let lowest = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let base = family.atom_scales.iter().position(|&j| j == 0).map(|i| rows[i].ratio);
    let homogeneity = match base {
        Some(r0) => family
            .atom_scales
            .iter()
            .zip(&rows)
            .filter(|(j, _)| **j != 0)
            .map(|(&j, row)| {
                let measured = row.ratio / r0;
                let predicted = d.determinant_abs.powf(j as f64 * (1.0 / p - 1.0 / q));
                HomogeneityCheck {
                    j,
                    measured,
                    predicted,
                    rel_error: (measured / predicted - 1.0).abs(),
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(EmbeddingReport {
        p,
        q,
        c_opt_estimate,
        m_factor,
        k_estimate: c_opt_estimate / m_factor,
        k_spread: c_opt_estimate / lowest,
        rows,
        homogeneity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_i() -> DilationInfo {
        DilationInfo::diagonal(&[2.0, 2.0]).unwrap()
    }

    #[test]
    fn lq_of_one_cell() {
        let spec = GridSpec::symmetric(2, 5, 0.5);
        let mut f = GridFunction::zeros(spec);
        f.values[12] = Complex64::new(1.0, 0.0);
        assert_relative_eq!(lq_norm(&f, 2.0).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(lq_norm(&f, 1.0).unwrap(), 0.25, epsilon = 1e-15);
        assert_eq!(lq_norm(&f, f64::INFINITY).unwrap(), 1.0);
        assert!(matches!(lq_norm(&f, 0.0), Err(Error::InvalidExponent(_))));
    }

    #[test]
    fn mexican_hat_l2_matches_plancherel() {
        // ‖ψ‖² = (2π)^{−2} ∫ (2π|ξ|² e^{−|ξ|²/2})² dξ = 2π
        let grid = GridSpec::symmetric(2, 241, 0.1);
        let f = grid.sample(|x| Generator::mexican_hat_2d().eval_fn()(x));
        let want = (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(lq_norm(&f, 2.0).unwrap(), want, max_relative = 1e-4);
    }

    #[test]
    fn atoms_have_mean_zero_and_unit_l1() {
        let d = two_i();
        let grid = GridSpec::symmetric(2, 161, 1.0 / 32.0);
        for j in [0, 1] {
            let f = cube_atom(&d, &LatticeIndex::new(j, vec![0, 0]), 1.0, 0.125, &grid).unwrap();
            let mean: Complex64 = f.values.iter().sum::<Complex64>() * grid.cell_volume();
            assert!(mean.norm() < 1e-10);
            // mollification only shaves mass off the jumps
            let l1 = lq_norm(&f, 1.0).unwrap();
            assert!(l1 > 0.7 && l1 < 1.0 + 1e-9, "{l1}");
        }
    }

    #[test]
    fn atoms_are_dilation_covariant() {
        let d = two_i();
        let grid = GridSpec::symmetric(2, 41, 0.1);
        let p = 2.0 / 3.0;
        let a0 = |x: &[f64]| {
            let g = GridSpec::new(x.to_vec(), vec![1.0, 1.0], vec![1, 1]).unwrap();
            cube_atom(&d, &LatticeIndex::new(0, vec![0, 0]), p, 0.125, &g)
                .unwrap()
                .values[0]
        };
        let a1 = cube_atom(&d, &LatticeIndex::new(1, vec![0, 0]), p, 0.125, &grid).unwrap();
        let mut x = vec![0.0; 2];
        for flat in (0..grid.len()).step_by(37) {
            grid.point(flat, &mut x);
            let want = a0(&[2.0 * x[0], 2.0 * x[1]]) * 4f64.powf(1.0 / p);
            assert!((a1.values[flat] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn atom_arguments_are_checked() {
        let d = two_i();
        let grid = GridSpec::symmetric(1, 11, 0.1);
        assert!(cube_atom(&d, &LatticeIndex::new(0, vec![0, 0]), 1.0, 0.1, &grid).is_err());
        let grid = GridSpec::symmetric(2, 11, 0.1);
        assert!(cube_atom(&d, &LatticeIndex::new(0, vec![0, 0]), 1.0, 0.0, &grid).is_err());
    }

    fn small_setup() -> (DilationInfo, EmbeddingSetup) {
        let d = two_i();
        let setup = EmbeddingSetup::meyer(&d, GridSpec::symmetric(2, 257, 1.0 / 16.0), (-4, 5), 5).unwrap();
        (d, setup)
    }

    #[test]
    fn proxy_of_zero_and_scaling() {
        let (d, setup) = small_setup();
        let zero = GridFunction::zeros(setup.grid.clone());
        let w = TruncationWindow::uniform(0, 0, vec![(0, 0), (0, 0)]).unwrap();
        assert_eq!(hp_proxy_norm(&zero, &d, 1.0, &w, &setup.aux).unwrap(), 0.0);

        let f = cube_atom(&d, &LatticeIndex::new(0, vec![0, 0]), 1.0, 0.25, &setup.grid).unwrap();
        let w = setup.window_for(&d, &f, 0).unwrap();
        let a = hp_proxy_norm(&f, &d, 1.0, &w, &setup.aux).unwrap();
        let b = hp_proxy_norm(&f.scaled(Complex64::new(0.0, -3.0)), &d, 1.0, &w, &setup.aux).unwrap();
        assert!(a > 0.0);
        assert_relative_eq!(b, 3.0 * a, max_relative = 1e-9);
    }

    #[test]
    fn normalized_atoms_have_comparable_proxies() {
        let (d, setup) = small_setup();
        let norms: Vec<f64> = [0, 1]
            .iter()
            .map(|&j| {
                let f = cube_atom(&d, &LatticeIndex::new(j, vec![0, 0]), 1.0, 0.25, &setup.grid).unwrap();
                let w = setup.window_for(&d, &f, j).unwrap();
                hp_proxy_norm(&f, &d, 1.0, &w, &setup.aux).unwrap()
            })
            .collect();
        let r = norms[1] / norms[0];
        assert!(r > 0.8 && r < 1.25, "{norms:?}");
    }

    #[test]
    fn narrow_window_trips_the_gate() {
        let (d, setup) = small_setup();
        let f = cube_atom(&d, &LatticeIndex::new(0, vec![0, 0]), 1.0, 0.25, &setup.grid).unwrap();
        let w = TruncationWindow::uniform(0, 1, vec![(0, 0), (0, 0)]).unwrap();
        assert!(matches!(
            hp_proxy_norm(&f, &d, 1.0, &w, &setup.aux),
            Err(Error::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn scan_contract() {
        let (d, setup) = small_setup();
        let psi = Generator::mexican_hat_2d();
        let params = MolecularParams::new(2.0, 0);
        let mut fam = TestFamily::default_for(2).unwrap();
        fam.atom_scales = vec![0];
        fam.mollifier = 0.25;
        fam.syntheses = 1;
        let r = embedding_scan(&psi, &[], &d, 1.0, 2.0, &setup, &fam, &params).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.ratio.is_finite() && row.ratio > 0.0));
        let max = r.rows.iter().map(|row| row.ratio).fold(0.0, f64::max);
        assert_eq!(r.c_opt_estimate, max);
        assert_relative_eq!(r.k_estimate * r.m_factor, r.c_opt_estimate, max_relative = 1e-12);
        assert!(r.k_spread >= 1.0);
        assert!(r.homogeneity.is_empty());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .starts_with("label,Lq,Hp_proxy,ratio,K\n"));

        assert!(matches!(
            embedding_scan(&psi, &[], &d, 2.0, 2.0, &setup, &fam, &params),
            Err(Error::InvalidArgument(_))
        ));
        fam.atom_scales.clear();
        fam.nonzeros = 0;
        assert!(matches!(
            embedding_scan(&psi, &[], &d, 1.0, 2.0, &setup, &fam, &params),
            Err(Error::ZeroNorm(_))
        ));
        fam.syntheses = 0;
        assert!(embedding_scan(&psi, &[], &d, 1.0, 2.0, &setup, &fam, &params).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pruning_stays_within_budget(
            vals in prop::collection::vec(-3.0f64..3.0, 18),
            tiny in prop::collection::vec(-1e-4f64..1e-4, 18),
            p in 0.5f64..2.0,
        ) {
            let d = two_i();
            let w = TruncationWindow::uniform(0, 1, vec![(-1, 1), (-1, 1)]).unwrap();
            let values: Vec<Complex64> = vals
                .iter()
                .zip(&tiny)
                .enumerate()
                .map(|(i, (v, t))| Complex64::new(if i % 3 == 0 { *v } else { *t }, 0.0))
                .collect();
            let s = CoefficientSequence::new(w, values).unwrap();
            let budget = 1e-3;
            let full = sequence_norm(&s, p, &d, &SequenceNormMode::Adaptive).unwrap().powf(p);
            let kept = sequence_norm(&prune(&s, p, &d, budget), p, &d, &SequenceNormMode::Adaptive).unwrap().powf(p);
            prop_assert!((full - kept).abs() <= budget * full + 1e-12);
        }
    }
}

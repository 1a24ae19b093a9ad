//! Calderón sums D(ξ) = Σ_j |ĝ((A*)^{−j}ξ)|², the incompatibility index
//! 𝒢 = ‖1 − D‖_∞, shear sweeps and the asymptotic conjecture fit.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{EvalFn, Generator, GeneratorKind};
use crate::geometry::{kappa_2x2, DilationInfo};
use crate::par;
use crate::stats::linear_fit;

pub const DEFAULT_J_MAX: i32 = 12;
/// Extra scales on each side used for the tail estimate.
pub const TAIL_TERMS: i32 = 8;

/// How |ĝ|² is scaled before summing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Partition generators are left alone, others use the isotropic reference.
    #[default]
    Auto,
    None,
    /// Scale so that sup D = 1 under the reference dilation 2I.
    IsotropicReference,
    Factor(f64),
}

/// Frequency grid over one fundamental shell of A*.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    /// radial samples per shell (one dilation step)
    pub radial: usize,
    /// directions (angles in 2D)
    pub angular: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            radial: 64,
            angular: 128,
        }
    }
}

impl FrequencyGrid {
    /// Twice as fine in both directions; contains every original point.
    pub fn refined(&self) -> Self {
        FrequencyGrid {
            radial: self.radial * 2,
            angular: self.angular * 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ObstructionReport {
    pub grid: FrequencyGrid,
    pub inf_d: f64,
    pub sup_d: f64,
    pub g_index: f64,
    pub j_truncation: i32,
    /// largest contribution of the next TAIL_TERMS scales on either side
    pub tail_estimate: f64,
    /// factor applied to |ĝ|²
    pub normalization: f64,
    pub points: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Powers (A*)^{−j}, j = −J..=J, indexed by j + J.
struct AdjointPowers {
    j_max: i32,
    mats: Vec<DMatrix<f64>>,
}

impl AdjointPowers {
    fn new(adj: &DMatrix<f64>, j_max: i32) -> Result<Self> {
        let inv = adj.clone().try_inverse().ok_or(Error::Singular)?;
        let n = adj.nrows();
        let mut mats = vec![DMatrix::identity(n, n); (2 * j_max + 1) as usize];
        for j in 1..=j_max {
            let c = j_max as usize;
            mats[c + j as usize] = &inv * &mats[c + j as usize - 1];
            mats[c - j as usize] = adj * &mats[c - j as usize + 1];
        }
        Ok(AdjointPowers { j_max, mats })
    }

    fn get(&self, j: i32) -> &DMatrix<f64> {
        &self.mats[(j + self.j_max) as usize]
    }
}

fn term(f: &EvalFn, m: &DMatrix<f64>, xi: &[f64]) -> f64 {
    let eta = m * DVector::from_column_slice(xi);
    f(eta.as_slice()).norm_sqr()
}

/// (truncated sum over |j| ≤ j_max, tail over j_max < |j| ≤ j_max + TAIL_TERMS)
fn sum_with_tail(f: &EvalFn, pw: &AdjointPowers, j_max: i32, xi: &[f64]) -> (f64, f64) {
    let mut core = 0.0;
    let mut tail = 0.0;
    for j in -pw.j_max..=pw.j_max {
        let v = term(f, pw.get(j), xi);
        if j.abs() <= j_max {
            core += v;
        } else {
            tail += v;
        }
    }
    (core, tail)
}

fn raw_calderon(g: &Generator, adj: &DMatrix<f64>, xi: &[f64], j_max: i32) -> Result<f64> {
    if xi.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroFrequency);
    }
    if j_max < 1 {
        return Err(Error::InvalidArgument("J_max must be at least 1".into()));
    }
    let pw = AdjointPowers::new(adj, j_max)?;
    let f = g.fourier_fn();
    Ok(sum_with_tail(&f, &pw, j_max, xi).0)
}

/// Σ_{|j| ≤ J_max} c·|ĝ((A*)^{−j}ξ)|² with the normalization factor c.
pub fn calderon_sum(
    g: &Generator,
    d: &DilationInfo,
    xi: &[f64],
    j_max: i32,
    normalization: Normalization,
) -> Result<f64> {
    let c = normalization_factor(g, normalization)?;
    Ok(c * raw_calderon(g, &d.matrix.transpose(), xi, j_max)?)
}

fn is_partition(g: &Generator) -> bool {
    matches!(g.kind(), GeneratorKind::MeyerPartition { .. })
}

/// Factor c applied to |ĝ|².
pub fn normalization_factor(g: &Generator, normalization: Normalization) -> Result<f64> {
    match normalization {
        Normalization::None => Ok(1.0),
        Normalization::Factor(c) if c > 0.0 && c.is_finite() => Ok(c),
        Normalization::Factor(c) => Err(Error::InvalidArgument(format!("normalization factor {c}"))),
        Normalization::Auto if is_partition(g) => Ok(1.0),
        Normalization::Auto | Normalization::IsotropicReference => {
            let n = g.dim();
            let reference = DilationInfo::diagonal(&vec![2.0; n])?;
            let raw = evaluate_shell(g, &reference, FrequencyGrid::default(), DEFAULT_J_MAX, 1.0)?;
            if !(raw.sup_d > 0.0) {
                return Err(Error::ZeroNorm(format!(
                    "{} has a vanishing Calderón sum under the reference dilation",
                    g.name()
                )));
            }
            Ok(1.0 / raw.sup_d)
        }
    }
}

/// Unit directions: angles in 2D, Fibonacci sphere in 3D, seeded Gaussian
/// directions otherwise.
fn directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|a| {
                let t = 2.0 * PI * a as f64 / count as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0xd1ec);
            (0..count)
                .map(|_| {
                    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        }
    }
}

/// Points of the shell between (A*)^{−1}Γ and Γ, Γ the unit sphere of the
/// shape norm adapted to A*: along direction ω the radius runs over
/// (1/‖A*ω‖, 1/‖ω‖], log-uniformly with fractions i/radial, i = 1..=radial.
/// Since the full sum is A*-invariant, this shell sees every value of D.
fn shell_points(adj: &DilationInfo, grid: FrequencyGrid) -> Vec<Vec<f64>> {
    let n = adj.dimension;
    let dirs = directions(n, grid.angular);
    let a = &adj.matrix;
    let mut pts = Vec::with_capacity(dirs.len() * grid.radial);
    for w in &dirs {
        let hi = 1.0 / adj.shape_norm_sq(w).sqrt();
        let aw = a * DVector::from_column_slice(w);
        let lo = 1.0 / adj.shape_norm_sq(aw.as_slice()).sqrt();
        for i in 1..=grid.radial {
            let r = lo * (hi / lo).powf(i as f64 / grid.radial as f64);
            pts.push(w.iter().map(|v| v * r).collect());
        }
    }
    pts
}

fn evaluate_shell(
    g: &Generator,
    d: &DilationInfo,
    grid: FrequencyGrid,
    j_max: i32,
    factor: f64,
) -> Result<ObstructionReport> {
    let adj = d.adjoint()?;
    let pts = shell_points(&adj, grid);
    evaluate_points(g, &adj.matrix, &pts, grid, j_max, factor)
}

fn evaluate_points(
    g: &Generator,
    adj: &DMatrix<f64>,
    pts: &[Vec<f64>],
    grid: FrequencyGrid,
    j_max: i32,
    factor: f64,
) -> Result<ObstructionReport> {
    if j_max < 1 {
        return Err(Error::InvalidArgument("J_max must be at least 1".into()));
    }
    let pw = AdjointPowers::new(adj, j_max + TAIL_TERMS)?;
    let f = g.fourier_fn();
    let vals: Vec<(f64, f64)> = par::map_slice(pts, |xi| {
        let (core, tail) = sum_with_tail(&f, &pw, j_max, xi);
        (core * factor, tail * factor)
    });
    let mut inf_d = f64::INFINITY;
    let mut sup_d: f64 = 0.0;
    let mut tail: f64 = 0.0;
    for (v, t) in &vals {
        inf_d = inf_d.min(*v);
        sup_d = sup_d.max(*v);
        tail = tail.max(*t);
    }
    Ok(ObstructionReport {
        grid,
        inf_d,
        sup_d,
        g_index: (1.0 - inf_d).abs().max((1.0 - sup_d).abs()),
        j_truncation: j_max,
        tail_estimate: tail,
        normalization: factor,
        points: pts.len(),
        warnings: Vec::new(),
    })
}

/// 𝒢(A, g) over the fundamental-shell grid.
pub fn obstruction_index(
    g: &Generator,
    d: &DilationInfo,
    grid: FrequencyGrid,
    j_max: i32,
    normalization: Normalization,
) -> Result<ObstructionReport> {
    if g.dim() != d.dimension {
        return Err(Error::DimensionMismatch(
            "generator and dilation differ in dimension".into(),
        ));
    }
    let factor = normalization_factor(g, normalization)?;
    evaluate_shell(g, d, grid, j_max, factor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearMode {
    /// A(s) = S_s · diag(a, √a), expansive for a > 1.
    CompositeParabolic,
    /// A = S_s itself; not expansive.
    PureShear,
}

/// S_s = [[1, s], [0, 1]].
pub fn shear_matrix(s: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, s, 0.0, 1.0])
}

/// S_s · diag(a, √a) = [[a, s√a], [0, √a]].
pub fn composite_parabolic(s: f64, a: f64) -> DMatrix<f64> {
    shear_matrix(s) * DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, a.sqrt()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s: f64,
    pub kappa: f64,
    pub g_index: f64,
    pub inf_d: f64,
    pub sup_d: f64,
    pub j_max: i32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub mode: ShearMode,
    pub base_scale: f64,
    pub j_max: i32,
    pub grid: FrequencyGrid,
    pub normalization: Normalization,
    /// Required for PureShear.
    pub allow_pure_shear: bool,
    /// |ξ₁| floor for the pure-shear grid.
    pub pure_shear_floor: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: ShearMode::CompositeParabolic,
            base_scale: 4.0,
            j_max: DEFAULT_J_MAX,
            grid: FrequencyGrid::default(),
            normalization: Normalization::Auto,
            allow_pure_shear: false,
            pure_shear_floor: 0.05,
        }
    }
}

pub const PURE_SHEAR_WARNING: &str =
    "pure shear is not expansive: the Calderón sum is scale-independent on the axis xi_1 = 0, which the grid excludes";

/// One row per shear parameter.
pub fn shear_sweep(g: &Generator, s_values: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if g.dim() != 2 {
        return Err(Error::DimensionMismatch("shear sweeps are two-dimensional".into()));
    }
    if cfg.mode == ShearMode::PureShear && !cfg.allow_pure_shear {
        return Err(Error::ShearDegenerate);
    }
    if cfg.mode == ShearMode::CompositeParabolic && !(cfg.base_scale > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "base scale {} must exceed 1",
            cfg.base_scale
        )));
    }
    let factor = normalization_factor(g, cfg.normalization)?;
    let mut rows = Vec::with_capacity(s_values.len());
    for &s in s_values {
        let row = match cfg.mode {
            ShearMode::CompositeParabolic => {
                let m = composite_parabolic(s, cfg.base_scale);
                let d = DilationInfo::new(&m, Default::default())?;
                let rep = evaluate_shell(g, &d, cfg.grid, cfg.j_max, factor)?;
                SweepRow {
                    s,
                    kappa: kappa_2x2(&m),
                    g_index: rep.g_index,
                    inf_d: rep.inf_d,
                    sup_d: rep.sup_d,
                    j_max: cfg.j_max,
                    warning: None,
                }
            }
            ShearMode::PureShear => {
                let m = shear_matrix(s);
                let pts = pure_shear_points(cfg.grid, cfg.pure_shear_floor);
                let rep = evaluate_points(g, &m.transpose(), &pts, cfg.grid, cfg.j_max, factor)?;
                SweepRow {
                    s,
                    kappa: kappa_2x2(&m),
                    g_index: rep.g_index,
                    inf_d: rep.inf_d,
                    sup_d: rep.sup_d,
                    j_max: cfg.j_max,
                    warning: Some(PURE_SHEAR_WARNING.into()),
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Euclidean log-polar grid on 1/8 ≤ |ξ| ≤ 8 with |ξ₁| ≥ floor.
fn pure_shear_points(grid: FrequencyGrid, floor: f64) -> Vec<Vec<f64>> {
    let (lo, hi): (f64, f64) = (0.125, 8.0);
    let mut pts = Vec::new();
    for a in 0..grid.angular {
        let t = 2.0 * PI * a as f64 / grid.angular as f64;
        for i in 0..=grid.radial {
            let r = lo * (hi / lo).powf(i as f64 / grid.radial as f64);
            let p = vec![r * t.cos(), r * t.sin()];
            if p[0].abs() >= floor {
                pts.push(p);
            }
        }
    }
    pts
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["s", "kappa", "G_index", "inf_D", "sup_D", "J_max"])?;
    for r in rows {
        wr.write_record(&[
            format!("{}", r.s),
            format!("{:.12e}", r.kappa),
            format!("{:.12e}", r.g_index),
            format!("{:.12e}", r.inf_d),
            format!("{:.12e}", r.sup_d),
            r.j_max.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Supportive,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConjectureFit {
    #[serde(rename = "C")]
    pub c: f64,
    pub gamma: f64,
    pub r_squared: f64,
    pub verdict: Verdict,
}

/// Fit log(1 − G) = log C − γ log κ over rows with G < 1.
pub fn conjecture_fit(rows: &[SweepRow]) -> Result<ConjectureFit> {
    let usable: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.g_index < 1.0 && r.kappa >= 1.0 && r.g_index.is_finite())
        .collect();
    let mut kappas: Vec<f64> = usable.iter().map(|r| r.kappa).collect();
    kappas.sort_by(f64::total_cmp);
    kappas.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    if kappas.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} distinct kappa values with G < 1; at least 4 are needed",
            kappas.len()
        )));
    }
    let x: Vec<f64> = usable.iter().map(|r| r.kappa.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|r| (1.0 - r.g_index).ln()).collect();
    let fit = linear_fit(&x, &y).ok_or_else(|| Error::InsufficientData("degenerate kappa values".into()))?;
    let gamma = -fit.slope;
    let verdict = if gamma > 0.1 && fit.r_squared >= 0.9 {
        Verdict::Supportive
    } else {
        Verdict::Inconclusive
    };
    Ok(ConjectureFit {
        c: fit.intercept.exp(),
        gamma,
        r_squared: fit.r_squared,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mh() -> Generator {
        Generator::mexican_hat_2d()
    }

    #[test]
    fn meyer_sum_is_one() {
        for diag in [[2.0, 2.0], [2.0, 8.0], [3.0, 5.0]] {
            let d = DilationInfo::diagonal(&diag).unwrap();
            let g = Generator::meyer_partition(&d, 3).unwrap();
            for xi in [[1.0, 0.0], [0.3, -2.0], [-7.0, 0.01]] {
                let v = calderon_sum(&g, &d, &xi, 20, Normalization::None).unwrap();
                assert_relative_eq!(v, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_frequency_rejected() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        assert!(matches!(
            calderon_sum(&mh(), &d, &[0.0, 0.0], 12, Normalization::None),
            Err(Error::ZeroFrequency)
        ));
    }

    #[test]
    fn sum_vanishes_towards_origin() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let v = calderon_sum(&mh(), &d, &[1e-9, 0.0], 12, Normalization::None).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn mexican_hat_sum_closed_form_and_j_independence() {
        // |ψ̂(ξ)|² = 4π² r⁴ e^{−r²}
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let direct: f64 = (-12..=12)
            .map(|j| {
                let r2 = 4f64.powi(-j);
                4.0 * PI * PI * r2 * r2 * (-r2).exp()
            })
            .sum();
        let v = calderon_sum(&mh(), &d, &[1.0, 0.0], 12, Normalization::None).unwrap();
        assert_relative_eq!(v, direct, max_relative = 1e-13);
        let w = calderon_sum(&mh(), &d, &[1.0, 0.0], 20, Normalization::None).unwrap();
        assert!((v - w).abs() < 1e-10);
    }

    #[test]
    fn radial_isotropic_sum_depends_on_radius_only() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let base = calderon_sum(&mh(), &d, &[1.3, 0.0], 12, Normalization::None).unwrap();
        for t in [0.4, 1.9, 3.0, 5.5] {
            let xi = [1.3 * f64::cos(t), 1.3 * f64::sin(t)];
            let v = calderon_sum(&mh(), &d, &xi, 12, Normalization::None).unwrap();
            assert!((v - base).abs() < 1e-10);
        }
    }

    #[test]
    fn shift_by_adjoint_changes_only_boundary_terms() {
        let m = crate::geometry::matrix_from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let d = DilationInfo::new(&m, Default::default()).unwrap();
        let xi = [0.7, -0.4];
        let axi = (d.matrix.transpose() * DVector::from_column_slice(&xi))
            .as_slice()
            .to_vec();
        let a = calderon_sum(&mh(), &d, &xi, 6, Normalization::None).unwrap();
        let b = calderon_sum(&mh(), &d, &axi, 6, Normalization::None).unwrap();
        let f = mh().fourier_fn();
        let adj = d.matrix.transpose();
        let edge = |j: i32| {
            let pw = AdjointPowers::new(&adj, 8).unwrap();
            term(&f, pw.get(j), &xi)
        };
        // D_J(A*ξ) − D_J(ξ) = term(−J−1) − term(J)
        assert_relative_eq!(b - a, edge(-7) - edge(6), epsilon = 1e-13);
    }

    #[test]
    fn more_scales_never_decrease() {
        let d = DilationInfo::diagonal(&[2.0, 4.0]).unwrap();
        let mut last = 0.0;
        for j in 1..10 {
            let v = calderon_sum(&mh(), &d, &[0.5, 0.8], j, Normalization::None).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn meyer_obstruction_is_tiny() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let g = Generator::meyer_partition(&d, 3).unwrap();
        let r = obstruction_index(&g, &d, FrequencyGrid::default(), 12, Normalization::Auto).unwrap();
        assert!(r.g_index <= 1e-6, "{}", r.g_index);
        assert_eq!(r.normalization, 1.0);
    }

    #[test]
    fn mexican_hat_obstruction() {
        let iso = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let r = obstruction_index(&mh(), &iso, FrequencyGrid::default(), 12, Normalization::Auto).unwrap();
        assert!(r.g_index > 0.0);
        assert_relative_eq!(r.sup_d, 1.0, epsilon = 1e-12);
        let ecc = DilationInfo::diagonal(&[2.0, 32.0]).unwrap();
        let r = obstruction_index(&mh(), &ecc, FrequencyGrid::default(), 12, Normalization::Auto).unwrap();
        assert!(r.g_index >= 0.5, "{}", r.g_index);
    }

    #[test]
    fn refinement_does_not_lower_index() {
        let d = DilationInfo::diagonal(&[2.0, 8.0]).unwrap();
        let g = FrequencyGrid {
            radial: 16,
            angular: 32,
        };
        let a = obstruction_index(&mh(), &d, g, 12, Normalization::Auto).unwrap();
        let b = obstruction_index(&mh(), &d, g.refined(), 12, Normalization::Auto).unwrap();
        assert!(b.g_index >= a.g_index - 1e-12);
    }

    #[test]
    fn composite_kappa() {
        let m = composite_parabolic(0.0, 4.0);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 2.0]));
        assert_relative_eq!(kappa_2x2(&m), 2.0, epsilon = 1e-14);
        let s: f64 = 3.0;
        assert_relative_eq!(
            kappa_2x2(&shear_matrix(s)),
            ((s * s + 2.0) + s * (s * s + 4.0).sqrt()) / 2.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn pure_shear_requires_flag() {
        let cfg = SweepConfig {
            mode: ShearMode::PureShear,
            ..Default::default()
        };
        assert!(matches!(shear_sweep(&mh(), &[1.0], &cfg), Err(Error::ShearDegenerate)));
        let cfg = SweepConfig {
            allow_pure_shear: true,
            ..cfg
        };
        let rows = shear_sweep(&mh(), &[1.0], &cfg).unwrap();
        assert!(rows[0].warning.is_some());
    }

    #[test]
    fn planted_conjecture_recovered() {
        let rows: Vec<SweepRow> = [1.5, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&k: &f64| SweepRow {
                s: 0.0,
                kappa: k,
                g_index: 1.0 - 2.0 * k.powf(-0.5),
                inf_d: 0.0,
                sup_d: 0.0,
                j_max: 12,
                warning: None,
            })
            .collect();
        let fit = conjecture_fit(&rows).unwrap();
        assert_relative_eq!(fit.c, 2.0, max_relative = 1e-10);
        assert_relative_eq!(fit.gamma, 0.5, max_relative = 1e-10);
        assert_eq!(fit.verdict, Verdict::Supportive);
        let flat: Vec<SweepRow> = rows
            .iter()
            .map(|r| SweepRow {
                g_index: 0.3,
                ..r.clone()
            })
            .collect();
        let fit = conjecture_fit(&flat).unwrap();
        assert!(fit.gamma.abs() < 1e-12);
        assert_eq!(fit.verdict, Verdict::Inconclusive);
        assert!(matches!(conjecture_fit(&rows[..3]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn sweep_csv_header() {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "s,kappa,G_index,inf_D,sup_D,J_max\n");
    }
}

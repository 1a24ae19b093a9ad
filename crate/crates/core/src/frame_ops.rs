//! Inner products, cross-Gram matrices, the mixed frame operator and
//! Neumann-series inversion on a truncation window.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::grid::fft_nd;
use crate::generators::io::{read_tagged, write_tagged};
use crate::generators::{dilate_translate, fft_transform, ifft_transform, Generator, GridFunction, GridSpec};
use crate::geometry::{matrix_to_rows, DilationInfo};
use crate::lattice::{
    almost_diagonal_fit, AlmostDiagonalFit, CoefficientSequence, LatticeIndex, TruncationWindow, WeightParams,
};
use crate::par;
use crate::quadrature::{integrate_doubling, QuadBox};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Fraction of coefficient energy allowed on the window boundary.
pub const BOUNDARY_ENERGY_LIMIT: f64 = 0.01;
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;
/// Below this size a stalled power iteration falls back to a dense SVD.
pub const POWER_SVD_FALLBACK: usize = 1024;
pub const POWER_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InnerMethod {
    /// Fourier when both transforms are closed-form, spatial otherwise.
    #[default]
    Auto,
    Fourier,
    Spatial,
}

/// Synthesizer ψ, analyzer φ, dilation and window.
#[derive(Clone, Debug)]
pub struct FrameSystem {
    pub synthesizer: Generator,
    pub analyzer: Generator,
    pub dilation: DilationInfo,
    pub window: TruncationWindow,
}

impl FrameSystem {
    pub fn new(
        synthesizer: Generator,
        analyzer: Generator,
        dilation: DilationInfo,
        window: TruncationWindow,
    ) -> Result<Self> {
        let n = dilation.dimension;
        if synthesizer.dim() != n || analyzer.dim() != n || window.dim() != n {
            return Err(Error::DimensionMismatch(
                "generators, dilation and window must share a dimension".into(),
            ));
        }
        Ok(FrameSystem {
            synthesizer,
            analyzer,
            dilation,
            window,
        })
    }

    /// ψ = φ.
    pub fn self_dual(g: Generator, dilation: DilationInfo, window: TruncationWindow) -> Result<Self> {
        Self::new(g.clone(), g, dilation, window)
    }

    pub fn synth_atom(&self, q: &LatticeIndex) -> Result<Generator> {
        dilate_translate(&self.synthesizer, &self.dilation, q.j, &q.k)
    }

    pub fn analysis_atom(&self, q: &LatticeIndex) -> Result<Generator> {
        dilate_translate(&self.analyzer, &self.dilation, q.j, &q.k)
    }

    pub fn swapped(&self) -> Self {
        FrameSystem {
            synthesizer: self.analyzer.clone(),
            analyzer: self.synthesizer.clone(),
            dilation: self.dilation.clone(),
            window: self.window.clone(),
        }
    }
}

/// m_{Q,P} = ⟨ψ_P, φ_Q⟩: rows follow the analyzer, columns the synthesizer.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub window: TruncationWindow,
    pub entries: DMatrix<Complex64>,
    pub synthesizer: String,
    pub analyzer: String,
    pub dilation: Vec<Vec<f64>>,
    pub method: String,
}

impl GramMatrix {
    pub fn from_entries(window: TruncationWindow, entries: DMatrix<Complex64>, label: &str) -> Result<Self> {
        if entries.nrows() != window.len() || entries.ncols() != window.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}×{} entries for a window of {}",
                entries.nrows(),
                entries.ncols(),
                window.len()
            )));
        }
        Ok(GramMatrix {
            window,
            entries,
            synthesizer: label.into(),
            analyzer: label.into(),
            dilation: Vec::new(),
            method: "given".into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn hermitian_defect(&self) -> f64 {
        let m = &self.entries;
        let mut worst: f64 = 0.0;
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn with_entries(&self, entries: DMatrix<Complex64>, method: &str) -> Self {
        GramMatrix {
            window: self.window.clone(),
            entries,
            synthesizer: self.synthesizer.clone(),
            analyzer: self.analyzer.clone(),
            dilation: self.dilation.clone(),
            method: method.into(),
        }
    }
}

pub const MATRIX_MAGIC: &str = "AFMAT v1";

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    window: TruncationWindow,
    rows: usize,
    cols: usize,
    dtype: String,
    #[serde(default)]
    synthesizer: String,
    #[serde(default)]
    analyzer: String,
    #[serde(default)]
    dilation: Vec<Vec<f64>>,
    #[serde(default)]
    method: String,
}

pub fn write_matrix<W: Write>(w: W, g: &GramMatrix) -> Result<()> {
    let header = MatrixHeader {
        format: MATRIX_MAGIC.into(),
        window: g.window.clone(),
        rows: g.entries.nrows(),
        cols: g.entries.ncols(),
        dtype: "c128".into(),
        synthesizer: g.synthesizer.clone(),
        analyzer: g.analyzer.clone(),
        dilation: g.dilation.clone(),
        method: g.method.clone(),
    };
    // row-major payload
    let values: Vec<Complex64> = g.entries.transpose().as_slice().to_vec();
    write_tagged(w, &header, &values)
}

pub fn read_matrix<R: Read>(r: R) -> Result<GramMatrix> {
    let (h, values) = read_tagged(r, |h: &MatrixHeader| {
        if h.format != MATRIX_MAGIC {
            return Err(Error::Format(format!("not an AFMAT v1 file: {:?}", h.format)));
        }
        if h.dtype != "c128" {
            return Err(Error::Format(format!("unsupported dtype {}", h.dtype)));
        }
        Ok(h.rows * h.cols)
    })?;
    let entries = DMatrix::from_row_slice(h.rows, h.cols, &values);
    Ok(GramMatrix {
        window: h.window,
        entries,
        synthesizer: h.synthesizer,
        analyzer: h.analyzer,
        dilation: h.dilation,
        method: h.method,
    })
}

pub fn save_matrix(path: &Path, g: &GramMatrix) -> Result<()> {
    write_matrix(std::io::BufWriter::new(std::fs::File::create(path)?), g)
}

pub fn load_matrix(path: &Path) -> Result<GramMatrix> {
    read_matrix(std::fs::File::open(path)?)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Effective frequency support: (inner gap, outer radius).
fn frequency_band(g: &Generator) -> (f64, f64) {
    let outer = g.band_limit().unwrap_or_else(|| g.frequency_radius());
    (g.frequency_gap().unwrap_or(0.0), outer)
}

/// ⟨f, g⟩ = ∫ f ḡ with relative tolerance `tol` (relative to ‖f‖‖g‖).
pub fn inner_product(f: &Generator, g: &Generator, method: InnerMethod, tol: f64) -> Result<Complex64> {
    if f.dim() != g.dim() {
        return Err(Error::DimensionMismatch("inner product of different dimensions".into()));
    }
    let method = match method {
        InnerMethod::Auto if f.has_closed_fourier() && g.has_closed_fourier() => InnerMethod::Fourier,
        InnerMethod::Auto => InnerMethod::Spatial,
        m => m,
    };
    let n = f.dim();
    let (cf, rf) = f.spatial_ball();
    let (cg, rg) = g.spatial_ball();
    let est = match method {
        InnerMethod::Fourier => {
            let (gap_f, out_f) = frequency_band(f);
            let (gap_g, out_g) = frequency_band(g);
            let outer = out_f.min(out_g);
            if outer <= gap_f.max(gap_g) {
                return Ok(ZERO);
            }
            // aliasing: the correlation of f and g must fit in one period
            let extent = dist(&cf, &cg) + rf + rg;
            let h = 2.0 * PI / (1.25 * extent);
            let qb = QuadBox::cube(n, outer, h);
            let ff = f.fourier_fn();
            let gf = g.fourier_fn();
            let est = integrate_doubling(&qb, 4, |xi, out| {
                let a = ff(xi);
                let b = gf(xi);
                let p = a * b.conj();
                out[0] = p.re;
                out[1] = p.im;
                out[2] = a.norm_sqr();
                out[3] = b.norm_sqr();
            });
            let c = (2.0 * PI).powi(-(n as i32));
            scale_estimate(est, c)
        }
        _ => {
            let (_, out_f) = frequency_band(f);
            let (_, out_g) = frequency_band(g);
            let h = 2.0 * PI / (1.25 * (out_f + out_g));
            let center: Vec<f64> = cf.iter().zip(&cg).map(|(a, b)| (a + b) / 2.0).collect();
            let half = dist(&cf, &cg) / 2.0 + rf.max(rg);
            let mut qb = QuadBox::cube(n, half, h);
            qb.center = center;
            let fe = f.eval_fn();
            let ge = g.eval_fn();
            let est = integrate_doubling(&qb, 4, |x, out| {
                let a = fe(x);
                let b = ge(x);
                let p = a * b.conj();
                out[0] = p.re;
                out[1] = p.im;
                out[2] = a.norm_sqr();
                out[3] = b.norm_sqr();
            });
            scale_estimate(est, 1.0)
        }
    };
    let (value, change, scale) = est;
    if change > tol * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::QuadratureNotConverged(format!(
            "inner product of {} and {} changed by {change:.3e} (scale {scale:.3e}) under box doubling",
            f.name(),
            g.name()
        )));
    }
    Ok(value)
}

fn scale_estimate(est: crate::quadrature::DoublingEstimate, c: f64) -> (Complex64, f64, f64) {
    let outer = Complex64::new(est.outer[0], est.outer[1]) * c;
    let inner = Complex64::new(est.inner[0], est.inner[1]) * c;
    let scale = (est.outer[2] * c).max(0.0).sqrt() * (est.outer[3] * c).max(0.0).sqrt();
    (outer, (outer - inner).norm(), scale)
}

/// FFT-friendly length ≥ n (only factors 2, 3, 5).
pub fn fft_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

fn int_matrix(m: &DMatrix<f64>) -> Vec<Vec<i64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].round() as i64).collect())
        .collect()
}

fn int_apply(m: &[Vec<i64>], k: &[i64]) -> Vec<i64> {
    m.iter()
        .map(|row| row.iter().zip(k).map(|(a, b)| a * b).sum())
        .collect()
}

/// Gram matrix of the system; `tol` is the relative quadrature tolerance
/// of the per-entry fallback.
pub fn gram_matrix(sys: &FrameSystem, method: InnerMethod, tol: f64) -> Result<GramMatrix> {
    let closed = sys.synthesizer.has_closed_fourier() && sys.analyzer.has_closed_fourier();
    let fast = closed && sys.dilation.is_integer() && method != InnerMethod::Spatial;
    let (entries, label) = if fast {
        (gram_periodized(sys)?, "fourier-periodized")
    } else {
        (gram_direct(sys, method, tol)?, "direct")
    };
    Ok(GramMatrix {
        window: sys.window.clone(),
        entries,
        synthesizer: sys.synthesizer.name(),
        analyzer: sys.analyzer.name(),
        dilation: matrix_to_rows(&sys.dilation.matrix),
        method: label.into(),
    })
}

fn gram_direct(sys: &FrameSystem, method: InnerMethod, tol: f64) -> Result<DMatrix<Complex64>> {
    let idx = sys.window.indices();
    let n = idx.len();
    let synth: Vec<Generator> = idx.iter().map(|q| sys.synth_atom(q)).collect::<Result<_>>()?;
    let anal: Vec<Generator> = idx.iter().map(|q| sys.analysis_atom(q)).collect::<Result<_>>()?;
    let flat: Vec<Result<Complex64>> = par::map_range(n * n, |e| {
        let (r, c) = (e / n, e % n);
        inner_product(&synth[c], &anal[r], method, tol).map_err(|err| match err {
            Error::QuadratureNotConverged(msg) => {
                Error::QuadratureNotConverged(format!("entry (Q={:?}, P={:?}): {msg}", idx[r], idx[c]))
            }
            other => other,
        })
    });
    let mut m = DMatrix::from_element(n, n, ZERO);
    for (e, v) in flat.into_iter().enumerate() {
        m[(e / n, e % n)] = v?;
    }
    Ok(m)
}

/// Gram assembly for integer dilations with closed-form transforms.
///
/// With J = max(j_P, j_Q) and η = A*^{−J}ξ every entry becomes
/// b^{|Δ|/2} (2π)^{−n} ∫ e^{i⟨m,η⟩} F_Δ(η) dη with an integer vector m and a
/// kernel F_Δ depending only on Δ = j_P − j_Q. Periodizing F_Δ onto the
/// torus turns all entries of one Δ into samples of a single inverse FFT.
fn gram_periodized(sys: &FrameSystem) -> Result<DMatrix<Complex64>> {
    let d = &sys.dilation;
    let n = d.dimension;
    let idx = sys.window.indices();
    let size = idx.len();
    let b = d.determinant_abs;
    let (cpsi, rpsi) = sys.synthesizer.spatial_ball();
    let (cphi, rphi) = sys.analyzer.spatial_ball();
    let (gap_psi, out_psi) = frequency_band(&sys.synthesizer);
    let (gap_phi, out_phi) = frequency_band(&sys.analyzer);
    let psi_hat = sys.synthesizer.fourier_fn();
    let phi_hat = sys.analyzer.fourier_fn();

    // group (Q, P) pairs by Δ
    let mut groups: BTreeMap<i32, Vec<(usize, usize)>> = BTreeMap::new();
    for (r, q) in idx.iter().enumerate() {
        for (c, p) in idx.iter().enumerate() {
            groups.entry(p.j - q.j).or_default().push((r, c));
        }
    }
    let mut m = DMatrix::from_element(size, size, ZERO);
    for (delta, pairs) in groups {
        let steps = delta.unsigned_abs() as i32;
        let adj = d.power(steps).transpose();
        let adj_inv = d.power(-steps).transpose();
        let grow = adj.clone().svd(false, false).singular_values.max();
        let shrink = adj_inv.clone().svd(false, false).singular_values.max();
        // the coarser factor is evaluated at A*^{|Δ|}η
        let (lo, hi) = if delta >= 0 {
            (gap_psi.max(gap_phi / grow), out_psi.min(out_phi * shrink))
        } else {
            (gap_phi.max(gap_psi / grow), out_phi.min(out_psi * shrink))
        };
        if hi <= lo {
            continue;
        }
        let lift = int_matrix(&d.power(steps));
        let mvecs: Vec<Vec<i64>> = pairs
            .iter()
            .map(|&(r, c)| {
                let (kq, kp) = (&idx[r].k, &idx[c].k);
                if delta >= 0 {
                    let a = int_apply(&lift, kq);
                    a.iter().zip(kp).map(|(x, y)| x - y).collect()
                } else {
                    let a = int_apply(&lift, kp);
                    kq.iter().zip(&a).map(|(x, y)| x - y).collect()
                }
            })
            .collect();
        let max_m = mvecs
            .iter()
            .flat_map(|v| v.iter().map(|x| x.unsigned_abs()))
            .max()
            .unwrap_or(0) as f64;
        let spread = d.power(steps).svd(false, false).singular_values.max();
        let corr = if delta >= 0 {
            rpsi + rphi * spread + dist(&cpsi, &cphi) * spread
        } else {
            rphi + rpsi * spread + dist(&cpsi, &cphi) * spread
        };
        let len = fft_size((2.0 * (max_m + corr)).ceil() as usize + 1);
        let step = 2.0 * PI / len as f64;
        let reach = (hi / step).ceil() as i64;
        let side = (2 * reach + 1) as usize;
        let total = side.pow(n as u32);
        // sample F_Δ on the box |s|∞ ≤ reach in parallel, accumulate in order
        let samples: Vec<Complex64> = par::map_range(total, |flat| {
            let mut rem = flat;
            let mut eta = vec![0.0; n];
            for i in (0..n).rev() {
                eta[i] = ((rem % side) as i64 - reach) as f64 * step;
                rem /= side;
            }
            let r2: f64 = eta.iter().map(|v| v * v).sum();
            if r2 > hi * hi || r2 < lo * lo {
                return ZERO;
            }
            let lifted = (&adj * DVector::from_column_slice(&eta)).as_slice().to_vec();
            if delta >= 0 {
                psi_hat(&eta) * phi_hat(&lifted).conj()
            } else {
                psi_hat(&lifted) * phi_hat(&eta).conj()
            }
        });
        let mut torus = vec![ZERO; len.pow(n as u32)];
        for (flat, v) in samples.iter().enumerate() {
            if v.re == 0.0 && v.im == 0.0 {
                continue;
            }
            // same digit order as above: last axis fastest, row-major torus
            let mut rem = flat;
            let mut pos = 0usize;
            let mut stride = 1usize;
            for _ in 0..n {
                let s = (rem % side) as i64 - reach;
                rem /= side;
                pos += s.rem_euclid(len as i64) as usize * stride;
                stride *= len;
            }
            torus[pos] += v;
        }
        fft_nd(&mut torus, &vec![len; n], true);
        let scale = b.powf(steps as f64 / 2.0) / (len as f64).powi(n as i32);
        for (&(r, c), mv) in pairs.iter().zip(&mvecs) {
            let mut pos = 0usize;
            for v in mv {
                pos = pos * len + v.rem_euclid(len as i64) as usize;
            }
            m[(r, c)] = torus[pos] * scale;
        }
    }
    Ok(m)
}

/// ⟨f, φ_Q⟩ for every Q in the window, computed from one FFT of f.
pub fn analysis(sys: &FrameSystem, f: &GridFunction) -> Result<CoefficientSequence> {
    let n = sys.dilation.dimension;
    if f.dim() != n {
        return Err(Error::DimensionMismatch(
            "function and system differ in dimension".into(),
        ));
    }
    let fhat = fft_transform(f);
    let fspec = fhat.spec.clone();
    let axes: Vec<Vec<f64>> = (0..n).map(|i| fspec.axis(i)).collect();
    let c = fspec.cell_volume() / (2.0 * PI).powi(n as i32);
    let idx = sys.window.indices();
    let mut values = vec![ZERO; idx.len()];
    for j in sys.window.scales() {
        let base = dilate_translate(&sys.analyzer, &sys.dilation, j, &vec![0; n])?;
        let bf = base.fourier_fn();
        let weighted: Vec<Complex64> = par::map_range(fspec.len(), |flat| {
            let v = fhat.values[flat];
            if v.re == 0.0 && v.im == 0.0 {
                return ZERO;
            }
            v * bf(&fspec.point_vec(flat)).conj()
        });
        let inv = sys.dilation.power(-j);
        let members: Vec<usize> = (0..idx.len()).filter(|&i| idx[i].j == j).collect();
        let shifts: Vec<Vec<f64>> = members.iter().map(|&i| translate(&inv, &idx[i].k)).collect();
        if let Some((fine, slots)) = refined_slots(&f.spec, &shifts) {
            // translates sit on a (refined, periodic) grid: one inverse FFT
            let hat = GridFunction::new(fspec.clone(), weighted)?;
            let hat = if fine.extents == f.spec.extents {
                hat
            } else {
                resize_spectrum(&hat, &fine.extents)
            };
            let corr = ifft_transform(&hat, &f.spec.origin);
            for (&i, slot) in members.iter().zip(slots) {
                values[i] = corr.values[slot];
            }
            continue;
        }
        let coeffs: Vec<Complex64> = par::map_slice(&shifts, |y| {
            // conj φ̂_Q carries e^{+i⟨y,ξ⟩}
            contract(&weighted, &fspec.extents, &axes, y, 1.0) * c
        });
        for (&i, v) in members.iter().zip(coeffs) {
            values[i] = v;
        }
    }
    CoefficientSequence::new(sys.window.clone(), values)
}

fn translate(inv: &DMatrix<f64>, k: &[i64]) -> Vec<f64> {
    let k = DVector::from_iterator(k.len(), k.iter().map(|&v| v as f64));
    (inv * k).as_slice().to_vec()
}

/// Flat index of the grid point congruent to `y` modulo the grid period,
/// if `y` lies on the lattice of grid points.
fn grid_slot(spec: &GridSpec, y: &[f64]) -> Option<usize> {
    let mut flat = 0usize;
    #[allow(clippy::needless_range_loop)]
    for i in 0..spec.dim() {
        let t = (y[i] - spec.origin[i]) / spec.spacing[i];
        let r = t.round();
        if (t - r).abs() > 1e-9 * (1.0 + r.abs()) {
            return None;
        }
        let len = spec.extents[i] as i64;
        flat = flat * spec.extents[i] + (r as i64).rem_euclid(len) as usize;
    }
    Some(flat)
}

/// Largest refined grid we are willing to transform.
const MAX_REFINED_POINTS: usize = 1 << 24;

/// Smallest m ≤ 8 such that every translate lies on the grid refined by m
/// along each axis; returns the refined spec and the slots.
fn refined_slots(spec: &GridSpec, ys: &[Vec<f64>]) -> Option<(GridSpec, Vec<usize>)> {
    for m in 1..=8usize {
        let fine = GridSpec {
            origin: spec.origin.clone(),
            spacing: spec.spacing.iter().map(|h| h / m as f64).collect(),
            extents: spec.extents.iter().map(|e| e * m).collect(),
        };
        if fine.len() > MAX_REFINED_POINTS {
            return None;
        }
        let slots: Option<Vec<usize>> = ys.iter().map(|y| grid_slot(&fine, y)).collect();
        if let Some(slots) = slots {
            return Some((fine, slots));
        }
    }
    None
}

/// Embed centred frequency samples into a larger centred grid with the
/// same spacing (zero padding), or crop them back.
fn resize_spectrum(src: &GridFunction, extents: &[usize]) -> GridFunction {
    let n = extents.len();
    let sspec = &src.spec;
    let spec = GridSpec {
        origin: (0..n).map(|i| -((extents[i] / 2) as f64) * sspec.spacing[i]).collect(),
        spacing: sspec.spacing.clone(),
        extents: extents.to_vec(),
    };
    let mut out = GridFunction::zeros(spec.clone());
    let offsets: Vec<i64> = (0..n)
        .map(|i| (extents[i] / 2) as i64 - (sspec.extents[i] / 2) as i64)
        .collect();
    let mut digits = vec![0usize; n];
    for (flat, v) in src.values.iter().enumerate() {
        sspec.unravel(flat, &mut digits);
        let mut pos = 0usize;
        let mut inside = true;
        for i in 0..n {
            let t = digits[i] as i64 + offsets[i];
            if t < 0 || t >= extents[i] as i64 {
                inside = false;
                break;
            }
            pos = pos * extents[i] + t as usize;
        }
        if inside {
            out.values[pos] = *v;
        }
    }
    out
}

/// Σ_ξ data(ξ) e^{i·sign·⟨y,ξ⟩} over a separable grid, contracting the last
/// axis first.
fn contract(data: &[Complex64], extents: &[usize], axes: &[Vec<f64>], y: &[f64], sign: f64) -> Complex64 {
    let n = extents.len();
    let mut cur: Vec<Complex64> = data.to_vec();
    for axis in (0..n).rev() {
        let len = extents[axis];
        let phases: Vec<Complex64> = axes[axis]
            .iter()
            .map(|xi| Complex64::from_polar(1.0, sign * y[axis] * xi))
            .collect();
        let outer = cur.len() / len;
        let mut next = vec![ZERO; outer];
        for (o, slot) in next.iter_mut().enumerate() {
            let row = &cur[o * len..(o + 1) * len];
            let mut acc = ZERO;
            for (v, p) in row.iter().zip(&phases) {
                acc += v * p;
            }
            *slot = acc;
        }
        cur = next;
    }
    cur[0]
}

/// Σ_Q c_Q ψ_Q sampled on `spec`, synthesized in the Fourier domain.
pub fn synthesis(sys: &FrameSystem, coeffs: &CoefficientSequence, spec: &GridSpec) -> Result<GridFunction> {
    let n = sys.dilation.dimension;
    if coeffs.window != sys.window {
        return Err(Error::DimensionMismatch(
            "coefficients live on a different window".into(),
        ));
    }
    let fspec = spec.frequency_spec();
    let axes: Vec<Vec<f64>> = (0..n).map(|i| fspec.axis(i)).collect();
    let idx = sys.window.indices();
    let mut spectrum = vec![ZERO; fspec.len()];
    for j in sys.window.scales() {
        let members: Vec<usize> = (0..idx.len())
            .filter(|&i| idx[i].j == j && coeffs.values[i].norm_sqr() > 0.0)
            .collect();
        if members.is_empty() {
            continue;
        }
        let inv = sys.dilation.power(-j);
        let shifts: Vec<Vec<f64>> = members.iter().map(|&i| translate(&inv, &idx[i].k)).collect();
        let base = dilate_translate(&sys.synthesizer, &sys.dilation, j, &vec![0; n])?;
        let bf = base.fourier_fn();
        if let Some((fine, slots)) = refined_slots(spec, &shifts) {
            // T_j(ξ) = Σ_k c_k e^{−i⟨y_k,ξ⟩} is one forward FFT of the
            // coefficients placed on the (refined) grid
            let mut placed = GridFunction::zeros(fine.clone());
            let dv = fine.cell_volume();
            for (&i, slot) in members.iter().zip(slots) {
                placed.values[slot] += coeffs.values[i] / dv;
            }
            let mut t = fft_transform(&placed);
            if fine.extents != spec.extents {
                t = resize_spectrum(&t, &fspec.extents);
            }
            let contrib: Vec<Complex64> = par::map_range(fspec.len(), |flat| {
                let tv = t.values[flat];
                if tv.re == 0.0 && tv.im == 0.0 {
                    return ZERO;
                }
                bf(&fspec.point_vec(flat)) * tv
            });
            for (s, v) in spectrum.iter_mut().zip(contrib) {
                *s += v;
            }
            continue;
        }
        // per-member, per-axis phase tables e^{−i y_a ξ_a}
        let tables: Vec<Vec<Vec<Complex64>>> = shifts
            .iter()
            .map(|y| {
                (0..n)
                    .map(|a| {
                        axes[a]
                            .iter()
                            .map(|xi| Complex64::from_polar(1.0, -y[a] * xi))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let ext = fspec.extents.clone();
        let rows = ext[0];
        let per_row = fspec.len() / rows;
        let mut contrib = vec![ZERO; fspec.len()];
        par::for_each_chunk_mut(&mut contrib, per_row, |r, out| {
            let mut digits = vec![0usize; n];
            let mut xi = vec![0.0; n];
            for (c, slot) in out.iter_mut().enumerate() {
                let flat = r * per_row + c;
                fspec.unravel(flat, &mut digits);
                for a in 0..n {
                    xi[a] = axes[a][digits[a]];
                }
                let g = bf(&xi);
                if g.re == 0.0 && g.im == 0.0 {
                    continue;
                }
                let mut t = ZERO;
                for (m, &i) in members.iter().enumerate() {
                    let mut ph = coeffs.values[i];
                    for a in 0..n {
                        ph *= tables[m][a][digits[a]];
                    }
                    t += ph;
                }
                *slot = g * t;
            }
        });
        for (s, v) in spectrum.iter_mut().zip(contrib) {
            *s += v;
        }
    }
    let hat = GridFunction::new(fspec, spectrum)?;
    let mut out = ifft_transform(&hat, &spec.origin);
    out.spec = spec.clone();
    Ok(out)
}

/// Whether `q` sits on the edge of its window (extreme scale or k on a box face).
pub fn on_window_boundary(w: &TruncationWindow, q: &LatticeIndex) -> bool {
    let s = w.spec();
    if q.j == s.j_min || q.j == s.j_max {
        return true;
    }
    match w.k_box(q.j) {
        Some(bx) => q.k.iter().zip(bx).any(|(k, (lo, hi))| k == lo || k == hi),
        None => true,
    }
}

/// Fraction of coefficient energy carried by boundary indices.
pub fn boundary_fraction(c: &CoefficientSequence) -> f64 {
    let mut total = 0.0;
    let mut edge = 0.0;
    for (q, v) in c.window.indices().iter().zip(&c.values) {
        let e = v.norm_sqr();
        total += e;
        if on_window_boundary(&c.window, q) {
            edge += e;
        }
    }
    if total > 0.0 {
        edge / total
    } else {
        0.0
    }
}

/// U_{ψ,φ} f = Σ_Q ⟨f, φ_Q⟩ ψ_Q on f's grid.
pub fn frame_apply(sys: &FrameSystem, f: &GridFunction) -> Result<GridFunction> {
    let coeffs = analysis(sys, f)?;
    let fraction = boundary_fraction(&coeffs);
    if fraction > BOUNDARY_ENERGY_LIMIT {
        return Err(Error::WindowTooSmall { fraction });
    }
    synthesis(sys, &coeffs, &f.spec)
}

/// Largest singular value of `m` by power iteration on mᴴm from a seeded
/// random start.
pub fn spectral_norm(m: &DMatrix<Complex64>, seed: u64) -> Result<f64> {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if m.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(n, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    v /= Complex64::new(v.norm(), 0.0);
    let mh = m.adjoint();
    // below this the estimate is rounding noise and cannot settle
    let floor = 64.0 * f64::EPSILON * m.norm();
    let mut last = 0.0;
    let mut change = f64::INFINITY;
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = m * &v;
        sigma = w.norm();
        let u = &mh * w;
        let un = u.norm();
        if un == 0.0 {
            return Ok(sigma);
        }
        v = u / Complex64::new(un, 0.0);
        change = (sigma - last).abs();
        if change <= POWER_TOL * sigma || change <= floor {
            return Ok(sigma);
        }
        last = sigma;
    }
    // nearly tied top singular values: settle it exactly when affordable
    if n.max(m.nrows()) <= POWER_SVD_FALLBACK {
        log::debug!("power iteration stalled at {sigma:e}, using SVD");
        return Ok(m.clone().svd(false, false).singular_values.max());
    }
    Err(Error::PowerIterationStalled {
        iterations: POWER_MAX_ITER,
        change: change / sigma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Deviation {
    pub spectral: f64,
    pub algebra_proxy: f64,
}

/// E = Id − S/ref_diag.
pub fn deviation_matrix(s: &DMatrix<Complex64>, ref_diag: f64) -> DMatrix<Complex64> {
    let n = s.nrows();
    let mut e = -s / Complex64::new(ref_diag, 0.0);
    for i in 0..n {
        e[(i, i)] += ONE;
    }
    e
}

/// ‖Id − S/ref_diag‖₂ and the C_M constant of the same matrix.
pub fn deviation_from_identity(s: &GramMatrix, ref_diag: f64, d: &DilationInfo, w: WeightParams) -> Result<Deviation> {
    if !(ref_diag > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference diagonal {ref_diag} must be positive"
        )));
    }
    let e = deviation_matrix(&s.entries, ref_diag);
    let spectral = spectral_norm(&e, POWER_SEED)?;
    let fit = almost_diagonal_fit(&e, &s.window, w.delta, w.epsilon, w.p, d)?;
    Ok(Deviation {
        spectral,
        algebra_proxy: fit.c_m,
    })
}

#[derive(Clone, Debug)]
pub struct NeumannResult {
    pub inverse: GramMatrix,
    pub terms_used: usize,
    pub tail_bound: f64,
    /// measured ‖S·S_N⁻¹ − Id‖₂
    pub residual: f64,
}

/// ref⁻¹ Σ_{m=0}^{N} E^m with E = Id − S/ref, by Horner's scheme.
pub fn neumann_series(s: &DMatrix<Complex64>, ref_diag: f64, n_terms: usize) -> DMatrix<Complex64> {
    let e = deviation_matrix(s, ref_diag);
    let size = s.nrows();
    let id = DMatrix::<Complex64>::identity(size, size);
    let mut x = id.clone();
    for _ in 0..n_terms {
        x = &id + &e * x;
    }
    x / Complex64::new(ref_diag, 0.0)
}

/// Smallest N with q^{N+1}/(1−q) < tol, capped at `max_terms`.
pub fn neumann_terms(q: f64, tol: f64, max_terms: usize) -> usize {
    let mut n = 0usize;
    while n < max_terms && q.powi(n as i32 + 1) / (1.0 - q) >= tol {
        n += 1;
    }
    n
}

pub fn neumann_invert(
    s: &GramMatrix,
    ref_diag: f64,
    q_bound: f64,
    tol: f64,
    max_terms: usize,
) -> Result<NeumannResult> {
    if !(q_bound < 1.0 - 1e-9) || q_bound.is_nan() {
        return Err(Error::NotContractive(q_bound));
    }
    let q = q_bound.max(0.0);
    let n = neumann_terms(q, tol, max_terms);
    let inv = neumann_series(&s.entries, ref_diag, n);
    let size = s.dim();
    let resid = &s.entries * &inv - DMatrix::<Complex64>::identity(size, size);
    let residual = spectral_norm(&resid, POWER_SEED)?;
    Ok(NeumannResult {
        inverse: s.with_entries(inv, "neumann"),
        terms_used: n + 1,
        tail_bound: q.powi(n as i32 + 1) / (1.0 - q),
        residual,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    pub c_m_s: f64,
    pub c_m_sinv: f64,
    pub decay_s: Option<f64>,
    pub decay_sinv: Option<f64>,
}

impl DecayReport {
    pub fn from_fits(s: &AlmostDiagonalFit, sinv: &AlmostDiagonalFit) -> Self {
        DecayReport {
            c_m_s: s.c_m,
            c_m_sinv: sinv.c_m,
            decay_s: s.decay_exponent,
            decay_sinv: sinv.decay_exponent,
        }
    }
}

pub fn decay_report(s: &GramMatrix, s_inv: &GramMatrix, d: &DilationInfo, w: WeightParams) -> Result<DecayReport> {
    let a = almost_diagonal_fit(&s.entries, &s.window, w.delta, w.epsilon, w.p, d)?;
    let b = almost_diagonal_fit(&s_inv.entries, &s_inv.window, w.delta, w.epsilon, w.p, d)?;
    Ok(DecayReport::from_fits(&a, &b))
}

/// Dual elements φ*_Q = Σ_P conj((S⁻¹)_{Q,P}) φ_P for the requested indices,
/// so that Σ_Q ⟨f, φ*_Q⟩ ψ_Q reproduces f on the span of the window.
pub fn dual_from_inverse(
    s_inv: &GramMatrix,
    sys: &FrameSystem,
    spec: &GridSpec,
    which: &[LatticeIndex],
) -> Result<Vec<GridFunction>> {
    let idx = sys.window.indices();
    let atoms: Vec<GridFunction> = par::map_slice(idx, |q| sys.analysis_atom(q).map(|g| g.sample_grid(spec)))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(which.len());
    for q in which {
        let r = sys
            .window
            .position(q)
            .ok_or_else(|| Error::InvalidArgument(format!("{q:?} is outside the window")))?;
        let mut acc = GridFunction::zeros(spec.clone());
        for (c, atom) in atoms.iter().enumerate() {
            let w = s_inv.entries[(r, c)].conj();
            if w.norm() > 0.0 {
                acc.axpy(w, atom)?;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Coefficients ⟨f, φ*_Q⟩ = (S⁻¹ T_φ f)_Q.
pub fn dual_coefficients(s_inv: &GramMatrix, sys: &FrameSystem, f: &GridFunction) -> Result<CoefficientSequence> {
    let c = analysis(sys, f)?;
    let v = &s_inv.entries * DVector::from_vec(c.values);
    CoefficientSequence::new(sys.window.clone(), v.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mh_system(jabs: i32, kabs: i64) -> FrameSystem {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::symmetric(2, jabs, kabs).unwrap();
        FrameSystem::self_dual(Generator::mexican_hat_2d(), d, w).unwrap()
    }

    #[test]
    fn mexican_hat_norm_both_methods() {
        // ∫(2 − r²)² e^{−r²} r dr dθ = π∫(4 − 4u + u²)e^{−u} du = 2π
        let g = Generator::mexican_hat_2d();
        let a = inner_product(&g, &g, InnerMethod::Fourier, 1e-10).unwrap();
        let b = inner_product(&g, &g, InnerMethod::Spatial, 1e-10).unwrap();
        assert_relative_eq!(a.re, 2.0 * PI, max_relative = 1e-9);
        assert_relative_eq!(b.re, 2.0 * PI, max_relative = 1e-9);
        assert!((a - b).norm() < 1e-6);
        assert!(a.im.abs() < 1e-12);
    }

    #[test]
    fn disjoint_bands_are_orthogonal() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let g = Generator::meyer_partition(&d, 3).unwrap();
        let a = dilate_translate(&g, &d, 0, &[0, 0]).unwrap();
        let b = dilate_translate(&g, &d, 3, &[1, 0]).unwrap();
        assert!(inner_product(&a, &b, InnerMethod::Fourier, 1e-8).unwrap().norm() < 1e-10);
    }

    #[test]
    fn sesquilinear() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let g = Generator::mexican_hat_2d();
        let a = dilate_translate(&g, &d, 1, &[1, -1]).unwrap();
        let b = dilate_translate(&Generator::gaussian_deriv(vec![1, 1]), &d, 0, &[0, 1]).unwrap();
        let ab = inner_product(&a, &b, InnerMethod::Fourier, 1e-9).unwrap();
        let ba = inner_product(&b, &a, InnerMethod::Fourier, 1e-9).unwrap();
        assert!((ab - ba.conj()).norm() < 1e-12);
    }

    #[test]
    fn periodized_gram_matches_direct_entries() {
        let sys = mh_system(1, 2);
        let fast = gram_matrix(&sys, InnerMethod::Auto, 1e-9).unwrap();
        assert_eq!(fast.method, "fourier-periodized");
        let idx = sys.window.indices();
        for (r, c) in [(0, 0), (3, 20), (30, 7), (12, 40), (44, 44), (5, 49)] {
            let exact = inner_product(
                &sys.synth_atom(&idx[c]).unwrap(),
                &sys.analysis_atom(&idx[r]).unwrap(),
                InnerMethod::Fourier,
                1e-10,
            )
            .unwrap();
            assert!(
                (fast.entries[(r, c)] - exact).norm() < 1e-9,
                "({r},{c}) {} vs {exact}",
                fast.entries[(r, c)]
            );
        }
        assert!(fast.hermitian_defect() < 1e-10);
    }

    #[test]
    fn gram_swap_is_adjoint() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
        let sys = FrameSystem::new(Generator::mexican_hat_2d(), Generator::gaussian_deriv(vec![2, 0]), d, w).unwrap();
        let a = gram_matrix(&sys, InnerMethod::Auto, 1e-9).unwrap();
        let b = gram_matrix(&sys.swapped(), InnerMethod::Auto, 1e-9).unwrap();
        assert!(
            (a.entries.adjoint() - b.entries)
                .iter()
                .map(|v| v.norm())
                .fold(0.0, f64::max)
                < 1e-10
        );
    }

    #[test]
    fn matrix_roundtrip() {
        let sys = mh_system(0, 1);
        let g = gram_matrix(&sys, InnerMethod::Auto, 1e-9).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &g).unwrap();
        assert!(buf.starts_with(b"{\"format\":\"AFMAT v1\""));
        let back = read_matrix(&buf[..]).unwrap();
        assert_eq!(back.entries, g.entries);
        assert_eq!(back.window, g.window);
    }

    #[test]
    fn deviation_scalar_cases() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
        let n = w.len();
        let id = DMatrix::<Complex64>::identity(n, n);
        let s = GramMatrix::from_entries(w.clone(), &id * Complex64::new(2.5, 0.0), "id").unwrap();
        let dev = deviation_from_identity(&s, 2.5, &d, WeightParams::default()).unwrap();
        assert_eq!((dev.spectral, dev.algebra_proxy), (0.0, 0.0));
        let s = GramMatrix::from_entries(w, &id * Complex64::new(1.25, 0.0), "half").unwrap();
        let dev = deviation_from_identity(&s, 2.5, &d, WeightParams::default()).unwrap();
        assert_relative_eq!(dev.spectral, 0.5, epsilon = 1e-9);
        assert_relative_eq!(dev.algebra_proxy, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DMatrix::from_fn(12, 12, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let s = m.clone().svd(false, false).singular_values.max();
        assert_relative_eq!(spectral_norm(&m, POWER_SEED).unwrap(), s, max_relative = 1e-8);
        assert_eq!(
            spectral_norm(&m, 4).unwrap().to_bits(),
            spectral_norm(&m, 4).unwrap().to_bits()
        );
    }

    #[test]
    fn power_iteration_settles_on_rounding_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(40, 40, |_, _| Complex64::new(rng.gen_range(-1.0..1.0) * 1e-18, 0.0));
        let mut big = m.clone();
        big[(0, 0)] += Complex64::new(1e-17, 0.0);
        assert!(spectral_norm(&m, POWER_SEED).unwrap() < 1e-15);
        assert!(spectral_norm(&big, POWER_SEED).unwrap() < 1e-15);
    }

    #[test]
    fn neumann_identity_and_bound() {
        let w = TruncationWindow::symmetric(2, 0, 2).unwrap();
        let n = w.len();
        let id = DMatrix::<Complex64>::identity(n, n);
        let s = GramMatrix::from_entries(w.clone(), id.clone(), "id").unwrap();
        let r = neumann_invert(&s, 1.0, 0.0, 1e-12, 50).unwrap();
        assert_eq!(r.terms_used, 1);
        assert_eq!(r.inverse.entries, id);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = DMatrix::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), 0.0));
        let q = 0.6;
        let e = &e * Complex64::new(q / spectral_norm(&e, POWER_SEED).unwrap(), 0.0);
        let s = GramMatrix::from_entries(w, &id - &e, "pert").unwrap();
        for terms in 0..20 {
            let r = neumann_invert(&s, 1.0, q, 0.0, terms).unwrap();
            assert!(
                r.residual <= r.tail_bound + 1e-12,
                "{terms}: {} > {}",
                r.residual,
                r.tail_bound
            );
        }
        assert!(matches!(
            neumann_invert(&s, 1.0, 1.0, 1e-9, 5),
            Err(Error::NotContractive(_))
        ));
    }

    #[test]
    fn neumann_term_count() {
        assert_eq!(neumann_terms(0.0, 1e-9, 30), 0);
        // 0.5^{N+1}/0.5 < 1e-3 ⇔ 0.5^N < 1e-3 ⇔ N ≥ 10
        assert_eq!(neumann_terms(0.5, 1e-3, 30), 10);
        assert_eq!(neumann_terms(0.9, 1e-12, 30), 30);
    }

    fn bump_spec() -> GridSpec {
        GridSpec::symmetric(2, 128, 0.125)
    }

    #[test]
    fn frame_apply_zero_and_linear() {
        let sys = mh_system(1, 3);
        let spec = bump_spec();
        let zero = GridFunction::zeros(spec.clone());
        let c = analysis(&sys, &zero).unwrap();
        assert!(c.values.iter().all(|v| v.norm() == 0.0));
        let f = sys
            .synth_atom(&LatticeIndex::new(0, vec![0, 0]))
            .unwrap()
            .sample_grid(&spec);
        let g = sys
            .synth_atom(&LatticeIndex::new(1, vec![1, 0]))
            .unwrap()
            .sample_grid(&spec);
        let (a, b) = (Complex64::new(0.3, -1.0), Complex64::new(2.0, 0.5));
        let mut comb = f.scaled(a);
        comb.axpy(b, &g).unwrap();
        let ca = analysis(&sys, &f).unwrap();
        let cb = analysis(&sys, &g).unwrap();
        let cc = analysis(&sys, &comb).unwrap();
        for i in 0..cc.values.len() {
            assert!((cc.values[i] - (a * ca.values[i] + b * cb.values[i])).norm() < 1e-10);
        }
    }

    #[test]
    fn analysis_of_synthesis_equals_gram_product() {
        let sys = mh_system(1, 2);
        let gram = gram_matrix(&sys, InnerMethod::Auto, 1e-9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vals: Vec<Complex64> = (0..sys.window.len())
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let c = CoefficientSequence::new(sys.window.clone(), vals.clone()).unwrap();
        // long period so the coarse atoms do not wrap around
        let spec = GridSpec::symmetric(2, 768, 1.0 / 16.0);
        let f = synthesis(&sys, &c, &spec).unwrap();
        let back = analysis(&sys, &f).unwrap();
        let expect = &gram.entries * DVector::from_vec(vals);
        let err = back
            .values
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn synthesis_matches_pointwise_sum() {
        let sys = mh_system(1, 1);
        let spec = GridSpec::symmetric(2, 256, 0.125);
        let mut c = CoefficientSequence::zeros(sys.window.clone());
        let q1 = LatticeIndex::new(1, vec![1, -1]);
        let q2 = LatticeIndex::new(-1, vec![0, 1]);
        c.set(&q1, Complex64::new(1.0, 0.5)).unwrap();
        c.set(&q2, Complex64::new(-0.7, 0.0)).unwrap();
        let f = synthesis(&sys, &c, &spec).unwrap();
        let mut direct = sys
            .synth_atom(&q1)
            .unwrap()
            .sample_grid(&spec)
            .scaled(Complex64::new(1.0, 0.5));
        direct
            .axpy(
                Complex64::new(-0.7, 0.0),
                &sys.synth_atom(&q2).unwrap().sample_grid(&spec),
            )
            .unwrap();
        let err = f
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn meyer_reproduces_interior_atoms() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let g = Generator::meyer_partition(&d, 3).unwrap();
        // slow spatial decay needs wide translation boxes
        let w = TruncationWindow::uniform(-2, 2, vec![(-64, 64), (-64, 64)]).unwrap();
        let sys = FrameSystem::self_dual(g.clone(), d.clone(), w).unwrap();
        let spec = GridSpec::symmetric(2, 512, 0.5);
        // a function synthesized from interior atoms
        let mut c = CoefficientSequence::zeros(sys.window.clone());
        c.set(&LatticeIndex::new(0, vec![0, 0]), ONE).unwrap();
        c.set(&LatticeIndex::new(0, vec![1, 1]), Complex64::new(0.5, 0.0))
            .unwrap();
        let f = synthesis(&sys, &c, &spec).unwrap();
        let uf = frame_apply(&sys, &f).unwrap();
        let mut diff = uf.clone();
        diff.axpy(-ONE, &f).unwrap();
        let rel = diff.l2_norm() / f.l2_norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn off_grid_translates_use_direct_sums() {
        let sys = mh_system(1, 2);
        let aligned = GridSpec::symmetric(2, 256, 0.125);
        let mut shifted = aligned.clone();
        for o in &mut shifted.origin {
            *o += 0.125 / 3.0;
        }
        let f = sys.synth_atom(&LatticeIndex::new(0, vec![1, 0])).unwrap();
        let a = analysis(&sys, &f.sample_grid(&aligned)).unwrap();
        let b = analysis(&sys, &f.sample_grid(&shifted)).unwrap();
        let err = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        let sa = synthesis(&sys, &a, &shifted).unwrap();
        let direct = f.sample_grid(&shifted);
        let mut diff = sa.clone();
        diff.axpy(-ONE, &direct).unwrap();
        // U f ≠ f for the Mexican hat, but both paths must be smooth and finite
        assert!(sa.values.iter().all(|v| v.re.is_finite()));
        let g = synthesis(&sys, &a, &aligned).unwrap();
        let back = g.interpolate(&shifted.point_vec(1000));
        assert!((back - sa.values[1000]).norm() < 1e-4);
    }

    #[test]
    fn refined_fft_matches_direct_sums() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::uniform(2, 2, vec![(-3, 3), (-3, 3)]).unwrap();
        let sys = FrameSystem::self_dual(Generator::mexican_hat_2d(), d.clone(), w).unwrap();
        let spec = GridSpec::symmetric(2, 64, 0.5);
        let f = sys
            .synth_atom(&LatticeIndex::new(2, vec![1, -1]))
            .unwrap()
            .sample_grid(&spec);
        let fast = analysis(&sys, &f).unwrap();
        let fhat = fft_transform(&f);
        let base = dilate_translate(&sys.analyzer, &d, 2, &[0, 0]).unwrap().fourier_fn();
        let weighted: Vec<Complex64> = (0..fhat.spec.len())
            .map(|i| fhat.values[i] * base(&fhat.spec.point_vec(i)).conj())
            .collect();
        let axes: Vec<Vec<f64>> = (0..2).map(|i| fhat.spec.axis(i)).collect();
        let c = fhat.spec.cell_volume() / (2.0 * PI).powi(2);
        let inv = d.power(-2);
        for (q, v) in sys.window.indices().iter().zip(&fast.values) {
            let y = translate(&inv, &q.k);
            let direct = contract(&weighted, &fhat.spec.extents, &axes, &y, 1.0) * c;
            assert!((direct - v).norm() < 1e-12, "{q:?}");
        }
        // synthesis through the refined grid against the phase-table sum
        let mut coeffs = CoefficientSequence::zeros(sys.window.clone());
        coeffs.set(&LatticeIndex::new(2, vec![1, 2]), ONE).unwrap();
        // resolves the atom; k/4 still falls between grid points
        let spec = GridSpec::symmetric(2, 128, 0.1);
        let g = synthesis(&sys, &coeffs, &spec).unwrap();
        let direct = sys
            .synth_atom(&LatticeIndex::new(2, vec![1, 2]))
            .unwrap()
            .sample_grid(&spec);
        let err = g
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn window_gate_fires() {
        let sys = mh_system(0, 1);
        let spec = GridSpec::symmetric(2, 64, 0.25);
        let f = sys
            .synth_atom(&LatticeIndex::new(0, vec![1, 0]))
            .unwrap()
            .sample_grid(&spec);
        assert!(matches!(frame_apply(&sys, &f), Err(Error::WindowTooSmall { .. })));
    }

    #[test]
    fn identity_inverse_gives_analyzer_duals() {
        let sys = mh_system(0, 1);
        let n = sys.window.len();
        let s = GramMatrix::from_entries(sys.window.clone(), DMatrix::identity(n, n), "id").unwrap();
        let spec = GridSpec::symmetric(2, 32, 0.5);
        let q = LatticeIndex::new(0, vec![1, 0]);
        let dual = dual_from_inverse(&s, &sys, &spec, std::slice::from_ref(&q)).unwrap();
        let direct = sys.analysis_atom(&q).unwrap().sample_grid(&spec);
        assert_eq!(dual[0].values, direct.values);
    }
}

//! Dyadic cubes Q_{j,k} = A^{−j}([0,1]ⁿ + k), finite truncation windows,
//! the f_p sequence quasi-norm and almost-diagonal weights.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::GridSpec;
use crate::geometry::DilationInfo;
use crate::par;
use crate::stats::{linear_fit, LinearFit};

pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_EPSILON: f64 = 0.5;

/// Parameters of the weight ω_δ used by the almost-diagonal fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub delta: f64,
    pub epsilon: f64,
    pub p: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
            p: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeIndex {
    pub j: i32,
    pub k: Vec<i64>,
}

impl LatticeIndex {
    pub fn new(j: i32, k: Vec<i64>) -> Self {
        LatticeIndex { j, k }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DyadicCube {
    pub index: LatticeIndex,
    pub center: Vec<f64>,
    pub measure: f64,
    pub vertices: Vec<Vec<f64>>,
}

/// The parallelepiped A^{−j}([0,1]ⁿ + k).
pub fn cube(d: &DilationInfo, idx: &LatticeIndex) -> DyadicCube {
    let n = d.dimension;
    let inv = d.power(-idx.j);
    let map = |y: &[f64]| -> Vec<f64> { (&inv * DVector::from_column_slice(y)).as_slice().to_vec() };
    let mid: Vec<f64> = idx.k.iter().map(|&k| k as f64 + 0.5).collect();
    let vertices = (0..1usize << n)
        .map(|mask| {
            let y: Vec<f64> = (0..n).map(|i| idx.k[i] as f64 + ((mask >> i) & 1) as f64).collect();
            map(&y)
        })
        .collect();
    DyadicCube {
        index: idx.clone(),
        center: map(&mid),
        measure: d.determinant_abs.powi(-idx.j),
        vertices,
    }
}

/// Serialized form of a window: a scale range and one k-box per scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub j_min: i32,
    pub j_max: i32,
    /// boxes[j − j_min][axis] = inclusive (lo, hi)
    pub k_boxes: Vec<Vec<(i64, i64)>>,
}

/// Finite set of lattice indices, enumerated lexicographically in (j, k).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "WindowSpec", into = "WindowSpec")]
pub struct TruncationWindow {
    spec: WindowSpec,
    indices: Vec<LatticeIndex>,
    positions: HashMap<LatticeIndex, usize>,
}

impl PartialEq for TruncationWindow {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl From<WindowSpec> for TruncationWindow {
    fn from(spec: WindowSpec) -> Self {
        let mut indices = Vec::new();
        for (s, bx) in spec.k_boxes.iter().enumerate() {
            let j = spec.j_min + s as i32;
            let n = bx.len();
            if bx.iter().any(|(lo, hi)| hi < lo) {
                continue;
            }
            let mut k: Vec<i64> = bx.iter().map(|b| b.0).collect();
            'outer: loop {
                indices.push(LatticeIndex::new(j, k.clone()));
                // odometer, last axis fastest
                for i in (0..n).rev() {
                    if k[i] < bx[i].1 {
                        k[i] += 1;
                        continue 'outer;
                    }
                    k[i] = bx[i].0;
                }
                break;
            }
        }
        let positions = indices.iter().cloned().enumerate().map(|(i, q)| (q, i)).collect();
        TruncationWindow {
            spec,
            indices,
            positions,
        }
    }
}

impl From<TruncationWindow> for WindowSpec {
    fn from(w: TruncationWindow) -> Self {
        w.spec
    }
}

impl TruncationWindow {
    pub fn new(spec: WindowSpec) -> Result<Self> {
        if spec.j_max < spec.j_min {
            return Err(Error::InvalidArgument("window scale range is empty".into()));
        }
        if spec.k_boxes.len() != (spec.j_max - spec.j_min + 1) as usize {
            return Err(Error::InvalidArgument("one k-box per scale is required".into()));
        }
        let w = TruncationWindow::from(spec);
        if w.indices.is_empty() {
            return Err(Error::InvalidArgument("window has no indices".into()));
        }
        Ok(w)
    }

    /// Same k-box at every scale.
    pub fn uniform(j_min: i32, j_max: i32, k_box: Vec<(i64, i64)>) -> Result<Self> {
        let count = (j_max - j_min + 1).max(0) as usize;
        Self::new(WindowSpec {
            j_min,
            j_max,
            k_boxes: vec![k_box; count],
        })
    }

    /// |j| ≤ j_abs, |k|∞ ≤ k_abs.
    pub fn symmetric(dim: usize, j_abs: i32, k_abs: i64) -> Result<Self> {
        Self::uniform(-j_abs, j_abs, vec![(-k_abs, k_abs); dim])
    }

    /// Per scale, all k whose cube meets the box [lo, hi], widened by
    /// `margin` lattice steps on each side.
    pub fn footprint(d: &DilationInfo, j_min: i32, j_max: i32, lo: &[f64], hi: &[f64], margin: i64) -> Result<Self> {
        let n = d.dimension;
        let mut k_boxes = Vec::new();
        for j in j_min..=j_max {
            let a = d.power(j);
            let center: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (l + h) / 2.0).collect();
            let half: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h - l) / 2.0).collect();
            let c = &a * DVector::from_column_slice(&center);
            let bx = (0..n)
                .map(|i| {
                    let r: f64 = (0..n).map(|m| a[(i, m)].abs() * half[m]).sum();
                    // k with [k, k+1) meeting [c − r, c + r]
                    let klo = (c[i] - r).floor() as i64 - 1 - margin;
                    let khi = (c[i] + r).floor() as i64 + margin;
                    (klo + 1, khi)
                })
                .collect();
            k_boxes.push(bx);
        }
        Self::new(WindowSpec { j_min, j_max, k_boxes })
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.k_boxes.first().map(|b| b.len()).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[LatticeIndex] {
        &self.indices
    }

    pub fn position(&self, idx: &LatticeIndex) -> Option<usize> {
        self.positions.get(idx).copied()
    }

    pub fn scales(&self) -> std::ops::RangeInclusive<i32> {
        self.spec.j_min..=self.spec.j_max
    }

    pub fn k_box(&self, j: i32) -> Option<&[(i64, i64)]> {
        if j < self.spec.j_min || j > self.spec.j_max {
            return None;
        }
        Some(&self.spec.k_boxes[(j - self.spec.j_min) as usize])
    }

    pub fn cubes(&self, d: &DilationInfo) -> Vec<DyadicCube> {
        self.indices.iter().map(|q| cube(d, q)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSequence {
    pub window: TruncationWindow,
    pub values: Vec<Complex64>,
}

impl CoefficientSequence {
    pub fn new(window: TruncationWindow, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != window.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a window of {} indices",
                values.len(),
                window.len()
            )));
        }
        Ok(CoefficientSequence { window, values })
    }

    pub fn zeros(window: TruncationWindow) -> Self {
        let n = window.len();
        CoefficientSequence {
            window,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn get(&self, idx: &LatticeIndex) -> Option<Complex64> {
        self.window.position(idx).map(|p| self.values[p])
    }

    pub fn set(&mut self, idx: &LatticeIndex, v: Complex64) -> Result<()> {
        let p = self
            .window
            .position(idx)
            .ok_or_else(|| Error::InvalidArgument(format!("{idx:?} is outside the window")))?;
        self.values[p] = v;
        Ok(())
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        CoefficientSequence {
            window: self.window.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// CSV with columns j, k1..kn, re, im.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.window.dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["j".to_string()];
        head.extend((1..=n).map(|i| format!("k{i}")));
        head.push("re".into());
        head.push("im".into());
        wr.write_record(&head)?;
        for (q, v) in self.window.indices().iter().zip(&self.values) {
            let mut rec = vec![q.j.to_string()];
            rec.extend(q.k.iter().map(|k| k.to_string()));
            rec.push(format!("{:e}", v.re));
            rec.push(format!("{:e}", v.im));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads rows into the given window; unknown indices are rejected.
    pub fn read_csv<R: Read>(window: TruncationWindow, r: R) -> Result<Self> {
        let n = window.dim();
        let mut seq = CoefficientSequence::zeros(window);
        let mut rd = csv::Reader::from_reader(r);
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != n + 3 {
                return Err(Error::Format(format!("expected {} columns", n + 3)));
            }
            let parse_err = |e: &dyn std::fmt::Display| Error::Format(e.to_string());
            let j: i32 = rec[0].parse().map_err(|e| parse_err(&e))?;
            let k: Vec<i64> = (1..=n)
                .map(|i| rec[i].parse().map_err(|e| parse_err(&e)))
                .collect::<Result<_>>()?;
            let re: f64 = rec[n + 1].parse().map_err(|e| parse_err(&e))?;
            let im: f64 = rec[n + 2].parse().map_err(|e| parse_err(&e))?;
            seq.set(&LatticeIndex::new(j, k), Complex64::new(re, im))?;
        }
        Ok(seq)
    }
}

/// (1 + d_A(x_Q, x_P)/max(|Q|,|P|)^{1/n})^{−(J/n+δ)} · min(|Q|/|P|, |P|/|Q|)^ε, J = n/p.
pub fn omega_weight(q: &DyadicCube, p_cube: &DyadicCube, delta: f64, epsilon: f64, p: f64, d: &DilationInfo) -> f64 {
    let n = d.dimension as f64;
    let diff: Vec<f64> = q.center.iter().zip(&p_cube.center).map(|(a, b)| a - b).collect();
    let dist = d.rho(&diff);
    omega_from_parts(dist, q.measure, p_cube.measure, delta, epsilon, p, n)
}

fn omega_from_parts(dist: f64, mq: f64, mp: f64, delta: f64, epsilon: f64, p: f64, n: f64) -> f64 {
    let big = mq.max(mp);
    let ratio = (mq / mp).min(mp / mq);
    let exponent = 1.0 / p + delta; // J/n + δ with J = n/p
    (1.0 + dist / big.powf(1.0 / n)).powf(-exponent) * ratio.powf(epsilon)
}

/// How `sequence_norm` discretizes the spatial integral.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceNormMode {
    /// Riemann sum over a fixed grid; every active cube must hold ≥ 8ⁿ points.
    Uniform(GridSpec),
    /// Adaptive dyadic subdivision of the bounding box: cells on which the
    /// square function is constant are integrated exactly, others are
    /// refined down to 1/8 of the finest intersecting cube.
    Adaptive,
}

struct ActiveScale {
    j: i32,
    a: DMatrix<f64>,
    /// k → |s_Q|²/|Q|
    weights: HashMap<Vec<i64>, f64>,
    /// shortest edge of the cubes at this scale
    edge: f64,
}

fn active_scales(s: &CoefficientSequence, d: &DilationInfo) -> Vec<ActiveScale> {
    let mut by_scale: HashMap<i32, HashMap<Vec<i64>, f64>> = HashMap::new();
    for (q, v) in s.window.indices().iter().zip(&s.values) {
        let m = v.norm_sqr();
        if m > 0.0 {
            let measure = d.determinant_abs.powi(-q.j);
            *by_scale.entry(q.j).or_default().entry(q.k.clone()).or_insert(0.0) += m / measure;
        }
    }
    let mut scales: Vec<ActiveScale> = by_scale
        .into_iter()
        .map(|(j, weights)| {
            let inv = d.power(-j);
            let edge = (0..d.dimension)
                .map(|c| inv.column(c).norm())
                .fold(f64::INFINITY, f64::min);
            ActiveScale {
                j,
                a: d.power(j),
                weights,
                edge,
            }
        })
        .collect();
    scales.sort_by_key(|s| s.j);
    scales
}

fn lattice_cell(a: &DMatrix<f64>, x: &[f64]) -> Vec<i64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let y: f64 = (0..n).map(|m| a[(i, m)] * x[m]).sum();
            y.floor() as i64
        })
        .collect()
}

/// ‖s‖ = (∫ (Σ_Q |s_Q|² |Q|^{−1} χ_Q)^{p/2})^{1/p}.
pub fn sequence_norm(s: &CoefficientSequence, p: f64, d: &DilationInfo, mode: &SequenceNormMode) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidExponent(p));
    }
    if s.window.dim() != d.dimension {
        return Err(Error::DimensionMismatch(
            "sequence and dilation differ in dimension".into(),
        ));
    }
    let scales = active_scales(s, d);
    if scales.is_empty() {
        return Ok(0.0);
    }
    let integral = match mode {
        SequenceNormMode::Uniform(spec) => uniform_integral(&scales, p, spec, d)?,
        SequenceNormMode::Adaptive => adaptive_integral(&scales, p, d)?,
    };
    Ok(integral.powf(1.0 / p))
}

fn uniform_integral(scales: &[ActiveScale], p: f64, spec: &GridSpec, d: &DilationInfo) -> Result<f64> {
    if spec.dim() != d.dimension {
        return Err(Error::DimensionMismatch("grid and dilation differ in dimension".into()));
    }
    let n = spec.dim();
    let rows = spec.extents[0];
    let per_row: usize = spec.len() / rows.max(1);
    type Counts = HashMap<(usize, Vec<i64>), u64>;
    let parts: Vec<(f64, Counts)> = par::map_range(rows, |r| {
        let mut x = vec![0.0; n];
        let mut sum = 0.0;
        let mut counts: Counts = HashMap::new();
        for c in 0..per_row {
            spec.point(r * per_row + c, &mut x);
            let mut sq = 0.0;
            for (si, sc) in scales.iter().enumerate() {
                let k = lattice_cell(&sc.a, &x);
                if let Some(w) = sc.weights.get(&k) {
                    sq += w;
                    *counts.entry((si, k)).or_insert(0) += 1;
                }
            }
            if sq > 0.0 {
                sum += sq.powf(p / 2.0);
            }
        }
        (sum, counts)
    });
    let mut total = 0.0;
    let mut counts: Counts = HashMap::new();
    for (s, c) in parts {
        total += s;
        for (key, v) in c {
            *counts.entry(key).or_insert(0) += v;
        }
    }
    let required = 8u64.pow(n as u32);
    // deterministic report: smallest offending cube in (j, k) order
    let mut worst: Option<(i32, Vec<i64>, u64)> = None;
    for (si, sc) in scales.iter().enumerate() {
        let mut ks: Vec<&Vec<i64>> = sc.weights.keys().collect();
        ks.sort();
        for k in ks {
            let got = counts.get(&(si, k.clone())).copied().unwrap_or(0);
            if got < required && worst.is_none() {
                worst = Some((sc.j, k.clone(), got));
            }
        }
    }
    if let Some((j, k, got)) = worst {
        return Err(Error::GridTooCoarse {
            cube: format!("j={j}, k={k:?}"),
            points: got as usize,
            required: required as usize,
        });
    }
    Ok(total * spec.cell_volume())
}

const ADAPTIVE_MAX_DEPTH: u32 = 40;

fn adaptive_integral(scales: &[ActiveScale], p: f64, d: &DilationInfo) -> Result<f64> {
    let n = d.dimension;
    // bounding box of all active cubes
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for sc in scales {
        for k in sc.weights.keys() {
            let c = cube(d, &LatticeIndex::new(sc.j, k.clone()));
            for v in &c.vertices {
                for i in 0..n {
                    lo[i] = lo[i].min(v[i]);
                    hi[i] = hi[i].max(v[i]);
                }
            }
        }
    }
    if is_diagonal(&d.matrix) {
        // snap the root to a power-of-two block of coarsest cubes so that
        // bisection follows the dyadic tree for dyadic scalings
        let coarse = &scales[0];
        for i in 0..n {
            let step = 1.0 / coarse.a[(i, i)].abs();
            let a = (lo[i] / step).floor();
            let b = (hi[i] / step).ceil();
            let count = ((b - a).max(1.0) as u64).next_power_of_two() as f64;
            lo[i] = a * step;
            hi[i] = (a + count) * step;
        }
    }
    // split the root along the first axis for parallelism
    let pieces = 16usize;
    let width = (hi[0] - lo[0]) / pieces as f64;
    let parts: Vec<Result<f64>> = par::map_range(pieces, |i| {
        let mut clo = lo.clone();
        let mut chi = hi.clone();
        clo[0] = lo[0] + i as f64 * width;
        chi[0] = if i + 1 == pieces {
            hi[0]
        } else {
            lo[0] + (i + 1) as f64 * width
        };
        adaptive_cell(scales, p, &clo, &chi, 0)
    });
    let mut total = 0.0;
    for r in parts {
        total += r?;
    }
    Ok(total)
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

fn adaptive_cell(scales: &[ActiveScale], p: f64, lo: &[f64], hi: &[f64], depth: u32) -> Result<f64> {
    let n = lo.len();
    let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| (a + b) / 2.0).collect();
    let half: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| (b - a) / 2.0).collect();
    let volume: f64 = half.iter().map(|h| 2.0 * h).product();
    let mut constant = true;
    let mut finest = f64::INFINITY;
    let mut sq = 0.0;
    for sc in scales {
        // bounding box of the cell's image under A^j
        let mut klo = vec![0i64; n];
        let mut khi = vec![0i64; n];
        let mut single = true;
        for i in 0..n {
            let c: f64 = (0..n).map(|m| sc.a[(i, m)] * center[m]).sum();
            let r: f64 = (0..n).map(|m| sc.a[(i, m)].abs() * half[m]).sum();
            klo[i] = (c - r).floor() as i64;
            // open upper edge
            let top = c + r;
            khi[i] = if top == top.floor() {
                top as i64 - 1
            } else {
                top.floor() as i64
            };
            khi[i] = khi[i].max(klo[i]);
            if khi[i] != klo[i] {
                single = false;
            }
        }
        if single {
            if let Some(w) = sc.weights.get(&klo) {
                sq += w;
            }
            continue;
        }
        let span: f64 = (0..n).map(|i| (khi[i] - klo[i] + 1) as f64).product();
        let hit = if span <= sc.weights.len() as f64 {
            box_keys(&klo, &khi).any(|k| sc.weights.contains_key(&k))
        } else {
            sc.weights
                .keys()
                .any(|k| k.iter().enumerate().all(|(i, v)| *v >= klo[i] && *v <= khi[i]))
        };
        if hit {
            constant = false;
            finest = finest.min(sc.edge);
        }
    }
    if constant {
        return Ok(if sq > 0.0 { sq.powf(p / 2.0) * volume } else { 0.0 });
    }
    let extent = half.iter().fold(0.0f64, |m, h| m.max(2.0 * h));
    if extent <= finest / 8.0 {
        // midpoint rule on a boundary cell
        let mut sq = 0.0;
        for sc in scales {
            if let Some(w) = sc.weights.get(&lattice_cell(&sc.a, &center)) {
                sq += w;
            }
        }
        return Ok(if sq > 0.0 { sq.powf(p / 2.0) * volume } else { 0.0 });
    }
    if depth >= ADAPTIVE_MAX_DEPTH {
        return Err(Error::QuadratureNotConverged(
            "adaptive sequence-norm subdivision hit its depth limit".into(),
        ));
    }
    let mut total = 0.0;
    for mask in 0..1usize << n {
        let mut clo = lo.to_vec();
        let mut chi = hi.to_vec();
        for i in 0..n {
            if (mask >> i) & 1 == 0 {
                chi[i] = center[i];
            } else {
                clo[i] = center[i];
            }
        }
        total += adaptive_cell(scales, p, &clo, &chi, depth + 1)?;
    }
    Ok(total)
}

fn box_keys<'a>(lo: &'a [i64], hi: &'a [i64]) -> impl Iterator<Item = Vec<i64>> + 'a {
    let n = lo.len();
    let total: i64 = (0..n).map(|i| hi[i] - lo[i] + 1).product();
    (0..total).map(move |mut flat| {
        let mut k = vec![0i64; n];
        for i in (0..n).rev() {
            let e = hi[i] - lo[i] + 1;
            k[i] = lo[i] + flat % e;
            flat /= e;
        }
        k
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AlmostDiagonalFit {
    /// max |m_{Q,P}| / ω_δ(Q,P)
    pub c_m: f64,
    /// Least-squares slope of log|m| against log(1 + normalized distance),
    /// same-scale off-diagonal pairs only.
    pub decay_exponent: Option<f64>,
    pub fit: Option<LinearFit>,
}

/// Best constant C_M and same-scale decay slope for a matrix on `window`.
pub fn almost_diagonal_fit(
    m: &DMatrix<Complex64>,
    window: &TruncationWindow,
    delta: f64,
    epsilon: f64,
    p: f64,
    d: &DilationInfo,
) -> Result<AlmostDiagonalFit> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if m.nrows() != window.len() || m.ncols() != window.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}×{} matrix on a window of {}",
            m.nrows(),
            m.ncols(),
            window.len()
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let cubes = window.cubes(d);
    let n = d.dimension as f64;
    let rows: Vec<(f64, Vec<(f64, f64)>)> = par::map_range(cubes.len(), |qi| {
        let q = &cubes[qi];
        let mut best: f64 = 0.0;
        let mut pts = Vec::new();
        for (pi, pc) in cubes.iter().enumerate() {
            let v = m[(qi, pi)].norm();
            let diff: Vec<f64> = q.center.iter().zip(&pc.center).map(|(a, b)| a - b).collect();
            let dist = d.rho(&diff);
            let w = omega_from_parts(dist, q.measure, pc.measure, delta, epsilon, p, n);
            best = best.max(v / w);
            if pi != qi && q.index.j == pc.index.j && v > 1e-14 {
                let nd = dist / q.measure.powf(1.0 / n);
                pts.push(((1.0 + nd).ln(), v.ln()));
            }
        }
        (best, pts)
    });
    let maxes: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let c_m = par::ordered_max(&maxes);
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.into_iter().flat_map(|r| r.1).unzip();
    let fit = linear_fit(&xs, &ys);
    Ok(AlmostDiagonalFit {
        c_m,
        decay_exponent: fit.map(|f| f.slope),
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    #[test]
    fn unit_cube() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let c = cube(&d, &LatticeIndex::new(0, vec![0, 0]));
        assert_eq!(c.measure, 1.0);
        assert_eq!(c.center, vec![0.5, 0.5]);
        assert_eq!(c.vertices.len(), 4);
        assert_eq!(cube(&d, &LatticeIndex::new(1, vec![0, 0])).measure, 0.25);
    }

    #[test]
    fn anisotropic_center() {
        let d = DilationInfo::diagonal(&[2.0, 8.0]).unwrap();
        let c = cube(&d, &LatticeIndex::new(1, vec![1, 0]));
        assert_relative_eq!(c.center[0], 0.75);
        assert_relative_eq!(c.center[1], 0.0625);
    }

    #[test]
    fn window_enumeration_is_lexicographic() {
        let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
        assert_eq!(w.len(), 27);
        let idx = w.indices();
        for pair in idx.windows(2) {
            assert!(pair[0] < pair[1]);
        }
        assert_eq!(w.position(&LatticeIndex::new(0, vec![0, 0])), Some(13));
    }

    #[test]
    fn window_serde_roundtrip() {
        let w = TruncationWindow::symmetric(2, 1, 2).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        let back: TruncationWindow = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.len(), w.len());
    }

    #[test]
    fn footprint_covers_region() {
        let d = DilationInfo::diagonal(&[2.0, 4.0]).unwrap();
        let w = TruncationWindow::footprint(&d, -1, 2, &[-1.0, -1.0], &[1.0, 1.0], 0).unwrap();
        for j in -1..=2 {
            let bx = w.k_box(j).unwrap();
            let a = d.power(j);
            for x in [[-0.99, -0.99], [0.99, 0.99], [0.0, 0.0]] {
                let k = lattice_cell(&a, &x);
                for i in 0..2 {
                    assert!(k[i] >= bx[i].0 && k[i] <= bx[i].1);
                }
            }
        }
    }

    #[test]
    fn omega_examples() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let q = cube(&d, &LatticeIndex::new(0, vec![0, 0]));
        assert_eq!(omega_weight(&q, &q, 1.0, 0.5, 1.0, &d), 1.0);
        let p = cube(&d, &LatticeIndex::new(0, vec![4, 0]));
        let rho = d.rho(&[4.0, 0.0]);
        assert_relative_eq!(
            omega_weight(&q, &p, 1.0, 0.5, 1.0, &d),
            (1.0 + rho).powi(-2),
            epsilon = 1e-15
        );
        // same centre, scales differing by 2
        let mut small = cube(&d, &LatticeIndex::new(2, vec![0, 0]));
        small.center = q.center.clone();
        assert_relative_eq!(omega_weight(&q, &small, 1.0, 0.5, 1.0, &d), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn single_cube_norms() {
        for (diag, js) in [([2.0, 2.0], [0, 1, 2]), ([2.0, 8.0], [0, 1, 2])] {
            let d = DilationInfo::diagonal(&diag).unwrap();
            for p in [1.0, 2.0 / 3.0] {
                for j in js {
                    let w = TruncationWindow::uniform(j, j, vec![(0, 0), (0, 0)]).unwrap();
                    let s = CoefficientSequence::new(w, vec![one()]).unwrap();
                    let expect = d.determinant_abs.powf(-(j as f64) * (1.0 / p - 0.5));
                    let got = sequence_norm(&s, p, &d, &SequenceNormMode::Adaptive).unwrap();
                    assert_relative_eq!(got, expect, max_relative = 1e-12);
                    let edge = 1.0 / diag[1].powi(j);
                    let spec = GridSpec::new(
                        vec![edge / 32.0 - 0.25, edge / 32.0 - 0.25],
                        vec![edge / 16.0, edge / 16.0],
                        vec![
                            ((1.5 + 0.0) / (edge / 16.0)).ceil() as usize,
                            ((1.5 + 0.0) / (edge / 16.0)).ceil() as usize,
                        ],
                    )
                    .unwrap();
                    let u = sequence_norm(&s, p, &d, &SequenceNormMode::Uniform(spec)).unwrap();
                    assert_relative_eq!(u, expect, max_relative = 1e-2);
                }
            }
        }
    }

    #[test]
    fn coarse_grid_rejected() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::uniform(2, 2, vec![(0, 0), (0, 0)]).unwrap();
        let s = CoefficientSequence::new(w, vec![one()]).unwrap();
        let spec = GridSpec::centered(2, 16, 0.125);
        let err = sequence_norm(&s, 1.0, &d, &SequenceNormMode::Uniform(spec)).unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse { .. }));
    }

    #[test]
    fn sheared_cube_norm_is_exact() {
        let d = DilationInfo::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let w = TruncationWindow::uniform(1, 1, vec![(0, 0), (0, 0)]).unwrap();
        let s = CoefficientSequence::new(w, vec![one()]).unwrap();
        let got = sequence_norm(&s, 1.0, &d, &SequenceNormMode::Adaptive).unwrap();
        assert_relative_eq!(got, 0.25f64.sqrt(), max_relative = 2e-2);
    }

    #[test]
    fn disjoint_supports_add_for_p_one() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::uniform(0, 0, vec![(0, 3), (0, 0)]).unwrap();
        let mut s = CoefficientSequence::zeros(w);
        s.set(&LatticeIndex::new(0, vec![0, 0]), Complex64::new(2.0, 0.0))
            .unwrap();
        s.set(&LatticeIndex::new(0, vec![3, 0]), Complex64::new(0.0, 3.0))
            .unwrap();
        let got = sequence_norm(&s, 1.0, &d, &SequenceNormMode::Adaptive).unwrap();
        assert_relative_eq!(got, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn identity_fit() {
        let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
        let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
        let m = DMatrix::<Complex64>::identity(w.len(), w.len()) * Complex64::new(3.0, 0.0);
        let fit = almost_diagonal_fit(&m, &w, 1.0, 0.5, 1.0, &d).unwrap();
        assert_eq!(fit.c_m, 3.0);
        assert!(fit.decay_exponent.is_none());
        let empty = DMatrix::<Complex64>::zeros(0, 0);
        assert!(matches!(
            almost_diagonal_fit(&empty, &w, 1.0, 0.5, 1.0, &d),
            Err(Error::EmptyMatrix)
        ));
    }

    #[test]
    fn coefficient_csv_roundtrip() {
        let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
        let vals: Vec<Complex64> = (0..w.len()).map(|i| Complex64::new(i as f64, -0.5)).collect();
        let s = CoefficientSequence::new(w.clone(), vals).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"j,k1,k2,re,im\n"));
        let back = CoefficientSequence::read_csv(w, &buf[..]).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn omega_symmetric(j1 in -2i32..3, j2 in -2i32..3, k1 in -5i64..5, k2 in -5i64..5) {
            let d = DilationInfo::diagonal(&[2.0, 4.0]).unwrap();
            let q = cube(&d, &LatticeIndex::new(j1, vec![k1, 0]));
            let p = cube(&d, &LatticeIndex::new(j2, vec![0, k2]));
            let a = omega_weight(&q, &p, 1.0, 0.5, 0.8, &d);
            let b = omega_weight(&p, &q, 1.0, 0.5, 0.8, &d);
            prop_assert!((a - b).abs() <= 1e-14 * a.max(b));
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn norm_homogeneous(c in 0.01f64..100.0, ph in 0.0f64..std::f64::consts::TAU) {
            let d = DilationInfo::diagonal(&[2.0, 2.0]).unwrap();
            let w = TruncationWindow::symmetric(2, 1, 1).unwrap();
            let vals: Vec<Complex64> = (0..w.len()).map(|i| Complex64::new((i % 5) as f64, 1.0)).collect();
            let s = CoefficientSequence::new(w, vals).unwrap();
            let a = sequence_norm(&s, 0.7, &d, &SequenceNormMode::Adaptive).unwrap();
            let b = sequence_norm(&s.scaled(Complex64::from_polar(c, ph)), 0.7, &d, &SequenceNormMode::Adaptive).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-12 * c * a);
        }
    }
}

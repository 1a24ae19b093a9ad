//! Uniform sample grids, n-dimensional FFTs and interpolation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Geometry of a uniform grid. Axis 0 is the slowest in the row-major layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub extents: Vec<usize>,
}

impl GridSpec {
    pub fn new(origin: Vec<f64>, spacing: Vec<f64>, extents: Vec<usize>) -> Result<Self> {
        if origin.len() != spacing.len() || origin.len() != extents.len() || origin.is_empty() {
            return Err(Error::DimensionMismatch(
                "grid origin, spacing and extents must share a positive length".into(),
            ));
        }
        if spacing.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        if extents.contains(&0) {
            return Err(Error::InvalidArgument("grid extents must be positive".into()));
        }
        Ok(GridSpec {
            origin,
            spacing,
            extents,
        })
    }

    /// Symmetric grid of `count` points per axis with the given spacing,
    /// sampled at cell centres of [−count·h/2, count·h/2].
    pub fn centered(dim: usize, count: usize, spacing: f64) -> Self {
        let origin = -(count as f64) * spacing / 2.0 + spacing / 2.0;
        GridSpec {
            origin: vec![origin; dim],
            spacing: vec![spacing; dim],
            extents: vec![count; dim],
        }
    }

    /// Grid of `count` points per axis whose sample set contains 0, spanning
    /// roughly [−count·h/2, count·h/2).
    pub fn symmetric(dim: usize, count: usize, spacing: f64) -> Self {
        let origin = -((count / 2) as f64) * spacing;
        GridSpec {
            origin: vec![origin; dim],
            spacing: vec![spacing; dim],
            extents: vec![count; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let n = self.dim();
        let mut s = vec![1; n];
        for i in (0..n.saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.extents[i + 1];
        }
        s
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for i in (0..self.dim()).rev() {
            out[i] = flat % self.extents[i];
            flat /= self.extents[i];
        }
    }

    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for i in (0..self.dim()).rev() {
            let m = rem % self.extents[i];
            rem /= self.extents[i];
            out[i] = self.origin[i] + m as f64 * self.spacing[i];
        }
    }

    pub fn point_vec(&self, flat: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.point(flat, &mut v);
        v
    }

    pub fn axis(&self, i: usize) -> Vec<f64> {
        (0..self.extents[i])
            .map(|m| self.origin[i] + m as f64 * self.spacing[i])
            .collect()
    }

    /// Upper corner (last sample) per axis.
    pub fn upper(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.origin[i] + (self.extents[i] - 1) as f64 * self.spacing[i])
            .collect()
    }

    /// Frequency grid produced by [`fft_transform`].
    pub fn frequency_spec(&self) -> GridSpec {
        let n = self.dim();
        let mut origin = vec![0.0; n];
        let mut spacing = vec![0.0; n];
        for i in 0..n {
            let nn = self.extents[i];
            spacing[i] = 2.0 * PI / (nn as f64 * self.spacing[i]);
            origin[i] = -((nn / 2) as f64) * spacing[i];
        }
        GridSpec {
            origin,
            spacing,
            extents: self.extents.clone(),
        }
    }

    /// Sample `f` on the grid (parallel, ordered).
    pub fn sample<F>(&self, f: F) -> GridFunction
    where
        F: Fn(&[f64]) -> Complex64 + Sync + Send,
    {
        let n = self.dim();
        let values = par::map_range(self.len(), |flat| {
            let mut x = vec![0.0; n];
            self.point(flat, &mut x);
            f(&x)
        });
        GridFunction {
            spec: self.clone(),
            values,
        }
    }
}

/// Complex samples on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub values: Vec<Complex64>,
}

impl GridFunction {
    pub fn new(spec: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::DimensionMismatch(format!(
                "grid holds {} values but extents require {}",
                values.len(),
                spec.len()
            )));
        }
        Ok(GridFunction { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        let len = spec.len();
        GridFunction {
            spec,
            values: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Σ|g|² ΔV.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.spec.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// Σ f ḡ ΔV on a shared grid.
    pub fn inner(&self, other: &GridFunction) -> Result<Complex64> {
        if self.spec != other.spec {
            return Err(Error::DimensionMismatch("grids differ".into()));
        }
        let s: Complex64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b.conj()).sum();
        Ok(s * self.spec.cell_volume())
    }

    pub fn scaled(&self, c: Complex64) -> GridFunction {
        GridFunction {
            spec: self.spec.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn axpy(&mut self, a: Complex64, x: &GridFunction) -> Result<()> {
        if self.spec != x.spec {
            return Err(Error::DimensionMismatch("grids differ".into()));
        }
        for (y, xv) in self.values.iter_mut().zip(&x.values) {
            *y += a * xv;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Tensor-product cubic convolution interpolation; samples outside the
    /// grid are treated as zero.
    pub fn interpolate(&self, x: &[f64]) -> Complex64 {
        let n = self.dim();
        let mut base = [0i64; 8];
        let mut w = [[0.0f64; 4]; 8];
        for i in 0..n {
            let u = (x[i] - self.spec.origin[i]) / self.spec.spacing[i];
            if !(u > -2.0 && u < self.spec.extents[i] as f64 + 1.0) {
                return Complex64::new(0.0, 0.0);
            }
            let fl = u.floor();
            let t = u - fl;
            base[i] = fl as i64 - 1;
            w[i] = keys_weights(t);
        }
        let strides = self.spec.strides();
        let total = 4usize.pow(n as u32);
        let mut acc = Complex64::new(0.0, 0.0);
        'outer: for combo in 0..total {
            let mut c = combo;
            let mut flat = 0usize;
            let mut weight = 1.0;
            for i in (0..n).rev() {
                let o = c % 4;
                c /= 4;
                let idx = base[i] + o as i64;
                if idx < 0 || idx >= self.spec.extents[i] as i64 {
                    continue 'outer;
                }
                flat += idx as usize * strides[i];
                weight *= w[i][o];
            }
            if weight != 0.0 {
                acc += self.values[flat] * weight;
            }
        }
        acc
    }

    /// Fourth-order finite-difference partial derivative along `axis`,
    /// one-sided near the boundary.
    pub fn derivative_axis(&self, axis: usize) -> GridFunction {
        let spec = &self.spec;
        let n = spec.extents[axis];
        let h = spec.spacing[axis];
        let stride = spec.strides()[axis];
        let mut out = vec![Complex64::new(0.0, 0.0); self.values.len()];
        let lines = self.values.len() / n;
        let outer_stride = stride * n;
        let computed: Vec<Vec<Complex64>> = par::map_range(lines, |line| {
            let start = (line / stride) * outer_stride + line % stride;
            let f: Vec<Complex64> = (0..n).map(|m| self.values[start + m * stride]).collect();
            fd4(&f, h)
        });
        for (line, d) in computed.into_iter().enumerate() {
            let start = (line / stride) * outer_stride + line % stride;
            for (m, v) in d.into_iter().enumerate() {
                out[start + m * stride] = v;
            }
        }
        GridFunction {
            spec: spec.clone(),
            values: out,
        }
    }

    /// ∂^β by repeated axis derivatives.
    pub fn derivative(&self, beta: &[u32]) -> GridFunction {
        let mut g = self.clone();
        for (axis, &k) in beta.iter().enumerate() {
            for _ in 0..k {
                g = g.derivative_axis(axis);
            }
        }
        g
    }
}

fn keys_weights(t: f64) -> [f64; 4] {
    // Keys cubic convolution kernel, a = -1/2
    let a = -0.5;
    let k = |s: f64| {
        let s = s.abs();
        if s <= 1.0 {
            (a + 2.0) * s * s * s - (a + 3.0) * s * s + 1.0
        } else if s < 2.0 {
            a * s * s * s - 5.0 * a * s * s + 8.0 * a * s - 4.0 * a
        } else {
            0.0
        }
    };
    [k(1.0 + t), k(t), k(1.0 - t), k(2.0 - t)]
}

fn fd4(f: &[Complex64], h: f64) -> Vec<Complex64> {
    let n = f.len();
    let mut d = vec![Complex64::new(0.0, 0.0); n];
    if n < 5 {
        // fall back to second order
        for i in 0..n {
            d[i] = if n == 1 {
                Complex64::new(0.0, 0.0)
            } else if i == 0 {
                (f[1] - f[0]) / h
            } else if i == n - 1 {
                (f[n - 1] - f[n - 2]) / h
            } else {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            };
        }
        return d;
    }
    let c = 1.0 / (12.0 * h);
    for i in 2..n - 2 {
        d[i] = (-f[i + 2] + f[i + 1] * 8.0 - f[i - 1] * 8.0 + f[i - 2]) * c;
    }
    d[0] = (f[0] * -25.0 + f[1] * 48.0 - f[2] * 36.0 + f[3] * 16.0 - f[4] * 3.0) * c;
    d[1] = (f[0] * -3.0 - f[1] * 10.0 + f[2] * 18.0 - f[3] * 6.0 + f[4]) * c;
    let m = n - 1;
    d[m] = (f[m] * 25.0 - f[m - 1] * 48.0 + f[m - 2] * 36.0 - f[m - 3] * 16.0 + f[m - 4] * 3.0) * c;
    d[m - 1] = (f[m] * 3.0 + f[m - 1] * 10.0 - f[m - 2] * 18.0 + f[m - 3] * 6.0 - f[m - 4]) * c;
    d
}

/// In-place unnormalized n-dimensional FFT on row-major data.
pub fn fft_nd(data: &mut [Complex64], extents: &[usize], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let n = extents.len();
    let total: usize = extents.iter().product();
    let mut stride = 1usize;
    let mut strides = vec![1usize; n];
    for i in (0..n).rev() {
        strides[i] = stride;
        stride *= extents[i];
    }
    for axis in 0..n {
        let len = extents[axis];
        if len == 1 {
            continue;
        }
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        let s = strides[axis];
        if s == 1 {
            // contiguous lines
            par::for_each_chunk_mut(data, len, |_, line| fft.process(line));
            continue;
        }
        let lines = total / len;
        let outer = s * len;
        let src: &[Complex64] = data;
        let transformed: Vec<Vec<Complex64>> = par::map_range(lines, |line| {
            let start = (line / s) * outer + line % s;
            let mut buf: Vec<Complex64> = (0..len).map(|m| src[start + m * s]).collect();
            fft.process(&mut buf);
            buf
        });
        for (line, buf) in transformed.into_iter().enumerate() {
            let start = (line / s) * outer + line % s;
            for (m, v) in buf.into_iter().enumerate() {
                data[start + m * s] = v;
            }
        }
    }
}

/// Discrete approximation of ĝ(ξ) = ∫ g(x) e^{−i⟨x,ξ⟩} dx on the centred
/// frequency grid with spacing 2π/(N h) per axis.
pub fn fft_transform(g: &GridFunction) -> GridFunction {
    let spec = &g.spec;
    let n = spec.dim();
    let freq = spec.frequency_spec();
    let centers: Vec<usize> = spec.extents.iter().map(|e| e / 2).collect();
    // pre-twiddle by e^{2πi m c/N} per axis
    let pre: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            let nn = spec.extents[i] as f64;
            (0..spec.extents[i])
                .map(|m| Complex64::from_polar(1.0, 2.0 * PI * (m * centers[i]) as f64 / nn))
                .collect()
        })
        .collect();
    let post: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            freq.axis(i)
                .into_iter()
                .map(|xi| Complex64::from_polar(1.0, -spec.origin[i] * xi))
                .collect()
        })
        .collect();
    let mut data = apply_separable(&g.values, spec, &pre);
    fft_nd(&mut data, &spec.extents, false);
    let mut out = apply_separable(&data, &freq, &post);
    let dv = spec.cell_volume();
    for v in &mut out {
        *v *= dv;
    }
    GridFunction {
        spec: freq,
        values: out,
    }
}

/// Inverse of [`fft_transform`]: recover spatial samples on the grid with
/// the given spatial origin from centred frequency samples.
pub fn ifft_transform(ghat: &GridFunction, spatial_origin: &[f64]) -> GridFunction {
    let fspec = &ghat.spec;
    let n = fspec.dim();
    let spacing: Vec<f64> = (0..n)
        .map(|i| 2.0 * PI / (fspec.extents[i] as f64 * fspec.spacing[i]))
        .collect();
    let sspec = GridSpec {
        origin: spatial_origin.to_vec(),
        spacing,
        extents: fspec.extents.clone(),
    };
    let centers: Vec<usize> = fspec.extents.iter().map(|e| e / 2).collect();
    let pre: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            fspec
                .axis(i)
                .into_iter()
                .map(|xi| Complex64::from_polar(1.0, spatial_origin[i] * xi))
                .collect()
        })
        .collect();
    let post: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            let nn = fspec.extents[i] as f64;
            (0..fspec.extents[i])
                .map(|m| Complex64::from_polar(1.0, -2.0 * PI * (m * centers[i]) as f64 / nn))
                .collect()
        })
        .collect();
    let mut data = apply_separable(&ghat.values, fspec, &pre);
    fft_nd(&mut data, &fspec.extents, true);
    let mut out = apply_separable(&data, &sspec, &post);
    let scale: f64 = fspec.spacing.iter().map(|d| d / (2.0 * PI)).product();
    for v in &mut out {
        *v *= scale;
    }
    GridFunction {
        spec: sspec,
        values: out,
    }
}

/// Multiply by a separable factor Π_i f_i[m_i].
pub fn apply_separable(values: &[Complex64], spec: &GridSpec, factors: &[Vec<Complex64>]) -> Vec<Complex64> {
    let n = spec.dim();
    par::map_range(values.len(), |flat| {
        let mut rem = flat;
        let mut f = Complex64::new(1.0, 0.0);
        for i in (0..n).rev() {
            let m = rem % spec.extents[i];
            rem /= spec.extents[i];
            f *= factors[i][m];
        }
        values[flat] * f
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gaussian_grid(count: usize, h: f64) -> GridFunction {
        GridSpec::symmetric(2, count, h).sample(|x| Complex64::new((-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp(), 0.0))
    }

    #[test]
    fn zero_grid_transforms_to_zero() {
        let g = GridFunction::zeros(GridSpec::symmetric(2, 16, 0.5));
        assert!(fft_transform(&g).values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gaussian_transform_matches_closed_form() {
        let g = gaussian_grid(128, 0.25);
        let gh = fft_transform(&g);
        let mut x = vec![0.0; 2];
        let mut err: f64 = 0.0;
        for flat in 0..gh.values.len() {
            gh.spec.point(flat, &mut x);
            let exact = 2.0 * PI * (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp();
            err = err
                .max((gh.values[flat].re - exact).abs())
                .max(gh.values[flat].im.abs());
        }
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn parseval_and_roundtrip() {
        let spec = GridSpec::new(vec![-3.1, -2.0], vec![0.2, 0.25], vec![37, 24]).unwrap();
        let g = spec.sample(|x| Complex64::new(x[0].sin() * (-x[1] * x[1]).exp(), x[0] * 0.1));
        let gh = fft_transform(&g);
        let lhs = gh.energy();
        let rhs = (2.0 * PI).powi(2) * g.energy();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
        let back = ifft_transform(&gh, &spec.origin);
        for (a, b) in back.values.iter().zip(&g.values) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in back.spec.spacing.iter().zip(&spec.spacing) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }

    #[test]
    fn interpolation_reproduces_samples_and_cubics() {
        let spec = GridSpec::symmetric(2, 20, 0.5);
        let g = spec.sample(|x| Complex64::new(x[0] * x[0] - 0.5 * x[1], 0.0));
        let v = g.interpolate(&[0.5, -1.0]);
        assert_relative_eq!(v.re, 0.75, epsilon = 1e-12);
        // Keys kernel reproduces quadratics exactly away from the boundary
        let v = g.interpolate(&[0.3, 0.7]);
        assert_relative_eq!(v.re, 0.09 - 0.35, epsilon = 1e-12);
    }

    #[test]
    fn fd_derivative_accuracy() {
        let spec = GridSpec::symmetric(1, 200, 0.05);
        let g = spec.sample(|x| Complex64::new(x[0].sin(), 0.0));
        let d = g.derivative(&[1]);
        let mut x = [0.0];
        for flat in 0..d.values.len() {
            spec.point(flat, &mut x);
            assert!((d.values[flat].re - x[0].cos()).abs() < 1e-5);
        }
    }
}

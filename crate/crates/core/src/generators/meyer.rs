//! Band-limited generator built from a smooth partition of unity in the
//! logarithmic scale variable log_b ρ_{A*}(ξ).

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use super::grid::{ifft_transform, GridFunction, GridSpec};
use crate::error::Result;
use crate::geometry::{DilationInfo, QuasiNormMode};

/// Spatial oversampling of the lookup table relative to the band limit.
const TABLE_OVERSAMPLE: f64 = 8.0;
/// Cap on the total number of table samples.
const TABLE_MAX_POINTS: usize = 1 << 22;

pub struct MeyerData {
    pub(crate) dual: DilationInfo,
    pub(crate) order: u32,
    /// ψ̂ vanishes for |ξ| < gap_radius.
    pub(crate) gap_radius: f64,
    /// ψ̂ vanishes for |ξ| > support_radius.
    pub(crate) support_radius: f64,
    table: OnceLock<GridFunction>,
    derivative_tables: Mutex<HashMap<Vec<u32>, Arc<GridFunction>>>,
}

impl std::fmt::Debug for MeyerData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeyerData")
            .field("order", &self.order)
            .field("gap_radius", &self.gap_radius)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

/// Generalized smoothstep S_N on [0, 1], clamped outside.
pub fn smoothstep(order: u32, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let n = order as u64;
    let mut s = 0.0;
    for k in 0..=n {
        s += binomial(n + k, k) * binomial(2 * n + 1, n - k) * (-x).powi(k as i32);
    }
    s * x.powi(order as i32 + 1)
}

fn binomial(n: u64, k: u64) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r *= (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Profile in the log-scale variable u; supported in (−1, 1).
pub fn profile(order: u32, u: f64) -> f64 {
    if u <= -1.0 || u >= 1.0 {
        0.0
    } else if u <= 0.0 {
        (FRAC_PI_2 * smoothstep(order, u + 1.0)).sin()
    } else {
        (FRAC_PI_2 * smoothstep(order, u)).cos()
    }
}

impl MeyerData {
    pub fn new(d: &DilationInfo, order: u32) -> Result<Self> {
        let dual = d.adjoint()?.with_mode(QuasiNormMode::Smooth)?;
        let (r_in, r_out) = dual.smooth_ball_radii().expect("smooth mode validated above");
        let norm = dual.spectral_norm();
        Ok(MeyerData {
            gap_radius: r_in / norm,
            support_radius: r_out * norm,
            dual,
            order,
            table: OnceLock::new(),
            derivative_tables: Mutex::new(HashMap::new()),
        })
    }

    pub fn dim(&self) -> usize {
        self.dual.dimension
    }

    /// Log-scale coordinate u = log_b ρ_{A*}(ξ).
    pub fn log_scale(&self, xi: &[f64]) -> f64 {
        self.dual
            .smooth_scale(xi)
            .expect("smooth mode validated at construction")
    }

    pub fn fourier(&self, xi: &[f64]) -> f64 {
        let r2: f64 = xi.iter().map(|v| v * v).sum();
        if r2 < self.gap_radius * self.gap_radius || r2 > self.support_radius * self.support_radius {
            return 0.0;
        }
        profile(self.order, self.log_scale(xi))
    }

    fn table_spec(&self) -> GridSpec {
        let n = self.dim();
        let h = std::f64::consts::PI / (self.support_radius * TABLE_OVERSAMPLE);
        // period long enough for the slowly decaying tails
        let period = 32.0 * 2.0 * std::f64::consts::PI / self.gap_radius.max(1e-6);
        let mut count = ((period / h).ceil() as usize).next_power_of_two().max(16);
        let cap = (TABLE_MAX_POINTS as f64).powf(1.0 / n as f64).floor() as usize;
        let cap = if cap.is_power_of_two() {
            cap
        } else {
            cap.next_power_of_two() / 2
        };
        count = count.min(cap.max(16));
        GridSpec::symmetric(n, count, h)
    }

    fn build_table(&self, beta: &[u32]) -> GridFunction {
        let spatial = self.table_spec();
        let fspec = spatial.frequency_spec();
        let beta = beta.to_vec();
        let spectrum = fspec.sample(|xi| {
            let v = self.fourier(xi);
            if v == 0.0 {
                return Complex64::new(0.0, 0.0);
            }
            let mut c = Complex64::new(v, 0.0);
            for (k, &b) in beta.iter().enumerate() {
                c *= Complex64::new(0.0, xi[k]).powu(b);
            }
            c
        });
        ifft_transform(&spectrum, &spatial.origin)
    }

    /// Lazily built spatial table of ψ.
    pub fn table(&self) -> &GridFunction {
        self.table.get_or_init(|| self.build_table(&vec![0; self.dim()]))
    }

    pub fn derivative_table(&self, beta: &[u32]) -> Arc<GridFunction> {
        if beta.iter().all(|&b| b == 0) {
            return Arc::new(self.table().clone());
        }
        let mut cache = self.derivative_tables.lock().expect("table cache poisoned");
        cache
            .entry(beta.to_vec())
            .or_insert_with(|| Arc::new(self.build_table(beta)))
            .clone()
    }

    pub fn spatial(&self, x: &[f64]) -> Complex64 {
        self.table().interpolate(x)
    }

    pub fn spatial_radius(&self) -> f64 {
        let spec = self.table_spec();
        spec.extents[0] as f64 * spec.spacing[0] / 2.0
    }
}

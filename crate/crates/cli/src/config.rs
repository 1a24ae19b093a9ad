//! Run configuration: one TOML file per run.

use std::path::PathBuf;

use aniframe_core::calderon::{FrequencyGrid, Normalization, ShearMode, SweepConfig, DEFAULT_J_MAX};
use aniframe_core::dual_optimizer::{ObjectiveKind, OptimizeOptions};
use aniframe_core::embedding::{EmbeddingSetup, TestFamily};
use aniframe_core::frame_ops::InnerMethod;
use aniframe_core::generators::{Generator, GridSpec};
use aniframe_core::geometry::{matrix_from_rows, DilationInfo, QuasiNormMode};
use aniframe_core::lattice::{LatticeIndex, TruncationWindow, WeightParams};
use aniframe_core::molecular::MolecularParams;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

/// Either a config mistake or a rejection from the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum RunConfigError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] aniframe_core::Error),
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// overrides ANIFRAME_OUT
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    pub dilation: DilationConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub window: Option<WindowConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub molecular: MolecularConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub gram: GramConfig,
    #[serde(default)]
    pub neumann: NeumannConfig,
    #[serde(default)]
    pub calderon: CalderonConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub scaling: ScalingConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
}

fn default_p() -> f64 {
    1.0
}

fn default_q() -> f64 {
    2.0
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum QuasiNorm {
    #[default]
    Step,
    Smooth,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DilationConfig {
    /// row-major
    pub matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub quasi_norm: QuasiNorm,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    MexicanHat,
    Gaussian,
    GaussianDeriv,
    Meyer,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub kind: GeneratorKind,
    /// derivative multi-index for gaussian_deriv
    pub order: Option<Vec<u32>>,
    /// smoothness of the meyer profile (default 3)
    pub meyer_order: Option<u32>,
    /// dimension of the plain gaussian
    pub dim: Option<usize>,
    /// spatial width w: g ↦ w^{−n/2} g(x/w), L²-norm preserving
    pub width: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub j_range: [i32; 2],
    /// one [lo, hi] pair per axis, shared by every scale
    pub k_box: Vec<[i64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// points per axis, centred on the origin
    pub count: usize,
    pub spacing: f64,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MolecularConfig {
    pub decay: Option<f64>,
    pub smoothness: Option<u32>,
    pub quad_half: Option<f64>,
    pub quad_step: Option<f64>,
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    /// highest total degree; N_p(A) + 1 when absent
    pub order: Option<u32>,
    pub half_width: f64,
    pub step: f64,
    pub tol: f64,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        MomentsConfig {
            order: None,
            half_width: 12.0,
            step: 0.05,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GramConfig {
    pub method: InnerMethod,
    pub tol: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for GramConfig {
    fn default() -> Self {
        let w = WeightParams::default();
        GramConfig {
            method: InnerMethod::Auto,
            tol: 1e-8,
            delta: w.delta,
            epsilon: w.epsilon,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeumannConfig {
    /// contraction bound; measured from the Gram matrix when absent
    pub q_bound: Option<f64>,
    pub tol: f64,
    pub max_terms: usize,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        NeumannConfig {
            q_bound: None,
            tol: 1e-10,
            max_terms: 200,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalderonConfig {
    pub j_max: i32,
    pub radial: usize,
    pub angular: usize,
    pub normalization: Normalization,
    pub mode: ShearMode,
    pub s_values: Vec<f64>,
    pub base_scale: f64,
    pub pure_shear_floor: f64,
}

impl Default for CalderonConfig {
    fn default() -> Self {
        let s = SweepConfig::default();
        CalderonConfig {
            j_max: DEFAULT_J_MAX,
            radial: s.grid.radial,
            angular: s.grid.angular,
            normalization: Normalization::Auto,
            mode: s.mode,
            s_values: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            base_scale: s.base_scale,
            pure_shear_floor: s.pure_shear_floor,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub objective: ObjectiveKind,
    pub max_iter: usize,
    pub el_tol: f64,
    pub fd_step: f64,
    /// extra copies of these indices, written [j, k1, ..., kn]
    pub duplicates: Vec<Vec<i64>>,
    /// perturb the start with the run seed
    pub random_start: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        OptimizerConfig {
            objective: o.objective,
            max_iter: o.max_iter,
            el_tol: o.el_tol,
            fd_step: o.fd_step,
            duplicates: Vec::new(),
            random_start: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// one row-major matrix per run
    pub dilations: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub grid: GridConfig,
    pub scales: [i32; 2],
    pub margin: i64,
    pub atom_scales: Vec<i32>,
    pub mollifier: f64,
    pub syntheses: usize,
    pub nonzeros: usize,
    /// optimize the dual on [window]/[grid] first and use it in M
    pub use_optimized_dual: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            grid: GridConfig {
                count: 641,
                spacing: 1.0 / 32.0,
            },
            scales: [-4, 5],
            margin: 5,
            atom_scales: vec![-1, 0, 1],
            mollifier: 0.125,
            syntheses: 3,
            nonzeros: 2,
            use_optimized_dual: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::from_toml(&text)?, bytes))
    }

    /// Range checks that do not need the numerical core.
    fn check(&self) -> Result<(), ConfigError> {
        let n = self.dilation.matrix.len();
        if n == 0 || self.dilation.matrix.iter().any(|r| r.len() != n) {
            return Err(invalid("dilation.matrix", "must be a non-empty square matrix"));
        }
        if !(self.p > 0.0 && self.p <= 2.0) {
            return Err(invalid("p", format!("{} is outside (0, 2]", self.p)));
        }
        if !(self.q > self.p) || !self.q.is_finite() {
            return Err(invalid(
                "q",
                format!("{} must be finite and exceed p = {}", self.q, self.p),
            ));
        }
        if let Some(w) = &self.window {
            if w.j_range[0] > w.j_range[1] {
                return Err(invalid("window.j_range", "lower end exceeds upper end"));
            }
            if w.k_box.len() != n || w.k_box.iter().any(|b| b[0] > b[1]) {
                return Err(invalid("window.k_box", format!("needs {n} ordered [lo, hi] pairs")));
            }
        }
        if let Some(g) = &self.grid {
            check_grid("grid", g)?;
        }
        check_grid("embedding.grid", &self.embedding.grid)?;
        if let Some(w) = self.generator.width {
            if !(w > 0.0) || !w.is_finite() {
                return Err(invalid("generator.width", "must be positive"));
            }
        }
        let c = &self.calderon;
        if !(1..=64).contains(&c.j_max) {
            return Err(invalid("calderon.j_max", "must lie in 1..=64"));
        }
        if c.radial < 2 || c.angular < 2 {
            return Err(invalid("calderon.radial", "radial and angular need at least 2 samples"));
        }
        if !(c.base_scale > 1.0) {
            return Err(invalid("calderon.base_scale", "must exceed 1"));
        }
        let o = &self.optimizer;
        if o.max_iter == 0 || !(o.el_tol > 0.0) || !(o.fd_step > 0.0) {
            return Err(invalid("optimizer", "max_iter, el_tol and fd_step must be positive"));
        }
        if o.duplicates.iter().any(|d| d.len() != n + 1) {
            return Err(invalid("optimizer.duplicates", format!("entries are [j, k1..k{n}]")));
        }
        if let Some(q) = self.neumann.q_bound {
            if !(0.0..1.0).contains(&q) {
                return Err(invalid("neumann.q_bound", "must lie in [0, 1)"));
            }
        }
        if self.neumann.max_terms == 0 || !(self.neumann.tol > 0.0) {
            return Err(invalid("neumann", "max_terms and tol must be positive"));
        }
        if !(self.moments.half_width > 0.0 && self.moments.step > 0.0 && self.moments.tol > 0.0) {
            return Err(invalid("moments", "half_width, step and tol must be positive"));
        }
        let e = &self.embedding;
        if e.scales[0] > e.scales[1] || e.margin < 0 || !(e.mollifier > 0.0) {
            return Err(invalid(
                "embedding",
                "scales must be ordered, margin non-negative, mollifier positive",
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dilation.matrix.len()
    }

    pub fn dilation(&self) -> aniframe_core::Result<DilationInfo> {
        let m = matrix_from_rows(&self.dilation.matrix)?;
        let mode = match self.dilation.quasi_norm {
            QuasiNorm::Step => QuasiNormMode::Step,
            QuasiNorm::Smooth => QuasiNormMode::Smooth,
        };
        DilationInfo::new(&m, mode)
    }

    /// Generators that do not depend on the dilation; the partition does.
    pub fn analytic_generator(&self) -> Result<Generator, ConfigError> {
        let c = &self.generator;
        let g = match c.kind {
            GeneratorKind::MexicanHat => Generator::mexican_hat_2d(),
            GeneratorKind::Gaussian => Generator::gaussian(c.dim.unwrap_or(self.dim())),
            GeneratorKind::GaussianDeriv => Generator::gaussian_deriv(
                c.order
                    .clone()
                    .ok_or_else(|| invalid("generator.order", "gaussian_deriv needs a derivative multi-index"))?,
            ),
            GeneratorKind::Meyer => {
                return Err(invalid("generator.kind", "the meyer partition depends on the dilation"))
            }
        };
        self.widened(g)
    }

    fn widened(&self, g: Generator) -> Result<Generator, ConfigError> {
        let Some(w) = self.generator.width else { return Ok(g) };
        let n = g.dim();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 / w } else { 0.0 }).collect())
            .collect();
        let lin = matrix_from_rows(&rows).map_err(|e| invalid("generator.width", e.to_string()))?;
        let amp = Complex64::new(w.powf(-(n as f64) / 2.0), 0.0);
        g.affine(amp, &lin, &vec![0.0; n])
            .map_err(|e| invalid("generator.width", e.to_string()))
    }

    pub fn generator(&self, d: &DilationInfo) -> Result<Generator, RunConfigError> {
        let g = match self.generator.kind {
            GeneratorKind::Meyer => {
                let g = Generator::meyer_partition(d, self.generator.meyer_order.unwrap_or(3))?;
                self.widened(g)?
            }
            _ => self.analytic_generator()?,
        };
        if g.dim() != d.dimension {
            return Err(aniframe_core::Error::DimensionMismatch(format!(
                "generator {} is {}-dimensional, the dilation {}-dimensional",
                g.name(),
                g.dim(),
                d.dimension
            ))
            .into());
        }
        Ok(g)
    }

    pub fn window(&self) -> Result<TruncationWindow, ConfigError> {
        let w = self
            .window
            .as_ref()
            .ok_or_else(|| invalid("window", "section required"))?;
        TruncationWindow::uniform(
            w.j_range[0],
            w.j_range[1],
            w.k_box.iter().map(|b| (b[0], b[1])).collect(),
        )
        .map_err(|e| invalid("window", e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec, ConfigError> {
        let g = self.grid.as_ref().ok_or_else(|| invalid("grid", "section required"))?;
        Ok(GridSpec::symmetric(self.dim(), g.count, g.spacing))
    }

    pub fn molecular(&self, d: &DilationInfo) -> aniframe_core::Result<MolecularParams> {
        let mut m = MolecularParams::defaults(self.p, d)?;
        let c = &self.molecular;
        if let Some(v) = c.decay {
            m.decay = v;
        }
        if let Some(v) = c.smoothness {
            m.smoothness = v;
        }
        if let Some(v) = c.quad_half {
            m.quad_half = v;
        }
        if c.quad_step.is_some() {
            m.quad_step = c.quad_step;
        }
        if let Some(v) = c.tol {
            m.tol = v;
        }
        Ok(m)
    }

    pub fn weights(&self) -> WeightParams {
        WeightParams {
            delta: self.gram.delta,
            epsilon: self.gram.epsilon,
            p: self.p,
        }
    }

    pub fn frequency_grid(&self) -> FrequencyGrid {
        FrequencyGrid {
            radial: self.calderon.radial,
            angular: self.calderon.angular,
        }
    }

    pub fn sweep(&self, allow_pure_shear: bool) -> SweepConfig {
        let c = &self.calderon;
        SweepConfig {
            mode: c.mode,
            base_scale: c.base_scale,
            j_max: c.j_max,
            grid: self.frequency_grid(),
            normalization: c.normalization,
            allow_pure_shear,
            pure_shear_floor: c.pure_shear_floor,
        }
    }

    pub fn optimize_options(&self) -> OptimizeOptions {
        let o = &self.optimizer;
        OptimizeOptions {
            objective: o.objective,
            max_iter: o.max_iter,
            el_tol: o.el_tol,
            fd_step: o.fd_step,
            random_start: o.random_start.then_some(self.seed),
            weights: self.weights(),
            ..Default::default()
        }
    }

    pub fn duplicates(&self) -> Vec<LatticeIndex> {
        self.optimizer
            .duplicates
            .iter()
            .map(|v| LatticeIndex::new(v[0] as i32, v[1..].to_vec()))
            .collect()
    }

    pub fn embedding_setup(&self, d: &DilationInfo) -> aniframe_core::Result<EmbeddingSetup> {
        let e = &self.embedding;
        let grid = GridSpec::symmetric(self.dim(), e.grid.count, e.grid.spacing);
        EmbeddingSetup::meyer(d, grid, (e.scales[0], e.scales[1]), e.margin)
    }

    pub fn test_family(&self) -> aniframe_core::Result<TestFamily> {
        let e = &self.embedding;
        let mut f = TestFamily::default_for(self.dim())?;
        f.atom_scales = e.atom_scales.clone();
        f.mollifier = e.mollifier;
        f.syntheses = e.syntheses;
        f.nonzeros = e.nonzeros;
        f.seed = self.seed;
        if self.window.is_some() {
            if let Ok(w) = self.window() {
                f.synthesis_window = w;
            }
        }
        Ok(f)
    }
}

fn check_grid(key: &'static str, g: &GridConfig) -> Result<(), ConfigError> {
    if g.count < 2 || !(g.spacing > 0.0) || !g.spacing.is_finite() {
        return Err(invalid(key, "count must be at least 2 and spacing positive"));
    }
    Ok(())
}

//! One function per subcommand. Each reads the config, runs a pipeline and
//! writes its artifacts; numerical trouble is reported as `RunError::Numerical`
//! after whatever partial artifacts exist have been written.

use std::fmt::Write as _;

use aniframe_core::calderon::{conjecture_fit, obstruction_index, shear_sweep, write_sweep_csv};
use aniframe_core::dual_optimizer::{kappa_scaling_experiment, optimize_dual, write_scaling_csv, OptimizationStatus};
use aniframe_core::embedding::embedding_scan;
use aniframe_core::frame_ops::{
    decay_report, deviation_from_identity, gram_matrix, neumann_invert, save_matrix, FrameSystem, GramMatrix,
};
use aniframe_core::generators::io::save_grid;
use aniframe_core::generators::moments;
use aniframe_core::geometry::{kappa_2x2, matrix_from_rows, max_vanishing_order, DilationInfo};
use aniframe_core::lattice::almost_diagonal_fit;
use aniframe_core::molecular::molecular_report;
use aniframe_core::quadrature::QuadBox;
use aniframe_core::Error;
use serde_json::json;

use crate::artifacts::Artifacts;
use crate::config::{ConfigError, RunConfig, RunConfigError};

#[derive(Debug)]
pub enum RunError {
    /// bad input: exit 2
    Invalid(anyhow::Error),
    /// an iteration or quadrature failed: exit 3
    Numerical(anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Invalid(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Invalid(_) => "validation",
            RunError::Numerical(_) => "numerical",
        }
    }

    pub fn message(&self) -> String {
        match self {
            RunError::Invalid(e) | RunError::Numerical(e) => format!("{e:#}"),
        }
    }
}

/// `NotExpansive` for `Error::NotExpansive { .. }`.
fn variant(e: &Error) -> String {
    format!("{e:?}").chars().take_while(|c| c.is_alphanumeric()).collect()
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        let err = anyhow::anyhow!("{}: {e}", variant(&e));
        if e.is_numerical() {
            RunError::Numerical(err)
        } else {
            RunError::Invalid(err)
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Invalid(e.into())
    }
}

impl From<RunConfigError> for RunError {
    fn from(e: RunConfigError) -> Self {
        match e {
            RunConfigError::Config(c) => c.into(),
            RunConfigError::Core(c) => c.into(),
        }
    }
}

impl From<anyhow::Error> for RunError {
    fn from(e: anyhow::Error) -> Self {
        RunError::Invalid(e)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Flags {
    pub unsafe_pure_shear: bool,
}

type Outcome = Result<(), RunError>;

pub fn validate(cfg: &RunConfig, flags: Flags, out: &mut Artifacts) -> Outcome {
    let m = matrix_from_rows(&cfg.dilation.matrix)?;
    let d = match cfg.dilation() {
        Ok(d) => d,
        Err(Error::NotExpansive { min_modulus }) if flags.unsafe_pure_shear => {
            let det = m.determinant().abs();
            let kappa = (m.nrows() == 2).then(|| kappa_2x2(&m));
            out.json(
                "geometry.json",
                &json!({
                    "expansive": false,
                    "matrix": cfg.dilation.matrix,
                    "b": det,
                    "kappa": kappa,
                    "lambda_min_mod": min_modulus,
                    "warning": "matrix is not expansive; quasi-norm and lattice data are undefined",
                }),
            )?;
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let kappa = if d.dimension == 2 {
        kappa_2x2(&d.matrix)
    } else {
        d.condition_number
    };
    out.json(
        "geometry.json",
        &json!({
            "expansive": true,
            "b": d.determinant_abs,
            "kappa": kappa,
            "p": cfg.p,
            "n_p": max_vanishing_order(cfg.p, &d)?,
            "geometry": d.report(),
        }),
    )?;
    Ok(())
}

pub fn moments_table(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let required = max_vanishing_order(cfg.p, &d)?;
    let order = cfg.moments.order.unwrap_or((required + 1).max(0) as u32);
    let mc = &cfg.moments;
    let qb = QuadBox::cube(d.dimension, mc.half_width, mc.step);
    let table = moments(&g, order, &qb);
    out.csv("moments.csv", |w| {
        let mut s = String::from("gamma,moment,doubling_change\n");
        for (gamma, value, change) in &table {
            let idx: Vec<String> = gamma.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{},{value:.12e},{change:.3e}", idx.join(" "));
        }
        w.extend_from_slice(s.as_bytes());
        Ok(())
    })?;
    let worst_change = table.iter().map(|t| t.2).fold(0.0, f64::max);
    // highest m with every moment of degree ≤ m below tol; −1 if the mean survives
    let mut vanishing = order as i64;
    for (gamma, value, _) in &table {
        if value.abs() > mc.tol {
            vanishing = vanishing.min(gamma.iter().sum::<u32>() as i64 - 1);
        }
    }
    out.json(
        "moments.json",
        &json!({
            "generator": g.name(),
            "order": order,
            "vanishing_order": vanishing,
            "required": required,
            "admissible": vanishing >= required,
            "tol": mc.tol,
            "max_doubling_change": worst_change,
        }),
    )?;
    if worst_change > mc.tol {
        return Err(RunError::Numerical(anyhow::anyhow!(
            "moment quadrature changed by {worst_change:.3e} when the box was doubled (tol {:.1e})",
            mc.tol
        )));
    }
    Ok(())
}

fn gram(cfg: &RunConfig) -> Result<(DilationInfo, GramMatrix), RunError> {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let sys = FrameSystem::self_dual(g, d.clone(), cfg.window()?)?;
    let s = gram_matrix(&sys, cfg.gram.method, cfg.gram.tol)?;
    Ok((d, s))
}

fn mean_diagonal(s: &GramMatrix) -> f64 {
    (0..s.dim()).map(|i| s.entries[(i, i)].re).sum::<f64>() / s.dim().max(1) as f64
}

pub fn gram_report(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let (d, s) = gram(cfg)?;
    out.binary("gram.afmat", |p| save_matrix(p, &s))?;
    let w = cfg.weights();
    let ref_diag = mean_diagonal(&s);
    let dev = deviation_from_identity(&s, ref_diag, &d, w)?;
    let fit = almost_diagonal_fit(&s.entries, &s.window, w.delta, w.epsilon, w.p, &d)?;
    out.json(
        "gram.json",
        &json!({
            "matrix_file": "gram.afmat",
            "size": s.dim(),
            "method": s.method,
            "hermitian_defect": s.hermitian_defect(),
            "ref_diag": ref_diag,
            "deviation": dev,
            "almost_diagonal": fit,
        }),
    )?;
    Ok(())
}

pub fn invert(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let (d, s) = gram(cfg)?;
    let w = cfg.weights();
    let ref_diag = mean_diagonal(&s);
    let q = match cfg.neumann.q_bound {
        Some(q) => q,
        None => deviation_from_identity(&s, ref_diag, &d, w)?.spectral,
    };
    let nc = &cfg.neumann;
    let res = match neumann_invert(&s, ref_diag, q, nc.tol, nc.max_terms) {
        Ok(r) => r,
        Err(e) => {
            out.binary("gram.afmat", |p| save_matrix(p, &s))?;
            return Err(e.into());
        }
    };
    out.binary("inverse.afmat", |p| save_matrix(p, &res.inverse))?;
    let decay = decay_report(&s, &res.inverse, &d, w)?;
    out.json(
        "invert.json",
        &json!({
            "matrix_file": "inverse.afmat",
            "size": s.dim(),
            "ref_diag": ref_diag,
            "q": q,
            "terms_used": res.terms_used,
            "tail_bound": res.tail_bound,
            "residual": res.residual,
            "decay": decay,
        }),
    )?;
    if res.residual > res.tail_bound.max(nc.tol) * 10.0 {
        return Err(RunError::Numerical(anyhow::anyhow!(
            "Neumann residual {:.3e} exceeds the tail bound {:.3e}",
            res.residual,
            res.tail_bound
        )));
    }
    Ok(())
}

pub fn calderon(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let c = &cfg.calderon;
    let report = obstruction_index(&g, &d, cfg.frequency_grid(), c.j_max, c.normalization)?;
    out.json("calderon.json", &report)?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig, flags: Flags, out: &mut Artifacts) -> Outcome {
    // the sweep builds its own dilations, so only analytic generators apply
    let g = cfg.analytic_generator()?;
    let rows = shear_sweep(&g, &cfg.calderon.s_values, &cfg.sweep(flags.unsafe_pure_shear))?;
    out.csv("sweep.csv", |w| write_sweep_csv(w, &rows))?;
    let fit = match conjecture_fit(&rows) {
        Ok(f) => json!(f),
        Err(e) => json!({ "unavailable": e.to_string() }),
    };
    out.json(
        "sweep.json",
        &json!({
            "rows": rows,
            "conjecture_fit": fit,
            "note": "the conjecture fit is exploratory",
        }),
    )?;
    Ok(())
}

pub fn molnorm(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let report = molecular_report(&g, &d, &cfg.molecular(&d)?)?;
    out.json("molnorm.json", &report)?;
    Ok(())
}

pub fn optimize(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let opts = cfg.optimize_options();
    let res = optimize_dual(
        &g,
        &d,
        &cfg.window()?,
        &cfg.grid()?,
        &cfg.duplicates(),
        &cfg.molecular(&d)?,
        &opts,
    )?;
    out.binary("dual.afgrid", |p| save_grid(p, &res.dual_samples))?;
    out.csv("trace.csv", |w| {
        let mut s = String::from("iteration,objective\n");
        for (i, v) in res.trace.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:.15e}");
        }
        w.extend_from_slice(s.as_bytes());
        Ok(())
    })?;
    out.json(
        "optimize.json",
        &json!({
            "dual_file": "dual.afgrid",
            "pair_constant": res.pair_constant(),
            "step_robust": res.step_robust(opts.el_tol),
            "result": res,
        }),
    )?;
    match res.status {
        OptimizationStatus::Converged | OptimizationStatus::Trivial => Ok(()),
        s => Err(RunError::Numerical(anyhow::anyhow!(
            "optimizer stopped with status {s:?}, el residual {:.3e} (tol {:.1e})",
            res.el_residual,
            opts.el_tol
        ))),
    }
}

pub fn scaling(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let dilations = cfg
        .scaling
        .dilations
        .iter()
        .map(|m| DilationInfo::from_rows(m))
        .collect::<aniframe_core::Result<Vec<_>>>()?;
    let first = dilations
        .first()
        .ok_or_else(|| RunError::Invalid(anyhow::anyhow!("scaling.dilations: at least 3 matrices are needed")))?;
    let g = cfg.generator(first)?;
    let m = &cfg.molecular;
    let overrides = m.decay.is_some()
        || m.smoothness.is_some()
        || m.quad_half.is_some()
        || m.quad_step.is_some()
        || m.tol.is_some();
    // explicit molecular settings apply to every dilation; otherwise per-A defaults
    let params = if overrides { Some(cfg.molecular(first)?) } else { None };
    let res = kappa_scaling_experiment(
        &g,
        cfg.p,
        &dilations,
        &cfg.window()?,
        &cfg.grid()?,
        params.as_ref(),
        &cfg.optimize_options(),
    )?;
    out.csv("scaling.csv", |w| write_scaling_csv(w, &res.rows))?;
    out.json("scaling.json", &res)?;
    Ok(())
}

pub fn embed(cfg: &RunConfig, _flags: Flags, out: &mut Artifacts) -> Outcome {
    let d = cfg.dilation()?;
    let g = cfg.generator(&d)?;
    let params = cfg.molecular(&d)?;
    let duals = if cfg.embedding.use_optimized_dual {
        let res = optimize_dual(
            &g,
            &d,
            &cfg.window()?,
            &cfg.grid()?,
            &cfg.duplicates(),
            &params,
            &cfg.optimize_options(),
        )?;
        vec![res.dual_samples]
    } else {
        Vec::new()
    };
    let setup = cfg.embedding_setup(&d)?;
    let family = cfg.test_family()?;
    let report = embedding_scan(&g, &duals, &d, cfg.p, cfg.q, &setup, &family, &params)?;
    out.csv("embedding.csv", |w| report.write_csv(w))?;
    out.json("embedding.json", &report)?;
    Ok(())
}

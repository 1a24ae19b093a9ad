//! Box-doubling Riemann/trapezoid quadrature on ℝⁿ.
//!
//! For rapidly decaying integrands the boundary terms of the trapezoid rule
//! are negligible, so the plain cell sum is used. One sweep over the doubled
//! box yields both the inner and the outer estimate.

use crate::par;

/// Integration box centred at `center` with half-widths `half` and step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadBox {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
    pub step: Vec<f64>,
}

impl QuadBox {
    pub fn cube(dim: usize, half: f64, step: f64) -> Self {
        QuadBox {
            center: vec![0.0; dim],
            half: vec![half; dim],
            step: vec![step; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn doubled(&self) -> Self {
        QuadBox {
            center: self.center.clone(),
            half: self.half.iter().map(|h| 2.0 * h).collect(),
            step: self.step.clone(),
        }
    }

    pub fn refined(&self) -> Self {
        QuadBox {
            center: self.center.clone(),
            half: self.half.clone(),
            step: self.step.iter().map(|h| h / 2.0).collect(),
        }
    }
}

/// Result of a doubling sweep: integrals over the box and over the doubled box.
#[derive(Clone, Debug)]
pub struct DoublingEstimate {
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
}

impl DoublingEstimate {
    pub fn max_change(&self) -> f64 {
        self.inner
            .iter()
            .zip(&self.outer)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Integrate a vector-valued integrand with `m` components over `qb` and its
/// doubled box in one pass. The integrand writes its values into the slice.
pub fn integrate_doubling<F>(qb: &QuadBox, m: usize, f: F) -> DoublingEstimate
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    let n = qb.dim();
    let counts: Vec<usize> = (0..n)
        .map(|i| (2.0 * qb.half[i] / qb.step[i]).ceil() as usize)
        .collect();
    // samples at c + t·h, t ∈ [−2K, 2K]
    let extents: Vec<usize> = counts.iter().map(|k| 4 * k + 1).collect();
    let rows = extents[0];
    let rest: usize = extents[1..].iter().product();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map_range(rows, |r| {
        let mut inner = vec![0.0; m];
        let mut outer = vec![0.0; m];
        let mut x = vec![0.0; n];
        let mut vals = vec![0.0; m];
        let t0 = r as i64 - 2 * counts[0] as i64;
        x[0] = qb.center[0] + t0 as f64 * qb.step[0];
        let row_inner = (t0.unsigned_abs() as f64) * qb.step[0] <= qb.half[0] + 1e-12 * qb.step[0];
        for flat in 0..rest {
            let mut rem = flat;
            let mut is_inner = row_inner;
            for i in (1..n).rev() {
                let e = extents[i];
                let t = (rem % e) as i64 - 2 * counts[i] as i64;
                rem /= e;
                x[i] = qb.center[i] + t as f64 * qb.step[i];
                if (t.unsigned_abs() as f64) * qb.step[i] > qb.half[i] + 1e-12 * qb.step[i] {
                    is_inner = false;
                }
            }
            vals.iter_mut().for_each(|v| *v = 0.0);
            f(&x, &mut vals);
            for k in 0..m {
                outer[k] += vals[k];
                if is_inner {
                    inner[k] += vals[k];
                }
            }
        }
        (inner, outer)
    });
    let cell: f64 = qb.step.iter().product();
    let mut inner = vec![0.0; m];
    let mut outer = vec![0.0; m];
    for (pi, po) in &partials {
        for k in 0..m {
            inner[k] += pi[k];
            outer[k] += po[k];
        }
    }
    for k in 0..m {
        inner[k] *= cell;
        outer[k] *= cell;
    }
    DoublingEstimate { inner, outer }
}

/// Scalar convenience wrapper.
pub fn integrate_scalar<F>(qb: &QuadBox, f: F) -> DoublingEstimate
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    integrate_doubling(qb, 1, |x, out| out[0] = f(x))
}

/// All multi-indices of length `dim` with total degree ≤ `max_degree`,
/// ordered by degree then lexicographically.
pub fn multi_indices(dim: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for deg in 0..=max_degree {
        let mut cur = vec![0u32; dim];
        fill(&mut out, &mut cur, 0, deg);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k;
        fill(out, cur, pos + 1, remaining - k);
    }
    cur[pos] = 0;
}

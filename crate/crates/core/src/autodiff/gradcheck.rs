//! Central-difference verification of recorded gradients (fp64 only).

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use super::AutodiffError;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is exactly zero compare absolutely.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-8,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward sweep of `loss` with central differences in every
/// selected parameter coordinate.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    loss: F,
    params: &[ParamId],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>) -> Result<Var<'g, f64>, AutodiffError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, AutodiffError> {
        let g = Graph::new();
        let l = loss(&g, s)?;
        Ok(l.item())
    };
    let analytic = {
        let g = Graph::new();
        let l = loss(&g, store)?;
        g.backward(l, store.len())?
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for &id in params {
        let n = store.get(id).len();
        let stride = opts.max_coords_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric, opts.abs_floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some(Mismatch {
                        param: store.name(id).to_string(),
                        index: k,
                        analytic: a,
                        numeric,
                        rel_err: err,
                    });
                }
            }
        }
    }
    Ok(report)
}

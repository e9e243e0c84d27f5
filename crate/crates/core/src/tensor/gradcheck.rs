//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;

use super::graph::Gradients;
use super::params::{ParamStore, Rng64};
use crate::error::Result;

/// Entries whose analytic and numeric gradients are both below this magnitude
/// are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `grads` against `(L(p + h) - L(p - h)) / 2h` for up to
/// `per_param` randomly chosen entries of every parameter in `grads` whose
/// name starts with `prefix`.
pub fn check_gradients<F>(
    store: &ParamStore,
    grads: &Gradients,
    prefix: &str,
    step: f64,
    per_param: usize,
    rng: &mut Rng64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (name, g) in grads.named() {
        if !name.starts_with(prefix) {
            continue;
        }
        let n = g.len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(rng, n, per_param).into_vec()
        };
        for k in picks {
            let orig = work.get(name).expect("gradient names come from the store").data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let up = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let down = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = g.data()[k];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), k, analytic, numeric));
            }
        }
    }
    Ok(report)
}

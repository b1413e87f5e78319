//! Central finite-difference check of tape gradients.

use super::tape::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, element index, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with central differences of step
/// `step` for every element of every parameter in `stores`.
///
/// `loss` must be a pure function of the store values (fix any RNG inside).
/// Parameters that do not reach the loss have analytic gradient 0.
pub fn check_gradients<F>(stores: &mut [&mut ParamStore], step: f64, floor: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&[&ParamStore], &mut Tape) -> Result<Var>,
{
    let analytic = {
        let refs: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let l = loss(&refs, &mut tape)?;
        tape.backward(l)?
    };
    let eval = |stores: &[&mut ParamStore]| -> Result<f64> {
        let refs: Vec<&ParamStore> = stores.iter().map(|s| &**s).collect();
        let mut tape = Tape::new();
        let l = loss(&refs, &mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut report = GradCheckReport::default();
    for si in 0..stores.len() {
        let ids: Vec<_> = stores[si].ids().collect();
        for id in ids {
            let grad = analytic.get(stores[si], id).cloned();
            for e in 0..stores[si].get(id).len() {
                let orig = stores[si].get(id).data()[e];
                stores[si].get_mut(id).data_mut()[e] = orig + step;
                let up = eval(stores)?;
                stores[si].get_mut(id).data_mut()[e] = orig - step;
                let down = eval(stores)?;
                stores[si].get_mut(id).data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = grad.as_ref().map_or(0.0, |g| g.data()[e]);
                let rel = relative_error(a, numeric, floor);
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = rel;
                    report.worst = Some((stores[si].name(id).to_string(), e, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

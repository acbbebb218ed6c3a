//! Central finite-difference checks against reverse-mode gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `(parameter name, norm-wise relative error)` for every trainable tensor.
    pub per_param: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn worst_name(&self) -> Option<&str> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|p| p.0.as_str())
    }
}

/// Gradient norms below `NORM_FLOOR · max(1, |loss|)` are compared on an
/// absolute scale, since difference roundoff grows with the loss value.
pub const NORM_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floor(analytic, numeric, NORM_FLOOR)
}

fn relative_error_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Compares tape gradients of `build`'s scalar loss with central differences
/// over every element of every trainable parameter. `build` must be a pure
/// function of the store (seed its tape identically on every call).
pub fn check_params<F>(store: &ParamStore<f64>, build: F) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>,
{
    let (mut tape, loss) = build(store)?;
    let floor = NORM_FLOOR * tape.value(loss).item().abs().max(1.0);
    tape.backward(loss)?;
    let analytic = tape.param_grads(store);
    let mut probe = store.clone();
    let mut per_param = Vec::new();
    for (id, grad) in store.ids().zip(analytic) {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let mut numeric = vec![0.0; entry.value.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = entry.value.data()[j];
            probe.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let (t, l) = build(&probe)?;
            let up = t.value(l).item();
            probe.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let (t, l) = build(&probe)?;
            let down = t.value(l).item();
            probe.get_mut(id).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        per_param.push((entry.name.clone(), relative_error_floor(grad.data(), &numeric, floor)));
    }
    Ok(GradReport { per_param })
}

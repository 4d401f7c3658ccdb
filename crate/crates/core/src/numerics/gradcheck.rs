//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst element.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Below this magnitude central differences are dominated by roundoff
/// (about `1e-16 |f| / epsilon`), so the error is measured absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// for every element of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore, loss_fn: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_selected(store, loss_fn, epsilon, |_| true)
}

/// [`grad_check`] restricted to the parameters whose name passes `select`.
pub fn grad_check_selected<F, S>(store: &mut ParamStore, loss_fn: F, epsilon: f64, select: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.value(loss).item()
    };

    let ids: Vec<_> = store.ids().filter(|&id| select(&store.get(id).name)).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            if err > worst {
                worst = err;
                worst_pair = (a, numeric);
            }
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            elements: n,
            max_rel_error: worst,
            worst: worst_pair,
        });
    }
    Ok(GradCheckReport { params })
}

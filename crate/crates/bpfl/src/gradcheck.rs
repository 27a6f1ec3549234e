//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely at the tolerance scale.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares `analytic` against central differences of `loss_fn` for every
/// trainable parameter in `params`. A trainable parameter missing from
/// `analytic` is treated as an all-zero gradient claim.
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    analytic: &IndexMap<String, Tensor>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let n_elems = params.get(&name)?.value.len();
        let mut max_rel = 0.0f64;
        for i in 0..n_elems {
            let orig = params.get(&name)?.value.data()[i];
            params.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let up = loss_fn(params)?;
            params.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let down = loss_fn(params)?;
            params.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic_v = match analytic.get(&name) {
                Some(t) => {
                    if t.len() != n_elems {
                        return Err(Error::Shape(format!(
                            "analytic gradient for {name:?} has {} elements, parameter has {n_elems}",
                            t.len()
                        )));
                    }
                    t.data()[i]
                }
                None => 0.0,
            };
            max_rel = max_rel.max(rel_err(analytic_v, numeric));
        }
        checks.push(ParamCheck {
            name,
            max_rel_err: max_rel,
        });
    }
    Ok(GradCheckReport { checks, tolerance })
}

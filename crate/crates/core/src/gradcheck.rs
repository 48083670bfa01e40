//! Central finite-difference check of the training objective's gradients.

use std::collections::BTreeSet;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::EditedSample;
use crate::error::{invalid, Result};
use crate::losses::LossWeights;
use crate::params::ParamStore;
use crate::pipeline::{Pipeline, Setting, TrainExample};
use crate::tape::Mat;

/// Below this magnitude the relative error falls back to the absolute one.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude, to spot tensors the loss ignores.
    pub max_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// What the objective is evaluated on.
pub struct Objective<'a> {
    pub setting: Setting,
    pub samples: &'a [EditedSample],
    pub prompt_id: usize,
    pub weights: LossWeights,
}

impl Objective<'_> {
    /// Loss at `params`, recomputing every input feature so that nothing is
    /// cached across perturbations.
    fn eval(&self, pipeline: &Pipeline, trainable: &BTreeSet<String>, grads: bool) -> Result<(f64, Option<ParamStore>)> {
        let feats = self
            .samples
            .iter()
            .map(|s| pipeline.features(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let examples: Vec<TrainExample> = self
            .samples
            .iter()
            .zip(&feats)
            .map(|(s, f)| TrainExample {
                features: f,
                mask: Rc::new(s.mask.to_f64()),
                instruction: &s.instruction,
                prompt_id: self.prompt_id,
            })
            .collect();
        let mut g = pipeline.graph(trainable);
        let (total, _) = pipeline.batch_objective(&mut g, self.setting, &examples, &self.weights)?;
        let loss = g.tape.scalar(total);
        let grads = grads.then(|| {
            let mut store = ParamStore::new();
            for (name, m) in g.param_grads(total) {
                store.insert(name, m);
            }
            store
        });
        Ok((loss, grads))
    }
}

/// Compares the analytic gradient of every trainable entry against
/// `(f(x+h) - f(x-h)) / 2h`.
pub fn check_gradients(pipeline: &Pipeline, objective: &Objective, step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid!("finite-difference step must be positive"));
    }
    if objective.samples.is_empty() {
        return Err(invalid!("gradient check needs at least one sample"));
    }
    let trainable = pipeline.trainable(objective.setting)?;
    let (loss, grads) = objective.eval(pipeline, &trainable, true)?;
    let grads = grads.expect("requested");
    let mut probe = pipeline.clone();
    let mut tensors = Vec::new();
    for name in &trainable {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(pipeline.params[name].dim()));
        let mut check = TensorCheck {
            name: name.clone(),
            entries: analytic.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: analytic.iter().fold(0.0, |a, v| a.max(v.abs())),
        };
        let dims = analytic.dim();
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                let orig = probe.params[name][[r, c]];
                let mut at = |v: f64| -> Result<f64> {
                    probe.params.get_mut(name).expect("trainable name")[[r, c]] = v;
                    Ok(objective.eval(&probe, &trainable, false)?.0)
                };
                let up = at(orig + step)?;
                let down = at(orig - step)?;
                probe.params.get_mut(name).expect("trainable name")[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[[r, c]];
                check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
                check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { loss, step, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        // tiny values are judged on absolute error
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}

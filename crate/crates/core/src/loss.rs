//! Multi-task detection loss (soft-max cross entropy + smooth-L1 on
//! foreground RoIs) and online hard example selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegressionTarget;
use crate::head::ComponentScores;
use crate::real::Real;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of RoIs kept for backpropagation per image.
pub const OHEM_ROIS: usize = 128;

fn check_distribution<T: Real>(prob: &[T]) -> Result<()> {
    let mut sum = 0.0;
    for &p in prob {
        let p = p.f64();
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidDistribution(format!("entry {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// `-log prob[label]`, clamped at [`PROB_FLOOR`].
pub fn cross_entropy<T: Real>(prob: &[T], label: usize) -> Result<f64> {
    check_distribution(prob)?;
    let p = prob
        .get(label)
        .ok_or_else(|| Error::IndexOutOfRange(format!("label {label} of {} classes", prob.len())))?;
    Ok(-p.f64().max(PROB_FLOOR).ln())
}

fn huber(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Smooth-L1 summed over the four offsets.
pub fn smooth_l1(t: &RegressionTarget, t_star: &RegressionTarget) -> f64 {
    t.to_array()
        .iter()
        .zip(t_star.to_array())
        .map(|(a, b)| huber(a - b).0)
        .sum()
}

/// How the losses of the mixture components of one RoI combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentReduction {
    /// Components share no parameters, so summing gives each the step size
    /// it would get trained alone, whatever the mixture size.
    #[default]
    Sum,
    Mean,
}

impl ComponentReduction {
    pub fn weight(self, components: usize) -> f64 {
        match self {
            ComponentReduction::Sum => 1.0,
            ComponentReduction::Mean => 1.0 / components as f64,
        }
    }
}

/// Weights of the multi-task objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    /// Regression weight relative to classification.
    pub lambda_task: f64,
    /// Raw regressor outputs are compared with `target / reg_std`.
    pub reg_std: [f64; 4],
    pub components: ComponentReduction,
}

/// One RoI in a training batch: its scores from every component and its
/// assignment.
#[derive(Debug, Clone)]
pub struct RoISample<T> {
    pub scores: Vec<ComponentScores<T>>,
    pub label: usize,
    /// Present exactly for foreground RoIs.
    pub target: Option<RegressionTarget>,
}

/// Loss breakdown for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_reg: f64,
    pub lambda_task: f64,
    pub total: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

/// Gradients of the batch loss with respect to one RoI's raw outputs, per component.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiGrad<T> {
    pub raw: Vec<Vec<T>>,
    pub reg: Vec<[T; 4]>,
}

impl<T: Real> RoiGrad<T> {
    fn zeros(sample: &RoISample<T>) -> Self {
        RoiGrad {
            raw: sample.scores.iter().map(|s| vec![T::zero(); s.raw.len()]).collect(),
            reg: vec![[T::zero(); 4]; sample.scores.len()],
        }
    }
}

// Regression residual in raw regressor units.
fn residual<T: Real>(s: &ComponentScores<T>, target: &RegressionTarget, reg_std: &[f64; 4]) -> [f64; 4] {
    let t = target.to_array();
    std::array::from_fn(|k| s.reg[k].f64() - t[k] / reg_std[k])
}

fn check_sample<T: Real>(s: &RoISample<T>) -> Result<()> {
    if s.scores.is_empty() {
        return Err(Error::IndexOutOfRange("RoI without component scores".into()));
    }
    if (s.label == 0) != s.target.is_none() {
        return Err(Error::InvalidRegression(format!(
            "label {} with target {:?}",
            s.label, s.target
        )));
    }
    Ok(())
}

/// Classification plus `lambda` times regression loss of one RoI, combined
/// over components. Used for hard example ranking.
pub fn per_roi_loss<T: Real>(s: &RoISample<T>, spec: &LossSpec) -> Result<f64> {
    check_sample(s)?;
    let mut total = 0.0;
    for c in &s.scores {
        total += cross_entropy(&c.prob, s.label)?;
        if let Some(t) = &s.target {
            total += spec.lambda_task * residual(c, t, &spec.reg_std).iter().map(|&d| huber(d).0).sum::<f64>();
        }
    }
    Ok(total * spec.components.weight(s.scores.len()))
}

/// Indices of the `n` highest-loss RoIs in descending loss order (ties to the lower index).
pub fn ohem_select(losses: &[f64], n: usize) -> Vec<usize> {
    let mut order = crate::geometry::descending_order(losses);
    order.truncate(n.max(1));
    order
}

/// Multi-task loss over the `selected` RoIs of `batch`.
///
/// `L = 1/N_cls sum CE + lambda/N_reg sum_{fg} smoothL1`, each term combined
/// over mixture components as `spec.components` says. `N_cls` is the number of selected RoIs and `N_reg`
/// the number of selected foreground RoIs (at least 1). Unselected RoIs get
/// zero gradients.
pub fn multi_task_loss<T: Real>(
    batch: &[RoISample<T>],
    selected: &[usize],
    spec: &LossSpec,
) -> Result<(LossReport, Vec<RoiGrad<T>>)> {
    let lambda_task = spec.lambda_task;
    if batch.is_empty() || selected.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        check_sample(s)?;
    }
    let n_cls = selected.len();
    let n_fg = selected.iter().filter(|&&j| batch[j].label > 0).count();
    let n_reg = n_fg.max(1);
    let mut grads: Vec<RoiGrad<T>> = batch.iter().map(RoiGrad::zeros).collect();
    let (mut cls_sum, mut reg_sum) = (0.0, 0.0);
    for &j in selected {
        let s = batch
            .get(j)
            .ok_or_else(|| Error::IndexOutOfRange(format!("selected RoI {j}")))?;
        let w = spec.components.weight(s.scores.len());
        let g = &mut grads[j];
        for (i, c) in s.scores.iter().enumerate() {
            cls_sum += cross_entropy(&c.prob, s.label)? * w;
            let clamped = c.prob[s.label].f64() < PROB_FLOOR;
            let scale = w / n_cls as f64;
            for (k, gr) in g.raw[i].iter_mut().enumerate() {
                let onehot = if k == s.label { 1.0 } else { 0.0 };
                let d = if clamped { 0.0 } else { c.prob[k].f64() - onehot };
                *gr += T::of(d * scale);
            }
            if let Some(t) = &s.target {
                let r = residual(c, t, &spec.reg_std);
                let scale = lambda_task * w / n_reg as f64;
                for k in 0..4 {
                    let (v, dv) = huber(r[k]);
                    reg_sum += v * w;
                    g.reg[i][k] += T::of(dv * scale);
                }
            }
        }
    }
    let l_cls = cls_sum / n_cls as f64;
    let l_reg = reg_sum / n_reg as f64;
    Ok((
        LossReport {
            l_cls,
            l_reg,
            lambda_task,
            total: l_cls + lambda_task * l_reg,
            n_cls,
            n_reg,
        },
        grads,
    ))
}

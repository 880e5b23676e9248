//! Mixture of aspect-ratio-aware object models: per-component class templates,
//! a category-agnostic box regressor, soft-max and the MAX component selector.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{decode, CenterBox, RegressionTarget};
use crate::pooling::pool_roi;
use crate::psmap::{ARConfig, PSMapSet};
use crate::real::Real;

/// Largest log-size offset applied at inference (a 1000/16 size change).
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356;

/// Templates of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentTemplates<T> {
    /// `(C+1) x (3K*h*w)`: one flattened template per class, background first.
    pub cls: Array2<T>,
    /// `4 x (3K*h*w)`.
    pub reg: Array2<T>,
    /// `(C+1) + 4` biases: class scores then regression outputs.
    pub bias: Array1<T>,
}

impl<T: Real> ComponentTemplates<T> {
    pub fn zeros(classes: usize, feature_len: usize) -> Self {
        ComponentTemplates {
            cls: Array2::zeros((classes, feature_len)),
            reg: Array2::zeros((4, feature_len)),
            bias: Array1::zeros(classes + 4),
        }
    }

    pub fn feature_len(&self) -> usize {
        self.cls.ncols()
    }

    pub fn classes(&self) -> usize {
        self.cls.nrows()
    }

    /// The same component as one fully connected layer with `(C+1)+4` outputs.
    pub fn as_fully_connected(&self) -> (Array2<T>, Array1<T>) {
        let rows = self.classes() + 4;
        let mut w = Array2::zeros((rows, self.feature_len()));
        w.slice_mut(ndarray::s![..self.classes(), ..]).assign(&self.cls);
        w.slice_mut(ndarray::s![self.classes().., ..]).assign(&self.reg);
        (w, self.bias.clone())
    }

    pub fn cast<U: Real>(&self) -> ComponentTemplates<U> {
        ComponentTemplates {
            cls: self.cls.mapv(|v| U::of(v.f64())),
            reg: self.reg.mapv(|v| U::of(v.f64())),
            bias: self.bias.mapv(|v| U::of(v.f64())),
        }
    }
}

/// Class templates and regressors of every mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank<T> {
    pub comps: Vec<ComponentTemplates<T>>,
}

impl<T: Real> TemplateBank<T> {
    pub fn zeros(cfg: &ARConfig) -> Self {
        TemplateBank {
            comps: (0..cfg.components())
                .map(|i| ComponentTemplates::zeros(cfg.score_len(), cfg.feature_len(i)))
                .collect(),
        }
    }

    /// Zero-mean normal templates with variance `2 / fan_in`, zero biases.
    pub fn init<R: Rng>(cfg: &ARConfig, rng: &mut R) -> Self {
        let mut bank = Self::zeros(cfg);
        for c in &mut bank.comps {
            let std = (2.0 / c.feature_len() as f64).sqrt();
            c.cls
                .mapv_inplace(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)));
            c.reg
                .mapv_inplace(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)));
        }
        bank
    }

    pub fn check(&self, cfg: &ARConfig) -> Result<()> {
        if self.comps.len() != cfg.components() {
            return Err(Error::shape(
                format!("{} components", cfg.components()),
                self.comps.len(),
            ));
        }
        for (i, c) in self.comps.iter().enumerate() {
            let want = (cfg.score_len(), cfg.feature_len(i));
            if c.cls.dim() != want || c.reg.dim() != (4, want.1) || c.bias.len() != want.0 + 4 {
                return Err(Error::shape(format!("{want:?}"), format!("{:?}", c.cls.dim())));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> TemplateBank<U> {
        TemplateBank {
            comps: self.comps.iter().map(ComponentTemplates::cast).collect(),
        }
    }
}

/// Scores of one component for one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScores<T> {
    pub raw: Vec<T>,
    pub prob: Vec<T>,
    /// Raw regressor outputs, before scaling by `reg_std`.
    pub reg: [T; 4],
    /// Offsets ready for [`decode`].
    pub treg: RegressionTarget,
}

impl<T: Real> ComponentScores<T> {
    pub fn max_prob(&self, include_background: bool) -> T {
        let from = usize::from(!include_background);
        self.prob[from..].iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// `argmax_j prob_j`, ties to the lower class id.
    pub fn best_class(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.prob.iter().enumerate() {
            if p > self.prob[best] {
                best = j;
            }
        }
        best
    }
}

/// Max-subtracted soft-max.
pub fn softmax<T: Real>(raw: &[T]) -> Vec<T> {
    let m = raw.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = raw.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Scores a flattened pooled feature with one component's templates.
pub fn score_flat<T: Real>(f: &[T], comp: &ComponentTemplates<T>, reg_std: &[f64; 4]) -> ComponentScores<T> {
    let classes = comp.classes();
    let dot = |row: ndarray::ArrayView1<T>| {
        let mut acc = T::zero();
        for (&a, &b) in row.iter().zip(f) {
            acc += a * b;
        }
        acc
    };
    let raw: Vec<T> = (0..classes).map(|c| dot(comp.cls.row(c)) + comp.bias[c]).collect();
    let mut reg = [T::zero(); 4];
    for (t, r) in reg.iter_mut().enumerate() {
        *r = dot(comp.reg.row(t)) + comp.bias[classes + t];
    }
    let treg = RegressionTarget::from_array([
        reg[0].f64() * reg_std[0],
        reg[1].f64() * reg_std[1],
        reg[2].f64() * reg_std[2],
        reg[3].f64() * reg_std[3],
    ]);
    ComponentScores {
        prob: softmax(&raw),
        raw,
        reg,
        treg,
    }
}

/// Class scores `<f, template_c>` (+bias), soft-max, and the regression vector.
pub fn score_component<T: Real>(
    f: &crate::pooling::PooledFeature<T>,
    bank: &TemplateBank<T>,
    cfg: &ARConfig,
) -> Result<ComponentScores<T>> {
    let comp = bank
        .comps
        .get(f.component)
        .ok_or_else(|| Error::IndexOutOfRange(format!("component {}", f.component)))?;
    if f.values.len() != comp.feature_len() || comp.classes() != cfg.score_len() {
        return Err(Error::shape(comp.feature_len(), f.values.len()));
    }
    Ok(score_flat(f.as_slice(), comp, &cfg.reg_std))
}

/// MAX operator over components: `argmax_i max_j prob^i_j`, ties to the lower `i`.
pub fn select_component<T: Real>(all: &[ComponentScores<T>], include_background: bool) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, s) in all.iter().enumerate() {
        let v = s.max_prob(include_background);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Final prediction for one RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Regressed box; equals the input RoI when the label is background.
    pub bbox: CenterBox,
    /// 0 for background, otherwise the predicted class.
    pub label: usize,
    pub score: f64,
    pub component: usize,
    /// Highest foreground probability of the selected component.
    pub fg_max: f64,
    /// Probabilities of the selected component.
    pub prob: Vec<f64>,
    /// The RoI this prediction was made for.
    pub source: CenterBox,
}

/// Combines per-component scores for RoI `b` into a [`Detection`].
pub fn combine<T: Real>(scores: &[ComponentScores<T>], b: &CenterBox, include_background: bool) -> Result<Detection> {
    if scores.is_empty() {
        return Err(Error::IndexOutOfRange("no mixture components".into()));
    }
    let i = select_component(scores, include_background);
    let s = &scores[i];
    let label = s.best_class();
    let mut t = s.treg;
    t.twd = t.twd.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    t.tht = t.tht.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let bbox = if label == 0 { *b } else { decode(b, &t)? };
    Ok(Detection {
        bbox,
        label,
        score: s.prob[label].f64(),
        component: i,
        fg_max: s.max_prob(false).f64(),
        prob: s.prob.iter().map(|p| p.f64()).collect(),
        source: *b,
    })
}

/// Pools, scores every component, and applies the MAX selector.
pub fn predict_roi<T: Real>(
    maps: &PSMapSet<T>,
    bank: &TemplateBank<T>,
    cfg: &ARConfig,
    b: &CenterBox,
) -> Result<Detection> {
    bank.check(cfg)?;
    let scores = (0..cfg.components())
        .map(|i| score_component(&pool_roi(maps, cfg, b, i)?, bank, cfg))
        .collect::<Result<Vec<_>>>()?;
    combine(&scores, b, cfg.select_include_background)
}

/// Accumulates the adjoint of [`score_flat`] for upstream gradients on raw
/// class scores and raw regression outputs. Returns the gradient on `f`.
pub fn head_backward_into<T: Real>(
    f: &[T],
    comp: &ComponentTemplates<T>,
    grad_raw: &[T],
    grad_reg: &[T; 4],
    grad_comp: &mut ComponentTemplates<T>,
) -> Result<Vec<T>> {
    let classes = comp.classes();
    if grad_raw.len() != classes || f.len() != comp.feature_len() {
        return Err(Error::shape(
            format!("{classes} scores over {} features", comp.feature_len()),
            format!("{} scores over {} features", grad_raw.len(), f.len()),
        ));
    }
    let mut grad_f = vec![T::zero(); f.len()];
    for (c, &g) in grad_raw.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grad_comp.bias[c] += g;
        let mut row = grad_comp.cls.row_mut(c);
        for ((gw, &x), (gf, &w)) in row.iter_mut().zip(f).zip(grad_f.iter_mut().zip(comp.cls.row(c).iter())) {
            *gw += g * x;
            *gf += g * w;
        }
    }
    for (t, &g) in grad_reg.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        grad_comp.bias[classes + t] += g;
        let mut row = grad_comp.reg.row_mut(t);
        for ((gw, &x), (gf, &w)) in row.iter_mut().zip(f).zip(grad_f.iter_mut().zip(comp.reg.row(t).iter())) {
            *gw += g * x;
            *gf += g * w;
        }
    }
    Ok(grad_f)
}

/// Adjoint of [`score_component`]: `(template gradients, pooled-feature gradient)`.
pub fn head_backward<T: Real>(
    f: &crate::pooling::PooledFeature<T>,
    comp: &ComponentTemplates<T>,
    grad_raw: &[T],
    grad_reg: &[T; 4],
) -> Result<(ComponentTemplates<T>, Array3<T>)> {
    let mut g = ComponentTemplates::zeros(comp.classes(), comp.feature_len());
    let gf = head_backward_into(f.as_slice(), comp, grad_raw, grad_reg, &mut g)?;
    let gf = Array3::from_shape_vec(f.values.dim(), gf).expect("same length as the feature");
    Ok((g, gf))
}

//! Aspect-ratio position-sensitive maps: configuration, channel layout and the
//! 1x1 projection from backbone features.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A tiling grid of `rows x cols` cells (`h_i x w_i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Tiling {
    pub rows: usize,
    pub cols: usize,
}

impl Tiling {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Tiling { rows, cols }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn transposed(&self) -> Self {
        Tiling::new(self.cols, self.rows)
    }
}

impl fmt::Display for Tiling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Tiling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("tiling {s:?} is not of the form RxC")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("tiling {s:?}: {e}")))
        };
        let t = Tiling::new(parse(r)?, parse(c)?);
        if t.rows == 0 || t.cols == 0 {
            return Err(Error::Config(format!("tiling {s:?} has an empty axis")));
        }
        Ok(t)
    }
}

impl TryFrom<String> for Tiling {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Tiling> for String {
    fn from(t: Tiling) -> String {
        t.to_string()
    }
}

/// The five tiling sets compared in the aspect-ratio ablation.
pub fn branch_set(name: char) -> Option<Vec<Tiling>> {
    let t = Tiling::new;
    let set = match name {
        'a' => vec![t(7, 7)],
        'b' => vec![t(7, 7), t(5, 10), t(10, 5)],
        'c' => vec![t(7, 7), t(5, 10), t(10, 5), t(3, 12), t(12, 3)],
        'd' => vec![t(7, 7), t(5, 10), t(10, 5), t(4, 12), t(12, 4), t(3, 12), t(12, 3)],
        'e' => vec![
            t(7, 7),
            t(5, 10),
            t(10, 5),
            t(4, 12),
            t(12, 4),
            t(3, 12),
            t(12, 3),
            t(3, 15),
            t(15, 3),
        ],
        _ => return None,
    };
    Some(set)
}

/// Which regions feed the three pooled blocks of every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// All three blocks pool the RoI itself.
    None,
    /// RoI, RoI, whole map.
    Global,
    /// RoI, enlarged RoI, whole map.
    LocalGlobal,
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "no_context" => Ok(ContextMode::None),
            "global" => Ok(ContextMode::Global),
            "local_global" => Ok(ContextMode::LocalGlobal),
            _ => Err(Error::Config(format!("unknown context mode {s:?}"))),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::None => "none",
            ContextMode::Global => "global",
            ContextMode::LocalGlobal => "local_global",
        })
    }
}

/// Map role, in pooled-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Roi = 0,
    Local = 1,
    Global = 2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Roi, Role::Local, Role::Global];

    pub fn name(self) -> &'static str {
        match self {
            Role::Roi => "roi",
            Role::Local => "local",
            Role::Global => "global",
        }
    }
}

/// The mixture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ARConfig {
    pub tilings: Vec<Tiling>,
    /// Channels per cell position.
    pub k: usize,
    /// Foreground classes; class 0 is background.
    pub num_classes: usize,
    pub lambda_ctx: f64,
    /// Pixels per map cell.
    pub stride: usize,
    pub context: ContextMode,
    /// One projection per component shared by all three roles.
    pub share_role_maps: bool,
    /// Whether the background score takes part in component selection.
    pub select_include_background: bool,
    /// Scale applied to raw regressor outputs before decoding.
    pub reg_std: [f64; 4],
}

impl Default for ARConfig {
    fn default() -> Self {
        ARConfig {
            tilings: branch_set('c').unwrap(),
            k: 4,
            num_classes: 3,
            lambda_ctx: 1.5,
            stride: 4,
            context: ContextMode::LocalGlobal,
            share_role_maps: false,
            select_include_background: true,
            reg_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl ARConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.tilings.is_empty() {
            return bad("at least one tiling is required".into());
        }
        if let Some(t) = self.tilings.iter().find(|t| t.rows == 0 || t.cols == 0) {
            return bad(format!("tiling {t} has an empty axis"));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if !(self.lambda_ctx >= 1.0) || !self.lambda_ctx.is_finite() {
            return bad(format!("lambda_ctx {} must be >= 1", self.lambda_ctx));
        }
        if self.stride == 0 {
            return bad("stride must be >= 1".into());
        }
        if self.reg_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad(format!("reg_std {:?} must be positive", self.reg_std));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.tilings.len()
    }

    /// `K * h_i * w_i`: channels of each map of component `i`.
    pub fn map_channels(&self, i: usize) -> usize {
        self.k * self.tilings[i].cells()
    }

    /// `3 * K * h_i * w_i`: length of a flattened pooled feature.
    pub fn feature_len(&self, i: usize) -> usize {
        3 * self.map_channels(i)
    }

    pub fn score_len(&self) -> usize {
        self.num_classes + 1
    }

    /// Number of distinct projections per component.
    pub fn role_maps(&self) -> usize {
        if self.share_role_maps {
            1
        } else {
            3
        }
    }
}

/// Channel offset of slot `q` of cell `(j, k)` in the maps of component `i`.
///
/// Cells are laid out row-major, each owning a contiguous run of `K` channels.
pub fn channel_index(cfg: &ARConfig, i: usize, j: usize, k: usize, q: usize) -> Result<usize> {
    let t = cfg
        .tilings
        .get(i)
        .ok_or_else(|| Error::IndexOutOfRange(format!("component {i} of {}", cfg.components())))?;
    if j >= t.rows || k >= t.cols || q >= cfg.k {
        return Err(Error::IndexOutOfRange(format!(
            "cell ({j},{k}) slot {q} outside {t} with K={}",
            cfg.k
        )));
    }
    Ok((j * t.cols + k) * cfg.k + q)
}

/// `out = weight . in + bias` with `weight` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(out: usize, input: usize) -> Self {
        Affine {
            weight: Array2::zeros((out, input)),
            bias: Array1::zeros(out),
        }
    }

    pub fn cast<U: Real>(&self) -> Affine<U> {
        Affine {
            weight: self.weight.mapv(|v| U::of(v.f64())),
            bias: self.bias.mapv(|v| U::of(v.f64())),
        }
    }
}

/// Per component, per role: the 1x1 projection producing that map stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    pub input_dim: usize,
    /// `comps[i][r]`; `r` ranges over one entry when role maps are shared.
    pub comps: Vec<Vec<Affine<T>>>,
}

impl<T: Real> ProjectionWeights<T> {
    pub fn zeros(cfg: &ARConfig, input_dim: usize) -> Self {
        let comps = (0..cfg.components())
            .map(|i| {
                (0..cfg.role_maps())
                    .map(|_| Affine::zeros(cfg.map_channels(i), input_dim))
                    .collect()
            })
            .collect();
        ProjectionWeights { input_dim, comps }
    }

    /// Zero-mean normal weights with variance `2 / input_dim`, zero biases.
    pub fn init<R: Rng>(cfg: &ARConfig, input_dim: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(cfg, input_dim);
        let std = (2.0 / input_dim as f64).sqrt();
        for comp in &mut w.comps {
            for a in comp {
                a.weight
                    .mapv_inplace(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        w
    }

    pub fn role_slot(&self, role: Role) -> usize {
        if self.comps.first().map_or(3, |c| c.len()) == 1 {
            0
        } else {
            role as usize
        }
    }

    pub fn affine(&self, i: usize, role: Role) -> &Affine<T> {
        &self.comps[i][self.role_slot(role)]
    }

    pub fn affine_mut(&mut self, i: usize, role: Role) -> &mut Affine<T> {
        let s = self.role_slot(role);
        &mut self.comps[i][s]
    }

    pub fn check(&self, cfg: &ARConfig) -> Result<()> {
        if self.comps.len() != cfg.components() {
            return Err(Error::shape(
                format!("{} components", cfg.components()),
                self.comps.len(),
            ));
        }
        for (i, comp) in self.comps.iter().enumerate() {
            if comp.len() != cfg.role_maps() {
                return Err(Error::shape(format!("{} role maps", cfg.role_maps()), comp.len()));
            }
            for a in comp {
                let want = (cfg.map_channels(i), self.input_dim);
                if a.weight.dim() != want || a.bias.len() != want.0 {
                    return Err(Error::shape(format!("{want:?}"), format!("{:?}", a.weight.dim())));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ProjectionWeights<U> {
        ProjectionWeights {
            input_dim: self.input_dim,
            comps: self
                .comps
                .iter()
                .map(|c| c.iter().map(Affine::cast).collect())
                .collect(),
        }
    }
}

/// The `roi`, `local` and `global` map stacks of every component, each
/// `(K*h_i*w_i) x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PSMapSet<T> {
    pub comps: Vec<[Array3<T>; 3]>,
}

impl<T: Real> PSMapSet<T> {
    pub fn zeros(cfg: &ARConfig, height: usize, width: usize) -> Self {
        PSMapSet {
            comps: (0..cfg.components())
                .map(|i| {
                    let c = cfg.map_channels(i);
                    [
                        Array3::zeros((c, height, width)),
                        Array3::zeros((c, height, width)),
                        Array3::zeros((c, height, width)),
                    ]
                })
                .collect(),
        }
    }

    /// `(H, W)` of the maps.
    pub fn spatial(&self) -> (usize, usize) {
        let d = self.comps[0][0].dim();
        (d.1, d.2)
    }

    pub fn map(&self, i: usize, role: Role) -> &Array3<T> {
        &self.comps[i][role as usize]
    }

    pub fn check(&self, cfg: &ARConfig) -> Result<()> {
        if self.comps.is_empty() || self.comps.len() != cfg.components() {
            return Err(Error::shape(
                format!("{} components", cfg.components()),
                self.comps.len(),
            ));
        }
        let (h, w) = self.spatial();
        for (i, maps) in self.comps.iter().enumerate() {
            for m in maps {
                let want = (cfg.map_channels(i), h, w);
                if m.dim() != want {
                    return Err(Error::shape(format!("{want:?}"), format!("{:?}", m.dim())));
                }
            }
        }
        Ok(())
    }
}

fn project_one<T: Real>(features: &Array3<T>, a: &Affine<T>) -> Array3<T> {
    let (d, h, w) = features.dim();
    let out_c = a.weight.nrows();
    let mut out = Array3::<T>::zeros((out_c, h, w));
    let fs = features.as_standard_layout();
    let fs = fs.as_slice().expect("standard layout");
    let plane = h * w;
    let os = out.as_slice_mut().expect("fresh array");
    for c in 0..out_c {
        let dst = &mut os[c * plane..(c + 1) * plane];
        dst.fill(a.bias[c]);
        for ch in 0..d {
            let wv = a.weight[[c, ch]];
            let src = &fs[ch * plane..(ch + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += wv * v;
            }
        }
    }
    out
}

/// Builds every map stack as a per-location affine function of the `D` input channels.
pub fn project<T: Real>(features: &Array3<T>, weights: &ProjectionWeights<T>) -> Result<PSMapSet<T>> {
    if features.dim().0 != weights.input_dim {
        return Err(Error::shape(
            format!("{} feature channels", weights.input_dim),
            features.dim().0,
        ));
    }
    let comps = (0..weights.comps.len())
        .map(|i| Role::ALL.map(|r| project_one(features, weights.affine(i, r))))
        .collect();
    Ok(PSMapSet { comps })
}

/// Adjoint of [`project`]: returns `(grad_features, grad_weights)`.
pub fn project_backward<T: Real>(
    features: &Array3<T>,
    weights: &ProjectionWeights<T>,
    grad_maps: &PSMapSet<T>,
) -> Result<(Array3<T>, ProjectionWeights<T>)> {
    let (d, h, w) = features.dim();
    if d != weights.input_dim {
        return Err(Error::shape(format!("{} feature channels", weights.input_dim), d));
    }
    if grad_maps.comps.len() != weights.comps.len() || grad_maps.spatial() != (h, w) {
        return Err(Error::shape("map gradients matching the projection", "mismatch"));
    }
    let plane = h * w;
    let fs = features.as_standard_layout();
    let fs = fs.as_slice().expect("standard layout");
    let mut grad_features = Array3::<T>::zeros((d, h, w));
    let mut grad_w = ProjectionWeights {
        input_dim: d,
        comps: weights
            .comps
            .iter()
            .map(|c| c.iter().map(|a| Affine::zeros(a.weight.nrows(), d)).collect())
            .collect(),
    };
    let gf = grad_features.as_slice_mut().expect("fresh array");
    for (i, maps) in grad_maps.comps.iter().enumerate() {
        for role in Role::ALL {
            let g = maps[role as usize].as_standard_layout();
            if g.dim().0 != weights.affine(i, role).weight.nrows() {
                return Err(Error::shape(weights.affine(i, role).weight.nrows(), g.dim().0));
            }
            let gs = g.as_slice().expect("standard layout");
            let a = weights.affine(i, role);
            let ga = grad_w.affine_mut(i, role);
            for c in 0..a.weight.nrows() {
                let gc = &gs[c * plane..(c + 1) * plane];
                ga.bias[c] += gc.iter().copied().sum::<T>();
                for ch in 0..d {
                    let src = &fs[ch * plane..(ch + 1) * plane];
                    let mut acc = T::zero();
                    for (&x, &gv) in src.iter().zip(gc) {
                        acc += x * gv;
                    }
                    ga.weight[[c, ch]] += acc;
                    let wv = a.weight[[c, ch]];
                    let dst = &mut gf[ch * plane..(ch + 1) * plane];
                    for (o, &gv) in dst.iter_mut().zip(gc) {
                        *o += wv * gv;
                    }
                }
            }
        }
    }
    Ok((grad_features, grad_w))
}

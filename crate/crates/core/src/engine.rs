//! Fused pooling kernels used for training and inference.
//!
//! Projection is a per-pixel affine map and pooling is a per-cell mean, so the
//! two commute: averaging the backbone features over a cell and then applying
//! the cell's `K` projection rows gives the same pooled value as projecting
//! the full map and averaging it. With a summed-area table per backbone
//! channel every cell mean costs four lookups, independent of its size, and
//! no `K*h*w`-channel map is ever materialized.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::head::{head_backward_into, score_flat, ComponentScores, TemplateBank};
use crate::loss::RoiGrad;
use crate::pooling::{role_boxes, PixelRect, RoiCells};
use crate::psmap::{ARConfig, ProjectionWeights, Role};
use crate::real::Real;

/// Summed-area tables of the `D` backbone channels, in `f64`.
#[derive(Debug, Clone)]
pub struct SceneIntegral {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    sums: Vec<f64>,
}

impl SceneIntegral {
    pub fn new<T: Real>(features: &Array3<T>) -> Self {
        let (d, h, w) = features.dim();
        let stride = (h + 1) * (w + 1);
        let mut sums = vec![0.0; d * stride];
        for c in 0..d {
            let base = c * stride;
            for y in 0..h {
                let mut row = 0.0;
                for x in 0..w {
                    row += features[[c, y, x]].f64();
                    sums[base + (y + 1) * (w + 1) + x + 1] = sums[base + y * (w + 1) + x + 1] + row;
                }
            }
        }
        SceneIntegral {
            channels: d,
            height: h,
            width: w,
            sums,
        }
    }

    /// Mean of channel `c` over `r`.
    pub fn mean(&self, c: usize, r: &PixelRect) -> f64 {
        let w1 = self.width + 1;
        let base = c * (self.height + 1) * w1;
        let at = |y: usize, x: usize| self.sums[base + y * w1 + x];
        let s = at(r.y1, r.x1) - at(r.y0, r.x1) - at(r.y1, r.x0) + at(r.y0, r.x0);
        s / r.area() as f64
    }
}

/// Forward state of one component for one RoI, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ComponentForward<T> {
    /// Backbone cell means, `[role][cell][d]` flattened.
    pub means: Vec<T>,
    /// Flattened pooled feature in `(3K, h, w)` order.
    pub feature: Vec<T>,
    pub scores: ComponentScores<T>,
}

#[derive(Debug, Clone)]
pub struct RoiForward<T> {
    pub roi: CenterBox,
    pub comps: Vec<ComponentForward<T>>,
}

impl<T: Real> RoiForward<T> {
    pub fn scores(&self) -> Vec<ComponentScores<T>> {
        self.comps.iter().map(|c| c.scores.clone()).collect()
    }
}

/// Pools and scores RoI `b` for every component without building the maps.
pub fn forward_roi<T: Real>(
    cfg: &ARConfig,
    proj: &ProjectionWeights<T>,
    bank: &TemplateBank<T>,
    integral: &SceneIntegral,
    b: &CenterBox,
) -> Result<RoiForward<T>> {
    if integral.channels != proj.input_dim {
        return Err(Error::shape(
            format!("{} backbone channels", proj.input_dim),
            integral.channels,
        ));
    }
    let boxes = role_boxes(cfg, b, integral.width, integral.height)?;
    let d = integral.channels;
    let kk = cfg.k;
    let comps = cfg
        .tilings
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let cells = RoiCells::from_boxes(i, t, &boxes);
            let n = t.cells();
            let mut means = vec![T::zero(); 3 * n * d];
            let mut feature = vec![T::zero(); 3 * kk * n];
            for role in Role::ALL {
                let r = role as usize;
                let a = proj.affine(i, role);
                for (cell, rect) in cells.roles[r].iter().enumerate() {
                    let m = &mut means[(r * n + cell) * d..(r * n + cell + 1) * d];
                    for (c, slot) in m.iter_mut().enumerate() {
                        *slot = T::of(integral.mean(c, rect));
                    }
                    for q in 0..kk {
                        let row = cell * kk + q;
                        let mut acc = a.bias[row];
                        for (c, &mv) in m.iter().enumerate() {
                            acc += a.weight[[row, c]] * mv;
                        }
                        feature[(r * kk + q) * n + cell] = acc;
                    }
                }
            }
            let scores = score_flat(&feature, &bank.comps[i], &cfg.reg_std);
            ComponentForward { means, feature, scores }
        })
        .collect();
    Ok(RoiForward { roi: *b, comps })
}

/// Accumulates template gradients (and projection gradients when given) for one RoI.
pub fn backward_roi<T: Real>(
    cfg: &ARConfig,
    proj: &ProjectionWeights<T>,
    bank: &TemplateBank<T>,
    fwd: &RoiForward<T>,
    grad: &RoiGrad<T>,
    mut grad_proj: Option<&mut ProjectionWeights<T>>,
    grad_bank: &mut TemplateBank<T>,
) -> Result<()> {
    if grad.raw.len() != fwd.comps.len() {
        return Err(Error::shape(fwd.comps.len(), grad.raw.len()));
    }
    let d = proj.input_dim;
    let kk = cfg.k;
    for (i, cf) in fwd.comps.iter().enumerate() {
        let gf = head_backward_into(
            &cf.feature,
            &bank.comps[i],
            &grad.raw[i],
            &grad.reg[i],
            &mut grad_bank.comps[i],
        )?;
        let Some(gp) = grad_proj.as_deref_mut() else {
            continue;
        };
        let n = cfg.tilings[i].cells();
        for role in Role::ALL {
            let r = role as usize;
            let ga = gp.affine_mut(i, role);
            for cell in 0..n {
                let m = &cf.means[(r * n + cell) * d..(r * n + cell + 1) * d];
                for q in 0..kk {
                    let g = gf[(r * kk + q) * n + cell];
                    if g == T::zero() {
                        continue;
                    }
                    let row = cell * kk + q;
                    ga.bias[row] += g;
                    let mut wrow = ga.weight.row_mut(row);
                    for (w, &mv) in wrow.iter_mut().zip(m) {
                        *w += g * mv;
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::score_component;
    use crate::pooling::pool_roi;
    use crate::psmap::{project, ContextMode, Tiling};
    use crate::rng::stream;
    use ndarray::Array;
    use rand::Rng;

    fn setup(context: ContextMode) -> (ARConfig, Array3<f64>, ProjectionWeights<f64>, TemplateBank<f64>) {
        let cfg = ARConfig {
            tilings: vec![Tiling::new(3, 3), Tiling::new(2, 4), Tiling::new(4, 1)],
            k: 2,
            num_classes: 2,
            stride: 2,
            context,
            ..ARConfig::default()
        };
        let mut rng = stream(11, "x", 0);
        let x = Array::from_shape_fn((3, 14, 16), |_| rng.gen_range(-1.0..1.0));
        let mut proj = ProjectionWeights::init(&cfg, 3, &mut stream(11, "p", 0));
        for comp in &mut proj.comps {
            for a in comp {
                a.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            }
        }
        let bank = TemplateBank::init(&cfg, &mut stream(11, "b", 0));
        (cfg, x, proj, bank)
    }

    #[test]
    fn integral_means_match_direct_sums() {
        let mut rng = stream(1, "x", 0);
        let x = Array::from_shape_fn((2, 5, 7), |_| rng.gen_range(-1.0..1.0f64));
        let it = SceneIntegral::new(&x);
        let r = PixelRect {
            x0: 1,
            y0: 2,
            x1: 6,
            y1: 4,
        };
        let direct: f64 = (2..4)
            .flat_map(|y| (1..6).map(move |xx| (y, xx)))
            .map(|(y, xx)| x[[1, y, xx]])
            .sum::<f64>()
            / 10.0;
        assert!((it.mean(1, &r) - direct).abs() < 1e-14);
    }

    #[test]
    fn fused_forward_matches_explicit_maps() {
        for mode in [ContextMode::None, ContextMode::Global, ContextMode::LocalGlobal] {
            let (cfg, x, proj, bank) = setup(mode);
            let maps = project(&x, &proj).unwrap();
            let it = SceneIntegral::new(&x);
            for b in [
                CenterBox::new(12.0, 10.0, 9.0, 13.0).unwrap(),
                CenterBox::new(3.0, 25.0, 8.0, 6.0).unwrap(),
                CenterBox::new(16.0, 14.0, 32.0, 28.0).unwrap(),
            ] {
                let fwd = forward_roi(&cfg, &proj, &bank, &it, &b).unwrap();
                for i in 0..3 {
                    let pooled = pool_roi(&maps, &cfg, &b, i).unwrap();
                    for (u, v) in pooled.as_slice().iter().zip(&fwd.comps[i].feature) {
                        assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                    }
                    let s = score_component(&pooled, &bank, &cfg).unwrap();
                    for (u, v) in s.raw.iter().zip(&fwd.comps[i].scores.raw) {
                        assert!((u - v).abs() < 1e-11);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_backward_matches_differences() {
        let (cfg, x, proj, bank) = setup(ContextMode::LocalGlobal);
        let it = SceneIntegral::new(&x);
        let b = CenterBox::new(13.0, 11.0, 10.0, 12.0).unwrap();
        let up_raw = [0.4, -0.7, 0.2];
        let up_reg = [0.1, 0.5, -0.3, 0.8];
        let loss = |p: &ProjectionWeights<f64>, bk: &TemplateBank<f64>| {
            let f = forward_roi(&cfg, p, bk, &it, &b).unwrap();
            f.comps
                .iter()
                .map(|c| {
                    (0..3).map(|k| up_raw[k] * c.scores.raw[k]).sum::<f64>()
                        + (0..4).map(|t| up_reg[t] * c.scores.reg[t]).sum::<f64>()
                })
                .sum::<f64>()
        };
        let fwd = forward_roi(&cfg, &proj, &bank, &it, &b).unwrap();
        let grad = RoiGrad {
            raw: vec![up_raw.to_vec(); 3],
            reg: vec![up_reg; 3],
        };
        let mut gp = ProjectionWeights::zeros(&cfg, 3);
        let mut gb = TemplateBank::zeros(&cfg);
        backward_roi(&cfg, &proj, &bank, &fwd, &grad, Some(&mut gp), &mut gb).unwrap();
        let eps = 1e-6;
        for (i, role, row, c) in [(0, Role::Roi, 3, 1), (1, Role::Local, 9, 2), (2, Role::Global, 7, 0)] {
            let (mut pp, mut pm) = (proj.clone(), proj.clone());
            pp.affine_mut(i, role).weight[[row, c]] += eps;
            pm.affine_mut(i, role).weight[[row, c]] -= eps;
            let n = (loss(&pp, &bank) - loss(&pm, &bank)) / (2.0 * eps);
            let a = gp.affine(i, role).weight[[row, c]];
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "{a} vs {n}");
        }
        for (i, c, col) in [(0, 1, 5), (2, 2, 11)] {
            let (mut bp, mut bm) = (bank.clone(), bank.clone());
            bp.comps[i].cls[[c, col]] += eps;
            bm.comps[i].cls[[c, col]] -= eps;
            let n = (loss(&proj, &bp) - loss(&proj, &bm)) / (2.0 * eps);
            assert!((gb.comps[i].cls[[c, col]] - n).abs() < 1e-7 * (1.0 + n.abs()));
        }
    }
}

//! Central finite-difference verification of analytic gradients.

use ndarray::Array3;
use rand::Rng;

use crate::error::Result;
use crate::geometry::{match_rois, CenterBox};
use crate::head::{head_backward, score_component, TemplateBank};
use crate::loss::{multi_task_loss, ohem_select, per_roi_loss, ComponentReduction, LossSpec, RoISample};
use crate::optim::Params;
use crate::pooling::{pool_backward_into, pool_roi};
use crate::psmap::{project, project_backward, ARConfig, PSMapSet, ProjectionWeights};
use crate::rng::stream;

/// Relative error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], coord: usize, eps: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[coord] = x[coord] + eps;
    let up = f(&probe);
    probe[coord] = x[coord] - eps;
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

/// Max relative error between `analytic` and central differences of `f` over `coords`.
pub fn finite_difference_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
) -> f64 {
    coords
        .iter()
        .map(|&c| relative_error(analytic[c], central_difference(&mut f, x, c, eps)))
        .fold(0.0, f64::max)
}

/// Evenly spread sample of at most `n` coordinates out of `len`.
pub fn sample_coords(len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    (0..n).map(|k| k * len / n).collect()
}

/// Per-block result of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// One scene of a gradient-check fixture.
#[derive(Debug, Clone)]
pub struct ChainScene {
    pub features: Array3<f64>,
    pub rois: Vec<CenterBox>,
    pub gts: Vec<(CenterBox, usize)>,
}

/// Small scenes, RoIs and parameters for checking projection, pooling,
/// templates and loss end to end in `f64`.
#[derive(Debug, Clone)]
pub struct ChainFixture {
    pub cfg: ARConfig,
    pub scenes: Vec<ChainScene>,
    pub proj: ProjectionWeights<f64>,
    pub bank: TemplateBank<f64>,
    pub lambda_task: f64,
    /// RoIs kept by hard example mining in each scene.
    pub ohem_rois: usize,
}

impl ChainFixture {
    /// `scenes` scenes of `rois` RoIs on a `map x map` grid with `input_dim` channels.
    pub fn new(cfg: &ARConfig, scenes: usize, rois: usize, map: usize, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let px = (map * cfg.stride) as f64;
        let mut list = Vec::with_capacity(scenes);
        for s in 0..scenes {
            let mut rng = stream(seed, "chain-scene", s as u64);
            let features = Array3::from_shape_fn((input_dim, map, map), |_| rng.gen_range(-1.0..1.0));
            let draw_box = |rng: &mut crate::rng::StreamRng| {
                let wd = rng.gen_range(0.25..0.7) * px;
                let ht = rng.gen_range(0.25..0.7) * px;
                CenterBox {
                    x: rng.gen_range(wd / 2.0..px - wd / 2.0),
                    y: rng.gen_range(ht / 2.0..px - ht / 2.0),
                    wd,
                    ht,
                }
            };
            let gts: Vec<(CenterBox, usize)> = (0..2)
                .map(|_| (draw_box(&mut rng), rng.gen_range(1..=cfg.num_classes)))
                .collect();
            let roi_list = (0..rois)
                .map(|n| {
                    if n % 2 == 0 {
                        // near a ground truth so the batch has foreground RoIs
                        let (g, _) = gts[(n / 2) % gts.len()];
                        CenterBox {
                            x: g.x + rng.gen_range(-0.1..0.1) * g.wd,
                            y: g.y + rng.gen_range(-0.1..0.1) * g.ht,
                            wd: g.wd * rng.gen_range(0.85..1.15),
                            ht: g.ht * rng.gen_range(0.85..1.15),
                        }
                    } else {
                        draw_box(&mut rng)
                    }
                })
                .collect();
            list.push(ChainScene {
                features,
                rois: roi_list,
                gts,
            });
        }
        let mut rng = stream(seed, "chain-params", 0);
        let mut proj = ProjectionWeights::init(cfg, input_dim, &mut rng);
        let mut bank = TemplateBank::init(cfg, &mut rng);
        // nonzero biases so their gradients are exercised
        for b in proj.blocks_mut().into_iter().chain(bank.blocks_mut()) {
            if b.name.ends_with("bias") {
                for v in b.data.iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        Ok(ChainFixture {
            cfg: cfg.clone(),
            scenes: list,
            proj,
            bank,
            lambda_task: 1.0,
            ohem_rois: (rois * 3 / 4).max(1),
        })
    }

    fn samples(
        &self,
        scene: &ChainScene,
        maps: &PSMapSet<f64>,
        bank: &TemplateBank<f64>,
    ) -> Result<Vec<RoISample<f64>>> {
        let matches = match_rois(&scene.rois, &scene.gts)?;
        scene
            .rois
            .iter()
            .zip(matches)
            .map(|(b, m)| {
                let scores = (0..self.cfg.components())
                    .map(|i| score_component(&pool_roi(maps, &self.cfg, b, i)?, bank, &self.cfg))
                    .collect::<Result<Vec<_>>>()?;
                Ok(RoISample {
                    scores,
                    label: m.label,
                    target: m.target,
                })
            })
            .collect()
    }

    /// Hard example selection of every scene at the fixture's parameters.
    fn loss_spec(&self) -> LossSpec {
        LossSpec {
            lambda_task: self.lambda_task,
            reg_std: self.cfg.reg_std,
            components: ComponentReduction::Sum,
        }
    }

    pub fn masks(&self) -> Result<Vec<Vec<usize>>> {
        self.scenes
            .iter()
            .map(|sc| {
                let maps = project(&sc.features, &self.proj)?;
                let batch = self.samples(sc, &maps, &self.bank)?;
                let losses = batch
                    .iter()
                    .map(|s| per_roi_loss(s, &self.loss_spec()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ohem_select(&losses, self.ohem_rois))
            })
            .collect()
    }

    /// Summed scene losses with the hard example selection held fixed.
    pub fn loss(&self, proj: &ProjectionWeights<f64>, bank: &TemplateBank<f64>, masks: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        for (sc, mask) in self.scenes.iter().zip(masks) {
            let maps = project(&sc.features, proj)?;
            let batch = self.samples(sc, &maps, bank)?;
            total += multi_task_loss(&batch, mask, &self.loss_spec())?.0.total;
        }
        Ok(total)
    }

    /// Analytic gradient of [`ChainFixture::loss`] by backpropagation
    /// through the head, the pooling and the projection.
    pub fn gradients(&self, masks: &[Vec<usize>]) -> Result<(ProjectionWeights<f64>, TemplateBank<f64>)> {
        let mut gp = ProjectionWeights::zeros(&self.cfg, self.proj.input_dim);
        let mut gb = TemplateBank::zeros(&self.cfg);
        for (sc, mask) in self.scenes.iter().zip(masks) {
            let maps = project(&sc.features, &self.proj)?;
            let batch = self.samples(sc, &maps, &self.bank)?;
            let (_, grads) = multi_task_loss(&batch, mask, &self.loss_spec())?;
            let (h, w) = maps.spatial();
            let mut gmaps = PSMapSet::zeros(&self.cfg, h, w);
            for (b, g) in sc.rois.iter().zip(&grads) {
                for i in 0..self.cfg.components() {
                    let pooled = pool_roi(&maps, &self.cfg, b, i)?;
                    let (gt, gf) = head_backward(&pooled, &self.bank.comps[i], &g.raw[i], &g.reg[i])?;
                    let acc = &mut gb.comps[i];
                    acc.cls += &gt.cls;
                    acc.reg += &gt.reg;
                    acc.bias += &gt.bias;
                    pool_backward_into(&mut gmaps, &self.cfg, b, i, &gf)?;
                }
            }
            let (_, gw) = project_backward(&sc.features, &self.proj, &gmaps)?;
            crate::optim::add_assign(&mut gp, &gw)?;
        }
        Ok((gp, gb))
    }

    /// Central differences on up to `per_block` coordinates of every parameter block.
    pub fn check(&self, eps: f64, per_block: usize) -> Result<Vec<BlockReport>> {
        let masks = self.masks()?;
        let (gp, gb) = self.gradients(&masks)?;
        let analytic: Vec<(String, Vec<f64>)> = (gp, gb)
            .blocks()
            .into_iter()
            .map(|b| (b.name, b.data.to_vec()))
            .collect();
        let mut reports = Vec::with_capacity(analytic.len());
        for (n, (name, grad)) in analytic.iter().enumerate() {
            let coords = sample_coords(grad.len(), per_block);
            let mut err = 0.0f64;
            for &c in &coords {
                let eval = |delta: f64| -> Result<f64> {
                    let mut params = (self.proj.clone(), self.bank.clone());
                    params.blocks_mut()[n].data[c] += delta;
                    self.loss(&params.0, &params.1, &masks)
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                err = err.max(relative_error(grad[c], numeric));
            }
            reports.push(BlockReport {
                name: name.clone(),
                checked: coords.len(),
                max_rel_error: err,
            });
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = [0.3, -1.2, 2.5, 0.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let x = [1.0, 2.0, -0.5, 4.0];
        let err = finite_difference_check(f, &x, &w, 1e-5, &[0, 1, 2, 3]);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn error_shrinks_quadratically_in_eps() {
        // d/dx sin(x) at 1.0; truncation error ~ eps^2 / 6 * cos(1)
        let f = |x: &[f64]| x[0].sin();
        let exact = 1f64.cos();
        let e1 = (central_difference(&mut { f }, &[1.0], 0, 1e-2) - exact).abs();
        let e2 = (central_difference(&mut { f }, &[1.0], 0, 5e-3) - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |x: &[f64]| x[0] * x[0];
        assert!(finite_difference_check(f, &[3.0], &[5.0], 1e-5, &[0]) > 0.1);
    }

    #[test]
    fn coordinate_sampling() {
        assert_eq!(sample_coords(3, 10), vec![0, 1, 2]);
        let s = sample_coords(100, 4);
        assert_eq!(s, vec![0, 25, 50, 75]);
    }

    #[test]
    fn full_chain_matches_differences() {
        let cfg = ARConfig {
            tilings: vec![crate::psmap::Tiling::new(2, 2), crate::psmap::Tiling::new(1, 3)],
            k: 2,
            num_classes: 2,
            ..ARConfig::default()
        };
        let fx = ChainFixture::new(&cfg, 2, 6, 10, 3, 5).unwrap();
        let masks = fx.masks().unwrap();
        assert!(masks.iter().all(|m| m.len() == 4));
        for r in fx.check(1e-5, 6).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
        }
    }
}

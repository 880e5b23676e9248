//! Stage-wise inference: each stage rescores and regresses the surviving
//! detections of the previous one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{forward_roi, SceneIntegral};
use crate::error::{Error, Result};
use crate::geometry::{nms, CenterBox, DetectionRecord, ScoredBox};
use crate::head::{combine, Detection, TemplateBank};
use crate::model::CascadeModel;
use crate::proposals::{clip_to_image, proposal_source, ProposalParams, ProposalSet, Provenance};
use crate::psmap::{ARConfig, ProjectionWeights};
use crate::rng::stream;
use crate::scene::SceneSource;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    /// Minimum foreground probability for a detection to reach the next stage.
    pub p_keep: f64,
    /// Class-agnostic NMS between stages. Kept loose: stage-1 boxes converge
    /// on their object, and a tight threshold leaves the next stage about one
    /// box per object to train and predict on.
    pub cascade_nms: f64,
    /// NMS applied to the final detections.
    pub final_nms: f64,
    pub score_floor: f64,
    /// Run the final NMS over all classes at once instead of per class.
    pub class_agnostic_nms: bool,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            p_keep: 0.01,
            cascade_nms: 0.95,
            final_nms: 0.3,
            score_floor: 0.001,
            class_agnostic_nms: false,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_keep", self.p_keep),
            ("cascade_nms", self.cascade_nms),
            ("final_nms", self.final_nms),
            ("score_floor", self.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Scores every RoI with one stage; regressed boxes are clipped to the image.
pub fn predict_stage(
    cfg: &ARConfig,
    proj: &ProjectionWeights<f32>,
    bank: &TemplateBank<f32>,
    integral: &SceneIntegral,
    rois: &[CenterBox],
    image: (f64, f64),
) -> Result<Vec<Detection>> {
    rois.iter()
        .map(|b| {
            let fwd = forward_roi(cfg, proj, bank, integral, b)?;
            let mut d = combine(&fwd.scores(), b, cfg.select_include_background)?;
            d.bbox = clip_to_image(&d.bbox, image.0, image.1);
            Ok(d)
        })
        .collect()
}

/// Stage-`stage` detections turned into proposals for the next stage:
/// background-labelled RoIs are dropped, the rest filtered by foreground
/// probability and pruned by class-agnostic NMS.
pub fn keep_high_recall(dets: &[Detection], p_keep: f64, tau: f64, stage: usize) -> ProposalSet {
    let kept: Vec<ScoredBox> = dets
        .iter()
        .filter(|d| d.label != 0 && d.fg_max >= p_keep)
        .map(|d| ScoredBox {
            bbox: d.bbox,
            label: 1,
            score: d.fg_max,
        })
        .collect();
    let boxes: Vec<ScoredBox> = nms(&kept, tau).into_iter().map(|n| kept[n]).collect();
    ProposalSet {
        offsets: vec![None; boxes.len()],
        boxes,
        provenance: Provenance::Stage(stage),
    }
}

/// Foreground detections above the score floor after NMS, grouped by class
/// in ascending class order, each group in descending score order.
pub fn finalize(dets: &[Detection], params: &DetectParams) -> Vec<Detection> {
    let fg: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.label != 0 && d.score >= params.score_floor)
        .collect();
    let as_scored = |ds: &[&Detection]| -> Vec<ScoredBox> {
        ds.iter()
            .map(|d| ScoredBox {
                bbox: d.bbox,
                label: d.label,
                score: d.score,
            })
            .collect()
    };
    if params.class_agnostic_nms {
        return nms(&as_scored(&fg), params.final_nms)
            .into_iter()
            .map(|n| fg[n].clone())
            .collect();
    }
    let mut classes: Vec<usize> = fg.iter().map(|d| d.label).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let group: Vec<&Detection> = fg.iter().copied().filter(|d| d.label == c).collect();
        out.extend(
            nms(&as_scored(&group), params.final_nms)
                .into_iter()
                .map(|n| group[n].clone()),
        );
    }
    out
}

/// Raw per-stage predictions of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stages: Vec<Vec<Detection>>,
}

impl CascadeOutput {
    /// Final detections as if the cascade stopped after `stages` stages.
    pub fn after(&self, stages: usize, params: &DetectParams) -> Vec<Detection> {
        finalize(&self.stages[stages - 1], params)
    }

    pub fn last(&self, params: &DetectParams) -> Vec<Detection> {
        self.after(self.stages.len(), params)
    }
}

/// Runs every stage of `model` on `proposals`.
pub fn cascade_detect(
    integral: &SceneIntegral,
    model: &CascadeModel,
    proposals: &ProposalSet,
    params: &DetectParams,
    image: (f64, f64),
) -> Result<CascadeOutput> {
    let mut rois = proposals.refined()?;
    let mut stages = Vec::with_capacity(model.stages.len());
    for (k, bank) in model.stages.iter().enumerate() {
        let dets = predict_stage(&model.cfg, &model.proj, bank, integral, &rois, image)?;
        if k + 1 < model.stages.len() {
            rois = keep_high_recall(&dets, params.p_keep, params.cascade_nms, k).refined()?;
        }
        stages.push(dets);
    }
    Ok(CascadeOutput { stages })
}

/// Image size in pixels of a feature map at `stride`.
pub fn image_size(features: &ndarray::Array3<f32>, stride: usize) -> (f64, f64) {
    let (_, h, w) = features.dim();
    ((w * stride) as f64, (h * stride) as f64)
}

/// Proposals of test scene `index`, drawn from their own stream.
pub fn test_proposals(
    gts: &[(CenterBox, usize)],
    image: (f64, f64),
    seed: u64,
    index: usize,
    params: &ProposalParams,
) -> ProposalSet {
    proposal_source(
        gts,
        image.0,
        image.1,
        &mut stream(seed, "test-proposals", index as u64),
        params,
    )
}

pub fn to_records(image_id: usize, dets: &[Detection]) -> Vec<DetectionRecord> {
    dets.iter()
        .map(|d| DetectionRecord {
            image_id,
            class_id: d.label,
            score: d.score,
            bbox: d.bbox,
        })
        .collect()
}

/// Detects every scene of `source` in parallel. Returns, for each stage
/// count `1..=stages`, the final records of all scenes in scene order.
pub fn detect_scenes<S: SceneSource + ?Sized>(
    source: &S,
    model: &CascadeModel,
    proposals: &ProposalParams,
    params: &DetectParams,
    seed: u64,
) -> Result<Vec<Vec<DetectionRecord>>> {
    let stride = model.cfg.stride;
    let per_scene: Vec<Vec<Vec<DetectionRecord>>> = (0..source.len())
        .into_par_iter()
        .map(|idx| {
            let scene = source.scene(idx)?;
            let image = image_size(&scene.features, stride);
            let props = test_proposals(&scene.gts, image, seed, idx, proposals);
            let integral = SceneIntegral::new(&scene.features);
            let out = cascade_detect(&integral, model, &props, params, image)?;
            Ok((1..=model.stages.len())
                .map(|k| to_records(idx, &out.after(k, params)))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..model.stages.len())
        .map(|k| per_scene.iter().flat_map(|s| s[k].iter().copied()).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psmap::Tiling;
    use ndarray::Array3;

    fn det(x: f64, label: usize, score: f64, fg_max: f64) -> Detection {
        let b = CenterBox::new(x, 50.0, 20.0, 20.0).unwrap();
        Detection {
            bbox: b,
            label,
            score,
            component: 0,
            fg_max,
            prob: vec![],
            source: b,
        }
    }

    fn small_model(stages: usize) -> (CascadeModel, SceneIntegral) {
        let cfg = ARConfig {
            tilings: vec![Tiling::new(2, 2), Tiling::new(1, 3)],
            k: 2,
            num_classes: 2,
            ..ARConfig::default()
        };
        let m = CascadeModel::init(&cfg, 3, stages, 4).unwrap();
        let x = Array3::from_shape_fn((3, 24, 24), |(c, y, x)| ((c + 2 * y + 3 * x) % 7) as f32 / 7.0);
        (m, SceneIntegral::new(&x))
    }

    #[test]
    fn keep_high_recall_edge_cases() {
        assert!(keep_high_recall(&[], 0.01, 0.7, 0).is_empty());
        let dets = vec![det(10.0, 1, 0.9, 0.9), det(11.0, 2, 0.6, 0.6), det(60.0, 0, 0.8, 0.2)];
        let all = keep_high_recall(&dets, 0.0, 1.0, 0);
        assert_eq!(all.len(), 2);
        assert_eq!(all.provenance, Provenance::Stage(0));
        let pruned = keep_high_recall(&dets, 0.01, 0.7, 0);
        assert_eq!(pruned.len(), 1);
        assert!(keep_high_recall(&dets, 0.95, 1.0, 0).is_empty());
    }

    #[test]
    fn finalize_is_per_class() {
        let dets = vec![
            det(10.0, 1, 0.9, 0.9),
            det(11.0, 1, 0.5, 0.5),
            det(11.0, 2, 0.6, 0.6),
            det(40.0, 1, 0.0001, 0.1),
            det(70.0, 0, 0.9, 0.05),
        ];
        let p = DetectParams::default();
        let out = finalize(&dets, &p);
        let labels: Vec<(usize, f64)> = out.iter().map(|d| (d.label, d.score)).collect();
        assert_eq!(labels, vec![(1, 0.9), (2, 0.6)]);
        let agnostic = finalize(
            &dets,
            &DetectParams {
                class_agnostic_nms: true,
                ..p
            },
        );
        assert_eq!(agnostic.len(), 1);
    }

    #[test]
    fn one_stage_is_plain_prediction_plus_nms() {
        let (m, it) = small_model(1);
        let rois: Vec<CenterBox> = (0..6)
            .map(|n| CenterBox::new(20.0 + 8.0 * n as f64, 40.0, 30.0, 24.0).unwrap())
            .collect();
        let props = ProposalSet {
            boxes: rois
                .iter()
                .map(|&bbox| ScoredBox {
                    bbox,
                    label: 1,
                    score: 0.7,
                })
                .collect(),
            offsets: vec![None; rois.len()],
            provenance: Provenance::Synthetic,
        };
        let p = DetectParams::default();
        let out = cascade_detect(&it, &m, &props, &p, (96.0, 96.0)).unwrap();
        let direct = predict_stage(&m.cfg, &m.proj, &m.stages[0], &it, &rois, (96.0, 96.0)).unwrap();
        assert_eq!(out.stages, vec![direct.clone()]);
        assert_eq!(out.last(&p), finalize(&direct, &p));
    }

    #[test]
    fn identity_regressors_keep_boxes() {
        let (mut m, it) = small_model(2);
        for bank in &mut m.stages {
            for c in &mut bank.comps {
                c.reg.fill(0.0);
                let n = c.classes();
                for t in 0..4 {
                    c.bias[n + t] = 0.0;
                }
                // make every RoI foreground
                c.bias[1] = 50.0;
            }
        }
        let rois: Vec<CenterBox> = (0..4)
            .map(|n| CenterBox::new(20.0 + 15.0 * n as f64, 40.0, 14.0, 30.0).unwrap())
            .collect();
        let props = ProposalSet {
            boxes: rois
                .iter()
                .map(|&bbox| ScoredBox {
                    bbox,
                    label: 1,
                    score: 0.7,
                })
                .collect(),
            offsets: vec![None; rois.len()],
            provenance: Provenance::Synthetic,
        };
        let out = cascade_detect(&it, &m, &props, &DetectParams::default(), (96.0, 96.0)).unwrap();
        let b1: Vec<_> = out.stages[0].iter().map(|d| d.bbox).collect();
        let mut b2: Vec<_> = out.stages[1].iter().map(|d| d.bbox).collect();
        assert_eq!(b1, rois);
        b2.sort_by(|a, b| a.x.total_cmp(&b.x));
        assert_eq!(b2, rois);
    }

    #[test]
    fn stage_two_never_sees_background() {
        let (m, it) = small_model(2);
        let rois: Vec<CenterBox> = (0..8)
            .map(|n| CenterBox::new(10.0 + 9.0 * n as f64, 30.0 + 4.0 * n as f64, 16.0, 20.0).unwrap())
            .collect();
        let props = ProposalSet {
            boxes: rois
                .iter()
                .map(|&bbox| ScoredBox {
                    bbox,
                    label: 1,
                    score: 0.5,
                })
                .collect(),
            offsets: vec![None; rois.len()],
            provenance: Provenance::Synthetic,
        };
        let p = DetectParams::default();
        let out = cascade_detect(&it, &m, &props, &p, (96.0, 96.0)).unwrap();
        let survivors = keep_high_recall(&out.stages[0], p.p_keep, p.cascade_nms, 0);
        let srcs: Vec<CenterBox> = out.stages[1].iter().map(|d| d.source).collect();
        assert_eq!(srcs, survivors.refined().unwrap());
        for s in &srcs {
            let from = out.stages[0].iter().find(|d| d.bbox == *s).unwrap();
            assert_ne!(from.label, 0);
        }
    }
}

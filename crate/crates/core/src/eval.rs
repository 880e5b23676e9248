//! PASCAL VOC style average precision and COCO style IoU-averaged AP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{descending_order, iou, parse_records, CornerBox, DetectionRecord};

/// Precision-recall integration rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoints,
    /// Mean of the envelope at recall 0, 0.1, ..., 1 (VOC2007 devkit).
    ElevenPoint,
}

impl ApMode {
    pub fn label(self) -> &'static str {
        match self {
            ApMode::AllPoints => "all-points",
            ApMode::ElevenPoint => "11-point",
        }
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Greedy matching of one class.
///
/// Detections are visited in descending score order (ties keep input order);
/// each takes the highest-IoU ground truth of its image that is still
/// unmatched and overlaps by at least `tau`. Returns the TP flag of every
/// detection in visiting order.
pub fn match_detections(dets: &[DetectionRecord], gts: &[DetectionRecord], tau: f64) -> Vec<bool> {
    let mut by_image: BTreeMap<usize, Vec<(CornerBox, bool)>> = BTreeMap::new();
    for g in gts {
        by_image
            .entry(g.image_id)
            .or_default()
            .push((g.bbox.to_corner(), false));
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    descending_order(&scores)
        .into_iter()
        .map(|n| {
            let d = &dets[n];
            let Some(cands) = by_image.get_mut(&d.image_id) else {
                return false;
            };
            let dc = d.bbox.to_corner();
            let mut best: Option<(usize, f64)> = None;
            for (g, (gc, taken)) in cands.iter().enumerate() {
                if *taken {
                    continue;
                }
                let v = iou(&dc, gc);
                if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    cands[g].1 = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of TP/FP flags (already in score order) against `n_gt` objects.
pub fn average_precision(flags: &[bool], n_gt: usize, mode: ApMode) -> f64 {
    if n_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (n, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (n + 1) as f64);
    }
    // envelope: best precision at this recall or beyond
    let mut envelope = precision.clone();
    for n in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[n] = envelope[n].max(envelope[n + 1]);
    }
    match mode {
        ApMode::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                if *r > prev {
                    ap += (r - prev) * p;
                    prev = *r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let at = k as f64 / 10.0;
                    recall.iter().position(|&r| r >= at).map_or(0.0, |n| envelope[n])
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Match counts at one threshold, summed over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mode: ApMode,
    pub thresholds: Vec<f64>,
    /// AP per class (classes with ground truth), one entry per threshold.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    /// Mean AP per threshold.
    pub map: Vec<f64>,
    /// Mean over 0.50:0.95 when requested.
    pub coco_ap: Option<f64>,
    pub counts: Vec<Counts>,
}

impl EvalResult {
    /// mAP at `tau` if it was evaluated.
    pub fn map_at(&self, tau: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - tau).abs() < 1e-12)
            .map(|n| self.map[n])
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "class");
        for t in &self.thresholds {
            let _ = write!(out, "  AP@{t:<5}");
        }
        out.push('\n');
        for (c, aps) in &self.per_class {
            let _ = write!(out, "{c:>8}");
            for ap in aps {
                let _ = write!(out, "  {:>8.4}", ap);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>8}", "mAP");
        for m in &self.map {
            let _ = write!(out, "  {:>8.4}", m);
        }
        out.push('\n');
        if let Some(c) = self.coco_ap {
            let _ = writeln!(out, "AP[0.50:0.95] {c:.4}");
        }
        let _ = writeln!(out, "({} interpolation)", self.mode.label());
        out
    }

    /// `class_id threshold AP` lines followed by `mAP threshold value` lines.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for (c, aps) in &self.per_class {
            for (t, ap) in self.thresholds.iter().zip(aps) {
                let _ = writeln!(out, "{c} {t:.2} {ap:.6}");
            }
        }
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = writeln!(out, "mAP {t:.2} {m:.6}");
        }
        if let Some(c) = self.coco_ap {
            let _ = writeln!(out, "mAP 0.50:0.95 {c:.6}");
        }
        out
    }
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub mode: ApMode,
    pub coco: bool,
}

struct ClassEval {
    aps: Vec<f64>,
    counts: Vec<Counts>,
}

fn eval_class(dets: &[DetectionRecord], gts: &[DetectionRecord], thresholds: &[f64], mode: ApMode) -> ClassEval {
    let mut aps = Vec::with_capacity(thresholds.len());
    let mut counts = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let flags = match_detections(dets, gts, tau);
        let tp = flags.iter().filter(|&&f| f).count();
        aps.push(average_precision(&flags, gts.len(), mode));
        counts.push(Counts {
            tp,
            fp: flags.len() - tp,
            missed: gts.len() - tp,
        });
    }
    ClassEval { aps, counts }
}

/// Per-class AP at each threshold; mAP averages over classes that have ground truth.
pub fn evaluate(
    dets: &[DetectionRecord],
    gts: &[DetectionRecord],
    thresholds: &[f64],
    opts: EvalOptions,
) -> EvalResult {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let split = |c: usize, recs: &[DetectionRecord]| -> Vec<DetectionRecord> {
        recs.iter().filter(|r| r.class_id == c).copied().collect()
    };
    let mut all_thresholds = thresholds.to_vec();
    let coco = coco_thresholds();
    if opts.coco {
        all_thresholds.extend(&coco);
    }
    let per: Vec<(usize, ClassEval)> = classes
        .par_iter()
        .map(|&c| {
            (
                c,
                eval_class(&split(c, dets), &split(c, gts), &all_thresholds, opts.mode),
            )
        })
        .collect();
    let nt = thresholds.len();
    let mean = |n: usize| {
        if per.is_empty() {
            0.0
        } else {
            per.iter().map(|(_, e)| e.aps[n]).sum::<f64>() / per.len() as f64
        }
    };
    let map: Vec<f64> = (0..nt).map(mean).collect();
    let coco_ap = opts
        .coco
        .then(|| (nt..nt + coco.len()).map(mean).sum::<f64>() / coco.len() as f64);
    let counts = (0..nt)
        .map(|n| {
            per.iter().fold(Counts::default(), |acc, (_, e)| Counts {
                tp: acc.tp + e.counts[n].tp,
                fp: acc.fp + e.counts[n].fp,
                missed: acc.missed + e.counts[n].missed,
            })
        })
        .collect();
    EvalResult {
        mode: opts.mode,
        thresholds: thresholds.to_vec(),
        per_class: per.into_iter().map(|(c, e)| (c, e.aps[..nt].to_vec())).collect(),
        map,
        coco_ap,
        counts,
    }
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_records(path, &text)
}

/// [`evaluate`] on two files in the detection line format.
pub fn evaluate_files(dets: &Path, gts: &Path, thresholds: &[f64], opts: EvalOptions) -> Result<EvalResult> {
    let d = read_records(dets)?;
    let g = read_records(gts)?;
    Ok(evaluate(&d, &g, thresholds, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CenterBox;

    fn rec(image_id: usize, class_id: usize, score: f64, x: f64, y: f64, w: f64, h: f64) -> DetectionRecord {
        DetectionRecord {
            image_id,
            class_id,
            score,
            bbox: CenterBox::new(x, y, w, h).unwrap(),
        }
    }

    #[test]
    fn single_exact_detection_is_tp() {
        let g = rec(0, 1, 1.0, 10.0, 10.0, 4.0, 4.0);
        assert_eq!(match_detections(&[g], &[g], 0.5), vec![true]);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = rec(0, 1, 1.0, 10.0, 10.0, 4.0, 4.0);
        let d = DetectionRecord { score: 0.7, ..g };
        assert_eq!(match_detections(&[d, d], &[g], 0.5), vec![true, false]);
    }

    #[test]
    fn detections_on_other_images_never_match() {
        let g = rec(0, 1, 1.0, 10.0, 10.0, 4.0, 4.0);
        let d = DetectionRecord { image_id: 1, ..g };
        assert_eq!(match_detections(&[d], &[g], 0.5), vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true], 2, ApMode::AllPoints), 1.0);
        assert_eq!(average_precision(&[true, false], 2, ApMode::AllPoints), 0.5);
        assert_eq!(average_precision(&[], 3, ApMode::AllPoints), 0.0);
        assert_eq!(average_precision(&[false, true], 0, ApMode::AllPoints), 0.0);
        // [TP, FP, TP] of 2: recall 0.5 at precision 1, recall 1 at 2/3
        let ap = average_precision(&[true, false, true], 2, ApMode::AllPoints);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // 11-point: recalls 0..0.5 -> 1 (6 points), 0.6..1.0 -> 2/3 (5 points)
        let ap11 = average_precision(&[true, false, true], 2, ApMode::ElevenPoint);
        assert!((ap11 - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn ap_monotone_when_fp_becomes_tp() {
        let base = [true, false, false, true, false, true];
        for n in 0..base.len() {
            if !base[n] {
                let mut up = base;
                up[n] = true;
                assert!(average_precision(&up, 5, ApMode::AllPoints) >= average_precision(&base, 5, ApMode::AllPoints));
            }
        }
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![
            rec(0, 1, 1.0, 10.0, 10.0, 4.0, 4.0),
            rec(0, 2, 1.0, 30.0, 10.0, 8.0, 4.0),
            rec(1, 1, 1.0, 12.0, 20.0, 6.0, 9.0),
        ];
        let th = [0.5, 0.7];
        let r = evaluate(
            &gts,
            &gts,
            &th,
            EvalOptions {
                coco: true,
                ..Default::default()
            },
        );
        assert_eq!(r.map, vec![1.0, 1.0]);
        assert_eq!(r.coco_ap, Some(1.0));
        assert_eq!(
            r.counts[0],
            Counts {
                tp: 3,
                fp: 0,
                missed: 0
            }
        );
        let e = evaluate(&[], &gts, &th, EvalOptions::default());
        assert_eq!(e.map, vec![0.0, 0.0]);
        assert_eq!(e.counts[1].missed, 3);
    }

    #[test]
    fn map_non_increasing_in_threshold() {
        let gts = vec![
            rec(0, 1, 1.0, 10.0, 10.0, 10.0, 10.0),
            rec(0, 1, 1.0, 40.0, 40.0, 10.0, 10.0),
        ];
        let dets = vec![
            rec(0, 1, 0.9, 11.0, 10.0, 10.0, 10.0),
            rec(0, 1, 0.8, 42.5, 41.0, 10.0, 11.0),
            rec(0, 1, 0.3, 70.0, 70.0, 5.0, 5.0),
        ];
        let r = evaluate(&dets, &gts, &coco_thresholds(), EvalOptions::default());
        for w in r.map.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn image_order_does_not_matter() {
        let gts = vec![
            rec(0, 1, 1.0, 10.0, 10.0, 10.0, 10.0),
            rec(1, 1, 1.0, 40.0, 40.0, 10.0, 10.0),
        ];
        let dets = vec![
            rec(1, 1, 0.6, 41.0, 40.0, 10.0, 10.0),
            rec(0, 1, 0.9, 12.0, 10.0, 10.0, 10.0),
        ];
        let a = evaluate(&dets, &gts, &[0.5], EvalOptions::default());
        let rev: Vec<_> = dets.iter().rev().copied().collect();
        let grev: Vec<_> = gts.iter().rev().copied().collect();
        let b = evaluate(&rev, &grev, &[0.5], EvalOptions::default());
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn outputs_are_formatted() {
        let gts = vec![rec(0, 1, 1.0, 10.0, 10.0, 4.0, 4.0)];
        let r = evaluate(&gts, &gts, &[0.5, 0.7], EvalOptions::default());
        let kv = r.key_values();
        assert!(kv.contains("1 0.50 1.000000"));
        assert!(kv.contains("mAP 0.70 1.000000"));
        assert!(r.table().contains("mAP"));
    }
}

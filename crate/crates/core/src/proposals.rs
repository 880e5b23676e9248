//! Category-agnostic proposals `(B, t, l, p)` from a synthetic source standing in for an RPN.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{decode, nms, CenterBox, RegressionTarget, ScoredBox, FG_IOU};

/// Where a proposal set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    /// Detections of cascade stage `k` (0-based).
    Stage(usize),
}

/// Proposals in descending score order. `boxes[n].label` is 1 for proposals
/// overlapping some ground truth by at least [`FG_IOU`], else 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<ScoredBox>,
    /// Optional refinement of each proposal, applied by [`ProposalSet::refined`].
    pub offsets: Vec<Option<RegressionTarget>>,
    pub provenance: Provenance,
}

impl ProposalSet {
    pub fn empty(provenance: Provenance) -> Self {
        ProposalSet {
            boxes: Vec::new(),
            offsets: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Boxes the head consumes: each proposal with its own offsets applied.
    pub fn refined(&self) -> Result<Vec<CenterBox>> {
        self.boxes
            .iter()
            .zip(&self.offsets)
            .map(|(b, t)| match t {
                Some(t) => decode(&b.bbox, t),
                None => Ok(b.bbox),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalParams {
    /// Center jitter as a fraction of the box size.
    pub sigma_center: f64,
    /// Standard deviation of the log width and log height jitter.
    pub sigma_logsize: f64,
    /// Jittered copies per ground truth box.
    pub n_fg: usize,
    /// Uniform random boxes per scene.
    pub n_bg: usize,
    /// NMS threshold applied to the raw proposals.
    pub nms_iou: f64,
    /// `sqrt(area)` range of random boxes, as fractions of the shorter image side.
    pub bg_min_size: f64,
    pub bg_max_size: f64,
    /// Largest width/height ratio (and its inverse) of random boxes.
    pub bg_max_aspect: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams {
            sigma_center: 0.1,
            sigma_logsize: 0.1,
            n_fg: 8,
            n_bg: 32,
            nms_iou: 0.7,
            bg_min_size: 0.1,
            bg_max_size: 0.6,
            bg_max_aspect: 3.0,
        }
    }
}

impl ProposalParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::Error::Config(m));
        if !(self.sigma_center >= 0.0 && self.sigma_logsize >= 0.0) {
            return bad("proposal jitter must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad(format!("proposal nms_iou {} must lie in [0, 1]", self.nms_iou));
        }
        if !(self.bg_min_size > 0.0 && self.bg_min_size <= self.bg_max_size) || !(self.bg_max_aspect >= 1.0) {
            return bad("invalid random box range".into());
        }
        Ok(())
    }
}

/// Clips `b` to `[0, w] x [0, h]`, keeping at least one pixel.
pub fn clip_to_image(b: &CenterBox, w: f64, h: f64) -> CenterBox {
    let c = b.to_corner();
    let x0 = c.x.clamp(0.0, w - 1.0);
    let y0 = c.y.clamp(0.0, h - 1.0);
    let x1 = c.right().clamp(x0 + 1.0, w);
    let y1 = c.bottom().clamp(y0 + 1.0, h);
    CenterBox {
        x: (x0 + x1) / 2.0,
        y: (y0 + y1) / 2.0,
        wd: x1 - x0,
        ht: y1 - y0,
    }
}

/// Gaussian jitter of a ground truth box: center by `sigma_center` times the
/// box size, log width and log height by `sigma_logsize`.
pub fn jitter_box<R: Rng>(g: &CenterBox, sigma_center: f64, sigma_logsize: f64, rng: &mut R) -> CenterBox {
    let mut draw = |s: f64| {
        if s > 0.0 {
            Normal::new(0.0, s).expect("finite sigma").sample(rng)
        } else {
            0.0
        }
    };
    let dx = draw(sigma_center);
    let dy = draw(sigma_center);
    let dw = draw(sigma_logsize);
    let dh = draw(sigma_logsize);
    CenterBox {
        x: g.x + dx * g.wd,
        y: g.y + dy * g.ht,
        wd: g.wd * dw.exp(),
        ht: g.ht * dh.exp(),
    }
}

/// Best IoU of `b` against the ground truth boxes.
pub fn max_iou(b: &CenterBox, gts: &[(CenterBox, usize)]) -> f64 {
    gts.iter().map(|(g, _)| b.iou(g)).fold(0.0, f64::max)
}

/// `n_fg` jittered copies of every ground truth box plus `n_bg` random boxes,
/// clipped to the image, labelled by IoU with the ground truth, scored
/// `U(0.5, 1)` when foreground and `U(0, 0.5)` otherwise, then pruned by NMS.
pub fn proposal_source<R: Rng>(
    gts: &[(CenterBox, usize)],
    image_w: f64,
    image_h: f64,
    rng: &mut R,
    params: &ProposalParams,
) -> ProposalSet {
    let mut raw: Vec<CenterBox> = Vec::with_capacity(gts.len() * params.n_fg + params.n_bg);
    for (g, _) in gts {
        for _ in 0..params.n_fg {
            raw.push(clip_to_image(
                &jitter_box(g, params.sigma_center, params.sigma_logsize, rng),
                image_w,
                image_h,
            ));
        }
    }
    let short = image_w.min(image_h);
    let log_aspect = params.bg_max_aspect.ln();
    for _ in 0..params.n_bg {
        let size = short * rng.gen_range(params.bg_min_size..=params.bg_max_size);
        let a = if log_aspect > 0.0 {
            rng.gen_range(-log_aspect..=log_aspect).exp()
        } else {
            1.0
        };
        let wd = (size * a.sqrt()).min(image_w);
        let ht = (size / a.sqrt()).min(image_h);
        let x = rng.gen_range(wd / 2.0..=image_w - wd / 2.0);
        let y = rng.gen_range(ht / 2.0..=image_h - ht / 2.0);
        raw.push(CenterBox { x, y, wd, ht });
    }
    let scored: Vec<ScoredBox> = raw
        .into_iter()
        .map(|bbox| {
            let fg = max_iou(&bbox, gts) >= FG_IOU;
            let score = if fg {
                rng.gen_range(0.5..=1.0)
            } else {
                rng.gen_range(0.0..0.5)
            };
            ScoredBox {
                bbox,
                label: usize::from(fg),
                score,
            }
        })
        .collect();
    let boxes: Vec<ScoredBox> = nms(&scored, params.nms_iou).into_iter().map(|n| scored[n]).collect();
    ProposalSet {
        offsets: vec![None; boxes.len()],
        boxes,
        provenance: Provenance::Synthetic,
    }
}

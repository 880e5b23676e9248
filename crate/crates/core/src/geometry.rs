//! Boxes, overlap, the box regression codec, NMS and RoI labelling.
//!
//! Two conventions coexist and are kept apart by type: [`CenterBox`] for
//! proposals and detections in pixel space, [`CornerBox`] for pooling regions
//! in map space. Conversions are always explicit.

use std::fmt;

use crate::error::{Error, Result};

/// Left-top anchored box `(x, y, wd, ht)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x: f64,
    pub y: f64,
    pub wd: f64,
    pub ht: f64,
}

/// Center anchored box `(x, y, wd, ht)`; `(x, y)` is the box center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub x: f64,
    pub y: f64,
    pub wd: f64,
    pub ht: f64,
}

fn check_box(x: f64, y: f64, wd: f64, ht: f64) -> Result<()> {
    if !(x.is_finite() && y.is_finite() && wd.is_finite() && ht.is_finite()) {
        return Err(Error::InvalidBox(format!("non-finite box ({x}, {y}, {wd}, {ht})")));
    }
    if wd <= 0.0 || ht <= 0.0 {
        return Err(Error::InvalidBox(format!("non-positive size {wd}x{ht}")));
    }
    Ok(())
}

impl CornerBox {
    pub fn new(x: f64, y: f64, wd: f64, ht: f64) -> Result<Self> {
        check_box(x, y, wd, ht)?;
        Ok(CornerBox { x, y, wd, ht })
    }

    pub fn right(&self) -> f64 {
        self.x + self.wd
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.ht
    }

    pub fn area(&self) -> f64 {
        self.wd * self.ht
    }

    pub fn contains(&self, other: &CornerBox) -> bool {
        self.x <= other.x && self.y <= other.y && self.right() >= other.right() && self.bottom() >= other.bottom()
    }

    pub fn to_center(&self) -> CenterBox {
        to_center(*self)
    }
}

impl CenterBox {
    pub fn new(x: f64, y: f64, wd: f64, ht: f64) -> Result<Self> {
        check_box(x, y, wd, ht)?;
        Ok(CenterBox { x, y, wd, ht })
    }

    pub fn area(&self) -> f64 {
        self.wd * self.ht
    }

    pub fn to_corner(&self) -> CornerBox {
        to_corner(*self)
    }

    pub fn iou(&self, other: &CenterBox) -> f64 {
        iou(&self.to_corner(), &other.to_corner())
    }
}

pub fn to_corner(b: CenterBox) -> CornerBox {
    CornerBox {
        x: b.x - b.wd / 2.0,
        y: b.y - b.ht / 2.0,
        wd: b.wd,
        ht: b.ht,
    }
}

pub fn to_center(b: CornerBox) -> CenterBox {
    CenterBox {
        x: b.x + b.wd / 2.0,
        y: b.y + b.ht / 2.0,
        wd: b.wd,
        ht: b.ht,
    }
}

/// Intersection over union; symmetric, in `[0, 1]`, zero for disjoint boxes.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = a.right().min(b.right()) - a.x.max(b.x);
    let ih = a.bottom().min(b.bottom()) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Box regression offsets: center shifts relative to box size and log size factors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub twd: f64,
    pub tht: f64,
}

impl RegressionTarget {
    pub const ZERO: RegressionTarget = RegressionTarget {
        tx: 0.0,
        ty: 0.0,
        twd: 0.0,
        tht: 0.0,
    };

    pub fn from_array(a: [f64; 4]) -> Self {
        RegressionTarget {
            tx: a[0],
            ty: a[1],
            twd: a[2],
            tht: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.twd, self.tht]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Applies regression offsets to a box:
/// `x' = tx*wd + x`, `y' = ty*ht + y`, `wd' = wd*exp(twd)`, `ht' = ht*exp(tht)`.
pub fn decode(b: &CenterBox, t: &RegressionTarget) -> Result<CenterBox> {
    if !t.is_finite() {
        return Err(Error::InvalidRegression(format!("non-finite offsets {t:?}")));
    }
    let wd = b.wd * t.twd.exp();
    let ht = b.ht * t.tht.exp();
    if !wd.is_finite() || !ht.is_finite() || wd <= 0.0 || ht <= 0.0 {
        return Err(Error::InvalidRegression(format!(
            "size factor overflow: twd={} tht={}",
            t.twd, t.tht
        )));
    }
    Ok(CenterBox {
        x: t.tx * b.wd + b.x,
        y: t.ty * b.ht + b.y,
        wd,
        ht,
    })
}

/// Inverse of [`decode`]: the offsets that move `b` onto `g`.
pub fn encode(b: &CenterBox, g: &CenterBox) -> Result<RegressionTarget> {
    if !(b.wd > 0.0 && b.ht > 0.0) {
        return Err(Error::InvalidBox(format!("degenerate source box {b:?}")));
    }
    if !(g.wd > 0.0 && g.ht > 0.0) {
        return Err(Error::InvalidBox(format!("degenerate target box {g:?}")));
    }
    Ok(RegressionTarget {
        tx: (g.x - b.x) / b.wd,
        ty: (g.y - b.y) / b.ht,
        twd: (g.wd / b.wd).ln(),
        tht: (g.ht / b.ht).ln(),
    })
}

/// Scales width and height by `factor` about the box center.
pub fn enlarge(b: &CornerBox, factor: f64) -> CornerBox {
    let cx = b.x + b.wd / 2.0;
    let cy = b.y + b.ht / 2.0;
    let wd = b.wd * factor;
    let ht = b.ht * factor;
    CornerBox {
        x: cx - wd / 2.0,
        y: cy - ht / 2.0,
        wd,
        ht,
    }
}

/// A box with a class label and a confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: CenterBox,
    pub label: usize,
    pub score: f64,
}

/// Indices of `scores` in descending order; equal scores keep ascending index order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. A box is suppressed when its
/// IoU with an already kept box reaches `tau`.
pub fn nms(dets: &[ScoredBox], tau: f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let corners: Vec<CornerBox> = dets.iter().map(|d| d.bbox.to_corner()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for idx in descending_order(&scores) {
        if kept.iter().all(|&k| iou(&corners[k], &corners[idx]) < tau) {
            kept.push(idx);
        }
    }
    kept
}

/// Training assignment for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiMatch {
    /// 0 for background, otherwise the matched class.
    pub label: usize,
    /// Present for foreground proposals only.
    pub target: Option<RegressionTarget>,
    pub iou: f64,
    pub gt_index: Option<usize>,
}

/// IoU at or above which a proposal counts as foreground.
pub const FG_IOU: f64 = 0.5;

/// Matches each proposal to its highest-IoU ground truth (ties to the lower index).
pub fn match_rois(proposals: &[CenterBox], gts: &[(CenterBox, usize)]) -> Result<Vec<RoiMatch>> {
    let gt_corners: Vec<CornerBox> = gts.iter().map(|(b, _)| b.to_corner()).collect();
    proposals
        .iter()
        .map(|p| {
            let pc = p.to_corner();
            let mut best: Option<(usize, f64)> = None;
            for (g, gc) in gt_corners.iter().enumerate() {
                let v = iou(&pc, gc);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= FG_IOU => Ok(RoiMatch {
                    label: gts[g].1,
                    target: Some(encode(p, &gts[g].0)?),
                    iou: v,
                    gt_index: Some(g),
                }),
                best => Ok(RoiMatch {
                    label: 0,
                    target: None,
                    iou: best.map_or(0.0, |(_, v)| v),
                    gt_index: None,
                }),
            }
        })
        .collect()
}

/// One line of a detection or ground-truth file:
/// `image_id class_id score cx cy wd ht`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: CenterBox,
}

/// Formats like C's `%g`: six significant digits, trailing zeros trimmed.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.5e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl fmt::Display for DetectionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {}",
            self.image_id,
            self.class_id,
            format_sig6(self.score),
            format_sig6(self.bbox.x),
            format_sig6(self.bbox.y),
            format_sig6(self.bbox.wd),
            format_sig6(self.bbox.ht)
        )
    }
}

impl DetectionRecord {
    /// Parses one record; the error string names the offending field.
    pub fn parse_line(line: &str) -> std::result::Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 fields, found {}", fields.len()));
        }
        let image_id = fields[0]
            .parse::<usize>()
            .map_err(|e| format!("image_id {:?}: {e}", fields[0]))?;
        let class_id = fields[1]
            .parse::<usize>()
            .map_err(|e| format!("class_id {:?}: {e}", fields[1]))?;
        let mut nums = [0.0f64; 5];
        for (n, (slot, name)) in nums.iter_mut().zip(["score", "cx", "cy", "wd", "ht"]).enumerate() {
            *slot = fields[2 + n]
                .parse::<f64>()
                .map_err(|e| format!("{name} {:?}: {e}", fields[2 + n]))?;
        }
        let [score, cx, cy, wd, ht] = nums;
        if !(0.0..=1.0).contains(&score) {
            return Err(format!("score {score} outside [0, 1]"));
        }
        let bbox = CenterBox::new(cx, cy, wd, ht).map_err(|e| e.to_string())?;
        Ok(DetectionRecord {
            image_id,
            class_id,
            score,
            bbox,
        })
    }
}

/// Parses a whole detection file body; errors carry 1-based line numbers.
pub fn parse_records(path: &std::path::Path, text: &str) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            DetectionRecord::parse_line(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            })
        })
        .collect()
}

pub fn format_records(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cb(x: f64, y: f64, w: f64, h: f64) -> CornerBox {
        CornerBox::new(x, y, w, h).unwrap()
    }

    fn ctr(x: f64, y: f64, w: f64, h: f64) -> CenterBox {
        CenterBox::new(x, y, w, h).unwrap()
    }

    // Counts unit pixels covered by both / either integer box.
    fn raster_iou(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
        let inside =
            |p: (i32, i32), r: (i32, i32, i32, i32)| p.0 >= r.0 && p.0 < r.0 + r.2 && p.1 >= r.1 && p.1 < r.1 + r.3;
        let (mut inter, mut union) = (0, 0);
        for py in -20..40 {
            for px in -20..40 {
                let (ia, ib) = (inside((px, py), a), inside((px, py), b));
                inter += (ia && ib) as i32;
                union += (ia || ib) as i32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(to_corner(ctr(5.0, 5.0, 4.0, 4.0)), cb(3.0, 3.0, 4.0, 4.0));
        assert_eq!(to_corner(ctr(0.0, 0.0, 2.0, 6.0)), cb(-1.0, -3.0, 2.0, 6.0));
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(CornerBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(CenterBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(CenterBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let b = cb(1.0, 2.0, 3.0, 4.0);
        assert_eq!(iou(&b, &b), 1.0);
        let expected = raster_iou((0, 0, 4, 4), (2, 0, 4, 4));
        assert!((expected - 1.0 / 3.0).abs() < 1e-15);
        assert!((iou(&cb(0.0, 0.0, 4.0, 4.0), &cb(2.0, 0.0, 4.0, 4.0)) - expected).abs() < 1e-15);
        assert_eq!(iou(&cb(0.0, 0.0, 1.0, 1.0), &cb(5.0, 5.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn decode_encode_examples() {
        let b = ctr(10.0, 20.0, 100.0, 50.0);
        assert_eq!(decode(&b, &RegressionTarget::ZERO).unwrap(), b);
        let t = RegressionTarget {
            tx: 0.1,
            ty: -0.2,
            twd: 2f64.ln(),
            tht: 0.0,
        };
        let g = decode(&b, &t).unwrap();
        assert!((g.x - 20.0).abs() < 1e-12 && (g.y - 10.0).abs() < 1e-12);
        assert!((g.wd - 200.0).abs() < 1e-12 && (g.ht - 50.0).abs() < 1e-12);

        let back = encode(&b, &ctr(20.0, 10.0, 200.0, 50.0)).unwrap();
        assert!((back.tx - 0.1).abs() < 1e-15);
        assert!((back.ty + 0.2).abs() < 1e-15);
        assert!((back.twd - 2f64.ln()).abs() < 1e-15);
        assert_eq!(back.tht, 0.0);
        assert_eq!(encode(&b, &b).unwrap(), RegressionTarget::ZERO);
    }

    #[test]
    fn decode_overflow_is_flagged() {
        let b = ctr(0.0, 0.0, 1.0, 1.0);
        let t = RegressionTarget {
            twd: 1000.0,
            ..RegressionTarget::ZERO
        };
        assert!(matches!(decode(&b, &t), Err(Error::InvalidRegression(_))));
    }

    #[test]
    fn encode_rejects_degenerate_source() {
        let b = CenterBox {
            x: 0.0,
            y: 0.0,
            wd: 0.0,
            ht: 1.0,
        };
        assert!(encode(&b, &ctr(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn enlarge_examples() {
        let b = to_corner(ctr(8.0, 8.0, 4.0, 6.0));
        assert_eq!(enlarge(&b, 1.0), b);
        let e = enlarge(&b, 1.5).to_center();
        assert_eq!((e.x, e.y, e.wd, e.ht), (8.0, 8.0, 6.0, 9.0));
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let one = ScoredBox {
            bbox: ctr(0.0, 0.0, 2.0, 2.0),
            label: 1,
            score: 0.3,
        };
        assert_eq!(nms(&[one], 0.5), vec![0]);
        let a = ScoredBox { score: 0.8, ..one };
        let b = ScoredBox { score: 0.9, ..one };
        assert_eq!(nms(&[a, b], 0.5), vec![1]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let far = ScoredBox {
            bbox: ctr(100.0, 100.0, 2.0, 2.0),
            label: 1,
            score: 0.5,
        };
        let near = ScoredBox {
            bbox: ctr(0.0, 0.0, 2.0, 2.0),
            ..far
        };
        assert_eq!(nms(&[far, near, near], 0.5), vec![0, 1]);
    }

    #[test]
    fn match_rois_examples() {
        let gt = ctr(50.0, 50.0, 20.0, 10.0);
        let m = match_rois(&[gt, ctr(500.0, 500.0, 5.0, 5.0)], &[(gt, 2)]).unwrap();
        assert_eq!(m[0].label, 2);
        assert_eq!(m[0].target, Some(RegressionTarget::ZERO));
        assert_eq!(m[1].label, 0);
        assert!(m[1].target.is_none());
        let none = match_rois(&[gt], &[]).unwrap();
        assert_eq!(none[0].label, 0);
    }

    #[test]
    fn record_format_and_parse() {
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.0000123456), "1.23456e-05");
        let r = DetectionRecord {
            image_id: 3,
            class_id: 2,
            score: 0.912345678,
            bbox: ctr(10.5, 20.25, 30.0, 40.125),
        };
        let line = r.to_string();
        assert_eq!(line, "3 2 0.912346 10.5 20.25 30 40.125");
        let back = DetectionRecord::parse_line(&line).unwrap();
        assert_eq!(back.bbox, r.bbox);
        assert!(DetectionRecord::parse_line("1 2 0.5 1 1 1").is_err());
        assert!(DetectionRecord::parse_line("1 2 1.5 1 1 1 1").is_err());
        let err = parse_records(std::path::Path::new("d.txt"), "1 1 0.5 1 1 1 1\nbad\n").unwrap_err();
        assert!(err.to_string().contains("d.txt:2"));
    }

    fn arb_center() -> impl Strategy<Value = CenterBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..80.0f64, 0.5..80.0f64).prop_map(|(x, y, w, h)| ctr(x, y, w, h))
    }

    proptest! {
        #[test]
        fn center_corner_roundtrip(b in arb_center()) {
            let back = to_center(to_corner(b));
            prop_assert!((back.x - b.x).abs() <= 1e-12 * (1.0 + b.x.abs() + b.wd));
            prop_assert!((back.y - b.y).abs() <= 1e-12 * (1.0 + b.y.abs() + b.ht));
            prop_assert_eq!(back.wd, b.wd);
            prop_assert_eq!(back.ht, b.ht);
        }

        #[test]
        fn iou_symmetric_bounded(a in arb_center(), b in arb_center()) {
            let (ac, bc) = (a.to_corner(), b.to_corner());
            let v = iou(&ac, &bc);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&bc, &ac));
        }

        #[test]
        fn iou_matches_raster(a in (-10..10i32, -10..10i32, 1..15i32, 1..15i32),
                              b in (-10..10i32, -10..10i32, 1..15i32, 1..15i32)) {
            let v = iou(&cb(a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64),
                        &cb(b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64));
            prop_assert!((v - raster_iou(a, b)).abs() < 1e-12);
        }

        #[test]
        fn codec_roundtrip(b in arb_center(), g in arb_center()) {
            let g2 = decode(&b, &encode(&b, &g).unwrap()).unwrap();
            for (u, v, s) in [(g2.x, g.x, g.wd), (g2.y, g.y, g.ht), (g2.wd, g.wd, g.wd), (g2.ht, g.ht, g.ht)] {
                prop_assert!((u - v).abs() <= 1e-9 * (v.abs() + s));
            }
            let t = encode(&b, &g).unwrap();
            let t2 = encode(&b, &decode(&b, &t).unwrap()).unwrap();
            for (u, v) in t.to_array().iter().zip(t2.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn enlarge_contains_and_scales(b in arb_center(), f in 1.0..3.0f64) {
            let c = b.to_corner();
            let e = enlarge(&c, f);
            prop_assert!(e.contains(&c) || (e.x - c.x).abs() < 1e-9);
            let (ec, cc) = (e.to_center(), c.to_center());
            prop_assert!((ec.x - cc.x).abs() < 1e-9 && (ec.y - cc.y).abs() < 1e-9);
            prop_assert!((e.area() - c.area() * f * f).abs() <= 1e-9 * e.area());
        }
    }
}

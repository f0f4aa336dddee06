//! Axis-aligned box arithmetic: IoU, one-to-one greedy matching, the
//! per-ground-truth detection indicator, context expansion and the
//! `[0, 1000]` integer grid used on the model wire.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::floor;

/// Side length of the integer coordinate grid used in model prompts.
pub const GRID_SIZE: u16 = 1000;

/// Corner-form box in continuous pixel coordinates.
///
/// Construction rejects non-finite corners and inverted extents, so every
/// value of this type satisfies `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<BoxRepr> for BoundingBox {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        BoundingBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl From<BoundingBox> for BoxRepr {
    fn from(b: BoundingBox) -> Self {
        BoxRepr {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from YOLO-style top-left corner plus extent.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() == 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// True when the box lies within `[0, width] x [0, height]`.
    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        Self { x1, y1, x2, y2 }
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// A detector proposal: a box plus its confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateRepr", into = "CandidateRepr")]
pub struct Candidate {
    bbox: BoundingBox,
    confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct CandidateRepr {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    conf: f64,
}

impl TryFrom<CandidateRepr> for Candidate {
    type Error = Error;

    fn try_from(r: CandidateRepr) -> Result<Self> {
        Candidate::new(BoundingBox::new(r.x1, r.y1, r.x2, r.y2)?, r.conf)
    }
}

impl From<Candidate> for CandidateRepr {
    fn from(c: Candidate) -> Self {
        CandidateRepr {
            x1: c.bbox.x1,
            y1: c.bbox.y1,
            x2: c.bbox.x2,
            y2: c.bbox.y2,
            conf: c.confidence,
        }
    }
}

impl Candidate {
    pub fn new(bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::OutOfRange {
                name: "confidence",
                value: confidence,
                expected: "[0, 1]",
            });
        }
        Ok(Self { bbox, confidence })
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Intersection over union. Returns 0 when the union is empty, so two
/// degenerate boxes never produce NaN.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub prediction: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

/// Outcome of one-to-one matching of predictions against ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Pairs in the order they were formed (descending prediction confidence).
    pub pairs: Vec<MatchPair>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

impl MatchResult {
    /// Matched ground-truth index for each prediction.
    pub fn prediction_assignment(&self, n_predictions: usize) -> Vec<Option<MatchPair>> {
        let mut out = alloc::vec![None; n_predictions];
        for p in &self.pairs {
            out[p.prediction] = Some(*p);
        }
        out
    }
}

/// Indices of `predictions` sorted by descending confidence; ties keep the
/// lower index first.
pub fn confidence_order(predictions: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .confidence
            .total_cmp(&predictions[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy one-to-one matching.
///
/// Predictions are visited by descending confidence; each takes the still
/// unassigned ground truth with the highest IoU (lowest index on ties) and
/// the pair is kept only when that IoU is at least `tau_match`. A rejected
/// prediction leaves the ground truth available for later predictions.
pub fn greedy_match(
    predictions: &[Candidate],
    ground_truths: &[BoundingBox],
    tau_match: f64,
) -> MatchResult {
    let mut taken = alloc::vec![false; ground_truths.len()];
    let mut matched_pred = alloc::vec![false; predictions.len()];
    let mut pairs = Vec::new();

    for p in confidence_order(predictions) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(predictions[p].bbox(), gt);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= tau_match && v > 0.0 {
                taken[g] = true;
                matched_pred[p] = true;
                pairs.push(MatchPair {
                    prediction: p,
                    ground_truth: g,
                    iou: v,
                });
            }
        }
    }

    MatchResult {
        pairs,
        unmatched_predictions: (0..predictions.len()).filter(|&i| !matched_pred[i]).collect(),
        unmatched_ground_truths: (0..ground_truths.len()).filter(|&i| !taken[i]).collect(),
    }
}

/// Highest IoU between `ground_truth` and any final detection.
pub fn max_iou(ground_truth: &BoundingBox, finals: &[Candidate]) -> f64 {
    finals
        .iter()
        .map(|f| iou(f.bbox(), ground_truth))
        .fold(0.0, f64::max)
}

/// Detection indicator: at least one final reaches `tau_iou` against the
/// ground truth.
pub fn detected(ground_truth: &BoundingBox, finals: &[Candidate], tau_iou: f64) -> bool {
    !finals.is_empty() && max_iou(ground_truth, finals) >= tau_iou
}

/// Scales `bbox` about its center by `rho` and clips to the image.
pub fn expand_region(bbox: &BoundingBox, rho: f64, image_width: f64, image_height: f64) -> Result<BoundingBox> {
    if !rho.is_finite() || rho < 1.0 {
        return Err(Error::OutOfRange {
            name: "rho",
            value: rho,
            expected: ">= 1",
        });
    }
    scale_region(bbox, rho, image_width, image_height)
}

/// Scales `bbox` about its center by any positive `factor` and clips to the
/// image.
pub fn scale_region(bbox: &BoundingBox, factor: f64, image_width: f64, image_height: f64) -> Result<BoundingBox> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::OutOfRange {
            name: "scale factor",
            value: factor,
            expected: "> 0",
        });
    }
    check_image_size(image_width, image_height)?;
    let (cx, cy) = bbox.center();
    let half_w = bbox.width() * factor / 2.0;
    let half_h = bbox.height() * factor / 2.0;
    let grown = BoundingBox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)?;
    Ok(grown.clip(image_width, image_height))
}

fn check_image_size(width: f64, height: f64) -> Result<()> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::InvalidImageSize { width, height });
    }
    Ok(())
}

/// Box on the integer `[0, 1000]` grid used by the model prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u16; 4]", into = "[u16; 4]")]
pub struct GridBox {
    x1: u16,
    y1: u16,
    x2: u16,
    y2: u16,
}

impl TryFrom<[u16; 4]> for GridBox {
    type Error = Error;

    fn try_from(c: [u16; 4]) -> Result<Self> {
        GridBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<GridBox> for [u16; 4] {
    fn from(b: GridBox) -> Self {
        b.coords()
    }
}

impl GridBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self> {
        if x2 > GRID_SIZE || y2 > GRID_SIZE || x1 > x2 || y1 > y2 {
            return Err(Error::InvalidGridBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [u16; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn to_grid(v: f64, extent: f64) -> u16 {
    let scaled = floor(v * f64::from(GRID_SIZE) / extent + 0.5);
    scaled.clamp(0.0, f64::from(GRID_SIZE)) as u16
}

/// Pixel box to the `[0, 1000]` grid, rounding half up.
pub fn normalize_to_grid(bbox: &BoundingBox, image_width: f64, image_height: f64) -> Result<GridBox> {
    check_image_size(image_width, image_height)?;
    GridBox::new(
        to_grid(bbox.x1, image_width),
        to_grid(bbox.y1, image_height),
        to_grid(bbox.x2, image_width),
        to_grid(bbox.y2, image_height),
    )
}

/// Grid box back to pixel coordinates.
pub fn denormalize_from_grid(grid: &GridBox, image_width: f64, image_height: f64) -> Result<BoundingBox> {
    check_image_size(image_width, image_height)?;
    let s = f64::from(GRID_SIZE);
    BoundingBox::new(
        f64::from(grid.x1) * image_width / s,
        f64::from(grid.y1) * image_height / s,
        f64::from(grid.x2) * image_width / s,
        f64::from(grid.y2) * image_height / s,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cand(b: BoundingBox, c: f64) -> Candidate {
        Candidate::new(b, c).unwrap()
    }

    /// Pixel-count IoU over the integer grid; boxes must have integer corners.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..64 {
            for x in 0..64 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
                let inb = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let oracle = raster_iou(&a, &b);
        assert_relative_eq!(oracle, 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(iou(&a, &b), oracle, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_boxes_give_zero() {
        let p = bx(3.0, 3.0, 3.0, 3.0);
        assert!(p.is_degenerate());
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(Candidate::new(bx(0.0, 0.0, 1.0, 1.0), 1.01).is_err());
        assert!(Candidate::new(bx(0.0, 0.0, 1.0, 1.0), -0.1).is_err());
    }

    #[test]
    fn serde_rejects_inverted_box() {
        let bad = r#"{"x1":5,"y1":0,"x2":1,"y2":1,"conf":0.5}"#;
        assert!(serde_json::from_str::<Candidate>(bad).is_err());
        let good = r#"{"x1":1,"y1":0,"x2":5,"y2":1,"conf":0.5}"#;
        let c: Candidate = serde_json::from_str(good).unwrap();
        assert_eq!(c.confidence(), 0.5);
    }

    #[test]
    fn greedy_match_identity_and_empty() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let m = greedy_match(&[cand(gt, 0.9)], &[gt], 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].iou, 1.0);

        let m = greedy_match(&[], &[gt, bx(20.0, 20.0, 30.0, 30.0)], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_ground_truths, vec![0, 1]);
    }

    #[test]
    fn greedy_match_tie_breaks_by_index() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let m = greedy_match(&[cand(gt, 0.5), cand(gt, 0.5)], &[gt, gt], 0.5);
        assert_eq!(m.pairs[0].prediction, 0);
        assert_eq!(m.pairs[0].ground_truth, 0);
        assert_eq!(m.pairs[1].prediction, 1);
        assert_eq!(m.pairs[1].ground_truth, 1);
    }

    #[test]
    fn low_confidence_prediction_does_not_steal() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let preds = [cand(bx(0.0, 0.0, 9.0, 10.0), 0.2), cand(gt, 0.9)];
        let m = greedy_match(&preds, &[gt], 0.5);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].prediction, 1);
        assert_eq!(m.unmatched_predictions, vec![0]);
    }

    /// Maximum total IoU over all injective assignments with every pair at or
    /// above `tau`.
    fn brute_force_best(preds: &[Candidate], gts: &[BoundingBox], tau: f64) -> (f64, Vec<(usize, usize)>) {
        fn rec(
            i: usize,
            preds: &[Candidate],
            gts: &[BoundingBox],
            tau: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            best: &mut (f64, Vec<(usize, usize)>),
        ) {
            if i == preds.len() {
                let total: f64 = cur.iter().map(|&(p, g)| iou(preds[p].bbox(), &gts[g])).sum();
                if total > best.0 + 1e-12 {
                    *best = (total, cur.clone());
                }
                return;
            }
            rec(i + 1, preds, gts, tau, used, cur, best);
            for g in 0..gts.len() {
                if !used[g] && iou(preds[i].bbox(), &gts[g]) >= tau {
                    used[g] = true;
                    cur.push((i, g));
                    rec(i + 1, preds, gts, tau, used, cur, best);
                    cur.pop();
                    used[g] = false;
                }
            }
        }
        let mut best = (0.0, Vec::new());
        rec(0, preds, gts, tau, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn greedy_equals_exhaustive_on_five_box_scene() {
        let gts = [bx(10.0, 10.0, 50.0, 50.0), bx(100.0, 100.0, 140.0, 150.0)];
        let preds = [
            cand(bx(12.0, 8.0, 52.0, 48.0), 0.9),
            cand(bx(105.0, 102.0, 140.0, 148.0), 0.7),
            cand(bx(60.0, 60.0, 90.0, 90.0), 0.8),
        ];
        let m = greedy_match(&preds, &gts, 0.3);
        let mut got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.prediction, p.ground_truth)).collect();
        got.sort();
        let (_, mut want) = brute_force_best(&preds, &gts, 0.3);
        want.sort();
        assert_eq!(got, want);
        assert_eq!(m.unmatched_predictions, vec![2]);
    }

    #[test]
    fn detected_examples() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        assert!(detected(&gt, &[cand(gt, 0.5)], 0.3));
        assert!(!detected(&gt, &[], 0.3));
        // IoU exactly 1/3 clears a 0.3 bar.
        assert!(detected(&gt, &[cand(bx(5.0, 0.0, 15.0, 10.0), 0.5)], 0.3));
    }

    #[test]
    fn expand_examples() {
        let b = bx(100.0, 100.0, 200.0, 200.0);
        assert_eq!(expand_region(&b, 1.0, 1000.0, 1000.0).unwrap(), b);
        // Independent per-coordinate arithmetic: center 150, half extent 75.
        let want = bx(150.0 - 1.5 * 50.0, 150.0 - 1.5 * 50.0, 150.0 + 1.5 * 50.0, 150.0 + 1.5 * 50.0);
        assert_eq!(expand_region(&b, 1.5, 1000.0, 1000.0).unwrap(), want);
        assert_eq!(want.corners(), [75.0, 75.0, 225.0, 225.0]);

        let e = expand_region(&bx(0.0, 0.0, 200.0, 200.0), 1.5, 1000.0, 1000.0).unwrap();
        assert_eq!(e.corners(), [0.0, 0.0, 250.0, 250.0]);
        assert!(expand_region(&b, 0.9, 1000.0, 1000.0).is_err());
    }

    #[test]
    fn grid_examples() {
        let full = bx(0.0, 0.0, 384.0, 384.0);
        assert_eq!(normalize_to_grid(&full, 384.0, 384.0).unwrap().coords(), [0, 0, 1000, 1000]);
        let unit = bx(0.0, 0.0, 500.0, 500.0);
        assert_eq!(normalize_to_grid(&unit, 1000.0, 1000.0).unwrap().coords(), [0, 0, 500, 500]);
        // 100 * 1000 / 384 = 260 + 5/12 -> 260; 200 * 1000 / 384 = 520 + 5/6 -> 521.
        let b = bx(100.0, 100.0, 200.0, 200.0);
        assert_eq!(normalize_to_grid(&b, 384.0, 384.0).unwrap().coords(), [260, 260, 521, 521]);
        assert!(normalize_to_grid(&b, 0.0, 384.0).is_err());
        assert!(denormalize_from_grid(&GridBox::new(0, 0, 1, 1).unwrap(), 10.0, -1.0).is_err());
        assert!(GridBox::new(0, 0, 1001, 5).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0i32..200, 0i32..200, 0i32..100, 0i32..100)
            .prop_map(|(x, y, w, h)| bx(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_degenerate() {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -50i32..50, dy in -50i32..50) {
            let (dx, dy) = (dx as f64, dy as f64);
            let moved = iou(&a.translate(dx, dy).unwrap(), &b.translate(dx, dy).unwrap());
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn greedy_pairs_disjoint_and_above_threshold(
            preds in proptest::collection::vec((arb_box(), 0.0f64..=1.0), 0..5),
            gts in proptest::collection::vec(arb_box(), 0..5),
            tau in 0.05f64..=1.0,
        ) {
            let preds: Vec<Candidate> = preds.into_iter().map(|(b, c)| cand(b, c)).collect();
            let m = greedy_match(&preds, &gts, tau);
            let mut seen_p = vec![false; preds.len()];
            let mut seen_g = vec![false; gts.len()];
            for p in &m.pairs {
                prop_assert!(!seen_p[p.prediction] && !seen_g[p.ground_truth]);
                seen_p[p.prediction] = true;
                seen_g[p.ground_truth] = true;
                prop_assert!(p.iou >= tau);
            }
            prop_assert_eq!(m.pairs.len() + m.unmatched_predictions.len(), preds.len());
            prop_assert_eq!(m.pairs.len() + m.unmatched_ground_truths.len(), gts.len());
            // Greedy can never beat the exhaustive optimum.
            let greedy_total: f64 = m.pairs.iter().map(|p| p.iou).sum();
            let (best, _) = brute_force_best(&preds, &gts, tau);
            prop_assert!(greedy_total <= best + 1e-9);
        }

        #[test]
        fn detected_monotone_in_tau(gt in arb_box(), f in proptest::collection::vec(arb_box(), 0..4), t in 0.01f64..=1.0, lower in 0.0f64..=1.0) {
            let finals: Vec<Candidate> = f.into_iter().map(|b| cand(b, 0.5)).collect();
            if detected(&gt, &finals, t) {
                prop_assert!(detected(&gt, &finals, (t * lower).max(1e-9)));
            }
        }

        #[test]
        fn grid_round_trip_within_one_cell(a in arb_box(), w in 300u32..2000, h in 300u32..2000) {
            let (w, h) = (w as f64, h as f64);
            let a = a.clip(w, h);
            let back = denormalize_from_grid(&normalize_to_grid(&a, w, h).unwrap(), w, h).unwrap();
            for (orig, rt, ext) in [(a.x1(), back.x1(), w), (a.y1(), back.y1(), h), (a.x2(), back.x2(), w), (a.y2(), back.y2(), h)] {
                prop_assert!((orig - rt).abs() <= ext / 1000.0 + 1e-9);
            }
        }
    }
}

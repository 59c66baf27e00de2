//! Detection evaluation: IoU, greedy matching, precision-recall, AP, mAP@0.5.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Axis-aligned box in absolute corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Invalid(format!("degenerate box {self:?}")));
        }
        Ok(())
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

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// IoU of two boxes already known to be valid.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// Intersection over union; degenerate boxes are rejected.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// A predicted box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// 1-based class id.
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// A ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Precision-recall integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoint,
    ElevenPoint,
    HundredOnePoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub n_gt: usize,
    pub n_tp: usize,
    pub n_fp: usize,
    pub ap: f64,
    /// Precision after each ranked detection.
    pub precision: Vec<f64>,
    /// Recall after each ranked detection.
    pub recall: Vec<f64>,
}

/// Greedy confidence-ordered matching for one class, then AP.
///
/// Detections are ranked by descending confidence, ties kept in input order
/// (scene order, then detection order). Each detection takes the highest-IoU
/// ground truth of its own scene that is still unmatched and overlaps by at
/// least `iou_thresh`; otherwise it is a false positive.
pub fn match_and_ap(scenes: &[Scene], class_id: usize, iou_thresh: f64, interp: ApInterpolation) -> ClassResult {
    let mut ranked: Vec<(usize, &Detection)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| {
            scene
                .detections
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| (s, d))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let gts: Vec<Vec<&GroundTruth>> = scenes
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.class_id == class_id).collect())
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (scene, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[scene].iter().enumerate() {
            if used[scene][j] {
                continue;
            }
            let o = det.bbox.iou(&gt.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                used[scene][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    let ap = if n_gt == 0 {
        0.0
    } else {
        average_precision(&recall, &precision, interp)
    };
    ClassResult {
        class_id,
        n_gt,
        n_tp: tp,
        n_fp: fp,
        ap,
        precision,
        recall,
    }
}

/// Area under a precision-recall curve given as ranked `(recall, precision)` points.
pub fn average_precision(recall: &[f64], precision: &[f64], interp: ApInterpolation) -> f64 {
    match interp {
        ApInterpolation::AllPoint => {
            let mut mrec = Vec::with_capacity(recall.len() + 2);
            let mut mpre = Vec::with_capacity(recall.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            mrec.extend_from_slice(recall);
            mpre.extend_from_slice(precision);
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (0..mrec.len() - 1)
                .filter(|&i| mrec[i + 1] != mrec[i])
                .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
                .sum()
        }
        ApInterpolation::ElevenPoint => sampled_ap(recall, precision, 11),
        ApInterpolation::HundredOnePoint => sampled_ap(recall, precision, 101),
    }
}

fn sampled_ap(recall: &[f64], precision: &[f64], points: usize) -> f64 {
    (0..points)
        .map(|i| {
            let r = i as f64 / (points - 1) as f64;
            recall
                .iter()
                .zip(precision)
                .filter(|(rc, _)| **rc >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / points as f64
}

/// Per-class results and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Classes with at least one ground-truth box, ascending id.
    pub classes: Vec<ClassResult>,
    pub map50: f64,
}

impl EvalReport {
    pub fn class(&self, id: usize) -> Option<&ClassResult> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    /// `class_id,n_gt,n_tp,n_fp,AP` rows followed by an `all` summary row
    /// whose AP column holds mAP@0.5.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,n_gt,n_tp,n_fp,AP\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{},{},{},{:.6}", c.class_id, c.n_gt, c.n_tp, c.n_fp, c.ap);
        }
        let sum = |f: fn(&ClassResult) -> usize| self.classes.iter().map(f).sum::<usize>();
        let _ = writeln!(
            out,
            "all,{},{},{},{:.6}",
            sum(|c| c.n_gt),
            sum(|c| c.n_tp),
            sum(|c| c.n_fp),
            self.map50
        );
        out
    }

    /// mAP@0.5 as a percentage, two decimals.
    pub fn summary(&self) -> String {
        format!("mAP@0.5 = {:.2}%", self.map50 * 100.0)
    }
}

/// mAP at IoU 0.5 over classes `1..=num_classes` with ground truth present.
pub fn map50(scenes: &[Scene], num_classes: usize) -> Result<EvalReport> {
    evaluate(scenes, num_classes, 0.5, ApInterpolation::AllPoint)
}

pub fn evaluate(scenes: &[Scene], num_classes: usize, iou_thresh: f64, interp: ApInterpolation) -> Result<EvalReport> {
    for scene in scenes {
        let ids = scene
            .detections
            .iter()
            .map(|d| d.class_id)
            .chain(scene.ground_truth.iter().map(|g| g.class_id));
        for id in ids {
            if id == 0 || id > num_classes {
                return Err(Error::Invalid(format!("class id {id} outside 1..={num_classes}")));
            }
        }
    }
    let classes: Vec<ClassResult> = (1..=num_classes)
        .map(|c| match_and_ap(scenes, c, iou_thresh, interp))
        .filter(|r| r.n_gt > 0)
        .collect();
    if classes.is_empty() {
        return Err(Error::Invalid("no ground-truth boxes to evaluate against".into()));
    }
    let map50 = classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64;
    Ok(EvalReport { classes, map50 })
}

use super::graph::HeadLayout;
use crate::error::{Error, Result};
use crate::metrics::{BBox, Detection};
use crate::tensor::{sigmoid, Tensor};

/// Log-size offsets are clamped to `[-6, 6]` before exponentiation.
pub const BOX_LOG_CLAMP: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub conf_threshold: f64,
    /// Boxes of one class overlapping a kept box by more than this are suppressed.
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            conf_threshold: 0.001,
            iou_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// Cell-relative offsets `(tx, ty, tw, th)` to an absolute `(cx, cy, w, h)`.
///
/// The centre may land anywhere in `(-0.5, 1.5)` cells from the cell's
/// corner, so centres on a cell edge need no saturated sigmoid.
pub fn decode_box(raw: [f64; 4], gx: usize, gy: usize, stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [
        (gx as f64 + center_offset(raw[0])) * s,
        (gy as f64 + center_offset(raw[1])) * s,
        s * raw[2].clamp(-BOX_LOG_CLAMP, BOX_LOG_CLAMP).exp(),
        s * raw[3].clamp(-BOX_LOG_CLAMP, BOX_LOG_CLAMP).exp(),
    ]
}

pub fn center_offset(t: f64) -> f64 {
    2.0 * sigmoid(t) - 0.5
}

/// Turns raw head maps into per-image detections.
///
/// Each cell proposes one box with its best class at confidence
/// `sigmoid(obj) * sigmoid(cls)`; survivors of the threshold go through
/// per-class greedy NMS. NaN entries are an error; infinities are allowed.
pub fn decode(
    heads: &[Tensor],
    strides: &[usize],
    num_classes: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Detection>>> {
    if heads.len() != strides.len() || heads.is_empty() {
        return Err(Error::shape(
            "decode",
            format!("{} head maps for {} strides", heads.len(), strides.len()),
        ));
    }
    let layout = HeadLayout { num_classes };
    let batch = heads[0].nchw("decode")?.0;
    let mut per_image = vec![Vec::new(); batch];
    for (level, (head, &stride)) in heads.iter().zip(strides).enumerate() {
        let (n, c, h, w) = head.nchw("decode")?;
        if n != batch || c != layout.channels() {
            return Err(Error::shape(
                "decode",
                format!(
                    "head.{level} has dims {:?}, expected ({batch}, {}, _, _)",
                    head.dims(),
                    layout.channels()
                ),
            ));
        }
        if head.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                op: format!("head.{level}"),
            });
        }
        for (img, dets) in per_image.iter_mut().enumerate() {
            for gy in 0..h {
                for gx in 0..w {
                    let at = |ch: usize| head.at(img, ch, gy, gx);
                    let obj = sigmoid(at(HeadLayout::OBJ));
                    if obj < cfg.conf_threshold {
                        continue;
                    }
                    let (best, logit) = (0..num_classes)
                        .map(|k| (k, at(HeadLayout::CLS + k)))
                        .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                    let confidence = obj * sigmoid(logit);
                    if confidence < cfg.conf_threshold || confidence <= 0.0 {
                        continue;
                    }
                    let [cx, cy, bw, bh] = decode_box([at(0), at(1), at(2), at(3)], gx, gy, stride);
                    dets.push(Detection {
                        class_id: best + 1,
                        bbox: BBox::from_center(cx, cy, bw, bh)?,
                        confidence,
                    });
                }
            }
        }
    }
    Ok(per_image
        .into_iter()
        .map(|dets| {
            let mut kept = nms(dets, cfg.iou_threshold);
            kept.truncate(cfg.max_detections);
            kept
        })
        .collect())
}

/// Greedy per-class non-maximum suppression. Output is sorted by descending
/// confidence; equal confidences keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

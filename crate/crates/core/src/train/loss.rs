//! Composite detection loss over raw head maps.
//!
//! Per image: objectness BCE summed over every cell of every scale, plus
//! class BCE and `1 - DIoU` box loss summed over assigned cells, all divided
//! by the number of assigned cells (at least one). Each ground-truth box goes to the one scale whose stride
//! best matches its size (see [`scale_for`]), at the cell containing its
//! centre; the first box claiming a cell keeps it.

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::model::{decode_box, HeadLayout, BOX_LOG_CLAMP};
use crate::tensor::{sigmoid, softplus, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub boxes: f64,
    pub objectness: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            boxes: 5.0,
            objectness: 1.0,
            class: 1.0,
        }
    }
}

/// A ground-truth box in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Pixel-space targets for an image of the given size.
pub fn gt_boxes(anns: &[Annotation], img_w: usize, img_h: usize) -> Vec<GtBox> {
    anns.iter()
        .filter_map(|a| {
            let [x1, y1, x2, y2] = a.to_pixels(img_w, img_h);
            BBox::new(x1, y1, x2, y2).ok().map(|bbox| GtBox {
                class_id: a.class_id,
                bbox,
            })
        })
        .collect()
}

/// `1 - DIoU` between a box `(a1, b1, a2, b2)` and a fixed target, with its
/// gradient with respect to the four corners.
pub fn diou_loss(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let [a1, b1, a2, b2] = p;
    let [t1, u1, t2, u2] = t;
    let iw = a2.min(t2) - a1.max(t1);
    let ih = b2.min(u2) - b1.max(u1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let ap = (a2 - a1) * (b2 - b1);
    let union = ap + (t2 - t1) * (u2 - u1) - inter;
    let iou = inter / union;

    // d(inter) and d(ap) per corner
    let d_inter = if overlap {
        [
            if a1 > t1 { -ih } else { 0.0 },
            if b1 > u1 { -iw } else { 0.0 },
            if a2 < t2 { ih } else { 0.0 },
            if b2 < u2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_ap = [-(b2 - b1), -(a2 - a1), b2 - b1, a2 - a1];

    let (dx, dy) = ((a1 + a2 - t1 - t2) / 2.0, (b1 + b2 - u1 - u2) / 2.0);
    let rho2 = dx * dx + dy * dy;
    let cw = a2.max(t2) - a1.min(t1);
    let ch = b2.max(u2) - b1.min(u1);
    let c2 = cw * cw + ch * ch + 1e-12;
    let d_rho2 = [dx, dy, dx, dy];
    let d_c2 = [
        if a1 < t1 { -2.0 * cw } else { 0.0 },
        if b1 < u1 { -2.0 * ch } else { 0.0 },
        if a2 > t2 { 2.0 * cw } else { 0.0 },
        if b2 > u2 { 2.0 * ch } else { 0.0 },
    ];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_ap[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_pen = (d_rho2[k] * c2 - rho2 * d_c2[k]) / (c2 * c2);
        grad[k] = -d_iou + d_pen;
    }
    (1.0 - iou + rho2 / c2, grad)
}

/// Box loss of raw offsets at cell `(gx, gy)`, with gradient wrt the offsets.
fn box_term(raw: [f64; 4], gx: usize, gy: usize, stride: usize, target: &BBox) -> (f64, [f64; 4]) {
    let [cx, cy, w, h] = decode_box(raw, gx, gy, stride);
    let p = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
    let (loss, g) = diou_loss(p, [target.x1, target.y1, target.x2, target.y2]);
    let s = stride as f64;
    let (d_cx, d_cy) = (g[0] + g[2], g[1] + g[3]);
    let (d_w, d_h) = ((g[2] - g[0]) / 2.0, (g[3] - g[1]) / 2.0);
    let sx = sigmoid(raw[0]);
    let sy = sigmoid(raw[1]);
    let inside = |v: f64| v.abs() < BOX_LOG_CLAMP;
    (
        loss,
        [
            d_cx * s * 2.0 * sx * (1.0 - sx),
            d_cy * s * 2.0 * sy * (1.0 - sy),
            if inside(raw[2]) { d_w * w } else { 0.0 },
            if inside(raw[3]) { d_h * h } else { 0.0 },
        ],
    )
}

/// Index of the stride closest to `max_side / 4` in log space, so at
/// strides 8/16/32 the splits fall near 45 and 91 px.
pub fn scale_for(bbox: &BBox, strides: &[usize]) -> usize {
    let side = bbox.width().max(bbox.height()).max(1e-9).ln();
    let gap = |s: usize| (side - (4.0 * s as f64).ln()).abs();
    (0..strides.len())
        .min_by(|&a, &b| gap(strides[a]).total_cmp(&gap(strides[b])))
        .unwrap_or(0)
}

/// Cell assignment of one image at one scale: `(gy * w + gx) -> gt index`.
fn assign(gts: &[GtBox], keep: impl Fn(&GtBox) -> bool, stride: usize, h: usize, w: usize) -> Vec<Option<usize>> {
    let mut cells = vec![None; h * w];
    for (i, gt) in gts.iter().enumerate().filter(|(_, g)| keep(g)) {
        let cx = (gt.bbox.x1 + gt.bbox.x2) / 2.0;
        let cy = (gt.bbox.y1 + gt.bbox.y2) / 2.0;
        let gx = ((cx / stride as f64).floor().max(0.0) as usize).min(w - 1);
        let gy = ((cy / stride as f64).floor().max(0.0) as usize).min(h - 1);
        cells[gy * w + gx].get_or_insert(i);
    }
    cells
}

/// Loss value and gradient with respect to each head map, summed over images.
pub fn loss_and_grad(
    heads: &[&Tensor],
    strides: &[usize],
    targets: &[Vec<GtBox>],
    num_classes: usize,
    weights: &LossWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let layout = HeadLayout { num_classes };
    let batch = targets.len();
    let mut grads: Vec<Vec<f64>> = heads.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut total = 0.0;
    for (img, gts) in targets.iter().enumerate() {
        for gt in gts {
            if gt.class_id == 0 || gt.class_id > num_classes {
                return Err(Error::Invalid(format!(
                    "target class {} outside 1..={num_classes}",
                    gt.class_id
                )));
            }
        }
        let assignments: Vec<Vec<Option<usize>>> = heads
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(level, (t, &s))| {
                let (_, _, h, w) = t.nchw("detection_loss")?;
                Ok(assign(gts, |g| scale_for(&g.bbox, strides) == level, s, h, w))
            })
            .collect::<Result<_>>()?;
        let n_pos: usize = assignments.iter().flatten().filter(|c| c.is_some()).count();
        let pos_scale = 1.0 / n_pos.max(1) as f64;

        for (level, (head, &stride)) in heads.iter().zip(strides).enumerate() {
            let (n, c, h, w) = head.nchw("detection_loss")?;
            if n != batch || c != layout.channels() {
                return Err(Error::shape(
                    "detection_loss",
                    format!("head.{level} dims {:?}", head.dims()),
                ));
            }
            let plane = h * w;
            let base = img * c * plane;
            let data = head.data();
            let g = &mut grads[level];
            let obj_scale = weights.objectness * pos_scale;
            for cell in 0..plane {
                let at = |ch: usize| base + ch * plane + cell;
                let z = data[at(HeadLayout::OBJ)];
                let assigned = assignments[level][cell];
                let y = if assigned.is_some() { 1.0 } else { 0.0 };
                total += obj_scale * (softplus(z) - y * z);
                g[at(HeadLayout::OBJ)] += obj_scale * (sigmoid(z) - y);

                let Some(gi) = assigned else { continue };
                let gt = &gts[gi];
                for k in 0..num_classes {
                    let zc = data[at(HeadLayout::CLS + k)];
                    let yc = if k + 1 == gt.class_id { 1.0 } else { 0.0 };
                    total += weights.class * pos_scale * (softplus(zc) - yc * zc);
                    g[at(HeadLayout::CLS + k)] += weights.class * pos_scale * (sigmoid(zc) - yc);
                }
                let raw = [data[at(0)], data[at(1)], data[at(2)], data[at(3)]];
                let (gx, gy) = (cell % w, cell / w);
                let (l, d) = box_term(raw, gx, gy, stride, &gt.bbox);
                total += weights.boxes * pos_scale * l;
                for k in 0..4 {
                    g[at(k)] += weights.boxes * pos_scale * d[k];
                }
            }
        }
    }
    Ok((total, grads))
}

/// The loss as a scalar tape node over the head maps.
pub fn detection_loss<'t>(
    tape: &'t Tape,
    heads: &[Var<'t>],
    strides: &[usize],
    targets: &[Vec<GtBox>],
    num_classes: usize,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let values: Vec<_> = heads.iter().map(|v| v.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let (loss, grads) = loss_and_grad(&refs, strides, targets, num_classes, weights)?;
    Ok(tape.custom("detection_loss", heads, Tensor::scalar(loss), move || {
        Box::new(move |g| {
            grads
                .iter()
                .map(|d| Some(d.iter().map(|v| v * g[0]).collect()))
                .collect()
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_zero_loss() {
        let (l, g) = diou_loss([1.0, 2.0, 5.0, 7.0], [1.0, 2.0, 5.0, 7.0]);
        assert!(l.abs() < 1e-12);
        // the minimum sits on a kink; any one-sided slope is acceptable
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn disjoint_boxes_exceed_one() {
        let (l, _) = diou_loss([0.0, 0.0, 1.0, 1.0], [3.0, 0.0, 4.0, 1.0]);
        // iou 0, centre distance 3, enclosing diagonal^2 = 16 + 1
        assert!((l - (1.0 + 9.0 / 17.0)).abs() < 1e-9);
    }

    #[test]
    fn centre_cell_assignment_keeps_first() {
        let b = |x1, y1, x2, y2, class_id| GtBox {
            class_id,
            bbox: BBox::new(x1, y1, x2, y2).unwrap(),
        };
        let gts = [
            b(0.0, 0.0, 10.0, 10.0, 1),
            b(2.0, 2.0, 8.0, 8.0, 2),
            b(40.0, 20.0, 60.0, 30.0, 3),
        ];
        let cells = assign(&gts, |_| true, 8, 8, 8);
        assert_eq!(cells[0], Some(0));
        assert_eq!(cells[3 * 8 + 6], Some(2));
        assert_eq!(cells.iter().filter(|c| c.is_some()).count(), 2);
    }

    #[test]
    fn scale_follows_size() {
        let sq = |side: f64| BBox::new(0.0, 0.0, side, side).unwrap();
        let strides = [8, 16, 32];
        assert_eq!(scale_for(&sq(3.0), &strides), 0);
        assert_eq!(scale_for(&sq(44.0), &strides), 0);
        assert_eq!(scale_for(&sq(46.0), &strides), 1);
        assert_eq!(scale_for(&sq(90.0), &strides), 1);
        assert_eq!(scale_for(&sq(92.0), &strides), 2);
        assert_eq!(scale_for(&sq(600.0), &strides), 2);
    }
}

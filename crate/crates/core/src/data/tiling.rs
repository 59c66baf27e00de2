use super::image::Image;
use super::labels::Annotation;

/// Clip-retention rules for boxes cut by tile borders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePolicy {
    pub tile: usize,
    /// Minimum clipped-area / original-area ratio to keep a box.
    pub min_area_ratio: f64,
    /// Minimum clipped width and height in pixels.
    pub min_side_px: f64,
}

impl Default for TilePolicy {
    fn default() -> Self {
        TilePolicy {
            tile: 640,
            min_area_ratio: 0.25,
            min_side_px: 2.0,
        }
    }
}

/// Origins along one axis: `ceil(len / tile)` windows on a stride-`tile`
/// grid, the last shifted back inside when `len > tile`.
pub fn axis_origins(len: usize, tile: usize) -> Vec<usize> {
    let n = len.div_ceil(tile).max(1);
    (0..n)
        .map(|i| if len > tile { (i * tile).min(len - tile) } else { 0 })
        .collect()
}

/// Tile origins `(x, y)` in row-major order.
pub fn plan_tiles(img_w: usize, img_h: usize, tile: usize) -> Vec<(usize, usize)> {
    let xs = axis_origins(img_w, tile);
    axis_origins(img_h, tile)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (x, y)))
        .collect()
}

/// Annotations of a source image re-expressed in one tile's frame.
///
/// Boxes are first clipped to the image, then to the tile's in-image
/// window; survivors of the policy are normalized by the tile size.
pub fn remap_annotations(
    anns: &[Annotation],
    img_w: usize,
    img_h: usize,
    origin: (usize, usize),
    policy: &TilePolicy,
) -> Vec<Annotation> {
    let t = policy.tile as f64;
    let (ox, oy) = (origin.0 as f64, origin.1 as f64);
    let win = [ox, oy, (ox + t).min(img_w as f64), (oy + t).min(img_h as f64)];
    let mut out = Vec::new();
    for a in anns {
        let [x1, y1, x2, y2] = a.to_pixels(img_w, img_h);
        let (x1, y1) = (x1.max(0.0), y1.max(0.0));
        let (x2, y2) = (x2.min(img_w as f64), y2.min(img_h as f64));
        let area = (x2 - x1) * (y2 - y1);
        if x2 <= x1 || y2 <= y1 {
            continue;
        }
        let (cx1, cy1) = (x1.max(win[0]), y1.max(win[1]));
        let (cx2, cy2) = (x2.min(win[2]), y2.min(win[3]));
        let (cw, ch) = (cx2 - cx1, cy2 - cy1);
        if cw < policy.min_side_px || ch < policy.min_side_px || cw * ch < policy.min_area_ratio * area {
            continue;
        }
        out.push(Annotation {
            class_id: a.class_id,
            cx: (((cx1 + cx2) / 2.0 - ox) / t).clamp(0.0, 1.0),
            cy: (((cy1 + cy2) / 2.0 - oy) / t).clamp(0.0, 1.0),
            w: (cw / t).min(1.0),
            h: (ch / t).min(1.0),
        });
    }
    out
}

/// One cut-out with its remapped annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: String,
    pub source_id: String,
    pub origin: (usize, usize),
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// Cuts an image into tiles, dropping tiles without annotations.
pub fn tile_image(source_id: &str, img: &Image, anns: &[Annotation], policy: &TilePolicy) -> Vec<Tile> {
    plan_tiles(img.width, img.height, policy.tile)
        .into_iter()
        .filter_map(|origin| {
            let annotations = remap_annotations(anns, img.width, img.height, origin, policy);
            if annotations.is_empty() {
                return None;
            }
            Some(Tile {
                id: format!("{source_id}_{}_{}", origin.0, origin.1),
                source_id: source_id.to_string(),
                origin,
                image: img.crop_replicate(origin.0, origin.1, policy.tile, policy.tile),
                annotations,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(cx: f64, cy: f64, w: f64, h: f64) -> Annotation {
        Annotation {
            class_id: 1,
            cx,
            cy,
            w,
            h,
        }
    }

    #[test]
    fn grid_counts_and_shift() {
        // ceil(2446 / 640) = 4 columns, ceil(1000 / 640) = 2 rows
        assert_eq!(plan_tiles(2446, 1000, 640).len(), 8);
        assert_eq!(axis_origins(2446, 640), vec![0, 640, 1280, 1806]);
        assert_eq!(axis_origins(1000, 640), vec![0, 360]);
        assert_eq!(plan_tiles(640, 640, 640), vec![(0, 0)]);
        assert_eq!(plan_tiles(700, 640, 640), vec![(0, 0), (60, 0)]);
        assert_eq!(plan_tiles(100, 50, 640), vec![(0, 0)]);
    }

    #[test]
    fn contained_box_is_renormalized() {
        // 64x64 box centred at (100, 100) in a 1280x640 image
        let a = ann(100.0 / 1280.0, 100.0 / 640.0, 64.0 / 1280.0, 64.0 / 640.0);
        let p = TilePolicy::default();
        let r = remap_annotations(&[a], 1280, 640, (0, 0), &p);
        assert_eq!(r.len(), 1);
        assert!((r[0].cx - 100.0 / 640.0).abs() < 1e-12);
        assert!((r[0].w - 0.1).abs() < 1e-12);
        assert!(remap_annotations(&[a], 1280, 640, (640, 0), &p).is_empty());
    }

    #[test]
    fn straddling_box_kept_on_both_sides() {
        // box spans x 600..700 in a 1280-wide image: 40% left, 60% right
        let a = ann(650.0 / 1280.0, 0.5, 100.0 / 1280.0, 0.1);
        let p = TilePolicy::default();
        assert_eq!(remap_annotations(&[a], 1280, 640, (0, 0), &p).len(), 1);
        assert_eq!(remap_annotations(&[a], 1280, 640, (640, 0), &p).len(), 1);
        // 70 / 30 split: x 570..670
        let b = ann(620.0 / 1280.0, 0.5, 100.0 / 1280.0, 0.1);
        let right = remap_annotations(&[b], 1280, 640, (640, 0), &p);
        assert_eq!(right.len(), 1);
        assert!((right[0].w - 30.0 / 640.0).abs() < 1e-12);
        // 80 / 20 split drops the sliver
        let c = ann(610.0 / 1280.0, 0.5, 100.0 / 1280.0, 0.1);
        assert!(remap_annotations(&[c], 1280, 640, (640, 0), &p).is_empty());
    }

    #[test]
    fn empty_tiles_are_discarded() {
        let img = Image::filled(1280, 640, [9, 9, 9]);
        let tiles = tile_image("src", &img, &[ann(0.1, 0.5, 0.05, 0.1)], &TilePolicy::default());
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].id, "src_0_0");
        assert_eq!((tiles[0].image.width, tiles[0].image.height), (640, 640));
    }
}

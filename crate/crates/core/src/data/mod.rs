//! Dataset ingestion: images, YOLO labels, tiling, splitting and statistics.
//!
//! On-disk layout of a split is `images/<id>.{ppm,png}` next to
//! `labels/<id>.txt`; a prepared dataset holds `train/` and `val/` splits.

mod image;
mod labels;
mod tiling;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use image::{is_image, load_image, read_png, read_ppm, write_png, write_ppm, Image, IMAGE_EXTENSIONS};
pub use labels::{
    format_labels, format_predictions, parse_labels, parse_predictions, read_labels, write_labels, Annotation,
    Prediction, MAX_CLASSES,
};
pub use tiling::{axis_origins, plan_tiles, remap_annotations, tile_image, Tile, TilePolicy};

use crate::error::{Error, Result};

/// Category names, indexed by `class_id - 1`.
pub const CATEGORY_NAMES: [&str; MAX_CLASSES] = [
    "holes",
    "water stains, etc.",
    "three-yarn defects",
    "knots",
    "pattern skips",
    "hundred-leg defects",
    "neps",
    "thick ends",
    "loose ends",
    "broken ends",
    "sagging ends",
    "thick fibers",
    "weft shrinkage",
    "sizing spots",
    "warp knots",
    "star skips, etc.",
    "broken spandex",
    "color shading, etc.",
    "abrasion marks, etc.",
    "dead folds, etc.",
];

/// An image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// Sorted image paths directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Locates images and labels of a split: `dir/images` + `dir/labels` when
/// present, else images and `.txt` files side by side in `dir`.
fn split_dirs(dir: &Path) -> (PathBuf, PathBuf) {
    let images = dir.join("images");
    if images.is_dir() {
        (images, dir.join("labels"))
    } else {
        (dir.to_path_buf(), dir.to_path_buf())
    }
}

/// Loads every image of a split; a missing label file means no annotations.
pub fn load_split(dir: &Path) -> Result<Vec<LabeledImage>> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("{} is not a directory", dir.display())));
    }
    let (img_dir, label_dir) = split_dirs(dir);
    let paths = list_images(&img_dir)?;
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no images found in {}", img_dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = stem(p);
            let label_path = label_dir.join(format!("{id}.txt"));
            let annotations = if label_path.is_file() {
                read_labels(&label_path)?
            } else {
                Vec::new()
            };
            Ok(LabeledImage {
                id,
                image: load_image(p)?,
                annotations,
            })
        })
        .collect()
}

/// Writes `images/<id>.ppm` and `labels/<id>.txt` under `dir`.
pub fn save_split(dir: &Path, items: &[LabeledImage]) -> Result<()> {
    let (img_dir, label_dir) = (dir.join("images"), dir.join("labels"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&label_dir)?;
    for item in items {
        write_ppm(&img_dir.join(format!("{}.ppm", item.id)), &item.image)?;
        write_labels(&label_dir.join(format!("{}.txt", item.id)), &item.annotations)?;
    }
    Ok(())
}

/// Partitions source ids `train:val = ratio.0:ratio.1` after a seeded shuffle.
///
/// The validation share is rounded to the nearest whole source; both halves
/// are returned sorted.
pub fn split_sources(ids: &[String], ratio: (usize, usize), seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = ratio.0 + ratio.1;
    let n_val = (shuffled.len() * ratio.1 + total / 2) / total.max(1);
    let mut val = shuffled.split_off(shuffled.len() - n_val);
    shuffled.sort();
    val.sort();
    (shuffled, val)
}

/// Splits items `train:val = ratio.0:ratio.1` by id, as [`split_sources`],
/// keeping input order within each half.
pub fn split_items(
    items: Vec<LabeledImage>,
    ratio: (usize, usize),
    seed: u64,
) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let (_, val_ids) = split_sources(&ids, ratio, seed);
    items.into_iter().partition(|i| val_ids.binary_search(&i.id).is_err())
}

/// One manifest row per written tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub tile_id: String,
    pub source_id: String,
    pub origin_x: usize,
    pub origin_y: usize,
    pub n_annotations: usize,
}

pub fn manifest_csv(rows: &[ManifestRow]) -> String {
    let mut s = String::from("tile_id,source_id,origin_x,origin_y,n_annotations\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.tile_id, r.source_id, r.origin_x, r.origin_y, r.n_annotations
        );
    }
    s
}

/// Per-category image and box counts of both partitions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CategoryStats {
    pub train_images: usize,
    pub train_boxes: usize,
    pub val_images: usize,
    pub val_boxes: usize,
}

/// Counts, for each category, the images containing it and its boxes.
pub fn category_stats(train: &[Vec<Annotation>], val: &[Vec<Annotation>]) -> Vec<CategoryStats> {
    let mut stats = vec![CategoryStats::default(); MAX_CLASSES];
    for (part, is_train) in [(train, true), (val, false)] {
        for anns in part {
            let mut seen = [false; MAX_CLASSES];
            for a in anns {
                let s = &mut stats[a.class_id - 1];
                if is_train {
                    s.train_boxes += 1;
                } else {
                    s.val_boxes += 1;
                }
                if !seen[a.class_id - 1] {
                    seen[a.class_id - 1] = true;
                    if is_train {
                        s.train_images += 1;
                    } else {
                        s.val_images += 1;
                    }
                }
            }
        }
    }
    stats
}

/// `id,name,train_img,train_ann,val_img,val_ann` rows for all categories.
pub fn stats_csv(stats: &[CategoryStats]) -> String {
    let mut s = String::from("id,name,train_img,train_ann,val_img,val_ann\n");
    for (i, c) in stats.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},\"{}\",{},{},{},{}",
            i + 1,
            CATEGORY_NAMES[i],
            c.train_images,
            c.train_boxes,
            c.val_images,
            c.val_boxes
        );
    }
    s
}

/// Summary of a tiling run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSummary {
    pub sources: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub annotations: usize,
}

/// Tiles every image of `input`, splits by source image and writes
/// `out/{train,val}/{images,labels,manifest.csv}` plus `out/stats.csv`.
pub fn tile_dataset(input: &Path, out: &Path, policy: &TilePolicy, seed: u64) -> Result<TileSummary> {
    let (img_dir, label_dir) = split_dirs(input);
    let paths = if img_dir.is_dir() {
        list_images(&img_dir)?
    } else {
        Vec::new()
    };
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no images found in {}", input.display())));
    }
    let ids: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let (_, val_ids) = split_sources(&ids, (4, 1), seed);

    let tiled: Vec<Vec<Tile>> = paths
        .par_iter()
        .map(|p| {
            let id = stem(p);
            let label_path = label_dir.join(format!("{id}.txt"));
            let anns = if label_path.is_file() {
                read_labels(&label_path)?
            } else {
                Vec::new()
            };
            Ok(tile_image(&id, &load_image(p)?, &anns, policy))
        })
        .collect::<Result<_>>()?;

    let mut summary = TileSummary {
        sources: paths.len(),
        train_tiles: 0,
        val_tiles: 0,
        annotations: 0,
    };
    let mut labels_by_part: [Vec<Vec<Annotation>>; 2] = Default::default();
    for (part, name) in [(0usize, "train"), (1, "val")] {
        let dir = out.join(name);
        let mut rows = Vec::new();
        let mut items = Vec::new();
        for tile in tiled.iter().flatten() {
            if val_ids.binary_search(&tile.source_id).is_ok() != (part == 1) {
                continue;
            }
            rows.push(ManifestRow {
                tile_id: tile.id.clone(),
                source_id: tile.source_id.clone(),
                origin_x: tile.origin.0,
                origin_y: tile.origin.1,
                n_annotations: tile.annotations.len(),
            });
            summary.annotations += tile.annotations.len();
            labels_by_part[part].push(tile.annotations.clone());
            items.push(LabeledImage {
                id: tile.id.clone(),
                image: tile.image.clone(),
                annotations: tile.annotations.clone(),
            });
        }
        save_split(&dir, &items)?;
        std::fs::write(dir.join("manifest.csv"), manifest_csv(&rows))?;
        if part == 0 {
            summary.train_tiles = rows.len();
        } else {
            summary.val_tiles = rows.len();
        }
    }
    let stats = category_stats(&labels_by_part[0], &labels_by_part[1]);
    std::fs::write(out.join("stats.csv"), stats_csv(&stats))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_sources_split_eight_two() {
        let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
        let (train, val) = split_sources(&ids, (4, 1), 7);
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(split_sources(&ids, (4, 1), 7), (train.clone(), val.clone()));
        assert!(val.iter().all(|v| !train.contains(v)));
    }

    #[test]
    fn stats_count_images_once_per_category() {
        let a = |class_id| Annotation {
            class_id,
            cx: 0.5,
            cy: 0.5,
            w: 0.1,
            h: 0.1,
        };
        let s = category_stats(&[vec![a(1), a(1), a(2)]], &[vec![a(1)]]);
        assert_eq!(
            s[0],
            CategoryStats {
                train_images: 1,
                train_boxes: 2,
                val_images: 1,
                val_boxes: 1
            }
        );
        assert_eq!(s[1].train_boxes, 1);
        assert!(stats_csv(&s).lines().nth(1).unwrap().starts_with("1,\"holes\",1,2,1,1"));
    }
}

//! Synthetic woven-fabric scenes with labelled defects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Annotation, Image, LabeledImage, MAX_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub max_defects: usize,
    /// Weave period in pixels.
    pub weave_period: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            max_defects: 3,
            weave_period: 4.0,
            noise: 8.0,
        }
    }
}

/// Defect shape; class `k` uses shape `(k - 1) % 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Blob,
    VerticalStreak,
    HorizontalStreak,
    Spot,
}

fn shape_of(class_id: usize) -> Shape {
    match (class_id - 1) % 4 {
        0 => Shape::Blob,
        1 => Shape::VerticalStreak,
        2 => Shape::HorizontalStreak,
        _ => Shape::Spot,
    }
}

/// Signed intensity change of a class: shapes alternate polarity, later
/// groups of four are fainter and flipped.
fn contrast(class_id: usize) -> f64 {
    let group = (class_id - 1) / 4;
    let base = match shape_of(class_id) {
        Shape::Blob | Shape::VerticalStreak => -1.0,
        Shape::HorizontalStreak | Shape::Spot => 1.0,
    };
    let sign = if group.is_multiple_of(2) { base } else { -base };
    sign * (80.0 - 10.0 * group as f64)
}

/// `n_images` scenes drawn with `n_classes` defect kinds, deterministic in `seed`.
pub fn gen_synth_dataset(n_images: usize, n_classes: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    gen_synth_with(&SynthConfig::default(), n_images, n_classes, seed)
}

pub fn gen_synth_with(cfg: &SynthConfig, n_images: usize, n_classes: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "synthetic class count {n_classes} outside 1..={MAX_CLASSES}"
        )));
    }
    if cfg.size < 32 || cfg.max_defects == 0 {
        return Err(Error::Config(
            "synthetic scenes need size >= 32 and at least one defect".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images).map(|i| scene(cfg, n_classes, &mut rng, i)).collect()
}

fn scene(cfg: &SynthConfig, n_classes: usize, rng: &mut ChaCha8Rng, index: usize) -> Result<LabeledImage> {
    let n = cfg.size;
    let tau = std::f64::consts::TAU;
    let (phase_x, phase_y) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
    let level = rng.gen_range(120.0..160.0);
    let mut px: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            let weave = (tau * x / cfg.weave_period + phase_x).sin() * (tau * y / cfg.weave_period + phase_y).sin();
            level + 18.0 * weave + rng.gen_range(-cfg.noise..=cfg.noise)
        })
        .collect();

    let scale = n as f64 / 64.0;
    let dim = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| ((rng.gen_range(lo..=hi) * scale).round() as usize).max(2);
    let wanted = rng.gen_range(1..=cfg.max_defects);
    let mut boxes: Vec<(usize, [usize; 4])> = Vec::new();
    for _ in 0..wanted {
        let class_id = rng.gen_range(1..=n_classes);
        let (w, h) = match shape_of(class_id) {
            Shape::Blob => {
                let d = dim(rng, 9.0, 16.0);
                (d, d)
            }
            Shape::VerticalStreak => (dim(rng, 2.0, 4.0), dim(rng, 14.0, 28.0)),
            Shape::HorizontalStreak => (dim(rng, 14.0, 28.0), dim(rng, 2.0, 4.0)),
            Shape::Spot => {
                let d = dim(rng, 6.0, 12.0);
                (d, d)
            }
        };
        // rejection-sample a position clear of earlier defects, with a 2 px gap
        let placed = (0..20).find_map(|_| {
            let x0 = rng.gen_range(1..n - w);
            let y0 = rng.gen_range(1..n - h);
            let clear = boxes.iter().all(|(_, b)| {
                x0 + w + 2 <= b[0] || b[0] + b[2] + 2 <= x0 || y0 + h + 2 <= b[1] || b[1] + b[3] + 2 <= y0
            });
            clear.then_some([x0, y0, w, h])
        });
        if let Some(b) = placed {
            paint(&mut px, n, class_id, b, rng);
            boxes.push((class_id, b));
        }
    }

    let gray: Vec<u8> = px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let annotations = boxes
        .iter()
        .map(|&(class_id, [x0, y0, w, h])| Annotation {
            class_id,
            cx: (x0 as f64 + w as f64 / 2.0) / n as f64,
            cy: (y0 as f64 + h as f64 / 2.0) / n as f64,
            w: w as f64 / n as f64,
            h: h as f64 / n as f64,
        })
        .collect();
    Ok(LabeledImage {
        id: format!("synth_{index:05}"),
        image: Image::from_gray(n, n, &gray)?,
        annotations,
    })
}

fn paint(px: &mut [f64], n: usize, class_id: usize, [x0, y0, w, h]: [usize; 4], rng: &mut ChaCha8Rng) {
    let delta = contrast(class_id) * rng.gen_range(0.8..1.0);
    let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
    let r = w as f64 / 2.0;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = match shape_of(class_id) {
                Shape::Blob => {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                }
                _ => true,
            };
            if inside {
                px[y * n + x] += delta;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        assert!(gen_synth_dataset(0, 4, 1).unwrap().is_empty());
        let a = gen_synth_dataset(5, 4, 9).unwrap();
        let b = gen_synth_dataset(5, 4, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synth_dataset(5, 4, 10).unwrap());
    }

    #[test]
    fn annotations_are_valid_and_in_range() {
        for item in gen_synth_dataset(50, 20, 3).unwrap() {
            assert!(!item.annotations.is_empty());
            for a in &item.annotations {
                a.validate().unwrap();
                assert!(a.cx - a.w / 2.0 >= 0.0 && a.cx + a.w / 2.0 <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_too_many_classes() {
        assert!(gen_synth_dataset(1, 21, 0).is_err());
    }
}

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest supported class id.
pub const MAX_CLASSES: usize = 20;

/// A box in YOLO form, normalized to the image frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    /// 1-based category id.
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    /// Checks ranges; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.class_id == 0 || self.class_id > MAX_CLASSES {
            return Err(format!("class {} outside 1..={MAX_CLASSES}", self.class_id));
        }
        for (name, v) in [("cx", self.cx), ("cy", self.cy)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (name, v) in [("w", self.w), ("h", self.h)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} = {v} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Corners in pixels for an image of the given size.
    pub fn to_pixels(&self, img_w: usize, img_h: usize) -> [f64; 4] {
        let (w, h) = (img_w as f64, img_h as f64);
        [
            (self.cx - self.w / 2.0) * w,
            (self.cy - self.h / 2.0) * h,
            (self.cx + self.w / 2.0) * w,
            (self.cy + self.h / 2.0) * h,
        ]
    }
}

/// Parses YOLO text; classes are zero-based in the text.
pub fn parse_labels(text: &str, path: &str) -> Result<Vec<Annotation>> {
    parse_lines(text, path, false).map(|v| v.into_iter().map(|p| p.annotation).collect())
}

/// A scored box: a label line with a trailing confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub annotation: Annotation,
    pub confidence: f64,
}

/// Parses prediction files; a line without a sixth field has confidence 1.
pub fn parse_predictions(text: &str, path: &str) -> Result<Vec<Prediction>> {
    parse_lines(text, path, true)
}

fn parse_lines(text: &str, path: &str, scored: bool) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let arity_ok = fields.len() == 5 || (scored && fields.len() == 6);
        if !arity_ok {
            let expected = if scored { "5 or 6" } else { "5" };
            return Err(err(format!("expected {expected} fields, got {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class `{}` is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 5];
        v[4] = 1.0;
        for (k, name) in ["cx", "cy", "w", "h", "confidence"]
            .iter()
            .enumerate()
            .take(fields.len() - 1)
        {
            v[k] = fields[k + 1]
                .parse()
                .map_err(|_| err(format!("{name} `{}` is not a number", fields[k + 1])))?;
        }
        let annotation = Annotation {
            class_id: class + 1,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        annotation.validate().map_err(err)?;
        if !(0.0..=1.0).contains(&v[4]) {
            return Err(err(format!("confidence = {} outside [0, 1]", v[4])));
        }
        out.push(Prediction {
            annotation,
            confidence: v[4],
        });
    }
    Ok(out)
}

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut s = String::new();
    for p in preds {
        let a = &p.annotation;
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            a.class_id - 1,
            a.cx,
            a.cy,
            a.w,
            a.h,
            p.confidence
        );
    }
    s
}

pub fn format_labels(anns: &[Annotation]) -> String {
    let mut s = String::new();
    for a in anns {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", a.class_id - 1, a.cx, a.cy, a.w, a.h);
    }
    s
}

pub fn read_labels(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path)?;
    parse_labels(&text, &path.display().to_string())
}

pub fn write_labels(path: &Path, anns: &[Annotation]) -> Result<()> {
    for a in anns {
        a.validate()
            .map_err(|msg| Error::Invalid(format!("{}: {msg}", path.display())))?;
    }
    std::fs::write(path, format_labels(anns))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_based_on_disk() {
        let a = parse_labels("0 0.5 0.5 0.1 0.2\n", "t").unwrap();
        assert_eq!(
            a,
            vec![Annotation {
                class_id: 1,
                cx: 0.5,
                cy: 0.5,
                w: 0.1,
                h: 0.2
            }]
        );
        assert_eq!(format_labels(&a), "0 0.500000 0.500000 0.100000 0.200000\n");
    }

    #[test]
    fn errors_name_line_and_field() {
        match parse_labels("0 0.5 0.5 0.1 0.1\n5 1.5 0.5 0.1 0.1\n", "t") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.starts_with("cx"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_labels("0 0.5 0.5 0.1\n", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_labels("20 0.5 0.5 0.1 0.1", "t").is_err());
        assert!(parse_labels("0 0.5 0.5 0 0.1", "t").is_err());
    }

    #[test]
    fn predictions_carry_confidence() {
        let p = parse_predictions(
            "2 0.5 0.5 0.2 0.2 0.75
0 0.1 0.1 0.05 0.05
",
            "p",
        )
        .unwrap();
        assert_eq!(p[0].annotation.class_id, 3);
        assert_eq!(p[0].confidence, 0.75);
        assert_eq!(p[1].confidence, 1.0);
        assert_eq!(
            format_predictions(&p),
            "2 0.500000 0.500000 0.200000 0.200000 0.750000\n0 0.100000 0.100000 0.050000 0.050000 1.000000\n"
        );
        assert_eq!(parse_predictions(&format_predictions(&p), "p").unwrap(), p);
        assert!(parse_predictions("0 0.5 0.5 0.1 0.1 1.5", "p").is_err());
        // a confidence column is not a valid ground-truth label
        assert!(parse_labels("0 0.5 0.5 0.1 0.1 0.9", "t").is_err());
    }
}

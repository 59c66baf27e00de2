use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, pixels }
    }

    /// Expands single-channel intensities to grey RGB.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        Image::new(width, height, gray.iter().flat_map(|&g| [g, g, g]).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// A `w x h` window at `(x0, y0)`; samples outside the image replicate the border.
    pub fn crop_replicate(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let sy = (y0 + y).min(self.height - 1);
            for x in 0..w {
                let sx = (x0 + x).min(self.width - 1);
                pixels.extend_from_slice(&self.get(sx, sy));
            }
        }
        Image {
            width: w,
            height: h,
            pixels,
        }
    }

    /// `(1, 3, h, w)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f64::from(px[c]) / 255.0;
            }
        }
        Tensor::new(&[1, 3, self.height, self.width], data).expect("sized from image")
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Binary PPM (`P6`) or PGM (`P5`) with maxval <= 255.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut fields = Vec::with_capacity(4);
    let mut token = String::new();
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    fields.push(std::mem::take(&mut token));
                }
            }
            b => token.push(b as char),
        }
    }
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format_err(path, format!("unsupported magic `{other}`"))),
    };
    let parse =
        |s: &str, what: &str| -> Result<usize> { s.parse().map_err(|_| format_err(path, format!("bad {what} `{s}`"))) };
    let (w, h, maxval) = (
        parse(&fields[1], "width")?,
        parse(&fields[2], "height")?,
        parse(&fields[3], "maxval")?,
    );
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported")));
    }
    let mut raw = vec![0u8; w * h * channels];
    r.read_exact(&mut raw)
        .map_err(|_| format_err(path, "truncated pixel data"))?;
    if maxval != 255 {
        for v in &mut raw {
            *v = ((usize::from(*v) * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    if channels == 1 {
        Image::from_gray(w, h, &raw)
    } else {
        Image::new(w, h, raw)
    }
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "palette was not expanded")),
    };
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in buf.chunks_exact(info.line_size) {
        for px in row[..w * stride].chunks_exact(stride) {
            if stride < 3 {
                pixels.extend_from_slice(&[px[0]; 3]);
            } else {
                pixels.extend_from_slice(&px[..3]);
            }
        }
    }
    Image::new(w, h, pixels)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    writer
        .write_image_data(&img.pixels)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(())
}

/// Extensions recognised as images, lower-case.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["ppm", "pgm", "png", "pnm"];

pub fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Reads an image by extension.
pub fn load_image(path: &Path) -> Result<Image> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => read_png(path),
        Some("ppm" | "pgm" | "pnm") => read_ppm(path),
        _ => Err(format_err(path, "unsupported image extension")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        let pixels = (0..w * h)
            .flat_map(|i| [(i % 251) as u8, (i / 7 % 256) as u8, 17])
            .collect();
        Image::new(w, h, pixels).unwrap()
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = gradient(13, 7);
        let ppm = dir.path().join("a.ppm");
        write_ppm(&ppm, &img).unwrap();
        assert_eq!(load_image(&ppm).unwrap(), img);
        let png_path = dir.path().join("a.png");
        write_png(&png_path, &img).unwrap();
        assert_eq!(load_image(&png_path).unwrap(), img);
    }

    #[test]
    fn pgm_with_comment_and_low_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n15\n".to_vec();
        bytes.extend_from_slice(&[0, 15]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.pixels, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn crop_replicates_border() {
        let img = gradient(3, 2);
        let c = img.crop_replicate(1, 1, 4, 3);
        assert_eq!(c.get(0, 0), img.get(1, 1));
        assert_eq!(c.get(3, 2), img.get(2, 1));
    }
}

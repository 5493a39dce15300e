//! PNG images in `[-1, 1]` and image grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Encodes a `[3, H, W]` image as 8-bit RGB PNG bytes.
pub fn png_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = img.shape() else {
        return Err(Error::BadShape {
            op: "png",
            msg: format!("expected [3, H, W], got {:?}", img.shape()),
        });
    };
    if *c != 3 {
        return Err(Error::BadShape {
            op: "png",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let (h, w) = (*h, *w);
    let d = img.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            rgb.push(to_u8(d[ch * h * w + i]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writer
            .write_image_data(&rgb)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = png_bytes(img).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit RGB or RGBA PNG (alpha dropped) as `[3, H, W]` in `[-1, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(bad(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = from_u8(buf[i * stride + ch]);
        }
    }
    Tensor::new([3, h, w], data)
}

/// Tiles equally sized `[3, S, S]` images into `rows x cols` with a 1-pixel gap.
pub fn grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
    let [_, h, w] = first.shape() else {
        return Err(Error::BadShape {
            op: "grid",
            msg: format!("expected [3, H, W], got {:?}", first.shape()),
        });
    };
    let (h, w) = (*h, *w);
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Tensor::full([3, gh, gw], 1.0);
    let od = out.data_mut();
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::shape("grid", first.shape(), img.shape()));
        }
        let (r, c) = (k / cols, k % cols);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    od[ch * gh * gw + (r * (h + 1) + y) * gw + c * (w + 1) + x] =
                        img.data()[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(out)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    std::io::Write::write_all(&mut w, text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes_to_255_levels() {
        let img = Tensor::from_fn([3, 4, 5], |i| ((i as f32) * 0.37).sin());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / 255.0 + 1e-6);
        save_png(&back, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), back);
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::full([3, 2, 2], -1.0);
        let g = grid(&[a.clone(), a.clone(), a], 2).unwrap();
        assert_eq!(g.shape(), [3, 5, 5]);
        assert_eq!(g.data()[2], 1.0);
        assert_eq!(g.data()[0], -1.0);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.png"));
    }
}

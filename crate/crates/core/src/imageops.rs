//! Whole-image geometry (quarter-turn rotation, bilinear resize, tiling) and
//! image file I/O. Pixel values are floats in [0, 1], i.e. byte value / 255.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rotates an H×W×C image clockwise by `quarter_turns`·90°.
pub fn rotate_cw(img: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    let turns = quarter_turns % 4;
    if turns == 0 {
        return Ok(img.clone());
    }
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..oh {
        for x in 0..ow {
            // Source pixel that lands on (y, x).
            let (sy, sx) = match turns {
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            let s = (sy * w + sx) * c;
            let d = (y * ow + x) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn rotate_ccw(img: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    rotate_cw(img, (4 - quarter_turns % 4) % 4)
}

/// Box in a `width`×`height` image after the image is rotated clockwise.
pub fn rotate_box_cw(b: &BBox, width: f32, height: f32, quarter_turns: usize) -> BBox {
    let (mut b, mut w, mut h) = (*b, width, height);
    for _ in 0..quarter_turns % 4 {
        b = BBox::new(h - b.y_max, b.x_min, h - b.y_min, b.x_max);
        std::mem::swap(&mut w, &mut h);
    }
    b
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "output size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: Tensor,
    /// Top-left corner in the source image.
    pub y: usize,
    pub x: usize,
}

/// Non-overlapping `tile`×`tile` grid, row-major; partial edge tiles are
/// zero-padded.
pub fn tile_image(img: &Tensor, tile: usize) -> Result<Vec<Tile>> {
    let (h, w, c) = img.hwc()?;
    if tile == 0 {
        return Err(Error::invalid("tile_image", "tile size must be positive"));
    }
    let src = img.data();
    let mut tiles = Vec::new();
    for y in (0..h).step_by(tile) {
        for x in (0..w).step_by(tile) {
            let mut data = vec![0.0f32; tile * tile * c];
            let rows = tile.min(h - y);
            let cols = tile.min(w - x);
            for r in 0..rows {
                let s = ((y + r) * w + x) * c;
                data[r * tile * c..][..cols * c].copy_from_slice(&src[s..s + cols * c]);
            }
            tiles.push(Tile {
                image: Tensor::new(vec![tile, tile, c], data)?,
                y,
                x,
            });
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_image`]: pastes the unpadded part of each tile back.
pub fn reassemble(tiles: &[Tile], h: usize, w: usize) -> Result<Tensor> {
    let Some(first) = tiles.first() else {
        return Err(Error::invalid("reassemble", "no tiles"));
    };
    let (th, tw, c) = first.image.hwc()?;
    let mut out = vec![0.0f32; h * w * c];
    for t in tiles {
        let src = t.image.data();
        for r in 0..th.min(h.saturating_sub(t.y)) {
            let cols = tw.min(w.saturating_sub(t.x));
            let d = ((t.y + r) * w + t.x) * c;
            out[d..d + cols * c].copy_from_slice(&src[r * tw * c..][..cols * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads PNM (P5/P6) or PNG into an H×W×3 tensor of byte/255 values.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Writes an H×W×1 or H×W×3 tensor as binary PNM (P5/P6), or PNG when the
/// extension says so. Gray-valued RGB images are stored as P5.
pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.hwc()?;
    let gray = c == 1 || (c == 3 && img.data().chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    let bytes: Vec<u8> = if gray {
        img.data().iter().step_by(c).map(|&v| to_byte(v)).collect()
    } else if c == 3 {
        img.data().iter().map(|&v| to_byte(v)).collect()
    } else {
        return Err(Error::invalid("save_image", format!("cannot store {c} channels")));
    };
    let dynamic = if gray {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
    };
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let format = if is_png {
        image::ImageFormat::Png
    } else {
        image::ImageFormat::Pnm
    };
    dynamic.save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

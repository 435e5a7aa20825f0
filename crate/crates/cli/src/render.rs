//! PNG output: generated images, grayscale maps and feature heatmap grids.

use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use proliferation::Tensor;

/// `[3, H, W]` in [−1, 1] → 8-bit RGB.
pub fn generated_to_rgb(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let to_u8 = |v: f32| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(image.data()[i]), to_u8(image.data()[plane + i]), to_u8(image.data()[2 * plane + i])])
    })
}

/// 8-bit RGB → `[3, H, W]` in [0, 1].
pub fn rgb_to_unit(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        img.get_pixel((rest % w) as u32, (rest / w) as u32)[c] as f32 / 255.0
    })
}

/// `[H, W]` in [0, 1] → 8-bit grayscale.
pub fn unit_to_gray(map: &Tensor) -> GrayImage {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8())
}

const VIRIDIS: [[f32; 3]; 6] = [
    [68.0, 1.0, 84.0],
    [65.0, 68.0, 135.0],
    [42.0, 120.0, 142.0],
    [34.0, 168.0, 132.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(t: f32) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f32;
    let mix = |k: usize| (VIRIDIS[i][k] + (VIRIDIS[i + 1][k] - VIRIDIS[i][k]) * f).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// 3×5 glyphs, one row per `u8`, high bit on the left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        ':' => [0b000, 0b010, 0b000, 0b010, 0b000],
        _ => [0; 5],
    }
}

pub fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    for (n, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..3u32 {
                if row & (0b100 >> dx) != 0 {
                    let (x, y) = (x0 + n as u32 * 4 + dx, y0 + dy as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
}

fn short(v: f32) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1000.0) {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

/// Channel-major grid of one `[1, C, H, W]` layer map. Each tile is min-max
/// normalized on its own, with its range printed in the margin below it.
pub fn heatmap_grid(map: &Tensor) -> RgbImage {
    let (c, h, w) = (map.shape()[1], map.shape()[2], map.shape()[3]);
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let scale = (48 / h.max(w)).max(1);
    let label_w = 4 * 11;
    let tile_w = (w * scale).max(label_w) as u32;
    let tile_h = (h * scale) as u32;
    let (pad, margin) = (2u32, 14u32);
    let mut img = RgbImage::from_pixel(
        cols as u32 * (tile_w + pad) + pad,
        rows as u32 * (tile_h + margin + pad) + pad,
        Rgb([255, 255, 255]),
    );
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ox = pad + (ch % cols) as u32 * (tile_w + pad);
        let oy = pad + (ch / cols) as u32 * (tile_h + margin + pad);
        for y in 0..tile_h {
            for x in 0..(w * scale) as u32 {
                let v = plane[(y as usize / scale) * w + x as usize / scale];
                img.put_pixel(ox + x, oy + y, viridis((v - lo) / span));
            }
        }
        draw_text(&mut img, ox, oy + tile_h + 1, &short(lo), Rgb([0, 0, 0]));
        draw_text(&mut img, ox, oy + tile_h + 7, &short(hi), Rgb([0, 0, 0]));
    }
    img
}

/// Rows of equally sized images with a gap between them.
pub fn tile_images(rows: &[Vec<RgbImage>]) -> RgbImage {
    let (w, h) = rows
        .iter()
        .flatten()
        .next()
        .map(|i| (i.width(), i.height()))
        .unwrap_or((1, 1));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let gap = 2;
    let mut out = RgbImage::from_pixel(cols * (w + gap) + gap, rows.len() as u32 * (h + gap) + gap, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            image::imageops::overlay(&mut out, img, (gap + c as u32 * (w + gap)) as i64, (gap + r as u32 * (h + gap)) as i64);
        }
    }
    out
}

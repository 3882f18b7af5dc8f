//! Sprite keying, rotation, placement and alpha compositing.
//!
//! Pixels are `f32` in `[0, 1]`, row-major and channel-interleaved. 8-bit
//! PNGs are divided by 255 on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("placement ({x}, {y}) of a {w}x{h} sprite does not fit a {bw}x{bh} background")]
    Placement {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        bw: usize,
        bh: usize,
    },
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

/// An H×W×C image with float pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedFormat(format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels {
            return Err(ImageError::Invalid(format!(
                "{width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Flattened sample dimensionality.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Planar `[C, H, W]` copy, the layout the networks consume.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; self.pixels.len()];
        for i in 0..plane {
            for c in 0..self.channels {
                out[c * plane + i] = self.pixels[i * self.channels + c];
            }
        }
        out
    }

    /// Inverse of [`ImagePatch::to_planar`]; values are clamped into `[0, 1]`.
    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(ImageError::Invalid(format!(
                "planar buffer of {} values for {width}x{height}x{channels}",
                planar.len()
            )));
        }
        let mut pixels = vec![0.0; planar.len()];
        for i in 0..plane {
            for c in 0..channels {
                pixels[i * channels + c] = planar[c * plane + i].clamp(0.0, 1.0);
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (width, height, channels, raw) = if img.color().has_color() {
            let rgb = img.to_rgb8();
            (rgb.width(), rgb.height(), 3, rgb.into_raw())
        } else {
            let l = img.to_luma8();
            (l.width(), l.height(), 1, l.into_raw())
        };
        Self::new(
            width as usize,
            height as usize,
            channels,
            raw.into_iter().map(|v| v as f32 / 255.0).collect(),
        )
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color).map_err(
            |source| ImageError::Io {
                path: path.display().to_string(),
                source,
            },
        )
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB image with per-pixel opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
    alpha: Vec<f32>,
}

impl Sprite {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>, alpha: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("empty sprite {width}x{height}")));
        }
        if rgb.len() != width * height * 3 || alpha.len() != width * height {
            return Err(ImageError::Invalid(format!(
                "sprite {width}x{height}: rgb has {} values, alpha has {}",
                rgb.len(),
                alpha.len()
            )));
        }
        if rgb.iter().chain(&alpha).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageError::Invalid("sprite value outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            rgb,
            alpha,
        })
    }

    /// Fully opaque sprite from an RGB patch.
    pub fn opaque(image: &ImagePatch) -> Result<Self> {
        if image.channels != 3 {
            return Err(ImageError::UnsupportedFormat(format!(
                "sprites need 3 channels, got {}",
                image.channels
            )));
        }
        Self::new(
            image.width,
            image.height,
            image.pixels.clone(),
            vec![1.0; image.width * image.height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb(&self) -> &[f32] {
        &self.rgb
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    pub fn alpha_mass(&self) -> f64 {
        self.alpha.iter().map(|&a| a as f64).sum()
    }

    /// Grows the canvas by `border` fully transparent pixels on every side.
    pub fn padded(&self, border: usize) -> Self {
        let (w, h) = (self.width + 2 * border, self.height + 2 * border);
        let mut rgb = vec![0.0; w * h * 3];
        let mut alpha = vec![0.0; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + x;
                let dst = (y + border) * w + x + border;
                alpha[dst] = self.alpha[src];
                rgb[dst * 3..dst * 3 + 3].copy_from_slice(&self.rgb[src * 3..src * 3 + 3]);
            }
        }
        Self {
            width: w,
            height: h,
            rgb,
            alpha,
        }
    }

    /// Loads a PNG. RGBA files keep their alpha channel; RGB and gray files
    /// are returned fully opaque, ready for [`key_alpha`].
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rgba = img.to_rgba8();
        let (width, height) = (rgba.width() as usize, rgba.height() as usize);
        let has_alpha = img.color().has_alpha();
        let mut rgb = Vec::with_capacity(width * height * 3);
        let mut alpha = Vec::with_capacity(width * height);
        for px in rgba.pixels() {
            rgb.extend(px.0[..3].iter().map(|&v| v as f32 / 255.0));
            alpha.push(if has_alpha { px.0[3] as f32 / 255.0 } else { 1.0 });
        }
        Self::new(width, height, rgb, alpha)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut raw = Vec::with_capacity(self.alpha.len() * 4);
        for (px, a) in self.rgb.chunks_exact(3).zip(&self.alpha) {
            raw.extend(px.iter().map(|&v| quantize(v)));
            raw.push(quantize(*a));
        }
        image::save_buffer(
            path,
            &raw,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgba8,
        )
        .map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Where a sprite goes: top-left offset of the (rotated) sprite canvas in
/// background pixels, and a rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub x: usize,
    pub y: usize,
    pub angle: f64,
}

impl PlacementSpec {
    pub fn at(x: usize, y: usize) -> Self {
        Self { x, y, angle: 0.0 }
    }
}

/// Makes pixels within Euclidean RGB distance `tolerance` of `key` fully
/// transparent and every other pixel fully opaque.
pub fn key_alpha(image: &ImagePatch, key: [f32; 3], tolerance: f32) -> Result<Sprite> {
    if image.channels != 3 {
        return Err(ImageError::UnsupportedFormat(format!(
            "keying needs an RGB image, got {} channel(s)",
            image.channels
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(ImageError::Invalid(format!("tolerance {tolerance} must be >= 0")));
    }
    let alpha = image
        .pixels
        .chunks_exact(3)
        .map(|px| {
            let d2: f32 = px.iter().zip(&key).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2.sqrt() <= tolerance {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Sprite::new(image.width, image.height, image.pixels.clone(), alpha)
}

/// Canvas size of a `w`×`h` sprite rotated by `angle` degrees.
pub fn rotated_extent(width: usize, height: usize, angle: f64) -> (usize, usize) {
    if let Some(q) = quarter_turns(angle) {
        return if q % 2 == 0 { (width, height) } else { (height, width) };
    }
    let (s, c) = angle.to_radians().sin_cos();
    let (w, h) = (width as f64, height as f64);
    let rw = (w * c.abs() + h * s.abs() - 1e-9).ceil().max(1.0);
    let rh = (w * s.abs() + h * c.abs() - 1e-9).ceil().max(1.0);
    (rw as usize, rh as usize)
}

fn quarter_turns(angle: f64) -> Option<u32> {
    let turns = angle / 90.0;
    let r = turns.round();
    if (turns - r).abs() < 1e-12 {
        Some(r.rem_euclid(4.0) as u32)
    } else {
        None
    }
}

/// Rotates a sprite about its center onto an expanded canvas.
///
/// The angle is applied in pixel coordinates (x right, y down) with the
/// usual `[cos -sin; sin cos]` matrix. Quarter turns are exact pixel
/// permutations; other angles resample premultiplied colour bilinearly and
/// treat everything outside the source as transparent.
pub fn rotate_sprite(sprite: &Sprite, angle: f64) -> Sprite {
    if !angle.is_finite() || (sprite.width == 1 && sprite.height == 1) {
        return sprite.clone();
    }
    match quarter_turns(angle) {
        Some(q) => rotate_quarter(sprite, q),
        None => rotate_bilinear(sprite, angle),
    }
}

fn rotate_quarter(sprite: &Sprite, turns: u32) -> Sprite {
    let (w, h) = (sprite.width, sprite.height);
    let (ow, oh) = if turns.is_multiple_of(2) { (w, h) } else { (h, w) };
    let mut rgb = vec![0.0; ow * oh * 3];
    let mut alpha = vec![0.0; ow * oh];
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = match turns {
                0 => (x, y),
                1 => (h - 1 - y, x),
                2 => (w - 1 - x, h - 1 - y),
                _ => (y, w - 1 - x),
            };
            let src = y * w + x;
            let dst = ny * ow + nx;
            alpha[dst] = sprite.alpha[src];
            rgb[dst * 3..dst * 3 + 3].copy_from_slice(&sprite.rgb[src * 3..src * 3 + 3]);
        }
    }
    Sprite {
        width: ow,
        height: oh,
        rgb,
        alpha,
    }
}

fn rotate_bilinear(sprite: &Sprite, angle: f64) -> Sprite {
    let (w, h) = (sprite.width, sprite.height);
    let (ow, oh) = rotated_extent(w, h, angle);
    let (s, c) = angle.to_radians().sin_cos();
    let (icx, icy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ocx, ocy) = (ow as f64 / 2.0, oh as f64 / 2.0);

    // Premultiplied RGBA lookup with transparent zero outside the source.
    let fetch = |x: isize, y: isize| -> [f64; 4] {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return [0.0; 4];
        }
        let i = y as usize * w + x as usize;
        let a = sprite.alpha[i] as f64;
        [
            sprite.rgb[i * 3] as f64 * a,
            sprite.rgb[i * 3 + 1] as f64 * a,
            sprite.rgb[i * 3 + 2] as f64 * a,
            a,
        ]
    };

    let mut rgb = vec![0.0f32; ow * oh * 3];
    let mut alpha = vec![0.0f32; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let dx = ox as f64 + 0.5 - ocx;
            let dy = oy as f64 + 0.5 - ocy;
            // inverse rotation
            let sx = c * dx + s * dy + icx - 0.5;
            let sy = -s * dx + c * dy + icy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut acc = [0.0f64; 4];
            for (xx, yy, wgt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1, y0, fx * (1.0 - fy)),
                (x0, y0 + 1, (1.0 - fx) * fy),
                (x0 + 1, y0 + 1, fx * fy),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let v = fetch(xx, yy);
                for k in 0..4 {
                    acc[k] += wgt * v[k];
                }
            }
            let i = oy * ow + ox;
            let a = acc[3].clamp(0.0, 1.0);
            alpha[i] = a as f32;
            if a > 0.0 {
                for k in 0..3 {
                    rgb[i * 3 + k] = (acc[k] / acc[3]).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Sprite {
        width: ow,
        height: oh,
        rgb,
        alpha,
    }
}

/// Every angle-0 top-left offset that keeps `sprite` inside `background`,
/// row by row.
pub fn enumerate_placements(background: &ImagePatch, sprite: &Sprite) -> Vec<PlacementSpec> {
    if sprite.width > background.width || sprite.height > background.height {
        return Vec::new();
    }
    let mut out = Vec::new();
    for y in 0..=background.height - sprite.height {
        for x in 0..=background.width - sprite.width {
            out.push(PlacementSpec::at(x, y));
        }
    }
    out
}

/// Blends `sprite` (rotated by `placement.angle`) over `background` with its
/// top-left corner at `(placement.x, placement.y)`.
///
/// Single-channel backgrounds receive the sprite's luma.
pub fn composite(background: &ImagePatch, sprite: &Sprite, placement: &PlacementSpec) -> Result<ImagePatch> {
    let rotated;
    let sprite = if placement.angle == 0.0 {
        sprite
    } else {
        rotated = rotate_sprite(sprite, placement.angle);
        &rotated
    };
    let fits = placement.x + sprite.width <= background.width
        && placement.y + sprite.height <= background.height;
    if !fits {
        return Err(ImageError::Placement {
            x: placement.x,
            y: placement.y,
            w: sprite.width,
            h: sprite.height,
            bw: background.width,
            bh: background.height,
        });
    }

    let mut out = background.clone();
    let ch = background.channels;
    for sy in 0..sprite.height {
        for sx in 0..sprite.width {
            let si = sy * sprite.width + sx;
            let a = sprite.alpha[si];
            if a == 0.0 {
                continue;
            }
            let src = &sprite.rgb[si * 3..si * 3 + 3];
            let di = ((placement.y + sy) * background.width + placement.x + sx) * ch;
            if ch == 3 {
                for k in 0..3 {
                    let b = out.pixels[di + k];
                    out.pixels[di + k] = (a * src[k] + (1.0 - a) * b).clamp(0.0, 1.0);
                }
            } else {
                let luma = 0.299 * src[0] + 0.587 * src[1] + 0.114 * src[2];
                let b = out.pixels[di];
                out.pixels[di] = (a * luma + (1.0 - a) * b).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

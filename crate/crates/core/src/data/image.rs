use std::path::Path;

use image::ImageFormat;
use rand::Rng;

use super::{DataError, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit pixels in height × width × channel order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height * width * channels != pixels.len() {
            return Err(DataError::PixelCount {
                expected: height * width * channels,
                actual: pixels.len(),
            });
        }
        Ok(RawImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn rgb_from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        RawImage {
            height,
            width,
            channels: 3,
            pixels,
        }
    }
}

/// Decodes a PNG or JPEG file to 8-bit RGB.
pub fn decode_image(path: &Path) -> Result<RawImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => {
            return Err(DataError::UnsupportedFormat {
                path: path.to_path_buf(),
            })
        }
    }
    let rgb = reader
        .decode()
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(h as usize, w as usize, 3, rgb.into_raw())
}

/// Per-channel standardization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Resize, scale to [0, 1] and standardize to a 3 × S × S tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub size: usize,
    pub normalization: Normalization,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            size: 224,
            normalization: Normalization::default(),
        }
    }
}

impl Preprocess {
    pub fn with_size(size: usize) -> Self {
        Preprocess {
            size,
            ..Preprocess::default()
        }
    }

    pub fn apply(&self, image: &RawImage) -> Result<Tensor<f32>> {
        if image.height == 0 || image.width == 0 || self.size == 0 {
            return Err(DataError::ZeroExtent {
                height: image.height,
                width: image.width,
            });
        }
        if image.channels != 3 {
            return Err(DataError::Channels(image.channels));
        }
        let s = self.size;
        let ys = axis_taps(image.height, s);
        let xs = axis_taps(image.width, s);
        let mut out = vec![0.0f32; 3 * s * s];
        let px = |y: usize, x: usize, c: usize| f32::from(image.pixels[(y * image.width + x) * 3 + c]);
        for c in 0..3 {
            let (mean, std) = (self.normalization.mean[c], self.normalization.std[c]);
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let top = px(y0, x0, c) * (1.0 - wx) + px(y0, x1, c) * wx;
                    let bottom = px(y1, x0, c) * (1.0 - wx) + px(y1, x1, c) * wx;
                    let v = (top * (1.0 - wy) + bottom * wy) / 255.0;
                    out[(c * s + oy) * s + ox] = (v - mean) / std;
                }
            }
        }
        Tensor::new(vec![3, s, s], out).map_err(|_| DataError::ZeroExtent {
            height: image.height,
            width: image.width,
        })
    }

    pub fn load(&self, path: &Path) -> Result<Tensor<f32>> {
        self.apply(&decode_image(path)?)
    }
}

/// Source index pairs and interpolation weight for each output coordinate,
/// using half-pixel centres. Equal sizes map every pixel onto itself.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Mirrors a C × H × W tensor left to right.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = chw(t);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Rotates a C × H × W tensor about its centre by `degrees`, sampling
/// bilinearly and replicating edge pixels outside the frame.
pub fn rotate(t: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let [c, h, w] = chw(t);
    if degrees == 0.0 {
        return t.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (wx, wy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bottom = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out[(ch * h + y) * w + x] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

fn chw(t: &Tensor<f32>) -> [usize; 3] {
    match *t.shape() {
        [c, h, w] => [c, h, w],
        _ => panic!("expected a C × H × W tensor, got shape {:?}", t.shape()),
    }
}

/// Training-time augmentation: a random horizontal flip and a small random
/// rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmenter {
    pub flip_probability: f64,
    pub max_degrees: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter {
            flip_probability: 0.5,
            max_degrees: 15.0,
        }
    }
}

impl Augmenter {
    /// Draws exactly two values from `rng`, so the stream position does not
    /// depend on which transforms fire.
    pub fn apply<R: Rng + ?Sized>(&self, t: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        let flip = rng.random::<f64>() < self.flip_probability;
        let angle = (rng.random::<f64>() * 2.0 - 1.0) * self.max_degrees;
        let flipped = if flip { hflip(t) } else { t.clone() };
        rotate(&flipped, angle)
    }
}

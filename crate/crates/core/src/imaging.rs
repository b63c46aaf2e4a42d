//! Grayscale frames: PGM codec, normalisation, bilinear resize and the
//! seeded augmentation pipeline.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dims {width}x{height} must be positive")]
    ZeroDims { width: usize, height: usize },
    #[error("{width}x{height} image needs {expected} pixels, got {actual}")]
    PixelCount {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("unsupported magic {0:?}")]
    UnsupportedMagic(String),
    #[error("bad PGM header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255)")]
    MaxVal(u64),
    #[error("truncated PGM payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{op} magnitude {magnitude} outside [{min}, {max}]")]
    AugmentRange {
        op: &'static str,
        magnitude: f32,
        min: f32,
        max: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Integers 0..=255.
    U8,
    /// Reals in `[0, 1]`.
    UnitFloat,
}

pub trait Pixel: Copy + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DOMAIN: Domain;
    fn sanitize(self) -> Self;
}

impl Pixel for u8 {
    const DOMAIN: Domain = Domain::U8;
    fn sanitize(self) -> Self {
        self
    }
}

impl Pixel for f32 {
    const DOMAIN: Domain = Domain::UnitFloat;
    fn sanitize(self) -> Self {
        if self.is_nan() {
            0.0
        } else {
            self.clamp(0.0, 1.0)
        }
    }
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<P: Pixel> {
    width: usize,
    height: usize,
    pixels: Vec<P>,
}

pub type ImageU8 = ImageBuffer<u8>;
pub type ImageF32 = ImageBuffer<f32>;

impl<P: Pixel> ImageBuffer<P> {
    /// Unit-float pixels are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<P>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::ZeroDims { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::PixelCount {
                width,
                height,
                expected: width * height,
                actual: pixels.len(),
            });
        }
        let pixels = pixels.into_iter().map(Pixel::sanitize).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[P] {
        &self.pixels
    }

    pub fn domain(&self) -> Domain {
        P::DOMAIN
    }

    pub fn get(&self, x: usize, y: usize) -> P {
        self.pixels[y * self.width + x]
    }
}

impl ImageF32 {
    pub fn bit_eq(&self, other: &ImageF32) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `(height, width, 1)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw_unchecked(vec![self.height, self.width, 1], self.pixels.clone())
    }
}

fn pgm_token(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64, ImageError> {
    // Whitespace and `#` comments may precede every header field.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::BadHeader(format!("expected {what} at byte {start}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| ImageError::BadHeader(format!("{what} out of range")))
}

/// Decodes a binary (`P5`) 8-bit PGM. Bytes past the payload are ignored.
pub fn decode_pgm(bytes: &[u8]) -> Result<ImageU8, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::UnsupportedMagic(shown));
    }
    let mut pos = 2;
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(ImageError::BadHeader("missing separator after magic".into()));
    }
    let width = pgm_token(bytes, &mut pos, "width")? as usize;
    let height = pgm_token(bytes, &mut pos, "height")? as usize;
    let maxval = pgm_token(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::MaxVal(maxval));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::BadHeader("missing whitespace after maxval".into()));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroDims { width, height });
    }
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| ImageError::BadHeader("image dims overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    ImageBuffer::new(width, height, payload[..expected].to_vec())
}

pub fn encode_pgm(img: &ImageU8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn normalize(img: &ImageU8) -> ImageF32 {
    ImageBuffer {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    }
}

/// Inverse of [`normalize`], rounding to the nearest level.
pub fn quantize(img: &ImageF32) -> ImageU8 {
    ImageBuffer {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Interpolation that never leaves `[min(a, b), max(a, b)]`.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear sample at a real-valued position, clamping to the border.
fn sample(img: &ImageF32, sx: f64, sy: f64) -> f32 {
    let sx = sx.clamp(0.0, (img.width - 1) as f64);
    let sy = sy.clamp(0.0, (img.height - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let tx = (sx - x0 as f64) as f32;
    let ty = (sy - y0 as f64) as f32;
    let top = lerp(img.get(x0, y0), img.get(x1, y0), tx);
    let bot = lerp(img.get(x0, y1), img.get(x1, y1), tx);
    lerp(top, bot, ty)
}

/// Pixel-centre mapping `src = (dst + 0.5) * in / out - 0.5`, borders clamped.
pub fn resize_bilinear(img: &ImageF32, out_w: usize, out_h: usize) -> Result<ImageF32, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::ZeroDims {
            width: out_w,
            height: out_h,
        });
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            pixels.push(sample(img, src_x, src_y));
        }
    }
    Ok(ImageBuffer {
        width: out_w,
        height: out_h,
        pixels,
    })
}

/// Frame preprocessing: normalise, optionally pass through an intermediate
/// size, then resize to the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocess {
    /// `(width, height)` of the intermediate scaling, `None` to resize directly.
    pub intermediate: Option<(usize, usize)>,
    pub target_width: usize,
    pub target_height: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            intermediate: Some((224, 224)),
            target_width: 150,
            target_height: 150,
        }
    }
}

impl Preprocess {
    pub fn for_input(height: usize, width: usize) -> Self {
        Self {
            target_width: width,
            target_height: height,
            ..Self::default()
        }
    }

    pub fn direct(mut self) -> Self {
        self.intermediate = None;
        self
    }

    pub fn apply(&self, img: &ImageU8) -> Result<Tensor, ImageError> {
        let mut f = normalize(img);
        if let Some((w, h)) = self.intermediate {
            f = resize_bilinear(&f, w, h)?;
        }
        f = resize_bilinear(&f, self.target_width, self.target_height)?;
        Ok(f.to_tensor())
    }
}

/// 512x512 (or any) frame to the `(150, 150, 1)` network input via 224x224.
pub fn preprocess_for_net(img: &ImageU8) -> Result<Tensor, ImageError> {
    Preprocess::default().apply(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "magnitude")]
pub enum AugmentOp {
    RotateDeg(f32),
    FlipH,
    /// Fraction of the image width.
    ShiftX(f32),
    /// Fraction of the image height.
    ShiftY(f32),
    /// Scale factor; above 1 magnifies.
    Zoom(f32),
    /// Added to every pixel before clamping.
    Brightness(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub max_rotate_deg: f32,
    pub flip_prob: f64,
    pub max_shift_frac: f32,
    pub zoom_min: f32,
    pub zoom_max: f32,
    pub max_brightness: f32,
    pub min_ops: usize,
    pub max_ops: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotate_deg: 10.0,
            flip_prob: 0.5,
            max_shift_frac: 0.1,
            zoom_min: 0.9,
            zoom_max: 1.1,
            max_brightness: 0.2,
            min_ops: 1,
            max_ops: 3,
        }
    }
}

pub const EXPANSION_FACTOR: usize = 10;

const CONTINUOUS_KINDS: [&str; 5] = ["rotate", "shift_x", "shift_y", "zoom", "brightness"];

impl AugmentConfig {
    pub fn check(&self, op: &AugmentOp) -> Result<(), ImageError> {
        let range = |op: &'static str, m: f32, min: f32, max: f32| {
            if m.is_finite() && m >= min && m <= max {
                Ok(())
            } else {
                Err(ImageError::AugmentRange {
                    op,
                    magnitude: m,
                    min,
                    max,
                })
            }
        };
        match *op {
            AugmentOp::RotateDeg(m) => range("rotate", m, -self.max_rotate_deg, self.max_rotate_deg),
            AugmentOp::FlipH => Ok(()),
            AugmentOp::ShiftX(m) => range("shift_x", m, -self.max_shift_frac, self.max_shift_frac),
            AugmentOp::ShiftY(m) => range("shift_y", m, -self.max_shift_frac, self.max_shift_frac),
            AugmentOp::Zoom(m) => range("zoom", m, self.zoom_min, self.zoom_max),
            AugmentOp::Brightness(m) => range("brightness", m, -self.max_brightness, self.max_brightness),
        }
    }

    pub fn apply(&self, img: &ImageF32, op: &AugmentOp) -> Result<ImageF32, ImageError> {
        self.check(op)?;
        Ok(apply_unchecked(img, op))
    }

    /// Draws the op composition for one variant.
    pub fn sample_ops(&self, rng: &mut impl Rng) -> Vec<AugmentOp> {
        let count = rng.random_range(self.min_ops..=self.max_ops.max(self.min_ops));
        let mut ops = Vec::with_capacity(count);
        if rng.random_bool(self.flip_prob.clamp(0.0, 1.0)) {
            ops.push(AugmentOp::FlipH);
        }
        let mut kinds = CONTINUOUS_KINDS;
        kinds.shuffle(rng);
        for kind in kinds.iter().take(count.saturating_sub(ops.len())) {
            let sym = |rng: &mut dyn rand::RngCore, m: f32| {
                if m > 0.0 {
                    rng.random_range(-m..=m)
                } else {
                    0.0
                }
            };
            ops.push(match *kind {
                "rotate" => AugmentOp::RotateDeg(sym(rng, self.max_rotate_deg)),
                "shift_x" => AugmentOp::ShiftX(sym(rng, self.max_shift_frac)),
                "shift_y" => AugmentOp::ShiftY(sym(rng, self.max_shift_frac)),
                "zoom" if self.zoom_max > self.zoom_min => AugmentOp::Zoom(rng.random_range(self.zoom_min..=self.zoom_max)),
                "zoom" => AugmentOp::Zoom(self.zoom_min),
                _ => AugmentOp::Brightness(sym(rng, self.max_brightness)),
            });
        }
        ops
    }

    /// Ten images per input: the original, then nine variants whose ops are
    /// drawn from a ChaCha stream keyed by `(seed, image_index, variant)`.
    pub fn expand(&self, img: &ImageF32, seed: u64, image_index: u64) -> Vec<ImageF32> {
        let mut out = Vec::with_capacity(EXPANSION_FACTOR);
        out.push(img.clone());
        for variant in 1..EXPANSION_FACTOR as u64 {
            let mut rng = variant_rng(seed, image_index, variant);
            let ops = self.sample_ops(&mut rng);
            let mut cur = img.clone();
            for op in &ops {
                cur = apply_unchecked(&cur, op);
            }
            out.push(cur);
        }
        out
    }
}

fn variant_rng(seed: u64, image_index: u64, variant: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_index.wrapping_mul(EXPANSION_FACTOR as u64).wrapping_add(variant));
    rng
}

fn warp(img: &ImageF32, map: impl Fn(f64, f64) -> (f64, f64)) -> ImageF32 {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = map(x as f64, y as f64);
            pixels.push(sample(img, sx, sy));
        }
    }
    ImageBuffer {
        width: img.width,
        height: img.height,
        pixels,
    }
}

fn apply_unchecked(img: &ImageF32, op: &AugmentOp) -> ImageF32 {
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    match *op {
        AugmentOp::RotateDeg(deg) => {
            let (s, c) = (deg as f64).to_radians().sin_cos();
            warp(img, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            })
        }
        AugmentOp::FlipH => {
            let mut pixels = Vec::with_capacity(img.pixels.len());
            for row in img.pixels.chunks_exact(img.width) {
                pixels.extend(row.iter().rev());
            }
            ImageBuffer {
                width: img.width,
                height: img.height,
                pixels,
            }
        }
        AugmentOp::ShiftX(f) => {
            let d = f as f64 * img.width as f64;
            warp(img, |x, y| (x - d, y))
        }
        AugmentOp::ShiftY(f) => {
            let d = f as f64 * img.height as f64;
            warp(img, |x, y| (x, y - d))
        }
        AugmentOp::Zoom(z) => {
            let z = z as f64;
            warp(img, |x, y| (cx + (x - cx) / z, cy + (y - cy) / z))
        }
        AugmentOp::Brightness(b) => ImageBuffer {
            width: img.width,
            height: img.height,
            pixels: img.pixels.iter().map(|&p| (p + b).clamp(0.0, 1.0)).collect(),
        },
    }
}

/// Applies one op with the default ranges.
pub fn augment(img: &ImageF32, op: &AugmentOp) -> Result<ImageF32, ImageError> {
    AugmentConfig::default().apply(img, op)
}

/// [`AugmentConfig::expand`] with default ranges for image index 0.
pub fn expand_10x(img: &ImageF32, seed: u64) -> Vec<ImageF32> {
    AugmentConfig::default().expand(img, seed, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gradient(w: usize, h: usize) -> ImageF32 {
        let px = (0..w * h).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ImageBuffer::new(w, h, px).unwrap()
    }

    #[test]
    fn pgm_decode_basic() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 64, 128, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.pixels(), &[0, 64, 128, 255]);
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5 # made by hand\n# another\n3 1 # dims\n255\n".to_vec();
        bytes.extend([1, 2, 3]);
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[1, 2, 3]);
    }

    #[test]
    fn pgm_rejections() {
        assert_eq!(
            decode_pgm(b"P2\n2 2\n255\n0 0 0 0").unwrap_err().to_string(),
            "unsupported magic \"P2\""
        );
        assert_eq!(decode_pgm(b"P5\n2 2\n65535\n").unwrap_err(), ImageError::MaxVal(65535));
        assert_eq!(
            decode_pgm(b"P5\n2 2\n255\n\x01\x02").unwrap_err(),
            ImageError::Truncated { expected: 4, actual: 2 }
        );
        assert!(matches!(decode_pgm(b"P5\n2\n"), Err(ImageError::BadHeader(_))));
        assert!(decode_pgm(b"").is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let img = ImageU8::new(3, 1, vec![0, 255, 51]).unwrap();
        let n = normalize(&img);
        assert_eq!(n.pixels(), &[0.0, 1.0, 0.2]);
        assert_eq!(n.domain(), Domain::UnitFloat);
        assert_eq!(quantize(&n), img);
    }

    #[test]
    fn quantize_inverts_normalize_for_every_level() {
        let all = ImageU8::new(256, 1, (0..=255).collect()).unwrap();
        assert_eq!(quantize(&normalize(&all)), all);
    }

    #[test]
    fn resize_row_pixel_centres() {
        let row = ImageF32::new(2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&row, 4, 1).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.25, 0.75, 1.0]);
        assert!(resize_bilinear(&row, 0, 1).is_err());
    }

    #[test]
    fn resize_default_dims_and_constancy() {
        let img = ImageF32::filled(512, 512, 0.3).unwrap();
        let out = resize_bilinear(&img, 224, 224).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        assert!(out.pixels().iter().all(|&p| p == 0.3));
        let up = resize_bilinear(&img, 600, 17).unwrap();
        assert!(up.pixels().iter().all(|&p| p == 0.3));
    }

    #[test]
    fn preprocess_shapes_and_constancy() {
        let big = ImageU8::filled(512, 512, 128).unwrap();
        let t = preprocess_for_net(&big).unwrap();
        assert_eq!(t.dims(), &[150, 150, 1]);
        for &v in t.data() {
            assert_abs_diff_eq!(v, 128.0 / 255.0, epsilon = 1e-6);
        }
        let small = ImageU8::filled(150, 150, 77).unwrap();
        let t = preprocess_for_net(&small).unwrap();
        assert_eq!(t.data(), normalize(&small).pixels());
        let direct = Preprocess::default().direct().apply(&big).unwrap();
        assert_eq!(direct.dims(), &[150, 150, 1]);
    }

    #[test]
    fn flip_is_involution() {
        let img = gradient(7, 5);
        let twice = augment(&augment(&img, &AugmentOp::FlipH).unwrap(), &AugmentOp::FlipH).unwrap();
        assert!(twice.bit_eq(&img));
        let once = augment(&img, &AugmentOp::FlipH).unwrap();
        assert_eq!(once.get(0, 0), img.get(6, 0));
    }

    #[test]
    fn brightness_clamps() {
        let img = ImageF32::filled(4, 4, 0.9).unwrap();
        let out = augment(&img, &AugmentOp::Brightness(0.2)).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn null_transforms_are_identity() {
        let img = gradient(9, 6);
        for op in [AugmentOp::RotateDeg(0.0), AugmentOp::ShiftX(0.0), AugmentOp::ShiftY(0.0), AugmentOp::Zoom(1.0)] {
            let out = augment(&img, &op).unwrap();
            for (a, b) in out.pixels().iter().zip(img.pixels()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn shift_moves_content() {
        let mut px = vec![0.0; 10 * 10];
        px[5 * 10 + 5] = 1.0;
        let img = ImageF32::new(10, 10, px).unwrap();
        let out = augment(&img, &AugmentOp::ShiftX(0.1)).unwrap();
        assert_eq!(out.get(6, 5), 1.0);
        assert_eq!(out.get(5, 5), 0.0);
    }

    #[test]
    fn rotation_by_90_moves_corners() {
        let cfg = AugmentConfig {
            max_rotate_deg: 90.0,
            ..AugmentConfig::default()
        };
        let mut px = vec![0.0; 5 * 5];
        px[0] = 1.0;
        let img = ImageF32::new(5, 5, px).unwrap();
        let out = cfg.apply(&img, &AugmentOp::RotateDeg(90.0)).unwrap();
        let total: f32 = out.pixels().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-5);
        assert!(out.get(0, 0) < 1e-5);
    }

    #[test]
    fn out_of_range_rejected() {
        let img = gradient(3, 3);
        assert!(matches!(
            augment(&img, &AugmentOp::RotateDeg(12.0)),
            Err(ImageError::AugmentRange { op: "rotate", .. })
        ));
        assert!(augment(&img, &AugmentOp::Zoom(1.5)).is_err());
        assert!(augment(&img, &AugmentOp::ShiftY(-0.2)).is_err());
        assert!(augment(&img, &AugmentOp::Brightness(f32::NAN)).is_err());
    }

    #[test]
    fn expand_has_ten_and_is_deterministic() {
        let img = gradient(32, 24);
        let a = expand_10x(&img, 42);
        let b = expand_10x(&img, 42);
        assert_eq!(a.len(), 10);
        assert!(a[0].bit_eq(&img));
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        let c = expand_10x(&img, 43);
        assert!(a.iter().skip(1).zip(c.iter().skip(1)).any(|(x, y)| !x.bit_eq(y)));
        assert!(a.iter().all(|v| (v.width(), v.height()) == (32, 24)));
    }

    #[test]
    fn expand_is_order_independent_across_images() {
        let cfg = AugmentConfig::default();
        let img = gradient(16, 16);
        let third_first = cfg.expand(&img, 9, 3);
        let _ = cfg.expand(&img, 9, 1);
        let third_again = cfg.expand(&img, 9, 3);
        assert!(third_first.iter().zip(&third_again).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn sampled_ops_stay_in_range() {
        let cfg = AugmentConfig::default();
        for v in 0..500 {
            let mut rng = variant_rng(1, v, 1);
            let ops = cfg.sample_ops(&mut rng);
            assert!((1..=3).contains(&ops.len()), "{ops:?}");
            for op in &ops {
                cfg.check(op).unwrap();
            }
        }
    }
}

//! Image ingestion, resizing, seeded augmentation and model-input assembly.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Image;
use crate::wavelet::{detail_images_at, WaveletError, WaveletFilter};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("image file not found: {0}")]
    FileNotFound(String),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("output dimensions must be at least 1x1 (got {width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("invalid augmentation parameters: {0}")]
    InvalidAugment(String),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads an 8/16-bit PNG or a binary PGM (`P5`) as intensities in `[0, 1]`.
///
/// Stored integers are divided by the format's maximum value. Colour sources
/// are reduced to one channel by an equal-weight average of R, G and B; any
/// alpha channel is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.exists() {
        return Err(PipelineError::FileNotFound(shown));
    }
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: shown.clone(),
        source,
    })?;
    decode_image(&bytes).map_err(|err| match err {
        PipelineError::CorruptImage { reason, .. } => PipelineError::CorruptImage {
            path: shown,
            reason,
        },
        PipelineError::UnsupportedFormat(reason) => {
            PipelineError::UnsupportedFormat(format!("{shown}: {reason}"))
        }
        other => other,
    })
}

/// Decodes PNG or binary PGM bytes; see [`load_image`].
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else {
        Err(PipelineError::UnsupportedFormat(
            "expected PNG or binary PGM (P5)".into(),
        ))
    }
}

fn corrupt(reason: impl Into<String>) -> PipelineError {
    PipelineError::CorruptImage {
        path: String::new(),
        reason: reason.into(),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    use image::{DynamicImage, ImageFormat};

    let decoded = image::load(Cursor::new(bytes), ImageFormat::Png).map_err(|e| match e {
        image::ImageError::Unsupported(u) => PipelineError::UnsupportedFormat(u.to_string()),
        other => corrupt(other.to_string()),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    // `stride` counts every stored channel, `colour` only the ones averaged
    fn average<T: Copy + Into<f64>>(raw: &[T], stride: usize, colour: usize, max: f64) -> Vec<f64> {
        raw.chunks_exact(stride)
            .map(|px| px[..colour].iter().map(|&v| v.into()).sum::<f64>() / (colour as f64 * max))
            .collect()
    }
    let data = match &decoded {
        DynamicImage::ImageLuma8(b) => average(b.as_raw(), 1, 1, 255.0),
        DynamicImage::ImageLumaA8(b) => average(b.as_raw(), 2, 1, 255.0),
        DynamicImage::ImageRgb8(b) => average(b.as_raw(), 3, 3, 255.0),
        DynamicImage::ImageRgba8(b) => average(b.as_raw(), 4, 3, 255.0),
        DynamicImage::ImageLuma16(b) => average(b.as_raw(), 1, 1, 65535.0),
        DynamicImage::ImageLumaA16(b) => average(b.as_raw(), 2, 1, 65535.0),
        DynamicImage::ImageRgb16(b) => average(b.as_raw(), 3, 3, 65535.0),
        DynamicImage::ImageRgba16(b) => average(b.as_raw(), 4, 3, 65535.0),
        _ => {
            return Err(PipelineError::UnsupportedFormat(
                "floating-point PNG sample layout".into(),
            ))
        }
    };
    Ok(Image::new(w, h, data))
}

fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    // Header: "P5" then width, height, maxval as ASCII decimals separated by
    // whitespace (with optional '#' comments), then one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("PGM header value out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt("missing whitespace after PGM header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let needed = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(sample_bytes))
        .ok_or_else(|| corrupt("PGM dimensions overflow"))?;
    let raster = bytes
        .get(pos..pos + needed)
        .ok_or_else(|| corrupt("PGM raster is truncated"))?;
    let max = maxval as f64;
    let data = if sample_bytes == 1 {
        raster.iter().map(|&v| (v as f64 / max).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 / max).min(1.0))
            .collect()
    };
    Ok(Image::new(w, h, data))
}

/// Writes `image` (expected in `[0, 1]`) as an 8-bit grayscale PNG.
pub fn save_png8(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer_with_format(
        path,
        &pixels,
        image.width() as u32,
        image.height() as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )
    .map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Bilinear resize with pixel centres aligned (`src = (dst + 0.5) * in/out - 0.5`,
/// clamped to the source frame).
pub fn resize_bilinear(image: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 || image.width() == 0 || image.height() == 0 {
        return Err(PipelineError::ZeroDimension {
            width: out_w,
            height: out_h,
        });
    }
    if (out_w, out_h) == (image.width(), image.height()) {
        return Ok(image.clone());
    }
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = axis(out_w, image.width());
    let ys = axis(out_h, image.height());
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        let (r0, r1) = (image.row(y0), image.row(y1));
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    Ok(Image::new(out_w, out_h, out))
}

/// Ranges for random geometric augmentation.
///
/// Rotation is drawn from `[-rotation_deg, rotation_deg]`, each translation
/// component from `[-translate_frac, translate_frac]` of the matching
/// dimension, and the isotropic scale from `[1 - scale_frac, 1 + scale_frac]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_frac: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translate_frac: 0.05,
            scale_frac: 0.10,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_frac: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, max: f64| {
            if v.is_finite() && (0.0..=max).contains(&v) {
                Ok(())
            } else {
                Err(PipelineError::InvalidAugment(format!(
                    "{name} = {v} outside [0, {max}]"
                )))
            }
        };
        check("rotation_deg", self.rotation_deg, 45.0)?;
        check("translate_frac", self.translate_frac, 0.25)?;
        check("scale_frac", self.scale_frac, 0.25)
    }

    /// Draws one transform. Always consumes four uniforms, so the draw for a
    /// seed does not depend on which ranges are zero.
    pub fn sample(&self) -> AffineSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut symmetric = |half: f64| -half + 2.0 * half * rng.random::<f64>();
        let rotation_deg = symmetric(self.rotation_deg);
        let translate_x = symmetric(self.translate_frac);
        let translate_y = symmetric(self.translate_frac);
        let scale = 1.0 + symmetric(self.scale_frac);
        AffineSample {
            rotation_deg,
            translate_x,
            translate_y,
            scale,
        }
    }
}

/// One concrete geometric transform.
///
/// Applied about the image centre as rotation, then translation, then scale:
/// `p' = c + scale * (R(p - c) + t)`. Positive rotation is counter-clockwise
/// as displayed (rows grow downwards). Translations are fractions of width
/// (`translate_x`) and height (`translate_y`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSample {
    pub rotation_deg: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub scale: f64,
}

impl AffineSample {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            scale: 1.0,
        }
    }
}

/// Resamples `image` under `transform` with bilinear interpolation. Pixels
/// that map outside the source frame read as 0.
pub fn apply_affine(image: &Image, transform: &AffineSample) -> Image {
    let (h, w) = image.dims();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = transform.rotation_deg.to_radians().sin_cos();
    let tx = transform.translate_x * w as f64;
    let ty = transform.translate_y * h as f64;
    let inv_scale = 1.0 / transform.scale;
    let fetch = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            image.get(r as usize, c as usize)
        }
    };
    Image::from_fn(w, h, |r, c| {
        // invert p' = c + s (R(p - c) + t)
        let qx = (c as f64 - cx) * inv_scale - tx;
        let qy = (r as f64 - cy) * inv_scale - ty;
        let sx = cx + cos * qx - sin * qy;
        let sy = cy + sin * qx + cos * qy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut v = fetch(y0, x0) * (1.0 - fx) * (1.0 - fy);
        if fx != 0.0 {
            v += fetch(y0, x0 + 1) * fx * (1.0 - fy);
        }
        if fy != 0.0 {
            v += fetch(y0 + 1, x0) * (1.0 - fx) * fy;
            if fx != 0.0 {
                v += fetch(y0 + 1, x0 + 1) * fx * fy;
            }
        }
        v
    })
}

/// Samples a transform from `params` and applies it.
pub fn augment(image: &Image, params: &AugmentParams) -> Result<Image> {
    params.validate()?;
    Ok(apply_affine(image, &params.sample()))
}

/// Which representation is fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Raw,
    #[default]
    Wavelet,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Raw => 1,
            InputMode::Wavelet => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Wavelet => "wavelet",
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Self::Raw),
            "wavelet" => Ok(Self::Wavelet),
            other => Err(format!("unknown input mode `{other}` (expected raw or wavelet)")),
        }
    }
}

/// Equally sized channels fed to the network. Raw layout has one channel;
/// wavelet layout has `(vertical, horizontal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub layout: InputMode,
    pub channels: Vec<Image>,
}

impl InputTensor {
    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.channels.first().map_or((0, 0), Image::dims);
        (self.channels.len(), h, w)
    }

    /// Channel-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.channels
            .iter()
            .flat_map(|c| c.data().iter().copied())
            .collect()
    }
}

/// Builds the network input: raw mode resizes the image; wavelet mode takes
/// the single-level detail images first and resizes each of them.
pub fn build_input(
    image: &Image,
    mode: InputMode,
    filter: &WaveletFilter,
    target: (usize, usize),
) -> Result<InputTensor> {
    build_input_at_depth(image, mode, filter, 1, target)
}

/// [`build_input`] with the detail images taken from pyramid level `depth`.
/// `target` is `(width, height)`.
pub fn build_input_at_depth(
    image: &Image,
    mode: InputMode,
    filter: &WaveletFilter,
    depth: usize,
    target: (usize, usize),
) -> Result<InputTensor> {
    let (tw, th) = target;
    let channels = match mode {
        InputMode::Raw => vec![resize_bilinear(image, tw, th)?],
        InputMode::Wavelet => {
            let (vertical, horizontal) = detail_images_at(image, filter, depth)?;
            vec![
                resize_bilinear(&vertical, tw, th)?,
                resize_bilinear(&horizontal, tw, th)?,
            ]
        }
    };
    Ok(InputTensor {
        layout: mode,
        channels,
    })
}

/// Everything needed to turn a stored scan into a network input.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: InputMode,
    pub filter: WaveletFilter,
    pub depth: usize,
    /// `(width, height)`.
    pub target: (usize, usize),
    /// Augmentation ranges for training images; `None` disables it. The seed
    /// field is ignored, per-sample seeds are derived by the trainer.
    pub augment: Option<AugmentParams>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: InputMode::Wavelet,
            filter: WaveletFilter::haar(),
            depth: 1,
            target: (64, 64),
            augment: Some(AugmentParams::default()),
        }
    }
}

impl PipelineConfig {
    /// Un-augmented input for evaluation and validation.
    pub fn prepare(&self, image: &Image) -> Result<InputTensor> {
        build_input_at_depth(image, self.mode, &self.filter, self.depth, self.target)
    }

    /// Training input: augments the raw image with `seed` (when enabled), then
    /// builds the input.
    pub fn prepare_augmented(&self, image: &Image, seed: u64) -> Result<InputTensor> {
        match &self.augment {
            Some(params) => {
                let augmented = augment(image, &params.with_seed(seed))?;
                self.prepare(&augmented)
            }
            None => self.prepare(image),
        }
    }

    /// `(channels, height, width)` of the tensors this config produces.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.mode.channels(), self.target.1, self.target.0)
    }
}

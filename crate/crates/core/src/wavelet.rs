//! Orthonormal discrete wavelet transform on periodic signals and images.
//!
//! The 1D analysis step correlates the signal with the lowpass and highpass
//! analysis filters and keeps every second output:
//!
//! ```text
//! approx[k] = sum_n lowpass[n]  * x[(2k + n) mod N]
//! detail[k] = sum_n highpass[n] * x[(2k + n) mod N]
//! ```
//!
//! Synthesis is the transpose of that map, which is its inverse because the
//! shipped filters are orthonormal and the extension is circular.
//!
//! # Subband naming
//!
//! The 2D transform filters rows first, then columns. A subband name lists the
//! filter applied along rows, then the filter applied along columns:
//!
//! | name | along rows | along columns | content               |
//! |------|------------|---------------|-----------------------|
//! | `ll` | lowpass    | lowpass       | approximation         |
//! | `lh` | lowpass    | highpass      | horizontal edges      |
//! | `hl` | highpass   | lowpass       | vertical edges        |
//! | `hh` | highpass   | highpass      | diagonal detail       |
//!
//! So an image whose columns alternate in sign (vertical stripes) puts all of
//! its energy into `hl`, and [`detail_images`] returns `hl` as the vertical
//! component and `lh` as the horizontal one.

use std::f64::consts::FRAC_1_SQRT_2;

use thiserror::Error;

use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveletError {
    #[error("signal length {0} is odd")]
    OddLength(usize),
    #[error("signal of length {0} is too short, need at least 2 samples")]
    SignalTooShort(usize),
    #[error("approximation has {approx} samples but detail has {detail}")]
    LengthMismatch { approx: usize, detail: usize },
    #[error("image dimensions {height}x{width} are not both even and at least 2")]
    OddDimension { height: usize, width: usize },
    #[error("subband dimensions disagree")]
    DimensionMismatch,
    #[error("depth {depth} does not divide a {height}x{width} image")]
    DepthTooDeep {
        depth: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid wavelet filter: {0}")]
    InvalidFilter(String),
    #[error("unknown wavelet filter `{0}` (expected `haar` or `db2`)")]
    UnknownFilter(String),
}

pub type Result<T> = std::result::Result<T, WaveletError>;

/// An orthonormal analysis filter pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletFilter {
    name: String,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
}

impl WaveletFilter {
    /// Builds a filter from its lowpass taps; the highpass taps follow from
    /// the quadrature-mirror relation `highpass[n] = (-1)^n lowpass[L-1-n]`.
    pub fn from_lowpass(name: impl Into<String>, lowpass: Vec<f64>) -> Result<Self> {
        let len = lowpass.len();
        let highpass = (0..len)
            .map(|n| {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * lowpass[len.saturating_sub(1 + n)]
            })
            .collect();
        let filter = Self {
            name: name.into(),
            lowpass,
            highpass,
        };
        filter.validate()?;
        Ok(filter)
    }

    /// Haar: lowpass `[1/sqrt 2, 1/sqrt 2]`.
    pub fn haar() -> Self {
        Self {
            name: "haar".into(),
            lowpass: vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            highpass: vec![FRAC_1_SQRT_2, -FRAC_1_SQRT_2],
        }
    }

    /// The 4-tap Daubechies filter (two vanishing moments).
    pub fn db2() -> Self {
        let s3 = 3f64.sqrt();
        let norm = 4.0 * 2f64.sqrt();
        let lowpass = vec![
            (1.0 + s3) / norm,
            (3.0 + s3) / norm,
            (3.0 - s3) / norm,
            (1.0 - s3) / norm,
        ];
        Self::from_lowpass("db2", lowpass).expect("db2 taps are orthonormal")
    }

    /// Looks up a shipped filter: `haar` or `db2` (alias `db4`, `daubechies4`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(Self::haar()),
            "db2" | "db4" | "daubechies4" => Ok(Self::db2()),
            other => Err(WaveletError::UnknownFilter(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    pub fn len(&self) -> usize {
        self.lowpass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lowpass.is_empty()
    }

    /// Checks tap count, unit norm of both filters and the mirror relation.
    pub fn validate(&self) -> Result<()> {
        let len = self.lowpass.len();
        if len < 2 || len % 2 != 0 || self.highpass.len() != len {
            return Err(WaveletError::InvalidFilter(format!(
                "filters need equal, even length >= 2 (got {} and {})",
                len,
                self.highpass.len()
            )));
        }
        for (label, taps) in [("lowpass", &self.lowpass), ("highpass", &self.highpass)] {
            let norm: f64 = taps.iter().map(|t| t * t).sum();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(WaveletError::InvalidFilter(format!(
                    "{label} squared norm is {norm}, expected 1"
                )));
            }
        }
        for n in 0..len {
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            if self.highpass[n] != sign * self.lowpass[len - 1 - n] {
                return Err(WaveletError::InvalidFilter(format!(
                    "highpass tap {n} breaks the quadrature-mirror relation"
                )));
            }
        }
        Ok(())
    }

    fn analyze(&self, input: &[f64], approx: &mut [f64], detail: &mut [f64]) {
        let n = input.len();
        for k in 0..n / 2 {
            let (mut a, mut d) = (0.0, 0.0);
            for (tap, (lo, hi)) in self.lowpass.iter().zip(&self.highpass).enumerate() {
                let x = input[(2 * k + tap) % n];
                a += lo * x;
                d += hi * x;
            }
            approx[k] = a;
            detail[k] = d;
        }
    }

    fn synthesize(&self, approx: &[f64], detail: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.fill(0.0);
        for (k, (a, d)) in approx.iter().zip(detail).enumerate() {
            for (tap, (lo, hi)) in self.lowpass.iter().zip(&self.highpass).enumerate() {
                out[(2 * k + tap) % n] += lo * a + hi * d;
            }
        }
    }
}

impl Default for WaveletFilter {
    fn default() -> Self {
        Self::haar()
    }
}

/// Single-level 1D analysis. Returns `(approx, detail)`, each of length `N/2`.
pub fn dwt1d(signal: &[f64], filter: &WaveletFilter) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = signal.len();
    if n < 2 {
        return Err(WaveletError::SignalTooShort(n));
    }
    if n % 2 != 0 {
        return Err(WaveletError::OddLength(n));
    }
    let mut approx = vec![0.0; n / 2];
    let mut detail = vec![0.0; n / 2];
    filter.analyze(signal, &mut approx, &mut detail);
    Ok((approx, detail))
}

/// Single-level 1D synthesis, the inverse of [`dwt1d`].
pub fn idwt1d(approx: &[f64], detail: &[f64], filter: &WaveletFilter) -> Result<Vec<f64>> {
    if approx.len() != detail.len() {
        return Err(WaveletError::LengthMismatch {
            approx: approx.len(),
            detail: detail.len(),
        });
    }
    if approx.is_empty() {
        return Err(WaveletError::SignalTooShort(0));
    }
    let mut out = vec![0.0; 2 * approx.len()];
    filter.synthesize(approx, detail, &mut out);
    Ok(out)
}

/// The four subbands of one 2D analysis level.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: Image,
    pub lh: Image,
    pub hl: Image,
    pub hh: Image,
}

impl SubbandSet {
    /// `(height, width)` shared by all four subbands, or `DimensionMismatch`.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let dims = self.ll.dims();
        if [&self.lh, &self.hl, &self.hh]
            .iter()
            .any(|band| band.dims() != dims)
        {
            return Err(WaveletError::DimensionMismatch);
        }
        Ok(dims)
    }

    pub fn energy(&self) -> f64 {
        self.ll.energy() + self.detail_energy()
    }

    pub fn detail_energy(&self) -> f64 {
        self.lh.energy() + self.hl.energy() + self.hh.energy()
    }
}

fn check_even(image: &Image) -> Result<()> {
    let (h, w) = image.dims();
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(WaveletError::OddDimension {
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Applies the 1D analysis along every column of `image`, returning
/// `(lowpass, highpass)` images of half the height.
fn analyze_columns(image: &Image, filter: &WaveletFilter) -> (Image, Image) {
    let (h, w) = image.dims();
    let mut low = Image::zeros(w, h / 2);
    let mut high = Image::zeros(w, h / 2);
    let mut column = vec![0.0; h];
    let mut a = vec![0.0; h / 2];
    let mut d = vec![0.0; h / 2];
    for c in 0..w {
        for (r, v) in column.iter_mut().enumerate() {
            *v = image.get(r, c);
        }
        filter.analyze(&column, &mut a, &mut d);
        for r in 0..h / 2 {
            low.set(r, c, a[r]);
            high.set(r, c, d[r]);
        }
    }
    (low, high)
}

fn synthesize_columns(low: &Image, high: &Image, filter: &WaveletFilter) -> Image {
    let (half, w) = low.dims();
    let mut out = Image::zeros(w, 2 * half);
    let mut a = vec![0.0; half];
    let mut d = vec![0.0; half];
    let mut column = vec![0.0; 2 * half];
    for c in 0..w {
        for r in 0..half {
            a[r] = low.get(r, c);
            d[r] = high.get(r, c);
        }
        filter.synthesize(&a, &d, &mut column);
        for (r, v) in column.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    out
}

/// Single-level separable 2D analysis (rows, then columns).
pub fn dwt2d(image: &Image, filter: &WaveletFilter) -> Result<SubbandSet> {
    check_even(image)?;
    let (h, w) = image.dims();
    let mut row_low = Image::zeros(w / 2, h);
    let mut row_high = Image::zeros(w / 2, h);
    for r in 0..h {
        let (lo_row, hi_row) = (
            &mut row_low.data_mut()[r * (w / 2)..(r + 1) * (w / 2)],
            &mut row_high.data_mut()[r * (w / 2)..(r + 1) * (w / 2)],
        );
        filter.analyze(image.row(r), lo_row, hi_row);
    }
    let (ll, lh) = analyze_columns(&row_low, filter);
    let (hl, hh) = analyze_columns(&row_high, filter);
    Ok(SubbandSet { ll, lh, hl, hh })
}

/// Single-level 2D synthesis, the inverse of [`dwt2d`].
pub fn idwt2d(subbands: &SubbandSet, filter: &WaveletFilter) -> Result<Image> {
    let (half_h, half_w) = subbands.dims()?;
    if half_h == 0 || half_w == 0 {
        return Err(WaveletError::DimensionMismatch);
    }
    let row_low = synthesize_columns(&subbands.ll, &subbands.lh, filter);
    let row_high = synthesize_columns(&subbands.hl, &subbands.hh, filter);
    let (h, w) = (2 * half_h, 2 * half_w);
    let mut out = Image::zeros(w, h);
    for r in 0..h {
        filter.synthesize(
            row_low.row(r),
            row_high.row(r),
            &mut out.data_mut()[r * w..(r + 1) * w],
        );
    }
    Ok(out)
}

/// Multi-level decomposition; level `i + 1` analyzes level `i`'s `ll` band.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    /// Finest level first, coarsest last.
    pub levels: Vec<SubbandSet>,
    pub final_ll: Image,
    pub filter: WaveletFilter,
}

impl Pyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Energy of `final_ll` plus every detail subband.
    pub fn energy(&self) -> f64 {
        self.final_ll.energy()
            + self
                .levels
                .iter()
                .map(SubbandSet::detail_energy)
                .sum::<f64>()
    }

    /// Inverts the decomposition, starting from `final_ll`.
    pub fn reconstruct(&self) -> Result<Image> {
        let mut current = self.final_ll.clone();
        for level in self.levels.iter().rev() {
            let set = SubbandSet {
                ll: current,
                lh: level.lh.clone(),
                hl: level.hl.clone(),
                hh: level.hh.clone(),
            };
            current = idwt2d(&set, &self.filter)?;
        }
        Ok(current)
    }
}

/// Decomposes `image` into `depth` levels. Both dimensions must be divisible
/// by `2^depth`.
pub fn decompose(image: &Image, filter: &WaveletFilter, depth: usize) -> Result<Pyramid> {
    let (h, w) = image.dims();
    let divisor = 1usize.checked_shl(depth as u32).unwrap_or(0);
    if depth == 0 || divisor == 0 || h % divisor != 0 || w % divisor != 0 || h < divisor || w < divisor
    {
        return Err(WaveletError::DepthTooDeep {
            depth,
            height: h,
            width: w,
        });
    }
    let mut levels = Vec::with_capacity(depth);
    let mut current = image.clone();
    for _ in 0..depth {
        let set = dwt2d(&current, filter)?;
        current = set.ll.clone();
        levels.push(set);
    }
    Ok(Pyramid {
        levels,
        final_ll: current,
        filter: filter.clone(),
    })
}

/// Vertical- and horizontal-edge detail images at one level, each min-max
/// rescaled to `[0, 1]`.
///
/// Returns `(vertical, horizontal)` = rescaled `(hl, lh)`. A subband whose
/// value range is negligible relative to the input's magnitude is treated as
/// constant and returned as all zeros.
pub fn detail_images(image: &Image, filter: &WaveletFilter) -> Result<(Image, Image)> {
    detail_images_at(image, filter, 1)
}

/// Like [`detail_images`], but taken from level `depth` of the pyramid.
pub fn detail_images_at(
    image: &Image,
    filter: &WaveletFilter,
    depth: usize,
) -> Result<(Image, Image)> {
    if depth <= 1 {
        check_even(image)?;
    }
    let pyramid = decompose(image, filter, depth.max(1)).map_err(|e| match e {
        WaveletError::DepthTooDeep { height, width, .. } if depth <= 1 => {
            WaveletError::OddDimension { height, width }
        }
        other => other,
    })?;
    let level = pyramid.levels.last().expect("depth >= 1");
    let tolerance = flat_tolerance(image);
    Ok((
        level.hl.rescale_unit(tolerance),
        level.lh.rescale_unit(tolerance),
    ))
}

/// Subbands with a value range below this are rounding noise on flat input.
pub(crate) fn flat_tolerance(image: &Image) -> f64 {
    let peak = image.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-10 * peak.max(1.0)
}

//! The four distortion operators, the Gaussian noise perturbation and the
//! seeded parameter sampler.
//!
//! Every operator is a blend `(1 - alpha) * degenerate + alpha * image`
//! against a degenerate version of the image: its grayscale (color
//! balance), a flat image at the mean luminance plus 0.5 (contrast), a
//! smoothed copy (sharpness), or black (brightness). `alpha = 1` therefore
//! always returns the input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::round_sig9;
use crate::pixel::{
    blend, clamp_intensity, convolve3x3, mean_luminance, mix, to_grayscale, ImageBuffer, Kernel3,
    MAX_INTENSITY,
};
use crate::rng::Stream;

/// Smoothing stencil used by the sharpness operator, normalised by its sum.
pub const SMOOTH_KERNEL: Kernel3 = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
pub const SMOOTH_SCALE: f64 = 13.0;

/// Offset added to the mean luminance before the contrast blend.
pub const CONTRAST_MEAN_OFFSET: f64 = 0.5;

/// Distortion class. The integer codes are the classifier's labels and
/// must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistortionKind {
    ColorBalance = 1,
    Contrast = 2,
    Sharpness = 3,
    Brightness = 4,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::ColorBalance,
        DistortionKind::Contrast,
        DistortionKind::Sharpness,
        DistortionKind::Brightness,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code).wrapping_sub(1)).copied()
    }

    /// Zero-based class index used by the network head.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::ColorBalance => "color",
            DistortionKind::Contrast => "contrast",
            DistortionKind::Sharpness => "sharpness",
            DistortionKind::Brightness => "brightness",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown distortion `{s}` (expected color|contrast|sharpness|brightness)"
                ))
            })
    }
}

impl Serialize for DistortionKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for DistortionKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        Self::from_code(code)
            .ok_or_else(|| serde::de::Error::custom(format!("label {code} not in 1..=4")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionParams {
    pub kind: DistortionKind,
    pub alpha: f64,
    /// Noise scale in the `[0, 1]` pixel domain.
    pub beta: f64,
    pub noise_seed: u64,
}

impl DistortionParams {
    /// Parameters that leave an image untouched.
    pub fn identity(kind: DistortionKind) -> Self {
        Self {
            kind,
            alpha: 1.0,
            beta: 0.0,
            noise_seed: 0,
        }
    }
}

pub fn adjust_color(img: &ImageBuffer, alpha: f64) -> ImageBuffer {
    blend(&to_grayscale(img), img, alpha).expect("grayscale keeps the shape")
}

pub fn adjust_contrast(img: &ImageBuffer, alpha: f64) -> ImageBuffer {
    let m = mean_luminance(img) + CONTRAST_MEAN_OFFSET;
    img.map(|v| clamp_intensity(mix(m, v, alpha)))
}

pub fn adjust_sharpness(img: &ImageBuffer, alpha: f64) -> ImageBuffer {
    let smooth =
        convolve3x3(img, &SMOOTH_KERNEL, SMOOTH_SCALE).expect("smoothing scale is non-zero");
    blend(&smooth, img, alpha).expect("smoothing keeps the shape")
}

pub fn adjust_brightness(img: &ImageBuffer, alpha: f64) -> ImageBuffer {
    img.map(|v| clamp_intensity(mix(0.0, v, alpha)))
}

/// Adds `255 * beta * n`, `n ~ N(0, 1)`, to every value and clamps. Draws
/// are taken in row-major, channel-minor order from `Stream::new(noise_seed)`.
pub fn add_gaussian_noise(img: &ImageBuffer, beta: f64, noise_seed: u64) -> Result<ImageBuffer> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise scale must be finite and >= 0, got {beta}"
        )));
    }
    if beta == 0.0 {
        return Ok(img.clone());
    }
    let sigma = MAX_INTENSITY * beta;
    let mut stream = Stream::new(noise_seed);
    Ok(img.map(|v| clamp_intensity(v + sigma * stream.standard_normal())))
}

/// Applies the selected operator, then the noise.
pub fn distort(img: &ImageBuffer, params: &DistortionParams) -> Result<ImageBuffer> {
    if !params.alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite, got {}",
            params.alpha
        )));
    }
    let distorted = match params.kind {
        DistortionKind::ColorBalance => adjust_color(img, params.alpha),
        DistortionKind::Contrast => adjust_contrast(img, params.alpha),
        DistortionKind::Sharpness => adjust_sharpness(img, params.alpha),
        DistortionKind::Brightness => adjust_brightness(img, params.alpha),
    };
    add_gaussian_noise(&distorted, params.beta, params.noise_seed)
}

/// Ranges for the parameter sampler. Alpha values closer to 1.0 than
/// `alpha_exclusion_halfwidth` are rejected and redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub alpha_exclusion_halfwidth: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            alpha_lo: 0.5,
            alpha_hi: 1.5,
            alpha_exclusion_halfwidth: 0.01,
            beta_lo: 0.02,
            beta_hi: 0.05,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.alpha_lo,
            self.alpha_hi,
            self.alpha_exclusion_halfwidth,
            self.beta_lo,
            self.beta_hi,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("sampler bounds must be finite".into()));
        }
        if self.alpha_lo >= self.alpha_hi {
            return Err(Error::Config(format!(
                "alpha range [{}, {}] is empty",
                self.alpha_lo, self.alpha_hi
            )));
        }
        if self.alpha_exclusion_halfwidth < 0.0 {
            return Err(Error::Config(
                "alpha exclusion half-width must be >= 0".into(),
            ));
        }
        if self.beta_lo < 0.0 || self.beta_lo > self.beta_hi {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must satisfy 0 <= lo <= hi",
                self.beta_lo, self.beta_hi
            )));
        }
        let covers_one = self.alpha_lo <= 1.0 && 1.0 <= self.alpha_hi;
        if covers_one && self.alpha_exclusion_halfwidth == 0.0 {
            return Err(Error::Config(
                "alpha range contains 1.0, which requires a positive exclusion half-width".into(),
            ));
        }
        let hw = self.alpha_exclusion_halfwidth;
        if self.alpha_lo >= 1.0 - hw && self.alpha_hi <= 1.0 + hw {
            return Err(Error::Config(format!(
                "exclusion band 1.0 ± {hw} covers the whole alpha range"
            )));
        }
        Ok(())
    }

    fn excluded(&self, alpha: f64) -> bool {
        (alpha - 1.0).abs() < self.alpha_exclusion_halfwidth
    }
}

/// Draws alpha (with rejection around 1.0), beta and a noise seed.
///
/// Alpha and beta are rounded to nine significant digits, the precision of
/// the manifest file, so a value read back from disk is the value sampled.
pub fn sample_params(
    cfg: &SamplerConfig,
    kind: DistortionKind,
    rng: &mut Stream,
) -> Result<DistortionParams> {
    cfg.validate()?;
    let alpha = loop {
        let a = round_sig9(rng.uniform_in(cfg.alpha_lo, cfg.alpha_hi));
        if !cfg.excluded(a) {
            break a;
        }
    };
    let beta = round_sig9(rng.uniform_in(cfg.beta_lo, cfg.beta_hi)).clamp(cfg.beta_lo, cfg.beta_hi);
    let noise_seed = rng.next_u64();
    Ok(DistortionParams {
        kind,
        alpha,
        beta,
        noise_seed,
    })
}

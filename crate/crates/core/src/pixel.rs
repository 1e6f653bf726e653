//! RGB image buffers in the 0–255 floating-point domain, binary PPM I/O and
//! the pixel primitives the distortions are built from.

use crate::error::{Error, Result};

/// Smallest accepted edge length. The 3×3 smoothing stencil needs an interior.
pub const MIN_DIM: usize = 3;

pub const MAX_INTENSITY: f64 = 255.0;

/// Luma weights used for the grayscale conversion.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major `height × width × 3` image with intensities nominally in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "expected {} values for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Returns a copy with every value clamped to `[0, 255]`.
    pub fn clamped(&self) -> ImageBuffer {
        self.map(clamp_intensity)
    }

    pub(crate) fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_DIM || height < MIN_DIM {
        return Err(Error::Dimension(format!(
            "image is {width}x{height}, minimum is {MIN_DIM}x{MIN_DIM}"
        )));
    }
    Ok(())
}

#[inline]
pub fn clamp_intensity(v: f64) -> f64 {
    v.clamp(0.0, MAX_INTENSITY)
}

/// Decodes a binary `P6` stream with maxval 255. Header comments are accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let (width, _) = header_field(bytes, &mut pos, "width")?;
    let (height, _) = header_field(bytes, &mut pos, "height")?;
    let (maxval, maxval_offset) = header_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            maxval_offset,
            format!("maxval {maxval} unsupported, expected 255"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected whitespace after maxval")),
    }
    if width < MIN_DIM || height < MIN_DIM {
        return Err(Error::format(
            2,
            format!("dimensions {width}x{height} below minimum {MIN_DIM}x{MIN_DIM}"),
        ));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(2, "dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    let data = payload[..need].iter().map(|&b| f64::from(b)).collect();
    ImageBuffer::new(width, height, data)
}

/// Skips whitespace and comments, then parses a decimal field. Returns the
/// value and the offset of its first digit.
fn header_field(bytes: &[u8], pos: &mut usize, what: &str) -> Result<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
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
        return Err(Error::format(start, format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .map(|v| (v, start))
        .ok_or_else(|| Error::format(start, format!("{what} out of range")))
}

/// Encodes with the canonical header `P6\n<w> <h>\n255\n`. Values are clamped
/// to `[0, 255]` and rounded half-up.
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    // NaN clamps to 0 through the `as` cast.
    (clamp_intensity(v) + 0.5).floor() as u8
}

/// Luma image with the gray value replicated into all three channels.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let g = luma(px);
        data.extend_from_slice(&[g, g, g]);
    }
    ImageBuffer {
        width: img.width,
        height: img.height,
        data,
    }
}

#[inline]
fn luma(px: &[f64]) -> f64 {
    px[0] * LUMA_WEIGHTS[0] + px[1] * LUMA_WEIGHTS[1] + px[2] * LUMA_WEIGHTS[2]
}

/// `(1 - alpha) * base + alpha * overlay`, clamped. `alpha` outside `[0, 1]`
/// extrapolates.
pub fn blend(base: &ImageBuffer, overlay: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    if !base.same_shape(overlay) {
        return Err(Error::Dimension(format!(
            "blend of {}x{} with {}x{}",
            base.width, base.height, overlay.width, overlay.height
        )));
    }
    let data = base
        .data
        .iter()
        .zip(&overlay.data)
        .map(|(&b, &o)| clamp_intensity(mix(b, o, alpha)))
        .collect();
    Ok(ImageBuffer {
        width: base.width,
        height: base.height,
        data,
    })
}

/// `(1 - alpha) * base + alpha * overlay` evaluated as
/// `base + alpha * (overlay - base)`, so `base == overlay` is a fixed point
/// for every alpha. `alpha == 1` returns `overlay` exactly.
#[inline]
pub fn mix(base: f64, overlay: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        overlay
    } else {
        base + alpha * (overlay - base)
    }
}

/// Mean gray value over all pixels.
pub fn mean_luminance(img: &ImageBuffer) -> f64 {
    let sum: f64 = img.data.chunks_exact(3).map(luma).sum();
    sum / (img.width * img.height) as f64
}

pub type Kernel3 = [[f64; 3]; 3];

/// Per-channel 3×3 correlation divided by `scale`. Only interior pixels are
/// filtered; the one-pixel border keeps its input value. No clamping.
pub fn convolve3x3(img: &ImageBuffer, kernel: &Kernel3, scale: f64) -> Result<ImageBuffer> {
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "convolution scale must be finite and non-zero, got {scale}"
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut out = img.data.clone();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    let base = ((y + ky - 1) * w + x - 1) * 3 + c;
                    acc += row[0] * img.data[base]
                        + row[1] * img.data[base + 3]
                        + row[2] * img.data[base + 6];
                }
                out[(y * w + x) * 3 + c] = acc / scale;
            }
        }
    }
    Ok(ImageBuffer {
        width: w,
        height: h,
        data: out,
    })
}

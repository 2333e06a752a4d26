//! CT preprocessing: HU windowing, resizing, normalization, augmentation.
//!
//! A raw slice of Hounsfield units becomes a three-channel image by
//! applying three fixed diagnostic windows (brain, subdural, soft tissue),
//! each mapped to `[0,1]` by a clamped linear ramp. Training-time
//! augmentation operates on that windowed image, before per-channel
//! normalization.

use crate::tensor::Tensor;
use crate::{Error, Result, Rng};
use rand::Rng as _;

/// Intensity window over HU values: `v = clamp((hu - (c - w/2)) / w, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub center: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if width <= 0.0 {
            return Err(Error::Config(format!("window width {width} must be positive")));
        }
        Ok(WindowSpec { center, width })
    }
}

/// Channel 0 of the composed image.
pub const BRAIN_WINDOW: WindowSpec = WindowSpec { center: 40.0, width: 80.0 };
/// Channel 1.
pub const SUBDURAL_WINDOW: WindowSpec = WindowSpec { center: 80.0, width: 200.0 };
/// Channel 2.
pub const SOFT_TISSUE_WINDOW: WindowSpec = WindowSpec { center: 40.0, width: 380.0 };

/// Per-channel normalization statistics in window-channel order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config(format!("normalization std {std:?} must be positive")));
        }
        Ok(NormStats { mean, std })
    }
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.1738, 0.1433, 0.1970],
            std: [0.3161, 0.2850, 0.3111],
        }
    }
}

/// One raw CT slice in Hounsfield units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HuSlice {
    height: usize,
    width: usize,
    values: Vec<i16>,
}

impl HuSlice {
    pub fn new(height: usize, width: usize, values: Vec<i16>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Invalid(format!(
                "slice dimensions {height}x{width}; minimum is 8x8"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Invalid(format!(
                "slice {height}x{width} wants {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(HuSlice { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(format!(
                "image {height}x{width} wants {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayImage { height, width, data })
    }
}

/// Three-channel windowed image, `[3][H][W]`, channels in window order
/// (brain, subdural, soft tissue).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiWindowImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MultiWindowImage {
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// `[1, 3, H, W]` tensor for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone())
            .expect("dimensions consistent by construction")
    }
}

/// Applies one window to a slice, producing values in `[0,1]`.
pub fn apply_window(slice: &HuSlice, window: &WindowSpec) -> GrayImage {
    let lo = window.center - window.width / 2.0;
    let data = slice
        .values
        .iter()
        .map(|&hu| ((f64::from(hu) - lo) / window.width).clamp(0.0, 1.0))
        .collect();
    GrayImage {
        height: slice.height,
        width: slice.width,
        data,
    }
}

/// Stacks the three fixed windows into one image.
pub fn compose_windows(slice: &HuSlice) -> MultiWindowImage {
    let mut data = Vec::with_capacity(3 * slice.height * slice.width);
    for w in [&BRAIN_WINDOW, &SUBDURAL_WINDOW, &SOFT_TISSUE_WINDOW] {
        data.extend_from_slice(&apply_window(slice, w).data);
    }
    MultiWindowImage {
        height: slice.height,
        width: slice.width,
        data,
    }
}

/// Bilinear resize with half-pixel centers (align_corners = false) and
/// edge-clamped sampling. Matching input/output dimensions return the
/// image bit-identically.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!("resize target {out_h}x{out_w}")));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let mut data = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = y.floor();
        let fy = y - y0;
        let y0i = (y0 as isize).clamp(0, img.height as isize - 1) as usize;
        let y1i = ((y0 as isize + 1).clamp(0, img.height as isize - 1)) as usize;
        for ox in 0..out_w {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = x.floor();
            let fx = x - x0;
            let x0i = (x0 as isize).clamp(0, img.width as isize - 1) as usize;
            let x1i = ((x0 as isize + 1).clamp(0, img.width as isize - 1)) as usize;
            let top = img.data[y0i * img.width + x0i] * (1.0 - fx)
                + img.data[y0i * img.width + x1i] * fx;
            let bot = img.data[y1i * img.width + x0i] * (1.0 - fx)
                + img.data[y1i * img.width + x1i] * fx;
            data[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    GrayImage::new(out_h, out_w, data)
}

/// Per-channel bilinear resize of a composed image.
pub fn resize_multi(img: &MultiWindowImage, out_h: usize, out_w: usize) -> Result<MultiWindowImage> {
    let hw = img.height * img.width;
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let chan = GrayImage {
            height: img.height,
            width: img.width,
            data: img.data[c * hw..(c + 1) * hw].to_vec(),
        };
        data.extend_from_slice(&resize_bilinear(&chan, out_h, out_w)?.data);
    }
    Ok(MultiWindowImage {
        height: out_h,
        width: out_w,
        data,
    })
}

/// `(v - mean) / std` per channel.
pub fn normalize(img: &MultiWindowImage, stats: &NormStats) -> MultiWindowImage {
    let hw = img.height * img.width;
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        for &v in &img.data[c * hw..(c + 1) * hw] {
            data.push((v - stats.mean[c]) / stats.std[c]);
        }
    }
    MultiWindowImage {
        height: img.height,
        width: img.width,
        data,
    }
}

// ── Augmentation ────────────────────────────────────────────────────────

/// Training-time augmentation: each transform fires independently with its
/// probability, parameters drawn uniformly from the stated range. Defaults:
/// rotation up to 15 degrees, shift up to 10% of the side, scale in
/// [0.9, 1.1], brightness up to 0.1, every probability 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_rotate: f64,
    pub max_rotate_deg: f64,
    pub p_shift: f64,
    pub max_shift_frac: f64,
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    pub p_brightness: f64,
    pub max_brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_rotate: 0.5,
            max_rotate_deg: 15.0,
            p_shift: 0.5,
            max_shift_frac: 0.10,
            p_scale: 0.5,
            scale_range: (0.9, 1.1),
            p_brightness: 0.5,
            max_brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: `augment` returns the input exactly.
    pub fn identity() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_shift: 0.0,
            p_scale: 0.0,
            p_brightness: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.p_flip,
            self.p_rotate,
            self.p_shift,
            self.p_scale,
            self.p_brightness,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must be in [0,1]".into()));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::Config(format!(
                "augmentation scale range {:?} must be positive and ordered",
                self.scale_range
            )));
        }
        if self.max_rotate_deg < 0.0 || self.max_shift_frac < 0.0 || self.max_brightness < 0.0 {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mirrors columns exactly (no resampling), so it is an involution.
pub fn horizontal_flip(img: &MultiWindowImage) -> MultiWindowImage {
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let mut data = vec![0.0; img.data.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[c * hw + y * w + x] = img.data[c * hw + y * w + (w - 1 - x)];
            }
        }
    }
    MultiWindowImage {
        height: h,
        width: w,
        data,
    }
}

/// Adds a constant to every channel, clamping back into `[0,1]`.
pub fn brightness(img: &MultiWindowImage, delta: f64) -> MultiWindowImage {
    MultiWindowImage {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|v| (v + delta).clamp(0.0, 1.0)).collect(),
    }
}

/// Rotation/scale/shift about the image center by inverse mapping with
/// bilinear sampling; samples outside the source are zero.
pub fn affine(
    img: &MultiWindowImage,
    rotate_deg: f64,
    scale: f64,
    shift_x: f64,
    shift_y: f64,
) -> Result<MultiWindowImage> {
    if scale <= 0.0 {
        return Err(Error::Invalid(format!("affine scale {scale} must be positive")));
    }
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    let theta = rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            // Invert dst = R(theta) * s * (src - c) + c + t.
            let dx = x as f64 - cx - shift_x;
            let dy = y as f64 - cy - shift_y;
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let at = |yy: isize, xx: isize| -> f64 {
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        0.0
                    } else {
                        img.data[c * hw + yy as usize * w + xx as usize]
                    }
                };
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                data[c * hw + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(MultiWindowImage {
        height: h,
        width: w,
        data,
    })
}

/// Samples and applies the configured transforms in a fixed order:
/// flip, then one combined rotate/scale/shift resample, then brightness.
/// Draw order is fixed so a fixed seed reproduces the same image.
pub fn augment(img: &MultiWindowImage, cfg: &AugmentConfig, rng: &mut Rng) -> Result<MultiWindowImage> {
    cfg.validate()?;
    let mut out = img.clone();

    let flip = rng.gen::<f64>() < cfg.p_flip;
    let rotate = if rng.gen::<f64>() < cfg.p_rotate {
        rng.gen_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg)
    } else {
        0.0
    };
    let (shift_x, shift_y) = if rng.gen::<f64>() < cfg.p_shift {
        let max = cfg.max_shift_frac * img.width.min(img.height) as f64;
        (rng.gen_range(-max..=max), rng.gen_range(-max..=max))
    } else {
        (0.0, 0.0)
    };
    let scale = if rng.gen::<f64>() < cfg.p_scale {
        rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    let delta = if rng.gen::<f64>() < cfg.p_brightness {
        rng.gen_range(-cfg.max_brightness..=cfg.max_brightness)
    } else {
        0.0
    };

    if flip {
        out = horizontal_flip(&out);
    }
    if rotate != 0.0 || scale != 1.0 || shift_x != 0.0 || shift_y != 0.0 {
        out = affine(&out, rotate, scale, shift_x, shift_y)?;
    }
    if delta != 0.0 {
        out = brightness(&out, delta);
    }
    Ok(out)
}

/// Full slice-to-tensor path: window, resize to the model side, optionally
/// augment, normalize.
pub fn prepare_slice(
    slice: &HuSlice,
    side: usize,
    stats: &NormStats,
    augmentation: Option<(&AugmentConfig, &mut Rng)>,
) -> Result<Tensor> {
    let mut img = resize_multi(&compose_windows(slice), side, side)?;
    if let Some((cfg, rng)) = augmentation {
        img = augment(&img, cfg, rng)?;
    }
    Ok(normalize(&img, stats).to_tensor())
}

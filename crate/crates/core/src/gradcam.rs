//! Class-activation heatmaps for the slice encoder.
//!
//! For a chosen output class, the gradient of the pre-sigmoid logit is
//! taken with respect to the last conv stage's activation maps. Each map's
//! gradient is averaged into a channel weight, the weighted map sum is
//! rectified, upsampled to the input size, and max-normalized. Overlays
//! blend the heatmap over the brain-window view of the slice.

use std::path::Path;

use crate::encoder::EncoderModel;
use crate::preprocess::{apply_window, HuSlice, BRAIN_WINDOW};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result, NUM_CLASSES};

// ── Heatmaps ────────────────────────────────────────────────────────────

/// One class's activation map over a slice, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub class: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major intensities; all-zero only when `zero` is set.
    pub values: Vec<f64>,
    /// The pre-normalization map was identically zero.
    pub zero: bool,
    /// Free-form provenance, e.g. a scan id and slice index.
    pub source: Option<String>,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Rectified gradient-weighted channel sum: each channel's weight is the
/// mean of `grads` over its positions. Inputs are `[channels, height,
/// width]`, flattened; the result is one `height * width` map.
pub fn cam_from_parts(
    activations: &[f64],
    grads: &[f64],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Vec<f64>> {
    let hw = height * width;
    if activations.len() != channels * hw || grads.len() != activations.len() {
        return Err(Error::Shape {
            op: "cam_from_parts",
            msg: format!(
                "{} activations and {} gradients for {channels}x{height}x{width}",
                activations.len(),
                grads.len()
            ),
        });
    }
    let mut map = vec![0.0; hw];
    for k in 0..channels {
        let chan = &activations[k * hw..(k + 1) * hw];
        let alpha = grads[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (m, a) in map.iter_mut().zip(chan) {
            *m += alpha * a;
        }
    }
    for m in &mut map {
        *m = f64::max(*m, 0.0);
    }
    Ok(map)
}

/// Bilinear resampling with the output corners pinned to the input corners.
pub fn bilinear_upsample(
    map: &[f64],
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
) -> Vec<f64> {
    let axis_scale = |n: usize, out_n: usize| {
        if out_n > 1 { (n - 1) as f64 / (out_n - 1) as f64 } else { 0.0 }
    };
    let row_scale = axis_scale(height, out_height);
    let col_scale = axis_scale(width, out_width);
    let mut out = Vec::with_capacity(out_height * out_width);
    for r in 0..out_height {
        let pos = r as f64 * row_scale;
        let r0 = pos.floor() as usize;
        let r1 = (r0 + 1).min(height - 1);
        let fr = pos - r0 as f64;
        for c in 0..out_width {
            let pos = c as f64 * col_scale;
            let c0 = pos.floor() as usize;
            let c1 = (c0 + 1).min(width - 1);
            let fc = pos - c0 as f64;
            let v00 = map[r0 * width + c0];
            let v01 = map[r0 * width + c1];
            let v10 = map[r1 * width + c0];
            let v11 = map[r1 * width + c1];
            let top = v00 + fc * (v01 - v00);
            let bottom = v10 + fc * (v11 - v10);
            out.push(top + fr * (bottom - top));
        }
    }
    out
}

/// Heatmap for one class of one `[1, 3, side, side]` image. An identically
/// zero map (e.g. a dead logit) comes back flagged rather than failing.
pub fn grad_cam(model: &EncoderModel, image: &Tensor, class: usize) -> Result<Heatmap> {
    if class >= NUM_CLASSES {
        return Err(Error::Invalid(format!(
            "class index {class} out of range 0..{NUM_CLASSES}"
        )));
    }
    let mut tape = Tape::new();
    let input = tape.constant(image.shape(), image.data())?;
    let fwd = model.forward(&mut tape, input)?;
    let logit = tape.slice(fwd.logits, 1, class, 1)?;
    tape.backward(logit)?;
    let shape = tape.shape(fwd.feature_map).to_vec();
    let acts = tape.value(fwd.feature_map);
    let grads = tape
        .grad(fwd.feature_map)
        .ok_or_else(|| Error::Tape("no gradient reached the activation maps".into()))?;
    let raw = cam_from_parts(acts, grads, shape[1], shape[2], shape[3])?;

    let (out_h, out_w) = (image.shape()[2], image.shape()[3]);
    let mut values = bilinear_upsample(&raw, shape[2], shape[3], out_h, out_w);
    let max = values.iter().fold(0.0f64, |a, &b| a.max(b));
    let zero = max <= 0.0;
    if !zero {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(Heatmap {
        class,
        height: out_h,
        width: out_w,
        values,
        zero,
        source: None,
    })
}

/// Pixelwise maximum of the five subtype maps, reported as the combined
/// "any" view.
pub fn combined_any_map(subtype_maps: &[Heatmap]) -> Result<Heatmap> {
    let first = subtype_maps
        .first()
        .ok_or_else(|| Error::Invalid("combined map needs at least one input".into()))?;
    let mut values = vec![0.0; first.values.len()];
    for map in subtype_maps {
        if map.height != first.height || map.width != first.width {
            return Err(Error::Shape {
                op: "combined_any_map",
                msg: format!(
                    "{}x{} map mixed with {}x{}",
                    map.height, map.width, first.height, first.width
                ),
            });
        }
        for (v, m) in values.iter_mut().zip(&map.values) {
            *v = f64::max(*v, *m);
        }
    }
    let zero = subtype_maps.iter().all(|m| m.zero);
    Ok(Heatmap {
        class: 0,
        height: first.height,
        width: first.width,
        values,
        zero,
        source: first.source.clone(),
    })
}

/// Intensity-weighted mean `(row, col)` of a nonzero heatmap.
pub fn center_of_mass(map: &Heatmap) -> Result<(f64, f64)> {
    let total: f64 = map.values.iter().sum();
    if map.zero || total <= 0.0 {
        return Err(Error::Invalid(
            "center of mass of an all-zero heatmap".into(),
        ));
    }
    let mut row = 0.0;
    let mut col = 0.0;
    for r in 0..map.height {
        for c in 0..map.width {
            let v = map.at(r, c);
            row += v * r as f64;
            col += v * c as f64;
        }
    }
    Ok((row / total, col / total))
}

// ── Overlays ────────────────────────────────────────────────────────────

const OVERLAY_ALPHA: f64 = 0.4;

/// Heatmap intensity to RGB: blue at 0 through red at 1.
fn colormap(v: f64) -> [f64; 3] {
    [255.0 * v, 0.0, 255.0 * (1.0 - v)]
}

/// Blends the heatmap over the brain-window view of the slice.
pub fn overlay(map: &Heatmap, slice: &HuSlice) -> Result<image::RgbImage> {
    if map.height != slice.height() || map.width != slice.width() {
        return Err(Error::Shape {
            op: "overlay",
            msg: format!(
                "{}x{} heatmap on {}x{} slice",
                map.height,
                map.width,
                slice.height(),
                slice.width()
            ),
        });
    }
    let base = apply_window(slice, &BRAIN_WINDOW);
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for r in 0..map.height {
        for c in 0..map.width {
            let gray = 255.0 * base.data[r * map.width + c];
            let tint = colormap(map.at(r, c));
            let px = std::array::from_fn(|i| {
                ((1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * tint[i]).round() as u8
            });
            img.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// `<scan>_<slice>_<class>.png`
pub fn overlay_filename(scan_id: &str, slice: usize, class: usize) -> String {
    format!("{scan_id}_{slice}_{class}.png")
}

pub fn save_overlay(path: &Path, img: &image::RgbImage) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Invalid(format!("writing {}: {other}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::Rng;
    use rand::{Rng as _, SeedableRng};

    fn tiny_model(seed: u64) -> EncoderModel {
        let config = EncoderConfig {
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            cardinality: 2,
            bottleneck_width: 2,
            embed_dim: 8,
            input_side: 16,
        };
        EncoderModel::build(&config, &mut Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, 3, side, side],
            (0..3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn plain_map(height: usize, width: usize, values: Vec<f64>) -> Heatmap {
        Heatmap { class: 0, height, width, values, zero: false, source: None }
    }

    #[test]
    fn invalid_class_is_rejected() {
        let model = tiny_model(1);
        let image = random_image(16, 2);
        assert!(grad_cam(&model, &image, NUM_CLASSES).is_err());
    }

    #[test]
    fn zero_head_weights_give_flagged_zero_map() {
        let mut model = tiny_model(3);
        model.params_mut().get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let image = random_image(16, 4);
        let map = grad_cam(&model, &image, 2).unwrap();
        assert!(map.zero);
        assert_eq!(map.values.len(), 16 * 16);
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert!(center_of_mass(&map).is_err());
    }

    #[test]
    fn nonzero_map_peaks_at_exactly_one() {
        let model = tiny_model(5);
        let image = random_image(16, 6);
        for class in 0..NUM_CLASSES {
            let map = grad_cam(&model, &image, class).unwrap();
            assert!(!map.zero, "class {class} map vanished");
            let max = map.values.iter().fold(0.0f64, |a, &b| a.max(b));
            assert_eq!(max, 1.0);
            assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn uniform_head_row_reduces_to_channel_sum() {
        // With head row t all ones, every channel weight is the same
        // positive constant, so the normalized map must equal the
        // normalized upsampled channel sum of the activations.
        let mut model = tiny_model(7);
        {
            let w = model.params_mut().get_mut("head.weight").unwrap();
            let cols = w.shape()[1];
            w.data_mut()[3 * cols..4 * cols].fill(1.0);
        }
        let image = random_image(16, 8);
        let map = grad_cam(&model, &image, 3).unwrap();

        let mut tape = Tape::new();
        let input = tape.constant(image.shape(), image.data()).unwrap();
        let fwd = model.forward(&mut tape, input).unwrap();
        let shape = tape.shape(fwd.feature_map).to_vec();
        let acts = tape.value(fwd.feature_map);
        let hw = shape[2] * shape[3];
        let mut sum = vec![0.0; hw];
        for k in 0..shape[1] {
            for (s, a) in sum.iter_mut().zip(&acts[k * hw..(k + 1) * hw]) {
                *s += a;
            }
        }
        let mut want = bilinear_upsample(&sum, shape[2], shape[3], 16, 16);
        let max = want.iter().fold(0.0f64, |a, &b| a.max(b));
        assert!(max > 0.0);
        for w in &mut want {
            *w /= max;
        }
        for (a, b) in map.values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn positive_activation_scaling_leaves_normalized_map_unchanged() {
        let mut rng = Rng::seed_from_u64(9);
        let (c, h, w) = (3, 4, 5);
        let acts: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Mixed-sign channel weights, but at least one positive so the
        // rectified map cannot vanish.
        let mut grads: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for g in &mut grads[..h * w] {
            *g = g.abs();
        }
        let normalize = |mut m: Vec<f64>| {
            let max = m.iter().fold(0.0f64, |a, &b| a.max(b));
            assert!(max > 0.0);
            for v in &mut m {
                *v /= max;
            }
            m
        };
        let base = normalize(cam_from_parts(&acts, &grads, c, h, w).unwrap());
        let scaled_acts: Vec<f64> = acts.iter().map(|a| a * 3.7).collect();
        let scaled = normalize(cam_from_parts(&scaled_acts, &grads, c, h, w).unwrap());
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_cam_is_deterministic() {
        let model = tiny_model(10);
        let image = random_image(16, 11);
        let a = grad_cam(&model, &image, 1).unwrap();
        let b = grad_cam(&model, &image, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn combined_map_is_pixelwise_max() {
        let a = plain_map(2, 2, vec![0.1, 0.9, 0.0, 0.4]);
        let b = plain_map(2, 2, vec![0.5, 0.2, 0.0, 0.8]);
        let any = combined_any_map(&[a, b]).unwrap();
        assert_eq!(any.class, 0);
        assert_eq!(any.values, vec![0.5, 0.9, 0.0, 0.8]);
        assert!(!any.zero);

        let z1 = Heatmap { zero: true, ..plain_map(2, 2, vec![0.0; 4]) };
        let z2 = Heatmap { zero: true, ..plain_map(2, 2, vec![0.0; 4]) };
        assert!(combined_any_map(&[z1, z2]).unwrap().zero);
        let short = plain_map(1, 2, vec![0.0, 0.0]);
        let tall = plain_map(2, 1, vec![0.0, 0.0]);
        assert!(combined_any_map(&[short, tall]).is_err());
    }

    #[test]
    fn center_of_mass_hand_cases() {
        let mut values = vec![0.0; 8 * 12];
        values[3 * 12 + 7] = 0.5;
        let single = plain_map(8, 12, values);
        assert_eq!(center_of_mass(&single).unwrap(), (3.0, 7.0));

        let uniform = plain_map(5, 9, vec![0.25; 45]);
        assert_eq!(center_of_mass(&uniform).unwrap(), (2.0, 4.0));

        let mut values = vec![0.0; 11];
        values[0] = 0.5;
        values[10] = 0.5;
        let pair = plain_map(1, 11, values);
        assert_eq!(center_of_mass(&pair).unwrap(), (0.0, 5.0));
    }

    #[test]
    fn upsample_reproduces_constants_and_ramps() {
        let flat = bilinear_upsample(&vec![0.7; 9], 3, 3, 7, 7);
        assert!(flat.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        // v(r, c) = 2r + c on a 2x2 grid; bilinear is exact on it.
        let ramp = bilinear_upsample(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        for r in 0..4 {
            for c in 0..4 {
                let want = 2.0 * (r as f64 / 3.0) + c as f64 / 3.0;
                assert!((ramp[r * 4 + c] - want).abs() < 1e-15);
            }
        }

        let same = bilinear_upsample(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2, 2);
        assert_eq!(same, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn overlay_tints_and_peaks() {
        let slice = HuSlice::new(8, 8, vec![40; 64]).unwrap(); // brain window -> 0.5
        let gray: f64 = 255.0 * 0.5;

        let flat = Heatmap { zero: true, ..plain_map(8, 8, vec![0.0; 64]) };
        let img = overlay(&flat, &slice).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
        let zero_color = image::Rgb([
            (0.6 * gray).round() as u8,
            (0.6 * gray).round() as u8,
            (0.6 * gray + 0.4 * 255.0).round() as u8,
        ]);
        assert!(img.pixels().all(|p| *p == zero_color));

        let mut values = vec![0.0; 64];
        values[2 * 8 + 3] = 1.0;
        let peak = plain_map(8, 8, values);
        let img = overlay(&peak, &slice).unwrap();
        let top = img.get_pixel(3, 2);
        assert_eq!(
            *top,
            image::Rgb([
                (0.6 * gray + 0.4 * 255.0).round() as u8,
                (0.6 * gray).round() as u8,
                (0.6 * gray).round() as u8,
            ])
        );
        assert_eq!(*img.get_pixel(0, 0), zero_color);

        let wrong = HuSlice::new(9, 8, vec![40; 72]).unwrap();
        assert!(overlay(&peak, &wrong).is_err());
    }

    #[test]
    fn overlay_files_round_trip() {
        assert_eq!(overlay_filename("scan0003", 7, 2), "scan0003_7_2.png");
        let dir = tempfile::tempdir().unwrap();
        let slice = HuSlice::new(8, 8, vec![0; 64]).unwrap();
        let map = plain_map(8, 8, (0..64).map(|i| i as f64 / 63.0).collect());
        let img = overlay(&map, &slice).unwrap();
        let path = dir.path().join(overlay_filename("s", 0, 1));
        save_overlay(&path, &img).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (8, 8));
        assert_eq!(back.get_pixel(5, 5), img.get_pixel(5, 5));
    }
}

//! Activation-guided training (patch crop / patch drop) and distillation
//! inference.
//!
//! During training each sample's randomly chosen head activation map picks
//! a region of interest: the crop pass zooms into it, the drop pass erases
//! it, and the mean of the three pass losses is backpropagated once. At
//! test time the head-averaged map of the predicted class crops the region
//! whose fine-grained prediction is averaged with the coarse one.

use crate::dataio::Sample;
use crate::loss::spread_loss;
use crate::model::{Decaps, Leaves, ModelError};
use crate::raster::{bilinear_plane, GrayImage};
use crate::rng::Rng;
use crate::routing::average_ham;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum PeekabooError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("{got} labels for a batch of {expected}")]
    LabelCount { got: usize, expected: usize },
}

/// Signals an all-zero crop mask; callers fall back to the full image.
#[derive(Debug, Clone, Copy, thiserror::Error)]
#[error("region of interest is empty (all-zero mask)")]
pub struct EmptyRoi;

/// A head activation map rescaled to [0, 1]; a constant map becomes all
/// zeros (crop falls back to the full image, drop removes nothing).
#[derive(Debug, Clone)]
pub struct NormalizedHam {
    pub map: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

pub fn normalize_ham(map: &[f64], height: usize, width: usize) -> NormalizedHam {
    debug_assert_eq!(map.len(), height * width);
    debug_assert!(map.iter().all(|&v| v >= 0.0));
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = if max > min {
        map.iter().map(|&v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; map.len()]
    };
    NormalizedHam {
        map: out,
        height,
        width,
    }
}

/// Binary crop mask: 1 where the normalized map reaches `theta_c`.
pub fn crop_mask(ham: &NormalizedHam, theta_c: f64) -> Result<Vec<bool>, PeekabooError> {
    if !(0.0..=1.0).contains(&theta_c) {
        return Err(PeekabooError::Threshold(theta_c));
    }
    Ok(ham.map.iter().map(|&v| v >= theta_c).collect())
}

/// Minimal box covering every set mask cell, with the pixel-space box
/// scaled outward (floor / ceil) and clamped to the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
    /// Half-open pixel rows [px_row_min, px_row_end)
    pub px_row_min: usize,
    pub px_col_min: usize,
    pub px_row_end: usize,
    pub px_col_end: usize,
}

impl RoiBox {
    pub fn pixel_center(&self) -> (f64, f64) {
        (
            (self.px_row_min + self.px_row_end) as f64 / 2.0,
            (self.px_col_min + self.px_col_end) as f64 / 2.0,
        )
    }

    pub fn covers_full_grid(&self, h: usize, w: usize) -> bool {
        self.row_min == 0 && self.col_min == 0 && self.row_max == h - 1 && self.col_max == w - 1
    }
}

/// Tight bounding box over the mask, scaled into an `image_size`-square
/// pixel frame.
pub fn min_bbox(
    mask: &[bool],
    height: usize,
    width: usize,
    image_size: usize,
) -> Result<RoiBox, EmptyRoi> {
    debug_assert_eq!(mask.len(), height * width);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..height {
        for c in 0..width {
            if mask[r * width + c] {
                bounds = Some(match bounds {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
    }
    let (row_min, col_min, row_max, col_max) = bounds.ok_or(EmptyRoi)?;
    let scale_r = image_size as f64 / height as f64;
    let scale_c = image_size as f64 / width as f64;
    Ok(RoiBox {
        row_min,
        col_min,
        row_max,
        col_max,
        px_row_min: (row_min as f64 * scale_r).floor() as usize,
        px_col_min: (col_min as f64 * scale_c).floor() as usize,
        px_row_end: (((row_max + 1) as f64 * scale_r).ceil() as usize).min(image_size),
        px_col_end: (((col_max + 1) as f64 * scale_c).ceil() as usize).min(image_size),
    })
}

/// Extract the pixel box and bilinearly resize it to the network input.
pub fn patch_crop(image: &GrayImage, roi: &RoiBox, out_size: usize) -> GrayImage {
    image
        .crop(roi.px_row_min, roi.px_col_min, roi.px_row_end, roi.px_col_end)
        .resize(out_size, out_size)
}

/// Zero every pixel whose bilinearly upsampled normalized activation
/// reaches `theta_d`; everything else is copied bit-identically.
pub fn patch_drop(
    image: &GrayImage,
    ham: &NormalizedHam,
    theta_d: f64,
) -> Result<GrayImage, PeekabooError> {
    if !(0.0..=1.0).contains(&theta_d) {
        return Err(PeekabooError::Threshold(theta_d));
    }
    let mut up = vec![0.0f64; image.width * image.height];
    bilinear_plane(
        &ham.map,
        ham.height,
        ham.width,
        &mut up,
        image.height,
        image.width,
    );
    let mut out = image.clone();
    for (dst, &u) in out.pixels.iter_mut().zip(&up) {
        if u >= theta_d {
            *dst = 0.0;
        }
    }
    Ok(out)
}

/// Per-class prediction vectors from the coarse and fine passes plus their
/// distilled average; the decision is the argmax of the distilled norms.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub coarse: Vec<Vec<f64>>,
    pub fine: Vec<Vec<f64>>,
    pub distilled: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub predicted: usize,
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl PredictionSet {
    /// Distill coarse and fine pose vectors: the vector average precedes
    /// the norm.
    pub fn from_poses(coarse: Vec<Vec<f64>>, fine: Vec<Vec<f64>>) -> PredictionSet {
        assert_eq!(coarse.len(), fine.len());
        let distilled: Vec<Vec<f64>> = coarse
            .iter()
            .zip(&fine)
            .map(|(c, f)| c.iter().zip(f).map(|(a, b)| (a + b) / 2.0).collect())
            .collect();
        let scores: Vec<f64> = distilled.iter().map(|v| vec_norm(v)).collect();
        let predicted = argmax(&scores);
        PredictionSet {
            coarse,
            fine,
            distilled,
            scores,
            predicted,
        }
    }

    pub fn coarse_scores(&self) -> Vec<f64> {
        self.coarse.iter().map(|v| vec_norm(v)).collect()
    }

    pub fn fine_scores(&self) -> Vec<f64> {
        self.fine.iter().map(|v| vec_norm(v)).collect()
    }
}

/// Stack host images into a `[N, 1, S, S]` batch tensor.
pub fn image_batch<F: Scalar>(images: &[GrayImage]) -> Result<Tensor<F>, PeekabooError> {
    if images.is_empty() {
        return Err(PeekabooError::EmptyBatch);
    }
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        debug_assert_eq!((img.height, img.width), (h, w));
        data.extend(img.pixels.iter().map(|&v| F::cast_from(v)));
    }
    Ok(Tensor::from_vec(vec![images.len(), 1, h, w], data)?)
}

/// Pull one (sample, head, class) activation map out of the batched HAM
/// tensor as host floats.
fn ham_slice<F: Scalar>(
    maps: &Tensor<F>,
    sample: usize,
    head: usize,
    class: usize,
) -> (Vec<f64>, usize, usize) {
    let s = maps.shape(); // [N, heads, classes, h, w]
    let (heads, classes, h, w) = (s[1], s[2], s[3], s[4]);
    let base = (((sample * heads) + head) * classes + class) * h * w;
    let data = maps.data();
    (
        data[base..base + h * w].iter().map(|v| v.cast_f64()).collect(),
        h,
        w,
    )
}

/// Crop geometry for one sample from one normalized map; falls back to the
/// full image on an empty region.
fn crop_from_map(
    image: &GrayImage,
    ham: &NormalizedHam,
    theta_c: f64,
    input_size: usize,
) -> Result<(GrayImage, Option<RoiBox>), PeekabooError> {
    let mask = crop_mask(ham, theta_c)?;
    match min_bbox(&mask, ham.height, ham.width, image.height) {
        Ok(roi) => Ok((patch_crop(image, &roi, input_size), Some(roi))),
        Err(EmptyRoi) => Ok((image.resize(input_size, input_size), None)),
    }
}

/// Losses and bound leaves from one training step.
pub struct StepOutcome<F: Scalar> {
    pub total_loss: f64,
    pub coarse_loss: f64,
    pub crop_loss: f64,
    pub drop_loss: f64,
    pub leaves: Leaves<F>,
}

/// Intermediates captured by the detailed variant (testing and debugging).
pub struct StepDetails {
    pub head_choices: Vec<usize>,
    pub crop_inputs: Vec<GrayImage>,
    pub drop_inputs: Vec<GrayImage>,
}

fn check_batch(images: &[GrayImage], labels: &[usize]) -> Result<(), PeekabooError> {
    if images.is_empty() {
        return Err(PeekabooError::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(PeekabooError::LabelCount {
            got: labels.len(),
            expected: images.len(),
        });
    }
    Ok(())
}

/// One peekaboo training step: coarse, crop, and drop passes, one backward
/// pass on the mean of the three spread losses. The random head index is
/// drawn per sample in batch order.
pub fn peekaboo_train_step<F: Scalar>(
    model: &mut Decaps<F>,
    images: &[GrayImage],
    labels: &[usize],
    margin: f64,
    rng: &mut Rng,
) -> Result<StepOutcome<F>, PeekabooError> {
    let (outcome, _) = peekaboo_train_step_detailed(model, images, labels, margin, rng)?;
    Ok(outcome)
}

pub fn peekaboo_train_step_detailed<F: Scalar>(
    model: &mut Decaps<F>,
    images: &[GrayImage],
    labels: &[usize],
    margin: f64,
    rng: &mut Rng,
) -> Result<(StepOutcome<F>, StepDetails), PeekabooError> {
    check_batch(images, labels)?;
    let input_size = model.config.input_size;
    let theta_c = model.config.crop_threshold;
    let theta_d = model.config.drop_threshold;
    let heads = model.config.conv2_heads;

    let leaves = model.bind()?;
    let coarse_batch = image_batch::<F>(images)?;
    let coarse = model.forward_train(&leaves, &coarse_batch)?;

    let mut head_choices = Vec::with_capacity(images.len());
    let mut crop_inputs = Vec::with_capacity(images.len());
    let mut drop_inputs = Vec::with_capacity(images.len());
    for (s, (img, &label)) in images.iter().zip(labels).enumerate() {
        let head = rng.below(heads);
        head_choices.push(head);
        let (raw, h, w) = ham_slice(&coarse.hams.maps, s, head, label);
        let ham = normalize_ham(&raw, h, w);
        let (cropped, _) = crop_from_map(img, &ham, theta_c, input_size)?;
        crop_inputs.push(cropped);
        drop_inputs.push(patch_drop(img, &ham, theta_d)?);
    }

    let fine = model.forward_train(&leaves, &image_batch::<F>(&crop_inputs)?)?;
    let dropped = model.forward_train(&leaves, &image_batch::<F>(&drop_inputs)?)?;

    let l_coarse = spread_loss(&coarse.activations, labels, margin)?;
    let l_crop = spread_loss(&fine.activations, labels, margin)?;
    let l_drop = spread_loss(&dropped.activations, labels, margin)?;
    let third = F::cast_from(1.0 / 3.0);
    let total = l_coarse.add(&l_crop)?.add(&l_drop)?.scale(third)?;
    total.check_finite("peekaboo total loss")?;
    total.backward()?;

    Ok((
        StepOutcome {
            total_loss: total.item().cast_f64(),
            coarse_loss: l_coarse.item().cast_f64(),
            crop_loss: l_crop.item().cast_f64(),
            drop_loss: l_drop.item().cast_f64(),
            leaves,
        },
        StepDetails {
            head_choices,
            crop_inputs,
            drop_inputs,
        },
    ))
}

/// Plain training step: one coarse pass, one backward pass.
pub fn coarse_train_step<F: Scalar>(
    model: &mut Decaps<F>,
    images: &[GrayImage],
    labels: &[usize],
    margin: f64,
) -> Result<StepOutcome<F>, PeekabooError> {
    check_batch(images, labels)?;
    let leaves = model.bind()?;
    let batch = image_batch::<F>(images)?;
    let out = model.forward_train(&leaves, &batch)?;
    let loss = spread_loss(&out.activations, labels, margin)?;
    loss.check_finite("coarse loss")?;
    loss.backward()?;
    let v = loss.item().cast_f64();
    Ok(StepOutcome {
        total_loss: v,
        coarse_loss: v,
        crop_loss: 0.0,
        drop_loss: 0.0,
        leaves,
    })
}

/// Distillation artifacts for one sample (visualization hooks).
pub struct DistillOutcome {
    pub prediction: PredictionSet,
    /// Head-averaged coarse map of the predicted class, raw values.
    pub coarse_map: (Vec<f64>, usize, usize),
    pub roi: Option<RoiBox>,
    pub cropped: GrayImage,
    /// Head-averaged fine-pass map of the same class (None when the fine
    /// pass degenerated to the coarse prediction).
    pub fine_map: Option<(Vec<f64>, usize, usize)>,
}

fn poses_of<F: Scalar>(class_poses: &Tensor<F>, sample: usize) -> Vec<Vec<f64>> {
    let s = class_poses.shape(); // [N, classes, d]
    let (classes, d) = (s[1], s[2]);
    let data = class_poses.data();
    (0..classes)
        .map(|j| {
            let base = (sample * classes + j) * d;
            data[base..base + d].iter().map(|v| v.cast_f64()).collect()
        })
        .collect()
}

/// Batched distillation inference. Per image: coarse pass, crop guided by
/// the head-averaged map of the coarse argmax class, fine pass on the
/// crop, prediction from the averaged pose vectors. No patch drop at test
/// time. An empty region degenerates the fine prediction to the coarse
/// one.
pub fn distill_infer_batch<F: Scalar>(
    model: &Decaps<F>,
    images: &[GrayImage],
) -> Result<Vec<DistillOutcome>, PeekabooError> {
    if images.is_empty() {
        return Err(PeekabooError::EmptyBatch);
    }
    let input_size = model.config.input_size;
    let theta_c = model.config.crop_threshold;
    let coarse = model.forward_eval(&image_batch::<F>(images)?)?;

    struct PerSample {
        coarse_poses: Vec<Vec<f64>>,
        coarse_map: (Vec<f64>, usize, usize),
        roi: Option<RoiBox>,
        cropped: GrayImage,
        coarse_class: usize,
    }

    let mut staged = Vec::with_capacity(images.len());
    let mut fine_indices = Vec::new();
    let mut fine_images = Vec::new();
    for (s, img) in images.iter().enumerate() {
        let coarse_poses = poses_of(&coarse.class_poses, s);
        let coarse_class = argmax(
            &coarse_poses
                .iter()
                .map(|v| vec_norm(v))
                .collect::<Vec<_>>(),
        );
        let avg = average_ham(&coarse.hams, coarse_class)?;
        let (h, w) = (avg.shape()[1], avg.shape()[2]);
        let raw: Vec<f64> = avg.data()[s * h * w..(s + 1) * h * w]
            .iter()
            .map(|v| v.cast_f64())
            .collect();
        let ham = normalize_ham(&raw, h, w);
        let mask = crop_mask(&ham, theta_c)?;
        let (roi, cropped) = match min_bbox(&mask, h, w, img.height) {
            Ok(roi) => {
                let cropped = patch_crop(img, &roi, input_size);
                fine_indices.push(s);
                fine_images.push(cropped.clone());
                (Some(roi), cropped)
            }
            Err(EmptyRoi) => (None, img.resize(input_size, input_size)),
        };
        staged.push(PerSample {
            coarse_poses,
            coarse_map: (raw, h, w),
            roi,
            cropped,
            coarse_class,
        });
    }

    let fine_out = if fine_images.is_empty() {
        None
    } else {
        Some(model.forward_eval(&image_batch::<F>(&fine_images)?)?)
    };

    let mut out = Vec::with_capacity(images.len());
    for (s, st) in staged.into_iter().enumerate() {
        let fine_pos = fine_indices.iter().position(|&i| i == s);
        let (fine_poses, fine_map) = match (fine_pos, &fine_out) {
            (Some(fp), Some(fo)) => {
                let poses = poses_of(&fo.class_poses, fp);
                let avg = average_ham(&fo.hams, st.coarse_class)?;
                let (h, w) = (avg.shape()[1], avg.shape()[2]);
                let raw: Vec<f64> = avg.data()[fp * h * w..(fp + 1) * h * w]
                    .iter()
                    .map(|v| v.cast_f64())
                    .collect();
                (poses, Some((raw, h, w)))
            }
            _ => (st.coarse_poses.clone(), None),
        };
        out.push(DistillOutcome {
            prediction: PredictionSet::from_poses(st.coarse_poses, fine_poses),
            coarse_map: st.coarse_map,
            roi: st.roi,
            cropped: st.cropped,
            fine_map,
        });
    }
    Ok(out)
}

/// Single-image distillation.
pub fn distill_infer<F: Scalar>(
    model: &Decaps<F>,
    image: &GrayImage,
) -> Result<DistillOutcome, PeekabooError> {
    Ok(distill_infer_batch(model, std::slice::from_ref(image))?
        .pop()
        .unwrap())
}

/// Convenience: run distillation over samples in fixed-size batches.
pub fn distill_over<F: Scalar>(
    model: &Decaps<F>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<DistillOutcome>, PeekabooError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<GrayImage> = chunk.iter().map(|s| s.image.clone()).collect();
        out.extend(distill_infer_batch(model, &images)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let n = normalize_ham(&[0.0, 2.0, 4.0, 8.0], 2, 2);
        assert_eq!(n.map, vec![0.0, 0.25, 0.5, 1.0]);
        let c = normalize_ham(&[3.0, 3.0, 3.0, 3.0], 2, 2);
        assert_eq!(c.map, vec![0.0; 4]);
        let already = normalize_ham(&[0.0, 0.5, 1.0, 0.25], 2, 2);
        assert_eq!(already.map, vec![0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn crop_mask_thresholds() {
        let n = normalize_ham(&[0.0, 2.0, 4.0, 8.0], 2, 2);
        assert_eq!(crop_mask(&n, 0.0).unwrap(), vec![true; 4]);
        assert_eq!(
            crop_mask(&n, 0.5).unwrap(),
            vec![false, false, true, true]
        );
        assert_eq!(
            crop_mask(&n, 1.0).unwrap(),
            vec![false, false, false, true]
        );
        assert!(crop_mask(&n, 1.5).is_err());
    }

    #[test]
    fn crop_mask_monotone_in_threshold() {
        let mut rng = Rng::seed_from(4);
        let raw: Vec<f64> = (0..36).map(|_| rng.next_f64()).collect();
        let n = normalize_ham(&raw, 6, 6);
        let mut prev = crop_mask(&n, 0.0).unwrap();
        for k in 1..=10 {
            let cur = crop_mask(&n, k as f64 / 10.0).unwrap();
            for (p, c) in prev.iter().zip(&cur) {
                assert!(*p || !*c, "raising the threshold must never add ones");
            }
            prev = cur;
        }
    }

    #[test]
    fn bbox_point_and_spread() {
        let mut mask = vec![false; 16];
        mask[2 * 4 + 1] = true;
        let b = min_bbox(&mask, 4, 4, 4).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (2, 1, 2, 1));

        // ones at (1,1) and (3,2) -> box (1,1,3,2)
        let mut mask = vec![false; 16];
        mask[1 * 4 + 1] = true;
        mask[3 * 4 + 2] = true;
        let b = min_bbox(&mask, 4, 4, 4).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (1, 1, 3, 2));

        let full = min_bbox(&vec![true; 16], 4, 4, 4).unwrap();
        assert!(full.covers_full_grid(4, 4));

        assert!(min_bbox(&vec![false; 16], 4, 4, 4).is_err());
    }

    #[test]
    fn bbox_pixel_scaling_example() {
        // grid box (10,10)-(12,12) on a 24-wide map, 448 input:
        // floor(10*448/24)=186, ceil(13*448/24)=243
        let mut mask = vec![false; 24 * 24];
        for r in 10..=12 {
            for c in 10..=12 {
                mask[r * 24 + c] = true;
            }
        }
        let b = min_bbox(&mask, 24, 24, 448).unwrap();
        assert_eq!(b.px_row_min, 186);
        assert_eq!(b.px_col_min, 186);
        assert_eq!(b.px_row_end, 243);
        assert_eq!(b.px_col_end, 243);
    }

    #[test]
    fn patch_crop_full_box_is_identity() {
        let mut rng = Rng::seed_from(9);
        let img = GrayImage::from_pixels(8, 8, (0..64).map(|_| rng.next_f64()).collect());
        let roi = min_bbox(&vec![true; 4], 2, 2, 8).unwrap();
        let out = patch_crop(&img, &roi, 8);
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn patch_crop_half_box_doubles_ramp_slope() {
        // Column-linear ramp; cropping the center half and resizing back
        // doubles the per-pixel gradient. Compare against direct bilinear
        // evaluation of the crop.
        let w = 16usize;
        let img = GrayImage::from_pixels(
            w,
            w,
            (0..w * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect(),
        );
        let roi = RoiBox {
            row_min: 0,
            col_min: 0,
            row_max: 0,
            col_max: 0,
            px_row_min: 4,
            px_col_min: 4,
            px_row_end: 12,
            px_col_end: 12,
        };
        let out = patch_crop(&img, &roi, w);
        // direct oracle in the crop's frame: src = (c + 0.5) * 8/16 - 0.5,
        // edge-clamped to [0, 7], then value = ramp(4 + interpolated src)
        for c in 0..w {
            let src = ((c as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 7.0);
            let lo = src.floor();
            let frac = src - lo;
            let ramp = |x: f64| x / (w - 1) as f64;
            let want =
                ramp(4.0 + lo) * (1.0 - frac) + ramp(4.0 + (lo + 1.0).min(7.0)) * frac;
            assert!((out.get(7, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_drop_threshold_extremes() {
        let img = GrayImage::from_pixels(4, 4, vec![0.5; 16]);
        let ham = normalize_ham(&[0.0, 1.0, 0.5, 0.25], 2, 2);
        let all = patch_drop(&img, &ham, 0.0).unwrap();
        assert!(all.pixels.iter().all(|&v| v == 0.0));

        let only_max = patch_drop(&img, &ham, 1.0).unwrap();
        let mut up = vec![0.0; 16];
        bilinear_plane(&ham.map, 2, 2, &mut up, 4, 4);
        for (v, u) in only_max.pixels.iter().zip(&up) {
            assert_eq!(*v == 0.0, *u >= 1.0);
        }
    }

    #[test]
    fn patch_drop_touches_exactly_thresholded_pixels() {
        let mut rng = Rng::seed_from(21);
        let img = GrayImage::from_pixels(12, 12, (0..144).map(|_| 0.1 + 0.8 * rng.next_f64()).collect());
        let raw: Vec<f64> = (0..9).map(|_| rng.next_f64()).collect();
        let ham = normalize_ham(&raw, 3, 3);
        let out = patch_drop(&img, &ham, 0.3).unwrap();
        let mut up = vec![0.0; 144];
        bilinear_plane(&ham.map, 3, 3, &mut up, 12, 12);
        for i in 0..144 {
            if up[i] >= 0.3 {
                assert_eq!(out.pixels[i], 0.0);
            } else {
                assert_eq!(out.pixels[i].to_bits(), img.pixels[i].to_bits());
            }
        }
    }

    #[test]
    fn distilled_vectors_average_before_norm() {
        // opposing pose vectors cancel: distilled score is 0, not 1
        let coarse = vec![vec![1.0, 0.0], vec![0.2, 0.0]];
        let fine = vec![vec![-1.0, 0.0], vec![0.6, 0.0]];
        let p = PredictionSet::from_poses(coarse, fine);
        assert!(p.scores[0].abs() < 1e-15);
        assert!((p.scores[1] - 0.4).abs() < 1e-15);
        assert_eq!(p.predicted, 1);
    }

    #[test]
    fn distill_identity_when_fine_equals_coarse() {
        let coarse = vec![vec![0.2, 0.1], vec![0.8, 0.0]];
        let p = PredictionSet::from_poses(coarse.clone(), coarse.clone());
        for (d, c) in p.distilled.iter().zip(&coarse) {
            assert_eq!(d, c);
        }
        assert_eq!(p.predicted, 1);
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let coarse = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let fine = vec![vec![0.1, 0.3], vec![0.5, 0.2]];
        let p1 = PredictionSet::from_poses(coarse.clone(), fine.clone());
        let scale = |v: &Vec<Vec<f64>>| {
            v.iter()
                .map(|x| x.iter().map(|&a| 3.5 * a).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let p2 = PredictionSet::from_poses(scale(&coarse), scale(&fine));
        assert_eq!(p1.predicted, p2.predicted);
    }
}

//! Inference-time controls on the fused feature map `F_csc^m`.
//!
//! All three controls blend feature maps before decoding. Blends are
//! evaluated in f64 and rounded once, and terms with weight exactly zero are
//! skipped, so a weight of one reproduces its input bit for bit.

use std::path::Path;

use thiserror::Error;

use crate::image_io::{read_ppm_file, Image, ImageError};
use crate::network::{FeatureMap, Level, NetworkError, TransformNet, DECODER_SCALE};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stride of the level-A features relative to the image.
pub const MASK_STRIDE: usize = DECODER_SCALE;
/// Slack allowed when checking that blend weights sum to one.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("weights are not convex: {0}")]
    NonConvexWeights(String),
    #[error("{items} styles but {given} {what}")]
    CountMismatch {
        items: usize,
        given: usize,
        what: &'static str,
    },
    #[error("at least one style is required")]
    NoStyles,
    #[error("masks do not partition the image: {count} masks cover feature position ({x}, {y})")]
    NotPartition { x: usize, y: usize, count: usize },
    #[error("mask {index} is {width}x{height}, expected {expected_width}x{expected_height}")]
    MaskExtent {
        index: usize,
        width: usize,
        height: usize,
        expected_width: usize,
        expected_height: usize,
    },
    #[error("feature maps to blend have different shapes")]
    ShapeMismatch,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn check_convex(weights: &[f64]) -> Result<(), ControlError> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(ControlError::NonConvexWeights(format!(
            "negative or non-finite weight {w}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(ControlError::NonConvexWeights(format!(
            "weights sum to {sum}"
        )));
    }
    Ok(())
}

/// `Σ_k w_k · maps_k` evaluated per element in f64.
pub fn blend<T: Scalar>(
    maps: &[&FeatureMap<T>],
    weights: &[f64],
) -> Result<FeatureMap<T>, ControlError> {
    let first = maps.first().ok_or(ControlError::NoStyles)?;
    if maps.len() != weights.len() {
        return Err(ControlError::CountMismatch {
            items: maps.len(),
            given: weights.len(),
            what: "weights",
        });
    }
    if maps
        .iter()
        .any(|m| m.tensor.shape() != first.tensor.shape() || m.level != first.level)
    {
        return Err(ControlError::ShapeMismatch);
    }
    let data = (0..first.tensor.numel())
        .map(|i| {
            let acc = maps.iter().zip(weights).filter(|(_, &w)| w != 0.0).fold(
                None,
                |acc: Option<f64>, (m, &w)| {
                    let term = w * m.tensor.data()[i].to_f64_lossless();
                    Some(acc.map_or(term, |a| a + term))
                },
            );
            T::from_f64_lossy(acc.unwrap_or(0.0))
        })
        .collect();
    Ok(FeatureMap::new(
        Tensor::new(first.tensor.shape(), data).expect("same shape"),
        first.level,
    ))
}

fn decode_image<T: Scalar>(
    net: &TransformNet<T>,
    f: &FeatureMap<T>,
) -> Result<Image, ControlError> {
    Ok(Image::from_tensor(&net.decode(f)?)?)
}

fn fused<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    style: &Image,
) -> Result<FeatureMap<T>, ControlError> {
    Ok(net.stylized_features(&content.to_tensor(), &style.to_tensor())?)
}

/// `α·F_csc^m + (1 − α)·F_ccc^m`.
pub fn tradeoff_features<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    style: &Image,
    alpha: f64,
) -> Result<FeatureMap<T>, ControlError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ControlError::AlphaOutOfRange(alpha));
    }
    let csc = fused(net, content, style)?;
    let ccc = fused(net, content, content)?;
    blend(&[&csc, &ccc], &[alpha, 1.0 - alpha])
}

pub fn tradeoff<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    style: &Image,
    alpha: f64,
) -> Result<Image, ControlError> {
    decode_image(net, &tradeoff_features(net, content, style, alpha)?)
}

/// Convex combination of the fused maps of several styles.
pub fn style_interpolate_features<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    styles: &[Image],
    weights: &[f64],
) -> Result<FeatureMap<T>, ControlError> {
    if styles.is_empty() {
        return Err(ControlError::NoStyles);
    }
    if styles.len() != weights.len() {
        return Err(ControlError::CountMismatch {
            items: styles.len(),
            given: weights.len(),
            what: "weights",
        });
    }
    check_convex(weights)?;
    let maps = styles
        .iter()
        .map(|s| fused(net, content, s))
        .collect::<Result<Vec<_>, _>>()?;
    blend(&maps.iter().collect::<Vec<_>>(), weights)
}

pub fn style_interpolate<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    styles: &[Image],
    weights: &[f64],
) -> Result<Image, ControlError> {
    decode_image(
        net,
        &style_interpolate_features(net, content, styles, weights)?,
    )
}

/// Binary masks at level-A resolution that partition the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    /// Masks given as row-major `width × height` feature-grid cells.
    pub fn new(width: usize, height: usize, masks: Vec<Vec<bool>>) -> Result<Self, ControlError> {
        if masks.is_empty() {
            return Err(ControlError::NoStyles);
        }
        for (index, m) in masks.iter().enumerate() {
            if m.len() != width * height {
                return Err(ControlError::MaskExtent {
                    index,
                    width: m.len(),
                    height: 1,
                    expected_width: width * height,
                    expected_height: 1,
                });
            }
        }
        for y in 0..height {
            for x in 0..width {
                let count = masks.iter().filter(|m| m[y * width + x]).count();
                if count != 1 {
                    return Err(ControlError::NotPartition { x, y, count });
                }
            }
        }
        Ok(Self {
            width,
            height,
            masks,
        })
    }

    /// Image-resolution masks (nonzero red means inside), point-sampled every
    /// [`MASK_STRIDE`] pixels starting at the top-left pixel.
    pub fn from_images(
        images: &[Image],
        width: usize,
        height: usize,
    ) -> Result<Self, ControlError> {
        let (fw, fh) = (width / MASK_STRIDE, height / MASK_STRIDE);
        let masks = images
            .iter()
            .enumerate()
            .map(|(index, img)| {
                if img.width() != width || img.height() != height {
                    return Err(ControlError::MaskExtent {
                        index,
                        width: img.width(),
                        height: img.height(),
                        expected_width: width,
                        expected_height: height,
                    });
                }
                Ok((0..fh * fw)
                    .map(|i| {
                        let (y, x) = (i / fw, i % fw);
                        img.pixel(x * MASK_STRIDE, y * MASK_STRIDE)[0] > 0.0
                    })
                    .collect())
            })
            .collect::<Result<Vec<Vec<bool>>, _>>()?;
        Self::new(fw, fh, masks)
    }

    pub fn from_ppm_files(
        paths: &[&Path],
        width: usize,
        height: usize,
    ) -> Result<Self, ControlError> {
        let images = paths
            .iter()
            .map(|p| read_ppm_file(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_images(&images, width, height)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Feature-grid extents `(width, height)`.
    pub fn extents(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mask(&self, k: usize) -> &[bool] {
        &self.masks[k]
    }

    /// Index of the mask covering feature cell `(x, y)`.
    pub fn owner(&self, x: usize, y: usize) -> usize {
        let i = y * self.width + x;
        self.masks
            .iter()
            .position(|m| m[i])
            .expect("partition checked")
    }
}

/// `Σ_k M_k ⊙ F_csc^m(content, style_k)`, masks broadcast over channels.
pub fn spatial_control_features<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    styles: &[Image],
    masks: &MaskSet,
) -> Result<FeatureMap<T>, ControlError> {
    if styles.is_empty() {
        return Err(ControlError::NoStyles);
    }
    if styles.len() != masks.len() {
        return Err(ControlError::CountMismatch {
            items: styles.len(),
            given: masks.len(),
            what: "masks",
        });
    }
    let maps = styles
        .iter()
        .map(|s| fused(net, content, s))
        .collect::<Result<Vec<_>, _>>()?;
    let shape: Shape = maps[0].tensor.shape();
    if (shape.w, shape.h) != masks.extents() {
        return Err(ControlError::MaskExtent {
            index: 0,
            width: masks.width,
            height: masks.height,
            expected_width: shape.w,
            expected_height: shape.h,
        });
    }
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let mut acc: Option<f64> = None;
                    for (k, map) in maps.iter().enumerate() {
                        if masks.mask(k)[y * shape.w + x] {
                            let v = map.tensor.get(n, c, y, x).to_f64_lossless();
                            acc = Some(acc.map_or(v, |a| a + v));
                        }
                    }
                    out.set(n, c, y, x, T::from_f64_lossy(acc.unwrap_or(0.0)));
                }
            }
        }
    }
    Ok(FeatureMap::new(out, Level::A))
}

pub fn spatial_control<T: Scalar>(
    net: &TransformNet<T>,
    content: &Image,
    styles: &[Image],
    masks: &MaskSet,
) -> Result<Image, ControlError> {
    decode_image(net, &spatial_control_features(net, content, styles, masks)?)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::image_io::{synth_image, SynthKind};
    use crate::network::NetConfig;

    fn net() -> TransformNet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut net = TransformNet::new(NetConfig::with_feat(8), 5);
        for (_, t) in net.named_params_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        net
    }

    fn img(seed: u64, kind: SynthKind) -> Image {
        synth_image(seed, 32, 32, kind).unwrap()
    }

    fn fm(v: &[f32]) -> FeatureMap<f32> {
        FeatureMap::new(
            Tensor::from_dims([1, 1, 1, v.len()], v.to_vec()).unwrap(),
            Level::A,
        )
    }

    #[test]
    fn blend_unit_weight_is_exact_including_negative_zero() {
        let a = fm(&[-0.0, 1.5, -3.25]);
        let b = fm(&[7.0, 8.0, 9.0]);
        assert!(blend(&[&a, &b], &[1.0, 0.0])
            .unwrap()
            .tensor
            .bit_eq(&a.tensor));
        assert!(blend(&[&a, &b], &[0.0, 1.0])
            .unwrap()
            .tensor
            .bit_eq(&b.tensor));
        let mid = blend(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert_eq!(mid.tensor.data(), &[3.5, 4.75, 2.875]);
    }

    #[test]
    fn alpha_range_is_enforced() {
        let n = net();
        let (c, s) = (img(1, SynthKind::Blobs), img(2, SynthKind::Stripes));
        for a in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                tradeoff(&n, &c, &s, a),
                Err(ControlError::AlphaOutOfRange(_))
            ));
        }
    }

    #[test]
    fn tradeoff_endpoints_are_bit_exact() {
        let n = net();
        let (c, s) = (img(1, SynthKind::Blobs), img(2, SynthKind::Stripes));
        let (styled, f1) = n.stylize(&c, &s).unwrap();
        let (recon, f0) = n.stylize(&c, &c).unwrap();
        assert!(tradeoff_features(&n, &c, &s, 1.0)
            .unwrap()
            .tensor
            .bit_eq(&f1.tensor));
        assert!(tradeoff_features(&n, &c, &s, 0.0)
            .unwrap()
            .tensor
            .bit_eq(&f0.tensor));
        assert_eq!(tradeoff(&n, &c, &s, 1.0).unwrap(), styled);
        assert_eq!(tradeoff(&n, &c, &s, 0.0).unwrap(), recon);
        let half = tradeoff_features(&n, &c, &s, 0.5).unwrap();
        for ((h, a), b) in half
            .tensor
            .data()
            .iter()
            .zip(f1.tensor.data())
            .zip(f0.tensor.data())
        {
            assert_eq!(*h, ((*a as f64 + *b as f64) / 2.0) as f32);
        }
    }

    #[test]
    fn interpolation_trivial_cases() {
        let n = net();
        let c = img(3, SynthKind::Blobs);
        let s = img(4, SynthKind::Checker { cell: 4 });
        let (_, f) = n.stylize(&c, &s).unwrap();
        let single = style_interpolate_features(&n, &c, std::slice::from_ref(&s), &[1.0]).unwrap();
        assert!(single.tensor.bit_eq(&f.tensor));
        let twin =
            style_interpolate_features(&n, &c, &[s.clone(), s.clone()], &[0.3, 0.7]).unwrap();
        assert!(twin.tensor.bit_eq(&f.tensor));
    }

    #[test]
    fn interpolation_matches_manual_sum() {
        let n = net();
        let c = img(5, SynthKind::Blobs);
        let styles = [
            img(6, SynthKind::Stripes),
            img(7, SynthKind::Checker { cell: 2 }),
            img(8, SynthKind::Blobs),
        ];
        let w = [0.2, 0.5, 0.3];
        let out = style_interpolate_features(&n, &c, &styles, &w).unwrap();
        let maps: Vec<FeatureMap<f32>> =
            styles.iter().map(|s| n.stylize(&c, s).unwrap().1).collect();
        for (i, v) in out.tensor.data().iter().enumerate() {
            let manual: f64 = (0..3).map(|k| w[k] * maps[k].tensor.data()[i] as f64).sum();
            assert!((*v as f64 - manual).abs() <= 1e-6);
        }
    }

    #[test]
    fn interpolation_reduces_to_tradeoff() {
        let n = net();
        let (c, s) = (img(9, SynthKind::Blobs), img(10, SynthKind::Stripes));
        let a = 0.35;
        let t = tradeoff_features(&n, &c, &s, a).unwrap();
        let i = style_interpolate_features(&n, &c, &[s, c.clone()], &[a, 1.0 - a]).unwrap();
        assert!(t.tensor.bit_eq(&i.tensor));
    }

    #[test]
    fn interpolation_rejects_bad_weights() {
        let n = net();
        let c = img(11, SynthKind::Blobs);
        let s = [img(12, SynthKind::Stripes), img(13, SynthKind::Stripes)];
        assert!(matches!(
            style_interpolate(&n, &c, &s, &[0.6, 0.6]),
            Err(ControlError::NonConvexWeights(_))
        ));
        assert!(matches!(
            style_interpolate(&n, &c, &s, &[1.5, -0.5]),
            Err(ControlError::NonConvexWeights(_))
        ));
        assert!(matches!(
            style_interpolate(&n, &c, &s, &[1.0]),
            Err(ControlError::CountMismatch { .. })
        ));
    }

    fn half_masks(w: usize, h: usize) -> [Image; 2] {
        let mut left = Image::filled(w, h, [0.0; 3]);
        let mut right = Image::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                if x < w / 2 {
                    left.set_pixel(x, y, [1.0, 0.0, 0.0]);
                } else {
                    right.set_pixel(x, y, [0.8, 0.2, 0.2]);
                }
            }
        }
        [left, right]
    }

    #[test]
    fn masks_are_point_sampled_and_must_partition() {
        let [l, r] = half_masks(32, 32);
        let m = MaskSet::from_images(&[l.clone(), r.clone()], 32, 32).unwrap();
        assert_eq!(m.extents(), (4, 4));
        assert_eq!(m.mask(0)[..4], [true, true, false, false]);
        assert_eq!(m.owner(3, 2), 1);
        assert!(matches!(
            MaskSet::from_images(&[l.clone(), l.clone()], 32, 32),
            Err(ControlError::NotPartition { count: 2, .. })
        ));
        assert!(matches!(
            MaskSet::from_images(std::slice::from_ref(&l), 32, 32),
            Err(ControlError::NotPartition { count: 0, .. })
        ));
        assert!(matches!(
            MaskSet::from_images(&[l], 64, 32),
            Err(ControlError::MaskExtent { .. })
        ));
        // Only the sampled pixel of each cell matters.
        let mut noisy = r;
        noisy.set_pixel(1, 1, [1.0, 1.0, 1.0]);
        assert_eq!(
            MaskSet::from_images(&[half_masks(32, 32)[0].clone(), noisy], 32, 32).unwrap(),
            m
        );
    }

    #[test]
    fn spatial_control_trivial_cases() {
        let n = net();
        let c = img(14, SynthKind::Blobs);
        let s = img(15, SynthKind::Stripes);
        let (_, f) = n.stylize(&c, &s).unwrap();
        let all = MaskSet::new(4, 4, vec![vec![true; 16]]).unwrap();
        let one = spatial_control_features(&n, &c, std::slice::from_ref(&s), &all).unwrap();
        assert!(one.tensor.bit_eq(&f.tensor));
        let halves = MaskSet::from_images(&half_masks(32, 32), 32, 32).unwrap();
        let two = spatial_control_features(&n, &c, &[s.clone(), s], &halves).unwrap();
        assert!(two.tensor.bit_eq(&f.tensor));
    }

    #[test]
    fn half_masks_select_blocks() {
        let n = net();
        let c = img(16, SynthKind::Blobs);
        let styles = [
            img(17, SynthKind::Stripes),
            img(18, SynthKind::Checker { cell: 3 }),
        ];
        let masks = MaskSet::from_images(&half_masks(32, 32), 32, 32).unwrap();
        let out = spatial_control_features(&n, &c, &styles, &masks).unwrap();
        let fa = n.stylize(&c, &styles[0]).unwrap().1;
        let fb = n.stylize(&c, &styles[1]).unwrap().1;
        let s = out.tensor.shape();
        for ch in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let src = if x < s.w / 2 { &fa } else { &fb };
                    assert_eq!(
                        out.tensor.get(0, ch, y, x).to_bits(),
                        src.tensor.get(0, ch, y, x).to_bits()
                    );
                }
            }
        }
        assert_eq!(
            spatial_control(&n, &c, &styles, &masks).unwrap(),
            Image::from_tensor(&n.decode(&out).unwrap()).unwrap()
        );
    }
}

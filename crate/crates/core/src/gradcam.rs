//! Grad-CAM arithmetic on plain arrays.
//!
//! The network side (forward pass to a named layer and the gradient of a class
//! score with respect to that layer's output) lives in `signfold-nn`. Given
//! those two `K × h × w` arrays, this module pools the gradients into one weight
//! per feature map, forms the rectified weighted sum, upsamples and normalizes
//! it, and renders the overlay.

use serde::{Deserialize, Serialize};

use crate::colormap::viridis;
use crate::error::{Error, Result};
use crate::preprocess::{resize_bilinear, ImageTensor};

/// `K` stacked `h × w` maps in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMaps {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values do not fill {channels}x{height}x{width} maps",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let z = self.height * self.width;
        &self.data[k * z..(k + 1) * z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamWeights {
    pub alpha: Vec<f64>,
    /// Pixels in one feature map.
    pub z: usize,
    pub height: usize,
    pub width: usize,
    pub layer: String,
    pub target_class: usize,
}

/// A single-channel map in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Result<Heatmap> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let img = ImageTensor::new(self.height, self.width, 1, self.data.clone())?;
        let out = resize_bilinear(&img, height, width)?;
        Ok(Heatmap {
            height,
            width,
            data: out.into_data(),
        })
    }

    /// Divides by the maximum when it is positive; an all-zero map stays zero.
    pub fn normalized(&self) -> Heatmap {
        let max = self.max();
        let data = if max > 0.0 {
            self.data.iter().map(|v| v / max).collect()
        } else {
            self.data.clone()
        };
        Heatmap { data, ..*self }
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(y as usize, x as usize).clamp(0.0, 1.0);
            image::Luma([(v * 255.0).round() as u8])
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamResult {
    /// Rectified map at feature-layer resolution.
    pub raw: Heatmap,
    /// Upsampled to the input size and scaled to `[0, 1]`.
    pub heatmap: Heatmap,
    pub target_class: usize,
    pub layer: String,
    pub weights: CamWeights,
    pub zero_saliency: bool,
}

/// Averages each gradient map over its spatial extent.
pub fn cam_weights(
    gradients: &FeatureMaps,
    layer: impl Into<String>,
    target_class: usize,
) -> Result<CamWeights> {
    let z = gradients.height * gradients.width;
    if gradients.channels == 0 || z == 0 {
        return Err(Error::InvalidGradients("empty gradient tensor".into()));
    }
    if gradients.data.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidGradients("non-finite gradient value".into()));
    }
    let alpha = (0..gradients.channels)
        .map(|k| gradients.map(k).iter().sum::<f64>() / z as f64)
        .collect();
    Ok(CamWeights {
        alpha,
        z,
        height: gradients.height,
        width: gradients.width,
        layer: layer.into(),
        target_class,
    })
}

/// `max(0, Σ_k alpha_k · A^k)` elementwise.
pub fn cam_map(activations: &FeatureMaps, weights: &CamWeights) -> Result<Heatmap> {
    if activations.channels != weights.alpha.len()
        || activations.height != weights.height
        || activations.width != weights.width
    {
        return Err(Error::Shape(format!(
            "activations are {}x{}x{}, weights expect {}x{}x{}",
            activations.channels,
            activations.height,
            activations.width,
            weights.alpha.len(),
            weights.height,
            weights.width
        )));
    }
    let mut sum = vec![0.0; weights.z];
    for (k, &a) in weights.alpha.iter().enumerate() {
        for (s, v) in sum.iter_mut().zip(activations.map(k)) {
            *s += a * v;
        }
    }
    sum.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(Heatmap {
        height: weights.height,
        width: weights.width,
        data: sum,
    })
}

/// Pools, weights, upsamples to `out_h × out_w` and max-normalizes.
pub fn grad_cam(
    activations: &FeatureMaps,
    gradients: &FeatureMaps,
    layer: &str,
    target_class: usize,
    out_h: usize,
    out_w: usize,
) -> Result<CamResult> {
    let weights = cam_weights(gradients, layer, target_class)?;
    let raw = cam_map(activations, &weights)?;
    let heatmap = raw.resize(out_h, out_w)?.normalized();
    let zero_saliency = raw.max() <= 0.0;
    if zero_saliency {
        tracing::warn!(layer, target_class, "Grad-CAM map is zero everywhere");
    }
    Ok(CamResult {
        raw,
        heatmap,
        target_class,
        layer: layer.to_owned(),
        weights,
        zero_saliency,
    })
}

/// Blends the viridis-coloured heatmap over `original`:
/// `round((1 - opacity) · original + opacity · colour)` per channel. The heatmap
/// is resampled to the original's size first; opacity is clamped to `[0, 1]`.
pub fn overlay(original: &image::RgbImage, heatmap: &Heatmap, opacity: f64) -> Result<image::RgbImage> {
    let (w, h) = original.dimensions();
    let hm = heatmap.resize(h as usize, w as usize)?;
    let op = opacity.clamp(0.0, 1.0);
    let mut out = original.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = viridis(hm.get(y as usize, x as usize));
        for ch in 0..3 {
            let v = (1.0 - op) * px.0[ch] as f64 + op * c[ch] as f64;
            px.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps(k: usize, h: usize, w: usize, data: Vec<f64>) -> FeatureMaps {
        FeatureMaps::new(k, h, w, data).unwrap()
    }

    #[test]
    fn constant_gradient_pools_to_itself() {
        let w = cam_weights(&maps(2, 3, 3, [vec![0.7; 9], vec![-2.0; 9]].concat()), "l", 0).unwrap();
        assert!((w.alpha[0] - 0.7).abs() < 1e-15);
        assert_eq!(w.alpha[1], -2.0);
        assert_eq!(w.z, 9);
    }

    #[test]
    fn two_by_two_mean() {
        let w = cam_weights(&maps(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]), "l", 0).unwrap();
        assert_eq!(w.alpha, vec![3.0]);
    }

    #[test]
    fn empty_and_nonfinite_gradients_rejected() {
        assert!(matches!(
            cam_weights(&maps(0, 2, 2, vec![]), "l", 0),
            Err(Error::InvalidGradients(_))
        ));
        assert!(matches!(
            cam_weights(&maps(1, 1, 2, vec![1.0, f64::NAN]), "l", 0),
            Err(Error::InvalidGradients(_))
        ));
    }

    #[test]
    fn non_positive_weights_on_non_negative_maps_give_zero() {
        let a = maps(2, 2, 2, vec![1.0, 2.0, 0.0, 3.0, 4.0, 0.5, 0.0, 1.0]);
        let w = cam_weights(&maps(2, 2, 2, [vec![-1.0; 4], vec![0.0; 4]].concat()), "l", 0).unwrap();
        let m = cam_map(&a, &w).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
        let r = grad_cam(&a, &maps(2, 2, 2, vec![0.0; 8]), "l", 0, 8, 8).unwrap();
        assert!(r.zero_saliency);
        assert!(r.heatmap.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_weight_is_relu() {
        let a = maps(1, 1, 4, vec![-1.0, 0.5, 2.0, -0.1]);
        let w = cam_weights(&maps(1, 1, 4, vec![1.0; 4]), "l", 0).unwrap();
        assert_eq!(cam_map(&a, &w).unwrap().data, vec![0.0, 0.5, 2.0, 0.0]);
    }

    #[test]
    fn shape_mismatch() {
        let w = cam_weights(&maps(2, 2, 2, vec![1.0; 8]), "l", 0).unwrap();
        assert!(matches!(cam_map(&maps(1, 2, 2, vec![1.0; 4]), &w), Err(Error::Shape(_))));
    }

    #[test]
    fn heatmap_peaks_where_the_map_peaks() {
        let mut a = vec![0.0; 16];
        a[5] = 3.0;
        a[6] = 1.0;
        let r = grad_cam(&maps(1, 4, 4, a), &maps(1, 4, 4, vec![1.0; 16]), "l", 0, 4, 4).unwrap();
        assert_eq!(r.heatmap.get(1, 1), 1.0);
        assert!(!r.zero_saliency);
    }

    fn solid(w: u32, h: u32, c: [u8; 3]) -> image::RgbImage {
        image::RgbImage::from_pixel(w, h, image::Rgb(c))
    }

    #[test]
    fn overlay_extremes() {
        let orig = solid(6, 5, [10, 200, 30]);
        let hm = Heatmap {
            height: 2,
            width: 2,
            data: vec![0.0, 0.25, 0.5, 1.0],
        };
        assert_eq!(overlay(&orig, &hm, 0.0).unwrap(), orig);
        let full = overlay(&orig, &hm, 1.0).unwrap();
        let up = hm.resize(5, 6).unwrap();
        for (x, y, px) in full.enumerate_pixels() {
            assert_eq!(px.0, viridis(up.get(y as usize, x as usize)));
        }
    }

    #[test]
    fn overlay_blend_arithmetic() {
        let orig = image::RgbImage::from_fn(7, 3, |x, y| image::Rgb([(x * 30) as u8, (y * 80) as u8, 99]));
        let hm = Heatmap {
            height: 3,
            width: 7,
            data: (0..21).map(|i| i as f64 / 20.0).collect(),
        };
        let out = overlay(&orig, &hm, 0.4).unwrap();
        assert_eq!(out.dimensions(), orig.dimensions());
        for (x, y, px) in out.enumerate_pixels() {
            let o = orig.get_pixel(x, y).0;
            let c = viridis(hm.get(y as usize, x as usize));
            for ch in 0..3 {
                let expect = (0.6 * o[ch] as f64 + 0.4 * c[ch] as f64).round() as u8;
                assert_eq!(px.0[ch], expect);
            }
        }
    }

    fn random_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..9, 1usize..6, 1usize..6).prop_flat_map(|(k, h, w)| {
            let n = k * h * w;
            (
                Just(k),
                Just(h),
                Just(w),
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn weights_match_nested_sum((k, h, w, g, _a) in random_case()) {
            let cw = cam_weights(&maps(k, h, w, g.clone()), "l", 0).unwrap();
            for kk in 0..k {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += g[kk * h * w + i * w + j];
                    }
                }
                prop_assert!((cw.alpha[kk] - s / (h * w) as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn map_matches_brute_force((k, h, w, g, a) in random_case()) {
            let cw = cam_weights(&maps(k, h, w, g), "l", 0).unwrap();
            let m = cam_map(&maps(k, h, w, a.clone()), &cw).unwrap();
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += cw.alpha[kk] * a[kk * h * w + i * w + j];
                    }
                    let expect = if s > 0.0 { s } else { 0.0 };
                    prop_assert!((m.get(i, j) - expect).abs() <= 1e-10);
                    prop_assert!(m.get(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn normalized_heatmap_ignores_positive_scale(
            (k, h, w, g, a) in random_case(),
            s in 0.01f64..100.0,
        ) {
            let am = maps(k, h, w, a);
            let base = grad_cam(&am, &maps(k, h, w, g.clone()), "l", 0, 11, 9).unwrap();
            let scaled = grad_cam(&am, &maps(k, h, w, g.iter().map(|v| v * s).collect()), "l", 0, 11, 9).unwrap();
            prop_assert!(base.heatmap.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (x, y) in base.heatmap.data.iter().zip(&scaled.heatmap.data) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            if !base.zero_saliency {
                prop_assert!((base.heatmap.max() - 1.0).abs() < 1e-12);
            }
        }
    }
}

//! Zero-shot stylization on per-splat feature vectors.
//!
//! Content statistics are tracked as a running average of the rendered
//! feature maps during training; at inference the per-channel affine that
//! matches them to a style image's statistics is applied once per style,
//! directly on the splat features. Rendering the transformed features and
//! decoding yields the stylized view for any camera and timestamp with no
//! per-style optimization.

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::deform::{deform_scene, DeformConfig, DeformationHead, HexPlaneField, TimeStamp};
use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::raster::{rasterize_forward, PayloadSpec};
use crate::scene::{GaussianScene, STD_FLOOR};

/// Per-channel mean and (floored) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AveragingMode {
    /// Exponential moving average with the configured momentum.
    Ema,
    /// Running arithmetic mean over all updates.
    Cumulative,
}

/// Moving-average content statistics tracked during joint training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean_avg: Vec<f64>,
    pub std_avg: Vec<f64>,
    pub momentum: f64,
    pub update_count: u64,
    pub mode: AveragingMode,
}

impl RunningStats {
    pub fn new(dim: usize, momentum: f64, mode: AveragingMode) -> Self {
        Self {
            mean_avg: vec![0.0; dim],
            std_avg: vec![0.0; dim],
            momentum,
            update_count: 0,
            mode,
        }
    }

    pub fn desk_default(dim: usize) -> Self {
        Self::new(dim, 0.9, AveragingMode::Ema)
    }

    pub fn is_initialized(&self) -> bool {
        self.update_count > 0
    }

    /// The tracked statistics viewed as plain channel stats.
    pub fn as_stats(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mean_avg.clone(),
            std: self.std_avg.clone(),
        }
    }
}

/// Style-side statistics extracted from an encoded style image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub stats: ChannelStats,
}

/// Per-channel weighted mean/std over spatial positions (population std,
/// floored).
pub fn compute_stats(fm: &FeatureMap, mask: Option<&FeatureMap>) -> Result<ChannelStats> {
    let hw = fm.height() * fm.width();
    let wsum = match mask {
        None => hw as f64,
        Some(m) => {
            if m.channels() != 1 || m.height() != fm.height() || m.width() != fm.width() {
                return Err(Error::ShapeMismatch("stats mask shape mismatch".into()));
            }
            let s: f64 = m.channel(0).iter().sum();
            if s <= 0.0 {
                return Err(Error::Usage("stats mask sums to zero".into()));
            }
            s
        }
    };
    let mut mean = Vec::with_capacity(fm.channels());
    let mut std = Vec::with_capacity(fm.channels());
    for c in 0..fm.channels() {
        let ch = fm.channel(c);
        let mu = match mask {
            None => ch.iter().sum::<f64>() / wsum,
            Some(m) => ch
                .iter()
                .zip(m.channel(0))
                .map(|(x, w)| x * w)
                .sum::<f64>()
                / wsum,
        };
        let var = match mask {
            None => ch.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / wsum,
            Some(m) => ch
                .iter()
                .zip(m.channel(0))
                .map(|(x, w)| w * (x - mu) * (x - mu))
                .sum::<f64>()
                / wsum,
        };
        mean.push(mu);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok(ChannelStats { mean, std })
}

/// Fold one batch of statistics into the running average. The first update
/// copies the batch exactly.
pub fn update_running(rs: &mut RunningStats, batch: &ChannelStats) -> Result<()> {
    if batch.dim() != rs.mean_avg.len() {
        return Err(Error::ShapeMismatch(format!(
            "running stats dim {} vs batch {}",
            rs.mean_avg.len(),
            batch.dim()
        )));
    }
    if rs.update_count == 0 {
        rs.mean_avg = batch.mean.clone();
        rs.std_avg = batch.std.clone();
    } else {
        match rs.mode {
            AveragingMode::Ema => {
                let m = rs.momentum;
                for (avg, b) in rs.mean_avg.iter_mut().zip(&batch.mean) {
                    *avg = m * *avg + (1.0 - m) * b;
                }
                for (avg, b) in rs.std_avg.iter_mut().zip(&batch.std) {
                    *avg = (m * *avg + (1.0 - m) * b).max(STD_FLOOR);
                }
            }
            AveragingMode::Cumulative => {
                let n = rs.update_count as f64;
                for (avg, b) in rs.mean_avg.iter_mut().zip(&batch.mean) {
                    *avg = (*avg * n + b) / (n + 1.0);
                }
                for (avg, b) in rs.std_avg.iter_mut().zip(&batch.std) {
                    *avg = ((*avg * n + b) / (n + 1.0)).max(STD_FLOOR);
                }
            }
        }
    }
    rs.update_count += 1;
    Ok(())
}

/// Pixel-space adaptive instance normalization:
/// style.std ⊙ (x − content.mean)/content.std + style.mean.
pub fn adain_map(
    fc: &FeatureMap,
    content: &ChannelStats,
    style: &ChannelStats,
) -> Result<FeatureMap> {
    if content.dim() != fc.channels() || style.dim() != fc.channels() {
        return Err(Error::ShapeMismatch("adain stats dim mismatch".into()));
    }
    let mut out = fc.clone();
    for c in 0..fc.channels() {
        let a = style.std[c] / content.std[c];
        let mu_c = content.mean[c];
        let mu_s = style.mean[c];
        for v in out.channel_mut(c) {
            *v = a * (*v - mu_c) + mu_s;
        }
    }
    Ok(out)
}

/// The per-channel affine equivalent of the stylization transform:
/// scale = σ_style/σ_avg, shift = μ_style − scale·μ_avg.
///
/// Computed once per (running stats, style) pair; it never depends on the
/// camera or timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

pub fn style_affine(rs: &RunningStats, style: &StyleCode) -> Result<StyleAffine> {
    if !rs.is_initialized() {
        return Err(Error::Usage(
            "running stats have no updates; train the joint phase first".into(),
        ));
    }
    if style.stats.dim() != rs.mean_avg.len() {
        return Err(Error::ShapeMismatch("style code dim mismatch".into()));
    }
    let scale: Vec<f64> = style
        .stats
        .std
        .iter()
        .zip(&rs.std_avg)
        .map(|(s, c)| s / c)
        .collect();
    let shift: Vec<f64> = style
        .stats
        .mean
        .iter()
        .zip(scale.iter().zip(&rs.mean_avg))
        .map(|(mu_s, (a, mu_c))| mu_s - a * mu_c)
        .collect();
    Ok(StyleAffine { scale, shift })
}

/// Apply the stylization affine to every splat's feature vector. Geometry,
/// opacity, and color are untouched; the input scene is not modified.
pub fn stylize_gaussians(
    scene: &GaussianScene,
    rs: &RunningStats,
    style: &StyleCode,
) -> Result<GaussianScene> {
    let affine = style_affine(rs, style)?;
    if scene.feature_dim != affine.scale.len() {
        return Err(Error::ShapeMismatch(format!(
            "scene feature dim {} vs stats {}",
            scene.feature_dim,
            affine.scale.len()
        )));
    }
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        for (k, f) in g.feature.iter_mut().enumerate() {
            *f = affine.scale[k] * *f + affine.shift[k];
        }
    }
    Ok(out)
}

/// Extract a style code by encoding a style image and pooling its channel
/// statistics.
pub fn style_code_from_image(codec: &Codec, image: &FeatureMap) -> Result<StyleCode> {
    let features = codec.encode(image)?;
    Ok(StyleCode {
        stats: compute_stats(&features, None)?,
    })
}

/// Linear interpolation between two style codes; endpoints are returned
/// bit-exactly.
pub fn interpolate_styles(a: &StyleCode, b: &StyleCode, w: f64) -> Result<StyleCode> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Usage(format!("interpolation weight {} outside [0,1]", w)));
    }
    if a.stats.dim() != b.stats.dim() {
        return Err(Error::ShapeMismatch("style dims differ".into()));
    }
    if w == 0.0 {
        return Ok(a.clone());
    }
    if w == 1.0 {
        return Ok(b.clone());
    }
    let mean = a
        .stats
        .mean
        .iter()
        .zip(&b.stats.mean)
        .map(|(x, y)| (1.0 - w) * x + w * y)
        .collect();
    let std = a
        .stats
        .std
        .iter()
        .zip(&b.stats.std)
        .map(|(x, y)| ((1.0 - w) * x + w * y).max(STD_FLOOR))
        .collect();
    Ok(StyleCode {
        stats: ChannelStats { mean, std },
    })
}

/// Render the feature map of a (possibly stylized) scene at (cam, t) and
/// decode it: the inference path shared by every stylization variant.
pub fn render_feature_frame(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    cam: &crate::scene::Camera,
    t: TimeStamp,
    codec: &Codec,
) -> Result<FeatureMap> {
    let deformed = deform_scene(scene, field, head, t, dcfg)?;
    let out = rasterize_forward(
        &deformed,
        cam,
        scene.background,
        scene.sh_degree,
        PayloadSpec::Features,
    )?;
    let pooled = out.feature_map.avg_pool(codec.downsample())?;
    codec.decode(&pooled)
}

/// One-call zero-shot stylized render: stylize features, deform, rasterize,
/// decode. Forward-only.
#[allow(clippy::too_many_arguments)]
pub fn render_stylized(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    cam: &crate::scene::Camera,
    t: TimeStamp,
    style: &StyleCode,
    rs: &RunningStats,
    codec: &Codec,
) -> Result<FeatureMap> {
    let stylized = stylize_gaussians(scene, rs, style)?;
    render_feature_frame(&stylized, field, head, dcfg, cam, t, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: &[f64], std: &[f64]) -> ChannelStats {
        ChannelStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    #[test]
    fn constant_map_stats_floor_the_std() {
        let fm = FeatureMap::from_fn(2, 4, 4, |_, _, _| 5.0);
        let s = compute_stats(&fm, None).unwrap();
        assert_eq!(s.mean, vec![5.0, 5.0]);
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }

    #[test]
    fn two_pixel_stats_population_std() {
        let fm = FeatureMap::from_vec(1, 1, 2, vec![0.0, 2.0]).unwrap();
        let s = compute_stats(&fm, None).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 1e-15);
        assert!((s.std[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_stats_equal_stats_over_covered_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fm = FeatureMap::from_fn(3, 4, 8, |_, _, _| rng.gen_range(-2.0..2.0));
        // Mask covering the left half.
        let mask = FeatureMap::from_fn(1, 4, 8, |_, _, x| if x < 4 { 1.0 } else { 0.0 });
        let masked = compute_stats(&fm, Some(&mask)).unwrap();

        // Brute-force oracle: copy covered pixels into a smaller map.
        let left = FeatureMap::from_fn(3, 4, 4, |c, y, x| fm.get(c, y, x));
        let direct = compute_stats(&left, None).unwrap();
        for c in 0..3 {
            assert!((masked.mean[c] - direct.mean[c]).abs() < 1e-12);
            assert!((masked.std[c] - direct.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_usage_error() {
        let fm = FeatureMap::zeros(1, 2, 2);
        let mask = FeatureMap::zeros(1, 2, 2);
        assert!(matches!(
            compute_stats(&fm, Some(&mask)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn first_update_copies_batch() {
        let mut rs = RunningStats::desk_default(2);
        update_running(&mut rs, &stats(&[1.0, -3.0], &[0.5, 2.0])).unwrap();
        assert_eq!(rs.mean_avg, vec![1.0, -3.0]);
        assert_eq!(rs.std_avg, vec![0.5, 2.0]);
        assert_eq!(rs.update_count, 1);
    }

    #[test]
    fn ema_update_rule() {
        let mut rs = RunningStats::desk_default(1);
        update_running(&mut rs, &stats(&[1.0], &[1.0])).unwrap();
        update_running(&mut rs, &stats(&[2.0], &[1.0])).unwrap();
        assert!((rs.mean_avg[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn constant_batches_converge() {
        let mut rs = RunningStats::desk_default(1);
        update_running(&mut rs, &stats(&[0.0], &[1.0])).unwrap();
        let target = stats(&[4.0], &[2.5]);
        for _ in 0..200 {
            update_running(&mut rs, &target).unwrap();
        }
        assert!((rs.mean_avg[0] - 4.0).abs() <= 1e-6);
        assert!((rs.std_avg[0] - 2.5).abs() <= 1e-6);
        assert_eq!(rs.update_count, 201);
    }

    #[test]
    fn cumulative_mode_averages_all_batches() {
        let mut rs = RunningStats::new(1, 0.9, AveragingMode::Cumulative);
        for v in [1.0, 2.0, 3.0, 4.0] {
            update_running(&mut rs, &stats(&[v], &[1.0])).unwrap();
        }
        assert!((rs.mean_avg[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn adain_identity_when_stats_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = FeatureMap::from_fn(2, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let s = compute_stats(&fm, None).unwrap();
        let out = adain_map(&fm, &s, &s).unwrap();
        let diff = out.max_abs_diff(&fm).unwrap();
        assert!(diff <= 1e-7, "identity adain moved values by {}", diff);
    }

    #[test]
    fn adain_affine_form() {
        let fm = FeatureMap::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let content = stats(&[0.0], &[1.0]);
        let style = stats(&[2.0], &[3.0]);
        let out = adain_map(&fm, &content, &style).unwrap();
        assert_eq!(out.data(), &[-1.0, 2.0, 8.0]);
    }

    #[test]
    fn adain_output_matches_style_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fm = FeatureMap::from_fn(3, 8, 8, |_, _, _| rng.gen_range(-2.0..2.0));
        let content = compute_stats(&fm, None).unwrap();
        let style = stats(&[0.3, -0.7, 1.2], &[0.4, 2.0, 0.05]);
        let out = adain_map(&fm, &content, &style).unwrap();
        let got = compute_stats(&out, None).unwrap();
        for c in 0..3 {
            assert!((got.mean[c] - style.mean[c]).abs() <= 1e-5);
            assert!((got.std[c] - style.std[c]).abs() <= 1e-5);
        }
    }

    fn tiny_scene(feature_dim: usize, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..5)
            .map(|i| {
                let mut g = crate::scene::Gaussian::isotropic(
                    nalgebra::Vector3::new(i as f64 * 0.1, 0.0, 3.0),
                    0.2,
                    0.5,
                    [0.5; 3],
                    feature_dim,
                );
                for f in g.feature.iter_mut() {
                    *f = rng.gen_range(-1.0..1.0);
                }
                g
            })
            .collect();
        GaussianScene::new(gaussians, feature_dim, nalgebra::Vector3::zeros(), 0).unwrap()
    }

    #[test]
    fn identity_style_leaves_features() {
        let scene = tiny_scene(3, 1);
        let mut rs = RunningStats::desk_default(3);
        update_running(&mut rs, &stats(&[0.2, -0.1, 0.4], &[1.1, 0.6, 2.0])).unwrap();
        let style = StyleCode { stats: rs.as_stats() };
        let out = stylize_gaussians(&scene, &rs, &style).unwrap();
        for (a, b) in out.gaussians.iter().zip(&scene.gaussians) {
            for (x, y) in a.feature.iter().zip(&b.feature) {
                assert!((x - y).abs() <= 1e-6);
            }
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.opacity_logit, b.opacity_logit);
        }
    }

    #[test]
    fn distinct_styles_produce_distinct_features() {
        let scene = tiny_scene(2, 2);
        let mut rs = RunningStats::desk_default(2);
        update_running(&mut rs, &stats(&[0.0, 0.0], &[1.0, 1.0])).unwrap();
        let s1 = StyleCode { stats: stats(&[1.0, 0.0], &[2.0, 1.0]) };
        let s2 = StyleCode { stats: stats(&[-1.0, 0.5], &[0.5, 3.0]) };
        let o1 = stylize_gaussians(&scene, &rs, &s1).unwrap();
        let o2 = stylize_gaussians(&scene, &rs, &s2).unwrap();
        for (a, b) in o1.gaussians.iter().zip(&o2.gaussians) {
            assert_ne!(a.feature, b.feature);
        }
    }

    #[test]
    fn uninitialized_running_stats_is_usage_error() {
        let scene = tiny_scene(2, 3);
        let rs = RunningStats::desk_default(2);
        let style = StyleCode { stats: stats(&[0.0, 0.0], &[1.0, 1.0]) };
        assert!(matches!(
            stylize_gaussians(&scene, &rs, &style),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn interpolation_endpoints_are_bitwise() {
        let a = StyleCode { stats: stats(&[0.123456789, -2.0], &[1.5, 0.25]) };
        let b = StyleCode { stats: stats(&[4.0, 7.0], &[0.5, 3.0]) };
        assert_eq!(interpolate_styles(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_styles(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate_styles(&a, &b, 0.5).unwrap();
        assert!((mid.stats.mean[0] - (0.123456789 + 4.0) / 2.0).abs() < 1e-15);
        assert!(interpolate_styles(&a, &b, 1.5).is_err());
    }

    #[test]
    fn midpoint_of_means_two_and_four_is_three() {
        let a = StyleCode { stats: stats(&[2.0], &[1.0]) };
        let b = StyleCode { stats: stats(&[4.0], &[1.0]) };
        let mid = interpolate_styles(&a, &b, 0.5).unwrap();
        assert_eq!(mid.stats.mean[0], 3.0);
    }

    #[test]
    fn affine_coefficients_do_not_depend_on_view_or_time() {
        // The transform is a pure function of (running stats, style); the
        // same inputs give identical coefficients however often queried.
        let mut rs = RunningStats::desk_default(2);
        update_running(&mut rs, &stats(&[0.1, 0.2], &[1.0, 2.0])).unwrap();
        let style = StyleCode { stats: stats(&[1.0, -1.0], &[0.5, 4.0]) };
        let a = style_affine(&rs, &style).unwrap();
        let b = style_affine(&rs, &style).unwrap();
        assert_eq!(a, b);
    }
}

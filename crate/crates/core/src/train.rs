//! Two-phase scene optimization: RGB-only pretraining, then joint feature
//! distillation with running-statistics tracking, plus densify/prune
//! topology maintenance.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::dataio::{
    save_checkpoint, Checkpoint, CheckpointMeta, Dataset, OptimizerBlob,
};
use crate::deform::{
    deform_scene_cached, deformation_backward, DeformConfig, DeformationHead, FieldGrads,
    HeadGrads, HexPlaneField, TimeStamp,
};
use crate::error::{Error, Result};
use crate::fmap::{psnr, FeatureMap};
use crate::optim::AdamState;
use crate::raster::{rasterize_backward, rasterize_forward, PayloadSpec, RenderGrads};
use crate::scene::{inverse_sigmoid, Camera, Gaussian, GaussianScene};
use crate::style::{compute_stats, update_running, ChannelStats, RunningStats};

// ---------------------------------------------------------------------------
// SSIM / D-SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable "same" convolution with zero padding.
fn blur(ch: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r as isize;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * ch[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r as isize;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over channels and pixels, 11×11 Gaussian window σ = 1.5.
pub fn ssim(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &FeatureMap, b: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &FeatureMap, b: &FeatureMap, want_grad: bool) -> Result<(f64, Option<FeatureMap>)> {
    if !a.same_shape(b) {
        return Err(Error::Usage("ssim shapes differ".into()));
    }
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let k = ssim_kernel();
    let n = (c * h * w) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| FeatureMap::zeros(c, h, w));

    for ch in 0..c {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let mu1 = blur(x, h, w, &k);
        let mu2 = blur(y, h, w, &k);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let sxx = blur(&xx, h, w, &k);
        let syy = blur(&yy, h, w, &k);
        let sxy = blur(&xy, h, w, &k);

        let mut d_mu1 = want_grad.then(|| vec![0.0; h * w]);
        let mut d_sxx = want_grad.then(|| vec![0.0; h * w]);
        let mut d_sxy = want_grad.then(|| vec![0.0; h * w]);

        for i in 0..h * w {
            let m1 = mu1[i];
            let m2 = mu2[i];
            let var1 = sxx[i] - m1 * m1;
            let var2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = var1 + var2 + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if let (Some(dm1), Some(dxx), Some(dxy)) =
                (d_mu1.as_mut(), d_sxx.as_mut(), d_sxy.as_mut())
            {
                let inv = 1.0 / (b1 * b2);
                // ∂s/∂mu1 with Sxx, Sxy held fixed.
                let ds_dmu1 = (2.0 * m2 * a2 + a1 * (-2.0 * m2)) * inv
                    - s * (2.0 * m1 / b1 + (-2.0 * m1) / b2);
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 * inv;
                dm1[i] = ds_dmu1 / n;
                dxx[i] = ds_dsxx / n;
                dxy[i] = ds_dsxy / n;
            }
        }

        if let Some(g) = grad.as_mut() {
            // Each smoothed map m = W ⋆ f: dL/df = W ⋆ dL/dm (symmetric W),
            // then the chain for f = x² (2x) and f = x·y (y).
            let g1 = blur(&d_mu1.unwrap(), h, w, &k);
            let g2 = blur(&d_sxx.unwrap(), h, w, &k);
            let g3 = blur(&d_sxy.unwrap(), h, w, &k);
            let out = g.channel_mut(ch);
            for i in 0..h * w {
                out[i] = g1[i] + 2.0 * x[i] * g2[i] + y[i] * g3[i];
            }
        }
    }
    Ok((total / n, grad))
}

/// (1−λ)·L1 + λ·(1−SSIM)/2.
pub fn photometric_loss(render: &FeatureMap, gt: &FeatureMap, lambda: f64) -> Result<f64> {
    let l1 = render.mean_abs_diff(gt)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let s = ssim(render, gt)?;
    Ok((1.0 - lambda) * l1 + lambda * 0.5 * (1.0 - s))
}

/// Mean absolute difference between the pooled rendered features and the
/// supervision features.
pub fn feature_loss(f_pooled: &FeatureMap, f_s: &FeatureMap) -> Result<f64> {
    if !f_pooled.same_shape(f_s) {
        return Err(Error::Usage("feature_loss shapes differ".into()));
    }
    f_pooled.mean_abs_diff(f_s)
}

fn l1_grad(render: &FeatureMap, gt: &FeatureMap) -> FeatureMap {
    let n = render.data().len() as f64;
    let mut g = render.clone();
    for (v, (&r, &t)) in g
        .data_mut()
        .iter_mut()
        .zip(render.data().iter().zip(gt.data()))
    {
        *v = (r - t).signum() / n;
    }
    g
}

// ---------------------------------------------------------------------------
// Configuration and state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_iters: u64,
    pub joint_iters: u64,
    pub seed: u64,
    pub feature_dim: usize,
    pub sh_degree: usize,
    pub initial_gaussians: usize,
    pub max_gaussians: usize,

    /// D-SSIM mixing weight.
    pub lambda: f64,
    /// Include the D-SSIM term during the joint phase too.
    pub dssim_in_joint: bool,

    pub lr_means: f64,
    /// Means learning rate decays exponentially to lr·decay over training.
    pub lr_means_final_factor: f64,
    pub lr_rotations: f64,
    pub lr_scales: f64,
    pub lr_opacities: f64,
    pub lr_colors: f64,
    pub lr_features: f64,
    pub lr_field: f64,
    pub lr_head: f64,

    /// Iterations at the start of pretraining with the deformation frozen
    /// at identity (static coarse fit before motion is learned).
    pub deform_warmup_iters: u64,
    pub densify_interval: u64,
    pub densify_start: u64,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub opacity_reset_interval: u64,

    /// Field/head architecture.
    pub plane_feature_dim: usize,
    pub field_resolutions: Vec<(usize, usize)>,
    pub head_hidden: Vec<usize>,
    pub deform_rotation_scale: bool,

    /// Compute running statistics over alpha-masked pooled features.
    pub stats_masked: bool,
    pub stats_momentum: f64,

    pub checkpoint_interval: u64,
    /// Camera excluded from training and used for PSNR reporting.
    pub holdout_camera: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iters: 2000,
            joint_iters: 1000,
            seed: 0,
            feature_dim: 32,
            sh_degree: 0,
            initial_gaussians: 2000,
            max_gaussians: 12_000,
            lambda: 0.2,
            dssim_in_joint: true,
            lr_means: 1.6e-4,
            lr_means_final_factor: 0.01,
            lr_rotations: 1e-3,
            lr_scales: 5e-3,
            lr_opacities: 5e-2,
            lr_colors: 2.5e-3,
            lr_features: 2.5e-3,
            lr_field: 1.6e-3,
            lr_head: 1.6e-3,
            deform_warmup_iters: 500,
            densify_interval: 100,
            densify_start: 300,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            opacity_reset_interval: 3000,
            plane_feature_dim: 16,
            field_resolutions: vec![(16, 8), (32, 16)],
            head_hidden: vec![64, 64],
            deform_rotation_scale: true,
            stats_masked: false,
            stats_momentum: 0.9,
            checkpoint_interval: 1000,
            holdout_camera: None,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> u64 {
        self.pretrain_iters + self.joint_iters
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Usage("lambda must be in [0,1]".into()));
        }
        if self.densify_grad_threshold <= 0.0 || self.prune_opacity <= 0.0 {
            return Err(Error::Usage("thresholds must be positive".into()));
        }
        if self.feature_dim == 0 || self.initial_gaussians == 0 {
            return Err(Error::Usage(
                "feature_dim and initial_gaussians must be positive".into(),
            ));
        }
        if self.densify_interval > 0
            && self.checkpoint_interval > 0
            && self.checkpoint_interval % self.densify_interval != 0
        {
            return Err(Error::Usage(
                "checkpoint_interval must be a multiple of densify_interval".into(),
            ));
        }
        Ok(())
    }

    pub fn deform_config(&self) -> DeformConfig {
        DeformConfig {
            deform_rotation_scale: self.deform_rotation_scale,
        }
    }

    fn phase_of(&self, iteration: u64) -> Phase {
        if iteration < self.pretrain_iters {
            Phase::Pretrain
        } else {
            Phase::Joint
        }
    }

    fn lambda_for(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Pretrain => self.lambda,
            Phase::Joint => {
                if self.dssim_in_joint {
                    self.lambda
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub iteration: u64,
    pub phase: Phase,
    pub l1_rgb: f64,
    pub dssim: f64,
    pub feature_l1: f64,
    pub total: f64,
    pub lambda: f64,
    pub gaussians: usize,
}

/// Adam moments for every trainable tensor group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub means: AdamState,
    pub rotations: AdamState,
    pub scales: AdamState,
    pub opacities: AdamState,
    pub colors: AdamState,
    pub features: AdamState,
    pub field: AdamState,
    pub head: AdamState,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl OptimizerState {
    pub fn new(scene: &GaussianScene, field: &HexPlaneField, head: &DeformationHead) -> Self {
        let n = scene.gaussians.len();
        let n_coeffs = scene.gaussians[0].color_coeffs.len();
        let f = scene.feature_dim;
        let mk = |len: usize| AdamState::new(len, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        Self {
            means: mk(3 * n),
            rotations: mk(4 * n),
            scales: mk(3 * n),
            opacities: mk(n),
            colors: mk(3 * n_coeffs * n),
            features: mk(f * n),
            field: mk(field.num_parameters()),
            head: mk(head.num_parameters()),
        }
    }

    pub fn to_blob(&self) -> OptimizerBlob {
        OptimizerBlob {
            groups: vec![
                ("means".into(), self.means.clone()),
                ("rotations".into(), self.rotations.clone()),
                ("scales".into(), self.scales.clone()),
                ("opacities".into(), self.opacities.clone()),
                ("colors".into(), self.colors.clone()),
                ("features".into(), self.features.clone()),
                ("field".into(), self.field.clone()),
                ("head".into(), self.head.clone()),
            ],
        }
    }

    pub fn from_blob(blob: &OptimizerBlob) -> Result<Self> {
        let get = |name: &str| -> Result<AdamState> {
            blob.groups
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::Usage(format!("optimizer group {} missing", name)))
        };
        Ok(Self {
            means: get("means")?,
            rotations: get("rotations")?,
            scales: get("scales")?,
            opacities: get("opacities")?,
            colors: get("colors")?,
            features: get("features")?,
            field: get("field")?,
            head: get("head")?,
        })
    }
}

/// Everything the trainer mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub scene: GaussianScene,
    pub field: HexPlaneField,
    pub head: DeformationHead,
    pub rs: RunningStats,
    pub opt: OptimizerState,
    pub iteration: u64,
    /// Half diagonal of the dataset bounding box; scales the means lr.
    pub spatial_scale: f64,
    /// Screen-gradient accumulation since the last densify/checkpoint event.
    pub densify_grad_sum: Vec<f64>,
    pub densify_count: u64,
}

// ---------------------------------------------------------------------------
// Loss + gradient evaluation (the differentiable pipeline)
// ---------------------------------------------------------------------------

pub struct BatchGrads {
    pub l1_rgb: f64,
    pub dssim: f64,
    pub feature_l1: f64,
    pub total: f64,
    pub d_mean: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_opacity: Vec<f64>,
    pub d_colors: Vec<Vec<[f64; 3]>>,
    pub d_features: Vec<Vec<f64>>,
    pub field: FieldGrads,
    pub head: HeadGrads,
    /// Per-splat screen-space gradient norms in half-image units.
    pub d_mean2d_norm: Vec<f64>,
    /// Channel statistics of the pooled rendered features (joint phase).
    pub pooled_stats: Option<ChannelStats>,
}

/// Forward losses only; the scalar target for finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn loss_value(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    cam: &Camera,
    image: &FeatureMap,
    t: TimeStamp,
    lambda: f64,
    supervision: Option<(&Codec, &FeatureMap)>,
) -> Result<f64> {
    let deformed = crate::deform::deform_scene(scene, field, head, t, dcfg)?;
    let payload = if supervision.is_some() {
        PayloadSpec::Features
    } else {
        PayloadSpec::None
    };
    let out = rasterize_forward(&deformed, cam, scene.background, scene.sh_degree, payload)?;
    let l1 = out.color.mean_abs_diff(image)?;
    let dssim = if lambda > 0.0 {
        0.5 * (1.0 - ssim(&out.color, image)?)
    } else {
        0.0
    };
    let feat = match supervision {
        None => 0.0,
        Some((codec, f_s)) => {
            let pooled = out.feature_map.avg_pool(codec.downsample())?;
            feature_loss(&pooled, f_s)?
        }
    };
    Ok((1.0 - lambda) * l1 + lambda * dssim + feat)
}

/// Full forward + backward for one batch. `supervision` carries the frozen
/// codec and the cached encoder features of the ground-truth image; its
/// presence selects the joint-phase loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    cam: &Camera,
    image: &FeatureMap,
    t: TimeStamp,
    lambda: f64,
    supervision: Option<(&Codec, &FeatureMap)>,
    stats_masked: bool,
) -> Result<BatchGrads> {
    loss_and_grads_inner(
        scene, field, head, dcfg, cam, image, t, lambda, supervision, stats_masked, true,
    )
}

/// `deform_active = false` renders the canonical scene and reports zero
/// field/head gradients (the static warmup path).
#[allow(clippy::too_many_arguments)]
fn loss_and_grads_inner(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    cam: &Camera,
    image: &FeatureMap,
    t: TimeStamp,
    lambda: f64,
    supervision: Option<(&Codec, &FeatureMap)>,
    stats_masked: bool,
    deform_active: bool,
) -> Result<BatchGrads> {
    let (deformed, cache) = if deform_active {
        let (d, c) = deform_scene_cached(scene, field, head, t, dcfg)?;
        (d, Some(c))
    } else {
        (scene.gaussians.clone(), None)
    };
    let payload = if supervision.is_some() {
        PayloadSpec::Features
    } else {
        PayloadSpec::None
    };
    let out = rasterize_forward(&deformed, cam, scene.background, scene.sh_degree, payload)?;

    let l1 = out.color.mean_abs_diff(image)?;
    let mut d_color = l1_grad(&out.color, image);
    for v in d_color.data_mut() {
        *v *= 1.0 - lambda;
    }
    let dssim_val = if lambda > 0.0 {
        let (s, ds) = ssim_with_grad(&out.color, image)?;
        // d/dC of λ·(1−s)/2 = −λ/2 · ds/dC.
        for (acc, g) in d_color.data_mut().iter_mut().zip(ds.data()) {
            *acc += -0.5 * lambda * g;
        }
        0.5 * (1.0 - s)
    } else {
        0.0
    };

    let mut feature_l1 = 0.0;
    let mut d_feature_full = None;
    let mut pooled_stats = None;
    if let Some((codec, f_s)) = supervision {
        let k = codec.downsample();
        let pooled = out.feature_map.avg_pool(k)?;
        feature_l1 = feature_loss(&pooled, f_s)?;
        let d_pooled = l1_grad(&pooled, f_s);
        d_feature_full =
            Some(d_pooled.avg_pool_backward(k, out.feature_map.height(), out.feature_map.width())?);
        let mask = if stats_masked {
            Some(out.alpha_map.avg_pool(k)?)
        } else {
            None
        };
        pooled_stats = Some(compute_stats(&pooled, mask.as_ref())?);
    }

    let rgrads = rasterize_backward(
        &deformed,
        cam,
        scene.sh_degree,
        payload,
        &out,
        RenderGrads {
            d_color: Some(&d_color),
            d_feature: d_feature_full.as_ref(),
            d_alpha: None,
        },
    )?;

    let (d_mean_c, d_rot_c, d_ls_c, field_grads, head_grads) = match cache {
        Some(cache) => {
            let dg = deformation_backward(
                scene,
                field,
                head,
                dcfg,
                &cache,
                &rgrads.d_mean,
                &rgrads.d_rotation,
                &rgrads.d_log_scale,
            )?;
            (dg.d_mean, dg.d_rotation, dg.d_log_scale, dg.field, dg.head)
        }
        None => (
            rgrads.d_mean.clone(),
            rgrads.d_rotation.clone(),
            rgrads.d_log_scale.clone(),
            FieldGrads::zeros(field),
            HeadGrads::zeros(head),
        ),
    };

    let half_w = cam.width as f64 / 2.0;
    let half_h = cam.height as f64 / 2.0;
    let d_mean2d_norm: Vec<f64> = rgrads
        .d_mean2d
        .iter()
        .map(|g| Vector2::new(g.x * half_w, g.y * half_h).norm())
        .collect();

    let total = (1.0 - lambda) * l1 + lambda * dssim_val + feature_l1;
    Ok(BatchGrads {
        l1_rgb: l1,
        dssim: dssim_val,
        feature_l1,
        total,
        d_mean: d_mean_c,
        d_rotation: d_rot_c,
        d_log_scale: d_ls_c,
        d_opacity: rgrads.d_opacity_logit,
        d_colors: rgrads.d_color_coeffs,
        d_features: rgrads.d_feature,
        field: field_grads,
        head: head_grads,
        d_mean2d_norm,
        pooled_stats,
    })
}

// ---------------------------------------------------------------------------
// Parameter flattening
// ---------------------------------------------------------------------------

fn flatten_means(scene: &GaussianScene) -> Vec<f64> {
    scene
        .gaussians
        .iter()
        .flat_map(|g| [g.mean.x, g.mean.y, g.mean.z])
        .collect()
}

fn flatten_field(field: &HexPlaneField) -> Vec<f64> {
    field
        .levels
        .iter()
        .flat_map(|l| l.planes.iter().flat_map(|p| p.data.iter().copied()))
        .collect()
}

fn flatten_field_grads(g: &FieldGrads) -> Vec<f64> {
    g.planes
        .iter()
        .flat_map(|ps| ps.iter().flat_map(|p| p.iter().copied()))
        .collect()
}

fn write_field(field: &mut HexPlaneField, flat: &[f64]) {
    let mut i = 0;
    for l in &mut field.levels {
        for p in &mut l.planes {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[i..i + len]);
            i += len;
        }
    }
}

fn flatten_head(head: &DeformationHead) -> Vec<f64> {
    head.hidden
        .iter()
        .chain(std::iter::once(&head.output))
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn flatten_head_grads(g: &HeadGrads) -> Vec<f64> {
    g.layers
        .iter()
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
        .collect()
}

fn write_head(head: &mut DeformationHead, flat: &[f64]) {
    let mut i = 0;
    for l in head
        .hidden
        .iter_mut()
        .chain(std::iter::once(&mut head.output))
    {
        let wlen = l.weight.len();
        l.weight.copy_from_slice(&flat[i..i + wlen]);
        i += wlen;
        let blen = l.bias.len();
        l.bias.copy_from_slice(&flat[i..i + blen]);
        i += blen;
    }
}

// ---------------------------------------------------------------------------
// One optimizer step
// ---------------------------------------------------------------------------

pub struct TrainBatch<'a> {
    pub camera: &'a Camera,
    pub image: &'a FeatureMap,
    pub t: TimeStamp,
    /// Cached encoder features of `image` (joint phase only).
    pub supervision: Option<&'a FeatureMap>,
}

/// Forward, backward, and one Adam step; updates running statistics in the
/// joint phase and accumulates densification gradients.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    phase: Phase,
    cfg: &TrainConfig,
    codec: &Codec,
) -> Result<LossReport> {
    let lambda = cfg.lambda_for(phase);
    let supervision = match phase {
        Phase::Pretrain => None,
        Phase::Joint => {
            let fs = batch.supervision.ok_or_else(|| {
                Error::Usage("joint-phase batch is missing cached supervision features".into())
            })?;
            Some((codec, fs))
        }
    };
    let deform_active = state.iteration >= cfg.deform_warmup_iters;
    let grads = loss_and_grads_inner(
        &state.scene,
        &state.field,
        &state.head,
        &cfg.deform_config(),
        batch.camera,
        batch.image,
        batch.t,
        lambda,
        supervision,
        cfg.stats_masked,
        deform_active,
    )?;
    if !grads.total.is_finite() {
        return Err(Error::TrainingFailure(format!(
            "loss became non-finite at iteration {}",
            state.iteration
        )));
    }

    // Per-group Adam steps.
    let progress = state.iteration as f64 / cfg.total_iters().max(1) as f64;
    let lr_means =
        cfg.lr_means * state.spatial_scale * cfg.lr_means_final_factor.powf(progress);

    let n = state.scene.gaussians.len();
    {
        let mut flat = flatten_means(&state.scene);
        let gflat: Vec<f64> = grads
            .d_mean
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        state.opt.means.step(&mut flat, &gflat, lr_means);
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            g.mean = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
        }
    }
    {
        let mut flat: Vec<f64> = state
            .scene
            .gaussians
            .iter()
            .flat_map(|g| g.rotation)
            .collect();
        let gflat: Vec<f64> = grads.d_rotation.iter().flatten().copied().collect();
        state.opt.rotations.step(&mut flat, &gflat, cfg.lr_rotations);
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            g.rotation = [flat[4 * i], flat[4 * i + 1], flat[4 * i + 2], flat[4 * i + 3]];
        }
    }
    {
        let mut flat: Vec<f64> = state
            .scene
            .gaussians
            .iter()
            .flat_map(|g| [g.log_scale.x, g.log_scale.y, g.log_scale.z])
            .collect();
        let gflat: Vec<f64> = grads
            .d_log_scale
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        state.opt.scales.step(&mut flat, &gflat, cfg.lr_scales);
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            g.log_scale = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
        }
    }
    {
        let mut flat: Vec<f64> = state
            .scene
            .gaussians
            .iter()
            .map(|g| g.opacity_logit)
            .collect();
        state
            .opt
            .opacities
            .step(&mut flat, &grads.d_opacity, cfg.lr_opacities);
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            g.opacity_logit = flat[i];
        }
    }
    {
        let mut flat: Vec<f64> = state
            .scene
            .gaussians
            .iter()
            .flat_map(|g| g.color_coeffs.iter().flatten().copied())
            .collect();
        let gflat: Vec<f64> = grads
            .d_colors
            .iter()
            .flat_map(|cs| cs.iter().flatten().copied())
            .collect();
        state.opt.colors.step(&mut flat, &gflat, cfg.lr_colors);
        let n_coeffs = state.scene.gaussians[0].color_coeffs.len();
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            for k in 0..n_coeffs {
                let o = (i * n_coeffs + k) * 3;
                g.color_coeffs[k] = [flat[o], flat[o + 1], flat[o + 2]];
            }
        }
    }
    if phase == Phase::Joint {
        let f = state.scene.feature_dim;
        let mut flat: Vec<f64> = state
            .scene
            .gaussians
            .iter()
            .flat_map(|g| g.feature.iter().copied())
            .collect();
        let gflat: Vec<f64> = grads.d_features.iter().flatten().copied().collect();
        state.opt.features.step(&mut flat, &gflat, cfg.lr_features);
        for (i, g) in state.scene.gaussians.iter_mut().enumerate() {
            g.feature.copy_from_slice(&flat[i * f..(i + 1) * f]);
        }
    }
    if deform_active {
        let mut flat = flatten_field(&state.field);
        let gflat = flatten_field_grads(&grads.field);
        state.opt.field.step(&mut flat, &gflat, cfg.lr_field);
        write_field(&mut state.field, &flat);

        let mut flat = flatten_head(&state.head);
        let gflat = flatten_head_grads(&grads.head);
        state.opt.head.step(&mut flat, &gflat, cfg.lr_head);
        write_head(&mut state.head, &flat);
    }

    state.scene.renormalize_rotations();

    // Running statistics (joint only).
    if let Some(stats) = &grads.pooled_stats {
        update_running(&mut state.rs, stats)?;
    }

    // Densification signal.
    if state.densify_grad_sum.len() != n {
        state.densify_grad_sum = vec![0.0; n];
    }
    for (acc, g) in state.densify_grad_sum.iter_mut().zip(&grads.d_mean2d_norm) {
        *acc += g;
    }
    state.densify_count += 1;

    let report = LossReport {
        iteration: state.iteration,
        phase,
        l1_rgb: grads.l1_rgb,
        dssim: grads.dssim,
        feature_l1: grads.feature_l1,
        total: grads.total,
        lambda,
        gaussians: n,
    };
    state.iteration += 1;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Densify / prune
// ---------------------------------------------------------------------------

pub struct DensifyReport {
    pub before: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub after: usize,
}

/// Clone small high-gradient splats, split large ones (scale ÷ 1.6), prune
/// nearly transparent ones. Optimizer moments follow survivors; offspring
/// start from zero moments.
pub fn densify_and_prune(state: &mut TrainState, cfg: &TrainConfig) -> DensifyReport {
    let n = state.scene.gaussians.len();
    let before = n;
    let count = state.densify_count.max(1) as f64;
    let split_scale_threshold = 0.01 * state.spatial_scale * 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ state.iteration.wrapping_mul(0xA076_1D64_78BD_642F),
    );

    let mut kept: Vec<usize> = Vec::with_capacity(n);
    let mut new_gaussians: Vec<Gaussian> = Vec::with_capacity(n);
    let mut offspring: Vec<Gaussian> = Vec::new();
    let mut pruned = 0usize;
    let mut cloned = 0usize;
    let mut split = 0usize;

    for i in 0..n {
        let g = &state.scene.gaussians[i];
        if g.opacity() < cfg.prune_opacity {
            pruned += 1;
            continue;
        }
        let avg_grad = state.densify_grad_sum.get(i).copied().unwrap_or(0.0) / count;
        let wants_growth = avg_grad > cfg.densify_grad_threshold
            && new_gaussians.len() + offspring.len() + 2 < cfg.max_gaussians;
        if !wants_growth {
            kept.push(i);
            new_gaussians.push(g.clone());
            continue;
        }
        let scales = g.scales();
        let max_scale = scales.x.max(scales.y).max(scales.z);
        if max_scale > split_scale_threshold {
            // Split: replace by two samples drawn from the splat's own
            // distribution, scales divided by 1.6.
            split += 1;
            let rot = crate::scene::rotation_matrix(&g.rotation);
            for _ in 0..2 {
                let local = Vector3::new(
                    normal(&mut rng) * scales.x,
                    normal(&mut rng) * scales.y,
                    normal(&mut rng) * scales.z,
                );
                let mut child = g.clone();
                child.mean += rot * local;
                child.log_scale -= Vector3::repeat(1.6f64.ln());
                offspring.push(child);
            }
        } else {
            // Clone: keep the parent, add a displaced copy.
            cloned += 1;
            kept.push(i);
            new_gaussians.push(g.clone());
            let local = Vector3::new(
                normal(&mut rng) * scales.x,
                normal(&mut rng) * scales.y,
                normal(&mut rng) * scales.z,
            );
            let mut child = g.clone();
            child.mean += crate::scene::rotation_matrix(&g.rotation) * local;
            offspring.push(child);
        }
    }
    new_gaussians.extend(offspring);
    let after = new_gaussians.len();
    state.scene.gaussians = new_gaussians;

    // Reindex per-splat optimizer groups.
    let expand = |kept: &[usize], dim: usize| -> Vec<usize> {
        kept.iter()
            .flat_map(|&i| (0..dim).map(move |k| i * dim + k))
            .collect()
    };
    let n_coeffs = state
        .scene
        .gaussians
        .first()
        .map(|g| g.color_coeffs.len())
        .unwrap_or(1);
    let f = state.scene.feature_dim;
    state.opt.means.reindex(&expand(&kept, 3), 3 * after);
    state.opt.rotations.reindex(&expand(&kept, 4), 4 * after);
    state.opt.scales.reindex(&expand(&kept, 3), 3 * after);
    state.opt.opacities.reindex(&kept, after);
    state
        .opt
        .colors
        .reindex(&expand(&kept, 3 * n_coeffs), 3 * n_coeffs * after);
    state.opt.features.reindex(&expand(&kept, f), f * after);

    state.densify_grad_sum = vec![0.0; after];
    state.densify_count = 0;

    DensifyReport {
        before,
        pruned,
        cloned,
        split,
        after,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn reset_opacities(state: &mut TrainState) {
    let cap = inverse_sigmoid(0.01);
    for g in &mut state.scene.gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
    let len = state.opt.opacities.m.len();
    state.opt.opacities.m = vec![0.0; len];
    state.opt.opacities.v = vec![0.0; len];
}

// ---------------------------------------------------------------------------
// Scene / state initialization
// ---------------------------------------------------------------------------

/// Uniform random splats in the dataset bounding box; isotropic scales from
/// the mean 3-nearest-neighbor distance, opacity 0.1, mid-gray color.
pub fn init_scene(dataset: &Dataset, cfg: &TrainConfig) -> GaussianScene {
    let (bmin, bmax) = dataset.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    let n = cfg.initial_gaussians;
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                rng.gen_range(bmin.x..bmax.x),
                rng.gen_range(bmin.y..bmax.y),
                rng.gen_range(bmin.z..bmax.z),
            )
        })
        .collect();
    // Mean distance to the 3 nearest neighbors.
    let scale_of = |i: usize| -> f64 {
        let mut d: Vec<f64> = positions
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| (p - positions[i]).norm())
            .collect();
        d.sort_by(f64::total_cmp);
        let k = d.len().min(3);
        (d[..k].iter().sum::<f64>() / k as f64).clamp(5e-3, 0.3)
    };
    let gaussians: Vec<Gaussian> = (0..n)
        .map(|i| {
            let mut g = Gaussian::isotropic(positions[i], scale_of(i), 0.1, [0.5; 3], cfg.feature_dim);
            g.color_coeffs = vec![[0.0; 3]; crate::scene::sh_coeff_count(cfg.sh_degree)];
            for f in g.feature.iter_mut() {
                *f = rng.gen_range(-0.1..0.1);
            }
            g
        })
        .collect();
    GaussianScene {
        gaussians,
        feature_dim: cfg.feature_dim,
        background: dataset.background(),
        sh_degree: cfg.sh_degree,
    }
}

pub fn init_state(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    let scene = init_scene(dataset, cfg);
    let (bmin, bmax) = dataset.bbox();
    let field = HexPlaneField::new_seeded(
        cfg.plane_feature_dim,
        &cfg.field_resolutions,
        bmin,
        bmax,
        cfg.seed.wrapping_add(0xF1E1D),
    )?;
    let head = DeformationHead::new_seeded(
        field.fused_dim(),
        &cfg.head_hidden,
        cfg.seed.wrapping_add(0x4EAD),
    );
    let opt = OptimizerState::new(&scene, &field, &head);
    let rs = RunningStats::new(
        cfg.feature_dim,
        cfg.stats_momentum,
        crate::style::AveragingMode::Ema,
    );
    let spatial_scale = (bmax - bmin).norm() / 2.0;
    Ok(TrainState {
        scene,
        field,
        head,
        rs,
        opt,
        iteration: 0,
        spatial_scale,
        densify_grad_sum: Vec::new(),
        densify_count: 0,
    })
}

// ---------------------------------------------------------------------------
// Full training run
// ---------------------------------------------------------------------------

pub struct TrainOutputs {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    /// Mean PSNR over the holdout camera's frames, when one is configured.
    pub final_psnr: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
}

/// Build the checkpoint for the current state (quantized to storage
/// precision) and replace the live state with the quantized values, so a
/// resumed run and a continued run compute identically.
fn checkpoint_and_sync(
    state: &mut TrainState,
    codec: &Codec,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<()> {
    let mut ckpt = Checkpoint {
        meta: CheckpointMeta {
            iteration: state.iteration,
            has_feature_stage: state.rs.is_initialized(),
            deform_rotation_scale: cfg.deform_rotation_scale,
            seed: cfg.seed,
            config_toml: toml::to_string(cfg)
                .map_err(|e| Error::Usage(format!("config echo: {}", e)))?,
        },
        scene: state.scene.clone(),
        field: state.field.clone(),
        head: state.head.clone(),
        codec: codec.clone(),
        running_stats: state.rs.clone(),
        optimizer: Some(state.opt.to_blob()),
    };
    crate::dataio::quantize_to_storage(&mut ckpt);
    save_checkpoint(&ckpt, path)?;
    state.scene = ckpt.scene;
    state.field = ckpt.field;
    state.head = ckpt.head;
    state.rs = ckpt.running_stats;
    state.opt = OptimizerState::from_blob(ckpt.optimizer.as_ref().unwrap())?;
    // Densification windows restart at checkpoints; a resumed run starts
    // with an empty window, so the continuing run must too.
    state.densify_grad_sum.clear();
    state.densify_count = 0;
    Ok(())
}

pub fn state_from_checkpoint(ckpt: &Checkpoint) -> Result<TrainState> {
    let opt = match &ckpt.optimizer {
        Some(blob) => OptimizerState::from_blob(blob)?,
        None => OptimizerState::new(&ckpt.scene, &ckpt.field, &ckpt.head),
    };
    let spatial_scale = (ckpt.field.bbox_max - ckpt.field.bbox_min).norm() / 2.0;
    Ok(TrainState {
        scene: ckpt.scene.clone(),
        field: ckpt.field.clone(),
        head: ckpt.head.clone(),
        rs: ckpt.running_stats.clone(),
        opt,
        iteration: ckpt.meta.iteration,
        spatial_scale,
        densify_grad_sum: Vec::new(),
        densify_count: 0,
    })
}

/// Frames eligible for training (holdout camera excluded).
pub fn train_frame_indices(dataset: &Dataset, cfg: &TrainConfig) -> Vec<usize> {
    dataset
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| Some(f.camera) != cfg.holdout_camera)
        .map(|(i, _)| i)
        .collect()
}

/// Mean PSNR of rendered frames against ground truth for one camera.
pub fn evaluate_holdout_psnr(
    state: &TrainState,
    codec_unused: Option<&Codec>,
    dataset: &Dataset,
    camera: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let _ = codec_unused;
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in dataset.frames.iter().filter(|f| f.camera == camera) {
        let deformed = crate::deform::deform_scene(
            &state.scene,
            &state.field,
            &state.head,
            TimeStamp::new(f.time)?,
            &cfg.deform_config(),
        )?;
        let out = rasterize_forward(
            &deformed,
            &dataset.cameras[camera],
            state.scene.background,
            state.scene.sh_degree,
            PayloadSpec::None,
        )?;
        sum += psnr(&out.color, &f.image)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Usage(format!("camera {} has no frames", camera)));
    }
    Ok(sum / count as f64)
}

/// Execute the pretrain + joint schedule. `out_dir` receives the loss log
/// (`train_log.jsonl`) and checkpoints; `resume` continues a saved run.
pub fn run_training(
    dataset: &Dataset,
    codec: &Codec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    if codec.feature_dim() != cfg.feature_dim {
        return Err(Error::Usage(format!(
            "codec feature dim {} != config {}",
            codec.feature_dim(),
            cfg.feature_dim
        )));
    }
    let codec_hash_before = codec.weights_hash();

    let mut state = match resume {
        Some(ckpt) => state_from_checkpoint(ckpt)?,
        None => init_state(dataset, cfg)?,
    };
    let train_frames = train_frame_indices(dataset, cfg);
    if train_frames.is_empty() {
        return Err(Error::Usage("no training frames after holdout".into()));
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("train_log.jsonl"),
            )?))
        }
        None => None,
    };

    // Encoder features of every training frame, computed lazily when the
    // joint phase starts (the pretrain phase never touches the codec).
    let mut supervision_cache: Option<Vec<FeatureMap>> = None;

    let mut reports = Vec::with_capacity(cfg.total_iters() as usize);
    while state.iteration < cfg.total_iters() {
        let iter = state.iteration;
        let phase = cfg.phase_of(iter);
        if phase == Phase::Joint && supervision_cache.is_none() {
            let cache: Vec<FeatureMap> = train_frames
                .iter()
                .map(|&fi| codec.encode(&dataset.frames[fi].image))
                .collect::<Result<_>>()?;
            supervision_cache = Some(cache);
        }

        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ iter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let pick = rng.gen_range(0..train_frames.len());
        let frame = &dataset.frames[train_frames[pick]];
        let batch = TrainBatch {
            camera: &dataset.cameras[frame.camera],
            image: &frame.image,
            t: TimeStamp::new(frame.time)?,
            supervision: supervision_cache.as_ref().map(|c| &c[pick]),
        };
        let report = train_step(&mut state, &batch, phase, cfg, codec)?;
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &report)
                .map_err(|e| Error::Usage(format!("log write: {}", e)))?;
            f.write_all(b"\n")?;
        }
        reports.push(report);

        let done = state.iteration;
        if phase == Phase::Pretrain
            && cfg.densify_interval > 0
            && done >= cfg.densify_start
            && done % cfg.densify_interval == 0
            && done < cfg.pretrain_iters
        {
            densify_and_prune(&mut state, cfg);
        }
        if phase == Phase::Pretrain
            && cfg.opacity_reset_interval > 0
            && done % cfg.opacity_reset_interval == 0
            && done < cfg.pretrain_iters
        {
            reset_opacities(&mut state);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0
                && done % cfg.checkpoint_interval == 0
                && done < cfg.total_iters()
            {
                let name = format!("checkpoint_{:06}.ckpt", done);
                checkpoint_and_sync(&mut state, codec, cfg, &dir.join(name))?;
            }
        }
    }

    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }

    let checkpoint_path = match out_dir {
        Some(dir) => {
            let path = dir.join("checkpoint.ckpt");
            checkpoint_and_sync(&mut state, codec, cfg, &path)?;
            Some(path)
        }
        None => None,
    };

    debug_assert_eq!(codec.weights_hash(), codec_hash_before);

    let final_psnr = match cfg.holdout_camera {
        Some(cam) if cam < dataset.cameras.len() => {
            Some(evaluate_holdout_psnr(&state, None, dataset, cam, cfg)?)
        }
        _ => None,
    };

    Ok(TrainOutputs {
        state,
        reports,
        final_psnr,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    /// Direct windowed-formula SSIM, non-separable, independent of the
    /// implementation path.
    fn naive_ssim(a: &FeatureMap, b: &FeatureMap) -> f64 {
        let (c, h, w) = (a.channels(), a.height(), a.width());
        let k1 = ssim_kernel();
        let mut k2 = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                k2[i * 11 + j] = k1[i] * k1[j];
            }
        }
        let win = |ch: &[f64], y: isize, x: isize| -> f64 {
            let mut acc = 0.0;
            for i in 0..11isize {
                for j in 0..11isize {
                    let sy = y + i - 5;
                    let sx = x + j - 5;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        acc += k2[(i * 11 + j) as usize] * ch[sy as usize * w + sx as usize];
                    }
                }
            }
            acc
        };
        let mut total = 0.0;
        for ch in 0..c {
            let x = a.channel(ch);
            let y = b.channel(ch);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            for py in 0..h {
                for px in 0..w {
                    let m1 = win(x, py as isize, px as isize);
                    let m2 = win(y, py as isize, px as isize);
                    let v1 = win(&xx, py as isize, px as isize) - m1 * m1;
                    let v2 = win(&yy, py as isize, px as isize) - m2 * m2;
                    let cv = win(&xy, py as isize, px as isize) - m1 * m2;
                    total += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
                }
            }
        }
        total / (c * h * w) as f64
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = rand_image(3, 16, 16, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_penalizes_mean_shift() {
        let a = rand_image(3, 16, 16, 2).map(|v| 0.25 + v * 0.2);
        let b = a.map(|v| (v + 0.5).clamp(0.0, 1.0));
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        let a = rand_image(3, 20, 14, 3);
        let b = rand_image(3, 20, 14, 4);
        let fast = ssim(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        assert!((fast - slow).abs() <= 1e-6, "fast {} slow {}", fast, slow);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = rand_image(1, 10, 10, 5);
        let b = rand_image(1, 10, 10, 6);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        let mut am = a.clone();
        for idx in [0usize, 17, 55, 99, 42] {
            let orig = am.data()[idx];
            am.data_mut()[idx] = orig + h;
            let lp = ssim(&am, &b).unwrap();
            am.data_mut()[idx] = orig - h;
            let lm = ssim(&am, &b).unwrap();
            am.data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data()[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                "idx {}: fd {} an {}",
                idx,
                fd,
                an
            );
        }
    }

    #[test]
    fn photometric_loss_identities() {
        let a = rand_image(3, 12, 12, 7);
        let b = rand_image(3, 12, 12, 8);
        assert!(photometric_loss(&a, &a, 0.3).unwrap().abs() < 1e-12);
        let l1 = a.mean_abs_diff(&b).unwrap();
        assert!((photometric_loss(&a, &b, 0.0).unwrap() - l1).abs() < 1e-12);
        let dssim = 0.5 * (1.0 - ssim(&a, &b).unwrap());
        assert!((photometric_loss(&a, &b, 1.0).unwrap() - dssim).abs() < 1e-12);
    }

    #[test]
    fn feature_loss_trivials_and_gradient() {
        let a = rand_image(4, 6, 6, 9);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((feature_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        // Gradient of mean |a − b| w.r.t. a is sign/N; check against central
        // differences at points with nonzero difference.
        let b2 = rand_image(4, 6, 6, 10).map(|v| v + 0.5);
        let g = l1_grad(&a, &b2);
        let h = 1e-7;
        let mut am = a.clone();
        for idx in [3usize, 40, 100] {
            let orig = am.data()[idx];
            am.data_mut()[idx] = orig + h;
            let lp = feature_loss(&am, &b2).unwrap();
            am.data_mut()[idx] = orig - h;
            let lm = feature_loss(&am, &b2).unwrap();
            am.data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() <= 1e-4, "fd {} an {}", fd, g.data()[idx]);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = FeatureMap::zeros(3, 4, 4);
        let b = FeatureMap::zeros(3, 4, 5);
        assert!(ssim(&a, &b).is_err());
        assert!(feature_loss(&a, &b).is_err());
    }
}

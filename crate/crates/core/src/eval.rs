//! Spatio-temporal consistency metrics.
//!
//! Flow between two (camera, time) configurations comes from the scene's own
//! deformation model: composite per-pixel expected world positions, advect
//! the contributing splats to the other timestamp, reproject, and mask by
//! coverage, image bounds, and a relative depth tolerance. Warped RMSE and
//! an encoder-feature distance are then measured between rendered frames.

use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use crate::codec::{feature_distance_weighted, Codec};
use crate::deform::{deform_scene, DeformConfig, DeformationHead, HexPlaneField, TimeStamp};
use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::raster::{rasterize_forward, PayloadSpec};
use crate::scene::{Camera, GaussianScene};
use crate::style::{
    adain_map, compute_stats, render_feature_frame, stylize_gaussians, RunningStats, StyleCode,
};

/// Minimum composited coverage for a pixel to carry flow.
pub const FLOW_ALPHA_MIN: f64 = 0.5;
/// Relative depth tolerance of the occlusion test.
pub const DEPTH_TOLERANCE: f64 = 0.01;

/// Per-pixel displacement from the reference frame into the source frame,
/// with a validity mask.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vector2<f64>>,
    pub mask: Vec<bool>,
}

impl FlowField {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Everything frozen after training that evaluation needs.
pub struct TrainedModel<'a> {
    pub scene: &'a GaussianScene,
    pub field: &'a HexPlaneField,
    pub head: &'a DeformationHead,
    pub dcfg: DeformConfig,
    pub rs: &'a RunningStats,
    pub codec: &'a Codec,
}

/// Model-derived flow anchored on the pixels of `(ref_cam, ref_t)`, pointing
/// into `(src_cam, src_t)`.
#[allow(clippy::too_many_arguments)]
pub fn analytic_flow(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    dcfg: &DeformConfig,
    ref_cam: &Camera,
    ref_t: TimeStamp,
    src_cam: &Camera,
    src_t: TimeStamp,
) -> Result<FlowField> {
    let deformed_ref = deform_scene(scene, field, head, ref_t, dcfg)?;
    let deformed_src = deform_scene(scene, field, head, src_t, dcfg)?;

    // Composite the advected and the reference positions with the same
    // reference-view weights, in one pass. Anchoring the flow on the
    // projected reference composite (instead of the raw pixel center)
    // cancels the shared compositing bias, so an identity pair yields
    // exactly zero flow.
    let payload: Vec<f64> = deformed_src
        .iter()
        .zip(&deformed_ref)
        .flat_map(|(s, r)| [s.mean.x, s.mean.y, s.mean.z, r.mean.x, r.mean.y, r.mean.z])
        .collect();
    let ref_out = rasterize_forward(
        &deformed_ref,
        ref_cam,
        Vector3::zeros(),
        scene.sh_degree,
        PayloadSpec::Custom {
            dim: 6,
            values: &payload,
        },
    )?;

    // Depth of the source view for the occlusion test.
    let src_depths: Vec<f64> = deformed_src
        .iter()
        .map(|g| src_cam.world_to_camera(&g.mean).z)
        .collect();
    let src_out = rasterize_forward(
        &deformed_src,
        src_cam,
        Vector3::zeros(),
        scene.sh_degree,
        PayloadSpec::Custom {
            dim: 1,
            values: &src_depths,
        },
    )?;
    let (sw, sh) = (src_cam.width, src_cam.height);
    let src_alpha = &src_out.alpha_map;
    let src_depth_map = &src_out.feature_map;

    let (w, h) = (ref_cam.width, ref_cam.height);
    let mut flow = vec![Vector2::zeros(); w * h];
    let mut mask = vec![false; w * h];
    let mut any_covered = false;
    for y in 0..h {
        for x in 0..w {
            let a = ref_out.alpha_map.get(0, y, x);
            if a < FLOW_ALPHA_MIN {
                continue;
            }
            any_covered = true;
            let p_adv = Vector3::new(
                ref_out.feature_map.get(0, y, x) / a,
                ref_out.feature_map.get(1, y, x) / a,
                ref_out.feature_map.get(2, y, x) / a,
            );
            let p_ref = Vector3::new(
                ref_out.feature_map.get(3, y, x) / a,
                ref_out.feature_map.get(4, y, x) / a,
                ref_out.feature_map.get(5, y, x) / a,
            );
            let (uv, depth) = src_cam.project(&p_adv);
            let (uv_ref, _) = ref_cam.project(&p_ref);
            if depth <= src_cam.near || !uv.x.is_finite() || !uv.y.is_finite() {
                continue;
            }
            // Full bilinear support in the source image.
            if uv.x < 0.5 || uv.x > sw as f64 - 0.5 || uv.y < 0.5 || uv.y > sh as f64 - 0.5 {
                continue;
            }
            let sa = bilinear(src_alpha, 0, uv);
            if sa < FLOW_ALPHA_MIN {
                continue;
            }
            let sd = bilinear(src_depth_map, 0, uv) / sa;
            if (sd - depth).abs() > DEPTH_TOLERANCE * depth.abs() {
                continue;
            }
            let idx = y * w + x;
            flow[idx] = uv - uv_ref;
            mask[idx] = true;
        }
    }
    if !any_covered {
        return Err(Error::Usage(
            "no covered pixels in the reference view; the scene looks untrained".into(),
        ));
    }
    Ok(FlowField {
        width: w,
        height: h,
        flow,
        mask,
    })
}

/// Bilinear sample at a continuous pixel position (pixel centers at +0.5).
fn bilinear(map: &FeatureMap, c: usize, p: Vector2<f64>) -> f64 {
    let (h, w) = (map.height(), map.width());
    let fx = (p.x - 0.5).clamp(0.0, w as f64 - 1.0);
    let fy = (p.y - 0.5).clamp(0.0, h as f64 - 1.0);
    let x0 = (fx.floor() as usize).min(w - 2);
    let y0 = (fy.floor() as usize).min(h - 2);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    (1.0 - ty) * ((1.0 - tx) * map.get(c, y0, x0) + tx * map.get(c, y0, x0 + 1))
        + ty * ((1.0 - tx) * map.get(c, y0 + 1, x0) + tx * map.get(c, y0 + 1, x0 + 1))
}

/// Pull `image` onto the flow's grid: out(x) = image(x + flow(x)).
/// Returns the warped image and the intersected validity mask.
pub fn warp(image: &FeatureMap, flow: &FlowField) -> Result<(FeatureMap, Vec<bool>)> {
    if image.height() != flow.height || image.width() != flow.width {
        return Err(Error::ShapeMismatch("warp image/flow shapes differ".into()));
    }
    let (w, h) = (flow.width, flow.height);
    let mut out = FeatureMap::zeros(image.channels(), h, w);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if !flow.mask[idx] {
                continue;
            }
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5) + flow.flow[idx];
            if p.x < 0.5 || p.x > w as f64 - 0.5 || p.y < 0.5 || p.y > h as f64 - 0.5 {
                continue;
            }
            for c in 0..image.channels() {
                out.set(c, y, x, bilinear(image, c, p));
            }
            mask[idx] = true;
        }
    }
    Ok((out, mask))
}

/// Channel-averaged RMSE between the reference image and the warped source
/// image over valid pixels.
pub fn warped_rmse(reference: &FeatureMap, source: &FeatureMap, flow: &FlowField) -> Result<f64> {
    if !reference.same_shape(source) {
        return Err(Error::ShapeMismatch("warped_rmse shapes differ".into()));
    }
    let (warped, mask) = warp(source, flow)?;
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::Usage("warped_rmse mask is empty".into()));
    }
    let (w, h, c) = (flow.width, flow.height, reference.channels());
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for ch in 0..c {
                let d = reference.get(ch, y, x) - warped.get(ch, y, x);
                acc += d * d;
            }
        }
    }
    Ok((acc / (valid * c) as f64).sqrt())
}

/// Encoder-feature distance between the reference and the masked warped
/// source, with the mask pooled to the feature resolution.
pub fn warped_perceptual(
    reference: &FeatureMap,
    source: &FeatureMap,
    flow: &FlowField,
    codec: &Codec,
) -> Result<f64> {
    if !reference.same_shape(source) {
        return Err(Error::ShapeMismatch("warped_perceptual shapes differ".into()));
    }
    let (mut warped, mask) = warp(source, flow)?;
    if mask.iter().all(|&m| !m) {
        return Err(Error::Usage("warped_perceptual mask is empty".into()));
    }
    // Invalid pixels are zeroed before encoding; the pooled mask keeps them
    // out of the distance.
    let (w, h) = (flow.width, flow.height);
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                for c in 0..warped.channels() {
                    warped.set(c, y, x, 0.0);
                }
            }
        }
    }
    let fa = codec.encode(reference)?;
    let fb = codec.encode(&warped)?;
    let mask_map = FeatureMap::from_fn(1, h, w, |_, y, x| if mask[y * w + x] { 1.0 } else { 0.0 });
    let pooled_mask = mask_map.avg_pool(codec.downsample())?;
    feature_distance_weighted(&fa, &fb, &pooled_mask)
}

// ---------------------------------------------------------------------------
// Consistency protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Axis {
    FixedCamera,
    FixedTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RangeKind {
    Short,
    Long,
}

/// How frames are stylized before the consistency measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StylizeMethod {
    /// Per-splat affine with running-average content statistics.
    PerGaussianRunning,
    /// Rendered feature map normalized by its own per-frame statistics.
    FeatureMapPerFrame,
    /// Encode the RGB render, per-frame pixel-space normalization, decode.
    PixelAdainPerFrame,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub axis: Axis,
    pub range: RangeKind,
    pub method: StylizeMethod,
    pub style_id: String,
    pub wrmse: f64,
    pub wperceptual: f64,
    pub pair_count: usize,
    pub dropped_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub reference_camera: usize,
    /// Frame gap of the fixed-camera long range.
    pub long_gap: usize,
    pub method: StylizeMethod,
    pub include_fixed_camera: bool,
    pub include_fixed_time: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            reference_camera: 0,
            long_gap: 7,
            method: StylizeMethod::PerGaussianRunning,
            include_fixed_camera: true,
            include_fixed_time: true,
        }
    }
}

/// Render one stylized frame with the chosen method.
pub fn render_method_frame(
    model: &TrainedModel,
    method: StylizeMethod,
    style: &StyleCode,
    cam: &Camera,
    t: TimeStamp,
) -> Result<FeatureMap> {
    match method {
        StylizeMethod::PerGaussianRunning => {
            let stylized = stylize_gaussians(model.scene, model.rs, style)?;
            render_feature_frame(
                &stylized, model.field, model.head, &model.dcfg, cam, t, model.codec,
            )
        }
        StylizeMethod::FeatureMapPerFrame => {
            let deformed = deform_scene(model.scene, model.field, model.head, t, &model.dcfg)?;
            let out = rasterize_forward(
                &deformed,
                cam,
                model.scene.background,
                model.scene.sh_degree,
                PayloadSpec::Features,
            )?;
            let pooled = out.feature_map.avg_pool(model.codec.downsample())?;
            let frame_stats = compute_stats(&pooled, None)?;
            let stylized = adain_map(&pooled, &frame_stats, &style.stats)?;
            model.codec.decode(&stylized)
        }
        StylizeMethod::PixelAdainPerFrame => {
            let deformed = deform_scene(model.scene, model.field, model.head, t, &model.dcfg)?;
            let out = rasterize_forward(
                &deformed,
                cam,
                model.scene.background,
                model.scene.sh_degree,
                PayloadSpec::None,
            )?;
            let features = model.codec.encode(&out.color)?;
            let frame_stats = compute_stats(&features, None)?;
            let stylized = adain_map(&features, &frame_stats, &style.stats)?;
            model.codec.decode(&stylized)
        }
    }
}

/// Render a stylized sequence; the per-splat method stylizes once and reuses
/// the transformed scene for every frame.
pub fn render_method_sequence(
    model: &TrainedModel,
    method: StylizeMethod,
    style: &StyleCode,
    cam: &Camera,
    times: &[f64],
) -> Result<Vec<FeatureMap>> {
    match method {
        StylizeMethod::PerGaussianRunning => {
            let stylized = stylize_gaussians(model.scene, model.rs, style)?;
            times
                .iter()
                .map(|&t| {
                    render_feature_frame(
                        &stylized,
                        model.field,
                        model.head,
                        &model.dcfg,
                        cam,
                        TimeStamp::new(t)?,
                        model.codec,
                    )
                })
                .collect()
        }
        _ => times
            .iter()
            .map(|&t| render_method_frame(model, method, style, cam, TimeStamp::new(t)?))
            .collect(),
    }
}

/// One evaluation pair: the reference frame and the frame warped into it.
#[derive(Debug, Clone, Copy)]
struct PairSpec {
    axis: Axis,
    range: RangeKind,
    ref_cam: usize,
    ref_t: f64,
    src_cam: usize,
    src_t: f64,
}

fn build_pairs(
    cameras: &[Camera],
    times: &[f64],
    cfg: &ProtocolConfig,
) -> Result<Vec<PairSpec>> {
    let mut pairs = Vec::new();
    let rc = cfg.reference_camera;
    if rc >= cameras.len() {
        return Err(Error::Usage(format!(
            "reference camera {} out of range ({} cameras)",
            rc,
            cameras.len()
        )));
    }
    if cfg.include_fixed_camera {
        if times.len() < 2 {
            return Err(Error::Usage(
                "fixed-camera axis needs at least 2 frames".into(),
            ));
        }
        for i in 0..times.len() - 1 {
            pairs.push(PairSpec {
                axis: Axis::FixedCamera,
                range: RangeKind::Short,
                ref_cam: rc,
                ref_t: times[i],
                src_cam: rc,
                src_t: times[i + 1],
            });
        }
        let gap = cfg.long_gap.max(1);
        for i in 0..times.len().saturating_sub(gap) {
            pairs.push(PairSpec {
                axis: Axis::FixedCamera,
                range: RangeKind::Long,
                ref_cam: rc,
                ref_t: times[i],
                src_cam: rc,
                src_t: times[i + gap],
            });
        }
    }
    if cfg.include_fixed_time {
        if cameras.len() < 2 {
            return Err(Error::Usage("fixed-time axis needs at least 2 cameras".into()));
        }
        let ref_center = cameras[rc].center();
        let mut others: Vec<(usize, f64)> = cameras
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != rc)
            .map(|(i, c)| (i, (c.center() - ref_center).norm()))
            .collect();
        others.sort_by(|a, b| a.1.total_cmp(&b.1));
        let nearest = others.first().unwrap().0;
        let farthest = others.last().unwrap().0;
        for &t in times {
            pairs.push(PairSpec {
                axis: Axis::FixedTime,
                range: RangeKind::Short,
                ref_cam: rc,
                ref_t: t,
                src_cam: nearest,
                src_t: t,
            });
            pairs.push(PairSpec {
                axis: Axis::FixedTime,
                range: RangeKind::Long,
                ref_cam: rc,
                ref_t: t,
                src_cam: farthest,
                src_t: t,
            });
        }
    }
    Ok(pairs)
}

/// Run the full protocol: flows once per pair, stylized renders once per
/// (camera, time, style), metrics averaged per (axis, range, style).
pub fn consistency_suite(
    model: &TrainedModel,
    cameras: &[Camera],
    times: &[f64],
    styles: &[(String, StyleCode)],
    cfg: &ProtocolConfig,
) -> Result<Vec<ConsistencyReport>> {
    if styles.len() < 2 {
        return Err(Error::Usage(
            "consistency protocol needs at least 2 styles".into(),
        ));
    }
    let pairs = build_pairs(cameras, times, cfg)?;

    // Flow cache keyed by the pair configuration (style-independent).
    let mut flows: Vec<Option<FlowField>> = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let f = analytic_flow(
            model.scene,
            model.field,
            model.head,
            &model.dcfg,
            &cameras[p.ref_cam],
            TimeStamp::new(p.ref_t)?,
            &cameras[p.src_cam],
            TimeStamp::new(p.src_t)?,
        )?;
        flows.push((f.valid_count() > 0).then_some(f));
    }

    // Frame cache per style, keyed by (camera, time-bits).
    let mut reports = Vec::new();
    for (style_id, style) in styles {
        let mut cache: std::collections::HashMap<(usize, u64), FeatureMap> =
            std::collections::HashMap::new();
        let mut frame = |cam: usize, t: f64| -> Result<FeatureMap> {
            let key = (cam, t.to_bits());
            if let Some(f) = cache.get(&key) {
                return Ok(f.clone());
            }
            let f = render_method_frame(
                model,
                cfg.method,
                style,
                &cameras[cam],
                TimeStamp::new(t)?,
            )?;
            cache.insert(key, f.clone());
            Ok(f)
        };

        for axis in [Axis::FixedCamera, Axis::FixedTime] {
            for range in [RangeKind::Short, RangeKind::Long] {
                let selected: Vec<usize> = pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.axis == axis && p.range == range)
                    .map(|(i, _)| i)
                    .collect();
                if selected.is_empty() {
                    continue;
                }
                let mut rmse_sum = 0.0;
                let mut perc_sum = 0.0;
                let mut used = 0usize;
                let mut dropped = 0usize;
                for &pi in &selected {
                    let Some(flow) = &flows[pi] else {
                        dropped += 1;
                        continue;
                    };
                    let p = &pairs[pi];
                    let ref_img = frame(p.ref_cam, p.ref_t)?;
                    let src_img = frame(p.src_cam, p.src_t)?;
                    rmse_sum += warped_rmse(&ref_img, &src_img, flow)?;
                    perc_sum += warped_perceptual(&ref_img, &src_img, flow, model.codec)?;
                    used += 1;
                }
                if used == 0 {
                    return Err(Error::Usage(format!(
                        "all {:?}/{:?} pairs had empty flow masks",
                        axis, range
                    )));
                }
                reports.push(ConsistencyReport {
                    axis,
                    range,
                    method: cfg.method,
                    style_id: style_id.clone(),
                    wrmse: rmse_sum / used as f64,
                    wperceptual: perc_sum / used as f64,
                    pair_count: used,
                    dropped_pairs: dropped,
                });
            }
        }
    }
    Ok(reports)
}

/// Mean over styles for one (axis, range) cell.
pub fn mean_over_styles(
    reports: &[ConsistencyReport],
    axis: Axis,
    range: RangeKind,
) -> Option<(f64, f64)> {
    let rows: Vec<&ConsistencyReport> = reports
        .iter()
        .filter(|r| r.axis == axis && r.range == range)
        .collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.wrmse).sum::<f64>() / n,
        rows.iter().map(|r| r.wperceptual).sum::<f64>() / n,
    ))
}

/// Human-readable table; values scaled by 10³ as in the usual presentation.
pub fn format_report_table(reports: &[ConsistencyReport]) -> String {
    let mut out = String::new();
    out.push_str(
        "method / style                 | fix-cam short    | fix-cam long     | fix-time short   | fix-time long\n",
    );
    out.push_str(
        "                               | RMSE     PERC    | RMSE     PERC    | RMSE     PERC    | RMSE     PERC    (x10^3)\n",
    );
    let mut keys: Vec<(StylizeMethod, String)> = Vec::new();
    for r in reports {
        let key = (r.method, r.style_id.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (method, style_id) in keys {
        let label = format!("{:?} / {}", method, style_id);
        out.push_str(&format!("{:<31}|", label));
        for axis in [Axis::FixedCamera, Axis::FixedTime] {
            for range in [RangeKind::Short, RangeKind::Long] {
                let cell = reports.iter().find(|r| {
                    r.method == method && r.style_id == style_id && r.axis == axis && r.range == range
                });
                match cell {
                    Some(r) => out.push_str(&format!(
                        " {:>8.2} {:>8.2}",
                        r.wrmse * 1e3,
                        r.wperceptual * 1e3
                    )),
                    None => out.push_str(&format!(" {:>8} {:>8}", "-", "-")),
                }
                if range == RangeKind::Short {
                    out.push(' ');
                } else {
                    out.push_str(" |");
                }
            }
        }
        out.push('\n');
    }
    out
}

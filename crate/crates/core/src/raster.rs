//! Tile-based differentiable splatting of color and feature channels.
//!
//! Projection follows the EWA approximation: the 3D covariance is pushed
//! through the local perspective Jacobian, a low-pass floor is added, and
//! splats are composited front-to-back per pixel with shared weights for
//! color and payload channels. The backward pass replays each pixel
//! back-to-front from the stored final transmittance, so memory stays
//! proportional to the pixel count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmap::FeatureMap;
use crate::gradops::record_grad_op;
use crate::scene::{
    self, rotation_matrix, rotation_matrix_grads, sh_basis, sh_basis_grads, sigmoid, Camera,
    Gaussian, SCALE_FLOOR,
};

/// Per-splat compositing weight cap.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Front-to-back traversal stops when transmittance would drop below this.
pub const TERMINATION_T: f64 = 1e-4;
/// Low-pass floor added to the 2D covariance diagonal.
pub const LOWPASS: f64 = 0.3;
/// Splat radius in units of the largest 2D standard deviation.
pub const RADIUS_SCALE: f64 = 3.0;
pub const DEFAULT_TILE_SIZE: usize = 16;

/// A splat surviving projection and frustum culling.
#[derive(Debug, Clone)]
pub struct SplatProjection {
    /// Projected center in pixel coordinates.
    pub mean2d: Vector2<f64>,
    /// Inverse 2D covariance, upper triangle (a, b, c) of [[a,b],[b,c]].
    pub conic: [f64; 3],
    /// Camera-space depth.
    pub depth: f64,
    /// Extent in pixels used for binning and the per-pixel cutoff.
    pub radius: f64,
    pub gaussian_index: usize,
    /// Activated opacity.
    pub alpha: f64,
    /// Clamped view-dependent color and its pre-clamp value.
    pub color: [f64; 3],
    pub color_raw: [f64; 3],
    /// 2D covariance (a, b, c), kept for the backward chain.
    pub cov2d: [f64; 3],
}

/// Project one (deformed) splat; `None` means culled. The caller owns
/// `gaussian_index` (set to 0 here).
pub fn project_gaussian(g: &Gaussian, cam: &Camera, sh_degree: usize) -> Option<SplatProjection> {
    let p_cam = cam.world_to_camera(&g.mean);
    let depth = p_cam.z;
    if !depth.is_finite() || depth <= cam.near || depth >= cam.far {
        return None;
    }

    let sigma = scene::covariance_from_params(&g.rotation, &g.log_scale).ok()?;

    // Perspective Jacobian at the mean (2×3), composed with the view rotation.
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let j = jacobian(cam.fx, cam.fy, x, y, z);
    let m = j * cam.rotation;
    let cov = m * sigma * m.transpose();
    let a = cov[(0, 0)] + LOWPASS;
    let b = cov[(0, 1)];
    let c = cov[(1, 1)] + LOWPASS;

    let det = a * c - b * b;
    if !(det > 1e-12) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = RADIUS_SCALE * lambda_max.sqrt();
    if !radius.is_finite() {
        return None;
    }

    let mean2d = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    if mean2d.x + radius < 0.0
        || mean2d.x - radius > cam.width as f64
        || mean2d.y + radius < 0.0
        || mean2d.y - radius > cam.height as f64
    {
        return None;
    }

    debug_assert_eq!(g.color_coeffs.len(), scene::sh_coeff_count(sh_degree));
    let dir = cam.view_direction(&g.mean);
    let color_raw = scene::sh_to_color_raw(&g.color_coeffs, &dir);
    let color = [
        color_raw[0].clamp(0.0, 1.0),
        color_raw[1].clamp(0.0, 1.0),
        color_raw[2].clamp(0.0, 1.0),
    ];

    Some(SplatProjection {
        mean2d,
        conic: [c / det, -b / det, a / det],
        depth,
        radius,
        gaussian_index: 0,
        alpha: sigmoid(g.opacity_logit),
        color,
        color_raw,
        cov2d: [a, b, c],
    })
}

#[inline]
fn jacobian(fx: f64, fy: f64, x: f64, y: f64, z: f64) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        fx / z,
        0.0,
        -fx * x / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    )
}

/// Project every splat, keeping source indices in order.
pub fn project_all(gaussians: &[Gaussian], cam: &Camera, sh_degree: usize) -> Vec<SplatProjection> {
    gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, cam, sh_degree).map(|mut p| {
                p.gaussian_index = i;
                p
            })
        })
        .collect()
}

/// Per-tile splat lists, sorted by (depth, gaussian_index).
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Indices into the projection array.
    pub lists: Vec<Vec<u32>>,
}

pub fn bin_tiles(
    projections: &[SplatProjection],
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileGrid {
    assert!(tile_size > 0);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (j, p) in projections.iter().enumerate() {
        let x1 = ((p.mean2d.x + p.radius) / tile_size as f64).floor() as isize;
        let y1 = ((p.mean2d.y + p.radius) / tile_size as f64).floor() as isize;
        if x1 < 0 || y1 < 0 {
            continue;
        }
        let x0 = ((p.mean2d.x - p.radius) / tile_size as f64).floor().max(0.0) as usize;
        let y0 = ((p.mean2d.y - p.radius) / tile_size as f64).floor().max(0.0) as usize;
        let x1 = (x1 as usize).min(tiles_x - 1);
        let y1 = (y1 as usize).min(tiles_y - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * tiles_x + tx].push(j as u32);
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            let (pa, pb) = (&projections[a as usize], &projections[b as usize]);
            pa.depth
                .total_cmp(&pb.depth)
                .then(pa.gaussian_index.cmp(&pb.gaussian_index))
        });
    }
    TileGrid {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}

/// What gets composited alongside color.
#[derive(Debug, Clone, Copy)]
pub enum PayloadSpec<'a> {
    /// No extra channels.
    None,
    /// The per-splat feature vectors.
    Features,
    /// Arbitrary per-splat rows, `values[i*dim..(i+1)*dim]` for splat i.
    Custom { dim: usize, values: &'a [f64] },
}

impl<'a> PayloadSpec<'a> {
    fn dim(&self, gaussians: &[Gaussian]) -> usize {
        match self {
            PayloadSpec::None => 0,
            PayloadSpec::Features => gaussians.first().map(|g| g.feature.len()).unwrap_or(0),
            PayloadSpec::Custom { dim, .. } => *dim,
        }
    }

    fn row(&self, gaussians: &'a [Gaussian], i: usize) -> &'a [f64] {
        match self {
            PayloadSpec::None => &[],
            PayloadSpec::Features => &gaussians[i].feature,
            PayloadSpec::Custom { dim, values } => &values[i * dim..(i + 1) * dim],
        }
    }

    fn kind(&self) -> PayloadKind {
        match self {
            PayloadSpec::None => PayloadKind::None,
            PayloadSpec::Features => PayloadKind::Features,
            PayloadSpec::Custom { .. } => PayloadKind::Custom,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PayloadKind {
    None,
    Features,
    Custom,
}

/// Forward rendering result plus the replay state for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: FeatureMap,
    /// Composited payload channels (0 channels when no payload requested).
    pub feature_map: FeatureMap,
    /// Accumulated Σ α̂ᵢTᵢ per pixel.
    pub alpha_map: FeatureMap,
    /// Transmittance remaining after the last composited splat.
    pub t_final: Vec<f64>,
    /// Tile-list entries consumed per pixel before termination.
    pub n_processed: Vec<u32>,
    pub projections: Vec<SplatProjection>,
    pub tiles: TileGrid,
    pub background: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    payload_dim: usize,
    payload_kind: PayloadKind,
}

/// Render color (+ payload channels) for a deformed splat array.
pub fn rasterize_forward(
    gaussians: &[Gaussian],
    cam: &Camera,
    background: Vector3<f64>,
    sh_degree: usize,
    payload: PayloadSpec,
) -> Result<RenderOutput> {
    rasterize_with_tile_size(gaussians, cam, background, sh_degree, payload, DEFAULT_TILE_SIZE)
}

pub fn rasterize_with_tile_size(
    gaussians: &[Gaussian],
    cam: &Camera,
    background: Vector3<f64>,
    sh_degree: usize,
    payload: PayloadSpec,
    tile_size: usize,
) -> Result<RenderOutput> {
    let payload_dim = payload.dim(gaussians);
    if let PayloadSpec::Custom { dim, values } = payload {
        if values.len() != dim * gaussians.len() {
            return Err(Error::ShapeMismatch(format!(
                "payload has {} values, expected {}",
                values.len(),
                dim * gaussians.len()
            )));
        }
    }
    let (w, h) = (cam.width, cam.height);
    let projections = project_all(gaussians, cam, sh_degree);
    let tiles = bin_tiles(&projections, w, h, tile_size);

    let mut color = FeatureMap::zeros(3, h, w);
    let mut fmap = FeatureMap::zeros(payload_dim, h, w);
    let mut alpha = FeatureMap::zeros(1, h, w);
    let mut t_final = vec![1.0; w * h];
    let mut n_processed = vec![0u32; w * h];

    // One band per tile row; bands write disjoint output rows.
    let bands: Vec<BandOutput> = (0..tiles.tiles_y)
        .into_par_iter()
        .map(|ty| {
            composite_band(
                ty,
                gaussians,
                &projections,
                &tiles,
                &payload,
                payload_dim,
                background,
                w,
                h,
            )
        })
        .collect();

    for (ty, band) in bands.iter().enumerate() {
        let y0 = ty * tile_size;
        let rows = band.rows;
        for r in 0..rows {
            let y = y0 + r;
            for c in 0..3 {
                color.channel_mut(c)[y * w..(y + 1) * w]
                    .copy_from_slice(&band.color[(c * rows + r) * w..(c * rows + r + 1) * w]);
            }
            for c in 0..payload_dim {
                fmap.channel_mut(c)[y * w..(y + 1) * w]
                    .copy_from_slice(&band.payload[(c * rows + r) * w..(c * rows + r + 1) * w]);
            }
            alpha.channel_mut(0)[y * w..(y + 1) * w]
                .copy_from_slice(&band.alpha[r * w..(r + 1) * w]);
            t_final[y * w..(y + 1) * w].copy_from_slice(&band.t_final[r * w..(r + 1) * w]);
            n_processed[y * w..(y + 1) * w].copy_from_slice(&band.n_processed[r * w..(r + 1) * w]);
        }
    }

    Ok(RenderOutput {
        color,
        feature_map: fmap,
        alpha_map: alpha,
        t_final,
        n_processed,
        projections,
        tiles,
        background,
        width: w,
        height: h,
        payload_dim,
        payload_kind: payload.kind(),
    })
}

struct BandOutput {
    rows: usize,
    color: Vec<f64>,
    payload: Vec<f64>,
    alpha: Vec<f64>,
    t_final: Vec<f64>,
    n_processed: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
fn composite_band(
    ty: usize,
    gaussians: &[Gaussian],
    projections: &[SplatProjection],
    tiles: &TileGrid,
    payload: &PayloadSpec,
    payload_dim: usize,
    background: Vector3<f64>,
    w: usize,
    h: usize,
) -> BandOutput {
    let ts = tiles.tile_size;
    let y0 = ty * ts;
    let rows = ts.min(h - y0);
    let mut out = BandOutput {
        rows,
        color: vec![0.0; 3 * rows * w],
        payload: vec![0.0; payload_dim * rows * w],
        alpha: vec![0.0; rows * w],
        t_final: vec![1.0; rows * w],
        n_processed: vec![0; rows * w],
    };
    let mut payload_acc = vec![0.0; payload_dim];
    for r in 0..rows {
        let y = y0 + r;
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let list = &tiles.lists[ty * tiles.tiles_x + x / ts];
            let mut t = 1.0f64;
            let mut alpha_sum = 0.0f64;
            let mut c_acc = [0.0f64; 3];
            payload_acc.iter_mut().for_each(|v| *v = 0.0);
            let mut consumed = 0u32;
            for &j in list.iter() {
                let p = &projections[j as usize];
                match splat_weight(p, px, py) {
                    SplatStep::Skip => {
                        consumed += 1;
                    }
                    SplatStep::Contribute { alpha_hat } => {
                        let t_next = t * (1.0 - alpha_hat);
                        if t_next < TERMINATION_T {
                            break;
                        }
                        let wgt = alpha_hat * t;
                        for c in 0..3 {
                            c_acc[c] += wgt * p.color[c];
                        }
                        if payload_dim > 0 {
                            let row = payload.row(gaussians, p.gaussian_index);
                            for (acc, v) in payload_acc.iter_mut().zip(row) {
                                *acc += wgt * v;
                            }
                        }
                        alpha_sum += wgt;
                        t = t_next;
                        consumed += 1;
                    }
                }
            }
            let pi = r * w + x;
            for c in 0..3 {
                out.color[(c * rows + r) * w + x] = c_acc[c] + background[c] * (1.0 - alpha_sum);
            }
            for c in 0..payload_dim {
                out.payload[(c * rows + r) * w + x] = payload_acc[c];
            }
            out.alpha[pi] = alpha_sum;
            out.t_final[pi] = t;
            out.n_processed[pi] = consumed;
        }
    }
    out
}

enum SplatStep {
    Skip,
    Contribute { alpha_hat: f64 },
}

/// Shared per-pixel contribution rule; identical in forward and backward.
#[inline]
fn splat_weight(p: &SplatProjection, px: f64, py: f64) -> SplatStep {
    let dx = px - p.mean2d.x;
    let dy = py - p.mean2d.y;
    if dx * dx + dy * dy > p.radius * p.radius {
        return SplatStep::Skip;
    }
    let q = 0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) + p.conic[1] * dx * dy;
    if !(q >= 0.0) {
        return SplatStep::Skip;
    }
    let alpha_hat = (p.alpha * (-q).exp()).min(ALPHA_CLAMP);
    SplatStep::Contribute { alpha_hat }
}

/// Upstream gradients for [`rasterize_backward`]; any subset may be present.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderGrads<'a> {
    pub d_color: Option<&'a FeatureMap>,
    pub d_feature: Option<&'a FeatureMap>,
    pub d_alpha: Option<&'a FeatureMap>,
}

/// Gradients on the (deformed) splat parameters.
#[derive(Debug, Clone)]
pub struct RasterGrads {
    pub d_mean: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub d_opacity_logit: Vec<f64>,
    pub d_color_coeffs: Vec<Vec<[f64; 3]>>,
    pub d_feature: Vec<Vec<f64>>,
    /// Gradient rows for a custom payload, when one was rendered.
    pub d_custom_payload: Option<Vec<f64>>,
    /// Screen-space mean gradients in pixel units (densification signal).
    pub d_mean2d: Vec<Vector2<f64>>,
}

impl RasterGrads {
    fn zeros(gaussians: &[Gaussian], payload_dim: usize, custom: bool) -> Self {
        Self {
            d_mean: vec![Vector3::zeros(); gaussians.len()],
            d_rotation: vec![[0.0; 4]; gaussians.len()],
            d_log_scale: vec![Vector3::zeros(); gaussians.len()],
            d_opacity_logit: vec![0.0; gaussians.len()],
            d_color_coeffs: gaussians
                .iter()
                .map(|g| vec![[0.0; 3]; g.color_coeffs.len()])
                .collect(),
            d_feature: gaussians
                .iter()
                .map(|g| vec![0.0; if custom { 0 } else { g.feature.len() }])
                .collect(),
            d_custom_payload: custom.then(|| vec![0.0; payload_dim * gaussians.len()]),
            d_mean2d: vec![Vector2::zeros(); gaussians.len()],
        }
    }
}

/// Exact reverse-mode gradients of [`rasterize_forward`].
pub fn rasterize_backward(
    gaussians: &[Gaussian],
    cam: &Camera,
    sh_degree: usize,
    payload: PayloadSpec,
    out: &RenderOutput,
    upstream: RenderGrads,
) -> Result<RasterGrads> {
    record_grad_op();
    if out.n_processed.len() != out.width * out.height {
        return Err(Error::Usage(
            "render output is missing replay data for backward".into(),
        ));
    }
    if payload.kind() != out.payload_kind || payload.dim(gaussians) != out.payload_dim {
        return Err(Error::Usage(
            "backward payload does not match the forward pass".into(),
        ));
    }
    for (name, m, ch) in [
        ("d_color", upstream.d_color, 3),
        ("d_feature", upstream.d_feature, out.payload_dim),
        ("d_alpha", upstream.d_alpha, 1),
    ] {
        if let Some(m) = m {
            if m.channels() != ch || m.height() != out.height || m.width() != out.width {
                return Err(Error::ShapeMismatch(format!(
                    "upstream {} has shape {}x{}x{}, expected {}x{}x{}",
                    name,
                    m.channels(),
                    m.height(),
                    m.width(),
                    ch,
                    out.height,
                    out.width
                )));
            }
        }
    }

    let pdim = out.payload_dim;
    // Per-entry layout: mean2d(2) conic(3) alpha(1) color(3) payload(pdim).
    let stride = 9 + pdim;

    let tile_grads: Vec<Vec<f64>> = (0..out.tiles.lists.len())
        .into_par_iter()
        .map(|tile_idx| backward_tile(tile_idx, gaussians, out, &payload, upstream, stride))
        .collect();

    // Reduce tile-local entry gradients into per-projection accumulators in
    // fixed tile order.
    let np = out.projections.len();
    let mut d_mean2d = vec![Vector2::zeros(); np];
    let mut d_conic = vec![[0.0f64; 3]; np];
    let mut d_alpha_act = vec![0.0f64; np];
    let mut d_color_px = vec![[0.0f64; 3]; np];
    let mut d_payload_rows = vec![0.0f64; np * pdim];
    for (tile_idx, buf) in tile_grads.iter().enumerate() {
        let list = &out.tiles.lists[tile_idx];
        for (e, &j) in list.iter().enumerate() {
            let j = j as usize;
            let b = &buf[e * stride..(e + 1) * stride];
            d_mean2d[j].x += b[0];
            d_mean2d[j].y += b[1];
            d_conic[j][0] += b[2];
            d_conic[j][1] += b[3];
            d_conic[j][2] += b[4];
            d_alpha_act[j] += b[5];
            d_color_px[j][0] += b[6];
            d_color_px[j][1] += b[7];
            d_color_px[j][2] += b[8];
            for k in 0..pdim {
                d_payload_rows[j * pdim + k] += b[9 + k];
            }
        }
    }

    // Chain projection-level gradients to splat parameters.
    let custom = matches!(payload, PayloadSpec::Custom { .. });
    let mut grads = RasterGrads::zeros(gaussians, pdim, custom);
    let per_splat: Vec<SplatChain> = out
        .projections
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            chain_projection(
                p,
                &gaussians[p.gaussian_index],
                cam,
                sh_degree,
                &d_mean2d[j],
                &d_conic[j],
                d_alpha_act[j],
                &d_color_px[j],
            )
        })
        .collect();
    for (j, chain) in per_splat.into_iter().enumerate() {
        let p = &out.projections[j];
        let gi = p.gaussian_index;
        grads.d_mean[gi] += chain.d_mean;
        for k in 0..4 {
            grads.d_rotation[gi][k] += chain.d_rotation[k];
        }
        grads.d_log_scale[gi] += chain.d_log_scale;
        grads.d_opacity_logit[gi] += chain.d_opacity_logit;
        for (dst, src) in grads.d_color_coeffs[gi].iter_mut().zip(&chain.d_color_coeffs) {
            for c in 0..3 {
                dst[c] += src[c];
            }
        }
        grads.d_mean2d[gi] += d_mean2d[j];
        match payload {
            PayloadSpec::Features => {
                for k in 0..pdim {
                    grads.d_feature[gi][k] += d_payload_rows[j * pdim + k];
                }
            }
            PayloadSpec::Custom { .. } => {
                let rows = grads.d_custom_payload.as_mut().expect("custom grads");
                for k in 0..pdim {
                    rows[gi * pdim + k] += d_payload_rows[j * pdim + k];
                }
            }
            PayloadSpec::None => {}
        }
    }
    Ok(grads)
}

/// Back-to-front replay of every pixel in one tile; returns the per-entry
/// gradient buffer.
fn backward_tile(
    tile_idx: usize,
    gaussians: &[Gaussian],
    out: &RenderOutput,
    payload: &PayloadSpec,
    upstream: RenderGrads,
    stride: usize,
) -> Vec<f64> {
    let tiles = &out.tiles;
    let ts = tiles.tile_size;
    let tx = tile_idx % tiles.tiles_x;
    let ty = tile_idx / tiles.tiles_x;
    let list = &tiles.lists[tile_idx];
    let mut buf = vec![0.0f64; list.len() * stride];
    if list.is_empty() {
        return buf;
    }
    let pdim = out.payload_dim;
    let x0 = tx * ts;
    let y0 = ty * ts;
    let x1 = (x0 + ts).min(out.width);
    let y1 = (y0 + ts).min(out.height);
    let mut d_payload_px = vec![0.0f64; pdim];

    for y in y0..y1 {
        let py = y as f64 + 0.5;
        for x in x0..x1 {
            let pi = y * out.width + x;
            let n_proc = out.n_processed[pi] as usize;
            if n_proc == 0 {
                continue;
            }
            let px = x as f64 + 0.5;

            let d_color_px: [f64; 3] = match upstream.d_color {
                Some(m) => [m.get(0, y, x), m.get(1, y, x), m.get(2, y, x)],
                None => [0.0; 3],
            };
            for (k, v) in d_payload_px.iter_mut().enumerate() {
                *v = match upstream.d_feature {
                    Some(m) => m.get(k, y, x),
                    None => 0.0,
                };
            }
            let d_alpha_px = upstream.d_alpha.map(|m| m.get(0, y, x)).unwrap_or(0.0);
            if d_color_px == [0.0; 3] && d_alpha_px == 0.0 && d_payload_px.iter().all(|&v| v == 0.0)
            {
                continue;
            }

            // C = Σ cᵢwᵢ + bg·(1 − Σ wᵢ) ⇒ ∂C/∂wᵢ = cᵢ − bg.
            let bg_dot = d_color_px[0] * out.background.x
                + d_color_px[1] * out.background.y
                + d_color_px[2] * out.background.z;

            let mut t_after = out.t_final[pi];
            let mut suffix = 0.0f64; // Σ_{k>i} G_k w_k
            for e in (0..n_proc).rev() {
                let j = list[e] as usize;
                let p = &out.projections[j];
                let alpha_hat = match splat_weight(p, px, py) {
                    SplatStep::Skip => continue,
                    SplatStep::Contribute { alpha_hat } => alpha_hat,
                };
                let t_i = t_after / (1.0 - alpha_hat);
                let w_i = alpha_hat * t_i;

                let row = payload.row(gaussians, p.gaussian_index);
                let mut g_i = d_alpha_px - bg_dot;
                for c in 0..3 {
                    g_i += d_color_px[c] * p.color[c];
                }
                for k in 0..pdim {
                    g_i += d_payload_px[k] * row[k];
                }

                let d_alpha_hat = g_i * t_i - suffix / (1.0 - alpha_hat);

                let b = &mut buf[e * stride..(e + 1) * stride];
                for c in 0..3 {
                    b[6 + c] += d_color_px[c] * w_i;
                }
                for k in 0..pdim {
                    b[9 + k] += d_payload_px[k] * w_i;
                }
                // The weight clamp kills gradient into alpha and the exponent.
                if alpha_hat < ALPHA_CLAMP {
                    let dx = px - p.mean2d.x;
                    let dy = py - p.mean2d.y;
                    let q = 0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy)
                        + p.conic[1] * dx * dy;
                    let expq = (-q).exp();
                    b[5] += d_alpha_hat * expq;
                    let d_q = -alpha_hat * d_alpha_hat;
                    // ∂q/∂mean2d = −Q·d.
                    b[0] += -d_q * (p.conic[0] * dx + p.conic[1] * dy);
                    b[1] += -d_q * (p.conic[1] * dx + p.conic[2] * dy);
                    b[2] += d_q * 0.5 * dx * dx;
                    b[3] += d_q * dx * dy;
                    b[4] += d_q * 0.5 * dy * dy;
                }

                suffix += g_i * w_i;
                t_after = t_i;
            }
        }
    }
    buf
}

struct SplatChain {
    d_mean: Vector3<f64>,
    d_rotation: [f64; 4],
    d_log_scale: Vector3<f64>,
    d_opacity_logit: f64,
    d_color_coeffs: Vec<[f64; 3]>,
}

/// Chain (mean2d, conic, alpha, color) gradients back to 3D parameters.
#[allow(clippy::too_many_arguments)]
fn chain_projection(
    p: &SplatProjection,
    g: &Gaussian,
    cam: &Camera,
    sh_degree: usize,
    d_mean2d: &Vector2<f64>,
    d_conic: &[f64; 3],
    d_alpha_act: f64,
    d_color_px: &[f64; 3],
) -> SplatChain {
    let mut d_mean = Vector3::zeros();
    let mut d_pcam = Vector3::zeros();

    // Opacity activation.
    let d_opacity_logit = d_alpha_act * p.alpha * (1.0 - p.alpha);

    // Color clamp mask and SH chain (including the view-direction term).
    let n_coeffs = g.color_coeffs.len();
    let mut d_color_coeffs = vec![[0.0; 3]; n_coeffs];
    {
        let dir = cam.view_direction(&g.mean);
        let basis = sh_basis(sh_degree, &dir);
        let mut d_raw = [0.0; 3];
        for c in 0..3 {
            let open = p.color_raw[c] > 0.0 && p.color_raw[c] < 1.0;
            d_raw[c] = if open { d_color_px[c] } else { 0.0 };
        }
        if d_raw != [0.0; 3] {
            for (k, b) in basis.iter().enumerate() {
                for c in 0..3 {
                    d_color_coeffs[k][c] = b * d_raw[c];
                }
            }
            if sh_degree > 0 {
                let bgrads = sh_basis_grads(sh_degree, &dir);
                let mut d_dir = Vector3::zeros();
                for (k, bg) in bgrads.iter().enumerate() {
                    let coef_dot: f64 = (0..3).map(|c| g.color_coeffs[k][c] * d_raw[c]).sum();
                    d_dir += bg * coef_dot;
                }
                // dir = v/‖v‖ with v = mean − camera center.
                let v = g.mean - cam.center();
                let n = v.norm();
                if n > 0.0 {
                    d_mean += (d_dir - dir * dir.dot(&d_dir)) / n;
                }
            }
        }
    }

    // conic = inv(cov2d): full-matrix gradient Ĝ_V = −Q·Ĝ_Q·Q.
    let q_mat = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_q = Matrix2::new(d_conic[0], d_conic[1] * 0.5, d_conic[1] * 0.5, d_conic[2]);
    let g_v_full = -(q_mat * g_q * q_mat);

    // cov2d = M Σ Mᵀ + LOWPASS·I with M = J·W.
    let sigma = scene::covariance_from_params(&g.rotation, &g.log_scale)
        .expect("projection implies valid covariance");
    let p_cam = cam.world_to_camera(&g.mean);
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let j = jacobian(cam.fx, cam.fy, x, y, z);
    let m = j * cam.rotation;

    let g_sigma = m.transpose() * g_v_full * m;
    let g_m = (g_v_full + g_v_full.transpose()) * m * sigma;
    let g_j = g_m * cam.rotation.transpose();

    // J entries: J00 = fx/z, J02 = −fx·x/z², J11 = fy/z, J12 = −fy·y/z².
    let z2 = z * z;
    let z3 = z2 * z;
    d_pcam.x += g_j[(0, 2)] * (-cam.fx / z2);
    d_pcam.y += g_j[(1, 2)] * (-cam.fy / z2);
    d_pcam.z += g_j[(0, 0)] * (-cam.fx / z2)
        + g_j[(0, 2)] * (2.0 * cam.fx * x / z3)
        + g_j[(1, 1)] * (-cam.fy / z2)
        + g_j[(1, 2)] * (2.0 * cam.fy * y / z3);

    // Σ = L Lᵀ, L = R·diag(s).
    let r = rotation_matrix(&g.rotation);
    let s = g.scales();
    let l = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    let g_l = (g_sigma + g_sigma.transpose()) * l;
    let mut d_log_scale = Vector3::zeros();
    let mut g_r = Matrix3::zeros();
    for col in 0..3 {
        let mut gs = 0.0;
        for row in 0..3 {
            g_r[(row, col)] = g_l[(row, col)] * s[col];
            gs += g_l[(row, col)] * r[(row, col)];
        }
        // d s/d log_scale = s above the activation floor, 0 at the clamp.
        d_log_scale[col] = if g.log_scale[col].exp() > SCALE_FLOOR {
            gs * s[col]
        } else {
            0.0
        };
    }
    let rg = rotation_matrix_grads(&g.rotation);
    let mut d_rotation = [0.0; 4];
    for k in 0..4 {
        d_rotation[k] = g_r.component_mul(&rg[k]).sum();
    }

    // mean2d = (fx·x/z + cx, fy·y/z + cy).
    d_pcam.x += d_mean2d.x * cam.fx / z;
    d_pcam.y += d_mean2d.y * cam.fy / z;
    d_pcam.z += -d_mean2d.x * cam.fx * x / z2 - d_mean2d.y * cam.fy * y / z2;

    // p_cam = W·mean + t.
    d_mean += cam.rotation.transpose() * d_pcam;

    SplatChain {
        d_mean,
        d_rotation,
        d_log_scale,
        d_opacity_logit,
        d_color_coeffs,
    }
}

//! Time-conditioned deformation of the canonical scene.
//!
//! A hexplane field (six 2D planes per resolution level, bilinearly sampled
//! and fused by elementwise product, concatenated across levels) feeds a
//! small MLP head that outputs offsets for mean, rotation, and log-scale.
//! The head's final layer is zero-initialized so deformation starts as the
//! identity.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradops::record_grad_op;
use crate::scene::{Gaussian, GaussianScene};

/// Normalized time in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStamp(f64);

impl TimeStamp {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidParameter(format!(
                "timestamp {} outside [0,1]",
                t
            )));
        }
        Ok(Self(t))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// One 2D grid of `dim`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn constant(rows: usize, cols: usize, dim: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            dim,
            data: vec![v; rows * cols * dim],
        }
    }

    #[inline]
    pub fn node(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn node_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.cols + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// Plane order within a level. The first axis indexes rows, the second
/// columns; `T` uses the temporal resolution.
pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

/// (row axis, col axis) per plane; axes 0..2 are x,y,z and 3 is t.
const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Debug, Clone, PartialEq)]
pub struct FieldLevel {
    pub spatial_res: usize,
    pub temporal_res: usize,
    pub planes: [Plane; 6],
}

/// Factorized 4D feature volume over the scene bounding box × [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneField {
    pub plane_feature_dim: usize,
    pub levels: Vec<FieldLevel>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl HexPlaneField {
    /// Grids initialized around 1 so the multiplicative fusion starts with
    /// O(1) features.
    pub fn new_seeded(
        plane_feature_dim: usize,
        resolutions: &[(usize, usize)],
        bbox_min: Vector3<f64>,
        bbox_max: Vector3<f64>,
        seed: u64,
    ) -> Result<Self> {
        for axis in 0..3 {
            if !(bbox_min[axis] < bbox_max[axis]) {
                return Err(Error::InvalidParameter("empty field bounding box".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = Vec::new();
        for &(sr, tr) in resolutions {
            if sr < 2 || tr < 2 {
                return Err(Error::InvalidParameter(
                    "plane resolutions must be >= 2".into(),
                ));
            }
            let mut planes = Vec::with_capacity(6);
            for &(ra, ca) in PLANE_AXES.iter() {
                let rows = if ra == 3 { tr } else { sr };
                let cols = if ca == 3 { tr } else { sr };
                let mut p = Plane::constant(rows, cols, plane_feature_dim, 0.0);
                for v in p.data.iter_mut() {
                    *v = 1.0 + rng.gen_range(-0.15..0.15);
                }
                planes.push(p);
            }
            levels.push(FieldLevel {
                spatial_res: sr,
                temporal_res: tr,
                planes: planes.try_into().expect("six planes"),
            });
        }
        Ok(Self {
            plane_feature_dim,
            levels,
            bbox_min,
            bbox_max,
        })
    }

    /// Output length of [`sample_field`].
    pub fn fused_dim(&self) -> usize {
        self.plane_feature_dim * self.levels.len()
    }

    /// Spatial coordinates normalized to [-1, 1] (clamped); returns the
    /// per-axis derivative factor, zero where clamping was active.
    pub fn normalized_coords(&self, p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let mut coords = Vector3::zeros();
        let mut dcoord_dp = Vector3::zeros();
        for axis in 0..3 {
            let extent = self.bbox_max[axis] - self.bbox_min[axis];
            let raw = 2.0 * (p[axis] - self.bbox_min[axis]) / extent - 1.0;
            coords[axis] = raw.clamp(-1.0, 1.0);
            dcoord_dp[axis] = if (-1.0..=1.0).contains(&raw) {
                2.0 / extent
            } else {
                0.0
            };
        }
        (coords, dcoord_dp)
    }

    pub fn num_parameters(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.planes.iter().map(|p| p.data.len()).sum::<usize>())
            .sum()
    }
}

/// Bilinear lattice coordinates for one plane axis: grid position, fractional
/// weight, and d(grid pos)/d(normalized coord).
#[inline]
fn lattice(coord_norm01: f64, res: usize) -> (usize, f64, f64) {
    let u = coord_norm01 * (res - 1) as f64;
    let i0 = (u.floor() as isize).clamp(0, res as isize - 2) as usize;
    (i0, u - i0 as f64, (res - 1) as f64)
}

/// Per-gaussian forward cache for the field + head.
#[derive(Debug, Clone)]
pub struct DeformEntry {
    /// Normalized coords in [-1,1] plus t, and clamp-aware derivative factors.
    coords: Vector3<f64>,
    dcoord_dp: Vector3<f64>,
    /// Sampled per-plane vectors, `levels × 6 × dim`.
    plane_values: Vec<f64>,
    /// Fused features (MLP input).
    fused: Vec<f64>,
    /// Post-activation hidden outputs per hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Raw head output (d_mean 3, d_rot 4, d_log_scale 3).
    out: [f64; 10],
    /// q + Δq before normalization.
    rot_sum: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct DeformCache {
    pub t: f64,
    entries: Vec<DeformEntry>,
}

/// Sample the field at a position/time: bilinear per plane, elementwise
/// product across the six planes, concatenated across levels.
pub fn sample_field(field: &HexPlaneField, position: &Vector3<f64>, t: TimeStamp) -> Vec<f64> {
    let (fused, _) = sample_field_inner(field, position, t.value());
    fused
}

/// Returns (fused features, per-plane sampled values levels×6×dim).
fn sample_field_inner(
    field: &HexPlaneField,
    position: &Vector3<f64>,
    t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = field.plane_feature_dim;
    let (coords, _) = field.normalized_coords(position);
    // Axis values in [0,1] grid space: spatial from [-1,1], t as-is.
    let axis01 = [
        (coords.x + 1.0) * 0.5,
        (coords.y + 1.0) * 0.5,
        (coords.z + 1.0) * 0.5,
        t,
    ];
    let mut fused = Vec::with_capacity(field.fused_dim());
    let mut plane_values = Vec::with_capacity(field.levels.len() * 6 * d);
    for level in &field.levels {
        let mut prod = vec![1.0; d];
        for (pi, &(ra, ca)) in PLANE_AXES.iter().enumerate() {
            let plane = &level.planes[pi];
            let (r0, fr, _) = lattice(axis01[ra], plane.rows);
            let (c0, fc, _) = lattice(axis01[ca], plane.cols);
            let g00 = plane.node(r0, c0);
            let g01 = plane.node(r0, c0 + 1);
            let g10 = plane.node(r0 + 1, c0);
            let g11 = plane.node(r0 + 1, c0 + 1);
            for k in 0..d {
                let v = (1.0 - fr) * ((1.0 - fc) * g00[k] + fc * g01[k])
                    + fr * ((1.0 - fc) * g10[k] + fc * g11[k]);
                plane_values.push(v);
                prod[k] *= v;
            }
        }
        fused.extend_from_slice(&prod);
    }
    (fused, plane_values)
}

/// Dense layer, weights stored row-major (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }
}

/// MLP mapping fused plane features to parameter offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationHead {
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
}

pub const DEFORM_OUT_DIM: usize = 10;

impl DeformationHead {
    /// Hidden layers He-initialized, output layer exactly zero.
    pub fn new_seeded(input_dim: usize, hidden_dims: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_dims {
            let std = (2.0 / prev as f64).sqrt();
            let weight = (0..h * prev)
                .map(|_| normal_sample(&mut rng) * std)
                .collect();
            hidden.push(DenseLayer {
                in_dim: prev,
                out_dim: h,
                weight,
                bias: vec![0.0; h],
            });
            prev = h;
        }
        let output = DenseLayer {
            in_dim: prev,
            out_dim: DEFORM_OUT_DIM,
            weight: vec![0.0; DEFORM_OUT_DIM * prev],
            bias: vec![0.0; DEFORM_OUT_DIM],
        };
        Self { hidden, output }
    }

    pub fn is_identity_initialized(&self) -> bool {
        self.output.weight.iter().all(|&w| w == 0.0)
            && self.output.bias.iter().all(|&b| b == 0.0)
    }

    pub fn num_parameters(&self) -> usize {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.output))
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Returns (hidden post-activations per layer, output).
    fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, [f64; 10]) {
        let mut acts = Vec::with_capacity(self.hidden.len());
        let mut cur = x.to_vec();
        let mut buf = Vec::new();
        for layer in &self.hidden {
            layer.forward(&cur, &mut buf);
            for v in buf.iter_mut() {
                *v = v.max(0.0);
            }
            acts.push(buf.clone());
            std::mem::swap(&mut cur, &mut buf);
        }
        let mut out_buf = Vec::new();
        self.output.forward(&cur, &mut out_buf);
        let mut out = [0.0; 10];
        out.copy_from_slice(&out_buf);
        (acts, out)
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformConfig {
    /// Deform rotation and scale in addition to position.
    pub deform_rotation_scale: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            deform_rotation_scale: true,
        }
    }
}

/// Deform every splat to time `t`. Opacity, color, and features stay
/// canonical.
pub fn deform_scene(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    t: TimeStamp,
    cfg: &DeformConfig,
) -> Result<Vec<Gaussian>> {
    deform_scene_cached(scene, field, head, t, cfg).map(|(g, _)| g)
}

pub fn deform_scene_cached(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    t: TimeStamp,
    cfg: &DeformConfig,
) -> Result<(Vec<Gaussian>, DeformCache)> {
    let head_in = head
        .hidden
        .first()
        .map(|l| l.in_dim)
        .unwrap_or(head.output.in_dim);
    if head_in != field.fused_dim() {
        return Err(Error::ShapeMismatch(format!(
            "head input dim {} != field fused dim {}",
            head_in,
            field.fused_dim()
        )));
    }
    let tv = t.value();
    let results: Vec<(Gaussian, DeformEntry)> = scene
        .gaussians
        .par_iter()
        .map(|g| {
            let (coords, dcoord_dp) = field.normalized_coords(&g.mean);
            let (fused, plane_values) = sample_field_inner(field, &g.mean, tv);
            let (hidden, out) = head.forward(&fused);

            let mut dg = g.clone();
            dg.mean += Vector3::new(out[0], out[1], out[2]);
            let mut rot_sum = g.rotation;
            if cfg.deform_rotation_scale {
                let dq = [out[3], out[4], out[5], out[6]];
                if dq != [0.0; 4] {
                    for k in 0..4 {
                        rot_sum[k] += dq[k];
                    }
                    let n = rot_sum.iter().map(|v| v * v).sum::<f64>().sqrt();
                    for k in 0..4 {
                        dg.rotation[k] = rot_sum[k] / n;
                    }
                }
                dg.log_scale += Vector3::new(out[7], out[8], out[9]);
            }
            let entry = DeformEntry {
                coords,
                dcoord_dp,
                plane_values,
                fused,
                hidden,
                out,
                rot_sum,
            };
            (dg, entry)
        })
        .collect();

    let mut gaussians = Vec::with_capacity(results.len());
    let mut entries = Vec::with_capacity(results.len());
    for (g, e) in results {
        gaussians.push(g);
        entries.push(e);
    }
    Ok((gaussians, DeformCache { t: tv, entries }))
}

/// Gradients on everything the deformation touches.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    /// Mirrors `HexPlaneField` plane data: levels × 6 planes.
    pub planes: Vec<[Vec<f64>; 6]>,
}

impl FieldGrads {
    pub fn zeros(field: &HexPlaneField) -> Self {
        let planes = field
            .levels
            .iter()
            .map(|l| {
                let mk = |i: usize| vec![0.0; l.planes[i].data.len()];
                [mk(0), mk(1), mk(2), mk(3), mk(4), mk(5)]
            })
            .collect();
        Self { planes }
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            for (pa, pb) in a.iter_mut().zip(b) {
                for (x, y) in pa.iter_mut().zip(pb) {
                    *x += y;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    /// (d_weight, d_bias) per layer, hidden layers first, output last.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl HeadGrads {
    pub fn zeros(head: &DeformationHead) -> Self {
        let layers = head
            .hidden
            .iter()
            .chain(std::iter::once(&head.output))
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        Self { layers }
    }

    fn add(&mut self, other: &Self) {
        for ((aw, ab), (bw, bb)) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in aw.iter_mut().zip(bw) {
                *x += y;
            }
            for (x, y) in ab.iter_mut().zip(bb) {
                *x += y;
            }
        }
    }
}

pub struct DeformGrads {
    /// Gradients on canonical per-splat parameters.
    pub d_mean: Vec<Vector3<f64>>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_log_scale: Vec<Vector3<f64>>,
    pub field: FieldGrads,
    pub head: HeadGrads,
}

/// Exact reverse-mode gradients of [`deform_scene`].
///
/// `d_mean_def`, `d_rot_def`, `d_ls_def` are upstream gradients on the
/// deformed parameters, indexed like the scene.
pub fn deformation_backward(
    scene: &GaussianScene,
    field: &HexPlaneField,
    head: &DeformationHead,
    cfg: &DeformConfig,
    cache: &DeformCache,
    d_mean_def: &[Vector3<f64>],
    d_rot_def: &[[f64; 4]],
    d_ls_def: &[Vector3<f64>],
) -> Result<DeformGrads> {
    record_grad_op();
    let n = scene.gaussians.len();
    if cache.entries.len() != n || d_mean_def.len() != n {
        return Err(Error::Usage(
            "deformation backward called without a matching forward cache".into(),
        ));
    }
    let d = field.plane_feature_dim;
    let nlevels = field.levels.len();

    // Per-chunk partial accumulators, reduced in chunk order afterwards so
    // the result does not depend on scheduling.
    let chunk = 512usize;
    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<(FieldGrads, HeadGrads, Vec<(usize, Vector3<f64>, [f64; 4], Vector3<f64>)>)> =
        indices
            .par_chunks(chunk)
            .map(|ids| {
                let mut fg = FieldGrads::zeros(field);
                let mut hg = HeadGrads::zeros(head);
                let mut per_gauss = Vec::with_capacity(ids.len());
                for &i in ids {
                    let e = &cache.entries[i];

                    // Gradient on the raw head output vector.
                    let mut d_out = [0.0; 10];
                    d_out[0] = d_mean_def[i].x;
                    d_out[1] = d_mean_def[i].y;
                    d_out[2] = d_mean_def[i].z;

                    let mut d_rot_canonical = [0.0; 4];
                    if cfg.deform_rotation_scale {
                        // v = q + Δq, u = v/‖v‖: Jᵀg = g/n − v (v·g)/n³.
                        let v = e.rot_sum;
                        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let gdot: f64 = (0..4).map(|k| v[k] * d_rot_def[i][k]).sum();
                        let dq_was_zero = e.out[3..7].iter().all(|&x| x == 0.0);
                        for k in 0..4 {
                            let dv = d_rot_def[i][k] / nv - v[k] * gdot / (nv * nv * nv);
                            d_out[3 + k] = dv;
                            // Forward skipped the normalization when Δq was
                            // exactly zero, so the canonical quaternion passed
                            // through untouched.
                            d_rot_canonical[k] = if dq_was_zero { d_rot_def[i][k] } else { dv };
                        }
                        d_out[7] = d_ls_def[i].x;
                        d_out[8] = d_ls_def[i].y;
                        d_out[9] = d_ls_def[i].z;
                    } else {
                        d_rot_canonical = d_rot_def[i];
                    }
                    let d_ls_canonical = d_ls_def[i];

                    // MLP backward.
                    let d_fused = head_backward(head, e, &d_out, &mut hg);

                    // Fusion + plane backward: d_fused distributes over the
                    // product terms, then bilinear weights scatter to grids
                    // and chain to the query coordinates.
                    let mut d_axis01 = [0.0f64; 4];
                    let axis01 = [
                        (e.coords.x + 1.0) * 0.5,
                        (e.coords.y + 1.0) * 0.5,
                        (e.coords.z + 1.0) * 0.5,
                        cache.t,
                    ];
                    for li in 0..nlevels {
                        let level = &field.levels[li];
                        let base = li * 6 * d;
                        for k in 0..d {
                            let df = d_fused[li * d + k];
                            if df == 0.0 {
                                continue;
                            }
                            // d prod / d value_pi = product of the others.
                            for pi in 0..6 {
                                let mut others = df;
                                for pj in 0..6 {
                                    if pj != pi {
                                        others *= e.plane_values[base + pj * d + k];
                                    }
                                }
                                let (ra, ca) = PLANE_AXES[pi];
                                let plane = &level.planes[pi];
                                let (r0, fr, rscale) = lattice(axis01[ra], plane.rows);
                                let (c0, fc, cscale) = lattice(axis01[ca], plane.cols);
                                let gp = &mut fg.planes[li][pi];
                                let idx = |r: usize, c: usize| (r * plane.cols + c) * d + k;
                                gp[idx(r0, c0)] += others * (1.0 - fr) * (1.0 - fc);
                                gp[idx(r0, c0 + 1)] += others * (1.0 - fr) * fc;
                                gp[idx(r0 + 1, c0)] += others * fr * (1.0 - fc);
                                gp[idx(r0 + 1, c0 + 1)] += others * fr * fc;

                                let g00 = plane.node(r0, c0)[k];
                                let g01 = plane.node(r0, c0 + 1)[k];
                                let g10 = plane.node(r0 + 1, c0)[k];
                                let g11 = plane.node(r0 + 1, c0 + 1)[k];
                                let dval_dfr = (1.0 - fc) * (g10 - g00) + fc * (g11 - g01);
                                let dval_dfc = (1.0 - fr) * (g01 - g00) + fr * (g11 - g10);
                                d_axis01[ra] += others * dval_dfr * rscale;
                                d_axis01[ca] += others * dval_dfc * cscale;
                            }
                        }
                    }

                    // Chain to the canonical mean: axis01 = (coord+1)/2,
                    // coord = clamp(2(x-min)/extent - 1).
                    let mut d_mean = d_mean_def[i];
                    for axis in 0..3 {
                        d_mean[axis] += d_axis01[axis] * 0.5 * e.dcoord_dp[axis];
                    }
                    per_gauss.push((i, d_mean, d_rot_canonical, d_ls_canonical));
                }
                (fg, hg, per_gauss)
            })
            .collect();

    let mut field_grads = FieldGrads::zeros(field);
    let mut head_grads = HeadGrads::zeros(head);
    let mut d_mean = vec![Vector3::zeros(); n];
    let mut d_rotation = vec![[0.0; 4]; n];
    let mut d_log_scale = vec![Vector3::zeros(); n];
    for (fg, hg, per_gauss) in &partials {
        field_grads.add(fg);
        head_grads.add(hg);
        for &(i, dm, dr, dl) in per_gauss {
            d_mean[i] = dm;
            d_rotation[i] = dr;
            d_log_scale[i] = dl;
        }
    }
    Ok(DeformGrads {
        d_mean,
        d_rotation,
        d_log_scale,
        field: field_grads,
        head: head_grads,
    })
}

/// Backprop through the head for one splat; accumulates weight grads and
/// returns the gradient on the fused input.
fn head_backward(
    head: &DeformationHead,
    e: &DeformEntry,
    d_out: &[f64; 10],
    hg: &mut HeadGrads,
) -> Vec<f64> {
    let last_hidden = e.hidden.last().map(|v| v.as_slice()).unwrap_or(&e.fused);
    let out_idx = head.hidden.len();

    // Output layer.
    let mut d_cur = vec![0.0; head.output.in_dim];
    {
        let (dw, db) = &mut hg.layers[out_idx];
        for o in 0..head.output.out_dim {
            let go = d_out[o];
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let row = o * head.output.in_dim;
            for i in 0..head.output.in_dim {
                dw[row + i] += go * last_hidden[i];
                d_cur[i] += go * head.output.weight[row + i];
            }
        }
    }

    // Hidden layers, back to front.
    for li in (0..head.hidden.len()).rev() {
        let layer = &head.hidden[li];
        let input: &[f64] = if li == 0 { &e.fused } else { &e.hidden[li - 1] };
        let act = &e.hidden[li];
        let mut d_prev = vec![0.0; layer.in_dim];
        let (dw, db) = &mut hg.layers[li];
        for o in 0..layer.out_dim {
            // ReLU mask from the post-activation value.
            let go = if act[o] > 0.0 { d_cur[o] } else { 0.0 };
            if go == 0.0 {
                continue;
            }
            db[o] += go;
            let row = o * layer.in_dim;
            for i in 0..layer.in_dim {
                dw[row + i] += go * input[i];
                d_prev[i] += go * layer.weight[row + i];
            }
        }
        d_cur = d_prev;
    }
    d_cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::normalize_quaternion;
    use rand::Rng;

    fn test_field(seed: u64) -> HexPlaneField {
        HexPlaneField::new_seeded(
            4,
            &[(4, 3), (6, 4)],
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            seed,
        )
        .unwrap()
    }

    fn test_scene(n: usize, seed: u64) -> GaussianScene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| {
                let mut g = Gaussian::isotropic(
                    Vector3::new(
                        rng.gen_range(-0.7..0.7),
                        rng.gen_range(-0.7..0.7),
                        rng.gen_range(-0.7..0.7),
                    ),
                    0.1,
                    0.6,
                    [0.4, 0.5, 0.6],
                    2,
                );
                let mut q = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                normalize_quaternion(&mut q);
                g.rotation = q;
                g
            })
            .collect();
        GaussianScene::new(gaussians, 2, Vector3::zeros(), 0).unwrap()
    }

    #[test]
    fn timestamp_rejects_out_of_range() {
        assert!(TimeStamp::new(-0.1).is_err());
        assert!(TimeStamp::new(1.1).is_err());
        assert!(TimeStamp::new(0.0).is_ok());
        assert!(TimeStamp::new(1.0).is_ok());
    }

    #[test]
    fn constant_planes_sample_to_ones() {
        let mut field = test_field(1);
        for level in &mut field.levels {
            for p in &mut level.planes {
                p.data.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let out = sample_field(
            &field,
            &Vector3::new(0.3, -0.2, 0.5),
            TimeStamp::new(0.4).unwrap(),
        );
        assert_eq!(out.len(), field.fused_dim());
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn grid_node_query_returns_node_product() {
        let mut field = HexPlaneField::new_seeded(
            1,
            &[(3, 3)],
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            7,
        )
        .unwrap();
        // Distinct node values per plane; query at the exact center node.
        for (pi, p) in field.levels[0].planes.iter_mut().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    p.node_mut(r, c)[0] = 1.0 + 0.1 * (pi as f64) + 0.01 * ((r * 3 + c) as f64);
                }
            }
        }
        // Position (0,0,0) normalizes to axis value 0.5 → node index 1 on a
        // 3-grid; t = 0.5 likewise.
        let out = sample_field(&field, &Vector3::zeros(), TimeStamp::new(0.5).unwrap());
        let expected: f64 = (0..6)
            .map(|pi| field.levels[0].planes[pi].node(1, 1)[0])
            .product();
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cell_center_bilinear_average() {
        // 2×2 plane with corners (0,1,2,3): cell-center query must read 1.5.
        let mut field = HexPlaneField::new_seeded(
            1,
            &[(2, 2)],
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            3,
        )
        .unwrap();
        for p in field.levels[0].planes.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let p = &mut field.levels[0].planes[0]; // xy plane
        p.node_mut(0, 0)[0] = 0.0;
        p.node_mut(0, 1)[0] = 1.0;
        p.node_mut(1, 0)[0] = 2.0;
        p.node_mut(1, 1)[0] = 3.0;
        let out = sample_field(&field, &Vector3::zeros(), TimeStamp::new(0.5).unwrap());
        assert!((out[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identity_at_init_is_bitwise() {
        let field = test_field(11);
        let head = DeformationHead::new_seeded(field.fused_dim(), &[8, 8], 5);
        assert!(head.is_identity_initialized());
        let scene = test_scene(5, 3);
        for t in [0.0, 0.31, 1.0] {
            let out = deform_scene(
                &scene,
                &field,
                &head,
                TimeStamp::new(t).unwrap(),
                &DeformConfig::default(),
            )
            .unwrap();
            for (a, b) in out.iter().zip(&scene.gaussians) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn field_is_continuous_in_time() {
        // Finite-difference slope along t must not jump by more than 10×
        // between neighboring probes inside grid cells.
        let field = test_field(21);
        let pos = Vector3::new(0.21, -0.37, 0.4);
        let probe = |t: f64| sample_field(&field, &pos, TimeStamp::new(t).unwrap());
        let h = 1e-4;
        // Interior of the first temporal cell of the coarse level.
        let ts: Vec<f64> = (1..40).map(|i| 0.02 + 0.1 * i as f64 / 40.0).collect();
        let mut slopes = Vec::new();
        for &t in &ts {
            let a = probe(t - h);
            let b = probe(t + h);
            let slope: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| ((y - x) / (2.0 * h)).abs())
                .fold(0.0, f64::max);
            slopes.push(slope.max(1e-9));
        }
        for w in slopes.windows(2) {
            assert!(w[1] <= 10.0 * w[0] && w[0] <= 10.0 * w[1]);
        }
    }

    /// Scalar probe loss: random linear functional of every deformed field.
    fn probe_loss(
        scene: &GaussianScene,
        field: &HexPlaneField,
        head: &DeformationHead,
        t: TimeStamp,
        cfg: &DeformConfig,
        w: &[f64],
    ) -> f64 {
        let out = deform_scene(scene, field, head, t, cfg).unwrap();
        let mut acc = 0.0;
        let mut k = 0;
        for g in &out {
            for a in 0..3 {
                acc += w[k] * g.mean[a];
                k += 1;
            }
            for a in 0..4 {
                acc += w[k] * g.rotation[a];
                k += 1;
            }
            for a in 0..3 {
                acc += w[k] * g.log_scale[a];
                k += 1;
            }
        }
        acc
    }

    #[test]
    fn backward_matches_finite_differences() {
        let field = test_field(31);
        let mut head = DeformationHead::new_seeded(field.fused_dim(), &[8, 8], 17);
        // Non-trivial output layer so all paths carry signal.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for v in head.output.weight.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in head.output.bias.iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let scene = test_scene(2, 9);
        let cfg = DeformConfig::default();
        let t = TimeStamp::new(0.43).unwrap();

        let nw = scene.len() * 10;
        let w: Vec<f64> = (0..nw).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = deform_scene_cached(&scene, &field, &head, t, &cfg).unwrap();
        let d_mean: Vec<Vector3<f64>> = (0..scene.len())
            .map(|i| Vector3::new(w[i * 10], w[i * 10 + 1], w[i * 10 + 2]))
            .collect();
        let d_rot: Vec<[f64; 4]> = (0..scene.len())
            .map(|i| [w[i * 10 + 3], w[i * 10 + 4], w[i * 10 + 5], w[i * 10 + 6]])
            .collect();
        let d_ls: Vec<Vector3<f64>> = (0..scene.len())
            .map(|i| Vector3::new(w[i * 10 + 7], w[i * 10 + 8], w[i * 10 + 9]))
            .collect();
        let grads =
            deformation_backward(&scene, &field, &head, &cfg, &cache, &d_mean, &d_rot, &d_ls)
                .unwrap();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

        // All head weights (every layer).
        let mut head_params: Vec<(usize, bool, usize)> = Vec::new();
        for (li, l) in head.hidden.iter().enumerate() {
            for i in 0..l.weight.len() {
                head_params.push((li, true, i));
            }
            for i in 0..l.bias.len() {
                head_params.push((li, false, i));
            }
        }
        for i in 0..head.output.weight.len() {
            head_params.push((head.hidden.len(), true, i));
        }
        for i in 0..head.output.bias.len() {
            head_params.push((head.hidden.len(), false, i));
        }
        for (li, is_w, i) in head_params {
            let get = |hd: &DeformationHead| -> f64 {
                let l = if li < hd.hidden.len() {
                    &hd.hidden[li]
                } else {
                    &hd.output
                };
                if is_w {
                    l.weight[i]
                } else {
                    l.bias[i]
                }
            };
            let setv = |hd: &mut DeformationHead, v: f64| {
                let l = if li < hd.hidden.len() {
                    &mut hd.hidden[li]
                } else {
                    &mut hd.output
                };
                if is_w {
                    l.weight[i] = v;
                } else {
                    l.bias[i] = v;
                }
            };
            let orig = get(&head);
            setv(&mut head, orig + h);
            let lp = probe_loss(&scene, &field, &head, t, &cfg, &w);
            setv(&mut head, orig - h);
            let lm = probe_loss(&scene, &field, &head, t, &cfg, &w);
            setv(&mut head, orig);
            let fd = (lp - lm) / (2.0 * h);
            let an = if is_w {
                grads.head.layers[li].0[i]
            } else {
                grads.head.layers[li].1[i]
            };
            assert!(
                rel(fd, an) <= 1e-3 || (fd.abs() < 1e-8 && an.abs() < 1e-8),
                "head layer {} {} idx {}: fd {} analytic {}",
                li,
                if is_w { "w" } else { "b" },
                i,
                fd,
                an
            );
        }

        // A sample of field grid values.
        let mut field_mut = field.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..60 {
            let li = rng2.gen_range(0..field.levels.len());
            let pi = rng2.gen_range(0..6);
            let idx = rng2.gen_range(0..field.levels[li].planes[pi].data.len());
            let orig = field_mut.levels[li].planes[pi].data[idx];
            field_mut.levels[li].planes[pi].data[idx] = orig + h;
            let lp = probe_loss(&scene, &field_mut, &head, t, &cfg, &w);
            field_mut.levels[li].planes[pi].data[idx] = orig - h;
            let lm = probe_loss(&scene, &field_mut, &head, t, &cfg, &w);
            field_mut.levels[li].planes[pi].data[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.field.planes[li][pi][idx];
            assert!(
                rel(fd, an) <= 1e-3 || (fd.abs() < 1e-8 && an.abs() < 1e-8),
                "field level {} plane {} idx {}: fd {} analytic {}",
                li,
                pi,
                idx,
                fd,
                an
            );
        }

        // Canonical means (both direct and through-the-field paths).
        let mut scene_mut = scene.clone();
        for i in 0..scene.len() {
            for axis in 0..3 {
                let orig = scene_mut.gaussians[i].mean[axis];
                scene_mut.gaussians[i].mean[axis] = orig + h;
                let lp = probe_loss(&scene_mut, &field, &head, t, &cfg, &w);
                scene_mut.gaussians[i].mean[axis] = orig - h;
                let lm = probe_loss(&scene_mut, &field, &head, t, &cfg, &w);
                scene_mut.gaussians[i].mean[axis] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.d_mean[i][axis];
                assert!(
                    rel(fd, an) <= 1e-3,
                    "mean {} axis {}: fd {} analytic {}",
                    i,
                    axis,
                    fd,
                    an
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let field = test_field(5);
        let head = DeformationHead::new_seeded(field.fused_dim(), &[8], 2);
        let scene = test_scene(3, 1);
        let cfg = DeformConfig::default();
        let (_, cache) =
            deform_scene_cached(&scene, &field, &head, TimeStamp::new(0.2).unwrap(), &cfg)
                .unwrap();
        let zv = vec![Vector3::zeros(); 3];
        let zq = vec![[0.0; 4]; 3];
        let grads =
            deformation_backward(&scene, &field, &head, &cfg, &cache, &zv, &zq, &zv).unwrap();
        assert!(grads.d_mean.iter().all(|v| v.norm() == 0.0));
        assert!(grads
            .head
            .layers
            .iter()
            .all(|(w, b)| w.iter().all(|&x| x == 0.0) && b.iter().all(|&x| x == 0.0)));
        assert!(grads
            .field
            .planes
            .iter()
            .all(|ps| ps.iter().all(|p| p.iter().all(|&x| x == 0.0))));
    }

    #[test]
    fn identity_head_passes_mean_grad_through() {
        // With a zero output layer the Δμ path is inactive, so the canonical
        // mean gradient equals the upstream mean gradient exactly.
        let field = test_field(6);
        let head = DeformationHead::new_seeded(field.fused_dim(), &[8], 2);
        let scene = test_scene(3, 2);
        let cfg = DeformConfig::default();
        let (_, cache) =
            deform_scene_cached(&scene, &field, &head, TimeStamp::new(0.7).unwrap(), &cfg)
                .unwrap();
        let up: Vec<Vector3<f64>> = (0..3).map(|i| Vector3::new(i as f64, 1.0, -2.0)).collect();
        let zq = vec![[0.0; 4]; 3];
        let zv = vec![Vector3::zeros(); 3];
        let grads =
            deformation_backward(&scene, &field, &head, &cfg, &cache, &up, &zq, &zv).unwrap();
        for i in 0..3 {
            assert_eq!(grads.d_mean[i], up[i]);
        }
    }

    #[test]
    fn backward_without_cache_shape_is_usage_error() {
        let field = test_field(6);
        let head = DeformationHead::new_seeded(field.fused_dim(), &[8], 2);
        let scene = test_scene(3, 2);
        let cfg = DeformConfig::default();
        let (_, cache) =
            deform_scene_cached(&scene, &field, &head, TimeStamp::new(0.7).unwrap(), &cfg)
                .unwrap();
        let bigger = test_scene(4, 2);
        let zv = vec![Vector3::zeros(); 4];
        let zq = vec![[0.0; 4]; 4];
        let r = deformation_backward(&bigger, &field, &head, &cfg, &cache, &zv, &zq, &zv);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}

//! Shared test support: scene generators, the untiled brute-force
//! compositing oracle, and finite-difference helpers.
//!
//! The oracle deliberately avoids the tile machinery it is used to check:
//! every pixel traverses the full globally-sorted splat list.

#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynsplat::raster::{self, PayloadSpec, SplatProjection};
use dynsplat::scene::{normalize_quaternion, Camera, Gaussian, GaussianScene};
use dynsplat::FeatureMap;

pub fn axis_camera(fx: f64, w: usize, h: usize) -> Camera {
    Camera::new(
        fx,
        fx,
        w as f64 / 2.0,
        h as f64 / 2.0,
        w,
        h,
        Matrix3::identity(),
        Vector3::zeros(),
        0.1,
        100.0,
    )
    .unwrap()
}

/// Random scene kept away from gradient kinks: opacities below the clamp,
/// colors inside (0,1), scales above the activation floor.
pub fn random_scene(
    n: usize,
    feature_dim: usize,
    sh_degree: usize,
    seed: u64,
) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_coeffs = dynsplat::scene::sh_coeff_count(sh_degree);
    let gaussians: Vec<Gaussian> = (0..n)
        .map(|_| {
            let mean = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(2.0..6.0),
            );
            let mut g = Gaussian::isotropic(mean, 1.0, 0.35, [0.5; 3], feature_dim);
            let mut q = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            normalize_quaternion(&mut q);
            g.rotation = q;
            g.log_scale = Vector3::new(
                rng.gen_range(-3.0..-1.2),
                rng.gen_range(-3.0..-1.2),
                rng.gen_range(-3.0..-1.2),
            );
            g.opacity_logit = dynsplat::scene::inverse_sigmoid(rng.gen_range(0.2..0.5));
            let mut coeffs = vec![[0.0f64; 3]; n_coeffs];
            for c in 0..3 {
                coeffs[0][c] = rng.gen_range(-0.4..0.4);
            }
            for coef in coeffs.iter_mut().skip(1) {
                for c in 0..3 {
                    coef[c] = rng.gen_range(-0.08..0.08);
                }
            }
            g.color_coeffs = coeffs;
            for f in g.feature.iter_mut() {
                *f = rng.gen_range(-1.0..1.0);
            }
            g
        })
        .collect();
    GaussianScene::new(
        gaussians,
        feature_dim,
        Vector3::new(0.15, 0.1, 0.2),
        sh_degree,
    )
    .unwrap()
}

pub struct BruteForceRender {
    pub color: FeatureMap,
    pub feature_map: FeatureMap,
    pub alpha_map: FeatureMap,
}

/// Untiled per-pixel compositing with the same contribution rule as the
/// rasterizer (radius cutoff, weight clamp, termination threshold).
pub fn brute_force_render(
    gaussians: &[Gaussian],
    cam: &Camera,
    background: Vector3<f64>,
    sh_degree: usize,
    feature_dim: usize,
) -> BruteForceRender {
    let mut projections: Vec<SplatProjection> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            raster::project_gaussian(g, cam, sh_degree).map(|mut p| {
                p.gaussian_index = i;
                p
            })
        })
        .collect();
    projections.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });

    let (w, h) = (cam.width, cam.height);
    let mut color = FeatureMap::zeros(3, h, w);
    let mut fmap = FeatureMap::zeros(feature_dim, h, w);
    let mut alpha = FeatureMap::zeros(1, h, w);

    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut t = 1.0f64;
            let mut alpha_sum = 0.0;
            let mut c_acc = [0.0f64; 3];
            let mut f_acc = vec![0.0f64; feature_dim];
            for p in &projections {
                let dx = px - p.mean2d.x;
                let dy = py - p.mean2d.y;
                if dx * dx + dy * dy > p.radius * p.radius {
                    continue;
                }
                let q = 0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy)
                    + p.conic[1] * dx * dy;
                if !(q >= 0.0) {
                    continue;
                }
                let alpha_hat = (p.alpha * (-q).exp()).min(raster::ALPHA_CLAMP);
                let t_next = t * (1.0 - alpha_hat);
                if t_next < raster::TERMINATION_T {
                    break;
                }
                let wgt = alpha_hat * t;
                for c in 0..3 {
                    c_acc[c] += wgt * p.color[c];
                }
                for (acc, v) in f_acc
                    .iter_mut()
                    .zip(&gaussians[p.gaussian_index].feature)
                {
                    *acc += wgt * v;
                }
                alpha_sum += wgt;
                t = t_next;
            }
            for c in 0..3 {
                color.set(c, y, x, c_acc[c] + background[c] * (1.0 - alpha_sum));
            }
            for k in 0..feature_dim {
                fmap.set(k, y, x, f_acc[k]);
            }
            alpha.set(0, y, x, alpha_sum);
        }
    }
    BruteForceRender {
        color,
        feature_map: fmap,
        alpha_map: alpha,
    }
}

/// Relative error with an absolute floor, for FD comparisons.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Smooth pixel weight maps for scalarizing render outputs in FD tests.
pub fn weight_map(channels: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(channels, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Weighted sum of render outputs; the scalar loss used by FD checks.
pub fn weighted_render_loss(
    gaussians: &[Gaussian],
    cam: &Camera,
    background: Vector3<f64>,
    sh_degree: usize,
    wc: &FeatureMap,
    wf: &FeatureMap,
    wa: &FeatureMap,
) -> f64 {
    let out = raster::rasterize_forward(gaussians, cam, background, sh_degree, PayloadSpec::Features)
        .unwrap();
    let mut acc = 0.0;
    acc += out
        .color
        .data()
        .iter()
        .zip(wc.data())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    acc += out
        .feature_map
        .data()
        .iter()
        .zip(wf.data())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    acc += out
        .alpha_map
        .data()
        .iter()
        .zip(wa.data())
        .map(|(a, b)| a * b)
        .sum::<f64>();
    acc
}

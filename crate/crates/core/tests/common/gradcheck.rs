//! Reusable finite-difference sweep over every trainable parameter class of
//! the full pipeline (deformation → rasterizer → losses).

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynsplat::codec::{Codec, CodecSpec};
use dynsplat::deform::{DeformConfig, DeformationHead, HexPlaneField, TimeStamp};
use dynsplat::scene::{inverse_sigmoid, normalize_quaternion, Camera, Gaussian, GaussianScene};
use dynsplat::train::{loss_and_grads, loss_value};
use dynsplat::FeatureMap;

use super::rel_err;

pub const H: f64 = 1e-5;

pub struct GradSetup {
    pub scene: GaussianScene,
    pub field: HexPlaneField,
    pub head: DeformationHead,
    pub dcfg: DeformConfig,
    pub cam: Camera,
    pub image: FeatureMap,
    pub codec: Codec,
    pub supervision: FeatureMap,
    pub t: TimeStamp,
    pub lambda: f64,
}

pub fn build_setup(seed: u64) -> GradSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(
        10.0,
        10.0,
        4.0,
        4.0,
        8,
        8,
        Matrix3::identity(),
        Vector3::zeros(),
        0.1,
        100.0,
    )
    .unwrap();

    let gaussians: Vec<Gaussian> = (0..8)
        .map(|_| {
            let mut g = Gaussian::isotropic(
                Vector3::new(
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(-0.8..0.8),
                    rng.gen_range(2.5..5.5),
                ),
                0.2,
                0.35,
                [0.5; 3],
                3,
            );
            let mut q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            normalize_quaternion(&mut q);
            g.rotation = q;
            g.log_scale = Vector3::new(
                rng.gen_range(-2.5..-1.2),
                rng.gen_range(-2.5..-1.2),
                rng.gen_range(-2.5..-1.2),
            );
            g.opacity_logit = inverse_sigmoid(rng.gen_range(0.25..0.45));
            let mut coeffs = vec![[0.0f64; 3]; 4];
            for c in 0..3 {
                coeffs[0][c] = rng.gen_range(-0.3..0.3);
            }
            for coef in coeffs.iter_mut().skip(1) {
                for c in 0..3 {
                    coef[c] = rng.gen_range(-0.06..0.06);
                }
            }
            g.color_coeffs = coeffs;
            for f in g.feature.iter_mut() {
                *f = rng.gen_range(-1.0..1.0);
            }
            g
        })
        .collect();
    let scene = GaussianScene::new(gaussians, 3, Vector3::new(0.1, 0.15, 0.2), 1).unwrap();

    let field = HexPlaneField::new_seeded(
        4,
        &[(4, 3), (6, 4)],
        Vector3::new(-2.0, -2.0, 1.5),
        Vector3::new(2.0, 2.0, 6.5),
        seed ^ 0x11,
    )
    .unwrap();
    let mut head = DeformationHead::new_seeded(field.fused_dim(), &[10, 10], seed ^ 0x22);
    for v in head.output.weight.iter_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    for v in head.output.bias.iter_mut() {
        *v = rng.gen_range(-0.01..0.01);
    }

    let image = FeatureMap::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0..1.0));
    let codec = Codec::new_seeded(CodecSpec {
        feature_dim: 3,
        downsample: 4,
        widths: [4, 6],
        seed: seed ^ 0x33,
    });
    let supervision = codec.encode(&image).unwrap();

    GradSetup {
        scene,
        field,
        head,
        dcfg: DeformConfig::default(),
        cam,
        image,
        codec,
        supervision,
        t: TimeStamp::new(0.37).unwrap(),
        lambda: 0.2,
    }
}

pub fn eval_loss(s: &GradSetup) -> f64 {
    loss_value(
        &s.scene,
        &s.field,
        &s.head,
        &s.dcfg,
        &s.cam,
        &s.image,
        s.t,
        s.lambda,
        Some((&s.codec, &s.supervision)),
    )
    .unwrap()
}

/// Run the sweep: returns (number of nontrivial gradients checked, failures).
pub fn full_gradient_sweep(seed: u64) -> (usize, Vec<String>) {
    let mut s = build_setup(seed);
    let grads = loss_and_grads(
        &s.scene,
        &s.field,
        &s.head,
        &s.dcfg,
        &s.cam,
        &s.image,
        s.t,
        s.lambda,
        Some((&s.codec, &s.supervision)),
        false,
    )
    .unwrap();

    let mut failures: Vec<String> = Vec::new();
    let mut nontrivial = 0usize;
    macro_rules! check {
        ($name:expr, $fd:expr, $an:expr) => {{
            let (fd, an): (f64, f64) = ($fd, $an);
            if !(fd.abs() < 1e-8 && an.abs() < 1e-8) {
                nontrivial += 1;
                if rel_err(fd, an) > 1e-3 {
                    failures.push(format!(
                        "{}: fd {} an {} rel {}",
                        $name,
                        fd,
                        an,
                        rel_err(fd, an)
                    ));
                }
            }
        }};
    }

    let n = s.scene.len();
    for i in 0..n {
        for axis in 0..3 {
            let orig = s.scene.gaussians[i].mean[axis];
            s.scene.gaussians[i].mean[axis] = orig + H;
            let lp = eval_loss(&s);
            s.scene.gaussians[i].mean[axis] = orig - H;
            let lm = eval_loss(&s);
            s.scene.gaussians[i].mean[axis] = orig;
            check!(
                format!("mean[{}][{}]", i, axis),
                (lp - lm) / (2.0 * H),
                grads.d_mean[i][axis]
            );
        }
        for k in 0..4 {
            let orig = s.scene.gaussians[i].rotation[k];
            s.scene.gaussians[i].rotation[k] = orig + H;
            let lp = eval_loss(&s);
            s.scene.gaussians[i].rotation[k] = orig - H;
            let lm = eval_loss(&s);
            s.scene.gaussians[i].rotation[k] = orig;
            check!(
                format!("rot[{}][{}]", i, k),
                (lp - lm) / (2.0 * H),
                grads.d_rotation[i][k]
            );
        }
        for axis in 0..3 {
            let orig = s.scene.gaussians[i].log_scale[axis];
            s.scene.gaussians[i].log_scale[axis] = orig + H;
            let lp = eval_loss(&s);
            s.scene.gaussians[i].log_scale[axis] = orig - H;
            let lm = eval_loss(&s);
            s.scene.gaussians[i].log_scale[axis] = orig;
            check!(
                format!("scale[{}][{}]", i, axis),
                (lp - lm) / (2.0 * H),
                grads.d_log_scale[i][axis]
            );
        }
        {
            let orig = s.scene.gaussians[i].opacity_logit;
            s.scene.gaussians[i].opacity_logit = orig + H;
            let lp = eval_loss(&s);
            s.scene.gaussians[i].opacity_logit = orig - H;
            let lm = eval_loss(&s);
            s.scene.gaussians[i].opacity_logit = orig;
            check!(
                format!("opacity[{}]", i),
                (lp - lm) / (2.0 * H),
                grads.d_opacity[i]
            );
        }
        for k in 0..s.scene.gaussians[i].color_coeffs.len() {
            for c in 0..3 {
                let orig = s.scene.gaussians[i].color_coeffs[k][c];
                s.scene.gaussians[i].color_coeffs[k][c] = orig + H;
                let lp = eval_loss(&s);
                s.scene.gaussians[i].color_coeffs[k][c] = orig - H;
                let lm = eval_loss(&s);
                s.scene.gaussians[i].color_coeffs[k][c] = orig;
                check!(
                    format!("color[{}][{}][{}]", i, k, c),
                    (lp - lm) / (2.0 * H),
                    grads.d_colors[i][k][c]
                );
            }
        }
        for k in 0..s.scene.gaussians[i].feature.len() {
            let orig = s.scene.gaussians[i].feature[k];
            s.scene.gaussians[i].feature[k] = orig + H;
            let lp = eval_loss(&s);
            s.scene.gaussians[i].feature[k] = orig - H;
            let lm = eval_loss(&s);
            s.scene.gaussians[i].feature[k] = orig;
            check!(
                format!("feature[{}][{}]", i, k),
                (lp - lm) / (2.0 * H),
                grads.d_features[i][k]
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for probe in 0..60 {
        let li = rng.gen_range(0..s.field.levels.len());
        let pi = rng.gen_range(0..6);
        let idx = rng.gen_range(0..s.field.levels[li].planes[pi].data.len());
        let orig = s.field.levels[li].planes[pi].data[idx];
        s.field.levels[li].planes[pi].data[idx] = orig + H;
        let lp = eval_loss(&s);
        s.field.levels[li].planes[pi].data[idx] = orig - H;
        let lm = eval_loss(&s);
        s.field.levels[li].planes[pi].data[idx] = orig;
        check!(
            format!("field probe {} (l{} p{} i{})", probe, li, pi, idx),
            (lp - lm) / (2.0 * H),
            grads.field.planes[li][pi][idx]
        );
    }

    let n_layers = s.head.hidden.len() + 1;
    for probe in 0..60 {
        let li = rng.gen_range(0..n_layers);
        let (wlen, blen) = {
            let l = if li < s.head.hidden.len() {
                &s.head.hidden[li]
            } else {
                &s.head.output
            };
            (l.weight.len(), l.bias.len())
        };
        let is_w = rng.gen_bool(0.8);
        let idx = if is_w {
            rng.gen_range(0..wlen)
        } else {
            rng.gen_range(0..blen)
        };
        let get_set = |head: &mut DeformationHead, v: Option<f64>| -> f64 {
            let l = if li < head.hidden.len() {
                &mut head.hidden[li]
            } else {
                &mut head.output
            };
            let slot = if is_w { &mut l.weight[idx] } else { &mut l.bias[idx] };
            let old = *slot;
            if let Some(v) = v {
                *slot = v;
            }
            old
        };
        let orig = get_set(&mut s.head, None);
        get_set(&mut s.head, Some(orig + H));
        let lp = eval_loss(&s);
        get_set(&mut s.head, Some(orig - H));
        let lm = eval_loss(&s);
        get_set(&mut s.head, Some(orig));
        let an = if is_w {
            grads.head.layers[li].0[idx]
        } else {
            grads.head.layers[li].1[idx]
        };
        check!(
            format!(
                "head probe {} (l{} {} {})",
                probe,
                li,
                if is_w { "w" } else { "b" },
                idx
            ),
            (lp - lm) / (2.0 * H),
            an
        );
    }

    (nontrivial, failures)
}

//! Canonical scene data model: splat parameterization, activations,
//! covariance construction, and spherical-harmonic color.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Lower bound on activated scale so the 3D covariance stays invertible.
pub const SCALE_FLOOR: f64 = 1e-7;

/// Std floor shared by all channel-statistics code.
pub const STD_FLOOR: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`]; input clamped away from 0 and 1.
#[inline]
pub fn inverse_sigmoid(a: f64) -> f64 {
    let a = a.clamp(1e-12, 1.0 - 1e-12);
    (a / (1.0 - a)).ln()
}

#[inline]
pub fn activate_scale(log_scale: f64) -> f64 {
    log_scale.exp().max(SCALE_FLOOR)
}

/// One splat: geometry, opacity, view-dependent color coefficients, and a
/// view-independent semantic feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    /// World-space mean position.
    pub mean: Vector3<f64>,
    /// Quaternion (w, x, y, z); kept unit-norm by the optimizer.
    pub rotation: [f64; 4],
    /// Per-axis log scales; activation is `exp` with a floor.
    pub log_scale: Vector3<f64>,
    /// Raw opacity; activation is sigmoid.
    pub opacity_logit: f64,
    /// Spherical-harmonic coefficients per RGB channel, `(degree+1)^2`
    /// entries, DC first.
    pub color_coeffs: Vec<[f64; 3]>,
    /// Semantic feature vector, view-independent.
    pub feature: Vec<f64>,
}

impl Gaussian {
    /// Isotropic splat with degree-0 color, handy for tests and init.
    pub fn isotropic(
        mean: Vector3<f64>,
        scale: f64,
        opacity: f64,
        rgb: [f64; 3],
        feature_dim: usize,
    ) -> Self {
        // DC coefficient such that sh_to_color reproduces rgb exactly.
        let dc = [
            (rgb[0] - 0.5) / SH_C0,
            (rgb[1] - 0.5) / SH_C0,
            (rgb[2] - 0.5) / SH_C0,
        ];
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: inverse_sigmoid(opacity),
            color_coeffs: vec![dc],
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        Vector3::new(
            activate_scale(self.log_scale.x),
            activate_scale(self.log_scale.y),
            activate_scale(self.log_scale.z),
        )
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_params(&self.rotation, &self.log_scale)
    }
}

/// Rotation matrix from a quaternion (w, x, y, z) assumed unit-norm.
///
/// The formula is evaluated as written for off-sphere inputs too, so its
/// gradient is well defined as a free function of four components.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`rotation_matrix`] w.r.t. each quaternion
/// component, in (w, x, y, z) order.
pub fn rotation_matrix_grads(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

pub fn normalize_quaternion(q: &mut [f64; 4]) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 {
        for v in q.iter_mut() {
            *v /= n;
        }
    } else {
        *q = [1.0, 0.0, 0.0, 0.0];
    }
}

/// 3D covariance Σ = R S Sᵀ Rᵀ from rotation quaternion and log scales.
pub fn covariance_from_params(rotation: &[f64; 4], log_scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.iter().all(|v| v.is_finite()) || !log_scale.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite rotation or log_scale".into(),
        ));
    }
    let r = rotation_matrix(rotation);
    let s = Vector3::new(
        activate_scale(log_scale.x),
        activate_scale(log_scale.y),
        activate_scale(log_scale.z),
    );
    let l = Matrix3::from_columns(&[
        r.column(0) * s.x,
        r.column(1) * s.y,
        r.column(2) * s.z,
    ]);
    Ok(l * l.transpose())
}

/// Unnormalized Gaussian density exp(-½ dᵀ Σ⁻¹ d) with d = x − μ.
pub fn gaussian_density(g: &Gaussian, x: &Vector3<f64>) -> Result<f64> {
    let sigma = g.covariance()?;
    let inv = sigma.try_inverse().ok_or_else(|| {
        Error::DegenerateCovariance(format!("covariance not invertible: {:?}", sigma))
    })?;
    let d = x - g.mean;
    let q = d.dot(&(inv * d));
    Ok((-0.5 * q).exp())
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real SH basis values up to `degree` (≤ 3) at a unit direction.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    assert!(degree <= 3, "SH degree > 3 unsupported");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = Vec::with_capacity(sh_coeff_count(degree));
    b.push(SH_C0);
    if degree >= 1 {
        b.push(-SH_C1 * y);
        b.push(SH_C1 * z);
        b.push(-SH_C1 * x);
    }
    if degree >= 2 {
        b.push(SH_C2[0] * x * y);
        b.push(SH_C2[1] * y * z);
        b.push(SH_C2[2] * (2.0 * z * z - x * x - y * y));
        b.push(SH_C2[3] * x * z);
        b.push(SH_C2[4] * (x * x - y * y));
    }
    if degree >= 3 {
        b.push(SH_C3[0] * y * (3.0 * x * x - y * y));
        b.push(SH_C3[1] * x * y * z);
        b.push(SH_C3[2] * y * (4.0 * z * z - x * x - y * y));
        b.push(SH_C3[3] * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y));
        b.push(SH_C3[4] * x * (4.0 * z * z - x * x - y * y));
        b.push(SH_C3[5] * z * (x * x - y * y));
        b.push(SH_C3[6] * x * (x * x - y * y));
    }
    b
}

/// Gradient of each basis value w.r.t. the direction components.
pub fn sh_basis_grads(degree: usize, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    assert!(degree <= 3, "SH degree > 3 unsupported");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut g = Vec::with_capacity(sh_coeff_count(degree));
    g.push(Vector3::zeros());
    if degree >= 1 {
        g.push(Vector3::new(0.0, -SH_C1, 0.0));
        g.push(Vector3::new(0.0, 0.0, SH_C1));
        g.push(Vector3::new(-SH_C1, 0.0, 0.0));
    }
    if degree >= 2 {
        g.push(Vector3::new(y, x, 0.0) * SH_C2[0]);
        g.push(Vector3::new(0.0, z, y) * SH_C2[1]);
        g.push(Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z) * SH_C2[2]);
        g.push(Vector3::new(z, 0.0, x) * SH_C2[3]);
        g.push(Vector3::new(2.0 * x, -2.0 * y, 0.0) * SH_C2[4]);
    }
    if degree >= 3 {
        g.push(Vector3::new(6.0 * x * y, 3.0 * x * x - 3.0 * y * y, 0.0) * SH_C3[0]);
        g.push(Vector3::new(y * z, x * z, x * y) * SH_C3[1]);
        g.push(
            Vector3::new(
                -2.0 * x * y,
                4.0 * z * z - x * x - 3.0 * y * y,
                8.0 * y * z,
            ) * SH_C3[2],
        );
        g.push(
            Vector3::new(
                -6.0 * x * z,
                -6.0 * y * z,
                6.0 * z * z - 3.0 * x * x - 3.0 * y * y,
            ) * SH_C3[3],
        );
        g.push(
            Vector3::new(
                4.0 * z * z - 3.0 * x * x - y * y,
                -2.0 * x * y,
                8.0 * x * z,
            ) * SH_C3[4],
        );
        g.push(Vector3::new(2.0 * x * z, -2.0 * y * z, x * x - y * y) * SH_C3[5]);
        g.push(Vector3::new(3.0 * x * x - y * y, -2.0 * x * y, 0.0) * SH_C3[6]);
    }
    g
}

/// View-dependent color before the [0,1] clamp: 0.5 + Σ coeffs·basis.
pub fn sh_to_color_raw(coeffs: &[[f64; 3]], view_direction: &Vector3<f64>) -> [f64; 3] {
    let degree = match coeffs.len() {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        n => panic!("unsupported SH coefficient count {}", n),
    };
    let basis = sh_basis(degree, view_direction);
    let mut c = [0.5; 3];
    for (b, coef) in basis.iter().zip(coeffs) {
        for ch in 0..3 {
            c[ch] += b * coef[ch];
        }
    }
    c
}

/// View-dependent color clamped to [0, 1].
pub fn sh_to_color(coeffs: &[[f64; 3]], view_direction: &Vector3<f64>) -> [f64; 3] {
    let c = sh_to_color_raw(coeffs, view_direction);
    [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]
}

/// The full dynamic scene in its canonical (t-independent) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub feature_dim: usize,
    pub background: Vector3<f64>,
    pub sh_degree: usize,
}

impl GaussianScene {
    pub fn new(
        gaussians: Vec<Gaussian>,
        feature_dim: usize,
        background: Vector3<f64>,
        sh_degree: usize,
    ) -> Result<Self> {
        let scene = Self {
            gaussians,
            feature_dim,
            background,
            sh_degree,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::InvalidParameter("scene has no gaussians".into()));
        }
        if self.sh_degree > 3 {
            return Err(Error::InvalidParameter("sh_degree > 3".into()));
        }
        let n_coeffs = sh_coeff_count(self.sh_degree);
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.feature.len() != self.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {} feature dim {} != scene {}",
                    i,
                    g.feature.len(),
                    self.feature_dim
                )));
            }
            if g.color_coeffs.len() != n_coeffs {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {} has {} SH coeffs, expected {}",
                    i,
                    g.color_coeffs.len(),
                    n_coeffs
                )));
            }
            if !g.mean.iter().all(|v| v.is_finite()) || !g.opacity_logit.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {} has non-finite parameters",
                    i
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Renormalize every rotation quaternion to unit length.
    pub fn renormalize_rotations(&mut self) {
        for g in &mut self.gaussians {
            normalize_quaternion(&mut g.rotation);
        }
    }
}

/// Pinhole camera with a rigid world→camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World→camera rotation.
    pub rotation: Matrix3<f64>,
    /// World→camera translation.
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be > 0".into()));
        }
        if !(near < far) {
            return Err(Error::InvalidParameter("near must be < far".into()));
        }
        let gram = rotation * rotation.transpose() - Matrix3::identity();
        let dev = gram.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if dev > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation not orthonormal (max deviation {:.3e})",
                dev
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            near,
            far,
        })
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Project a world point to pixel coordinates; returns (uv, depth).
    pub fn project(&self, p: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let c = self.world_to_camera(p);
        (
            Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            c.z,
        )
    }

    /// Unit vector from the camera center toward a world point.
    pub fn view_direction(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let v = p - self.center();
        let n = v.norm();
        if n > 0.0 {
            v / n
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        }
    }
}

//! Minimal and least-squares camera resection kernels.

use nalgebra::{Complex, DMatrix, Matrix3, Matrix6, Vector3, Vector6};

use crate::geometry::{project_with_jacobian, CameraIntrinsics, Point2, Point3, Pose};

/// Real roots of `c[0] + c[1] x + ... + c[n] x^n`, polished by Newton steps.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = coeffs.to_vec();
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    while c.len() > 1 && c.last().unwrap().abs() <= 1e-14 * scale {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let mut companion = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -c[i] / lead;
    }
    let eig: Vec<Complex<f64>> = companion.complex_eigenvalues().iter().copied().collect();
    let eval = |x: f64| -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &a in c.iter().rev() {
            dp = dp * x + p;
            p = p * x + a;
        }
        (p, dp)
    };
    eig.into_iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (p, dp) = eval(x);
                if dp.abs() < 1e-300 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .filter(|x| x.is_finite())
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], scale_b: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += scale_b * y;
    }
    out
}

/// Rigid transform mapping camera-frame points onto world points
/// (`world = R cam + t`), least squares over all pairs.
pub fn absolute_orientation(cam: &[Point3], world: &[Point3]) -> Option<Pose> {
    let n = cam.len();
    if n < 3 || world.len() != n {
        return None;
    }
    let inv = 1.0 / n as f64;
    let cc = cam.iter().fold(Vector3::zeros(), |a, p| a + p) * inv;
    let wc = world.iter().fold(Vector3::zeros(), |a, p| a + p) * inv;
    let mut h = Matrix3::zeros();
    for (c, w) in cam.iter().zip(world) {
        h += (c - cc) * (w - wc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    // r is a proper rotation by construction; the iterative conversion can
    // stall on half turns
    let rot = nalgebra::UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let pose = Pose::new(rot, Vector3::zeros());
    let t = wc - pose.rotation * cc;
    Some(Pose::new(pose.rotation, t))
}

/// Three-point resection (Grunert's elimination). `bearings` are unit rays in
/// the camera frame; returns up to four world-from-camera poses.
pub fn p3p(bearings: &[Vector3<f64>; 3], world: &[Point3; 3]) -> Vec<Pose> {
    let [f1, f2, f3] = bearings;
    let [p1, p2, p3] = world;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = f2.dot(f3);
    let cb = f1.dot(f3);
    let cg = f1.dot(f2);

    // s2 = u s1, s3 = v s1; u = N(v) / D(v) after eliminating u²
    let am = (a2 - c2) / b2;
    let num = [1.0 + am, -2.0 * am * cb, am - 1.0];
    let den = [2.0 * cg, -2.0 * ca];
    let side = [1.0, -2.0 * cb, 1.0];

    // D² + N² - 2 cγ N D - (c²/b²)(1 + v² - 2 v cβ) D² = 0
    let d2 = poly_mul(&den, &den);
    let n2 = poly_mul(&num, &num);
    let nd = poly_mul(&num, &den);
    let sd2 = poly_mul(&side, &d2);
    let mut quartic = poly_add(&d2, &n2, 1.0);
    quartic = poly_add(&quartic, &nd, -2.0 * cg);
    quartic = poly_add(&quartic, &sd2, -c2 / b2);

    let mut poses = Vec::new();
    for v in real_roots(&quartic) {
        let dv = den[0] + den[1] * v;
        if dv.abs() < 1e-12 {
            continue;
        }
        let u = (num[0] + num[1] * v + num[2] * v * v) / dv;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if q <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if s2 <= 0.0 || s3 <= 0.0 {
            continue;
        }
        let cam = [f1 * s1, f2 * s2, f3 * s3];
        if let Some(pose) = absolute_orientation(&cam, world) {
            poses.push(pose);
        }
    }
    poses
}

/// Damped Gauss-Newton over the summed squared reprojection error of
/// `(pixel, world point)` pairs; points behind the camera are ignored.
pub fn refine_pose(
    init: &Pose,
    obs: &[(Point2, Point3)],
    k: &CameraIntrinsics,
    max_iters: usize,
) -> Pose {
    let cost = |pose: &Pose| -> f64 {
        obs.iter()
            .filter_map(|(u, x)| project_with_jacobian(pose, k, x).ok().map(|(p, _)| (p - u).norm_squared()))
            .sum()
    };
    let mut pose = *init;
    let mut current = cost(&pose);
    let mut lambda = 1e-4;
    for _ in 0..max_iters {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (u, x) in obs {
            if let Ok((p, j)) = project_with_jacobian(&pose, k, x) {
                let e = p - u;
                h += j.transpose() * j;
                g += j.transpose() * e;
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -chol.solve(&g);
            let candidate = pose.retract(&step);
            let c = cost(&candidate);
            if c <= current {
                let gain = current - c;
                pose = candidate;
                current = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = gain > 1e-14 * (1.0 + current) && step.norm() > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

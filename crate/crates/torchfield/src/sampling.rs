//! Camera rays, stratified sampling along rays, compositing weights and
//! density-driven hierarchical resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Pinhole camera with a camera-to-world pose. The camera looks down -z in
/// its own frame; the pose is a right-handed 3x4 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world, rows of [R | t].
    pub pose: [[f64; 4]; 3],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Check the pose rotation block is orthonormal (1e-6) and near < far.
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Value(format!(
                "require 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|i| self.pose[i][a] * self.pose[i][b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::Value(
                        "pose rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Camera looking at `target` from `eye` with `up` roughly +z.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Camera {
        let fwd = normalize(sub(target, eye));
        let right = normalize(cross(fwd, up));
        let cam_up = cross(right, fwd);
        // columns: x = right, y = up, z = -forward
        let pose = [
            [right[0], cam_up[0], -fwd[0], eye[0]],
            [right[1], cam_up[1], -fwd[1], eye[1]],
            [right[2], cam_up[2], -fwd[2], eye[2]],
        ];
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            pose,
            width,
            height,
            near,
            far,
        }
    }

    /// Same view at a different resolution, scaling the intrinsics.
    pub fn rescaled(&self, width: usize, height: usize) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// A camera ray `o + t*d` tied to the pixel its patch centers on.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub pixel: (usize, usize),
}

impl Ray {
    pub fn point_at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Ray through the center of pixel `(i, j)` (column, row).
pub fn generate_ray(camera: &Camera, i: usize, j: usize) -> Result<Ray> {
    if i >= camera.width || j >= camera.height {
        return Err(Error::Bounds(format!(
            "pixel ({i}, {j}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let x = (i as f64 + 0.5 - camera.cx) / camera.fx;
    let y = -(j as f64 + 0.5 - camera.cy) / camera.fy;
    let d_cam = [x, y, -1.0];
    let p = &camera.pose;
    let d_world = [
        p[0][0] * d_cam[0] + p[0][1] * d_cam[1] + p[0][2] * d_cam[2],
        p[1][0] * d_cam[0] + p[1][1] * d_cam[1] + p[1][2] * d_cam[2],
        p[2][0] * d_cam[0] + p[2][1] * d_cam[1] + p[2][2] * d_cam[2],
    ];
    Ok(Ray {
        origin: [p[0][3], p[1][3], p[2][3]],
        direction: normalize(d_world),
        pixel: (i, j),
    })
}

/// Ordered sample locations along a ray with their inter-sample deltas.
/// The last delta closes the interval against `far`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SampleSet {
    /// Build from ascending sample locations; `far` closes the last delta.
    pub fn from_sorted(t: Vec<f64>, far: f64) -> SampleSet {
        let n = t.len();
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let next = if i + 1 < n { t[i + 1] } else { far };
            deltas.push((next - t[i]).max(0.0));
        }
        SampleSet { t, deltas }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Split `[near, far]` into `count` equal bins and draw one sample per bin:
/// the midpoint when `jitter` is false, a seeded uniform otherwise.
pub fn stratified_sample(near: f64, far: f64, count: usize, jitter: bool, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (far - near) / count as f64;
    let t = (0..count)
        .map(|i| {
            let u = if jitter { rng.gen::<f64>() } else { 0.5 };
            near + (i as f64 + u) * width
        })
        .collect();
    SampleSet::from_sorted(t, far)
}

/// Alpha-compositing weights `T_n * (1 - exp(-sigma_n * delta_n))`.
pub fn compositing_weights(sigma: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != deltas.len() {
        return Err(Error::Shape(format!(
            "sigma has {} entries, deltas {}",
            sigma.len(),
            deltas.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| **s < 0.0) {
        return Err(Error::Value(format!("negative density {s}")));
    }
    let mut weights = Vec::with_capacity(sigma.len());
    let mut depth = 0.0f64; // accumulated optical depth
    for (s, d) in sigma.iter().zip(deltas) {
        let a = s * d;
        let alpha = -(-a).exp_m1(); // 1 - exp(-a)
        let transmittance = (-depth).exp();
        weights.push(transmittance * alpha);
        depth += a;
    }
    Ok(weights)
}

/// Inverse-CDF resampling over the coarse bins, proportional to
/// `weight + 1e-5`, merged with the coarse locations into a sorted union.
pub fn hierarchical_resample(
    coarse: &SampleSet,
    weights: &[f64],
    count: usize,
    seed: u64,
    near: f64,
    far: f64,
) -> SampleSet {
    let n = coarse.len();
    assert_eq!(weights.len(), n, "one weight per coarse sample");
    let mut fresh = if weights.iter().all(|w| *w == 0.0) {
        stratified_sample(near, far, count, true, seed).t
    } else {
        // bin edges: near, midpoints between samples, far
        let mut edges = Vec::with_capacity(n + 1);
        edges.push(near);
        for i in 0..n - 1 {
            edges.push(0.5 * (coarse.t[i] + coarse.t[i + 1]));
        }
        edges.push(far);
        let pdf: Vec<f64> = weights.iter().map(|w| w + 1e-5).collect();
        let total: f64 = pdf.iter().sum();
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for p in &pdf {
            acc += p / total;
            cdf.push(acc);
        }
        cdf[n] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bin = 0usize;
        (0..count)
            .map(|i| {
                // stratified uniforms are ascending, so the bin scan resumes
                let u = (i as f64 + rng.gen::<f64>()) / count as f64;
                while bin + 1 < n && cdf[bin + 1] <= u {
                    bin += 1;
                }
                let frac = (u - cdf[bin]) / (cdf[bin + 1] - cdf[bin]).max(1e-300);
                edges[bin] + frac * (edges[bin + 1] - edges[bin])
            })
            .collect()
    };
    let mut t = coarse.t.clone();
    t.append(&mut fresh);
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // perturb exact ties so the union stays strictly ascending
    let binwidth = (far - near) / t.len() as f64;
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = (t[i - 1] + 1e-9 * binwidth).min(far);
        }
    }
    SampleSet::from_sorted(t, far)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn test_camera() -> Camera {
        Camera {
            fx: 50.0,
            fy: 50.0,
            cx: 2.5,
            cy: 3.5,
            pose: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            width: 8,
            height: 8,
            near: 1.0,
            far: 4.0,
        }
    }

    #[test]
    fn principal_ray_points_down_negative_z() {
        // pixel center at (cx - 0.5, cy - 0.5)
        let ray = generate_ray(&test_camera(), 2, 3).unwrap();
        assert_eq!(ray.direction, [0.0, 0.0, -1.0]);
        assert_eq!(ray.origin, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn translation_only_pose_moves_origin() {
        let mut cam = test_camera();
        cam.pose[0][3] = 1.5;
        cam.pose[2][3] = -2.0;
        let ray = generate_ray(&cam, 2, 3).unwrap();
        assert_eq!(ray.origin, [1.5, 0.0, -2.0]);
    }

    #[test]
    fn yaw_rotates_principal_ray() {
        // 90 degree yaw about +y maps -z to -x
        let mut cam = test_camera();
        cam.pose = [
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0, 0.0],
        ];
        cam.validate().unwrap();
        let ray = generate_ray(&cam, 2, 3).unwrap();
        assert!(approx(ray.direction[0], -1.0, 1e-12));
        assert!(approx(ray.direction[1], 0.0, 1e-12));
        assert!(approx(ray.direction[2], 0.0, 1e-12));
    }

    #[test]
    fn out_of_range_pixel_errors() {
        assert!(matches!(
            generate_ray(&test_camera(), 8, 0),
            Err(crate::Error::Bounds(_))
        ));
    }

    #[test]
    fn stratified_midpoints() {
        let s = stratified_sample(0.0, 1.0, 4, false, 0);
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.deltas, vec![0.25, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn stratified_jitter_is_reproducible() {
        let a = stratified_sample(1.0, 4.0, 16, true, 42);
        let b = stratified_sample(1.0, 4.0, 16, true, 42);
        assert!(a.t.iter().zip(&b.t).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_density_gives_zero_weights() {
        let w = compositing_weights(&[0.0; 5], &[0.1; 5]).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_half_weight() {
        // sigma * delta = ln 2 -> weight 0.5
        let w = compositing_weights(&[2.0f64.ln()], &[1.0]).unwrap();
        assert!(approx(w[0], 0.5, 1e-12));
    }

    #[test]
    fn saturating_second_sample() {
        let w = compositing_weights(&[2.0f64.ln(), 1e9], &[1.0, 1.0]).unwrap();
        assert!(approx(w[0], 0.5, 1e-12));
        assert!(approx(w[1], 0.5, 1e-12));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(matches!(
            compositing_weights(&[-1.0], &[1.0]),
            Err(crate::Error::Value(_))
        ));
    }

    #[test]
    fn transmittance_invariants_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..64);
            let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
            let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
            let w = compositing_weights(&sigma, &deltas).unwrap();
            let total: f64 = w.iter().sum();
            assert!(total <= 1.0 + 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn one_hot_weight_concentrates_resampling() {
        let coarse = stratified_sample(0.0, 1.0, 8, false, 0);
        let mut weights = vec![0.0; 8];
        weights[3] = 1.0;
        let out = hierarchical_resample(&coarse, &weights, 64, 9, 0.0, 1.0);
        // bin 3 spans the midpoints around t[3]
        let lo = 0.5 * (coarse.t[2] + coarse.t[3]);
        let hi = 0.5 * (coarse.t[3] + coarse.t[4]);
        let new_points: Vec<f64> = out
            .t
            .iter()
            .copied()
            .filter(|t| !coarse.t.contains(t))
            .collect();
        assert_eq!(out.len(), 8 + 64);
        // the 1e-5 floor leaks a negligible share into other bins
        let inside = new_points.iter().filter(|t| **t >= lo && **t <= hi).count();
        assert!(inside as f64 >= 0.95 * new_points.len() as f64);
    }

    #[test]
    fn uniform_weights_spread_over_quartiles() {
        let coarse = stratified_sample(0.0, 1.0, 64, false, 0);
        let weights = vec![0.5; 64];
        let count = 256;
        let out = hierarchical_resample(&coarse, &weights, count, 3, 0.0, 1.0);
        let fresh: Vec<f64> = out
            .t
            .iter()
            .copied()
            .filter(|t| !coarse.t.contains(t))
            .collect();
        let bound = 2.0 * (count as f64).sqrt();
        for q in 0..4 {
            let lo = q as f64 / 4.0;
            let hi = lo + 0.25;
            let k = fresh.iter().filter(|t| **t >= lo && **t < hi).count() as f64;
            assert!((k - count as f64 / 4.0).abs() <= bound, "quartile {q}: {k}");
        }
    }

    #[test]
    fn all_zero_weights_fall_back_to_stratified() {
        let coarse = stratified_sample(0.0, 1.0, 8, false, 0);
        let out = hierarchical_resample(&coarse, &[0.0; 8], 16, 77, 0.0, 1.0);
        let expect = stratified_sample(0.0, 1.0, 16, true, 77);
        let fresh: Vec<f64> = out
            .t
            .iter()
            .copied()
            .filter(|t| !coarse.t.contains(t))
            .collect();
        assert_eq!(fresh, expect.t);
    }

    #[test]
    fn resample_union_strictly_ascending() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for case in 0..100 {
            let coarse = stratified_sample(1.0, 4.5, 32, true, case);
            let weights: Vec<f64> = (0..32).map(|_| rng.gen_range(0.0..1.0)).collect();
            let out = hierarchical_resample(&coarse, &weights, 96, case + 1000, 1.0, 4.5);
            assert!(out.t.windows(2).all(|w| w[0] < w[1]), "case {case}");
            assert!(out.deltas.iter().all(|d| *d >= 0.0));
        }
    }
}

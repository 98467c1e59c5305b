//! Analytic synthetic scenes and the dense-quadrature rendering oracle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::sampling::{compositing_weights, generate_ray, stratified_sample, Camera};

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    /// Constant density inside the shape.
    pub density: f64,
    /// Constant color inside the shape, each channel in [0, 1].
    pub color: [f64; 3],
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        match &self.shape {
            Shape::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
            Shape::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }
}

/// Piecewise-constant density/color field; background is empty and black.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if p.density < 0.0 {
                return Err(Error::Value("primitive density must be >= 0".into()));
            }
            match &p.shape {
                Shape::Sphere { radius, .. } if *radius <= 0.0 => {
                    return Err(Error::Value("sphere radius must be > 0".into()))
                }
                Shape::Box { min, max } if (0..3).any(|i| min[i] >= max[i]) => {
                    return Err(Error::Value("box min must be < max componentwise".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Density and color at a point: the first primitive containing it wins.
pub fn scene_field(scene: &SyntheticScene, position: [f64; 3]) -> (f64, [f64; 3]) {
    for p in &scene.primitives {
        if p.contains(position) {
            return (p.density, p.color);
        }
    }
    (0.0, [0.0, 0.0, 0.0])
}

/// Ground-truth render by midpoint quadrature with `steps` samples per ray.
/// Shares the compositing rule with the model's renderer.
pub fn oracle_render(scene: &SyntheticScene, camera: &Camera, steps: usize) -> Image {
    let mut out = Image::zeros(camera.width, camera.height);
    let rows: Vec<Vec<[f64; 3]>> = (0..camera.height)
        .into_par_iter()
        .map(|j| {
            (0..camera.width)
                .map(|i| {
                    let ray = generate_ray(camera, i, j).expect("pixel in range");
                    oracle_ray_color(scene, &ray, camera.near, camera.far, steps)
                })
                .collect()
        })
        .collect();
    for (j, row) in rows.into_iter().enumerate() {
        for (i, c) in row.into_iter().enumerate() {
            out.set_pixel(i, j, c);
        }
    }
    out
}

pub fn oracle_ray_color(
    scene: &SyntheticScene,
    ray: &crate::sampling::Ray,
    near: f64,
    far: f64,
    steps: usize,
) -> [f64; 3] {
    let samples = stratified_sample(near, far, steps, false, 0);
    let mut sigma = Vec::with_capacity(steps);
    let mut colors = Vec::with_capacity(steps);
    for &t in &samples.t {
        let (s, c) = scene_field(scene, ray.point_at(t));
        sigma.push(s);
        colors.push(c);
    }
    let weights = compositing_weights(&sigma, &samples.deltas).expect("sigma >= 0");
    let mut out = [0.0; 3];
    for (w, c) in weights.iter().zip(&colors) {
        for ch in 0..3 {
            out[ch] += w * c[ch];
        }
    }
    out
}

/// The default acceptance scene: three colored spheres on a ring.
pub fn default_scene() -> SyntheticScene {
    let ring = 0.6;
    let spheres = [
        ([1.0, 0.15, 0.15], 0.3, 0.0f64),
        ([0.15, 1.0, 0.15], 0.25, 2.0 * std::f64::consts::FRAC_PI_3),
        ([0.15, 0.15, 1.0], 0.2, 4.0 * std::f64::consts::FRAC_PI_3),
    ];
    SyntheticScene {
        primitives: spheres
            .iter()
            .map(|(color, radius, angle)| Primitive {
                shape: Shape::Sphere {
                    center: [ring * angle.cos(), ring * angle.sin(), 0.0],
                    radius: *radius,
                },
                density: 20.0,
                color: *color,
            })
            .collect(),
    }
}

/// Cameras on a radius-2.5 ring about the origin, slightly elevated, looking
/// at the origin. Returns `(cameras, split_is_train)` interleaving the test
/// views between training angles.
pub fn default_views(n_train: usize, n_test: usize, width: usize, height: usize) -> Vec<(Camera, bool)> {
    let mut views = Vec::new();
    let radius = 2.5f64;
    let elevation = 0.9;
    let ring = (radius * radius - elevation * elevation).sqrt();
    let fx = 55.0 * width as f64 / 64.0;
    let push = |angle: f64, train: bool, views: &mut Vec<(Camera, bool)>| {
        let eye = [ring * angle.cos(), ring * angle.sin(), elevation];
        let cam = Camera::look_at(
            eye,
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            fx,
            fx,
            width,
            height,
            1.0,
            4.5,
        );
        views.push((cam, train));
    };
    for k in 0..n_train {
        push(2.0 * std::f64::consts::PI * k as f64 / n_train as f64, true, &mut views);
    }
    for k in 0..n_test {
        push(
            2.0 * std::f64::consts::PI * (k as f64 + 0.37) / n_test as f64,
            false,
            &mut views,
        );
    }
    views
}

/// Named scenes for the CLI.
pub fn scene_by_name(name: &str) -> Option<SyntheticScene> {
    match name {
        "three-spheres" | "default" => Some(default_scene()),
        "single-sphere" => Some(SyntheticScene {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.5,
                },
                density: 20.0,
                color: [0.9, 0.4, 0.1],
            }],
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_outside_everything_is_empty() {
        let scene = default_scene();
        assert_eq!(scene_field(&scene, [5.0, 5.0, 5.0]), (0.0, [0.0, 0.0, 0.0]));
    }

    #[test]
    fn field_inside_sphere() {
        let scene = SyntheticScene {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                },
                density: 5.0,
                color: [1.0, 0.0, 0.0],
            }],
        };
        assert_eq!(scene_field(&scene, [0.1, 0.0, 0.0]), (5.0, [1.0, 0.0, 0.0]));
    }

    #[test]
    fn overlap_takes_first_primitive() {
        let scene = SyntheticScene {
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0; 3],
                        radius: 1.0,
                    },
                    density: 1.0,
                    color: [1.0, 0.0, 0.0],
                },
                Primitive {
                    shape: Shape::Box {
                        min: [-1.0; 3],
                        max: [1.0; 3],
                    },
                    density: 2.0,
                    color: [0.0, 1.0, 0.0],
                },
            ],
        };
        assert_eq!(scene_field(&scene, [0.0; 3]), (1.0, [1.0, 0.0, 0.0]));
        // corner of the box is outside the sphere
        assert_eq!(scene_field(&scene, [0.9, 0.9, 0.9]), (2.0, [0.0, 1.0, 0.0]));
    }

    #[test]
    fn empty_scene_renders_black() {
        let cam = default_views(1, 0, 8, 8)[0].0.clone();
        let img = oracle_render(&SyntheticScene::default(), &cam, 32);
        assert!(img.rgb.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opaque_sphere_fills_view_with_its_color() {
        let scene = SyntheticScene {
            primitives: vec![Primitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 10.0,
                },
                density: 1e6,
                color: [0.2, 0.4, 0.6],
            }],
        };
        let cam = default_views(1, 0, 4, 4)[0].0.clone();
        let img = oracle_render(&scene, &cam, 256);
        for j in 0..4 {
            for i in 0..4 {
                let p = img.pixel(i, j);
                assert!((p[0] - 0.2).abs() < 1e-9 && (p[2] - 0.6).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn oracle_converges_with_step_doubling() {
        let scene = default_scene();
        let cam = default_views(1, 0, 16, 16)[0].0.clone();
        let a = oracle_render(&scene, &cam, 8192);
        let b = oracle_render(&scene, &cam, 16384);
        let max = a
            .rgb
            .iter()
            .zip(b.rgb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-3, "max pixel delta {max}");
    }

    #[test]
    fn all_default_views_are_valid() {
        for (cam, _) in default_views(12, 4, 64, 64) {
            cam.validate().unwrap();
        }
    }
}

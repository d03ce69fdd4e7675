//! Procedural shape datasets for smoke tests and benchmarks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Split};
use crate::geometry::{rotate_about_z, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    /// Two orthogonal planes crossing along the z axis.
    PlaneCross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Torus, Shape::PlaneCross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Torus => "torus",
            Shape::PlaneCross => "plane_cross",
        }
    }

    fn sample_point(self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Shape::Sphere => loop {
                let p: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break [p[0] / n, p[1] / n, p[2] / n];
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            Shape::Torus => {
                let (major, minor) = (1.0, 0.35);
                // rejection on the tube angle makes the density uniform in area
                let phi = loop {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let accept = (major + minor * phi.cos()) / (major + minor);
                    if rng.random::<f64>() <= accept {
                        break phi;
                    }
                };
                let theta = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * phi.cos();
                [ring * theta.cos(), ring * theta.sin(), minor * phi.sin()]
            }
            Shape::PlaneCross => {
                let u = rng.random_range(-1.0..1.0);
                let z = rng.random_range(-1.0..1.0);
                if rng.random::<bool>() {
                    [u, 0.0, z]
                } else {
                    [0.0, u, z]
                }
            }
        }
    }

    /// One noisy instance: random per-axis scale in [0.85, 1.15], random
    /// rotation about z, Gaussian jitter of standard deviation `noise`.
    pub fn sample(self, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
        let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.15));
        let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                let p = self.sample_point(rng);
                std::array::from_fn(|a| p[a] * scale[a] + jitter.sample(rng))
            })
            .collect();
        let angle = rng.random_range(0.0..2.0 * PI);
        rotate_about_z(&PointCloud { points: pts, label: None }, angle).points
    }
}

/// `per_class` clouds of each of the four shapes, grouped by class.
pub fn shapes_dataset(per_class: usize, n_points: usize, noise: f64, seed: u64, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clouds = Vec::with_capacity(per_class * Shape::ALL.len());
    for (label, shape) in Shape::ALL.iter().enumerate() {
        for _ in 0..per_class {
            let pts = shape.sample(n_points, noise, &mut rng);
            clouds.push(PointCloud { points: pts, label: Some(label) });
        }
    }
    Dataset::new(
        clouds,
        Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
        split,
    )
    .expect("generated labels are in range")
}

//! Procedural renderer for the two object families.

use rand::Rng;

use super::{Category, ShapeFamily};
use crate::rng::rng_from;
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
const BACKGROUND: [f32; 3] = [0.80, 0.80, 0.78];

type Rgb = [f32; 3];

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// A primitive in object-local coordinates.
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Triangle(p) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d0 = edge(p[0], p[1]);
                let d1 = edge(p[1], p[2]);
                let d2 = edge(p[2], p[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn circle(cx: f64, cy: f64, r: f64) -> Shape {
    Shape::Ellipse { cx, cy, rx: r, ry: r, angle: 0.0 }
}

/// Layers drawn back to front.
fn recipe(cat: &Category) -> Vec<(Shape, Rgb)> {
    let a = &cat.attributes;
    let primary = hsv_to_rgb(a.hue, 0.75, 0.9);
    let secondary = hsv_to_rgb(a.secondary_hue, 0.8, 0.7);
    let mut layers = Vec::new();
    match a.family {
        ShapeFamily::Bird => {
            let dark = [0.15, 0.13, 0.12];
            let n = a.parts.max(1) as usize;
            for k in 0..n {
                let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 - 0.5 };
                let ang = std::f64::consts::PI + 0.6 * t;
                layers.push((
                    Shape::Ellipse {
                        cx: -0.38 + 0.18 * ang.cos(),
                        cy: 0.05 + 0.18 * ang.sin(),
                        rx: 0.2,
                        ry: 0.05,
                        angle: ang,
                    },
                    secondary,
                ));
            }
            layers.push((Shape::Ellipse { cx: 0.0, cy: 0.0, rx: 0.4, ry: 0.23, angle: 0.0 }, primary));
            layers.push((circle(0.36, -0.17, 0.16), primary));
            layers.push((Shape::Ellipse { cx: -0.06, cy: -0.03, rx: 0.25, ry: 0.11, angle: -0.25 }, secondary));
            layers.push((Shape::Triangle([(0.49, -0.22), (0.49, -0.12), (0.66, -0.16)]), [0.9, 0.7, 0.2]));
            layers.push((circle(0.41, -0.2, 0.035), dark));
        }
        ShapeFamily::Flower => {
            let n = a.parts.max(3) as usize;
            for k in 0..n {
                let ang = std::f64::consts::TAU * k as f64 / n as f64;
                layers.push((
                    Shape::Ellipse {
                        cx: 0.3 * ang.cos(),
                        cy: 0.3 * ang.sin(),
                        rx: 0.26,
                        ry: 0.12,
                        angle: ang,
                    },
                    primary,
                ));
            }
            layers.push((circle(0.0, 0.0, 0.15), secondary));
        }
    }
    layers
}

/// Per-example pose: centre offset, rotation and scale.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

fn pose(cat: &Category, jitter_seed: u64) -> Pose {
    let mut rng = rng_from(jitter_seed, &[0x706f_7365]);
    Pose {
        cx: 0.5 + rng.random_range(-0.06..0.06),
        cy: 0.5 + rng.random_range(-0.06..0.06),
        angle: rng.random_range(-0.3..0.3),
        scale: cat.attributes.size * (1.0 + rng.random_range(-0.08..0.08)),
    }
}

/// Renders one `[3, S, S]` image in `[-1, 1]` with `4×4` supersampling.
pub fn render_example(cat: &Category, jitter_seed: u64, side: usize) -> Tensor<f32> {
    let layers = recipe(cat);
    let p = pose(cat, jitter_seed);
    let (sin, cos) = p.angle.sin_cos();
    let plane = side * side;
    let mut data = vec![0f32; 3 * plane];
    let inv = 1.0 / (side * SUPERSAMPLE) as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..side {
        for px in 0..side {
            let mut acc = [0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * inv;
                    let v = ((py * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                    let (dx, dy) = ((u - p.cx) / p.scale, (v - p.cy) / p.scale);
                    let lx = cos * dx + sin * dy;
                    let ly = -sin * dx + cos * dy;
                    let mut color = BACKGROUND;
                    for (shape, c) in &layers {
                        if shape.contains(lx, ly) {
                            color = *c;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += color[k] * weight;
                    }
                }
            }
            for k in 0..3 {
                data[k * plane + py * side + px] = (2.0 * acc[k] - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, side, side], data).expect("render shape")
}

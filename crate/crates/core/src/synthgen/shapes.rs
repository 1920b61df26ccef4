//! Shape primitives and their point-membership tests (continuous image coordinates).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Ellipse,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Blob,
    ];

    /// Category id used in instance records.
    pub fn category(self) -> u8 {
        match self {
            ShapeKind::Ellipse => 0,
            ShapeKind::Rectangle => 1,
            ShapeKind::Triangle => 2,
            ShapeKind::Blob => 3,
        }
    }

    pub fn from_category(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.category() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Blob => "blob",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
    Rectangle {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        cos: f64,
        sin: f64,
    },
    Triangle {
        v: [(f64, f64); 3],
    },
    Blob {
        cx: f64,
        cy: f64,
        radius: f64,
        lobes: f64,
        amp: [f64; 2],
        phase: [f64; 2],
    },
}

impl Shape {
    pub(crate) fn sample<R: Rng>(kind: ShapeKind, cx: f64, cy: f64, size: f64, rng: &mut R) -> Shape {
        let theta = rng.random_range(0.0..PI);
        let (sin, cos) = theta.sin_cos();
        match kind {
            ShapeKind::Ellipse => Shape::Ellipse {
                cx,
                cy,
                a: size,
                b: size * rng.random_range(0.5..1.0),
                cos,
                sin,
            },
            ShapeKind::Rectangle => Shape::Rectangle {
                cx,
                cy,
                hw: size * 0.9,
                hh: size * 0.9 * rng.random_range(0.45..1.0),
                cos,
                sin,
            },
            ShapeKind::Triangle => {
                let base = rng.random_range(0.0..2.0 * PI);
                let mut v = [(0.0, 0.0); 3];
                for (i, vert) in v.iter_mut().enumerate() {
                    let ang = base + i as f64 * 2.0 * PI / 3.0 + rng.random_range(-0.35..0.35);
                    let r = size * rng.random_range(0.9..1.3);
                    *vert = (cx + r * ang.cos(), cy + r * ang.sin());
                }
                Shape::Triangle { v }
            }
            ShapeKind::Blob => Shape::Blob {
                cx,
                cy,
                radius: size * 0.9,
                lobes: if rng.random_bool(0.5) { 2.0 } else { 3.0 },
                amp: [rng.random_range(0.1..0.3), rng.random_range(0.05..0.15)],
                phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            },
        }
    }

    pub(crate) fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                cos,
                sin,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rectangle {
                cx,
                cy,
                hw,
                hh,
                cos,
                sin,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Triangle { v } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let d0 = edge(v[0], v[1]);
                let d1 = edge(v[1], v[2]);
                let d2 = edge(v[2], v[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
            Shape::Blob {
                cx,
                cy,
                radius,
                lobes,
                amp,
                phase,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let phi = dy.atan2(dx);
                let r = radius
                    * (1.0 + amp[0] * (lobes * phi + phase[0]).sin()
                        + amp[1] * ((lobes + 1.0) * phi + phase[1]).sin());
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

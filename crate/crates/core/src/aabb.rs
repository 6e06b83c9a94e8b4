use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::Vec3;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("invalid bounding box: min {min:?}, max {max:?}")]
pub struct InvalidAabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Axis-aligned scene bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, InvalidAabb> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn validate(&self) -> Result<(), InvalidAabb> {
        let ok = (0..3).all(|i| {
            self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i]
        });
        if ok {
            Ok(())
        } else {
            Err(InvalidAabb {
                min: self.min,
                max: self.max,
            })
        }
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Box shrunk by `margin` on every side.
    pub fn shrunk(&self, margin: f64) -> Self {
        Self {
            min: self.min.map(|m| m + margin),
            max: self.max.map(|m| m - margin),
        }
    }

    /// Maps the box onto `[0, 1]³`.
    pub fn to_unit(&self, p: &Vec3) -> Vec3 {
        let e = self.extent();
        Vec3::new(
            (p.x - self.min[0]) / e[0],
            (p.y - self.min[1]) / e[1],
            (p.z - self.min[2]) / e[2],
        )
    }

    /// Slab test; returns the parametric entry/exit distances along the ray.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a.is_nan() || b.is_nan() {
                // Ray parallel to the slab and lying on its boundary plane.
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

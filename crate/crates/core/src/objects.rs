//! Parametric part-labeled objects built from primitive solids.
//!
//! Every object keeps its primitives, so exact inside tests are available to
//! the metrics alongside the sampled cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::linalg::{Vec3, V3};

pub const CATEGORIES: [&str; 6] = ["mug", "bottle", "knife", "hammer", "pan", "earphone"];
pub const DEFAULT_POINTS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere {
        center: V3,
        radius: f64,
    },
    /// Capped cylinder; `axis` is a unit vector.
    Cylinder {
        center: V3,
        axis: V3,
        half_length: f64,
        radius: f64,
    },
    /// Oriented box; `axes` are orthonormal.
    Cuboid {
        center: V3,
        axes: [V3; 3],
        half_extents: [f64; 3],
    },
    /// Torus section |angle| ≤ half_angle measured from `dir0` about `normal`, with round ends.
    TorusArc {
        center: V3,
        normal: V3,
        dir0: V3,
        major: f64,
        minor: f64,
        half_angle: f64,
    },
}

impl Shape {
    pub fn sdf(&self, p: &V3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => p.dist(center) - radius,
            Shape::Cylinder {
                center,
                axis,
                half_length,
                radius,
            } => {
                let d = *p - *center;
                let along = d.dot(axis);
                let radial = (d - axis.scale(along)).norm();
                let (dx, dy) = (radial - radius, along.abs() - half_length);
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt()
            }
            Shape::Cuboid {
                center,
                axes,
                half_extents,
            } => {
                let d = *p - *center;
                let q: [f64; 3] = std::array::from_fn(|i| d.dot(&axes[i]).abs() - half_extents[i]);
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::TorusArc {
                center,
                normal,
                dir0,
                major,
                minor,
                half_angle,
            } => {
                let d = *p - *center;
                let e2 = normal.cross(dir0);
                let (x, y, z) = (d.dot(dir0), d.dot(&e2), d.dot(normal));
                let th = y.atan2(x).clamp(-half_angle, *half_angle);
                let (cx, cy) = (major * th.cos(), major * th.sin());
                ((x - cx).powi(2) + (y - cy).powi(2) + z * z).sqrt() - minor
            }
        }
    }

    /// Surface area of the sampled boundary (torus ends excluded).
    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Cylinder {
                half_length, radius, ..
            } => 2.0 * PI * radius * (2.0 * half_length) + 2.0 * PI * radius * radius,
            Shape::Cuboid { half_extents: e, .. } => 8.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2]),
            Shape::TorusArc {
                major,
                minor,
                half_angle,
                ..
            } => 2.0 * half_angle * major * 2.0 * PI * minor,
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> V3 {
        use std::f64::consts::PI;
        match self {
            Shape::Sphere { center, radius } => *center + unit_normal(rng).scale(*radius),
            Shape::Cylinder {
                center,
                axis,
                half_length,
                radius,
            } => {
                let u = axis.any_perpendicular();
                let v = axis.cross(&u);
                let side = 2.0 * half_length * radius;
                let cap = radius * radius;
                let pick = rng.random::<f64>() * (side + cap);
                if pick < side {
                    let ph = rng.random::<f64>() * 2.0 * PI;
                    let h = rng.random_range(-half_length..*half_length);
                    *center + axis.scale(h) + (u.scale(ph.cos()) + v.scale(ph.sin())).scale(*radius)
                } else {
                    let ph = rng.random::<f64>() * 2.0 * PI;
                    let rr = radius * rng.random::<f64>().sqrt();
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    *center + axis.scale(s * half_length) + (u.scale(ph.cos()) + v.scale(ph.sin())).scale(rr)
                }
            }
            Shape::Cuboid {
                center,
                axes,
                half_extents: e,
            } => {
                let faces = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut k = 2;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        k = i;
                        break;
                    }
                    pick -= a;
                }
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut coords = [0.0; 3];
                for i in 0..3 {
                    coords[i] = if i == k {
                        s * e[i]
                    } else {
                        rng.random_range(-e[i]..e[i])
                    };
                }
                *center + axes[0].scale(coords[0]) + axes[1].scale(coords[1]) + axes[2].scale(coords[2])
            }
            Shape::TorusArc {
                center,
                normal,
                dir0,
                major,
                minor,
                half_angle,
            } => {
                let e2 = normal.cross(dir0);
                // area density ∝ (R + r cos ψ); rejection on ψ
                let ps = loop {
                    let ps = rng.random::<f64>() * 2.0 * PI;
                    if rng.random::<f64>() * (major + minor) <= major + minor * ps.cos() {
                        break ps;
                    }
                };
                let th = rng.random_range(-half_angle..*half_angle);
                let radial = dir0.scale(th.cos()) + e2.scale(th.sin());
                *center + radial.scale(major + minor * ps.cos()) + normal.scale(minor * ps.sin())
            }
        }
    }
}

fn unit_normal(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v.scale(1.0 / n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub part: u32,
    pub shape: Shape,
}

/// Union of labeled primitives; negative `sdf` means strictly inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solid {
    pub primitives: Vec<Primitive>,
}

impl Solid {
    pub fn sdf(&self, p: &V3) -> f64 {
        self.primitives.iter().map(|q| q.shape.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &V3) -> bool {
        self.sdf(p) < 0.0
    }

    /// Axis-aligned bounds (conservative) of the union.
    pub fn bounds(&self) -> (V3, V3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for pr in &self.primitives {
            let (c, r) = match &pr.shape {
                Shape::Sphere { center, radius } => (*center, Vec3::new(*radius, *radius, *radius)),
                Shape::Cylinder {
                    center,
                    axis,
                    half_length,
                    radius,
                } => {
                    let e = |a: f64| half_length * a.abs() + radius * (1.0 - a * a).max(0.0).sqrt();
                    (*center, Vec3::new(e(axis.x), e(axis.y), e(axis.z)))
                }
                Shape::Cuboid {
                    center,
                    axes,
                    half_extents,
                } => {
                    let e = |i: usize| (0..3).map(|k| half_extents[k] * axes[k].get(i).abs()).sum::<f64>();
                    (*center, Vec3::new(e(0), e(1), e(2)))
                }
                Shape::TorusArc { center, major, minor, .. } => {
                    let s = major + minor;
                    (*center, Vec3::new(s, s, s))
                }
            };
            lo = Vec3::new(lo.x.min(c.x - r.x), lo.y.min(c.y - r.y), lo.z.min(c.z - r.z));
            hi = Vec3::new(hi.x.max(c.x + r.x), hi.y.max(c.y + r.y), hi.z.max(c.z + r.z));
        }
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartLabeledObject {
    pub category: String,
    pub seed: u64,
    pub cloud: PointCloud,
    pub part_names: Vec<String>,
    pub centroid: V3,
    pub solid: Solid,
}

impl PartLabeledObject {
    pub fn labels(&self) -> &[u32] {
        self.cloud.labels.as_deref().unwrap_or(&[])
    }

    pub fn part_index(&self, name: &str) -> Option<u32> {
        self.part_names.iter().position(|p| p == name).map(|i| i as u32)
    }

    pub fn part_points(&self, part: u32) -> Vec<V3> {
        self.cloud
            .points
            .iter()
            .zip(self.labels())
            .filter(|(_, l)| **l == part)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self
            .cloud
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("object cloud has no part labels".into()))?;
        if labels.len() != self.cloud.points.len() {
            return Err(Error::InvalidInput("label count differs from point count".into()));
        }
        if labels.iter().any(|l| *l as usize >= self.part_names.len()) {
            return Err(Error::InvalidInput("point label outside the part table".into()));
        }
        Ok(())
    }
}

pub fn check_category(name: &str) -> Result<()> {
    if CATEGORIES.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownCategory {
            name: name.to_string(),
            valid: CATEGORIES.join(", "),
        })
    }
}

/// Part names of a category in label order.
pub fn category_parts(name: &str) -> Result<[&'static str; 2]> {
    check_category(name)?;
    Ok(match name {
        "mug" => ["body", "handle"],
        "bottle" => ["body", "cap"],
        "knife" => ["handle", "blade"],
        "hammer" => ["handle", "head"],
        "pan" => ["body", "handle"],
        _ => ["bud", "stem"],
    })
}

fn primitives_for(category: &str, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut j = |v: f64| v * rng.random_range(0.85..1.15);
    let ex = Vec3::new(1.0, 0.0, 0.0);
    let ey = Vec3::new(0.0, 1.0, 0.0);
    let ez = Vec3::new(0.0, 0.0, 1.0);
    let prim = |part: u32, shape: Shape| Primitive { part, shape };
    match category {
        "mug" => {
            let (r, h) = (j(4.0), j(4.5));
            let (major, minor) = (j(2.6), j(0.6));
            vec![
                prim(
                    0,
                    Shape::Cylinder {
                        center: V3::zero(),
                        axis: ez,
                        half_length: h,
                        radius: r,
                    },
                ),
                prim(
                    1,
                    Shape::TorusArc {
                        center: Vec3::new(r - 0.3, 0.0, 0.0),
                        normal: ey,
                        dir0: ex,
                        major,
                        minor,
                        half_angle: std::f64::consts::FRAC_PI_2,
                    },
                ),
            ]
        }
        "bottle" => {
            let (r, h) = (j(3.2), j(7.0));
            let (cr, ch) = (j(1.4), j(2.0));
            vec![
                prim(
                    0,
                    Shape::Cylinder {
                        center: V3::zero(),
                        axis: ez,
                        half_length: h,
                        radius: r,
                    },
                ),
                prim(
                    1,
                    Shape::Cylinder {
                        center: Vec3::new(0.0, 0.0, h + ch),
                        axis: ez,
                        half_length: ch,
                        radius: cr,
                    },
                ),
            ]
        }
        "knife" => {
            let (hl, bl) = (j(5.5), j(6.5));
            vec![
                prim(
                    0,
                    Shape::Cuboid {
                        center: Vec3::new(-hl, 0.0, 0.0),
                        axes: [ex, ey, ez],
                        half_extents: [hl, j(1.1), j(0.75)],
                    },
                ),
                prim(
                    1,
                    Shape::Cuboid {
                        center: Vec3::new(bl, 0.0, 0.0),
                        axes: [ex, ey, ez],
                        half_extents: [bl, j(1.5), 0.15],
                    },
                ),
            ]
        }
        "hammer" => {
            let hl = j(11.0);
            let (hx, hs) = (j(5.5), j(1.4));
            vec![
                prim(
                    0,
                    Shape::Cylinder {
                        center: V3::zero(),
                        axis: ez,
                        half_length: hl,
                        radius: j(1.3),
                    },
                ),
                prim(
                    1,
                    Shape::Cuboid {
                        center: Vec3::new(0.0, 0.0, hl + hs - 0.2),
                        axes: [ex, ey, ez],
                        half_extents: [hx, hs, hs],
                    },
                ),
            ]
        }
        "pan" => {
            let r = j(8.0);
            let hl = j(6.5);
            vec![
                prim(
                    0,
                    Shape::Cylinder {
                        center: V3::zero(),
                        axis: ez,
                        half_length: j(1.6),
                        radius: r,
                    },
                ),
                prim(
                    1,
                    Shape::Cuboid {
                        center: Vec3::new(r + hl - 0.3, 0.0, 0.0),
                        axes: [ex, ey, ez],
                        half_extents: [hl, j(1.3), j(0.6)],
                    },
                ),
            ]
        }
        _ => {
            let br = j(1.3);
            let sl = j(2.0);
            vec![
                prim(
                    0,
                    Shape::Sphere {
                        center: V3::zero(),
                        radius: br,
                    },
                ),
                prim(
                    1,
                    Shape::Cylinder {
                        center: Vec3::new(0.0, 0.0, -(br + sl - 0.3)),
                        axis: ez,
                        half_length: sl,
                        radius: j(0.45),
                    },
                ),
            ]
        }
    }
}

/// Deterministic object of `category` with `n_points` union-surface samples.
pub fn generate_object_with(category: &str, seed: u64, n_points: usize) -> Result<PartLabeledObject> {
    let parts = category_parts(category)?;
    if n_points == 0 {
        return Err(Error::InvalidInput("object needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f62_6a65_6374);
    let primitives = primitives_for(category, &mut rng);
    let solid = Solid { primitives };
    let areas: Vec<f64> = solid.primitives.iter().map(|p| p.shape.area()).collect();
    let total: f64 = areas.iter().sum();

    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    while points.len() < n_points {
        let mut pick = rng.random::<f64>() * total;
        let mut k = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                k = i;
                break;
            }
            pick -= a;
        }
        let p = solid.primitives[k].shape.sample_surface(&mut rng);
        // keep only the outer boundary of the union
        let buried = solid
            .primitives
            .iter()
            .enumerate()
            .any(|(i, q)| i != k && q.shape.sdf(&p) < -1e-9);
        if !buried {
            points.push(p);
            labels.push(solid.primitives[k].part);
        }
    }
    let cloud = PointCloud::with_labels(points, labels)?;
    let centroid = cloud.centroid();
    Ok(PartLabeledObject {
        category: category.to_string(),
        seed,
        cloud,
        part_names: parts.iter().map(|s| s.to_string()).collect(),
        centroid,
        solid,
    })
}

pub fn generate_object(category: &str, seed: u64) -> Result<PartLabeledObject> {
    generate_object_with(category, seed, DEFAULT_POINTS)
}

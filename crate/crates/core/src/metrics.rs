//! Grasp evaluation: penetration depth, intersection volume, simulated
//! displacement, diversity and part accuracy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{closest_on_segment, NearestIndex};
use crate::hand::{hand_surface, pose_hand, GraspVector, HandSurface, HandTemplate};
use crate::language::resolve_part;
use crate::linalg::{symmetric_eigen, Mat3, Vec3, M3, V3};
use crate::nn::seeded_rng;
use crate::objects::{PartLabeledObject, Solid};
use crate::synth::label_grasp_part;

pub const METRICS_SCHEMA: &str = "t2g-metrics/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub voxel_size: f64,
    pub horizon: f64,
    pub dt: f64,
    pub mass: f64,
    pub stiffness: f64,
    pub friction: f64,
    pub gravity: f64,
    pub clusters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.2,
            horizon: 1.0,
            dt: 1.0 / 240.0,
            mass: 100.0,
            stiffness: 1e5,
            friction: 0.8,
            gravity: 980.0,
            clusters: 20,
            restarts: 50,
            seed: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.voxel_size, self.horizon, self.dt, self.mass, self.stiffness];
        if pos.iter().any(|v| !(*v > 0.0)) || !(self.friction >= 0.0) || !(self.gravity >= 0.0) {
            return Err(Error::InvalidInput("metric constants must be positive".into()));
        }
        if self.clusters == 0 || self.restarts == 0 {
            return Err(Error::InvalidInput("cluster count and restarts must be positive".into()));
        }
        Ok(())
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            horizon: self.horizon,
            dt: self.dt,
            mass: self.mass,
            stiffness: self.stiffness,
            friction: self.friction,
            gravity: self.gravity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penetration {
    pub depth: f64,
    /// Set when no inside-test was available and the proximity heuristic was used.
    pub heuristic: bool,
}

/// Largest distance from a hand vertex inside the object to its nearest object point.
/// Without a solid, a vertex counts as inside when it lies on the centroid side of its nearest point.
pub fn penetration_depth(points: &[V3], solid: Option<&Solid>, surface: &HandSurface) -> Result<Penetration> {
    let idx = NearestIndex::new(points)?;
    let c = crate::geometry::centroid(points);
    let mut depth: f64 = 0.0;
    for v in &surface.vertices {
        let (d, k) = idx.nearest(v);
        let inside = match solid {
            Some(s) => s.contains(v),
            None => (*v - points[k]).dot(&(points[k] - c)) < 0.0,
        };
        if inside {
            depth = depth.max(d);
        }
    }
    Ok(Penetration {
        depth,
        heuristic: solid.is_none(),
    })
}

/// Volume of object voxels whose centers are inside the hand.
pub fn intersection_volume(solid: &Solid, surface: &HandSurface, voxel_size: f64) -> Result<f64> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidInput("voxel size must be positive".into()));
    }
    let (lo, hi) = solid.bounds();
    // hand bounds restrict the scan; the grid stays anchored at the object's lower corner
    let mut hlo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hhi = -hlo;
    for c in &surface.capsules {
        for p in [c.a, c.b] {
            hlo = Vec3::new(hlo.x.min(p.x - c.radius), hlo.y.min(p.y - c.radius), hlo.z.min(p.z - c.radius));
            hhi = Vec3::new(hhi.x.max(p.x + c.radius), hhi.y.max(p.y + c.radius), hhi.z.max(p.z + c.radius));
        }
    }
    let range = |l: f64, h: f64, hl: f64, hh: f64| -> Option<(usize, usize)> {
        let n = ((h - l) / voxel_size).ceil().max(1.0) as usize;
        let i0 = ((hl - l) / voxel_size - 0.5).floor().max(0.0) as usize;
        let i1 = (((hh - l) / voxel_size - 0.5).ceil() as i64).min(n as i64 - 1);
        (i1 >= i0 as i64).then_some((i0, i1 as usize))
    };
    let (Some(rx), Some(ry), Some(rz)) = (
        range(lo.x, hi.x, hlo.x, hhi.x),
        range(lo.y, hi.y, hlo.y, hhi.y),
        range(lo.z, hi.z, hlo.z, hhi.z),
    ) else {
        return Ok(0.0);
    };
    let mut count = 0usize;
    for i in rx.0..=rx.1 {
        for j in ry.0..=ry.1 {
            for k in rz.0..=rz.1 {
                let p = Vec3::new(
                    lo.x + (i as f64 + 0.5) * voxel_size,
                    lo.y + (j as f64 + 0.5) * voxel_size,
                    lo.z + (k as f64 + 0.5) * voxel_size,
                );
                if surface.capsules.iter().any(|c| c.signed_distance(&p) < 0.0) && solid.contains(&p) {
                    count += 1;
                }
            }
        }
    }
    Ok(count as f64 * voxel_size.powi(3))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub mass: f64,
    pub stiffness: f64,
    pub friction: f64,
    pub gravity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        MetricConfig::default().sim()
    }
}

pub const BLOW_UP_SPEED: f64 = 1e4;
/// Points closer than this to the hand are contact candidates for the step-size estimate.
const CONTACT_MARGIN: f64 = 0.5;

/// Rigid object (mass spread evenly over `points`) under gravity against a static
/// hand. Returns ‖center(horizon) − center(0)‖.
pub fn simulate_displacement(points: &[V3], surface: &HandSurface, cfg: &SimConfig) -> Result<f64> {
    if !(cfg.mass > 0.0) || points.is_empty() {
        return Err(Error::InvalidInput("simulation needs a positive mass and object points".into()));
    }
    let com0 = crate::geometry::centroid(points);
    let body: Vec<V3> = points.iter().map(|p| *p - com0).collect();
    let pm = cfg.mass / body.len() as f64;
    let mut inertia = [[0.0; 3]; 3];
    for r in &body {
        let a = r.to_array();
        let r2 = r.norm_sq();
        for i in 0..3 {
            for j in 0..3 {
                inertia[i][j] += pm * (if i == j { r2 } else { 0.0 } - a[i] * a[j]);
            }
        }
    }
    let (vals, vecs) = symmetric_eigen(&Mat3 { m: inertia });
    let floor = 1e-6 * cfg.mass;
    let mut inv_body = [[0.0; 3]; 3];
    for (l, v) in vals.iter().zip(&vecs) {
        let (a, il) = (v.to_array(), 1.0 / l.max(floor));
        for i in 0..3 {
            for j in 0..3 {
                inv_body[i][j] += il * a[i] * a[j];
            }
        }
    }
    let inv_body = Mat3 { m: inv_body };

    // hand bounds for cheap contact rejection
    let mut hlo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hhi = -hlo;
    for c in &surface.capsules {
        for p in [c.a, c.b] {
            hlo = Vec3::new(hlo.x.min(p.x - c.radius), hlo.y.min(p.y - c.radius), hlo.z.min(p.z - c.radius));
            hhi = Vec3::new(hhi.x.max(p.x + c.radius), hhi.y.max(p.y + c.radius), hhi.z.max(p.z + c.radius));
        }
    }
    let near_hand = |p: &V3, m: f64| {
        p.x > hlo.x - m && p.x < hhi.x + m && p.y > hlo.y - m && p.y < hhi.y + m && p.z > hlo.z - m && p.z < hhi.z + m
    };

    let (mut x, mut v, mut w) = (com0, V3::zero(), V3::zero());
    let mut rot = M3::identity();
    let steps = (cfg.horizon / cfg.dt).round().max(1.0) as usize;
    let g = Vec3::new(0.0, 0.0, -cfg.gravity);
    let mut time = 0.0;
    for _ in 0..steps {
        let world: Vec<V3> = body.iter().map(|r| x + rot.mul_vec(r)).collect();
        let candidates: Vec<usize> = (0..world.len())
            .filter(|i| near_hand(&world[*i], CONTACT_MARGIN) && surface.signed_distance(&world[*i]) < CONTACT_MARGIN)
            .collect();
        let n = candidates.len().max(1) as f64;
        // per-contact damping makes the combined spring critically damped
        let damping = 2.0 * (cfg.stiffness * cfg.mass / n).sqrt();
        let omega = (n * cfg.stiffness / cfg.mass).sqrt();
        let radius = body.iter().map(|r| r.norm()).fold(0.0, f64::max);
        let gyr = (vals.iter().cloned().fold(f64::INFINITY, f64::min).max(floor) / cfg.mass).sqrt();
        let lever = (radius / gyr.max(1e-9)).clamp(1.0, 10.0);
        let sub = if candidates.is_empty() {
            1
        } else {
            (cfg.dt * omega * lever / 0.2).ceil().max(1.0) as usize
        };
        let h = cfg.dt / sub as f64;
        for _ in 0..sub {
            let inv_world = rot.mul_mat(&inv_body).mul_mat(&rot.transpose());
            let mut force = g.scale(cfg.mass);
            let mut torque = V3::zero();
            for &i in &candidates {
                let r = rot.mul_vec(&body[i]);
                let p = x + r;
                for c in &surface.capsules {
                    let q = closest_on_segment(&p, &c.a, &c.b);
                    let d = p - q;
                    let dist = d.norm();
                    let depth = c.radius - dist;
                    if depth <= 0.0 || dist < 1e-12 {
                        continue;
                    }
                    let normal = d.scale(1.0 / dist);
                    let vel = v + w.cross(&r);
                    let vn = vel.dot(&normal);
                    let fn_mag = (cfg.stiffness * depth - damping * vn).max(0.0);
                    let vt = vel - normal.scale(vn);
                    let vt_norm = vt.norm();
                    let mut f = normal.scale(fn_mag);
                    if vt_norm > 1e-12 {
                        let ft = (damping * vt_norm).min(cfg.friction * fn_mag);
                        f = f - vt.scale(ft / vt_norm);
                    }
                    force = force + f;
                    torque = torque + r.cross(&f);
                }
            }
            v = v + force.scale(h / cfg.mass);
            w = w + inv_world.mul_vec(&torque).scale(h);
            x = x + v.scale(h);
            rot = M3::from_axis_angle(&w.scale(h)).mul_mat(&rot);
            time += h;
            let speed = v.norm().max(w.norm() * radius);
            if !(speed <= BLOW_UP_SPEED) {
                return Err(Error::Unstable { time, speed });
            }
        }
    }
    Ok((x - com0).norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub entropy: f64,
    pub mean_cluster_size: f64,
    pub clusters_used: usize,
    /// Set when fewer grasps than clusters were given and k was reduced.
    pub reduced: bool,
}

/// −Σ p ln p over the cluster assignment frequencies.
pub fn assignment_entropy(assign: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for a in assign {
        counts[*a] += 1;
    }
    let n = assign.len() as f64;
    -counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center per row; ties go to the lowest index.
fn assign(data: &[Vec<f64>], centers: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut out = Vec::with_capacity(data.len());
    let mut inertia = 0.0;
    for x in data {
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(x, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        out.push(best.1);
        inertia += best.0;
    }
    (out, inertia)
}

/// Lloyd iterations from k-means++ seeds, best of `restarts` by within-cluster squared error.
pub fn kmeans(data: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let n = data.len();
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for run in 0..restarts {
        let mut rng = seeded_rng(seed, run as u64);
        let mut centers = vec![data[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = data
                .iter()
                .map(|x| centers.iter().map(|c| sq_dist(x, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let pick = if total <= 0.0 {
                rng.random_range(0..n)
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, di) in d.iter().enumerate() {
                    if u < *di {
                        idx = i;
                        break;
                    }
                    u -= di;
                }
                idx
            };
            centers.push(data[pick].clone());
        }
        let mut labels = assign(data, &centers).0;
        for _ in 0..100 {
            let dim = data[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (x, l) in data.iter().zip(&labels) {
                counts[*l] += 1;
                for (s, v) in sums[*l].iter_mut().zip(x) {
                    *s += v;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                } else {
                    // reseed an empty cluster from the point farthest from its center
                    let far = (0..n)
                        .max_by(|a, b| {
                            let da = sq_dist(&data[*a], &centers[labels[*a]]);
                            let db = sq_dist(&data[*b], &centers[labels[*b]]);
                            da.total_cmp(&db).then(b.cmp(a))
                        })
                        .unwrap_or(0);
                    centers[j] = data[far].clone();
                }
            }
            let (next, _) = assign(data, &centers);
            if next == labels {
                break;
            }
            labels = next;
        }
        let (labels, inertia) = assign(data, &centers);
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((labels, centers, inertia));
        }
    }
    best.expect("at least one restart")
}

/// Joint positions of the posed hand relative to its object centroid, flattened.
pub fn grasp_feature(g: &GraspVector, tmpl: &HandTemplate) -> Vec<f64> {
    let h = pose_hand(g.pose(), g.shape(), g.offset(), tmpl);
    h.joint_positions().iter().flat_map(|p| p.to_array()).collect()
}

pub fn diversity(features: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Diversity> {
    if features.is_empty() {
        return Err(Error::InvalidInput("diversity needs at least one grasp".into()));
    }
    let reduced = features.len() < k;
    let k = k.min(features.len());
    let (labels, centers, _) = kmeans(features, k, restarts, seed);
    let mut dist_sum = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (x, l) in features.iter().zip(&labels) {
        dist_sum[*l] += sq_dist(x, &centers[*l]).sqrt();
        counts[*l] += 1;
    }
    let used: Vec<usize> = (0..k).filter(|j| counts[*j] > 0).collect();
    let size = used.iter().map(|j| dist_sum[*j] / counts[*j] as f64).sum::<f64>() / used.len() as f64;
    Ok(Diversity {
        entropy: assignment_entropy(&labels, k),
        mean_cluster_size: size,
        clusters_used: used.len(),
        reduced,
    })
}

/// One generated grasp to score, with the prompt that produced it.
pub struct EvalItem<'a> {
    pub grasp: &'a GraspVector,
    pub object: &'a PartLabeledObject,
    pub text: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAccuracy {
    pub percent: f64,
    pub correct: Vec<bool>,
    /// Items whose prompt names no part of their object.
    pub unresolvable: Vec<usize>,
}

/// Share of grasps whose contact label is the part named in their prompt.
pub fn part_accuracy(items: &[EvalItem], tmpl: &HandTemplate) -> PartAccuracy {
    let mut correct = Vec::with_capacity(items.len());
    let mut unresolvable = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let ok = match resolve_part(it.object, it.text) {
            Ok(part) => {
                let surf = hand_surface(it.grasp, it.object.centroid, tmpl);
                label_grasp_part(it.object, &surf) == Some(part)
            }
            Err(_) => {
                log::warn!("grasp {i}: prompt `{}` names no part; counted incorrect", it.text);
                unresolvable.push(i);
                false
            }
        };
        correct.push(ok);
    }
    let n = items.len().max(1) as f64;
    PartAccuracy {
        percent: 100.0 * correct.iter().filter(|c| **c).count() as f64 / n,
        correct,
        unresolvable,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspMetrics {
    pub index: usize,
    pub category: String,
    pub object_seed: u64,
    pub text: String,
    pub penetration_depth_cm: f64,
    pub intersection_volume_cm3: f64,
    /// None when the simulation became unstable.
    pub displacement_cm: Option<f64>,
    pub predicted_part: Option<String>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub grasps: usize,
    pub penetration_depth_cm: f64,
    pub intersection_volume_cm3: f64,
    pub displacement_mean_cm: f64,
    pub displacement_var: f64,
    pub diversity_entropy: f64,
    pub mean_cluster_size: f64,
    pub part_accuracy_percent: f64,
    pub unstable_simulations: usize,
    pub unresolvable_prompts: usize,
    pub clusters_reduced: bool,
    pub per_grasp: Vec<GraspMetrics>,
}

/// Scores every item; report means are over grasps (displacement over stable runs only).
pub fn evaluate(items: &[EvalItem], cfg: &MetricConfig, tmpl: &HandTemplate) -> Result<MetricsReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let acc = part_accuracy(items, tmpl);
    let mut rows = Vec::with_capacity(items.len());
    let mut features = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let surf = hand_surface(it.grasp, it.object.centroid, tmpl);
        let pen = penetration_depth(&it.object.cloud.points, Some(&it.object.solid), &surf)?;
        let vol = intersection_volume(&it.object.solid, &surf, cfg.voxel_size)?;
        let disp = match simulate_displacement(&it.object.cloud.points, &surf, &cfg.sim()) {
            Ok(d) => Some(d),
            Err(Error::Unstable { time, speed }) => {
                log::warn!("grasp {i}: simulation unstable at t={time:.4}s (speed {speed:.1})");
                None
            }
            Err(e) => return Err(e),
        };
        let predicted = label_grasp_part(it.object, &surf).map(|p| it.object.part_names[p as usize].clone());
        features.push(grasp_feature(it.grasp, tmpl));
        rows.push(GraspMetrics {
            index: i,
            category: it.object.category.clone(),
            object_seed: it.object.seed,
            text: it.text.to_string(),
            penetration_depth_cm: pen.depth,
            intersection_volume_cm3: vol,
            displacement_cm: disp,
            predicted_part: predicted,
            correct: acc.correct[i],
        });
    }
    let div = diversity(&features, cfg.clusters, cfg.restarts, cfg.seed)?;
    let n = rows.len() as f64;
    let stable: Vec<f64> = rows.iter().filter_map(|r| r.displacement_cm).collect();
    let m = stable.len().max(1) as f64;
    let dmean = stable.iter().sum::<f64>() / m;
    let dvar = stable.iter().map(|d| (d - dmean) * (d - dmean)).sum::<f64>() / m;
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.into(),
        grasps: rows.len(),
        penetration_depth_cm: rows.iter().map(|r| r.penetration_depth_cm).sum::<f64>() / n,
        intersection_volume_cm3: rows.iter().map(|r| r.intersection_volume_cm3).sum::<f64>() / n,
        displacement_mean_cm: dmean,
        displacement_var: dvar,
        diversity_entropy: div.entropy,
        mean_cluster_size: div.mean_cluster_size,
        part_accuracy_percent: acc.percent,
        unstable_simulations: rows.len() - stable.len(),
        unresolvable_prompts: acc.unresolvable.len(),
        clusters_reduced: div.reduced,
        per_grasp: rows,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema != METRICS_SCHEMA {
            return Err(Error::VersionMismatch {
                expected: METRICS_SCHEMA.into(),
                found: r.schema,
            });
        }
        Ok(r)
    }

    /// Schema line, summary rows, then the per-grasp table.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {METRICS_SCHEMA}\nmetric,value\n");
        for (k, v) in [
            ("grasps", self.grasps as f64),
            ("penetration_depth_cm", self.penetration_depth_cm),
            ("intersection_volume_cm3", self.intersection_volume_cm3),
            ("displacement_mean_cm", self.displacement_mean_cm),
            ("displacement_var", self.displacement_var),
            ("diversity_entropy", self.diversity_entropy),
            ("mean_cluster_size", self.mean_cluster_size),
            ("part_accuracy_percent", self.part_accuracy_percent),
            ("unstable_simulations", self.unstable_simulations as f64),
            ("unresolvable_prompts", self.unresolvable_prompts as f64),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        s.push_str("\nindex,category,object_seed,text,penetration_depth_cm,intersection_volume_cm3,displacement_cm,predicted_part,correct\n");
        for r in &self.per_grasp {
            s.push_str(&format!(
                "{},{},{},\"{}\",{},{},{},{},{}\n",
                r.index,
                r.category,
                r.object_seed,
                r.text.replace('"', "\"\""),
                r.penetration_depth_cm,
                r.intersection_volume_cm3,
                r.displacement_cm.map_or(String::new(), |d| d.to_string()),
                r.predicted_part.as_deref().unwrap_or(""),
                r.correct
            ));
        }
        s
    }
}

//! Synthetic supervision: heuristic ground-truth grasps, contact-based part
//! labels, template text with paraphrases, and the JSONL dataset format.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, NearestIndex};
use crate::hand::{
    hand_surface, pose_index, GraspVector, HandSurface, HandTemplate, BONES_PER_FINGER, NUM_FINGERS,
};
use crate::linalg::{symmetric_eigen, Mat3, Vec3, M3, V3};
use crate::objects::{generate_object, PartLabeledObject, Solid};

pub const DATASET_SCHEMA: &str = "t2g-dataset/1";
pub const CONTACT_THRESHOLD: f64 = 0.25;

pub const PINCH: [bool; 5] = [true, true, false, false, false];
pub const TRIPOD: [bool; 5] = [true, true, true, false, false];
pub const POWER: [bool; 5] = [true, true, true, true, true];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspSample {
    pub grasp: GraspVector,
    pub part_label: u32,
    pub template_text: String,
    pub paraphrases: Vec<String>,
}

impl GraspSample {
    /// Seeded pick from paraphrases ∪ {template}.
    pub fn pick_description<R: Rng>(&self, rng: &mut R) -> &str {
        let k = rng.random_range(0..=self.paraphrases.len());
        if k == self.paraphrases.len() {
            &self.template_text
        } else {
            &self.paraphrases[k]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub object: PartLabeledObject,
    pub samples: Vec<GraspSample>,
    pub seed: u64,
}

#[derive(Deserialize)]
struct SchemaTag {
    schema: String,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    schema: String,
    seed: u64,
    object: PartLabeledObject,
    samples: Vec<GraspSample>,
}

/// Object points whose nearest hand vertex lies within `threshold`, counted per part.
pub fn contact_counts(object: &PartLabeledObject, surface: &HandSurface, threshold: f64) -> Vec<usize> {
    let mut counts = vec![0usize; object.part_names.len()];
    if surface.vertices.is_empty() {
        return counts;
    }
    let index = match NearestIndex::new(&surface.vertices) {
        Ok(i) => i,
        Err(_) => return counts,
    };
    for (p, l) in object.cloud.points.iter().zip(object.labels()) {
        if index.nearest(p).0 <= threshold {
            counts[*l as usize] += 1;
        }
    }
    counts
}

/// Part with the most contact points (ties → lowest label); `None` without contact.
pub fn label_grasp_part(object: &PartLabeledObject, surface: &HandSurface) -> Option<u32> {
    label_from_counts(&contact_counts(object, surface, CONTACT_THRESHOLD))
}

pub fn label_from_counts(counts: &[usize]) -> Option<u32> {
    let mut best: Option<(u32, usize)> = None;
    for (i, c) in counts.iter().enumerate() {
        if *c > 0 && best.is_none_or(|(_, b)| *c > b) {
            best = Some((i as u32, *c));
        }
    }
    best.map(|(i, _)| i)
}

pub fn template_text(category: &str, part: &str) -> String {
    format!("grasp the {} of the {}", part.to_lowercase(), category.to_lowercase())
}

/// Inverse of [`template_text`]: (category, part).
pub fn parse_template(text: &str) -> Option<(String, String)> {
    let rest = text.strip_prefix("grasp the ")?;
    let (part, cat) = rest.split_once(" of the ")?;
    if part.is_empty() || cat.is_empty() || part.contains(' ') || cat.contains(' ') {
        return None;
    }
    Some((cat.to_string(), part.to_string()))
}

pub const VERBS: [&str; 5] = ["grasp", "hold", "grab", "take", "pick up"];

/// The full rule bank for one (category, part) pair, template included.
pub fn paraphrase_bank(category: &str, part: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(VERBS.len() * 3);
    for v in VERBS {
        out.push(format!("{v} the {part} of the {category}"));
        out.push(format!("{v} the {category} by its {part}"));
        out.push(format!("{v} the {category} at the {part}"));
    }
    out
}

/// `n` distinct rephrasings of `template`, never the template itself.
pub fn paraphrase(template: &str, n: usize, seed: u64) -> Result<Vec<String>> {
    let (cat, part) =
        parse_template(template).ok_or_else(|| Error::InvalidInput(format!("`{template}` is not a template")))?;
    let mut bank: Vec<String> = paraphrase_bank(&cat, &part).into_iter().filter(|s| s != template).collect();
    if n > bank.len() {
        return Err(Error::CapacityExceeded {
            requested: n,
            capacity: bank.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bank.shuffle(&mut rng);
    bank.truncate(n);
    Ok(bank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspGenConfig {
    pub contact_threshold: f64,
    /// Deepest allowed hand vertex below the solid surface (cm).
    pub max_penetration: f64,
    pub attempts: usize,
    /// Depth the first distal vertex is driven to when a finger closes (cm).
    pub press_depth: f64,
}

impl Default for GraspGenConfig {
    fn default() -> Self {
        Self {
            contact_threshold: CONTACT_THRESHOLD,
            max_penetration: 0.3,
            attempts: 128,
            press_depth: 0.1,
        }
    }
}

struct PartFrame {
    center: V3,
    axis: V3,
    /// `None` when the other parts lie along the axis; any perpendicular approach is then valid.
    outward: Option<V3>,
    minor: [V3; 2],
    length: f64,
}

fn part_frame(object: &PartLabeledObject, part: u32) -> Result<PartFrame> {
    let pts = object.part_points(part);
    if pts.is_empty() {
        return Err(Error::InvalidInput(format!("part {part} has no points")));
    }
    let c = centroid(&pts);
    let mut cov = [[0.0; 3]; 3];
    for p in &pts {
        let d = (*p - c).to_array();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&Mat3 { m: cov });
    let axis = vecs[0];
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let t = (*p - c).dot(&axis);
        (lo.min(t), hi.max(t))
    });
    let others: Vec<V3> = object
        .cloud
        .points
        .iter()
        .zip(object.labels())
        .filter(|(_, l)| **l != part)
        .map(|(p, _)| *p)
        .collect();
    let away = if others.is_empty() {
        vecs[1]
    } else {
        c - centroid(&others)
    };
    let perp = away - axis.scale(away.dot(&axis));
    let outward = (perp.norm() > 0.3).then(|| perp.normalized());
    Ok(PartFrame {
        center: c,
        axis,
        outward,
        minor: [vecs[1], vecs[2]],
        length: hi - lo,
    })
}

/// Finger vector used for ground truth, chosen by the part's longest extent.
pub fn default_finger_vector(object: &PartLabeledObject, part: u32) -> Result<[bool; 5]> {
    let f = part_frame(object, part)?;
    Ok(if f.length < 5.0 {
        PINCH
    } else if f.length < 9.0 {
        TRIPOD
    } else {
        POWER
    })
}

const FLEX_GAINS: [[f64; 3]; 2] = [[0.9, 1.2, 1.1], [1.45, 1.5, 1.25]];

fn set_finger_flex(pose: &mut [f64], finger: usize, s: f64) {
    let gains = FLEX_GAINS[(finger > 0) as usize];
    for (k, g) in gains.iter().enumerate() {
        pose[pose_index(finger, k, 1)] = s * g;
    }
}

/// Smallest signed distance over the vertices of `finger` on segments ≥ `from_segment`.
fn finger_depth(solid: &Solid, surface: &HandSurface, finger: usize, from_segment: usize) -> f64 {
    let palm = surface.capsules.len() - NUM_FINGERS * BONES_PER_FINGER;
    let mut m = f64::INFINITY;
    for (i, v) in surface.vertices.iter().enumerate() {
        let c = surface.vertex_capsule[i];
        if surface.vertex_finger[i] as usize == finger && c >= palm && (c - palm) % 3 >= from_segment {
            m = m.min(solid.sdf(v));
        }
    }
    m
}

/// First `s` in (0, 1] with `f(s) ≤ target`, refined by bisection; `None` if never reached.
fn first_crossing(mut f: impl FnMut(f64) -> f64, target: f64) -> Option<f64> {
    let steps = 24;
    let mut prev = 0.0;
    for k in 1..=steps {
        let s = k as f64 / steps as f64;
        if f(s) <= target {
            let (mut lo, mut hi) = (prev, s);
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if f(mid) <= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        prev = s;
    }
    None
}

/// Closes one finger in stages: all joints until any segment touches, then the
/// joints beyond the touching segment, until the distal segment reaches `target`.
fn close_finger(
    g: &mut GraspVector,
    object: &PartLabeledObject,
    tmpl: &HandTemplate,
    finger: usize,
    target: f64,
) -> Option<()> {
    let depth = |g: &GraspVector, from: usize| {
        let surf = hand_surface(g, object.centroid, tmpl);
        finger_depth(&object.solid, &surf, finger, from)
    };
    if depth(g, 0) <= target {
        return None;
    }
    let s0 = first_crossing(
        |s| {
            set_finger_flex(g.pose_mut(), finger, s);
            depth(g, 0)
        },
        target,
    )?;
    set_finger_flex(g.pose_mut(), finger, s0);
    for stage in 1..BONES_PER_FINGER {
        if depth(g, 2) <= target + 0.05 {
            return Some(());
        }
        let start: Vec<f64> = (stage..3).map(|k| g.pose()[pose_index(finger, k, 1)]).collect();
        let limits: Vec<f64> = (stage..3).map(|k| tmpl.joint_max[pose_index(finger, k, 1) - 3]).collect();
        let apply = |g: &mut GraspVector, s: f64| {
            for (j, k) in (stage..3).enumerate() {
                g.pose_mut()[pose_index(finger, k, 1)] = start[j] + s * (limits[j] - start[j]);
            }
        };
        let s = first_crossing(
            |s| {
                apply(g, s);
                depth(g, stage)
            },
            target,
        )?;
        apply(g, s);
    }
    (depth(g, 2) <= target + 0.05).then_some(())
}

/// Parks an unused finger at the first flex level that keeps it clear of the object.
fn park_finger(g: &mut GraspVector, object: &PartLabeledObject, tmpl: &HandTemplate, finger: usize, clear: f64) -> bool {
    for s in [0.0, 1.0, 0.5, 0.25, 0.75] {
        set_finger_flex(g.pose_mut(), finger, s);
        let surf = hand_surface(g, object.centroid, tmpl);
        if finger_depth(&object.solid, &surf, finger, 0) > clear {
            return true;
        }
    }
    false
}

/// Deepest hand vertex below the analytic surface of `solid` (0 if none inside).
pub fn max_solid_depth(solid: &Solid, surface: &HandSurface) -> f64 {
    surface.vertices.iter().map(|v| -solid.sdf(v)).fold(0.0, f64::max)
}

/// Whether every flagged finger has a distal vertex within `threshold` of a point of `part`.
pub fn fingers_in_contact(
    object: &PartLabeledObject,
    surface: &HandSurface,
    part: u32,
    fingers: [bool; 5],
    threshold: f64,
) -> bool {
    let pts = object.part_points(part);
    let Ok(index) = NearestIndex::new(&pts) else {
        return false;
    };
    (0..NUM_FINGERS).filter(|f| fingers[*f]).all(|f| {
        surface
            .vertices
            .iter()
            .enumerate()
            .any(|(i, v)| surface.vertex_distal[i] && surface.vertex_finger[i] as usize == f && index.nearest(v).0 <= threshold)
    })
}

/// Heuristic closure grasp on `part`, deterministic in `seed`.
pub fn generate_grasp(
    object: &PartLabeledObject,
    part: u32,
    fingers: [bool; 5],
    seed: u64,
    tmpl: &HandTemplate,
    cfg: &GraspGenConfig,
) -> Result<GraspVector> {
    if part as usize >= object.part_names.len() {
        return Err(Error::InvalidInput(format!("object has no part {part}")));
    }
    if !fingers[0] || fingers.iter().filter(|f| **f).count() < 2 {
        return Err(Error::InvalidInput("finger vector needs the thumb and at least one more finger".into()));
    }
    let frame = part_frame(object, part)?;
    let part_pts = object.part_points(part);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6173_70);
    let active_y: Vec<f64> = (1..NUM_FINGERS).filter(|f| fingers[*f]).map(|f| tmpl.fingers[f].knuckle.y).collect();
    let mean_y = active_y.iter().sum::<f64>() / active_y.len() as f64;
    let power = fingers.iter().filter(|f| **f).count() >= 4;

    for _ in 0..cfg.attempts {
        let axis = if rng.random::<bool>() { frame.axis } else { -frame.axis };
        let spin = rng.random_range(-0.5..0.5);
        let base = frame.outward.unwrap_or_else(|| {
            let m = frame.minor[rng.random_range(0..2)];
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        });
        let n = M3::from_axis_angle(&axis.scale(spin)).mul_vec(&base);
        let x = axis.cross(&n);
        let rot = Mat3::from_columns(x, axis, n);
        let support = part_pts.iter().map(|p| (*p - frame.center).dot(&n)).fold(f64::NEG_INFINITY, f64::max);
        let gap = if power {
            rng.random_range(0.1..0.8)
        } else {
            rng.random_range(0.2..3.0)
        };
        let xc = rng.random_range(4.0..10.0);
        let yc = mean_y + rng.random_range(-0.6..0.6);
        let slide = rng.random_range(-0.15..0.15) * frame.length;
        let anchor = frame.center + n.scale(support) + axis.scale(slide);
        let root = anchor - rot.mul_vec(&Vec3::new(xc, yc, -1.0 - gap));

        let mut g = GraspVector::default();
        g.pose_mut()[..3].copy_from_slice(&rot.to_axis_angle().to_array());
        for b in g.shape_mut().iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        for f in 1..NUM_FINGERS {
            g.pose_mut()[pose_index(f, 0, 2)] = rng.random_range(-0.05..0.05);
        }
        g.set_offset(root - object.centroid);
        g.set_finger_vector(fingers);

        let start = hand_surface(&g, object.centroid, tmpl);
        if max_solid_depth(&object.solid, &start) > 0.0 {
            continue;
        }
        let mut ok = true;
        for f in 0..NUM_FINGERS {
            if fingers[f] {
                if close_finger(&mut g, object, tmpl, f, -cfg.press_depth).is_none() {
                    ok = false;
                    break;
                }
            } else if !park_finger(&mut g, object, tmpl, f, cfg.contact_threshold + 0.05) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let surf = hand_surface(&g, object.centroid, tmpl);
        if max_solid_depth(&object.solid, &surf) > cfg.max_penetration {
            continue;
        }
        if !fingers_in_contact(object, &surf, part, fingers, cfg.contact_threshold) {
            continue;
        }
        if label_grasp_part(object, &surf) != Some(part) {
            continue;
        }
        return Ok(g);
    }
    Err(Error::GenerationFailed(format!(
        "no closure on {} {} after {} attempts",
        object.category, object.part_names[part as usize], cfg.attempts
    )))
}

/// Seed of object `index` of category slot `cat_index` under `master`.
pub fn object_seed(master: u64, cat_index: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = master ^ ((cat_index as u64) << 48) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) >> 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenConfig {
    pub categories: Vec<String>,
    pub objects_per_category: usize,
    pub grasps_per_object: usize,
    pub paraphrases: usize,
    pub grasp: GraspGenConfig,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            categories: crate::objects::CATEGORIES.iter().map(|s| s.to_string()).collect(),
            objects_per_category: 20,
            grasps_per_object: 4,
            paraphrases: 4,
            grasp: GraspGenConfig::default(),
        }
    }
}

/// Ground-truth samples for one object, alternating parts from a seeded start.
pub fn object_samples(
    object: &PartLabeledObject,
    count: usize,
    paraphrases: usize,
    seed: u64,
    tmpl: &HandTemplate,
    cfg: &GraspGenConfig,
) -> Result<Vec<GraspSample>> {
    let n_parts = object.part_names.len() as u32;
    let first = (seed % n_parts as u64) as u32;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let part = (first + k as u32) % n_parts;
        let fingers = default_finger_vector(object, part)?;
        let gseed = object_seed(seed, 7, k);
        let grasp = match generate_grasp(object, part, fingers, gseed, tmpl, cfg) {
            Ok(g) => g,
            Err(Error::GenerationFailed(msg)) => {
                log::warn!("skipping grasp {k} of {} seed {}: {msg}", object.category, object.seed);
                continue;
            }
            Err(e) => return Err(e),
        };
        let template = template_text(&object.category, &object.part_names[part as usize]);
        let paraphrases = paraphrase(&template, paraphrases, gseed)?;
        out.push(GraspSample {
            grasp,
            part_label: part,
            template_text: template,
            paraphrases,
        });
    }
    Ok(out)
}

pub fn generate_dataset(cfg: &DataGenConfig, master_seed: u64, tmpl: &HandTemplate) -> Result<Vec<DatasetRecord>> {
    for c in &cfg.categories {
        crate::objects::check_category(c)?;
    }
    let mut records = Vec::new();
    for (ci, cat) in cfg.categories.iter().enumerate() {
        for i in 0..cfg.objects_per_category {
            let seed = object_seed(master_seed, ci, i);
            let object = generate_object(cat, seed)?;
            let samples = object_samples(&object, cfg.grasps_per_object, cfg.paraphrases, seed, tmpl, &cfg.grasp)?;
            if samples.is_empty() {
                log::warn!("skipping {cat} seed {seed}: no grasp could be generated");
                continue;
            }
            records.push(DatasetRecord { object, samples, seed });
        }
    }
    Ok(records)
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = RecordLine {
            schema: DATASET_SCHEMA.to_string(),
            seed: r.seed,
            object: r.object.clone(),
            samples: r.samples.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |e: serde_json::Error| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        };
        // the tag is checked before the body so other versions report as such
        let tag: SchemaTag = serde_json::from_str(&line).map_err(malformed)?;
        if tag.schema != DATASET_SCHEMA {
            return Err(Error::VersionMismatch {
                expected: DATASET_SCHEMA.into(),
                found: tag.schema,
            });
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(malformed)?;
        rec.object.validate().map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.samples.is_empty() {
            return Err(Error::Malformed {
                line: i + 1,
                message: "record has no samples".into(),
            });
        }
        out.push(DatasetRecord {
            object: rec.object,
            samples: rec.samples,
            seed: rec.seed,
        });
    }
    Ok(out)
}

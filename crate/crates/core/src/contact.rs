//! Text-guided refinement: contact attraction to the targeted part, penetration,
//! joint-limit and self-collision terms, minimized with Adamax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NearestIndex;
use crate::hand::{
    capsule_vertices, hand_surface, joint_limit_penalty, pose_hand, posed_capsule_sd, self_collision_penalty,
    GraspVector, HandSurface, HandTemplate, NUM_FINGERS, OPT_DIM, POSE_DIM, SHAPE_DIM, VERTS_PER_CAPSULE,
};
use crate::linalg::{Vec3, V3};
use crate::nn::Adamax;
use crate::objects::PartLabeledObject;
use crate::real::{Dual, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_c: f64,
    pub lambda_ptr: f64,
    pub lambda_angle: f64,
    pub lambda_self: f64,
    pub lr_pose: f64,
    pub lr_shape: f64,
    pub lr_offset: f64,
    pub epochs: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            lambda_2: 0.05,
            lambda_c: 1.0,
            lambda_ptr: 5.0,
            lambda_angle: 1.0,
            lambda_self: 1.0,
            lr_pose: 1e-2,
            lr_shape: 1e-5,
            lr_offset: 1e-4,
            epochs: 200,
        }
    }
}

impl OptConfig {
    /// Weights must be non-negative; λ₁ = λ₂ is allowed for the global-contact ablation.
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_1,
            self.lambda_2,
            self.lambda_c,
            self.lambda_ptr,
            self.lambda_angle,
            self.lambda_self,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("objective weights must be finite and non-negative".into()));
        }
        if [self.lr_pose, self.lr_shape, self.lr_offset].iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Per-coordinate rates for (pose, shape, offset).
    pub fn rates(&self) -> Vec<f64> {
        let mut r = vec![self.lr_pose; POSE_DIM];
        r.extend(std::iter::repeat_n(self.lr_shape, SHAPE_DIM));
        r.extend([self.lr_offset; 3]);
        r
    }
}

/// Mean distance from each of `hc` to its nearest point of `o`; 0 for empty `hc`.
pub fn loss_hc(hc: &[V3], o: &[V3]) -> Result<f64> {
    if o.is_empty() {
        return Err(Error::InvalidInput("contact target point set is empty".into()));
    }
    if hc.is_empty() {
        return Ok(0.0);
    }
    let idx = NearestIndex::new(o)?;
    Ok(hc.iter().map(|h| idx.nearest(h).0).sum::<f64>() / hc.len() as f64)
}

/// λ₁·L(H_c, O^c) + λ₂·L(H_c, O^nc). The flag reports a skipped empty O^c.
pub fn loss_contact(hc: &[V3], oc: &[V3], onc: &[V3], lambda_1: f64, lambda_2: f64) -> Result<(f64, bool)> {
    if oc.is_empty() && onc.is_empty() {
        return Err(Error::InvalidInput("both targeted and non-targeted point sets are empty".into()));
    }
    let mut s = 0.0;
    let skipped = oc.is_empty();
    if skipped {
        log::warn!("targeted part is empty; contact attraction to it is skipped");
    } else {
        s += lambda_1 * loss_hc(hc, oc)?;
    }
    if !onc.is_empty() {
        s += lambda_2 * loss_hc(hc, onc)?;
    }
    Ok((s, skipped))
}

/// Σ |signed distance| over object points inside the hand.
pub fn loss_penetration(points: &[V3], surface: &HandSurface) -> f64 {
    points
        .iter()
        .map(|p| surface.signed_distance(p))
        .filter(|d| *d < 0.0)
        .map(|d| -d)
        .sum()
}

/// Object points split by segmentation.
pub struct ContactTargets<'a> {
    pub object: &'a PartLabeledObject,
    pub targeted: Vec<V3>,
    pub other: Vec<V3>,
}

impl<'a> ContactTargets<'a> {
    pub fn new(object: &'a PartLabeledObject, seg: &[bool]) -> Result<Self> {
        if seg.len() != object.cloud.len() {
            return Err(Error::InvalidInput(format!(
                "segmentation has {} labels for {} points",
                seg.len(),
                object.cloud.len()
            )));
        }
        let pick = |want: bool| -> Vec<V3> {
            object
                .cloud
                .points
                .iter()
                .zip(seg)
                .filter(|(_, s)| **s == want)
                .map(|(p, _)| *p)
                .collect()
        };
        let (targeted, other) = (pick(true), pick(false));
        if targeted.is_empty() {
            log::warn!("targeted part is empty; contact attraction to it is skipped");
        }
        Ok(Self {
            object,
            targeted,
            other,
        })
    }

    /// Nearest-neighbor indexes over the targeted and non-targeted points.
    pub fn indexes(&self) -> Result<(Option<NearestIndex<'_>>, Option<NearestIndex<'_>>)> {
        fn build(p: &[V3]) -> Result<Option<NearestIndex<'_>>> {
            if p.is_empty() {
                Ok(None)
            } else {
                NearestIndex::new(p).map(Some)
            }
        }
        Ok((build(&self.targeted)?, build(&self.other)?))
    }
}

/// Nearest-neighbor and inside-point assignments, frozen while one objective is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    /// (surface vertex index, nearest targeted point, nearest non-targeted point).
    pub contacts: Vec<(usize, Option<usize>, Option<usize>)>,
    /// (object point index, capsule index of the closest hand surface).
    pub inside: Vec<(usize, usize)>,
}

pub fn correspondences(
    surface: &HandSurface,
    fingers: [bool; NUM_FINGERS],
    targets: &ContactTargets,
    indexes: &(Option<NearestIndex>, Option<NearestIndex>),
) -> Correspondence {
    let contacts = crate::hand::contact_vertex_set(surface, fingers)
        .into_iter()
        .map(|v| {
            let p = surface.vertices[v];
            (
                v,
                indexes.0.as_ref().map(|i| i.nearest(&p).1),
                indexes.1.as_ref().map(|i| i.nearest(&p).1),
            )
        })
        .collect();
    let mut inside = Vec::new();
    for (pi, p) in targets.object.cloud.points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (ci, c) in surface.capsules.iter().enumerate() {
            let d = c.signed_distance(p);
            if d < best.0 {
                best = (d, ci);
            }
        }
        if best.0 < 0.0 {
            inside.push((pi, best.1));
        }
    }
    Correspondence { contacts, inside }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terms<T = f64> {
    pub contact: T,
    pub penetration: T,
    pub angle: T,
    pub self_collision: T,
    pub total: T,
}

/// Euclidean norm whose derivative is taken as zero at coincidence.
fn safe_dist<T: Real>(a: &Vec3<T>, b: &V3) -> T {
    let d = *a - Vec3::cst(*b);
    let sq = d.norm_sq();
    if sq.val() < 1e-24 {
        T::zero()
    } else {
        sq.sqrt()
    }
}

/// Objective terms at optimization coordinates `x` (pose, shape, offset) under frozen `corr`.
pub fn objective_terms<T: Real>(
    x: &[T],
    targets: &ContactTargets,
    corr: &Correspondence,
    cfg: &OptConfig,
    tmpl: &HandTemplate,
) -> Terms<T> {
    debug_assert_eq!(x.len(), OPT_DIM);
    let c = targets.object.centroid;
    let off = &x[POSE_DIM + SHAPE_DIM..];
    let root = Vec3::new(T::cst(c.x) + off[0], T::cst(c.y) + off[1], T::cst(c.z) + off[2]);
    let hand = pose_hand(&x[..POSE_DIM], &x[POSE_DIM..POSE_DIM + SHAPE_DIM], root, tmpl);

    let mut contact = T::zero();
    if !corr.contacts.is_empty() {
        let mut cache: Vec<Option<[Vec3<T>; VERTS_PER_CAPSULE]>> = vec![None; hand.capsules.len()];
        let (mut sc, mut snc) = (T::zero(), T::zero());
        for (v, kc, knc) in &corr.contacts {
            let ci = v / VERTS_PER_CAPSULE;
            let verts = cache[ci].get_or_insert_with(|| capsule_vertices(&hand.capsules[ci]));
            let p = verts[v % VERTS_PER_CAPSULE];
            if let Some(k) = kc {
                sc += safe_dist(&p, &targets.targeted[*k]);
            }
            if let Some(k) = knc {
                snc += safe_dist(&p, &targets.other[*k]);
            }
        }
        let n = corr.contacts.len() as f64;
        if !targets.targeted.is_empty() {
            contact += sc.scale(cfg.lambda_1 / n);
        }
        if !targets.other.is_empty() {
            contact += snc.scale(cfg.lambda_2 / n);
        }
    }
    let mut penetration = T::zero();
    for (pi, ci) in &corr.inside {
        let p = Vec3::cst(targets.object.cloud.points[*pi]);
        penetration -= posed_capsule_sd(&p, &hand.capsules[*ci]);
    }
    let angle = joint_limit_penalty(&x[..POSE_DIM], tmpl);
    let self_collision = self_collision_penalty(&hand);
    let total = contact.scale(cfg.lambda_c)
        + penetration.scale(cfg.lambda_ptr)
        + angle.scale(cfg.lambda_angle)
        + self_collision.scale(cfg.lambda_self);
    Terms {
        contact,
        penetration,
        angle,
        self_collision,
        total,
    }
}

/// The 61 optimized coordinates of a grasp.
pub fn opt_coords(g: &GraspVector) -> [f64; OPT_DIM] {
    let mut x = [0.0; OPT_DIM];
    x.copy_from_slice(&g.values[..OPT_DIM]);
    x
}

fn with_coords(g: &GraspVector, x: &[f64]) -> GraspVector {
    let mut out = *g;
    out.values[..OPT_DIM].copy_from_slice(x);
    out
}

/// Objective value, terms and exact gradient at `g`, with correspondences taken at `g`.
pub struct Evaluation {
    pub terms: Terms<f64>,
    pub gradient: [f64; OPT_DIM],
    pub correspondence: Correspondence,
}

/// Frozen-correspondence value and gradient at `g`.
pub fn evaluate_with(
    g: &GraspVector,
    targets: &ContactTargets,
    corr: &Correspondence,
    cfg: &OptConfig,
    tmpl: &HandTemplate,
) -> (Terms<f64>, [f64; OPT_DIM]) {
    let xs = opt_coords(g);
    let x: Vec<Dual<OPT_DIM>> = xs.iter().enumerate().map(|(i, v)| Dual::variable(*v, i)).collect();
    let t = objective_terms(&x, targets, corr, cfg, tmpl);
    (
        Terms {
            contact: t.contact.val(),
            penetration: t.penetration.val(),
            angle: t.angle.val(),
            self_collision: t.self_collision.val(),
            total: t.total.val(),
        },
        t.total.d,
    )
}

/// λ_c·L_c + λ_ptr·L_ptr + λ_angle·L_angle + λ_self·L_self and its gradient over pose, shape and offset.
pub fn total_objective(
    g: &GraspVector,
    object: &PartLabeledObject,
    seg: &[bool],
    cfg: &OptConfig,
    tmpl: &HandTemplate,
) -> Result<Evaluation> {
    cfg.validate()?;
    let targets = ContactTargets::new(object, seg)?;
    if targets.targeted.is_empty() && targets.other.is_empty() {
        return Err(Error::InvalidInput("object has no points".into()));
    }
    let idx = targets.indexes()?;
    let eval = evaluate_at(g, &targets, &idx, cfg, tmpl);
    if !eval.terms.total.is_finite() || eval.gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: "contact objective".into(),
        });
    }
    Ok(eval)
}

fn evaluate_at(
    g: &GraspVector,
    targets: &ContactTargets,
    idx: &(Option<NearestIndex>, Option<NearestIndex>),
    cfg: &OptConfig,
    tmpl: &HandTemplate,
) -> Evaluation {
    let surface = hand_surface(g, targets.object.centroid, tmpl);
    let corr = correspondences(&surface, g.finger_vector(), targets, idx);
    let (terms, gradient) = evaluate_with(g, targets, &corr, cfg, tmpl);
    Evaluation {
        terms,
        gradient,
        correspondence: corr,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_c: f64,
    pub l_ptr: f64,
    pub l_angle: f64,
    pub l_self: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineResult {
    /// Lowest-objective iterate; finger usage is the input's.
    pub grasp: GraspVector,
    pub trace: Vec<TraceRow>,
    pub initial: f64,
    pub best: f64,
    /// Set when a non-finite objective stopped the run early.
    pub aborted: bool,
    /// Set when the targeted part was empty and its attraction skipped.
    pub empty_target: bool,
}

/// Adamax over pose, shape and offset with per-group rates; correspondences are
/// refreshed every epoch.
pub fn refine(
    g: &GraspVector,
    object: &PartLabeledObject,
    seg: &[bool],
    cfg: &OptConfig,
    tmpl: &HandTemplate,
) -> Result<RefineResult> {
    cfg.validate()?;
    let targets = ContactTargets::new(object, seg)?;
    if targets.targeted.is_empty() && targets.other.is_empty() {
        return Err(Error::InvalidInput("object has no points".into()));
    }
    let idx = targets.indexes()?;
    let rates = cfg.rates();
    let mut opt = Adamax::new(OPT_DIM);
    let mut x = opt_coords(g);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut best = (f64::INFINITY, x);
    let mut aborted = false;
    for epoch in 0..=cfg.epochs {
        let cur = with_coords(g, &x);
        let e = evaluate_at(&cur, &targets, &idx, cfg, tmpl);
        let t = e.terms;
        if !t.total.is_finite() || e.gradient.iter().any(|v| !v.is_finite()) {
            log::warn!("refinement stopped at epoch {epoch}: non-finite objective");
            aborted = true;
            break;
        }
        trace.push(TraceRow {
            epoch,
            l_c: t.contact,
            l_ptr: t.penetration,
            l_angle: t.angle,
            l_self: t.self_collision,
            total: t.total,
        });
        if t.total < best.0 {
            best = (t.total, x);
        }
        if epoch < cfg.epochs {
            opt.step(&mut x, &e.gradient, &rates);
        }
    }
    if trace.is_empty() {
        return Err(Error::NonFinite {
            step: 0,
            what: "contact objective at the initial grasp".into(),
        });
    }
    Ok(RefineResult {
        grasp: with_coords(g, &best.1),
        initial: trace[0].total,
        best: best.0,
        trace,
        aborted,
        empty_target: targets.targeted.is_empty(),
    })
}

/// Per-epoch trace as CSV with a header row.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("epoch,l_c,l_ptr,l_angle,l_self,total\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.l_c, r.l_ptr, r.l_angle, r.l_self, r.total
        ));
    }
    s
}

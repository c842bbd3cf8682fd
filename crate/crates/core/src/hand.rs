//! A capsule hand with 16 posed frames (wrist + 5 fingers × 3 bones), giving
//! the same 48 pose / 10 shape parameter layout as MANO.
//!
//! Hand frame: fingers extend along +x from the wrist, the palm faces −z and
//! the thumb sits on the +y side. A positive rotation about a bone's local
//! y axis flexes it toward the palm.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{capsule_sd, segment_distance, Capsule};
use crate::linalg::{Mat3, Vec3, M3, V3};
use crate::real::Real;

pub const POSE_DIM: usize = 48;
pub const SHAPE_DIM: usize = 10;
pub const OFFSET_DIM: usize = 3;
pub const FINGER_DIM: usize = 5;
pub const GRASP_DIM: usize = POSE_DIM + SHAPE_DIM + OFFSET_DIM + FINGER_DIM;
/// Coordinates moved by the refinement stage: pose, shape and offset.
pub const OPT_DIM: usize = POSE_DIM + SHAPE_DIM + OFFSET_DIM;

pub const NUM_FINGERS: usize = 5;
pub const BONES_PER_FINGER: usize = 3;
pub const NUM_FRAMES: usize = 1 + NUM_FINGERS * BONES_PER_FINGER;
pub const VERTS_PER_CAPSULE: usize = 24;
/// Finger id used for palm capsules and vertices.
pub const PALM: u8 = 5;
pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

const GEOM_DIM: usize = 2 * NUM_FINGERS * BONES_PER_FINGER + 1;
const PALM_SHIFT: usize = GEOM_DIM - 1;

/// The 66-dim generation target: pose(48) | shape(10) | centroid offset(3) | finger usage(5).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GraspVector {
    pub values: [f64; GRASP_DIM],
}

impl TryFrom<Vec<f64>> for GraspVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<GraspVector> for Vec<f64> {
    fn from(g: GraspVector) -> Self {
        g.values.to_vec()
    }
}

impl Default for GraspVector {
    fn default() -> Self {
        Self {
            values: [0.0; GRASP_DIM],
        }
    }
}

impl GraspVector {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != GRASP_DIM {
            return Err(Error::InvalidInput(format!("grasp vector has {} entries, expected {GRASP_DIM}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("grasp vector is not finite".into()));
        }
        let mut values = [0.0; GRASP_DIM];
        values.copy_from_slice(v);
        Ok(Self { values })
    }

    pub fn pose(&self) -> &[f64] {
        &self.values[..POSE_DIM]
    }

    pub fn pose_mut(&mut self) -> &mut [f64] {
        &mut self.values[..POSE_DIM]
    }

    pub fn shape(&self) -> &[f64] {
        &self.values[POSE_DIM..POSE_DIM + SHAPE_DIM]
    }

    pub fn shape_mut(&mut self) -> &mut [f64] {
        &mut self.values[POSE_DIM..POSE_DIM + SHAPE_DIM]
    }

    pub fn offset(&self) -> V3 {
        let o = &self.values[POSE_DIM + SHAPE_DIM..OPT_DIM];
        Vec3::new(o[0], o[1], o[2])
    }

    pub fn set_offset(&mut self, o: V3) {
        self.values[POSE_DIM + SHAPE_DIM..OPT_DIM].copy_from_slice(&o.to_array());
    }

    pub fn finger_usage(&self) -> &[f64] {
        &self.values[OPT_DIM..]
    }

    /// Finger usage thresholded at 0.5, thumb → pinky.
    pub fn finger_vector(&self) -> [bool; NUM_FINGERS] {
        let u = self.finger_usage();
        [u[0] >= 0.5, u[1] >= 0.5, u[2] >= 0.5, u[3] >= 0.5, u[4] >= 0.5]
    }

    pub fn set_finger_vector(&mut self, f: [bool; NUM_FINGERS]) {
        for (i, on) in f.iter().enumerate() {
            self.values[OPT_DIM + i] = if *on { 1.0 } else { 0.0 };
        }
    }

    /// Same vector with finger usage snapped to {0, 1}.
    pub fn thresholded(&self) -> Self {
        let mut g = *self;
        g.set_finger_vector(self.finger_vector());
        g
    }
}

/// Index of axis `axis` (0 twist, 1 flex, 2 abduction) of joint `bone` of `finger` in the pose vector.
pub fn pose_index(finger: usize, bone: usize, axis: usize) -> usize {
    3 + 9 * finger + 3 * bone + axis
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FingerTemplate {
    /// Base joint position in the wrist frame (cm).
    pub knuckle: V3,
    /// Orientation of the finger's rest frame in the wrist frame (columns = local axes).
    pub base: [[f64; 3]; 3],
    pub lengths: [f64; 3],
    pub radii: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PalmCapsule {
    pub a: V3,
    pub b: V3,
    pub radius: f64,
    /// Finger whose knuckle the `b` end follows under the palm-length shape direction.
    pub follows: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HandTemplate {
    pub fingers: Vec<FingerTemplate>,
    pub palm: Vec<PalmCapsule>,
    /// Per finger-joint axis limits (45 = 15 joints × 3 axes), radians.
    pub joint_min: Vec<f64>,
    pub joint_max: Vec<f64>,
    /// Ten blend directions over [15 bone lengths, 15 bone radii, palm shift].
    pub shape_basis: Vec<Vec<f64>>,
    pub min_radius: f64,
}

fn frame_from_direction(x: V3, toward: V3) -> M3 {
    // local x along the bone; positive flexion about local y rotates x toward `toward`
    let x = x.normalized();
    let w = toward - x.scale(toward.dot(&x));
    let z = -w.normalized();
    let y = z.cross(&x);
    Mat3::from_columns(x, y, z)
}

impl Default for HandTemplate {
    fn default() -> Self {
        let ident = M3::identity();
        let thumb_base = frame_from_direction(Vec3::new(0.75, 0.65, 0.0), Vec3::new(0.2, -0.55, -0.8));
        let fingers = vec![
            FingerTemplate {
                knuckle: Vec3::new(1.6, 2.4, -0.2),
                base: thumb_base.m,
                lengths: [3.8, 3.0, 2.4],
                radii: [0.95, 0.88, 0.8],
            },
            FingerTemplate {
                knuckle: Vec3::new(8.5, 2.7, 0.0),
                base: ident.m,
                lengths: [4.0, 2.5, 2.0],
                radii: [0.85, 0.8, 0.75],
            },
            FingerTemplate {
                knuckle: Vec3::new(8.7, 0.9, 0.0),
                base: ident.m,
                lengths: [4.5, 2.8, 2.1],
                radii: [0.85, 0.8, 0.75],
            },
            FingerTemplate {
                knuckle: Vec3::new(8.4, -0.9, 0.0),
                base: ident.m,
                lengths: [4.2, 2.6, 2.0],
                radii: [0.82, 0.78, 0.72],
            },
            FingerTemplate {
                knuckle: Vec3::new(7.8, -2.7, 0.0),
                base: ident.m,
                lengths: [3.4, 2.1, 1.8],
                radii: [0.75, 0.7, 0.66],
            },
        ];
        let palm = (1..NUM_FINGERS)
            .map(|f| {
                let k = fingers[f].knuckle;
                PalmCapsule {
                    a: Vec3::new(1.2, k.y * 0.55, 0.0),
                    b: Vec3::new(k.x - 0.4, k.y, 0.0),
                    radius: 1.0,
                    follows: Some(f),
                }
            })
            .collect();

        let mut joint_min = Vec::with_capacity(45);
        let mut joint_max = Vec::with_capacity(45);
        for _ in 0..NUM_FINGERS * BONES_PER_FINGER {
            joint_min.extend_from_slice(&[-0.1, -0.1, -0.1]);
            joint_max.extend_from_slice(&[0.1, 1.6, 0.1]);
        }

        let nb = NUM_FINGERS * BONES_PER_FINGER;
        let rest = rest_geometry(&fingers);
        let mut basis = vec![vec![0.0; GEOM_DIM]; SHAPE_DIM];
        for b in 0..nb {
            let (f, k) = (b / 3, b % 3);
            basis[0][b] = 0.1 * rest[b];
            basis[1][nb + b] = 0.1 * rest[nb + b];
            basis[2 + f][b] = 0.1 * rest[b];
            if k == 0 {
                basis[7][b] = 0.1 * rest[b];
            }
            if k == 2 {
                basis[8][b] = 0.1 * rest[b];
            }
        }
        basis[9][PALM_SHIFT] = 0.8;

        Self {
            fingers,
            palm,
            joint_min,
            joint_max,
            shape_basis: basis,
            min_radius: 0.05,
        }
    }
}

fn rest_geometry(fingers: &[FingerTemplate]) -> Vec<f64> {
    let nb = NUM_FINGERS * BONES_PER_FINGER;
    let mut g = vec![0.0; GEOM_DIM];
    for (f, ft) in fingers.iter().enumerate() {
        for k in 0..3 {
            g[3 * f + k] = ft.lengths[k];
            g[nb + 3 * f + k] = ft.radii[k];
        }
    }
    g
}

impl HandTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.fingers.len() != NUM_FINGERS {
            return Err(Error::InvalidInput("hand template needs five fingers".into()));
        }
        if self.joint_min.len() != 45 || self.joint_max.len() != 45 {
            return Err(Error::InvalidInput("hand template needs 45 joint limits".into()));
        }
        if self.joint_min.iter().zip(&self.joint_max).any(|(a, b)| a > b) {
            return Err(Error::InvalidInput("joint limit min exceeds max".into()));
        }
        if self.fingers.iter().any(|f| f.lengths.iter().chain(&f.radii).any(|v| !(*v > 0.0))) {
            return Err(Error::InvalidInput("rest lengths and radii must be positive".into()));
        }
        if self.shape_basis.len() != SHAPE_DIM || self.shape_basis.iter().any(|b| b.len() != GEOM_DIM) {
            return Err(Error::InvalidInput("shape basis must be 10 × 31".into()));
        }
        Ok(())
    }

    fn geometry<T: Real>(&self, shape: &[T]) -> Vec<T> {
        let rest = rest_geometry(&self.fingers);
        let mut g: Vec<T> = rest.iter().map(|v| T::cst(*v)).collect();
        for (k, beta) in shape.iter().enumerate() {
            for (gi, bv) in g.iter_mut().zip(&self.shape_basis[k]) {
                if *bv != 0.0 {
                    *gi += beta.scale(*bv);
                }
            }
        }
        g
    }
}

/// Rigid transform of one posed frame.
#[derive(Clone, Copy, Debug)]
pub struct Frame<T = f64> {
    pub rot: Mat3<T>,
    pub origin: Vec3<T>,
}

/// A posed capsule together with the frame that orients its vertex samples.
#[derive(Clone, Copy, Debug)]
pub struct PosedCapsule<T = f64> {
    pub a: Vec3<T>,
    pub b: Vec3<T>,
    pub radius: T,
    pub length: T,
    pub rot: Mat3<T>,
    pub finger: u8,
    pub segment: u8,
}

#[derive(Clone, Debug)]
pub struct PosedHand<T = f64> {
    pub frames: Vec<Frame<T>>,
    /// Palm capsules first, then finger bones ordered finger-major.
    pub capsules: Vec<PosedCapsule<T>>,
    pub fingertips: [Vec3<T>; NUM_FINGERS],
}

impl<T: Real> PosedHand<T> {
    pub fn finger_capsule(&self, finger: usize, bone: usize) -> &PosedCapsule<T> {
        &self.capsules[self.num_palm() + 3 * finger + bone]
    }

    pub fn num_palm(&self) -> usize {
        self.capsules.len() - NUM_FINGERS * BONES_PER_FINGER
    }

    /// Positions of the 16 frame origins followed by the five fingertips.
    pub fn joint_positions(&self) -> Vec<Vec3<T>> {
        let mut out: Vec<Vec3<T>> = self.frames.iter().map(|f| f.origin).collect();
        out.extend_from_slice(&self.fingertips);
        out
    }
}

/// Poses the hand with its wrist at `root`. Frame 0 is the wrist, frame
/// `1 + 3f + k` is bone `k` of finger `f`.
pub fn pose_hand<T: Real>(pose: &[T], shape: &[T], root: Vec3<T>, tmpl: &HandTemplate) -> PosedHand<T> {
    debug_assert_eq!(pose.len(), POSE_DIM);
    debug_assert_eq!(shape.len(), SHAPE_DIM);
    let geom = tmpl.geometry(shape);
    let nb = NUM_FINGERS * BONES_PER_FINGER;
    let wrist_rot = Mat3::from_axis_angle(&Vec3::new(pose[0], pose[1], pose[2]));
    let palm_shift = geom[PALM_SHIFT];
    let min_r = T::cst(tmpl.min_radius);

    let mut frames = Vec::with_capacity(NUM_FRAMES);
    frames.push(Frame {
        rot: wrist_rot,
        origin: root,
    });

    let mut capsules = Vec::with_capacity(tmpl.palm.len() + nb);
    for pc in &tmpl.palm {
        let shift = if pc.follows.is_some() {
            Vec3::new(palm_shift, T::zero(), T::zero())
        } else {
            Vec3::zero()
        };
        let la = Vec3::cst(pc.a);
        let lb = Vec3::cst(pc.b) + shift;
        let local_rot = Mat3::cst(&frame_from_direction(pc.b - pc.a, Vec3::new(0.0, 0.0, -1.0)));
        let a = root + wrist_rot.mul_vec(&la);
        let b = root + wrist_rot.mul_vec(&lb);
        capsules.push(PosedCapsule {
            a,
            b,
            radius: T::cst(pc.radius),
            length: (lb - la).norm(),
            rot: wrist_rot.mul_mat(&local_rot),
            finger: PALM,
            segment: 0,
        });
    }

    let mut fingertips = [Vec3::zero(); NUM_FINGERS];
    for (f, ft) in tmpl.fingers.iter().enumerate() {
        let shift = if f == 0 {
            Vec3::zero()
        } else {
            Vec3::new(palm_shift, T::zero(), T::zero())
        };
        let mut start = root + wrist_rot.mul_vec(&(Vec3::cst(ft.knuckle) + shift));
        let mut rot = wrist_rot.mul_mat(&Mat3::cst(&Mat3 { m: ft.base }));
        for k in 0..BONES_PER_FINGER {
            let i = pose_index(f, k, 0);
            let local = Mat3::from_axis_angle(&Vec3::new(pose[i], pose[i + 1], pose[i + 2]));
            rot = rot.mul_mat(&local);
            frames.push(Frame { rot, origin: start });
            let len = geom[3 * f + k];
            let radius = geom[nb + 3 * f + k].max(min_r);
            let end = start + rot.column(0).scale(len);
            capsules.push(PosedCapsule {
                a: start,
                b: end,
                radius,
                length: len,
                rot,
                finger: f as u8,
                segment: k as u8,
            });
            start = end;
        }
        fingertips[f] = start;
    }
    PosedHand {
        frames,
        capsules,
        fingertips,
    }
}

/// Per-bone rigid transforms (wrist at the origin).
pub fn forward_kinematics(pose: &[f64], shape: &[f64], tmpl: &HandTemplate) -> Vec<Frame<f64>> {
    pose_hand(pose, shape, V3::zero(), tmpl).frames
}

/// Local sample directions on a unit capsule of unit length: (axial position
/// in {0 = base, 1 = tip} or ring fraction, direction in the capsule frame).
fn vertex_layout() -> [(f64, V3); VERTS_PER_CAPSULE] {
    use std::f64::consts::PI;
    let mut out = [(0.0, V3::zero()); VERTS_PER_CAPSULE];
    let mut n = 0;
    for (ring, frac) in [1.0 / 6.0, 0.5, 5.0 / 6.0].iter().enumerate() {
        for k in 0..6 {
            let ph = PI / 3.0 * k as f64 + PI / 6.0 * ring as f64;
            out[n] = (*frac, Vec3::new(0.0, ph.cos(), ph.sin()));
            n += 1;
        }
    }
    let base_polar = 60f64.to_radians();
    for ph in [0.0, PI] {
        out[n] = (0.0, Vec3::new(-base_polar.cos(), base_polar.sin() * ph.cos(), base_polar.sin() * ph.sin()));
        n += 1;
    }
    out[n] = (1.0, Vec3::new(1.0, 0.0, 0.0));
    n += 1;
    let tip_polar = 50f64.to_radians();
    for k in 0..3 {
        let ph = PI / 2.0 + 2.0 * PI / 3.0 * k as f64;
        out[n] = (1.0, Vec3::new(tip_polar.cos(), tip_polar.sin() * ph.cos(), tip_polar.sin() * ph.sin()));
        n += 1;
    }
    out
}

/// Surface samples of one posed capsule, in the fixed vertex order.
pub fn capsule_vertices<T: Real>(c: &PosedCapsule<T>) -> [Vec3<T>; VERTS_PER_CAPSULE] {
    let layout = vertex_layout();
    let mut out = [Vec3::zero(); VERTS_PER_CAPSULE];
    for (o, (frac, dir)) in out.iter_mut().zip(layout.iter()) {
        let center = if dir.x == 0.0 {
            c.a + c.rot.column(0).scale(c.length.scale(*frac))
        } else if *frac == 0.0 {
            c.a
        } else {
            c.b
        };
        *o = center + c.rot.mul_vec(&Vec3::cst(*dir)).scale(c.radius);
    }
    out
}

#[derive(Clone, Debug)]
pub struct HandSurface {
    pub capsules: Vec<Capsule>,
    /// Finger id per capsule (0–4, or [`PALM`]).
    pub capsule_finger: Vec<u8>,
    pub vertices: Vec<V3>,
    pub vertex_finger: Vec<u8>,
    pub vertex_distal: Vec<bool>,
    pub vertex_capsule: Vec<usize>,
    pub joints: Vec<V3>,
    pub root: V3,
}

impl HandSurface {
    pub fn from_posed(h: &PosedHand<f64>) -> Self {
        let mut s = HandSurface {
            capsules: Vec::with_capacity(h.capsules.len()),
            capsule_finger: Vec::with_capacity(h.capsules.len()),
            vertices: Vec::with_capacity(h.capsules.len() * VERTS_PER_CAPSULE),
            vertex_finger: Vec::new(),
            vertex_distal: Vec::new(),
            vertex_capsule: Vec::new(),
            joints: h.joint_positions(),
            root: h.frames[0].origin,
        };
        for (ci, c) in h.capsules.iter().enumerate() {
            s.capsules.push(Capsule {
                a: c.a,
                b: c.b,
                radius: c.radius,
            });
            s.capsule_finger.push(c.finger);
            let distal = c.finger != PALM && c.segment == 2;
            for v in capsule_vertices(c) {
                s.vertices.push(v);
                s.vertex_finger.push(c.finger);
                s.vertex_distal.push(distal);
                s.vertex_capsule.push(ci);
            }
        }
        s
    }

    /// Static capsule set (no vertices beyond the capsule samples); used for test fixtures.
    pub fn from_capsules(capsules: &[Capsule]) -> Self {
        let posed: Vec<PosedCapsule<f64>> = capsules
            .iter()
            .map(|c| {
                let axis = c.b - c.a;
                let len = axis.norm();
                let dir = if len > 1e-12 { axis } else { Vec3::new(1.0, 0.0, 0.0) };
                let rot = frame_from_direction(dir, dir.any_perpendicular());
                PosedCapsule {
                    a: c.a,
                    b: c.b,
                    radius: c.radius,
                    length: len,
                    rot,
                    finger: PALM,
                    segment: 0,
                }
            })
            .collect();
        let h = PosedHand {
            frames: vec![Frame {
                rot: M3::identity(),
                origin: V3::zero(),
            }],
            capsules: posed,
            fingertips: [V3::zero(); NUM_FINGERS],
        };
        let mut s = Self::from_posed(&h);
        s.joints.clear();
        s
    }

    /// Signed distance to the union of all capsules.
    pub fn signed_distance(&self, p: &V3) -> f64 {
        self.capsules.iter().map(|c| c.signed_distance(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }
}

/// Posed hand surface with the wrist at `object_centroid + g.offset`.
pub fn hand_surface(g: &GraspVector, object_centroid: V3, tmpl: &HandTemplate) -> HandSurface {
    let posed = pose_hand(g.pose(), g.shape(), object_centroid + g.offset(), tmpl);
    HandSurface::from_posed(&posed)
}

/// Vertex indices of the distal segments of every finger flagged in `fingers`.
pub fn contact_vertex_set(surface: &HandSurface, fingers: [bool; NUM_FINGERS]) -> Vec<usize> {
    (0..surface.vertices.len())
        .filter(|&i| {
            let f = surface.vertex_finger[i];
            surface.vertex_distal[i] && (f as usize) < NUM_FINGERS && fingers[f as usize]
        })
        .collect()
}

/// Squared-hinge penalty on finger joint axes outside their limits.
pub fn joint_limit_penalty<T: Real>(pose: &[T], tmpl: &HandTemplate) -> T {
    let mut s = T::zero();
    for (j, th) in pose[3..].iter().enumerate() {
        s += (*th - T::cst(tmpl.joint_max[j])).hinge_sq();
        s += (T::cst(tmpl.joint_min[j]) - *th).hinge_sq();
    }
    s
}

/// Squared-hinge overlap between capsules of different fingers (palm excluded).
pub fn self_collision_penalty<T: Real>(hand: &PosedHand<T>) -> T {
    let fingers: Vec<&PosedCapsule<T>> = hand.capsules.iter().filter(|c| c.finger != PALM).collect();
    let mut s = T::zero();
    for i in 0..fingers.len() {
        for j in i + 1..fingers.len() {
            let (a, b) = (fingers[i], fingers[j]);
            if a.finger == b.finger {
                continue;
            }
            // cheap reject before the exact segment distance
            let reach = a.length.val() + b.length.val() + a.radius.val() + b.radius.val();
            if (a.a - b.a).val().norm() > reach {
                continue;
            }
            let d = segment_distance(&a.a, &a.b, &b.a, &b.b);
            s += (a.radius + b.radius - d).hinge_sq();
        }
    }
    s
}

/// Surface-level self collision over the posed capsules of a [`HandSurface`].
pub fn self_collision_penalty_surface(surface: &HandSurface) -> f64 {
    let mut s = 0.0;
    for i in 0..surface.capsules.len() {
        for j in i + 1..surface.capsules.len() {
            let (fi, fj) = (surface.capsule_finger[i], surface.capsule_finger[j]);
            if fi == PALM || fj == PALM || fi == fj {
                continue;
            }
            let (a, b) = (&surface.capsules[i], &surface.capsules[j]);
            let d = segment_distance(&a.a, &a.b, &b.a, &b.b);
            s += (a.radius + b.radius - d).hinge_sq();
        }
    }
    s
}

/// Signed distance of `p` to a posed capsule, generic for differentiation.
pub fn posed_capsule_sd<T: Real>(p: &Vec3<T>, c: &PosedCapsule<T>) -> T {
    capsule_sd(p, &c.a, &c.b, c.radius)
}

/// Writes the hand as triangulated capsule shells (OBJ).
pub fn export_obj(surface: &HandSurface, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# capsule hand: {} capsules", surface.capsules.len()).ok();
    let (rings, segs) = (6usize, 12usize);
    let mut base = 1usize;
    for (ci, c) in surface.capsules.iter().enumerate() {
        writeln!(out, "o capsule_{ci}_finger_{}", surface.capsule_finger[ci]).ok();
        let axis = c.b - c.a;
        let len = axis.norm();
        let x = if len > 1e-12 { axis.scale(1.0 / len) } else { Vec3::new(1.0, 0.0, 0.0) };
        let u = x.any_perpendicular();
        let v = x.cross(&u);
        // latitude rows: south cap, north cap; poles added separately
        let mut rows: Vec<(V3, f64, f64)> = Vec::new();
        for i in 1..=rings {
            let th = -std::f64::consts::FRAC_PI_2 + std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
            rows.push((c.a, th.sin(), th.cos()));
        }
        for i in 0..rings {
            let th = std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
            rows.push((c.b, th.sin(), th.cos()));
        }
        let south = c.a - x.scale(c.radius);
        let north = c.b + x.scale(c.radius);
        writeln!(out, "v {} {} {}", south.x, south.y, south.z).ok();
        for (center, s, cth) in &rows {
            for k in 0..segs {
                let ph = std::f64::consts::TAU * k as f64 / segs as f64;
                let p = *center + (x.scale(*s) + (u.scale(ph.cos()) + v.scale(ph.sin())).scale(*cth)).scale(c.radius);
                writeln!(out, "v {} {} {}", p.x, p.y, p.z).ok();
            }
        }
        writeln!(out, "v {} {} {}", north.x, north.y, north.z).ok();
        let ring_start = |r: usize| base + 1 + r * segs;
        for k in 0..segs {
            let k2 = (k + 1) % segs;
            writeln!(out, "f {} {} {}", base, ring_start(0) + k2, ring_start(0) + k).ok();
        }
        for r in 0..rows.len() - 1 {
            for k in 0..segs {
                let k2 = (k + 1) % segs;
                let (a, b) = (ring_start(r) + k, ring_start(r) + k2);
                let (c2, d) = (ring_start(r + 1) + k, ring_start(r + 1) + k2);
                writeln!(out, "f {a} {b} {d}").ok();
                writeln!(out, "f {a} {d} {c2}").ok();
            }
        }
        let north_idx = ring_start(rows.len());
        let last = ring_start(rows.len() - 1);
        for k in 0..segs {
            let k2 = (k + 1) % segs;
            writeln!(out, "f {} {} {}", last + k, last + k2, north_idx).ok();
        }
        base = north_idx + 1;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the surface vertex cloud as ASCII PLY with an integer `finger` property.
pub fn export_ply(surface: &HandSurface, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ply")?;
    writeln!(f, "format ascii 1.0")?;
    writeln!(f, "element vertex {}", surface.vertices.len())?;
    writeln!(f, "property double x")?;
    writeln!(f, "property double y")?;
    writeln!(f, "property double z")?;
    writeln!(f, "property int finger")?;
    writeln!(f, "property uchar distal")?;
    writeln!(f, "end_header")?;
    for i in 0..surface.vertices.len() {
        let v = surface.vertices[i];
        writeln!(f, "{} {} {} {} {}", v.x, v.y, v.z, surface.vertex_finger[i], surface.vertex_distal[i] as u8)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::Dual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..POSE_DIM).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn template_is_valid() {
        HandTemplate::default().validate().unwrap();
    }

    #[test]
    fn identity_pose_reproduces_rest_fingertips() {
        let t = HandTemplate::default();
        let h = pose_hand(&[0.0; POSE_DIM], &[0.0; SHAPE_DIM], V3::zero(), &t);
        for f in 1..NUM_FINGERS {
            let ft = &t.fingers[f];
            let len: f64 = ft.lengths.iter().sum();
            let expect = ft.knuckle + Vec3::new(len, 0.0, 0.0);
            assert!(h.fingertips[f].dist(&expect) < 1e-12);
        }
        let th = &t.fingers[0];
        let dir = Mat3 { m: th.base }.column(0);
        let expect = th.knuckle + dir.scale(th.lengths.iter().sum());
        assert!(h.fingertips[0].dist(&expect) < 1e-12);
        assert_eq!(h.frames.len(), NUM_FRAMES);
    }

    #[test]
    fn wrist_rotation_rotates_every_joint_about_the_root() {
        let t = HandTemplate::default();
        let rest = pose_hand(&[0.0; POSE_DIM], &[0.0; SHAPE_DIM], V3::zero(), &t);
        let mut pose = [0.0; POSE_DIM];
        pose[2] = std::f64::consts::PI;
        let rot = pose_hand(&pose, &[0.0; SHAPE_DIM], V3::zero(), &t);
        let rz = M3::rotation_z(std::f64::consts::PI);
        for (a, b) in rest.joint_positions().iter().zip(rot.joint_positions()) {
            assert!(rz.mul_vec(a).dist(&b) < 1e-9);
        }
    }

    #[test]
    fn rigid_equivariance_for_random_pose_and_wrist() {
        let t = HandTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = random_pose(&mut rng, 0.4);
        pose[..3].copy_from_slice(&[0.0; 3]);
        let root = Vec3::new(1.0, -2.0, 3.0);
        let g0 = {
            let mut g = GraspVector::default();
            g.pose_mut().copy_from_slice(&pose);
            g
        };
        let s0 = hand_surface(&g0, root, &t);
        let w = Vec3::new(0.3, -0.7, 1.1);
        let mut g1 = g0;
        g1.pose_mut()[..3].copy_from_slice(&w.to_array());
        let s1 = hand_surface(&g1, root, &t);
        let r = M3::from_axis_angle(&w);
        let mut worst: f64 = 0.0;
        for (a, b) in s0.vertices.iter().zip(&s1.vertices) {
            worst = worst.max((root + r.mul_vec(&(*a - root))).dist(b));
        }
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn zero_shape_reproduces_rest_geometry() {
        let t = HandTemplate::default();
        let g = t.geometry::<f64>(&[0.0; SHAPE_DIM]);
        assert_eq!(g, rest_geometry(&t.fingers));
    }

    #[test]
    fn fingertip_gradient_matches_central_differences() {
        let t = HandTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pose = random_pose(&mut rng, 0.6);
        let shape: Vec<f64> = (0..SHAPE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        const N: usize = POSE_DIM + SHAPE_DIM;
        let pd: Vec<Dual<N>> = pose.iter().enumerate().map(|(i, v)| Dual::variable(*v, i)).collect();
        let sd: Vec<Dual<N>> = shape.iter().enumerate().map(|(i, v)| Dual::variable(*v, POSE_DIM + i)).collect();
        let h = pose_hand(&pd, &sd, Vec3::zero(), &t);
        let h_step = 1e-5;
        for f in 0..NUM_FINGERS {
            for i in 0..N {
                let eval = |delta: f64| {
                    let mut p = pose.clone();
                    let mut s = shape.clone();
                    if i < POSE_DIM {
                        p[i] += delta;
                    } else {
                        s[i - POSE_DIM] += delta;
                    }
                    pose_hand(&p, &s, V3::zero(), &t).fingertips[f]
                };
                let fd = (eval(h_step) - eval(-h_step)).scale(0.5 / h_step);
                let an = Vec3::new(h.fingertips[f].x.d[i], h.fingertips[f].y.d[i], h.fingertips[f].z.d[i]);
                let err = (fd - an).norm();
                let scale = fd.norm().max(an.norm()).max(1e-6);
                assert!(err / scale < 1e-4 || err < 1e-8, "finger {f} coord {i}: fd {fd:?} an {an:?}");
            }
        }
    }

    #[test]
    fn surface_is_deterministic_translation_equivariant_and_on_capsules() {
        let t = HandTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = GraspVector::default();
        g.pose_mut().copy_from_slice(&random_pose(&mut rng, 0.5));
        g.set_offset(Vec3::new(10.0, 0.0, 0.0));
        let a = hand_surface(&g, V3::zero(), &t);
        let b = hand_surface(&g, V3::zero(), &t);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.vertices.len(), 19 * VERTS_PER_CAPSULE);
        let shift = Vec3::new(-3.0, 7.5, 0.25);
        let c = hand_surface(&g, shift, &t);
        for (p, q) in a.vertices.iter().zip(&c.vertices) {
            assert!((*q - *p - shift).norm() < 1e-12);
        }
        for (v, ci) in a.vertices.iter().zip(&a.vertex_capsule) {
            assert!(a.capsules[*ci].signed_distance(v).abs() < 1e-9);
        }
        let zero = hand_surface(&{
            let mut z = GraspVector::default();
            z.set_offset(Vec3::new(10.0, 0.0, 0.0));
            z
        }, V3::zero(), &t);
        assert_eq!(zero.root, Vec3::new(10.0, 0.0, 0.0));
    }

    #[test]
    fn contact_sets_follow_the_finger_vector() {
        let t = HandTemplate::default();
        let s = hand_surface(&GraspVector::default(), V3::zero(), &t);
        assert!(contact_vertex_set(&s, [false; 5]).is_empty());
        let tri = contact_vertex_set(&s, [true, true, true, false, false]);
        assert_eq!(tri.len(), 3 * VERTS_PER_CAPSULE);
        for i in &tri {
            assert!(s.vertex_distal[*i] && s.vertex_finger[*i] <= 2);
        }
        let all = contact_vertex_set(&s, [true; 5]);
        let mut concat = Vec::new();
        for f in 0..5 {
            let mut one = [false; 5];
            one[f] = true;
            concat.extend(contact_vertex_set(&s, one));
        }
        concat.sort_unstable();
        let mut dedup = concat.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), concat.len());
        assert_eq!(all, concat);
        // index sets do not depend on the pose
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = GraspVector::default();
        g.pose_mut().copy_from_slice(&random_pose(&mut rng, 1.0));
        let s2 = hand_surface(&g, V3::zero(), &t);
        assert_eq!(contact_vertex_set(&s2, [true; 5]), all);
    }

    #[test]
    fn joint_limit_penalty_cases() {
        let t = HandTemplate::default();
        assert_eq!(joint_limit_penalty(&[0.0; POSE_DIM], &t), 0.0);
        let mut p = [0.0; POSE_DIM];
        p[pose_index(2, 1, 1)] = 1.6 + 0.1;
        assert!((joint_limit_penalty(&p, &t) - 0.01).abs() < 1e-12);
        // global wrist rotation is unbounded
        p = [0.0; POSE_DIM];
        p[0] = 5.0;
        assert_eq!(joint_limit_penalty(&p, &t), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 2.0);
            let mut brute = 0.0;
            for (j, th) in p[3..].iter().enumerate() {
                let hi = (th - t.joint_max[j]).max(0.0);
                let lo = (t.joint_min[j] - th).max(0.0);
                brute += hi * hi + lo * lo;
            }
            assert_eq!(joint_limit_penalty(&p, &t), brute);
        }
    }

    #[test]
    fn self_collision_cases() {
        let t = HandTemplate::default();
        let rest = pose_hand(&[0.0; POSE_DIM], &[0.0; SHAPE_DIM], V3::zero(), &t);
        assert_eq!(self_collision_penalty(&rest), 0.0);

        let caps = [
            Capsule::new(V3::zero(), Vec3::new(4.0, 0.0, 0.0), 1.0).unwrap(),
            Capsule::new(Vec3::new(0.0, 1.0, 0.0), Vec3::new(4.0, 1.0, 0.0), 1.0).unwrap(),
        ];
        let mut s = HandSurface::from_capsules(&caps);
        s.capsule_finger = vec![1, 2];
        assert!((self_collision_penalty_surface(&s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradients_match_central_differences() {
        let t = HandTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // squeeze fingers together so the self-collision term is active
        let mut pose = random_pose(&mut rng, 0.3);
        for f in 1..5 {
            pose[pose_index(f, 0, 2)] = if f < 3 { -0.35 } else { 0.35 };
        }
        let eval = |p: &[f64]| {
            let h = pose_hand(p, &[0.0; SHAPE_DIM], V3::zero(), &t);
            (self_collision_penalty(&h), joint_limit_penalty(p, &t))
        };
        let pd: Vec<Dual<POSE_DIM>> = pose.iter().enumerate().map(|(i, v)| Dual::variable(*v, i)).collect();
        let zero_shape = [Dual::<POSE_DIM>::constant(0.0); SHAPE_DIM];
        let h = pose_hand(&pd, &zero_shape, Vec3::zero(), &t);
        let sc = self_collision_penalty(&h);
        let jl = joint_limit_penalty(&pd, &t);
        assert!(sc.v > 0.0);
        let hstep = 1e-5;
        for i in 0..POSE_DIM {
            let mut p = pose.clone();
            p[i] += hstep;
            let up = eval(&p);
            p[i] -= 2.0 * hstep;
            let dn = eval(&p);
            for (an, fd) in [(sc.d[i], (up.0 - dn.0) / (2.0 * hstep)), (jl.d[i], (up.1 - dn.1) / (2.0 * hstep))] {
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / scale < 1e-4 || (an - fd).abs() < 1e-8, "coord {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn self_collision_matches_all_pairs_oracle() {
        let t = HandTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let p = random_pose(&mut rng, 0.8);
            let h = pose_hand(&p, &[0.0; SHAPE_DIM], V3::zero(), &t);
            let s = HandSurface::from_posed(&h);
            let fast = self_collision_penalty(&h);
            let brute = self_collision_penalty_surface(&s);
            assert!((fast - brute).abs() <= 1e-12 * brute.max(1.0), "{fast} vs {brute}");
        }
    }

    #[test]
    fn grasp_vector_layout_and_serde() {
        let mut g = GraspVector::default();
        g.set_offset(Vec3::new(1.0, 2.0, 3.0));
        g.set_finger_vector([true, true, false, false, true]);
        assert_eq!(g.values[58..61], [1.0, 2.0, 3.0]);
        assert_eq!(g.finger_vector(), [true, true, false, false, true]);
        let s = serde_json::to_string(&g).unwrap();
        let back: GraspVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<GraspVector>("[1.0, 2.0]").is_err());
    }

    #[test]
    fn mesh_exports_are_well_formed() {
        let t = HandTemplate::default();
        let s = hand_surface(&GraspVector::default(), V3::zero(), &t);
        let dir = std::env::temp_dir().join(format!("pg_mesh_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let obj = dir.join("h.obj");
        let ply = dir.join("h.ply");
        export_obj(&s, &obj).unwrap();
        export_ply(&s, &ply).unwrap();
        let text = std::fs::read_to_string(&obj).unwrap();
        let nv = text.lines().filter(|l| l.starts_with("v ")).count();
        for l in text.lines().filter(|l| l.starts_with("f ")) {
            for idx in l[2..].split_whitespace() {
                let i: usize = idx.parse().unwrap();
                assert!(i >= 1 && i <= nv);
            }
        }
        let ply_text = std::fs::read_to_string(&ply).unwrap();
        assert!(ply_text.contains(&format!("element vertex {}", s.vertices.len())));
        assert_eq!(ply_text.lines().count(), 9 + s.vertices.len());
        std::fs::remove_dir_all(&dir).ok();
    }
}

//! Central-difference gradient checks shared by the integration tests and the
//! acceptance harness. Each returns the worst relative error it saw.

use partgrasp::contact::{objective_terms, total_objective, ContactTargets, OptConfig};
use partgrasp::denoiser::{encoder_points, Denoiser, DenoiserConfig};
use partgrasp::diffusion::{make_schedule, q_sample};
use partgrasp::hand::{pose_hand, GraspVector, HandTemplate, GRASP_DIM, OPT_DIM, POSE_DIM, SHAPE_DIM};
use partgrasp::language::{segment_oracle, tokenize, Vocabulary};
use partgrasp::linalg::Vec3;
use partgrasp::nn::{Graph, ParamStore, Tensor};
use partgrasp::objects::{generate_object, CATEGORIES};
use partgrasp::real::{Dual, Real};
use partgrasp::synth::{default_finger_vector, generate_grasp, template_text, GraspGenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const STEP: f64 = 1e-5;

/// |a − f| / max(|a|, |f|, 1e-6); the floor keeps exact zeros from dividing by zero.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// Batch loss of the x0-prediction objective with fixed steps and noise.
struct DenoiserCase {
    clouds: Vec<Vec<Vec3>>,
    tokens: Vec<Vec<usize>>,
    ts: Vec<usize>,
    noisy: Tensor,
    target: Tensor,
}

fn denoiser_loss(net: &Denoiser, store: &ParamStore, case: &DenoiserCase) -> f64 {
    let mut g = Graph::new(store);
    let c = net.condition(&mut g, &case.clouds, &case.tokens);
    let x = g.input(case.noisy.clone());
    let p = net.denoise(&mut g, x, &case.ts, 100, c).unwrap();
    let l = g.mse(p, &case.target);
    g.value(l).scalar()
}

/// Every parameter tensor of the denoiser (point encoder, text encoder, fusion,
/// residual block, cross-attention, head) probed at `probes` random entries.
pub fn denoiser_end_to_end(seed: u64, probes: usize) -> (f64, usize) {
    let v = Vocabulary::default();
    let mut net = Denoiser::new(DenoiserConfig::default(), v.len(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move the zero-initialized output projections off zero so every path carries gradient
    for id in [net.fuse_o.w, net.cross_o.w] {
        for x in net.store.get_mut(id).data.iter_mut() {
            *x = rng.random_range(-0.2..0.2);
        }
    }
    let s = make_schedule(100, 1e-4, 0.02).unwrap();
    let mut case = DenoiserCase {
        clouds: Vec::new(),
        tokens: Vec::new(),
        ts: Vec::new(),
        noisy: Tensor::zeros(3, GRASP_DIM),
        target: Tensor::zeros(3, GRASP_DIM),
    };
    for b in 0..3 {
        let cat = CATEGORIES[(seed as usize + b) % CATEGORIES.len()];
        let o = generate_object(cat, seed + b as u64).unwrap();
        case.clouds.push(encoder_points(&o.cloud.points, o.centroid, 32));
        case.tokens.push(tokenize(&template_text(cat, &o.part_names[b % 2]), &v));
        let t = rng.random_range(1..=100);
        case.ts.push(t);
        let g0: Vec<f64> = (0..GRASP_DIM).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eps: Vec<f64> = (0..GRASP_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        case.noisy.row_mut(b).copy_from_slice(&q_sample(&g0, t, &eps, &s).unwrap());
        case.target.row_mut(b).copy_from_slice(&g0);
    }
    let grads = {
        let mut g = Graph::new(&net.store);
        let c = net.condition(&mut g, &case.clouds, &case.tokens);
        let x = g.input(case.noisy.clone());
        let p = net.denoise(&mut g, x, &case.ts, 100, c).unwrap();
        let l = g.mse(p, &case.target);
        g.backward(l).dense(&net.store)
    };
    let ids: Vec<_> = net.store.iter().map(|(id, _, _)| id).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, id) in ids.iter().enumerate() {
        let len = net.store.get(*id).data.len();
        let mut picks: Vec<usize> = (0..probes).map(|_| rng.random_range(0..len)).collect();
        if *id == net.text.embedding {
            // rows of tokens that actually occur, so the probe is not trivially zero
            picks = case.tokens[0].iter().take(probes).map(|t| t * (len / v.len())).collect();
        }
        for j in picks {
            let mut st = net.store.clone();
            st.get_mut(*id).data[j] += STEP;
            let up = denoiser_loss(&net, &st, &case);
            st.get_mut(*id).data[j] -= 2.0 * STEP;
            let dn = denoiser_loss(&net, &st, &case);
            let fd = (up - dn) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data[j], fd));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Weighted sum of posed joints and capsule endpoints, differentiated in all 61 coordinates.
pub fn kinematics(seed: u64) -> f64 {
    let t = HandTemplate::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..OPT_DIM)
        .map(|i| match i {
            _ if i < POSE_DIM => rng.random_range(-0.8..0.8),
            _ if i < POSE_DIM + SHAPE_DIM => rng.random_range(-1.0..1.0),
            _ => rng.random_range(-5.0..5.0),
        })
        .collect();
    let weights: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
    fn scalar<T: Real>(x: &[T], w: &[f64], t: &HandTemplate) -> T {
        let root = Vec3::new(x[58], x[59], x[60]);
        let h = pose_hand(&x[..POSE_DIM], &x[POSE_DIM..POSE_DIM + SHAPE_DIM], root, t);
        let mut s = T::zero();
        let mut k = 0;
        for p in h.joint_positions() {
            for c in [p.x, p.y, p.z] {
                s += c.scale(w[k % w.len()]);
                k += 1;
            }
        }
        for c in &h.capsules {
            for p in [c.a, c.b] {
                for v in [p.x, p.y, p.z] {
                    s += v.scale(w[k % w.len()]);
                    k += 1;
                }
            }
            s += c.radius.scale(w[k % w.len()]);
            k += 1;
        }
        s
    }
    let xd: Vec<Dual<OPT_DIM>> = x.iter().enumerate().map(|(i, v)| Dual::variable(*v, i)).collect();
    let an = scalar(&xd, &weights, &t).d;
    let mut worst: f64 = 0.0;
    for i in 0..OPT_DIM {
        let mut xp = x.clone();
        xp[i] += STEP;
        let up = scalar(&xp, &weights, &t);
        xp[i] -= 2.0 * STEP;
        let dn = scalar(&xp, &weights, &t);
        worst = worst.max(rel_err(an[i], (up - dn) / (2.0 * STEP)));
    }
    worst
}

/// A synthetic grasp with σ-perturbed pose, its object and prompt.
pub fn perturbed_fixture(
    k: usize,
    sigma: f64,
) -> (partgrasp::objects::PartLabeledObject, String, GraspVector, GraspVector) {
    let t = HandTemplate::default();
    let cat = CATEGORIES[k % CATEGORIES.len()];
    let object = generate_object(cat, 700 + k as u64).unwrap();
    let part = (k / CATEGORIES.len()) as u32 % 2;
    let fv = default_finger_vector(&object, part).unwrap();
    let mut seed = k as u64;
    let truth = loop {
        if let Ok(g) = generate_grasp(&object, part, fv, seed, &t, &GraspGenConfig::default()) {
            break g;
        }
        seed += 1000;
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10_000 + k as u64);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut g = truth;
    for v in g.pose_mut().iter_mut() {
        *v += n.sample(&mut rng);
    }
    let text = template_text(cat, &object.part_names[part as usize]);
    (object, text, truth, g)
}

/// Contact objective gradient against central differences with correspondences frozen.
pub fn contact_objective(k: usize) -> f64 {
    let t = HandTemplate::default();
    let cfg = OptConfig::default();
    let (object, text, _, g) = perturbed_fixture(k, 0.15);
    let seg = segment_oracle(&object, &text).unwrap();
    let targets = ContactTargets::new(&object, &seg).unwrap();
    let e = total_objective(&g, &object, &seg, &cfg, &t).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..OPT_DIM {
        let at = |d: f64| {
            let mut x = g.values[..OPT_DIM].to_vec();
            x[i] += d;
            objective_terms(&x, &targets, &e.correspondence, &cfg, &t).total
        };
        worst = worst.max(rel_err(e.gradient[i], (at(STEP) - at(-STEP)) / (2.0 * STEP)));
    }
    worst
}

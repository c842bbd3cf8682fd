//! Three browser operations over the core library, each returning JSON.
//! The plain functions are native-testable; the `#[wasm_bindgen]` wrappers
//! only convert errors.

use partgrasp::contact::{refine, OptConfig};
use partgrasp::hand::{hand_surface, HandTemplate};
use partgrasp::language::{resolve_part, segment_oracle};
use partgrasp::nn::seeded_rng;
use partgrasp::objects::generate_object_with;
use partgrasp::synth::{default_finger_vector, generate_grasp, label_grasp_part, GraspGenConfig};
use partgrasp::Result;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Points shown per object; the full 2048 is slow to redraw on a canvas.
pub const VIEW_POINTS: usize = 1024;

#[derive(Serialize)]
pub struct ObjectView {
    pub category: String,
    pub seed: u64,
    pub part_names: Vec<String>,
    pub centroid: [f64; 3],
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<u32>,
}

#[derive(Serialize)]
pub struct SegmentView {
    pub part: String,
    pub mask: Vec<bool>,
}

#[derive(Serialize)]
pub struct CapsuleView {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    pub finger: u8,
}

#[derive(Serialize)]
pub struct GraspView {
    pub part: String,
    pub fingers: [bool; 5],
    pub before: Vec<CapsuleView>,
    pub after: Vec<CapsuleView>,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Part the hand ends up touching most, if any.
    pub touched: Option<String>,
    pub trace: Vec<f64>,
}

pub fn object_view(category: &str, seed: u64) -> Result<ObjectView> {
    let o = generate_object_with(category, seed, VIEW_POINTS)?;
    Ok(ObjectView {
        category: o.category.clone(),
        seed,
        part_names: o.part_names.clone(),
        centroid: o.centroid.to_array(),
        points: o.cloud.points.iter().map(|p| p.to_array()).collect(),
        labels: o.labels().to_vec(),
    })
}

pub fn segment_view(category: &str, seed: u64, text: &str) -> Result<SegmentView> {
    let o = generate_object_with(category, seed, VIEW_POINTS)?;
    let part = resolve_part(&o, text)?;
    Ok(SegmentView {
        part: o.part_names[part as usize].clone(),
        mask: segment_oracle(&o, text)?,
    })
}

/// A synthesized grasp on the prompted part, pose-perturbed by `sigma` radians
/// and refined for `epochs` steps.
pub fn grasp_view(category: &str, seed: u64, text: &str, sigma: f64, epochs: usize) -> Result<GraspView> {
    let t = HandTemplate::default();
    let o = generate_object_with(category, seed, VIEW_POINTS)?;
    let part = resolve_part(&o, text)?;
    let fingers = default_finger_vector(&o, part)?;
    let clean = generate_grasp(&o, part, fingers, seed, &t, &GraspGenConfig::default())?;
    let mut g = clean;
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).map_err(|e| partgrasp::Error::InvalidInput(e.to_string()))?;
        let mut rng = seeded_rng(seed, 1);
        for v in g.pose_mut() {
            *v += n.sample(&mut rng);
        }
    }
    let cfg = OptConfig {
        epochs,
        ..OptConfig::default()
    };
    let r = refine(&g, &o, &segment_oracle(&o, text)?, &cfg, &t)?;
    let caps = |g| {
        let s = hand_surface(g, o.centroid, &t);
        s.capsules
            .iter()
            .zip(&s.capsule_finger)
            .map(|(c, f)| CapsuleView {
                a: c.a.to_array(),
                b: c.b.to_array(),
                radius: c.radius,
                finger: *f,
            })
            .collect::<Vec<_>>()
    };
    let touched = label_grasp_part(&o, &hand_surface(&r.grasp, o.centroid, &t)).map(|p| o.part_names[p as usize].clone());
    Ok(GraspView {
        part: o.part_names[part as usize].clone(),
        fingers,
        before: caps(&g),
        after: caps(&r.grasp),
        objective_before: r.initial,
        objective_after: r.best,
        touched,
        trace: r.trace.iter().map(|row| row.total).collect(),
    })
}

fn js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = objectView)]
pub fn object_view_js(category: &str, seed: u32) -> std::result::Result<String, JsError> {
    js(object_view(category, seed as u64))
}

#[wasm_bindgen(js_name = segmentView)]
pub fn segment_view_js(category: &str, seed: u32, text: &str) -> std::result::Result<String, JsError> {
    js(segment_view(category, seed as u64, text))
}

#[wasm_bindgen(js_name = graspView)]
pub fn grasp_view_js(category: &str, seed: u32, text: &str, sigma: f64, epochs: u32) -> std::result::Result<String, JsError> {
    js(grasp_view(category, seed as u64, text, sigma, epochs as usize))
}

#[wasm_bindgen(js_name = categories)]
pub fn categories_js() -> String {
    partgrasp::objects::CATEGORIES.join(",")
}

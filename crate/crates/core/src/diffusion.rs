//! Noise schedule, forward noising, posterior sampling, training and the
//! checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{encoder_points, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::hand::{GraspVector, GRASP_DIM};
use crate::language::{tokenize, SegNet, Vocabulary};
use crate::linalg::V3;
use crate::nn::{check_loss, seeded_rng, Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::objects::PartLabeledObject;
use crate::synth::DatasetRecord;

pub const CHECKPOINT_MAGIC: &str = "t2g-ckpt/1";

/// Tables are indexed by step, 0..=t_max; index 0 holds ᾱ_0 = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// 1 − ᾱ_t accumulated as (1 − ᾱ_{t−1}) + ᾱ_{t−1}·β_t, so that entry 1 is β_1 exactly.
    pub one_minus_alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if t_max == 0 || !(beta_1 > 0.0 && beta_1 <= beta_t && beta_t < 1.0) {
        return Err(Error::InvalidInput(format!(
            "schedule needs T ≥ 1 and 0 < β_1 ≤ β_T < 1, got T={t_max}, β=[{beta_1}, {beta_t}]"
        )));
    }
    let mut beta = vec![0.0; t_max + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if t_max == 1 {
            beta_1
        } else {
            beta_1 + (beta_t - beta_1) * (t - 1) as f64 / (t_max - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; t_max + 1];
    let mut omab = vec![0.0; t_max + 1];
    let mut beta_tilde = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        alpha_bar[t] = alpha[t] * alpha_bar[t - 1];
        omab[t] = omab[t - 1] + alpha_bar[t - 1] * beta[t];
        beta_tilde[t] = omab[t - 1] / omab[t] * beta[t];
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
        one_minus_alpha_bar: omab,
        beta_tilde,
    })
}

impl NoiseSchedule {
    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::InvalidInput(format!("diffusion step {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }

    /// Coefficients of ĝ_0 and g_t in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        let d = self.one_minus_alpha_bar[t];
        Ok((
            self.alpha_bar[t - 1].sqrt() * self.beta[t] / d,
            self.alpha[t].sqrt() * self.one_minus_alpha_bar[t - 1] / d,
        ))
    }
}

/// g_t = √ᾱ_t·g_0 + √(1−ᾱ_t)·ε.
pub fn q_sample(g0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.check(t)?;
    if g0.len() != eps.len() {
        return Err(Error::InvalidInput("noise and sample lengths differ".into()));
    }
    let (a, b) = (s.alpha_bar[t].sqrt(), s.one_minus_alpha_bar[t].sqrt());
    Ok(g0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One reverse step: posterior mean plus √β̃_t·z.
pub fn posterior_step(g0_hat: &[f64], gt: &[f64], t: usize, s: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    let (c0, ct) = s.posterior_coefficients(t)?;
    if g0_hat.len() != gt.len() || z.len() != gt.len() {
        return Err(Error::InvalidInput("posterior inputs differ in length".into()));
    }
    let sd = s.beta_tilde[t].sqrt();
    Ok(g0_hat
        .iter()
        .zip(gt)
        .zip(z)
        .map(|((a, b), z)| c0 * a + ct * b + sd * z)
        .collect())
}

/// Per-coordinate normalization applied to grasp vectors before diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct GraspStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-3;

impl GraspStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; GRASP_DIM],
            std: vec![1.0; GRASP_DIM],
        }
    }

    pub fn from_grasps<'a>(grasps: impl Iterator<Item = &'a GraspVector>) -> Self {
        let rows: Vec<&GraspVector> = grasps.collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; GRASP_DIM];
        for g in &rows {
            for (m, v) in mean.iter_mut().zip(&g.values) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; GRASP_DIM];
        for g in &rows {
            for ((s, v), m) in std.iter_mut().zip(&g.values).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = std.into_iter().map(|v| v.sqrt().max(MIN_STD)).collect();
        Self { mean, std }
    }

    pub fn normalize(&self, g: &[f64]) -> Vec<f64> {
        g.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, g: &[f64]) -> Vec<f64> {
        g.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub seed: u64,
    pub normalize: bool,
    pub network: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            lr: 1e-4,
            t_max: 100,
            beta_1: 1e-4,
            beta_t: 0.02,
            seed: 0,
            normalize: true,
            network: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidInput("epochs, batch size and learning rate must be positive".into()));
        }
        make_schedule(self.t_max, self.beta_1, self.beta_t)?;
        self.network.validate()
    }
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub t_max: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub vocab: Vocabulary,
    pub stats: GraspStats,
    pub denoiser: Denoiser,
    pub segnet: Option<SegNet>,
}

impl Model {
    pub fn new(cfg: &TrainConfig, vocab: Vocabulary, stats: GraspStats) -> Result<Self> {
        cfg.validate()?;
        let denoiser = Denoiser::new(cfg.network.clone(), vocab.len(), cfg.seed)?;
        Ok(Self {
            t_max: cfg.t_max,
            beta_1: cfg.beta_1,
            beta_t: cfg.beta_t,
            vocab,
            stats,
            denoiser,
            segnet: None,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_1, self.beta_t)
    }
}

struct TrainItem<'a> {
    record: &'a DatasetRecord,
    sample: usize,
    target: Vec<f64>,
}

/// Object point sets for the encoder, one per record.
fn record_points(records: &[DatasetRecord], n: usize) -> Vec<Vec<V3>> {
    records
        .iter()
        .map(|r| encoder_points(&r.object.cloud.points, r.object.centroid, n))
        .collect()
}

/// Minimizes the x0-prediction loss with Adam; returns the model and per-epoch mean loss.
pub fn train(records: &[DatasetRecord], cfg: &TrainConfig) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    let samples = records.iter().map(|r| r.samples.len()).sum::<usize>();
    if samples == 0 {
        return Err(Error::InvalidInput("training needs at least one grasp sample".into()));
    }
    let stats = if cfg.normalize {
        GraspStats::from_grasps(records.iter().flat_map(|r| r.samples.iter().map(|s| &s.grasp)))
    } else {
        GraspStats::identity()
    };
    let mut model = Model::new(cfg, Vocabulary::default(), stats)?;
    let schedule = model.schedule()?;
    let clouds = record_points(records, cfg.network.points);
    let mut items = Vec::with_capacity(samples);
    for (ri, r) in records.iter().enumerate() {
        for (si, s) in r.samples.iter().enumerate() {
            items.push((
                ri,
                TrainItem {
                    record: r,
                    sample: si,
                    target: model.stats.normalize(&s.grasp.values),
                },
            ));
        }
    }
    let mut opt = Adam::new(
        &model.denoiser.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = seeded_rng(cfg.seed, 22);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut batch_clouds = Vec::with_capacity(b);
            let mut tokens = Vec::with_capacity(b);
            let mut ts = Vec::with_capacity(b);
            let mut noisy = Vec::with_capacity(b * GRASP_DIM);
            let mut target = Vec::with_capacity(b * GRASP_DIM);
            for &i in chunk {
                let (ri, it) = &items[i];
                let text = it.record.samples[it.sample].pick_description(&mut rng);
                tokens.push(tokenize(text, &model.vocab));
                batch_clouds.push(clouds[*ri].clone());
                let t = rng.random_range(1..=schedule.t_max);
                let eps: Vec<f64> = (0..GRASP_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
                noisy.extend(q_sample(&it.target, t, &eps, &schedule)?);
                target.extend_from_slice(&it.target);
                ts.push(t);
            }
            let grads = {
                let d = &model.denoiser;
                let mut g = Graph::new(&d.store);
                let c = d.condition(&mut g, &batch_clouds, &tokens);
                let x = g.input(Tensor::from_vec(b, GRASP_DIM, noisy));
                let pred = d.denoise(&mut g, x, &ts, schedule.t_max, c)?;
                let loss = g.mse(pred, &Tensor::from_vec(b, GRASP_DIM, target));
                total += check_loss(g.value(loss).scalar(), step)?;
                g.backward(loss).dense(&d.store)
            };
            opt.step(&mut model.denoiser.store, &grads);
            batches += 1;
            step += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((model, history))
}

/// `n` grasps for one object and prompt; grasp i draws its noise from stream i of `seed`.
pub fn sample_many(model: &Model, object: &PartLabeledObject, text: &str, n: usize, seed: u64) -> Result<Vec<GraspVector>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let s = model.schedule()?;
    let d = &model.denoiser;
    let pts = encoder_points(&object.cloud.points, object.centroid, d.cfg.points);
    let tokens = tokenize(text, &model.vocab);
    let cond = {
        let mut g = Graph::new(&d.store);
        let c = d.condition(&mut g, &[pts], &[tokens]);
        g.value(c).clone()
    };
    let mut rngs: Vec<_> = (0..n as u64).map(|i| seeded_rng(seed, i)).collect();
    let mut x: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..GRASP_DIM).map(|_| StandardNormal.sample(r)).collect())
        .collect();
    for t in (1..=s.t_max).rev() {
        let pred = {
            let mut g = Graph::new(&d.store);
            let c = g.input(cond.clone());
            let c = g.gather(c, &vec![0; n]);
            let xt = g.input(Tensor::from_vec(n, GRASP_DIM, x.concat()));
            let p = d.denoise(&mut g, xt, &vec![t; n], s.t_max, c)?;
            g.value(p).clone()
        };
        for (i, (xi, r)) in x.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let z: Vec<f64> = (0..GRASP_DIM).map(|_| StandardNormal.sample(r)).collect();
            *xi = posterior_step(pred.row(i), xi, t, &s, &z)?;
            if xi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: t,
                    what: "sampled grasp".into(),
                });
            }
        }
    }
    x.iter()
        .map(|xi| Ok(GraspVector::from_slice(&model.stats.denormalize(xi))?.thresholded()))
        .collect()
}

pub fn sample(model: &Model, object: &PartLabeledObject, text: &str, seed: u64) -> Result<GraspVector> {
    Ok(sample_many(model, object, text, 1, seed)?.remove(0))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    t_max: usize,
    beta_1: f64,
    beta_t: f64,
    network: DenoiserConfig,
    vocabulary: Vec<String>,
    has_segnet: bool,
    tensors: Vec<TensorEntry>,
}

/// Layout: magic line, u64 LE header length, JSON header, then every tensor's
/// values as little-endian f64 in header order.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = vec![
        ("stats.mean".into(), Tensor::from_vec(1, GRASP_DIM, model.stats.mean.clone())),
        ("stats.std".into(), Tensor::from_vec(1, GRASP_DIM, model.stats.std.clone())),
    ];
    let stores = std::iter::once(&model.denoiser.store).chain(model.segnet.as_ref().map(|s| &s.store));
    for s in stores {
        tensors.extend(s.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
    }
    let header = CheckpointHeader {
        t_max: model.t_max,
        beta_1: model.beta_1,
        beta_t: model.beta_t,
        network: model.denoiser.cfg.clone(),
        vocabulary: model.vocab.tokens.clone(),
        has_segnet: model.segnet.is_some(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn malformed(message: &str) -> Error {
    Error::Malformed {
        line: 0,
        message: format!("checkpoint: {message}"),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let magic_len = CHECKPOINT_MAGIC.len() + 1;
    let found = bytes.get(..magic_len).unwrap_or(&bytes);
    if found != format!("{CHECKPOINT_MAGIC}\n").as_bytes() {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_MAGIC.into(),
            found: String::from_utf8_lossy(found).trim_end().to_string(),
        });
    }
    let mut pos = magic_len;
    let len_bytes: [u8; 8] = bytes
        .get(pos..pos + 8)
        .ok_or_else(|| malformed("truncated header length"))?
        .try_into()
        .expect("slice of 8");
    pos += 8;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let hbytes = bytes
        .get(pos..pos.saturating_add(hlen))
        .ok_or_else(|| malformed("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(hbytes)?;
    pos += hlen;
    let mut den = ParamStore::new();
    let mut seg = ParamStore::new();
    let mut mean = None;
    let mut std = None;
    for e in &header.tensors {
        let n = e.rows.checked_mul(e.cols).ok_or_else(|| malformed("tensor size overflow"))?;
        let end = n.checked_mul(8).and_then(|b| b.checked_add(pos)).ok_or_else(|| malformed("tensor size overflow"))?;
        let raw = bytes.get(pos..end).ok_or_else(|| malformed("truncated tensor data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        pos = end;
        let t = Tensor::from_vec(e.rows, e.cols, data);
        match e.name.as_str() {
            "stats.mean" => mean = Some(t.data),
            "stats.std" => std = Some(t.data),
            n if n.starts_with("den.") => {
                den.add(n, t);
            }
            n if n.starts_with("seg.") => {
                seg.add(n, t);
            }
            n => return Err(malformed(&format!("unexpected tensor `{n}`"))),
        }
    }
    if pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    let (mean, std) = match (mean, std) {
        (Some(m), Some(s)) if m.len() == GRASP_DIM && s.len() == GRASP_DIM => (m, s),
        _ => return Err(malformed("missing grasp statistics")),
    };
    let vocab = Vocabulary {
        tokens: header.vocabulary,
    };
    vocab.validate()?;
    make_schedule(header.t_max, header.beta_1, header.beta_t)?;
    let denoiser = Denoiser::with_store(header.network, vocab.len(), den)?;
    let segnet = if header.has_segnet {
        Some(SegNet::from_store(seg)?)
    } else {
        None
    };
    Ok(Model {
        t_max: header.t_max,
        beta_1: header.beta_1,
        beta_t: header.beta_t,
        vocab,
        stats: GraspStats { mean, std },
        denoiser,
        segnet,
    })
}

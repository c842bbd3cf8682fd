//! Tokenization, the learned text encoder, and text-guided point segmentation
//! (oracle or learned).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_loss, seeded_rng, Adam, AdamConfig, Graph, Linear, NodeId, ParamId, ParamStore, Tensor};
use crate::objects::{category_parts, PartLabeledObject, CATEGORIES};
use crate::synth::{DatasetRecord, VERBS};

pub const TEXT_DIM: usize = 64;
pub const EMBED_DIM: usize = 32;
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Default for Vocabulary {
    /// Grammar words, category and part names; `<unk>` is id 0.
    fn default() -> Self {
        let mut words: Vec<String> = ["the", "of", "by", "its", "at"].iter().map(|s| s.to_string()).collect();
        for v in VERBS {
            words.extend(v.split(' ').map(str::to_string));
        }
        for c in CATEGORIES {
            words.push(c.to_string());
            if let Ok(parts) = category_parts(c) {
                words.extend(parts.iter().map(|s| s.to_string()));
            }
        }
        words.sort();
        words.dedup();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(words);
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.iter().position(|t| t == word).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidInput("vocabulary must start with <unk>".into()));
        }
        Ok(())
    }
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    words(text).iter().map(|w| vocab.id(w)).collect()
}

/// Embedding table, mean pooling and one dense layer to [`TEXT_DIM`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub dense: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, vocab_size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let embedding = store.add_uniform(&format!("{prefix}.embedding"), vocab_size, EMBED_DIM, 1, rng);
        let dense = Linear::new(store, &format!("{prefix}.dense"), EMBED_DIM, TEXT_DIM, true, rng);
        Self { embedding, dense }
    }

    /// One feature row per token sequence. Ids are pooled in sorted order, so
    /// the feature is exactly invariant to word order.
    pub fn forward(&self, g: &mut Graph, batch: &[Vec<usize>]) -> NodeId {
        let mut ids = Vec::new();
        let mut pool = Vec::new();
        let lens: Vec<usize> = batch.iter().map(|t| t.len().max(1)).collect();
        let total: usize = lens.iter().sum();
        let mut offset = 0;
        for (seq, len) in batch.iter().zip(&lens) {
            let mut s = if seq.is_empty() { vec![0] } else { seq.clone() };
            s.sort_unstable();
            ids.extend(s);
            let mut row = vec![0.0; total];
            for v in row.iter_mut().skip(offset).take(*len) {
                *v = 1.0 / *len as f64;
            }
            pool.extend(row);
            offset += len;
        }
        let table = g.param(self.embedding);
        let e = g.gather(table, &ids);
        let p = g.input(Tensor::from_vec(batch.len(), total, pool));
        let pooled = g.matmul(p, e);
        self.dense.forward(g, pooled)
    }
}

/// Encodes one text outside any training graph.
pub fn encode_text(tokens: &[usize], enc: &TextEncoder, store: &ParamStore) -> Vec<f64> {
    let mut g = Graph::new(store);
    let f = enc.forward(&mut g, &[tokens.to_vec()]);
    g.value(f).data.clone()
}

/// Part of `object` named in `text`; the earliest mention wins.
pub fn resolve_part(object: &PartLabeledObject, text: &str) -> Result<u32> {
    for w in words(text) {
        if let Some(i) = object.part_index(&w) {
            return Ok(i);
        }
    }
    Err(Error::UnresolvablePrompt(text.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    #[default]
    Oracle,
    Learned,
}

impl std::str::FromStr for SegMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SegMode::Oracle),
            "learned" => Ok(SegMode::Learned),
            _ => Err(Error::InvalidInput(format!("unknown segmentation mode `{s}` (oracle, learned)"))),
        }
    }
}

/// Per-point 1 for the targeted part (O^c), 0 otherwise (O^nc).
pub fn segment_oracle(object: &PartLabeledObject, text: &str) -> Result<Vec<bool>> {
    let part = resolve_part(object, text)?;
    Ok(object.labels().iter().map(|l| *l == part).collect())
}

/// Point features of the segmentation network: centroid-frame coordinates and radius, scaled to ~unit range.
fn seg_point_features(object: &PartLabeledObject, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * 4);
    for i in idx {
        let d = object.cloud.points[*i] - object.centroid;
        out.extend_from_slice(&[d.x / 10.0, d.y / 10.0, d.z / 10.0, d.norm() / 10.0]);
    }
    out
}

pub const SEG_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub store: ParamStore,
    pub text: TextEncoder,
    pub point_in: Linear,
    pub text_in: Linear,
    pub out: Linear,
}

impl SegNet {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 11);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, "seg.text", vocab_size, &mut rng);
        let point_in = Linear::new(&mut store, "seg.point_in", 4, SEG_HIDDEN, true, &mut rng);
        let text_in = Linear::new(&mut store, "seg.text_in", TEXT_DIM, SEG_HIDDEN, false, &mut rng);
        let out = Linear::new(&mut store, "seg.out", SEG_HIDDEN, 1, true, &mut rng);
        Self {
            store,
            text,
            point_in,
            text_in,
            out,
        }
    }

    /// Rebinds the layer handles to a store holding the same parameter names.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let id = |n: &str| store.id(n).ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks `{n}`")));
        let lin = |n: &str, bias: bool| -> Result<Linear> {
            Ok(Linear {
                w: id(&format!("{n}.w"))?,
                b: if bias { Some(id(&format!("{n}.b"))?) } else { None },
            })
        };
        Ok(Self {
            text: TextEncoder {
                embedding: id("seg.text.embedding")?,
                dense: lin("seg.text.dense", true)?,
            },
            point_in: lin("seg.point_in", true)?,
            text_in: lin("seg.text_in", false)?,
            out: lin("seg.out", true)?,
            store,
        })
    }

    /// Logit column for `groups` of (object, point indices, tokens).
    fn logits(&self, g: &mut Graph, groups: &[(&PartLabeledObject, Vec<usize>, Vec<usize>)]) -> NodeId {
        let mut feats = Vec::new();
        let mut owner = Vec::new();
        for (k, (obj, idx, _)) in groups.iter().enumerate() {
            feats.extend(seg_point_features(obj, idx));
            owner.extend(std::iter::repeat_n(k, idx.len()));
        }
        let n = owner.len();
        let x = g.input(Tensor::from_vec(n, 4, feats));
        let texts: Vec<Vec<usize>> = groups.iter().map(|(_, _, t)| t.clone()).collect();
        let fl = self.text.forward(g, &texts);
        // text term computed once per group and broadcast to its points
        let tl = self.text_in.forward(g, fl);
        let tl = g.gather(tl, &owner);
        let px = self.point_in.forward(g, x);
        let h = g.add(px, tl);
        let h = g.silu(h);
        self.out.forward(g, h)
    }

    pub fn predict(&self, object: &PartLabeledObject, tokens: &[usize]) -> Vec<bool> {
        let idx: Vec<usize> = (0..object.cloud.len()).collect();
        let mut g = Graph::new(&self.store);
        let l = self.logits(&mut g, &[(object, idx, tokens.to_vec())]);
        g.value(l).data.iter().map(|x| *x >= 0.0).collect()
    }
}

/// Segmentation by mode; learned mode needs a trained network.
pub fn segment_by_text(
    object: &PartLabeledObject,
    text: &str,
    mode: SegMode,
    learned: Option<(&SegNet, &Vocabulary)>,
) -> Result<Vec<bool>> {
    match mode {
        SegMode::Oracle => segment_oracle(object, text),
        SegMode::Learned => {
            let (net, vocab) =
                learned.ok_or_else(|| Error::InvalidInput("learned segmentation needs trained parameters".into()))?;
            Ok(net.predict(object, &tokenize(text, vocab)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub batch_objects: usize,
    pub points_per_object: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_objects: 8,
            points_per_object: 256,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// One training example: an object and a prompt naming one of its parts.
pub struct SegExample<'a> {
    pub object: &'a PartLabeledObject,
    pub text: String,
    pub targets: Vec<bool>,
}

/// Examples from a dataset: every sample's descriptions with oracle targets.
pub fn seg_examples(records: &[DatasetRecord]) -> Vec<SegExample<'_>> {
    let mut out = Vec::new();
    for r in records {
        for s in &r.samples {
            for text in std::iter::once(&s.template_text).chain(&s.paraphrases) {
                let targets = r.object.labels().iter().map(|l| *l == s.part_label).collect();
                out.push(SegExample {
                    object: &r.object,
                    text: text.clone(),
                    targets,
                });
            }
        }
    }
    out
}

/// Minimizes per-point binary cross-entropy; returns the network and per-step losses.
pub fn train_segnet(
    examples: &[SegExample],
    vocab: &Vocabulary,
    cfg: &SegTrainConfig,
) -> Result<(SegNet, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("segmentation training needs at least one example".into()));
    }
    let mut net = SegNet::new(vocab.len(), cfg.seed);
    let mut opt = Adam::new(
        &net.store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = seeded_rng(cfg.seed, 12);
    let tokens: Vec<Vec<usize>> = examples.iter().map(|e| tokenize(&e.text, vocab)).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups = Vec::with_capacity(cfg.batch_objects);
        let mut targets = Vec::new();
        for _ in 0..cfg.batch_objects {
            let k = rng.random_range(0..examples.len());
            let ex = &examples[k];
            let n = ex.object.cloud.len();
            let idx: Vec<usize> = (0..cfg.points_per_object.min(n)).map(|_| rng.random_range(0..n)).collect();
            targets.extend(idx.iter().map(|i| if ex.targets[*i] { 1.0 } else { 0.0 }));
            groups.push((ex.object, idx, tokens[k].clone()));
        }
        let grads = {
            let mut g = Graph::new(&net.store);
            let l = net.logits(&mut g, &groups);
            let loss = g.bce_logits(l, &targets);
            history.push(check_loss(g.value(loss).scalar(), step)?);
            g.backward(loss).dense(&net.store)
        };
        opt.step(&mut net.store, &grads);
    }
    Ok((net, history))
}

/// Fraction of points where the learned mask equals the oracle mask.
pub fn seg_agreement(net: &SegNet, vocab: &Vocabulary, object: &PartLabeledObject, text: &str) -> Result<f64> {
    let oracle = segment_oracle(object, text)?;
    let pred = net.predict(object, &tokenize(text, vocab));
    let same = oracle.iter().zip(&pred).filter(|(a, b)| a == b).count();
    Ok(same as f64 / oracle.len() as f64)
}

//! The conditional network that predicts a clean grasp vector from a noisy one,
//! a diffusion step and an object/text condition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::GRASP_DIM;
use crate::language::{TextEncoder, TEXT_DIM};
use crate::linalg::V3;
use crate::nn::{seeded_rng, Graph, Linear, NodeId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Feature width of the point, text, condition and residual streams.
    pub width: usize,
    pub heads: usize,
    pub point_hidden: usize,
    pub head_hidden: usize,
    /// Points fed to the encoder per object.
    pub points: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: TEXT_DIM,
            heads: 2,
            point_hidden: 32,
            head_hidden: 64,
            points: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width != TEXT_DIM {
            return Err(Error::InvalidInput(format!("denoiser width must equal the text width {TEXT_DIM}")));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput("attention heads must divide the width".into()));
        }
        if self.point_hidden == 0 || self.head_hidden == 0 || self.points == 0 {
            return Err(Error::InvalidInput("denoiser sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Object points are divided by this before encoding.
pub const POINT_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub point1: Linear,
    pub point2: Linear,
    pub point_out: Linear,
    pub fuse_q: Linear,
    pub fuse_k: Linear,
    pub fuse_v: Linear,
    pub fuse_o: Linear,
    pub embed: Linear,
    pub time: Linear,
    pub residual: Linear,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub head1: Linear,
    pub head2: Linear,
}

/// 64-dim sinusoid of the step index; half sines, half cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed, 21);
        let mut s = ParamStore::new();
        let w = cfg.width;
        let text = TextEncoder::new(&mut s, "den.text", vocab_size, &mut rng);
        let point1 = Linear::new(&mut s, "den.point1", 3, cfg.point_hidden, true, &mut rng);
        let point2 = Linear::new(&mut s, "den.point2", cfg.point_hidden, w, true, &mut rng);
        let point_out = Linear::new(&mut s, "den.point_out", w, w, true, &mut rng);
        let fuse_q = Linear::new(&mut s, "den.fuse_q", w, w, false, &mut rng);
        let fuse_k = Linear::new(&mut s, "den.fuse_k", w, w, false, &mut rng);
        let fuse_v = Linear::new(&mut s, "den.fuse_v", w, w, false, &mut rng);
        let fuse_o = Linear::zeroed(&mut s, "den.fuse_o", w, w);
        let embed = Linear::new(&mut s, "den.embed", GRASP_DIM, w, true, &mut rng);
        let time = Linear::new(&mut s, "den.time", w, w, true, &mut rng);
        let residual = Linear::new(&mut s, "den.residual", w, w, true, &mut rng);
        let cross_q = Linear::new(&mut s, "den.cross_q", w, w, false, &mut rng);
        let cross_k = Linear::new(&mut s, "den.cross_k", w, w, false, &mut rng);
        let cross_v = Linear::new(&mut s, "den.cross_v", w, w, false, &mut rng);
        let cross_o = Linear::zeroed(&mut s, "den.cross_o", w, w);
        let head1 = Linear::new(&mut s, "den.head1", w, cfg.head_hidden, true, &mut rng);
        let head2 = Linear::new(&mut s, "den.head2", cfg.head_hidden, GRASP_DIM, true, &mut rng);
        Ok(Self {
            cfg,
            store: s,
            text,
            point1,
            point2,
            point_out,
            fuse_q,
            fuse_k,
            fuse_v,
            fuse_o,
            embed,
            time,
            residual,
            cross_q,
            cross_k,
            cross_v,
            cross_o,
            head1,
            head2,
        })
    }

    /// Swaps in a loaded store; names and shapes must match a fresh network exactly.
    pub fn with_store(cfg: DenoiserConfig, vocab_size: usize, store: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, vocab_size, 0)?;
        let fresh: Vec<_> = net.store.iter().map(|(_, n, t)| (n.to_string(), t.rows, t.cols)).collect();
        let loaded: Vec<_> = store.iter().map(|(_, n, t)| (n.to_string(), t.rows, t.cols)).collect();
        if fresh != loaded {
            return Err(Error::InvalidInput("denoiser parameters do not match the configured architecture".into()));
        }
        net.store = store;
        Ok(net)
    }

    /// Zeroes the text value projection so the condition ignores the prompt.
    pub fn ablate_text(&mut self) {
        self.store.get_mut(self.fuse_v.w).data.fill(0.0);
    }

    /// Global feature per cloud; every cloud must hold the same number of
    /// centroid-frame points. Exactly invariant to point order and duplication.
    pub fn encode_points(&self, g: &mut Graph, clouds: &[Vec<V3>], as_variable: bool) -> NodeId {
        let n = clouds[0].len();
        assert!(n > 0 && clouds.iter().all(|c| c.len() == n), "clouds must share a nonzero size");
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            for p in c {
                data.extend_from_slice(&[p.x / POINT_SCALE, p.y / POINT_SCALE, p.z / POINT_SCALE]);
            }
        }
        let x = Tensor::from_vec(clouds.len() * n, 3, data);
        let x = if as_variable { g.input_var(x) } else { g.input(x) };
        let h = self.point1.forward(g, x);
        let h = g.silu(h);
        let h = self.point2.forward(g, h);
        let h = g.silu(h);
        let pooled = g.segment_max(h, n);
        self.point_out.forward(g, pooled)
    }

    /// c = f_p + W_o · attention(W_q f_p; W_k f_l, W_v f_l).
    pub fn fuse(&self, g: &mut Graph, fp: NodeId, fl: NodeId) -> NodeId {
        let q = self.fuse_q.forward(g, fp);
        let k = self.fuse_k.forward(g, fl);
        let v = self.fuse_v.forward(g, fl);
        let a = g.attention(q, k, v, 1, self.cfg.heads);
        let o = self.fuse_o.forward(g, a);
        g.add(fp, o)
    }

    /// Condition rows for clouds paired with token sequences.
    pub fn condition(&self, g: &mut Graph, clouds: &[Vec<V3>], tokens: &[Vec<usize>]) -> NodeId {
        let fp = self.encode_points(g, clouds, false);
        let fl = self.text.forward(g, tokens);
        self.fuse(g, fp, fl)
    }

    /// ĝ_0 rows from noisy rows `gt`, steps `ts` (1..=t_max) and condition rows `c`.
    pub fn denoise(&self, g: &mut Graph, gt: NodeId, ts: &[usize], t_max: usize, c: NodeId) -> Result<NodeId> {
        if let Some(t) = ts.iter().find(|t| **t == 0 || **t > t_max) {
            return Err(Error::InvalidInput(format!("diffusion step {t} outside 1..={t_max}")));
        }
        let w = self.cfg.width;
        let h0 = self.embed.forward(g, gt);
        let temb: Vec<f64> = ts.iter().flat_map(|t| timestep_embedding(*t, w)).collect();
        let temb = g.input(Tensor::from_vec(ts.len(), w, temb));
        let te = self.time.forward(g, temb);
        let r = g.add(h0, te);
        let r = g.silu(r);
        let r = self.residual.forward(g, r);
        let h1 = g.add(h0, r);
        let q = self.cross_q.forward(g, h1);
        let k = self.cross_k.forward(g, c);
        let v = self.cross_v.forward(g, c);
        let a = g.attention(q, k, v, 1, self.cfg.heads);
        let a = self.cross_o.forward(g, a);
        let h2 = g.add(h1, a);
        let h = self.head1.forward(g, h2);
        let h = g.silu(h);
        Ok(self.head2.forward(g, h))
    }
}

/// `n` centroid-frame points taken at a fixed stride, the encoder input for an object.
pub fn encoder_points(points: &[V3], centroid: V3, n: usize) -> Vec<V3> {
    let m = points.len();
    (0..n).map(|i| points[i * m / n] - centroid).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::{tokenize, Vocabulary};
    use crate::objects::generate_object;

    fn net() -> (Denoiser, Vocabulary) {
        let v = Vocabulary::default();
        (Denoiser::new(DenoiserConfig::default(), v.len(), 3).unwrap(), v)
    }

    fn cloud(n: usize) -> Vec<V3> {
        let o = generate_object("mug", 2).unwrap();
        encoder_points(&o.cloud.points, o.centroid, n)
    }

    fn feature(d: &Denoiser, c: Vec<V3>) -> Vec<f64> {
        let mut g = Graph::new(&d.store);
        let f = d.encode_points(&mut g, &[c], false);
        g.value(f).data.clone()
    }

    #[test]
    fn point_feature_ignores_order_and_duplicates() {
        let (d, _) = net();
        let c = cloud(64);
        let base = feature(&d, c.clone());
        let mut rev = c.clone();
        rev.reverse();
        rev.swap(3, 40);
        assert_eq!(base, feature(&d, rev));
        let dup: Vec<V3> = c.iter().flat_map(|p| [*p, *p]).collect();
        assert_eq!(base, feature(&d, dup));
    }

    #[test]
    fn fresh_fusion_is_the_point_residual() {
        let (mut d, v) = net();
        let c = cloud(32);
        let toks = vec![tokenize("grasp the handle of the mug", &v)];
        let run = |d: &Denoiser| {
            let mut g = Graph::new(&d.store);
            let fp = d.encode_points(&mut g, &[c.clone()], false);
            let fl = d.text.forward(&mut g, &toks);
            let cc = d.fuse(&mut g, fp, fl);
            let v = d.fuse_v.forward(&mut g, fl);
            (g.value(cc).data.clone(), g.value(fp).data.clone(), g.value(v).data.clone())
        };
        let (cc, fp, _) = run(&d);
        assert_eq!(cc, fp);
        // identity output projection: single-token attention passes the value row through
        let w = d.store.get_mut(d.fuse_o.w);
        for i in 0..w.rows {
            w.data[i * w.cols + i] = 1.0;
        }
        let (cc, fp, val) = run(&d);
        for i in 0..cc.len() {
            assert!((cc[i] - (fp[i] + val[i])).abs() < 1e-12);
        }
        d.ablate_text();
        let (cc, fp, _) = run(&d);
        assert_eq!(cc, fp);
    }

    #[test]
    fn bias_only_network_outputs_the_bias() {
        let (mut d, v) = net();
        let b: Vec<f64> = (0..GRASP_DIM).map(|i| i as f64 * 0.1 - 2.0).collect();
        let ids: Vec<_> = d.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            d.store.get_mut(id).data.fill(0.0);
        }
        d.store.get_mut(d.head2.b.unwrap()).data.copy_from_slice(&b);
        let mut g = Graph::new(&d.store);
        let c = d.condition(&mut g, &[cloud(16), cloud(16)], &[tokenize("hold the mug", &v), vec![]]);
        let gt = g.input(Tensor::from_vec(2, GRASP_DIM, (0..2 * GRASP_DIM).map(|i| i as f64).collect()));
        let out = d.denoise(&mut g, gt, &[1, 77], 100, c).unwrap();
        assert_eq!(g.value(out).row(0), &b[..]);
        assert_eq!(g.value(out).row(1), &b[..]);
    }

    #[test]
    fn step_range_is_checked_and_outputs_stay_finite() {
        let (d, v) = net();
        let mut g = Graph::new(&d.store);
        let c = d.condition(&mut g, &[cloud(32)], &[tokenize("take the cap of the bottle", &v)]);
        let gt = g.input(Tensor::zeros(1, GRASP_DIM));
        assert!(d.denoise(&mut g, gt, &[0], 100, c).is_err());
        assert!(d.denoise(&mut g, gt, &[101], 100, c).is_err());
        let mut rng = seeded_rng(9, 0);
        let n = 1000;
        let mut cs = Vec::new();
        for _ in 0..n {
            cs.push(c);
        }
        let data: Vec<f64> = (0..n * GRASP_DIM)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let ts: Vec<usize> = (0..n).map(|i| 1 + i % 100).collect();
        let gt = g.input(Tensor::from_vec(n, GRASP_DIM, data));
        let cb = g.gather(c, &vec![0; n]);
        let out = d.denoise(&mut g, gt, &ts, 100, cb).unwrap();
        assert!(g.value(out).is_finite());
        let again = d.denoise(&mut g, gt, &ts, 100, cb).unwrap();
        assert_eq!(g.value(out).data, g.value(again).data);
    }
}

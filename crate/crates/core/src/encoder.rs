//! Invariant point attention encoder.
//!
//! Each block attends over residues with logits built from three parts:
//! scalar query/key products, a projection of the pair features, and the
//! squared distance between query and key points once both are placed in
//! global coordinates by their residues' frames. The distance term only
//! depends on relative positions, so the output is unchanged by a global
//! rigid motion of the structure. Frames stay fixed across blocks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::featurize::{FeatureEmbedder, RawFeatures};
use crate::nn::Linear;
use crate::tensor::{FrameSet, Graph, NodeId, ParamStore, Rng64, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub d_single: usize,
    pub d_pair: usize,
    pub heads: usize,
    pub points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            d_single: 128,
            d_pair: 64,
            heads: 4,
            points: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_single == 0 || self.d_pair == 0 || self.heads == 0 || self.points == 0 {
            return Err(contract("encoder dimensions must be positive"));
        }
        if !self.d_single.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "d_single {} is not divisible by {} heads",
                self.d_single, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_single / self.heads
    }
}

/// One attention block. Parameter names hang off the block prefix.
#[derive(Clone, Debug)]
pub struct IpaBlock {
    cfg: EncoderConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    q_points: Linear,
    k_points: Linear,
    pair_bias: Linear,
    out: Linear,
    gamma: String,
}

impl IpaBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig, rng: &mut Rng64) -> Self {
        let (ds, h, p) = (cfg.d_single, cfg.heads, cfg.points);
        let gamma = format!("{prefix}.gamma");
        // softplus(γ) = 1 at init
        store.insert(gamma.clone(), Tensor::full([h], (1f64.exp() - 1.0).ln()));
        Self {
            cfg,
            q: Linear::new(store, &format!("{prefix}.q"), ds, ds, false, rng),
            k: Linear::new(store, &format!("{prefix}.k"), ds, ds, false, rng),
            v: Linear::new(store, &format!("{prefix}.v"), ds, ds, false, rng),
            q_points: Linear::new(store, &format!("{prefix}.q_points"), ds, h * p * 3, false, rng),
            k_points: Linear::new(store, &format!("{prefix}.k_points"), ds, h * p * 3, false, rng),
            pair_bias: Linear::new(store, &format!("{prefix}.pair_bias"), cfg.d_pair, h, false, rng),
            out: Linear::new(store, &format!("{prefix}.out"), ds, ds, true, rng),
            gamma,
        }
    }

    /// `h`: `[n, d_single]`, `z`: `[n*n, d_pair]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        h: NodeId,
        z: NodeId,
        frames: &Arc<FrameSet>,
    ) -> Result<NodeId> {
        let n = g.shape(h)[0];
        let (c, heads, p) = (self.cfg.head_dim(), self.cfg.heads, self.cfg.points);
        let w_c = (2.0 / (9.0 * p as f64)).sqrt();
        let w_l = (1.0f64 / 3.0).sqrt();

        let q = self.q.forward(g, ps, h)?;
        let k = self.k.forward(g, ps, h)?;
        let v = self.v.forward(g, ps, h)?;
        let qp = self.q_points.forward(g, ps, h)?;
        let kp = self.k_points.forward(g, ps, h)?;
        let bias = self.pair_bias.forward(g, ps, z)?;
        let gamma = g.bind(ps, &self.gamma)?;
        let gamma = g.softplus(gamma)?;

        let mut outputs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice(q, 1, hd * c, (hd + 1) * c)?;
            let kh = g.slice(k, 1, hd * c, (hd + 1) * c)?;
            let vh = g.slice(v, 1, hd * c, (hd + 1) * c)?;
            let kt = g.transpose(kh)?;
            let scalar = g.matmul(qh, kt)?;
            let scalar = g.scale(scalar, 1.0 / (c as f64).sqrt())?;

            let b = g.slice(bias, 1, hd, hd + 1)?;
            let b = g.reshape(b, &[n, n])?;

            let qph = g.slice(qp, 1, hd * p * 3, (hd + 1) * p * 3)?;
            let kph = g.slice(kp, 1, hd * p * 3, (hd + 1) * p * 3)?;
            let qg = g.rigid_apply(qph, frames.clone())?;
            let kg = g.rigid_apply(kph, frames.clone())?;
            let qq = g.mul(qg, qg)?;
            let qq = g.sum_axis(qq, 1, true)?;
            let kk = g.mul(kg, kg)?;
            let kk = g.sum_axis(kk, 1, true)?;
            let kk = g.transpose(kk)?;
            let kgt = g.transpose(kg)?;
            let cross = g.matmul(qg, kgt)?;
            let cross = g.scale(cross, -2.0)?;
            let d2 = g.add(qq, kk)?;
            let d2 = g.add(d2, cross)?;
            let gh = g.slice(gamma, 0, hd, hd + 1)?;
            let gh = g.scale(gh, -0.5 * w_c)?;
            let dist_term = g.mul(d2, gh)?;

            let logits = g.add(scalar, b)?;
            let logits = g.add(logits, dist_term)?;
            let logits = g.scale(logits, w_l)?;
            let attn = g.softmax(logits)?;
            outputs.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat(&outputs, 1)?;
        let update = self.out.forward(g, ps, cat)?;
        let res = g.add(h, update)?;
        g.layer_norm(res, LAYER_NORM_EPS)
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }
}

/// Feature embedding followed by a stack of [`IpaBlock`]s.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    pub embedder: FeatureEmbedder,
    pub blocks: Vec<IpaBlock>,
}

/// Embedded inputs of one structure, ready for the block stack.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub single: NodeId,
    pub pair: NodeId,
}

impl Encoder {
    /// Registers parameters under `prefix` (for example `encoder.sim`).
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut Rng64) -> Result<Self> {
        config.validate()?;
        let embedder = FeatureEmbedder::new(store, &format!("{prefix}.embed"), config.d_single, config.d_pair, rng);
        let blocks = (0..config.blocks)
            .map(|b| IpaBlock::new(store, &format!("{prefix}.block{b}"), config, rng))
            .collect();
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            embedder,
            blocks,
        })
    }

    pub fn embed(&self, g: &mut Graph, ps: &ParamStore, raw: &RawFeatures) -> Result<Embedded> {
        if raw.n == 0 {
            return Err(contract("cannot encode zero residues"));
        }
        Ok(Embedded {
            single: self.embedder.embed_single(g, ps, raw)?,
            pair: self.embedder.embed_pair(g, ps, raw)?,
        })
    }

    /// Runs the block stack from arbitrary `[n, d_single]` singles.
    pub fn run_blocks(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        mut h: NodeId,
        pair: NodeId,
        frames: &Arc<FrameSet>,
    ) -> Result<NodeId> {
        for block in &self.blocks {
            h = block.forward(g, ps, h, pair, frames)?;
        }
        Ok(h)
    }

    /// `[n, d_single]` hidden representations.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, raw: &RawFeatures) -> Result<NodeId> {
        let e = self.embed(g, ps, raw)?;
        self.run_blocks(g, ps, e.single, e.pair, &raw.frames)
    }

    /// Forward pass outside any training graph.
    pub fn encode_value(&self, ps: &ParamStore, raw: &RawFeatures) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.encode(&mut g, ps, raw)?;
        Ok(g.value(h).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::featurize;
    use crate::geometry::RigidTransform;
    use crate::synth::random_complex;
    use crate::tensor::seeded_rng;

    fn small() -> EncoderConfig {
        EncoderConfig { blocks: 2, d_single: 16, d_pair: 8, heads: 2, points: 2 }
    }

    #[test]
    fn default_shape() {
        let mut rng = seeded_rng(0);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "encoder.test", EncoderConfig::default(), &mut rng).unwrap();
        let c = random_complex(&mut rng, "x", 3, 2, 10.0).unwrap();
        let h = enc.encode_value(&ps, &featurize(&c.residues)).unwrap();
        assert_eq!(h.shape(), &[5, 128]);
    }

    #[test]
    fn zero_blocks_is_embedding() {
        let mut rng = seeded_rng(0);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "e", EncoderConfig { blocks: 0, ..small() }, &mut rng).unwrap();
        let c = random_complex(&mut rng, "x", 3, 2, 10.0).unwrap();
        let raw = featurize(&c.residues);
        let mut g = Graph::new();
        let s = enc.embedder.embed_single(&mut g, &ps, &raw).unwrap();
        assert_eq!(g.value(s), &enc.encode_value(&ps, &raw).unwrap());
    }

    #[test]
    fn single_residue_attends_to_itself() {
        let mut rng = seeded_rng(0);
        let mut ps = ParamStore::new();
        let cfg = EncoderConfig { blocks: 1, ..small() };
        let enc = Encoder::new(&mut ps, "e", cfg, &mut rng).unwrap();
        let c = random_complex(&mut rng, "x", 1, 1, 10.0).unwrap();
        let raw = featurize(&c.residues[..1]);
        let mut g = Graph::new();
        let e = enc.embed(&mut g, &ps, &raw).unwrap();
        let out = enc.run_blocks(&mut g, &ps, e.single, e.pair, &raw.frames).unwrap();
        // expected: LN(h + (h Wv) Wo + bo)
        let wv = g.bind(&ps, "e.block0.v.weight").unwrap();
        let v = g.matmul(e.single, wv).unwrap();
        let o = enc.blocks[0].output_layer().forward(&mut g, &ps, v).unwrap();
        let r = g.add(e.single, o).unwrap();
        let expect = g.layer_norm(r, LAYER_NORM_EPS).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn zero_output_weights_give_normalized_residual() {
        let mut rng = seeded_rng(0);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "e", EncoderConfig { blocks: 1, ..small() }, &mut rng).unwrap();
        ps.zero_prefix("e.block0.out");
        let c = random_complex(&mut rng, "x", 4, 3, 10.0).unwrap();
        let raw = featurize(&c.residues);
        let mut g = Graph::new();
        let e = enc.embed(&mut g, &ps, &raw).unwrap();
        let out = enc.run_blocks(&mut g, &ps, e.single, e.pair, &raw.frames).unwrap();
        let expect = g.layer_norm(e.single, LAYER_NORM_EPS).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn rigid_invariance_three_residues() {
        let mut rng = seeded_rng(7);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "e", EncoderConfig { blocks: 1, ..small() }, &mut rng).unwrap();
        let c = random_complex(&mut rng, "x", 2, 1, 10.0).unwrap();
        let base = enc.encode_value(&ps, &featurize(&c.residues)).unwrap();
        for _ in 0..10 {
            let t = RigidTransform::random(&mut rng, 100.0);
            let moved = enc.encode_value(&ps, &featurize(&c.transformed(&t).residues)).unwrap();
            assert!(base.max_abs_diff(&moved) < 1e-6);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = seeded_rng(8);
        let mut ps = ParamStore::new();
        let enc = Encoder::new(&mut ps, "e", small(), &mut rng).unwrap();
        let c = random_complex(&mut rng, "x", 4, 3, 10.0).unwrap();
        let raw = featurize(&c.residues);
        let base = enc.encode_value(&ps, &raw).unwrap();
        let perm = [3, 5, 0, 6, 1, 4, 2];
        let out = enc.encode_value(&ps, &raw.permuted(&perm).unwrap()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in out.row(k).iter().zip(base.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut ps = ParamStore::new();
        let bad = EncoderConfig { d_single: 10, heads: 4, ..small() };
        assert!(Encoder::new(&mut ps, "e", bad, &mut seeded_rng(0)).is_err());
    }
}

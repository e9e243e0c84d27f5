//! Backbone-level interaction modeling: regress the ligand × receptor Cα
//! distance map from hidden representations.
//!
//! A pairwise array is seeded from `(h_i, h_j)` for every ligand residue `i`
//! and receptor residue `j`, then refined by a small transformer over the
//! ligand-then-receptor token sequence. Each layer reads the pairwise array
//! as an attention bias on ligand × receptor logits and writes back an
//! update from the refined tokens. A final linear layer with softplus gives
//! non-negative distances in Å.

use serde::{Deserialize, Serialize};

use crate::encoder::LAYER_NORM_EPS;
use crate::error::{contract, Result};
use crate::geometry::DistanceMap;
use crate::nn::Linear;
use crate::tensor::{Graph, NodeId, ParamStore, Rng64, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairHeadConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
}

impl Default for PairHeadConfig {
    fn default() -> Self {
        Self { layers: 2, width: 32, heads: 4 }
    }
}

#[derive(Clone, Debug)]
struct PairLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    bias: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    upd_l: Linear,
    upd_r: Linear,
}

#[derive(Clone, Debug)]
pub struct BimHead {
    pub config: PairHeadConfig,
    d_single: usize,
    proj_l: Linear,
    proj_r: Linear,
    proj_out: Linear,
    layers: Vec<PairLayer>,
    out: Linear,
}

/// Indices that expand `[nl, w]` and `[nr, w]` into `[nl*nr, w]` rows.
fn outer_indices(nl: usize, nr: usize) -> (Vec<usize>, Vec<usize>) {
    let rows = (0..nl).flat_map(|i| std::iter::repeat_n(i, nr)).collect();
    let cols = (0..nl).flat_map(|_| 0..nr).collect();
    (rows, cols)
}

fn outer_sum(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (nl, nr) = (g.shape(a)[0], g.shape(b)[0]);
    let (ri, ci) = outer_indices(nl, nr);
    let a = g.gather_rows(a, &ri)?;
    let b = g.gather_rows(b, &ci)?;
    g.add(a, b)
}

impl BimHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d_single: usize, config: PairHeadConfig, rng: &mut Rng64) -> Result<Self> {
        if config.layers == 0 || config.width == 0 || config.heads == 0 || !d_single.is_multiple_of(config.heads) {
            return Err(contract(format!("invalid pair head config {config:?} for d_single {d_single}")));
        }
        let (ds, w) = (d_single, config.width);
        let lin = |store: &mut ParamStore, rng: &mut Rng64, name: String, i, o, b| Linear::new(store, &name, i, o, b, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                PairLayer {
                    q: lin(store, rng, format!("{p}.q"), ds, ds, false),
                    k: lin(store, rng, format!("{p}.k"), ds, ds, false),
                    v: lin(store, rng, format!("{p}.v"), ds, ds, false),
                    o: lin(store, rng, format!("{p}.o"), ds, ds, true),
                    bias: lin(store, rng, format!("{p}.bias"), w, config.heads, false),
                    ffn_in: lin(store, rng, format!("{p}.ffn_in"), ds, 2 * ds, true),
                    ffn_out: lin(store, rng, format!("{p}.ffn_out"), 2 * ds, ds, true),
                    upd_l: lin(store, rng, format!("{p}.upd_l"), ds, w, false),
                    upd_r: lin(store, rng, format!("{p}.upd_r"), ds, w, true),
                }
            })
            .collect();
        Ok(Self {
            config,
            d_single,
            proj_l: lin(store, rng, format!("{prefix}.proj_l"), ds, w, false),
            proj_r: lin(store, rng, format!("{prefix}.proj_r"), ds, w, true),
            proj_out: lin(store, rng, format!("{prefix}.proj_out"), w, w, true),
            layers,
            out: lin(store, rng, format!("{prefix}.out"), w, 1, true),
        })
    }

    /// `[nl*nr, width]` initial pairwise representation, row `i*nr + j`.
    pub fn pair_project(&self, g: &mut Graph, ps: &ParamStore, h: NodeId, ligand: &[usize], receptor: &[usize]) -> Result<NodeId> {
        if ligand.is_empty() || receptor.is_empty() {
            return Err(contract("pair projection needs two non-empty binders"));
        }
        let hl = g.gather_rows(h, ligand)?;
        let hr = g.gather_rows(h, receptor)?;
        let a = self.proj_l.forward(g, ps, hl)?;
        let b = self.proj_r.forward(g, ps, hr)?;
        let s = outer_sum(g, a, b)?;
        let s = g.relu(s)?;
        self.proj_out.forward(g, ps, s)
    }

    /// `[nl, nr]` predicted distances.
    pub fn refine_and_predict(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        h: NodeId,
        ligand: &[usize],
        receptor: &[usize],
        mut pair: NodeId,
    ) -> Result<NodeId> {
        let (nl, nr) = (ligand.len(), receptor.len());
        let heads = self.config.heads;
        let dh = self.d_single / heads;
        let hl = g.gather_rows(h, ligand)?;
        let hr = g.gather_rows(h, receptor)?;
        let mut x = g.concat(&[hl, hr], 0)?;
        let zl = g.input(Tensor::zeros([nl, nl]));
        let zr = g.input(Tensor::zeros([nr, nr]));
        for layer in &self.layers {
            let bias = layer.bias.forward(g, ps, pair)?;
            let q = layer.q.forward(g, ps, x)?;
            let k = layer.k.forward(g, ps, x)?;
            let v = layer.v.forward(g, ps, x)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let b = g.slice(bias, 1, hd, hd + 1)?;
                let b = g.reshape(b, &[nl, nr])?;
                let bt = g.transpose(b)?;
                let top = g.concat(&[zl, b], 1)?;
                let bottom = g.concat(&[bt, zr], 1)?;
                let full = g.concat(&[top, bottom], 0)?;
                let qh = g.slice(q, 1, hd * dh, (hd + 1) * dh)?;
                let kh = g.slice(k, 1, hd * dh, (hd + 1) * dh)?;
                let vh = g.slice(v, 1, hd * dh, (hd + 1) * dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
                let s = g.add(s, full)?;
                let a = g.softmax(s)?;
                outs.push(g.matmul(a, vh)?);
            }
            let cat = g.concat(&outs, 1)?;
            let o = layer.o.forward(g, ps, cat)?;
            let r = g.add(x, o)?;
            x = g.layer_norm(r, LAYER_NORM_EPS)?;
            let f = layer.ffn_in.forward(g, ps, x)?;
            let f = g.relu(f)?;
            let f = layer.ffn_out.forward(g, ps, f)?;
            let r = g.add(x, f)?;
            x = g.layer_norm(r, LAYER_NORM_EPS)?;

            let xl = g.slice(x, 0, 0, nl)?;
            let xr = g.slice(x, 0, nl, nl + nr)?;
            let a = layer.upd_l.forward(g, ps, xl)?;
            let b = layer.upd_r.forward(g, ps, xr)?;
            let u = outer_sum(g, a, b)?;
            let u = g.relu(u)?;
            pair = g.add(pair, u)?;
        }
        let d = self.out.forward(g, ps, pair)?;
        let d = g.softplus(d)?;
        g.reshape(d, &[nl, nr])
    }

    /// Pair projection plus refinement.
    pub fn predict(&self, g: &mut Graph, ps: &ParamStore, h: NodeId, ligand: &[usize], receptor: &[usize]) -> Result<NodeId> {
        let pair = self.pair_project(g, ps, h, ligand, receptor)?;
        self.refine_and_predict(g, ps, h, ligand, receptor, pair)
    }
}

/// Distance map as a `[rows, cols]` tensor, optionally capped at `clamp` Å.
pub fn target_tensor(map: &DistanceMap, clamp: Option<f64>) -> Tensor {
    let values = match clamp {
        Some(c) => map.values.iter().map(|&v| v.min(c)).collect(),
        None => map.values.clone(),
    };
    Tensor::new([map.rows, map.cols], values).expect("finite distances")
}

/// Mean squared error in Å².
pub fn bim_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(contract(format!(
            "distance map shapes differ: {:?} vs {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    g.squared_error(pred, target)
}

pub fn bim_loss_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let t = g.input(target.clone());
    let l = bim_loss(&mut g, p, t)?;
    Ok(g.value(l).item())
}

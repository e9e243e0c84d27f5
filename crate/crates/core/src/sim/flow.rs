//! Conditional coupling flow over χ angles, evaluated inside the graph.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use super::spline::{derivative_shift, DEFAULT_BINS, MIN_BIN, MIN_DERIVATIVE};
use crate::error::{contract, Result};
use crate::geometry::Residue;
use crate::nn::Mlp;
use crate::residue::{AminoAcid, NUM_TYPES};
use crate::tensor::{Graph, NodeId, ParamStore, Rng64, Tensor};

pub const MAX_CHI: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub bins: usize,
    pub layers: usize,
    /// Hidden widths of each conditioner MLP.
    pub hidden: Vec<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            layers: 4,
            hidden: vec![128],
        }
    }
}

/// Angle slots transformed by coupling layer `layer` for a residue with `t`
/// torsions. Layers alternate between even and odd slots; a single torsion
/// is transformed once, by the first layer.
pub fn transformed_slots(layer: usize, t: usize) -> Vec<usize> {
    if t == 1 {
        return if layer == 0 { vec![0] } else { vec![] };
    }
    (0..t).filter(|k| k % 2 == layer % 2).collect()
}

/// Rational-quadratic spline applied row-wise: `raw` is `[m, 3K+1]`, `x` is
/// `[m]`. Returns `(f(x), log f′(x))`, both `[m]`.
pub fn spline_graph(g: &mut Graph, raw: NodeId, x: NodeId, bins: usize) -> Result<(NodeId, NodeId)> {
    let m = g.shape(x)[0];
    if g.shape(raw) != [m, 3 * bins + 1] {
        return Err(contract(format!(
            "spline parameters {:?} do not match {m} inputs with {bins} bins",
            g.shape(raw)
        )));
    }
    let span = 1.0 - bins as f64 * MIN_BIN;
    let sizes = |g: &mut Graph, lo: usize| -> Result<NodeId> {
        let r = g.slice(raw, 1, lo, lo + bins)?;
        let p = g.softmax(r)?;
        let p = g.scale(p, span * TAU)?;
        g.add_scalar(p, MIN_BIN * TAU)
    };
    let widths = sizes(g, 0)?;
    let heights = sizes(g, bins)?;
    let dr = g.slice(raw, 1, 2 * bins, 3 * bins + 1)?;
    let dr = g.add_scalar(dr, derivative_shift())?;
    let deltas = g.softplus(dr)?;
    let deltas = g.add_scalar(deltas, MIN_DERIVATIVE)?;

    let mut lower = Tensor::zeros([bins, bins]);
    for j in 0..bins {
        for k in j + 1..bins {
            lower.data_mut()[j * bins + k] = 1.0;
        }
    }
    let lower = g.input(lower);
    let left_x = g.matmul(widths, lower)?;
    let left_y = g.matmul(heights, lower)?;

    let mut mask = Tensor::zeros([m, bins]);
    {
        let lx = g.value(left_x).data();
        let xv = g.value(x).data();
        for r in 0..m {
            let row = &lx[r * bins..(r + 1) * bins];
            let k = (row.partition_point(|&v| v <= xv[r]).max(1) - 1).min(bins - 1);
            mask.data_mut()[r * bins + k] = 1.0;
        }
    }
    let mask = g.input(mask);
    let pick = |g: &mut Graph, a: NodeId| -> Result<NodeId> {
        let v = g.mul(a, mask)?;
        g.sum_axis(v, 1, false)
    };
    let xk = pick(g, left_x)?;
    let yk = pick(g, left_y)?;
    let w = pick(g, widths)?;
    let h = pick(g, heights)?;
    let d_lo = g.slice(deltas, 1, 0, bins)?;
    let d_hi = g.slice(deltas, 1, 1, bins + 1)?;
    let d0 = pick(g, d_lo)?;
    let d1 = pick(g, d_hi)?;

    let s = g.div(h, w)?;
    let dx = g.sub(x, xk)?;
    let xi = g.div(dx, w)?;
    let omx = g.scale(xi, -1.0)?;
    let omx = g.add_scalar(omx, 1.0)?;
    let t = g.mul(xi, omx)?;
    let xi2 = g.mul(xi, xi)?;

    let s_xi2 = g.mul(s, xi2)?;
    let d0t = g.mul(d0, t)?;
    let num = g.add(s_xi2, d0t)?;
    let num = g.mul(h, num)?;
    let c = g.add(d1, d0)?;
    let two_s = g.scale(s, 2.0)?;
    let c = g.sub(c, two_s)?;
    let ct = g.mul(c, t)?;
    let den = g.add(s, ct)?;
    let frac = g.div(num, den)?;
    let y = g.add(yk, frac)?;

    let a = g.mul(d1, xi2)?;
    let b = g.mul(two_s, t)?;
    let omx2 = g.mul(omx, omx)?;
    let e = g.mul(d0, omx2)?;
    let inner = g.add(a, b)?;
    let inner = g.add(inner, e)?;
    let s2 = g.mul(s, s)?;
    let dnum = g.mul(s2, inner)?;
    let log_num = g.log(dnum)?;
    let log_den = g.log(den)?;
    let log_den = g.scale(log_den, 2.0)?;
    let logdet = g.sub(log_num, log_den)?;
    Ok((y, logdet))
}

/// Coupling flow shared by all residue types; the conditioner sees the
/// residue type as a one-hot.
#[derive(Clone, Debug)]
pub struct SidechainFlow {
    pub config: FlowConfig,
    pub d_single: usize,
    conditioners: Vec<Mlp>,
}

impl SidechainFlow {
    /// Conditioner output layers start at zero, so a fresh flow is the
    /// identity map and every angle has density `1/2π`.
    pub fn new(store: &mut ParamStore, prefix: &str, d_single: usize, config: FlowConfig, rng: &mut Rng64) -> Result<Self> {
        if config.bins == 0 || config.layers == 0 {
            return Err(contract("flow needs at least one bin and one layer"));
        }
        let input = d_single + NUM_TYPES + 2 * MAX_CHI;
        let output = MAX_CHI * (3 * config.bins + 1);
        let mut widths = vec![input];
        widths.extend(&config.hidden);
        widths.push(output);
        let conditioners = (0..config.layers)
            .map(|l| {
                let name = format!("{prefix}.coupling{l}");
                let mlp = Mlp::new(store, &name, &widths, rng);
                let last = mlp.layers().last().expect("at least one layer");
                store.zero_prefix(last.weight_name());
                if let Some(b) = last.bias_name() {
                    store.zero_prefix(b);
                }
                mlp
            })
            .collect();
        Ok(Self { config, d_single, conditioners })
    }

    pub fn conditioners(&self) -> &[Mlp] {
        &self.conditioners
    }

    /// `[m]` log densities of `chis[r]` given row `r` of `h` (`[m, d_single]`).
    pub fn log_prob(&self, g: &mut Graph, ps: &ParamStore, h: NodeId, types: &[AminoAcid], chis: &[Vec<f64>]) -> Result<NodeId> {
        let m = types.len();
        if chis.len() != m || g.shape(h) != [m, self.d_single] {
            return Err(contract(format!(
                "flow inputs disagree: {m} types, {} angle sets, hidden {:?}",
                chis.len(),
                g.shape(h)
            )));
        }
        if let Some(r) = chis.iter().position(|c| c.is_empty() || c.len() > MAX_CHI) {
            return Err(contract(format!("residue {r} has {} torsions; expected 1..=4", chis[r].len())));
        }
        let k3 = 3 * self.config.bins + 1;
        let mut onehot = Tensor::zeros([m, NUM_TYPES]);
        for (r, aa) in types.iter().enumerate() {
            onehot.data_mut()[r * NUM_TYPES + aa.index()] = 1.0;
        }
        let onehot = g.input(onehot);
        let mut cur: Vec<NodeId> = (0..MAX_CHI)
            .map(|k| {
                let col = chis.iter().map(|c| c.get(k).copied().unwrap_or(0.0)).collect();
                g.input(Tensor::new([m], col).expect("finite angles"))
            })
            .collect();
        let mut ldj = g.input(Tensor::zeros([m]));

        for (l, cond) in self.conditioners.iter().enumerate() {
            let slots: Vec<Vec<usize>> = chis.iter().map(|c| transformed_slots(l, c.len())).collect();
            let mut given = Tensor::zeros([m, MAX_CHI]);
            for (r, c) in chis.iter().enumerate() {
                for k in 0..c.len() {
                    if !slots[r].contains(&k) {
                        given.data_mut()[r * MAX_CHI + k] = 1.0;
                    }
                }
            }
            let mut feats = Vec::with_capacity(MAX_CHI);
            for (k, &ck) in cur.iter().enumerate() {
                let mk: Vec<f64> = (0..m).map(|r| given.get(&[r, k])).collect();
                let mk = g.input(Tensor::new([m], mk)?);
                let f = g.scale(ck, 1.0 / PI)?;
                let f = g.add_scalar(f, -1.0)?;
                let f = g.mul(f, mk)?;
                feats.push(g.reshape(f, &[m, 1])?);
            }
            let given = g.input(given);
            let mut parts = vec![h, onehot];
            parts.extend(feats);
            parts.push(given);
            let input = g.concat(&parts, 1)?;
            let out = cond.forward(g, ps, input)?;

            for k in 0..MAX_CHI {
                let rows: Vec<usize> = (0..m).filter(|&r| slots[r].contains(&k)).collect();
                if rows.is_empty() {
                    continue;
                }
                let raw = g.slice(out, 1, k * k3, (k + 1) * k3)?;
                let raw = g.gather_rows(raw, &rows)?;
                let x = g.gather_rows(cur[k], &rows)?;
                let (y, ld) = spline_graph(g, raw, x, self.config.bins)?;
                let mut keep = vec![1.0; m];
                for &r in &rows {
                    keep[r] = 0.0;
                }
                let keep = g.input(Tensor::new([m], keep)?);
                let kept = g.mul(cur[k], keep)?;
                let y = g.scatter_rows(y, &rows, m)?;
                cur[k] = g.add(kept, y)?;
                let ld = g.scatter_rows(ld, &rows, m)?;
                ldj = g.add(ldj, ld)?;
            }
        }
        let base: Vec<f64> = chis.iter().map(|c| -(c.len() as f64) * TAU.ln()).collect();
        let base = g.input(Tensor::new([m], base)?);
        g.add(ldj, base)
    }

    /// Log densities outside any training graph.
    pub fn log_prob_value(&self, ps: &ParamStore, h: &Tensor, types: &[AminoAcid], chis: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let hn = g.input(h.clone());
        let lp = self.log_prob(&mut g, ps, hn, types, chis)?;
        Ok(g.value(lp).data().to_vec())
    }
}

/// Indices of residues with at least one χ angle and all defining atoms.
pub fn residues_with_torsions(residues: &[Residue]) -> Vec<usize> {
    residues
        .iter()
        .enumerate()
        .filter(|(_, r)| r.chi.as_ref().is_some_and(|c| !c.is_empty()))
        .map(|(i, _)| i)
        .collect()
}

/// Mean negative log-likelihood of observed χ angles over residues that
/// have them. `h` is `[n, d_single]` for the `n` residues.
pub fn sim_loss(g: &mut Graph, ps: &ParamStore, flow: &SidechainFlow, h: NodeId, residues: &[Residue]) -> Result<NodeId> {
    let idx = residues_with_torsions(residues);
    if idx.is_empty() {
        return Err(contract("no residue with sidechain torsions"));
    }
    let types: Vec<AminoAcid> = idx.iter().map(|&i| residues[i].aa).collect();
    let chis: Vec<Vec<f64>> = idx.iter().map(|&i| residues[i].chi.clone().expect("filtered")).collect();
    let rows = g.gather_rows(h, &idx)?;
    let lp = flow.log_prob(g, ps, rows, &types, &chis)?;
    let mean = g.mean(lp)?;
    g.scale(mean, -1.0)
}

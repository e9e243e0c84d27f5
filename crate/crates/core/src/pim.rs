//! Protein-level interaction modeling: in-batch contrastive matching of
//! ligand and receptor global representations.
//!
//! For a batch of `N` complexes with pooled representations `Hˡ_k`, `Hʳ_k`
//! and cosine similarities `s_ij = cos(Hˡ_i, Hʳ_j)`:
//!
//! ```text
//! Lˡ_k = −(1/N) log( exp(s_kk/τ) / Σ_j exp(s_kj/τ) )
//! Lʳ_k = −(1/N) log( exp(s_kk/τ) / Σ_j exp(s_jk/τ) )
//! L    = ½ Σ_k (Lˡ_k + Lʳ_k)
//! ```

use crate::error::{contract, Error, Result};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const TEMPERATURE_MIN: f64 = 1e-3;
pub const TEMPERATURE_MAX: f64 = 1.0;
pub const LOG_TAU: &str = "pim.log_tau";
const NORM_FLOOR: f64 = 1e-12;

/// Adds the trainable temperature (stored as its logarithm).
pub fn init_temperature(store: &mut ParamStore, tau: f64) {
    store.insert(LOG_TAU, Tensor::scalar(tau.ln()));
}

/// `τ = exp(clamp(log τ, ln 1e-3, ln 1))` as a graph node.
pub fn temperature(g: &mut Graph, ps: &ParamStore) -> Result<NodeId> {
    let lt = g.bind(ps, LOG_TAU)?;
    let lt = g.clamp(lt, TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln())?;
    g.exp(lt)
}

/// Coordinate-wise maximum over the rows `indices` of `h` (`[n, d]` → `[d]`).
pub fn global_pool(g: &mut Graph, h: NodeId, indices: &[usize]) -> Result<NodeId> {
    if indices.is_empty() {
        return Err(contract("global_pool over an empty residue set"));
    }
    let rows = g.gather_rows(h, indices)?;
    g.max_axis(rows, 0, false)
}

/// Scales each row of `[N, d]` to unit length.
fn unit_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let sq = g.mul(x, x)?;
    let sq = g.sum_axis(sq, 1, true)?;
    if let Some(i) = g.value(sq).data().iter().position(|&v| v.sqrt() <= NORM_FLOOR) {
        return Err(Error::Numeric(format!(
            "representation {i} has near-zero norm; cosine similarity undefined"
        )));
    }
    let norm = g.sqrt(sq)?;
    g.div(x, norm)
}

/// `[N, N]` cosine similarities between rows of `a` and rows of `b`.
pub fn similarity_matrix(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let a = unit_rows(g, a)?;
    let b = unit_rows(g, b)?;
    let bt = g.transpose(b)?;
    g.matmul(a, bt)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract("cosine similarity of vectors with different lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Err(Error::Numeric("near-zero norm in cosine similarity".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Contrastive loss from a `[N, N]` similarity matrix (rows = ligands) and a
/// scalar temperature node.
pub fn contrastive_from_similarity(g: &mut Graph, sim: NodeId, tau: NodeId) -> Result<NodeId> {
    let s = g.shape(sim).to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(contract(format!("similarity matrix must be square and non-empty, got {s:?}")));
    }
    let n = s[0];
    let logits = g.div(sim, tau)?;
    let rows = g.log_softmax(logits)?;
    let lt = g.transpose(logits)?;
    let cols = g.log_softmax(lt)?;
    let mut eye = Tensor::zeros([n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    let eye = g.input(eye);
    let both = g.add(rows, cols)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum(diag)?;
    g.scale(total, -1.0 / (2.0 * n as f64))
}

/// Contrastive loss over stacked `[N, d]` ligand and receptor representations.
pub fn contrastive_loss(g: &mut Graph, ligands: NodeId, receptors: NodeId, tau: NodeId) -> Result<NodeId> {
    if g.shape(ligands) != g.shape(receptors) {
        return Err(contract("ligand and receptor batches differ in shape"));
    }
    let sim = similarity_matrix(g, ligands, receptors)?;
    contrastive_from_similarity(g, sim, tau)
}

/// Fraction of ligands whose most similar receptor is their own partner.
pub fn matching_accuracy(sim: &Tensor) -> f64 {
    let n = sim.shape()[0];
    let hits = (0..n)
        .filter(|&i| {
            let row = sim.row(i);
            (0..n).all(|j| j == i || row[j] < row[i])
        })
        .count();
    hits as f64 / n as f64
}

/// Convenience: loss value for a fixed similarity matrix and temperature.
pub fn contrastive_value(sim: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.input(sim.clone());
    let t = g.input(Tensor::scalar(tau));
    let l = contrastive_from_similarity(&mut g, s, t)?;
    Ok(g.value(l).item())
}

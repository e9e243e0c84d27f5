//! ΔΔG prediction from wild-type and mutant complexes.
//!
//! Per residue, the fine-tuning encoder's embedded singles are concatenated
//! with the hidden representations of the two pre-trained encoders
//! (interaction and sidechain streams) and fused by one ReLU layer. The
//! fine-tuning blocks then run on the fused singles, and a max-pool gives
//! one vector per complex. The head `g` reads `(H_wt, H_mt, H_wt − H_mt)`.
//! By default the output is `g(wt, mt) − g(mt, wt)`, so swapping the two
//! complexes negates the prediction and an identity mutation predicts 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Mutation, MutationRecord};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{contract, Error, Result};
use crate::featurize::{featurize, RawFeatures};
use crate::geometry::{distance, Complex, Residue};
use crate::nn::{Linear, Mlp};
use crate::residue::AminoAcid;
use crate::tensor::{AdamState, Gradients, Graph, NodeId, ParamStore, Rng64, Tensor};

pub const PIMBIM_PREFIX: &str = "encoder.pimbim";
pub const SIM_PREFIX: &str = "encoder.sim";
pub const DDG_PREFIX: &str = "encoder.ddg";
/// Residues kept around the mutation sites.
pub const PATCH_RESIDUES: usize = 128;

const BACKBONE: [&str; 4] = ["N", "CA", "C", "O"];

/// Locates the residue a mutation refers to.
pub fn find_site(residues: &[Residue], m: &Mutation) -> Option<usize> {
    residues
        .iter()
        .position(|r| r.chain == m.chain && r.seq == m.seq && r.icode == m.icode)
}

/// Substitutes residue types, keeping the backbone and Cβ (none for
/// glycine) and dropping the rest of the sidechain.
pub fn build_mutant(complex: &Complex, mutations: &[Mutation]) -> Result<Complex> {
    let mut out = complex.clone();
    for m in mutations {
        let i = find_site(&out.residues, m)
            .ok_or_else(|| Error::Data(format!("{}: no residue at site {m}", complex.id)))?;
        let r = &mut out.residues[i];
        if r.aa != m.wt {
            return Err(Error::Data(format!(
                "{}: mutation {m} expects {} at {}{} but the structure has {}",
                complex.id, m.wt, m.chain, m.seq, r.aa
            )));
        }
        r.aa = m.mt;
        r.atoms
            .retain(|a| BACKBONE.contains(&a.name.as_str()) || (a.name == "CB" && m.mt != AminoAcid::Gly));
        r.chi = Some(available_torsions(r));
    }
    Ok(out)
}

/// Leading χ angles whose atoms are all present.
fn available_torsions(r: &Residue) -> Vec<f64> {
    let mut out = Vec::new();
    for def in r.aa.chi_atoms() {
        let pts: Option<Vec<_>> = def.iter().map(|n| r.atom(n)).collect();
        match pts.and_then(|p| crate::geometry::dihedral(p[0], p[1], p[2], p[3]).ok()) {
            Some(a) => out.push(a),
            None => break,
        }
    }
    out
}

/// Indices of the `size` residues closest (Cα) to any of `sites`, in
/// original order.
pub fn patch_indices(residues: &[Residue], sites: &[usize], size: usize) -> Vec<usize> {
    if residues.len() <= size || sites.is_empty() {
        return (0..residues.len()).collect();
    }
    let mut scored: Vec<(f64, usize)> = residues
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let d = sites
                .iter()
                .map(|&s| distance(r.position(), residues[s].position()))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = scored[..size].iter().map(|p| p.1).collect();
    keep.sort_unstable();
    keep
}

/// Which pre-trained hidden streams feed the fusion layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Streams {
    pub pimbim: bool,
    pub sim: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self { pimbim: true, sim: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdgConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: Vec<usize>,
    pub antisymmetric: bool,
    pub streams: Streams,
}

impl Default for DdgConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: vec![128],
            antisymmetric: true,
            streams: Streams::default(),
        }
    }
}

/// Featurized structure plus cached outputs of frozen pre-trained streams.
#[derive(Clone, Debug)]
pub struct PreparedStructure {
    pub raw: RawFeatures,
    pub pimbim: Option<Tensor>,
    pub sim: Option<Tensor>,
}

/// One wild-type/mutant pair ready for the model.
#[derive(Clone, Debug)]
pub struct DdgSample {
    pub wt: PreparedStructure,
    pub mt: PreparedStructure,
    pub label: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DdgModel {
    pub config: DdgConfig,
    pub encoder: Encoder,
    pub pimbim: Option<Encoder>,
    pub sim: Option<Encoder>,
    fuse: Linear,
    head: Mlp,
}

impl DdgModel {
    /// Registers the fine-tuning encoder and head; pre-trained encoders are
    /// created under their own prefixes for enabled streams and can be
    /// overwritten from checkpoints.
    pub fn new(store: &mut ParamStore, config: DdgConfig, rng: &mut Rng64) -> Result<Self> {
        let ds = config.encoder.d_single;
        let encoder = Encoder::new(store, DDG_PREFIX, config.encoder, rng)?;
        let pimbim = match config.streams.pimbim {
            true => Some(Encoder::new(store, PIMBIM_PREFIX, config.encoder, rng)?),
            false => None,
        };
        let sim = match config.streams.sim {
            true => Some(Encoder::new(store, SIM_PREFIX, config.encoder, rng)?),
            false => None,
        };
        let fuse = Linear::new(store, "ddg.fuse", 3 * ds, ds, true, rng);
        let mut widths = vec![3 * ds];
        widths.extend(&config.head_hidden);
        widths.push(1);
        let head = Mlp::new(store, "ddg.head", &widths, rng);
        Ok(Self { config, encoder, pimbim, sim, fuse, head })
    }

    /// Pre-trained encoders are frozen unless `unfreeze` is set.
    pub fn set_frozen(store: &mut ParamStore, frozen: bool) {
        store.unfreeze_all();
        if frozen {
            store.freeze_prefix(PIMBIM_PREFIX);
            store.freeze_prefix(SIM_PREFIX);
        }
    }

    fn frozen(ps: &ParamStore, enc: &Encoder) -> bool {
        ps.is_frozen(&format!("{}.", enc.prefix))
    }

    /// Featurizes and, for frozen streams, runs the pre-trained encoders once.
    pub fn prepare(&self, ps: &ParamStore, residues: &[Residue]) -> Result<PreparedStructure> {
        let raw = featurize(residues);
        let cached = |enc: &Option<Encoder>| -> Result<Option<Tensor>> {
            match enc {
                Some(e) if Self::frozen(ps, e) => e.encode_value(ps, &raw).map(Some),
                _ => Ok(None),
            }
        };
        Ok(PreparedStructure {
            pimbim: cached(&self.pimbim)?,
            sim: cached(&self.sim)?,
            raw,
        })
    }

    fn stream(&self, g: &mut Graph, ps: &ParamStore, enc: &Option<Encoder>, cache: &Option<Tensor>, raw: &RawFeatures) -> Result<NodeId> {
        match (enc, cache) {
            (Some(_), Some(t)) => Ok(g.input(t.clone())),
            (Some(e), None) => e.encode(g, ps, raw),
            (None, _) => Ok(g.input(Tensor::zeros([raw.n, self.config.encoder.d_single]))),
        }
    }

    /// Per-residue fused singles `[n, d_single]`.
    pub fn fuse(&self, g: &mut Graph, ps: &ParamStore, single: NodeId, pimbim: NodeId, sim: NodeId) -> Result<NodeId> {
        let (a, b, c) = (g.shape(single).to_vec(), g.shape(pimbim).to_vec(), g.shape(sim).to_vec());
        if a != b || a != c {
            return Err(contract(format!("fusion inputs disagree: {a:?}, {b:?}, {c:?}")));
        }
        let cat = g.concat(&[single, pimbim, sim], 1)?;
        let f = self.fuse.forward(g, ps, cat)?;
        g.relu(f)
    }

    /// Max-pooled `[1, d_single]` representation of one structure.
    pub fn global_repr(&self, g: &mut Graph, ps: &ParamStore, s: &PreparedStructure) -> Result<NodeId> {
        let e = self.encoder.embed(g, ps, &s.raw)?;
        let hp = self.stream(g, ps, &self.pimbim, &s.pimbim, &s.raw)?;
        let hs = self.stream(g, ps, &self.sim, &s.sim, &s.raw)?;
        let fused = self.fuse(g, ps, e.single, hp, hs)?;
        let h = self.encoder.run_blocks(g, ps, fused, e.pair, &s.raw.frames)?;
        g.max_axis(h, 0, true)
    }

    fn head_on(&self, g: &mut Graph, ps: &ParamStore, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = g.sub(a, b)?;
        let x = g.concat(&[a, b, d], 1)?;
        let y = self.head.forward(g, ps, x)?;
        g.reshape(y, &[1])
    }

    /// `[1]` predicted ΔΔG (kcal/mol).
    pub fn predict(&self, g: &mut Graph, ps: &ParamStore, wt: &PreparedStructure, mt: &PreparedStructure) -> Result<NodeId> {
        let hw = self.global_repr(g, ps, wt)?;
        let hm = self.global_repr(g, ps, mt)?;
        let fwd = self.head_on(g, ps, hw, hm)?;
        if !self.config.antisymmetric {
            return Ok(fwd);
        }
        let rev = self.head_on(g, ps, hm, hw)?;
        g.sub(fwd, rev)
    }

    pub fn predict_value(&self, ps: &ParamStore, wt: &PreparedStructure, mt: &PreparedStructure) -> Result<f64> {
        let mut g = Graph::new();
        let y = self.predict(&mut g, ps, wt, mt)?;
        Ok(g.value(y).item())
    }

    /// Builds wild-type and mutant inputs for one record, cropped to the
    /// residues nearest the mutation sites.
    pub fn sample(&self, ps: &ParamStore, complex: &Complex, record: &MutationRecord, patch: usize) -> Result<DdgSample> {
        let mutant = build_mutant(complex, &record.mutations)?;
        let sites: Vec<usize> = record
            .mutations
            .iter()
            .filter_map(|m| find_site(&complex.residues, m))
            .collect();
        let keep = patch_indices(&complex.residues, &sites, patch);
        let pick = |c: &Complex| -> Vec<Residue> { keep.iter().map(|&i| c.residues[i].clone()).collect() };
        Ok(DdgSample {
            wt: self.prepare(ps, &pick(complex))?,
            mt: self.prepare(ps, &pick(&mutant))?,
            label: record.ddg,
        })
    }
}

/// Mean squared error of a batch of `[1]` predictions.
pub fn ddg_loss(g: &mut Graph, preds: &[NodeId], labels: &[f64]) -> Result<NodeId> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let p = g.concat(preds, 0)?;
    let t = g.input(Tensor::vector(labels)?);
    g.squared_error(p, t)
}

pub fn ddg_loss_value(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(preds.iter().zip(labels).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / preds.len() as f64)
}

/// Loss and gradients of the batch MSE, one graph per sample evaluated in
/// parallel and summed in a fixed order.
pub fn batch_gradients(model: &DdgModel, ps: &ParamStore, batch: &[&DdgSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(contract("empty training batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|s| {
            let label = s.label.ok_or_else(|| Error::Data("training sample without a ΔΔG label".into()))?;
            let mut g = Graph::new();
            let y = model.predict(&mut g, ps, &s.wt, &s.mt)?;
            let l = ddg_loss(&mut g, &[y], &[label])?;
            let l = g.scale(l, scale)?;
            Ok((g.value(l).item(), g.backward(l)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for p in parts {
        let (l, gr) = p?;
        total += l;
        grads.accumulate(&gr);
    }
    Ok((total, grads))
}

/// Plain mini-batch Adam on labelled samples. Returns the per-step loss.
pub fn train(
    model: &DdgModel,
    ps: &mut ParamStore,
    samples: &[DdgSample],
    steps: usize,
    batch: usize,
    adam: &mut AdamState,
    rng: &mut Rng64,
) -> Result<Vec<f64>> {
    use rand::seq::index::sample;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let b = batch.min(samples.len()).max(1);
        let picks = sample(rng, samples.len(), b).into_vec();
        let chosen: Vec<&DdgSample> = picks.iter().map(|&i| &samples[i]).collect();
        let (loss, grads) = batch_gradients(model, ps, &chosen)?;
        adam.step(ps, &grads)?;
        history.push(loss);
    }
    Ok(history)
}

/// Predictions for every sample, in order.
pub fn predict_all(model: &DdgModel, ps: &ParamStore, samples: &[DdgSample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.predict_value(ps, &s.wt, &s.mt))
        .collect()
}

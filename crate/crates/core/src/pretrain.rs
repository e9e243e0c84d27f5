//! Pre-training models and loops: interaction (PIM + BIM) and sidechain
//! (SIM) objectives.

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bim::{bim_loss, target_tensor, BimHead, PairHeadConfig};
use crate::dataio::{crop_interface, crop_patch, CropMode, CROP_PER_BINDER, PATCH_SIZE};
use crate::ddg::{PIMBIM_PREFIX, SIM_PREFIX};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{contract, Error, Result};
use crate::featurize::featurize;
use crate::geometry::{ca_distance_map, random_unbound_transform, Complex, Residue};
use crate::pim::{contrastive_loss, global_pool, init_temperature, matching_accuracy, similarity_matrix, temperature, DEFAULT_TEMPERATURE};
use crate::runlog::JsonLog;
use crate::sim::{residues_with_torsions, sim_loss, FlowConfig, SidechainFlow};
use crate::tensor::{lr_schedule, AdamState, Gradients, Graph, ParamStore, PlateauSchedule, Rng64, Tensor};

/// Which pre-training losses are active. Serialized as `"pim,bim,sim"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Objectives {
    pub pim: bool,
    pub bim: bool,
    pub sim: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Self { pim: true, bim: true, sim: true }
    }
}

impl FromStr for Objectives {
    type Err = Error;

    /// Comma-separated subset of `pim`, `bim`, `sim`.
    fn from_str(s: &str) -> Result<Self> {
        let mut o = Self { pim: false, bim: false, sim: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "pim" => o.pim = true,
                "bim" => o.bim = true,
                "sim" => o.sim = true,
                other => return Err(Error::Config(format!("unknown objective `{other}`"))),
            }
        }
        if !(o.pim || o.bim || o.sim) {
            return Err(Error::Config("at least one objective is required".into()));
        }
        Ok(o)
    }
}

impl TryFrom<String> for Objectives {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Objectives> for String {
    fn from(o: Objectives) -> String {
        o.to_string()
    }
}

impl std::fmt::Display for Objectives {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [(self.pim, "pim"), (self.bim, "bim"), (self.sim, "sim")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

/// Shared training-loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: PlateauSchedule,
    /// Validate every this many steps (and after the last one).
    pub validate_every: usize,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            schedule: PlateauSchedule::default(),
            validate_every: 100,
        }
    }
}

/// Losses of one interaction pre-training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpiLosses {
    pub pim: Option<f64>,
    pub bim: Option<f64>,
    pub accuracy: Option<f64>,
}

impl PpiLosses {
    pub fn total(&self) -> f64 {
        self.pim.unwrap_or(0.0) + self.bim.unwrap_or(0.0)
    }
}

/// Encoder plus the contrastive and distance-map heads.
#[derive(Clone, Debug)]
pub struct PpiModel {
    pub encoder: Encoder,
    pub bim: Option<BimHead>,
    pub pim: bool,
    pub clamp: Option<f64>,
}

/// One complex as the model sees it: randomized input, bound-state target.
#[derive(Clone, Debug)]
pub struct PpiExample {
    pub input: Complex,
    pub target: Tensor,
}

impl PpiModel {
    pub fn new(
        store: &mut ParamStore,
        encoder: EncoderConfig,
        pair: PairHeadConfig,
        objectives: Objectives,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if !(objectives.pim || objectives.bim) {
            return Err(Error::Config("interaction pre-training needs pim and/or bim".into()));
        }
        let encoder = Encoder::new(store, PIMBIM_PREFIX, encoder, rng)?;
        let bim = match objectives.bim {
            true => Some(BimHead::new(store, "bim", encoder.config.d_single, pair, rng)?),
            false => None,
        };
        if objectives.pim {
            init_temperature(store, DEFAULT_TEMPERATURE);
        }
        Ok(Self { encoder, bim, pim: objectives.pim, clamp: None })
    }

    /// Parameter prefixes owned by this model.
    pub fn prefixes(&self) -> Vec<&'static str> {
        let mut p = vec![PIMBIM_PREFIX];
        if self.bim.is_some() {
            p.push("bim.");
        }
        if self.pim {
            p.push("pim.");
        }
        p
    }

    /// Crops, flips binder roles with probability ½, and moves the ligand
    /// to a random unbound pose. The target is measured on the bound pose.
    pub fn make_example(&self, complex: &Complex, crop: CropMode, rng: &mut Rng64) -> Result<PpiExample> {
        let mut c = crop_interface(complex, crop, CROP_PER_BINDER, rng)?;
        if rng.random_bool(0.5) {
            c = c.swapped();
        }
        let target = target_tensor(&ca_distance_map(&c)?, self.clamp);
        Ok(PpiExample {
            input: random_unbound_transform(&c, rng),
            target,
        })
    }

    /// Loss values and gradients for a batch.
    pub fn batch_gradients(&self, ps: &ParamStore, batch: &[PpiExample]) -> Result<(PpiLosses, Gradients)> {
        let n = batch.len();
        if n == 0 {
            return Err(contract("empty pre-training batch"));
        }
        struct Part {
            g: Graph,
            lig: crate::tensor::NodeId,
            rec: crate::tensor::NodeId,
            bim: Option<crate::tensor::NodeId>,
        }
        let parts: Vec<Part> = batch
            .par_iter()
            .map(|ex| -> Result<Part> {
                let mut g = Graph::new();
                let raw = featurize(&ex.input.residues);
                let h = self.encoder.encode(&mut g, ps, &raw)?;
                let lig = global_pool(&mut g, h, &ex.input.ligand)?;
                let lig = g.reshape(lig, &[1, self.encoder.config.d_single])?;
                let rec = global_pool(&mut g, h, &ex.input.receptor)?;
                let rec = g.reshape(rec, &[1, self.encoder.config.d_single])?;
                let bim = match &self.bim {
                    Some(head) => {
                        let pred = head.predict(&mut g, ps, h, &ex.input.ligand, &ex.input.receptor)?;
                        let t = g.input(ex.target.clone());
                        Some(bim_loss(&mut g, pred, t)?)
                    }
                    None => None,
                };
                Ok(Part { g, lig, rec, bim })
            })
            .collect::<Result<_>>()?;

        let mut losses = PpiLosses::default();
        let mut grads = Gradients::default();
        let mut pooled_grads: Vec<(Option<Tensor>, Option<Tensor>)> = vec![(None, None); n];
        if self.pim {
            let ds = self.encoder.config.d_single;
            let stack = |f: &dyn Fn(&Part) -> crate::tensor::NodeId| -> Result<Tensor> {
                let data = parts.iter().flat_map(|p| p.g.value(f(p)).data().to_vec()).collect();
                Tensor::new([n, ds], data)
            };
            let mut g = Graph::new();
            let l = g.variable(stack(&|p| p.lig)?);
            let r = g.variable(stack(&|p| p.rec)?);
            let tau = temperature(&mut g, ps)?;
            let loss = contrastive_loss(&mut g, l, r, tau)?;
            let sim = similarity_matrix(&mut g, l, r)?;
            losses.pim = Some(g.value(loss).item());
            losses.accuracy = Some(matching_accuracy(g.value(sim)));
            let gr = g.backward(loss)?;
            let (gl, grr) = (gr.wrt(l).cloned(), gr.wrt(r).cloned());
            for (i, slot) in pooled_grads.iter_mut().enumerate() {
                let row = |t: &Option<Tensor>| t.as_ref().map(|t| Tensor::new([1, ds], t.row(i).to_vec()).expect("finite"));
                *slot = (row(&gl), row(&grr));
            }
            grads.accumulate(&gr);
        }

        let scale = 1.0 / n as f64;
        let per: Vec<Result<(f64, Gradients)>> = parts
            .into_par_iter()
            .zip(pooled_grads.into_par_iter())
            .map(|(mut p, (gl, gr))| {
                let mut terms = Vec::new();
                let mut bim_value = 0.0;
                if let Some(b) = p.bim {
                    bim_value = p.g.value(b).item();
                    terms.push(p.g.scale(b, scale)?);
                }
                for (node, seed) in [(p.lig, gl), (p.rec, gr)] {
                    if let Some(seed) = seed {
                        let s = p.g.input(seed);
                        let m = p.g.mul(node, s)?;
                        terms.push(p.g.sum(m)?);
                    }
                }
                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = p.g.add(total, t)?;
                }
                Ok((bim_value, p.g.backward(total)?))
            })
            .collect();
        let mut bim_sum = 0.0;
        for r in per {
            let (b, gr) = r?;
            bim_sum += b;
            grads.accumulate(&gr);
        }
        if self.bim.is_some() {
            losses.bim = Some(bim_sum * scale);
        }
        Ok((losses, grads))
    }

    /// Loss values only.
    pub fn evaluate(&self, ps: &ParamStore, batch: &[PpiExample]) -> Result<PpiLosses> {
        Ok(self.batch_gradients(ps, batch)?.0)
    }
}

fn batch_indices(rng: &mut Rng64, len: usize, batch: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, batch.clamp(1, len)).into_vec()
}

/// Result of a training loop: per-step losses and the best validated
/// parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<f64>,
    pub best: ParamStore,
    pub best_validation: f64,
    pub final_lr: f64,
}

/// Interaction pre-training. Validation runs on fixed-seed examples from
/// `validation` (the training set when empty).
#[allow(clippy::too_many_arguments)]
pub fn train_ppi(
    model: &PpiModel,
    ps: &mut ParamStore,
    train: &[Complex],
    validation: &[Complex],
    crop: CropMode,
    opts: &LoopOptions,
    rng: &mut Rng64,
    log: &mut JsonLog,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no complexes to pre-train on".into()));
    }
    let val_source = if validation.is_empty() { train } else { validation };
    let mut vrng = crate::tensor::seeded_rng(0x5eed);
    let val: Vec<PpiExample> = val_source
        .iter()
        .take(16)
        .map(|c| model.make_example(c, crop, &mut vrng))
        .collect::<Result<_>>()?;
    let mut adam = AdamState::new(opts.lr);
    let mut outcome = TrainOutcome {
        history: Vec::with_capacity(opts.steps),
        best: ps.clone(),
        best_validation: f64::INFINITY,
        final_lr: opts.lr,
    };
    let mut val_history = Vec::new();
    for step in 0..opts.steps {
        let idx = batch_indices(rng, train.len(), opts.batch);
        let batch: Vec<PpiExample> = idx
            .iter()
            .map(|&i| model.make_example(&train[i], crop, rng))
            .collect::<Result<_>>()?;
        let (losses, grads) = model.batch_gradients(ps, &batch)?;
        adam.step(ps, &grads)?;
        outcome.history.push(losses.total());
        let mut fields = vec![("step", json!(step)), ("loss", json!(losses.total())), ("lr", json!(adam.lr))];
        if let Some(v) = losses.pim {
            fields.push(("pim", json!(v)));
            fields.push(("accuracy", json!(losses.accuracy)));
        }
        if let Some(v) = losses.bim {
            fields.push(("bim", json!(v)));
        }
        log.record(&fields)?;

        if (step + 1) % opts.validate_every.max(1) == 0 || step + 1 == opts.steps {
            let v = model.evaluate(ps, &val)?.total();
            val_history.push(v);
            adam.lr = lr_schedule(adam.lr, &val_history, &opts.schedule);
            log.record(&[("step", json!(step)), ("val_loss", json!(v)), ("lr", json!(adam.lr))])?;
            if v < outcome.best_validation {
                outcome.best_validation = v;
                outcome.best = ps.clone();
            }
        }
    }
    outcome.final_lr = adam.lr;
    Ok(outcome)
}

/// Sidechain pre-training model: encoder plus χ-angle flow.
#[derive(Clone, Debug)]
pub struct SimModel {
    pub encoder: Encoder,
    pub flow: SidechainFlow,
}

impl SimModel {
    pub fn new(store: &mut ParamStore, encoder: EncoderConfig, flow: FlowConfig, rng: &mut Rng64) -> Result<Self> {
        let encoder = Encoder::new(store, SIM_PREFIX, encoder, rng)?;
        let flow = SidechainFlow::new(store, "sim.flow", encoder.config.d_single, flow, rng)?;
        Ok(Self { encoder, flow })
    }

    pub fn prefixes(&self) -> Vec<&'static str> {
        vec![SIM_PREFIX, "sim.flow."]
    }

    /// Mean NLL over the patches and its gradients.
    pub fn batch_gradients(&self, ps: &ParamStore, patches: &[&[Residue]]) -> Result<(f64, Gradients)> {
        if patches.is_empty() {
            return Err(contract("empty sidechain batch"));
        }
        let scale = 1.0 / patches.len() as f64;
        let per: Vec<Result<(f64, Gradients)>> = patches
            .par_iter()
            .map(|res| {
                let mut g = Graph::new();
                let raw = featurize(res);
                let h = self.encoder.encode(&mut g, ps, &raw)?;
                let l = sim_loss(&mut g, ps, &self.flow, h, res)?;
                let v = g.value(l).item();
                let l = g.scale(l, scale)?;
                Ok((v, g.backward(l)?))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = Gradients::default();
        for r in per {
            let (v, gr) = r?;
            total += v * scale;
            grads.accumulate(&gr);
        }
        Ok((total, grads))
    }

    pub fn nll(&self, ps: &ParamStore, patches: &[&[Residue]]) -> Result<f64> {
        let vals: Vec<Result<f64>> = patches
            .par_iter()
            .map(|res| {
                let mut g = Graph::new();
                let h = self.encoder.encode(&mut g, ps, &featurize(res))?;
                let l = sim_loss(&mut g, ps, &self.flow, h, res)?;
                Ok(g.value(l).item())
            })
            .collect();
        let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Chooses a cluster uniformly, then a member of it uniformly.
pub fn sample_cluster_member<T>(clusters: &[Vec<T>], rng: &mut Rng64) -> (usize, usize) {
    let c = rng.random_range(0..clusters.len());
    (c, rng.random_range(0..clusters[c].len()))
}

/// Sidechain pre-training over chain clusters. `chains[c][m]` is member `m`
/// of cluster `c`; chains without any χ angle are never drawn.
pub fn train_sim(
    model: &SimModel,
    ps: &mut ParamStore,
    chains: &[Vec<Vec<Residue>>],
    opts: &LoopOptions,
    rng: &mut Rng64,
    log: &mut JsonLog,
) -> Result<TrainOutcome> {
    let clusters: Vec<Vec<&Vec<Residue>>> = chains
        .iter()
        .map(|c| c.iter().filter(|m| !residues_with_torsions(m).is_empty()).collect::<Vec<_>>())
        .filter(|c: &Vec<&Vec<Residue>>| !c.is_empty())
        .collect();
    if clusters.is_empty() {
        return Err(Error::Data("no chain with sidechain torsions to train on".into()));
    }
    let patch = |res: &[Residue], rng: &mut Rng64| -> Vec<Residue> {
        let mut w = crop_patch(res.len(), PATCH_SIZE, rng);
        // keep drawing until the window has a residue with torsions
        for _ in 0..8 {
            if !residues_with_torsions(&res[w.clone()]).is_empty() {
                break;
            }
            w = crop_patch(res.len(), PATCH_SIZE, rng);
        }
        res[w].to_vec()
    };
    let mut vrng = crate::tensor::seeded_rng(0x5eed);
    let val: Vec<Vec<Residue>> = clusters
        .iter()
        .take(16)
        .map(|c| patch(c[0], &mut vrng))
        .filter(|p| !residues_with_torsions(p).is_empty())
        .collect();
    let val_refs: Vec<&[Residue]> = val.iter().map(Vec::as_slice).collect();

    let mut adam = AdamState::new(opts.lr);
    let mut outcome = TrainOutcome {
        history: Vec::with_capacity(opts.steps),
        best: ps.clone(),
        best_validation: f64::INFINITY,
        final_lr: opts.lr,
    };
    let mut val_history = Vec::new();
    for step in 0..opts.steps {
        let patches: Vec<Vec<Residue>> = (0..opts.batch.max(1))
            .map(|_| {
                let (c, m) = sample_cluster_member(&clusters, rng);
                patch(clusters[c][m], rng)
            })
            .filter(|p| !residues_with_torsions(p).is_empty())
            .collect();
        if patches.is_empty() {
            continue;
        }
        let refs: Vec<&[Residue]> = patches.iter().map(Vec::as_slice).collect();
        let (loss, grads) = model.batch_gradients(ps, &refs)?;
        adam.step(ps, &grads)?;
        outcome.history.push(loss);
        log.record(&[("step", json!(step)), ("loss", json!(loss)), ("sim", json!(loss)), ("lr", json!(adam.lr))])?;

        if (step + 1) % opts.validate_every.max(1) == 0 || step + 1 == opts.steps {
            let v = model.nll(ps, &val_refs)?;
            val_history.push(v);
            adam.lr = lr_schedule(adam.lr, &val_history, &opts.schedule);
            log.record(&[("step", json!(step)), ("val_loss", json!(v)), ("lr", json!(adam.lr))])?;
            if v < outcome.best_validation {
                outcome.best_validation = v;
                outcome.best = ps.clone();
            }
        }
    }
    outcome.final_lr = adam.lr;
    Ok(outcome)
}

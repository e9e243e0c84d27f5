//! End-to-end commands: pre-training, fine-tuning with cross-validation,
//! evaluation and mutation ranking, driven by a TOML run configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bim::PairHeadConfig;
use crate::dataio::{
    chains, parse_clusters, parse_mutation_table, parse_structure, split_three_folds, ChainPartition, CropMode,
    FoldSplit, MutationRecord,
};
use crate::ddg::{batch_gradients, predict_all, DdgConfig, DdgModel, DdgSample, Streams, PATCH_RESIDUES, PIMBIM_PREFIX, SIM_PREFIX};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{Complex, Residue};
use crate::metrics::{average_ranks, evaluate, write_predictions, write_scatter, EvalReport, Prediction};
use crate::pretrain::{train_ppi, train_sim, LoopOptions, Objectives, PpiModel, SimModel, TrainOutcome};
use crate::runlog::JsonLog;
use crate::sim::FlowConfig;
use crate::tensor::{checkpoint, lr_schedule, seeded_rng, AdamState, ParamStore, PlateauSchedule, Rng64};

/// Input locations. Relative paths are resolved against the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Directory of complex structures (`<id>.pdb`).
    pub structures: Option<PathBuf>,
    /// Optional held-out complexes for interaction pre-training validation.
    pub validation: Option<PathBuf>,
    /// Directory of single-chain structures for sidechain pre-training.
    pub chains: Option<PathBuf>,
    pub clusters: Option<PathBuf>,
    pub mutations: Option<PathBuf>,
    /// Three-fold split; generated from the seed when absent.
    pub folds: Option<PathBuf>,
    /// Existing prediction CSV to score instead of running a model.
    pub predictions: Option<PathBuf>,
    /// Complex id → `"<receptor chains>_<ligand chains>"`, e.g. `"HL_A"`.
    pub partitions: BTreeMap<String, String>,
    /// Mutation strings whose ranking ratio is reported.
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub ppi: Option<PathBuf>,
    pub sim: Option<PathBuf>,
    pub ddg: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pair_head: PairHeadConfig,
    pub flow: FlowConfig,
    pub head_hidden: Option<Vec<usize>>,
}

/// Everything a command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub validate_every: usize,
    pub schedule: PlateauSchedule,
    pub objectives: Objectives,
    pub crop: CropMode,
    /// Upper clamp on distance-map targets (Å).
    pub clamp: Option<f64>,
    pub antisymmetric: bool,
    /// Train the pre-trained encoders during fine-tuning.
    pub unfreeze: bool,
    pub patch: usize,
    pub output: PathBuf,
    pub data: DataPaths,
    pub checkpoints: CheckpointPaths,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iters: 2000,
            batch: 8,
            lr: 1e-3,
            validate_every: 100,
            schedule: PlateauSchedule::default(),
            objectives: Objectives::default(),
            crop: CropMode::default(),
            clamp: None,
            antisymmetric: true,
            unfreeze: false,
            patch: PATCH_RESIDUES,
            output: PathBuf::from("out"),
            data: DataPaths::default(),
            checkpoints: CheckpointPaths::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iters: Option<usize>,
    pub objectives: Option<Objectives>,
    pub no_antisym: bool,
    pub crop: Option<CropMode>,
    pub clamp: Option<f64>,
    pub unfreeze: bool,
}

impl RunConfig {
    /// Parses TOML and resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        let d = &mut self.data;
        for p in [
            &mut d.structures,
            &mut d.validation,
            &mut d.chains,
            &mut d.clusters,
            &mut d.mutations,
            &mut d.folds,
            &mut d.predictions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        let c = &mut self.checkpoints;
        for p in [&mut c.ppi, &mut c.sim, &mut c.ddg].into_iter().flatten() {
            fix(p);
        }
    }

    fn check(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clamp must be positive, got {c}")));
            }
        }
        if self.patch == 0 {
            return Err(Error::Config("patch must be positive".into()));
        }
        self.model.encoder.validate()
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(i) = o.iters {
            self.iters = i;
        }
        if let Some(ob) = o.objectives {
            self.objectives = ob;
        }
        if o.no_antisym {
            self.antisymmetric = false;
        }
        if let Some(c) = o.crop {
            self.crop = c;
        }
        if let Some(c) = o.clamp {
            self.clamp = Some(c);
        }
        if o.unfreeze {
            self.unfreeze = true;
        }
        self.check()
    }

    fn loop_options(&self) -> LoopOptions {
        LoopOptions {
            steps: self.iters,
            batch: self.batch,
            lr: self.lr,
            schedule: self.schedule,
            validate_every: self.validate_every,
        }
    }

    /// Fine-tuning model configuration implied by the objective toggles.
    pub fn ddg_config(&self) -> DdgConfig {
        let mut c = DdgConfig {
            encoder: self.model.encoder,
            antisymmetric: self.antisymmetric,
            streams: Streams {
                pimbim: self.objectives.pim || self.objectives.bim,
                sim: self.objectives.sim,
            },
            ..DdgConfig::default()
        };
        if let Some(h) = &self.model.head_hidden {
            c.head_hidden = h.clone();
        }
        c
    }

    fn output_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.output)?;
        Ok(&self.output)
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::Config(format!("`{what}` is not set")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} `{}` does not exist", p.display())));
    }
    Ok(p)
}

fn existing(p: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>> {
    match p {
        Some(path) if !path.exists() => Err(Error::Config(format!("{what} `{}` does not exist", path.display()))),
        other => Ok(other.clone()),
    }
}

/// Sizes the global worker pool from `MUTFLOW_THREADS`. Returns the bound
/// when one was applied.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var("MUTFLOW_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MUTFLOW_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(Some(n))
}

fn pdb_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pdb")))
        .collect();
    files.sort();
    Ok(files)
}

fn partition_for(id: &str, data: &DataPaths) -> Result<Option<ChainPartition>> {
    if let Some(spec) = data.partitions.get(id) {
        let (r, l) = spec
            .split_once('_')
            .ok_or_else(|| Error::Config(format!("partition `{spec}` for {id} is not <receptor>_<ligand>")))?;
        return Ok(Some(ChainPartition::new(r, l)));
    }
    Ok(ChainPartition::from_complex_id(id))
}

/// Every `.pdb` in `dir` as a complex, in file-name order.
pub fn load_complexes(dir: &Path, data: &DataPaths) -> Result<Vec<Complex>> {
    pdb_files(dir)?
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let text = fs::read_to_string(p)?;
            parse_structure(&id, &text, partition_for(&id, data)?.as_ref())
        })
        .collect()
}

/// Structure for a complex id: `<id>.pdb`, else `<first field of id>.pdb`.
pub fn load_complex(dir: &Path, id: &str, data: &DataPaths) -> Result<Complex> {
    let stem = id.split('_').next().unwrap_or(id);
    let path = [dir.join(format!("{id}.pdb")), dir.join(format!("{stem}.pdb"))]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no structure for complex {id} in {}", dir.display())))?;
    let text = fs::read_to_string(&path)?;
    parse_structure(id, &text, partition_for(id, data)?.as_ref())
}

fn load_records(cfg: &RunConfig) -> Result<Vec<MutationRecord>> {
    let path = require(&cfg.data.mutations, "data.mutations")?;
    let table = parse_mutation_table(&fs::read_to_string(path)?)?;
    for (line, why) in &table.rejected {
        log::warn!("{}: line {line} skipped: {why}", path.display());
    }
    if table.records.is_empty() {
        return Err(Error::Data(format!("{}: no mutation records", path.display())));
    }
    Ok(table.records)
}

fn load_record_structures(cfg: &RunConfig, records: &[MutationRecord]) -> Result<HashMap<String, Complex>> {
    let dir = require(&cfg.data.structures, "data.structures")?;
    let mut ids: Vec<&str> = records.iter().map(|r| r.complex_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| Ok((id.to_string(), load_complex(dir, id, &cfg.data)?)))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Summary of a pre-training run.
#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub history: Vec<f64>,
    pub best_validation: f64,
}

fn finish_pretrain(
    outcome: TrainOutcome,
    path: PathBuf,
    prefixes: &[&str],
    log: PathBuf,
) -> Result<PretrainSummary> {
    checkpoint::save(&path, &outcome.best, prefixes)?;
    Ok(PretrainSummary {
        checkpoint: path,
        log,
        history: outcome.history,
        best_validation: outcome.best_validation,
    })
}

/// Interaction pre-training with the PIM and/or BIM objectives; writes the
/// best-validated parameters to `checkpoints.ppi` (default
/// `<output>/ppi.mfk`).
pub fn cmd_pretrain_ppi(cfg: &RunConfig) -> Result<PretrainSummary> {
    let dir = require(&cfg.data.structures, "data.structures")?;
    let train = load_complexes(dir, &cfg.data)?;
    if train.is_empty() {
        return Err(Error::Data(format!("no structures found in {}", dir.display())));
    }
    let validation = match existing(&cfg.data.validation, "data.validation")? {
        Some(v) => load_complexes(&v, &cfg.data)?,
        None => Vec::new(),
    };
    let out = cfg.output_dir()?;
    let log_path = out.join("pretrain-ppi.log.jsonl");
    let mut log = JsonLog::to_file(&log_path)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut ps = ParamStore::new();
    let mut model = PpiModel::new(&mut ps, cfg.model.encoder, cfg.model.pair_head, cfg.objectives, &mut rng)?;
    model.clamp = cfg.clamp;
    log::info!("pre-training {} on {} complexes", cfg.objectives, train.len());
    let outcome = train_ppi(&model, &mut ps, &train, &validation, cfg.crop, &cfg.loop_options(), &mut rng, &mut log)?;
    let path = cfg.checkpoints.ppi.clone().unwrap_or_else(|| out.join("ppi.mfk"));
    finish_pretrain(outcome, path, &model.prefixes(), log_path)
}

/// Chains grouped by cluster, resolved from `<chains dir>/<stem>.pdb`.
pub fn load_chain_clusters(cfg: &RunConfig) -> Result<Vec<Vec<Vec<Residue>>>> {
    let dir = require(&cfg.data.chains, "data.chains")?;
    let clusters = parse_clusters(&fs::read_to_string(require(&cfg.data.clusters, "data.clusters")?)?)?;
    if clusters.is_empty() {
        return Err(Error::Data("cluster file lists no clusters".into()));
    }
    let mut cache: HashMap<String, Vec<Vec<Residue>>> = HashMap::new();
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let mut members = Vec::new();
        for (stem, chain) in cluster {
            if !cache.contains_key(&stem) {
                let path = dir.join(format!("{stem}.pdb"));
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                cache.insert(stem.clone(), chains(&crate::dataio::parse_residues(&text)?));
            }
            let found = cache[&stem].iter().find(|c| c[0].chain == chain).cloned();
            match found {
                Some(c) => members.push(c),
                None => log::warn!("chain {chain} not found in {stem}.pdb"),
            }
        }
        if !members.is_empty() {
            out.push(members);
        }
    }
    Ok(out)
}

/// Sidechain pre-training; writes `checkpoints.sim` (default
/// `<output>/sim.mfk`).
pub fn cmd_pretrain_sim(cfg: &RunConfig) -> Result<PretrainSummary> {
    let clusters = load_chain_clusters(cfg)?;
    let out = cfg.output_dir()?;
    let log_path = out.join("pretrain-sim.log.jsonl");
    let mut log = JsonLog::to_file(&log_path)?;
    let mut rng = seeded_rng(cfg.seed);
    let mut ps = ParamStore::new();
    let model = SimModel::new(&mut ps, cfg.model.encoder, cfg.model.flow.clone(), &mut rng)?;
    log::info!("sidechain pre-training on {} clusters", clusters.len());
    let outcome = train_sim(&model, &mut ps, &clusters, &cfg.loop_options(), &mut rng, &mut log)?;
    let path = cfg.checkpoints.sim.clone().unwrap_or_else(|| out.join("sim.mfk"));
    finish_pretrain(outcome, path, &model.prefixes(), log_path)
}

/// Builds a fine-tuning model and loads any configured pre-trained
/// encoders.
pub fn build_ddg_model(cfg: &RunConfig, rng: &mut Rng64) -> Result<(DdgModel, ParamStore)> {
    let mut ps = ParamStore::new();
    let model = DdgModel::new(&mut ps, cfg.ddg_config(), rng)?;
    let sources = [
        (model.pimbim.is_some(), &cfg.checkpoints.ppi, PIMBIM_PREFIX, "checkpoints.ppi"),
        (model.sim.is_some(), &cfg.checkpoints.sim, SIM_PREFIX, "checkpoints.sim"),
    ];
    for (enabled, path, prefix, what) in sources {
        if let (true, Some(p)) = (enabled, existing(path, what)?) {
            let n = checkpoint::restore_into(&mut ps, &checkpoint::load(&p)?, &format!("{prefix}."))?;
            if n == 0 {
                return Err(Error::Checkpoint(format!("{} holds no `{prefix}` parameters", p.display())));
            }
        }
    }
    DdgModel::set_frozen(&mut ps, !cfg.unfreeze);
    Ok((model, ps))
}

fn make_samples(
    model: &DdgModel,
    ps: &ParamStore,
    structures: &HashMap<String, Complex>,
    records: &[&MutationRecord],
    patch: usize,
) -> Result<Vec<DdgSample>> {
    records
        .par_iter()
        .map(|r| {
            model
                .sample(ps, &structures[&r.complex_id], r, patch)
                .map_err(|e| Error::Data(format!("{} {}: {e}", r.complex_id, r.mutation_string())))
        })
        .collect()
}

/// Mini-batch training with periodic validation. Returns the parameters
/// that scored best on `val` (the final ones when `val` is empty).
#[allow(clippy::too_many_arguments)]
pub fn fit_ddg(
    model: &DdgModel,
    ps: &mut ParamStore,
    train: &[DdgSample],
    val: &[DdgSample],
    opts: &LoopOptions,
    rng: &mut Rng64,
    log: &mut JsonLog,
    tag: &[(&str, serde_json::Value)],
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut adam = AdamState::new(opts.lr);
    let mut outcome = TrainOutcome {
        history: Vec::with_capacity(opts.steps),
        best: ps.clone(),
        best_validation: f64::INFINITY,
        final_lr: opts.lr,
    };
    let mut val_history = Vec::new();
    for step in 0..opts.steps {
        let picks = rand::seq::index::sample(rng, train.len(), opts.batch.clamp(1, train.len())).into_vec();
        let batch: Vec<&DdgSample> = picks.iter().map(|&i| &train[i]).collect();
        let (loss, grads) = batch_gradients(model, ps, &batch)?;
        adam.step(ps, &grads)?;
        outcome.history.push(loss);
        let mut fields = tag.to_vec();
        fields.extend([("step", json!(step)), ("loss", json!(loss)), ("ddg", json!(loss)), ("lr", json!(adam.lr))]);
        log.record(&fields)?;
        let last = step + 1 == opts.steps;
        if !val.is_empty() && ((step + 1) % opts.validate_every.max(1) == 0 || last) {
            let preds = predict_all(model, ps, val)?;
            let labels: Vec<f64> = val.iter().map(|s| s.label.unwrap_or(0.0)).collect();
            let v = crate::ddg::ddg_loss_value(&preds, &labels)?;
            val_history.push(v);
            adam.lr = lr_schedule(adam.lr, &val_history, &opts.schedule);
            let mut fields = tag.to_vec();
            fields.extend([("step", json!(step)), ("val_loss", json!(v)), ("lr", json!(adam.lr))]);
            log.record(&fields)?;
            if v < outcome.best_validation {
                outcome.best_validation = v;
                outcome.best = ps.clone();
            }
        }
    }
    if val.is_empty() {
        outcome.best = ps.clone();
    }
    outcome.final_lr = adam.lr;
    Ok(outcome)
}

/// Cross-validated fine-tuning result.
#[derive(Clone, Debug)]
pub struct FinetuneSummary {
    pub folds: FoldSplit,
    /// Test predictions in mutation-table order.
    pub predictions: Vec<Prediction>,
    /// Test fold of each prediction.
    pub test_fold: Vec<usize>,
    /// Complex ids used for training and validation in each fold.
    pub train_ids: [Vec<String>; 3],
    pub validation_ids: [Vec<String>; 3],
    pub reports: Vec<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// `ceil(10%)` of the ids (at least one when two or more), chosen by `rng`.
pub fn validation_slice(ids: &[String], rng: &mut Rng64) -> Vec<String> {
    if ids.len() < 2 {
        return Vec::new();
    }
    let k = ids.len().div_ceil(10);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(k);
    shuffled.sort();
    shuffled
}

/// Three-fold structure-disjoint fine-tuning. Writes `fold{k}.mfk`,
/// `predictions.csv`, `scatter.csv`, `report.json` and `folds.json` under
/// the output directory.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<FinetuneSummary> {
    let records = load_records(cfg)?;
    if let Some(r) = records.iter().find(|r| r.ddg.is_none()) {
        return Err(Error::Data(format!("{} {} has no ΔΔG label", r.complex_id, r.mutation_string())));
    }
    let structures = load_record_structures(cfg, &records)?;
    let mut rng = seeded_rng(cfg.seed);
    let folds = match existing(&cfg.data.folds, "data.folds")? {
        Some(p) => FoldSplit::from_json(&fs::read_to_string(p)?)?,
        None => {
            let ids: Vec<&String> = structures.keys().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            split_three_folds(&ids, &mut rng)?
        }
    };
    folds.validate()?;
    let record_fold: Vec<usize> = records
        .iter()
        .map(|r| {
            folds
                .fold_of(&r.complex_id)
                .ok_or_else(|| Error::Config(format!("complex {} is not assigned to any fold", r.complex_id)))
        })
        .collect::<Result<_>>()?;
    for id in folds.folds().iter().flat_map(|f| f.iter()) {
        if !structures.contains_key(id) {
            log::warn!("fold member {id} has no mutation records");
        }
    }

    let out = cfg.output_dir()?.to_path_buf();
    let mut log = JsonLog::to_file(&out.join("finetune.log.jsonl"))?;
    let mut preds: Vec<Option<Prediction>> = vec![None; records.len()];
    let mut train_ids: [Vec<String>; 3] = Default::default();
    let mut validation_ids: [Vec<String>; 3] = Default::default();
    let mut ckpts = Vec::new();
    for f in 0..3 {
        let test: Vec<usize> = (0..records.len()).filter(|&i| record_fold[i] == f).collect();
        if test.is_empty() {
            log::warn!("fold {f} has no test records");
        }
        let mut frng = seeded_rng(cfg.seed.wrapping_add(1 + f as u64));
        let pool: Vec<String> = (0..3)
            .filter(|&k| k != f)
            .flat_map(|k| folds.folds()[k].iter().cloned())
            .filter(|id| structures.contains_key(id))
            .collect();
        let val_ids = validation_slice(&pool, &mut frng);
        let fit_ids: Vec<String> = pool.iter().filter(|id| !val_ids.contains(id)).cloned().collect();
        let pick = |ids: &[String]| -> Vec<&MutationRecord> {
            records.iter().filter(|r| ids.contains(&r.complex_id)).collect()
        };
        let (model, mut ps) = build_ddg_model(cfg, &mut frng)?;
        let train = make_samples(&model, &ps, &structures, &pick(&fit_ids), cfg.patch)?;
        let val = make_samples(&model, &ps, &structures, &pick(&val_ids), cfg.patch)?;
        log::info!("fold {f}: {} training, {} validation, {} test records", train.len(), val.len(), test.len());
        let outcome = fit_ddg(&model, &mut ps, &train, &val, &cfg.loop_options(), &mut frng, &mut log, &[("fold", json!(f))])?;
        let ps = outcome.best;
        let path = out.join(format!("fold{f}.mfk"));
        checkpoint::save(&path, &ps, &[""])?;
        ckpts.push(path);

        let test_records: Vec<&MutationRecord> = test.iter().map(|&i| &records[i]).collect();
        let samples = make_samples(&model, &ps, &structures, &test_records, cfg.patch)?;
        for (&i, y) in test.iter().zip(predict_all(&model, &ps, &samples)?) {
            preds[i] = Some(Prediction {
                complex_id: records[i].complex_id.clone(),
                mutations: records[i].mutation_string(),
                ddg_pred: y,
                ddg_true: records[i].ddg,
            });
        }
        train_ids[f] = fit_ids;
        validation_ids[f] = val_ids;
    }
    let predictions: Vec<Prediction> = preds.into_iter().map(|p| p.expect("every record has a fold")).collect();
    let reports = evaluate(&predictions)?;
    write_file(&out.join("predictions.csv"), &write_predictions(&predictions)?)?;
    write_file(&out.join("scatter.csv"), &write_scatter(&predictions)?)?;
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(&reports)?)?;
    write_file(&out.join("folds.json"), &folds.to_json()?)?;
    Ok(FinetuneSummary {
        folds,
        predictions,
        test_fold: record_fold,
        train_ids,
        validation_ids,
        reports,
        checkpoints: ckpts,
    })
}

/// Loads a fine-tuned model from `checkpoints.ddg` and predicts every
/// record of the mutation table. Labels are carried along but never used.
pub fn predict_records(cfg: &RunConfig) -> Result<Vec<Prediction>> {
    let records = load_records(cfg)?;
    let structures = load_record_structures(cfg, &records)?;
    let path = require(&cfg.checkpoints.ddg, "checkpoints.ddg")?;
    let mut rng = seeded_rng(cfg.seed);
    let mut ps = ParamStore::new();
    let model = DdgModel::new(&mut ps, cfg.ddg_config(), &mut rng)?;
    let restored = checkpoint::restore_into(&mut ps, &checkpoint::load(path)?, "")?;
    if restored != ps.len() {
        return Err(Error::Checkpoint(format!(
            "{} restores {restored} of {} parameters",
            path.display(),
            ps.len()
        )));
    }
    DdgModel::set_frozen(&mut ps, true);
    let refs: Vec<&MutationRecord> = records.iter().collect();
    let samples = make_samples(&model, &ps, &structures, &refs, cfg.patch)?;
    let ys = predict_all(&model, &ps, &samples)?;
    Ok(records
        .iter()
        .zip(ys)
        .map(|(r, y)| Prediction {
            complex_id: r.complex_id.clone(),
            mutations: r.mutation_string(),
            ddg_pred: y,
            ddg_true: r.ddg,
        })
        .collect())
}

/// Evaluation output.
#[derive(Clone, Debug)]
pub struct EvaluateSummary {
    pub predictions: Vec<Prediction>,
    pub reports: Vec<EvalReport>,
}

/// Scores `data.predictions` if set, otherwise runs the `checkpoints.ddg`
/// model on the mutation table without any training. Writes
/// `report.json`, `scatter.csv` and `predictions.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateSummary> {
    let predictions = match &cfg.data.predictions {
        Some(_) => {
            let p = require(&cfg.data.predictions, "data.predictions")?;
            crate::metrics::read_predictions(&fs::read_to_string(p)?)?
        }
        None => predict_records(cfg)?,
    };
    if predictions.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let reports = evaluate(&predictions)?;
    let out = cfg.output_dir()?;
    write_file(&out.join("predictions.csv"), &write_predictions(&predictions)?)?;
    write_file(&out.join("scatter.csv"), &write_scatter(&predictions)?)?;
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(&reports)?)?;
    Ok(EvaluateSummary { predictions, reports })
}

/// One row of a mutation ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    /// 1-based position after a stable ascending sort.
    pub position: usize,
    pub complex_id: String,
    pub mutations: String,
    pub ddg_pred: f64,
    /// Average rank (tied predictions share it).
    pub rank: f64,
    /// `rank / total`.
    pub ratio: f64,
    pub target: bool,
}

/// Sorts by ascending prediction, ties kept in input order, and flags the
/// targets. Every target must match some row's mutation string.
pub fn rank_table(preds: &[Prediction], targets: &[String]) -> Result<Vec<RankRow>> {
    if preds.is_empty() {
        return Err(Error::Data("no mutations to rank".into()));
    }
    for t in targets {
        if !preds.iter().any(|p| &p.mutations == t) {
            return Err(Error::Data(format!("target mutation {t} is not among the candidates")));
        }
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.ddg_pred).collect();
    let ranks = average_ranks(&scores);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total = preds.len() as f64;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| RankRow {
            position: pos + 1,
            complex_id: preds[i].complex_id.clone(),
            mutations: preds[i].mutations.clone(),
            ddg_pred: preds[i].ddg_pred,
            rank: ranks[i],
            ratio: ranks[i] / total,
            target: targets.contains(&preds[i].mutations),
        })
        .collect())
}

pub fn write_rank_table(rows: &[RankRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["position", "complex_id", "mutations", "ddg_pred", "rank", "ratio", "target"])
        .map_err(crate::dataio::csv_err)?;
    for r in rows {
        w.write_record([
            r.position.to_string(),
            r.complex_id.clone(),
            r.mutations.clone(),
            r.ddg_pred.to_string(),
            r.rank.to_string(),
            r.ratio.to_string(),
            u8::from(r.target).to_string(),
        ])
        .map_err(crate::dataio::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Predicts every candidate mutation and writes `ranking.csv`.
pub fn cmd_rank(cfg: &RunConfig) -> Result<Vec<RankRow>> {
    let preds = predict_records(cfg)?;
    let rows = rank_table(&preds, &cfg.data.targets)?;
    let out = cfg.output_dir()?;
    write_file(&out.join("ranking.csv"), &write_rank_table(&rows)?)?;
    for r in rows.iter().filter(|r| r.target) {
        log::info!("{}: rank {} of {} (ratio {:.4})", r.mutations, r.rank, rows.len(), r.ratio);
    }
    Ok(rows)
}

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use mutflow::bim::PairHeadConfig;
use mutflow::dataio::{write_mutation_table, write_pdb, MutationRecord};
use mutflow::encoder::EncoderConfig;
use mutflow::geometry::Complex;
use mutflow::sim::FlowConfig;
use mutflow::workflow::RunConfig;

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { blocks: 1, d_single: 8, d_pair: 4, heads: 2, points: 2 }
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig { blocks: 2, d_single: 16, d_pair: 8, heads: 2, points: 2 }
}

pub fn small_pair_head() -> PairHeadConfig {
    PairHeadConfig { layers: 1, width: 8, heads: 2 }
}

pub fn small_flow() -> FlowConfig {
    FlowConfig { bins: 8, layers: 4, hidden: vec![32] }
}

pub fn write_complexes(dir: &Path, complexes: &[Complex]) {
    fs::create_dir_all(dir).unwrap();
    for c in complexes {
        fs::write(dir.join(format!("{}.pdb", c.id)), write_pdb(&c.residues)).unwrap();
    }
}

pub fn write_records(path: &Path, records: &[MutationRecord]) {
    fs::write(path, write_mutation_table(records).unwrap()).unwrap();
}

/// Configuration rooted at `root` with a small model and short runs.
pub fn config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output = root.join("out");
    cfg.iters = 20;
    cfg.batch = 4;
    cfg.validate_every = 10;
    cfg.model.encoder = tiny_encoder();
    cfg.model.pair_head = small_pair_head();
    cfg.model.flow = FlowConfig { bins: 4, layers: 2, hidden: vec![8] };
    cfg.model.head_hidden = Some(vec![8]);
    cfg
}

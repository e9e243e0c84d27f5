//! Per-residue and per-pair input features, and their learned embeddings.
//!
//! Raw single features (41 columns per residue):
//!
//! | columns | content |
//! |---|---|
//! | 0..20 | residue type one-hot |
//! | 20..26 | sin/cos of φ, ψ, ω |
//! | 26..29 | validity bits for φ, ψ, ω |
//! | 29..41 | N, Cα, C, O in the residue's own frame |
//!
//! Pair features are kept in index form: a type-pair class, a relative
//! sequence offset class and the partner Cα expressed in the residue frame.
//! Everything is computed from relative geometry, so features are unchanged
//! by a global rigid motion.

use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{dihedral, distance, Residue};
use crate::nn::Linear;
use crate::residue::NUM_TYPES;
use crate::tensor::{FrameSet, Graph, NodeId, ParamStore, Rng64, Tensor};

pub const SINGLE_RAW: usize = 41;
pub const OFFSET_CLIP: i32 = 32;
/// Offset classes 0..=64 encode −32..=32; class 65 marks a cross-chain pair.
pub const OFFSET_CLASSES: usize = 66;
pub const CROSS_CHAIN: usize = 65;
pub const TYPE_PAIR_CLASSES: usize = NUM_TYPES * NUM_TYPES;
/// Partner coordinates are divided by 10 Å before embedding.
pub const PARTNER_SCALE: f64 = 0.1;
const PEPTIDE_BOND_MAX: f64 = 2.0;

/// Unembedded features of one set of residues.
#[derive(Clone, Debug)]
pub struct RawFeatures {
    pub n: usize,
    /// `[n, 41]`
    pub single: Tensor,
    /// Row-major `n × n` type-pair classes.
    pub type_pair: Vec<usize>,
    /// Row-major `n × n` offset classes.
    pub offset: Vec<usize>,
    /// `[n*n, 3]` partner Cα in the residue-i frame, scaled.
    pub partner: Tensor,
    pub frames: Arc<FrameSet>,
}

fn bonded(a: &Residue, b: &Residue) -> bool {
    a.chain == b.chain
        && match (a.atom("C"), b.atom("N")) {
            (Some(c), Some(n)) => distance(c, n) < PEPTIDE_BOND_MAX,
            _ => false,
        }
}

/// φ, ψ, ω per residue; `None` at chain ends and breaks.
pub fn backbone_dihedrals(residues: &[Residue]) -> Vec<[Option<f64>; 3]> {
    let n = residues.len();
    (0..n)
        .map(|i| {
            let r = &residues[i];
            let (rn, rca, rc) = (r.atom("N").unwrap_or_default(), r.position(), r.atom("C").unwrap_or_default());
            let prev = (i > 0 && bonded(&residues[i - 1], r)).then(|| &residues[i - 1]);
            let next = (i + 1 < n && bonded(r, &residues[i + 1])).then(|| &residues[i + 1]);
            let phi = prev.and_then(|p| dihedral(p.atom("C")?, rn, rca, rc).ok());
            let psi = next.and_then(|q| dihedral(rn, rca, rc, q.atom("N")?).ok());
            let omega = next.and_then(|q| dihedral(rca, rc, q.atom("N")?, q.position()).ok());
            [phi, psi, omega]
        })
        .collect()
}

pub fn single_features(residues: &[Residue]) -> Tensor {
    let dihedrals = backbone_dihedrals(residues);
    let mut data = Vec::with_capacity(residues.len() * SINGLE_RAW);
    for (r, angles) in residues.iter().zip(&dihedrals) {
        let mut row = [0.0; SINGLE_RAW];
        row[r.aa.index()] = 1.0;
        for (k, a) in angles.iter().enumerate() {
            if let Some(a) = a {
                row[20 + 2 * k] = a.sin();
                row[21 + 2 * k] = a.cos();
                row[26 + k] = 1.0;
            }
        }
        for (k, name) in ["N", "CA", "C", "O"].iter().enumerate() {
            if let Some(p) = r.atom(name) {
                let local = r.frame.apply_inverse(p);
                row[29 + 3 * k..32 + 3 * k].copy_from_slice(&local);
            }
        }
        // Cα sits exactly at the frame origin.
        row[32..35].copy_from_slice(&[0.0; 3]);
        data.extend_from_slice(&row);
    }
    Tensor::new([residues.len(), SINGLE_RAW], data).expect("finite features")
}

/// Offset class of residue `j` relative to `i`.
pub fn offset_class(ri: &Residue, rj: &Residue) -> usize {
    if ri.chain != rj.chain {
        return CROSS_CHAIN;
    }
    ((rj.seq - ri.seq).clamp(-OFFSET_CLIP, OFFSET_CLIP) + OFFSET_CLIP) as usize
}

pub fn pair_features(residues: &[Residue]) -> (Vec<usize>, Vec<usize>, Tensor) {
    let n = residues.len();
    let mut type_pair = Vec::with_capacity(n * n);
    let mut offset = Vec::with_capacity(n * n);
    let mut partner = Vec::with_capacity(n * n * 3);
    for ri in residues {
        for rj in residues {
            type_pair.push(ri.aa.index() * NUM_TYPES + rj.aa.index());
            offset.push(offset_class(ri, rj));
            let local = ri.frame.apply_inverse(rj.position());
            partner.extend(local.iter().map(|v| v * PARTNER_SCALE));
        }
    }
    let partner = Tensor::new([n * n, 3], partner).expect("finite features");
    (type_pair, offset, partner)
}

pub fn frame_set(residues: &[Residue]) -> FrameSet {
    FrameSet {
        rotations: residues.iter().map(|r| r.frame.rotation).collect(),
        translations: residues.iter().map(|r| r.frame.translation).collect(),
    }
}

pub fn featurize(residues: &[Residue]) -> RawFeatures {
    let (type_pair, offset, partner) = pair_features(residues);
    RawFeatures {
        n: residues.len(),
        single: single_features(residues),
        type_pair,
        offset,
        partner,
        frames: Arc::new(frame_set(residues)),
    }
}

impl RawFeatures {
    /// Features reindexed so that new residue `k` is old residue `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(crate::error::contract("not a permutation of the residues"));
        }
        let mut single = Vec::with_capacity(n * SINGLE_RAW);
        for &i in perm {
            single.extend_from_slice(self.single.row(i));
        }
        let mut type_pair = Vec::with_capacity(n * n);
        let mut offset = Vec::with_capacity(n * n);
        let mut partner = Vec::with_capacity(n * n * 3);
        for &i in perm {
            for &j in perm {
                type_pair.push(self.type_pair[i * n + j]);
                offset.push(self.offset[i * n + j]);
                partner.extend_from_slice(self.partner.row(i * n + j));
            }
        }
        Ok(Self {
            n,
            single: Tensor::new([n, SINGLE_RAW], single)?,
            type_pair,
            offset,
            partner: Tensor::new([n * n, 3], partner)?,
            frames: Arc::new(FrameSet {
                rotations: perm.iter().map(|&i| self.frames.rotations[i]).collect(),
                translations: perm.iter().map(|&i| self.frames.translations[i]).collect(),
            }),
        })
    }
}

/// Learned maps from raw features to `d_single` singles and `d_pair` pairs.
#[derive(Clone, Debug)]
pub struct FeatureEmbedder {
    single: Linear,
    type_table: String,
    offset_table: String,
    partner: Linear,
    pub d_single: usize,
    pub d_pair: usize,
}

impl FeatureEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, d_single: usize, d_pair: usize, rng: &mut Rng64) -> Self {
        let type_table = format!("{prefix}.type_pair");
        let offset_table = format!("{prefix}.offset");
        store.init_uniform(&type_table, &[TYPE_PAIR_CLASSES, d_pair], 3, rng);
        store.init_uniform(&offset_table, &[OFFSET_CLASSES, d_pair], 3, rng);
        Self {
            single: Linear::new(store, &format!("{prefix}.single"), SINGLE_RAW, d_single, true, rng),
            partner: Linear::new(store, &format!("{prefix}.partner"), 3, d_pair, true, rng),
            type_table,
            offset_table,
            d_single,
            d_pair,
        }
    }

    /// `[n, d_single]` singles.
    pub fn embed_single(&self, g: &mut Graph, ps: &ParamStore, raw: &RawFeatures) -> Result<NodeId> {
        let x = g.input(raw.single.clone());
        self.single.forward(g, ps, x)
    }

    /// `[n*n, d_pair]` pairs, row `i*n + j` for the pair (i, j).
    pub fn embed_pair(&self, g: &mut Graph, ps: &ParamStore, raw: &RawFeatures) -> Result<NodeId> {
        let types = g.bind(ps, &self.type_table)?;
        let types = g.gather_rows(types, &raw.type_pair)?;
        let offsets = g.bind(ps, &self.offset_table)?;
        let offsets = g.gather_rows(offsets, &raw.offset)?;
        let p = g.input(raw.partner.clone());
        let p = self.partner.forward(g, ps, p)?;
        let z = g.add(types, offsets)?;
        g.add(z, p)
    }
}

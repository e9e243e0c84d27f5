//! Structure and mutation-table readers, cross-validation folds and crops.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, distance, Atom, Complex, Residue};
use crate::residue::AminoAcid;
use crate::tensor::Rng64;

/// Residues parsed from ATOM records, in file order.
pub fn parse_residues(text: &str) -> Result<Vec<Residue>> {
    struct Pending {
        aa: Option<AminoAcid>,
        name: String,
        chain: String,
        seq: i32,
        icode: Option<char>,
        atoms: Vec<Atom>,
    }
    let mut done = Vec::new();
    let mut cur: Option<Pending> = None;
    let flush = |p: Pending, out: &mut Vec<Residue>| match p.aa {
        None => log::warn!("skipping unknown residue {} {}{}", p.name, p.chain, p.seq),
        Some(aa) => match Residue::from_atoms(aa, p.chain, p.seq, p.icode, p.atoms) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping residue: {e}"),
        },
    };

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if !line.starts_with("ATOM  ") && !line.starts_with("ATOM ") {
            if line.starts_with("ENDMDL") {
                break;
            }
            continue;
        }
        let field = |r: Range<usize>| line.get(r).unwrap_or("").trim();
        if line.len() < 54 {
            return Err(Error::Parse {
                line: lineno,
                message: "ATOM record shorter than the coordinate columns".into(),
            });
        }
        let alt = line.as_bytes()[16] as char;
        if alt != ' ' && alt != 'A' {
            continue;
        }
        let coord = |r: Range<usize>, axis: &str| -> Result<f64> {
            let s = field(r);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: format!("bad {axis} coordinate `{s}`"),
                })
        };
        let pos = [coord(30..38, "x")?, coord(38..46, "y")?, coord(46..54, "z")?];
        let seq: i32 = field(22..26).parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad residue number `{}`", field(22..26)),
        })?;
        let atom_name = field(12..16).to_string();
        let res_name = field(17..20).to_string();
        let chain = field(21..22).to_string();
        let icode = line.as_bytes().get(26).map(|&b| b as char).filter(|c| *c != ' ');

        let same = cur
            .as_ref()
            .is_some_and(|p| p.chain == chain && p.seq == seq && p.icode == icode);
        if !same {
            if let Some(p) = cur.take() {
                flush(p, &mut done);
            }
            cur = Some(Pending {
                aa: AminoAcid::from_three(&res_name),
                name: res_name,
                chain,
                seq,
                icode,
                atoms: Vec::new(),
            });
        }
        let p = cur.as_mut().expect("set above");
        if !p.atoms.iter().any(|a| a.name == atom_name) {
            p.atoms.push(Atom { name: atom_name, pos });
        }
    }
    if let Some(p) = cur.take() {
        flush(p, &mut done);
    }
    Ok(done)
}

/// Which chains form the ligand; every other chain is receptor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPartition {
    pub receptor: Vec<String>,
    pub ligand: Vec<String>,
}

impl ChainPartition {
    pub fn new(receptor: &str, ligand: &str) -> Self {
        let split = |s: &str| s.chars().map(String::from).collect();
        Self {
            receptor: split(receptor),
            ligand: split(ligand),
        }
    }

    /// Reads the `<pdb>_<receptor chains>_<ligand chains>` naming used by
    /// SKEMPI-style ids, e.g. `1ABC_HL_A`.
    pub fn from_complex_id(id: &str) -> Option<Self> {
        let parts: Vec<&str> = id.split('_').collect();
        match parts.as_slice() {
            [_, r, l] if !r.is_empty() && !l.is_empty() => Some(Self::new(r, l)),
            _ => None,
        }
    }
}

/// Builds a two-binder complex. With no partition, a structure with
/// exactly two chains uses the first chain as receptor.
pub fn parse_structure(id: &str, text: &str, partition: Option<&ChainPartition>) -> Result<Complex> {
    let residues = parse_residues(text)?;
    if residues.is_empty() {
        return Err(Error::Data(format!("{id}: structure has no usable ATOM records")));
    }
    let chains: Vec<String> = residues.iter().fold(Vec::new(), |mut acc, r| {
        if !acc.contains(&r.chain) {
            acc.push(r.chain.clone());
        }
        acc
    });
    let derived;
    let partition = match partition {
        Some(p) => p,
        None if chains.len() == 2 => {
            derived = ChainPartition {
                receptor: vec![chains[0].clone()],
                ligand: vec![chains[1].clone()],
            };
            &derived
        }
        None => {
            return Err(Error::Data(format!(
                "{id}: {} chains found; a receptor/ligand partition is required",
                chains.len()
            )))
        }
    };
    let mut keep = Vec::new();
    let (mut receptor, mut ligand) = (Vec::new(), Vec::new());
    for r in residues {
        let slot = if partition.ligand.contains(&r.chain) {
            &mut ligand
        } else if partition.receptor.contains(&r.chain) {
            &mut receptor
        } else {
            continue;
        };
        slot.push(keep.len());
        keep.push(r);
    }
    Complex::new(id, keep, receptor, ligand).map_err(|e| Error::Data(format!("{id}: {e}")))
}

/// Writes residues as ATOM records with three-decimal coordinates.
pub fn write_pdb(residues: &[Residue]) -> String {
    let mut out = String::new();
    let mut serial = 1;
    for r in residues {
        for a in &r.atoms {
            let name = if a.name.len() < 4 {
                format!(" {:<3}", a.name)
            } else {
                a.name.clone()
            };
            let element = a.name.chars().next().unwrap_or('C');
            out.push_str(&format!(
                "ATOM  {:>5} {} {:>3} {}{:>4}{}   {:>8.3}{:>8.3}{:>8.3}  1.00  0.00          {:>2}\n",
                serial,
                name,
                r.aa.three(),
                r.chain,
                r.seq,
                r.icode.unwrap_or(' '),
                a.pos[0],
                a.pos[1],
                a.pos[2],
                element
            ));
            serial += 1;
        }
    }
    out.push_str("END\n");
    out
}

/// One substitution, written `TH31W`: wild type T, chain H, position 31,
/// mutant W. An insertion code may follow the number (`TH100aW`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mutation {
    pub wt: AminoAcid,
    pub chain: String,
    pub seq: i32,
    pub icode: Option<char>,
    pub mt: AminoAcid,
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let bad = |why: &str| Error::Data(format!("malformed mutation `{token}`: {why}"));
        let chars: Vec<char> = token.trim().chars().collect();
        if chars.len() < 4 {
            return Err(bad("too short"));
        }
        let wt = AminoAcid::from_one(chars[0]).ok_or_else(|| bad("unknown wild-type letter"))?;
        let mt = AminoAcid::from_one(chars[chars.len() - 1])
            .ok_or_else(|| bad("unknown mutant letter"))?;
        let chain = chars[1];
        if !chain.is_ascii_alphanumeric() {
            return Err(bad("bad chain id"));
        }
        let mut middle: String = chars[2..chars.len() - 1].iter().collect();
        let icode = match middle.chars().last() {
            Some(c) if c.is_ascii_alphabetic() => {
                middle.pop();
                Some(c)
            }
            _ => None,
        };
        let seq = middle.parse::<i32>().map_err(|_| bad("bad residue number"))?;
        Ok(Self {
            wt,
            chain: chain.to_string(),
            seq,
            icode,
            mt,
        })
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.wt.one(), self.chain, self.seq)?;
        if let Some(c) = self.icode {
            write!(f, "{c}")?;
        }
        write!(f, "{}", self.mt.one())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutationRecord {
    pub complex_id: String,
    pub mutations: Vec<Mutation>,
    /// kcal/mol; absent in zero-shot tables.
    pub ddg: Option<f64>,
}

impl MutationRecord {
    /// Mutations joined with `;`, as in the table.
    pub fn mutation_string(&self) -> String {
        self.mutations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn is_single(&self) -> bool {
        self.mutations.len() == 1
    }
}

/// Parsed rows plus the rows that were rejected, with reasons.
#[derive(Clone, Debug, Default)]
pub struct MutationTable {
    pub records: Vec<MutationRecord>,
    pub rejected: Vec<(usize, String)>,
}

/// Reads a `complex_id,mutations,ddg` CSV. Malformed rows are collected in
/// [`MutationTable::rejected`] rather than aborting the read.
pub fn parse_mutation_table(text: &str) -> Result<MutationTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    let expect = ["complex_id", "mutations", "ddg"];
    if headers.len() < 3 || !expect.iter().zip(headers.iter()).all(|(a, b)| b.eq_ignore_ascii_case(a)) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `complex_id,mutations,ddg`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut table = MutationTable::default();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                table.rejected.push((line, e.to_string()));
                continue;
            }
        };
        match parse_row(&row) {
            Ok(rec) => table.records.push(rec),
            Err(e) => {
                log::warn!("mutation table line {line}: {e}");
                table.rejected.push((line, e.to_string()));
            }
        }
    }
    Ok(table)
}

fn parse_row(row: &csv::StringRecord) -> Result<MutationRecord> {
    if row.len() < 2 || row.len() > 3 {
        return Err(Error::Data(format!("expected 3 fields, found {}", row.len())));
    }
    let complex_id = row[0].to_string();
    if complex_id.is_empty() {
        return Err(Error::Data("empty complex id".into()));
    }
    let mutations = row[1]
        .split(';')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Mutation>>>()?;
    if mutations.is_empty() {
        return Err(Error::Data("empty mutation list".into()));
    }
    let ddg = match row.get(2).unwrap_or("") {
        "" => None,
        s => Some(
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("bad ddG value `{s}`")))?,
        ),
    };
    Ok(MutationRecord {
        complex_id,
        mutations,
        ddg,
    })
}

/// Renders records back to the table format.
pub fn write_mutation_table(records: &[MutationRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["complex_id", "mutations", "ddg"]).map_err(csv_err)?;
    for r in records {
        let ddg = r.ddg.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.complex_id.as_str(), &r.mutation_string(), &ddg])
            .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
        .map_err(|e| Error::Data(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// Three disjoint groups of complex ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold0: Vec<String>,
    pub fold1: Vec<String>,
    pub fold2: Vec<String>,
}

impl FoldSplit {
    pub fn folds(&self) -> [&[String]; 3] {
        [&self.fold0, &self.fold1, &self.fold2]
    }

    /// Checks pairwise disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for fold in self.folds() {
            for id in fold {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Data(format!("complex {id} appears in two folds")));
                }
            }
        }
        Ok(())
    }

    /// Index of the fold holding `id`.
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds().iter().position(|f| f.iter().any(|x| x == id))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let split: FoldSplit = serde_json::from_str(text)?;
        split.validate()?;
        Ok(split)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Shuffles the distinct ids and deals them round-robin into three folds,
/// so sizes differ by at most one.
pub fn split_three_folds<S: AsRef<str>>(ids: &[S], rng: &mut Rng64) -> Result<FoldSplit> {
    let mut unique: Vec<String> = ids
        .iter()
        .map(|s| s.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if unique.len() < 3 {
        return Err(Error::Data(format!(
            "three folds need at least 3 distinct complexes, got {}",
            unique.len()
        )));
    }
    unique.shuffle(rng);
    let mut folds: [Vec<String>; 3] = Default::default();
    for (i, id) in unique.into_iter().enumerate() {
        folds[i % 3].push(id);
    }
    let [fold0, fold1, fold2] = folds;
    Ok(FoldSplit { fold0, fold1, fold2 })
}

/// How residues are chosen from each binder when cropping a complex.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Nearest to the partner binder's Cα centroid.
    #[default]
    Interface,
    /// Uniformly at random.
    Uniform,
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interface" => Ok(Self::Interface),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown crop mode `{other}`"))),
        }
    }
}

pub const CROP_PER_BINDER: usize = 64;

/// Keeps at most `per_binder` residues of each binder. Selected residues
/// keep their original relative order.
pub fn crop_interface(complex: &Complex, mode: CropMode, per_binder: usize, rng: &mut Rng64) -> Result<Complex> {
    let pick = |own: &[usize], other: &[usize], rng: &mut Rng64| -> Vec<usize> {
        if own.len() <= per_binder {
            return own.to_vec();
        }
        let mut chosen = match mode {
            CropMode::Uniform => {
                let mut v = own.to_vec();
                v.shuffle(rng);
                v.truncate(per_binder);
                v
            }
            CropMode::Interface => {
                let target = centroid(other.iter().map(|&j| complex.residues[j].position()));
                let mut scored: Vec<(f64, usize)> = own
                    .iter()
                    .map(|&i| {
                        let jitter = rng.random_range(0.0..1e-6);
                        (distance(complex.residues[i].position(), target) + jitter, i)
                    })
                    .collect();
                scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                scored.truncate(per_binder);
                scored.into_iter().map(|(_, i)| i).collect()
            }
        };
        chosen.sort_unstable();
        chosen
    };
    let receptor = pick(&complex.receptor, &complex.ligand, rng);
    let ligand = pick(&complex.ligand, &complex.receptor, rng);
    subset(complex, &receptor, &ligand)
}

/// Complex restricted to the given original indices.
pub fn subset(complex: &Complex, receptor: &[usize], ligand: &[usize]) -> Result<Complex> {
    let mut order: Vec<usize> = receptor.iter().chain(ligand).copied().collect();
    order.sort_unstable();
    let remap: BTreeMap<usize, usize> = order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    Complex::new(
        complex.id.clone(),
        order.iter().map(|&i| complex.residues[i].clone()).collect(),
        receptor.iter().map(|i| remap[i]).collect(),
        ligand.iter().map(|i| remap[i]).collect(),
    )
}

pub const PATCH_SIZE: usize = 128;

/// A contiguous window of `min(size, len)` positions at a random start.
pub fn crop_patch(len: usize, size: usize, rng: &mut Rng64) -> Range<usize> {
    if len <= size {
        return 0..len;
    }
    let start = rng.random_range(0..=len - size);
    start..start + size
}

/// Splits residues into chains, preserving file order.
pub fn chains(residues: &[Residue]) -> Vec<Vec<Residue>> {
    let mut out: Vec<Vec<Residue>> = Vec::new();
    for r in residues {
        match out.last_mut() {
            Some(c) if c[0].chain == r.chain => c.push(r.clone()),
            _ => out.push(vec![r.clone()]),
        }
    }
    out
}

/// Chain clusters: one cluster per line, whitespace-separated members named
/// `<structure stem>_<chain id>`. Blank lines and `#` comments are ignored.
pub fn parse_clusters(text: &str) -> Result<Vec<Vec<(String, String)>>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let members = line
            .split_whitespace()
            .map(|m| {
                m.rsplit_once('_')
                    .filter(|(s, c)| !s.is_empty() && !c.is_empty())
                    .map(|(s, c)| (s.to_string(), c.to_string()))
                    .ok_or_else(|| Error::Parse {
                        line: i + 1,
                        message: format!("cluster member `{m}` is not <stem>_<chain>"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(members);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;
    use proptest::prelude::*;

    pub(crate) const TOY: &str = "\
HEADER    TOY
ATOM      1  N   ALA A   1       0.000   1.458   0.000  1.00  0.00           N
ATOM      2  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C
ATOM      3  C   ALA A   1       1.525   0.000   0.000  1.00  0.00           C
ATOM      4  CB  ALA A   1      -0.500  -0.700   1.200  1.00  0.00           C
HETATM    5  O   HOH A 101       9.000   9.000   9.000  1.00  0.00           O
ATOM      6  N   THR H  31       5.000   1.458   0.000  1.00  0.00           N
ATOM      7  CA  THR H  31       5.000   0.000   0.000  1.00  0.00           C
ATOM      8  C   THR H  31       6.525   0.000   0.000  1.00  0.00           C
END
";

    #[test]
    fn toy_structure_two_binders() {
        let c = parse_structure("toy", TOY, None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.receptor.len(), 1);
        assert_eq!(c.ligand.len(), 1);
        assert_eq!(c.residues[1].aa, AminoAcid::Thr);
    }

    #[test]
    fn hetatm_is_ignored() {
        let without: String = TOY.lines().filter(|l| !l.starts_with("HETATM")).map(|l| format!("{l}\n")).collect();
        assert_eq!(parse_residues(TOY).unwrap(), parse_residues(&without).unwrap());
    }

    #[test]
    fn empty_structure_errors() {
        assert!(matches!(parse_structure("x", "HEADER\nEND\n", None), Err(Error::Data(_))));
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let broken = TOY.replace("   1.525   0.000   0.000", "   1.52x   0.000   0.000");
        match parse_residues(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_residue_skipped() {
        let odd = TOY.replace("ALA A", "XYZ A");
        assert_eq!(parse_residues(&odd).unwrap().len(), 1);
    }

    #[test]
    fn pdb_round_trip() {
        let res = parse_residues(TOY).unwrap();
        let again = parse_residues(&write_pdb(&res)).unwrap();
        assert_eq!(res.len(), again.len());
        for (a, b) in res.iter().zip(&again) {
            assert_eq!(a.aa, b.aa);
            for (x, y) in a.atoms.iter().zip(&b.atoms) {
                assert_eq!(x.name, y.name);
                assert!(distance(x.pos, y.pos) < 1e-3);
            }
        }
    }

    #[test]
    fn mutation_rows() {
        let t = parse_mutation_table("complex_id,mutations,ddg\n1ABC,TH31W,1.2\n1ABC,TH31W;AH53F,0.0\n1ABC,TH31W,\n1ABC,ZZ,1\n").unwrap();
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.records[0].ddg, Some(1.2));
        assert_eq!(t.records[0].mutations[0].to_string(), "TH31W");
        assert_eq!(t.records[1].mutations.len(), 2);
        assert_eq!(t.records[2].ddg, None);
        assert_eq!(t.rejected.len(), 1);
        assert_eq!(t.rejected[0].0, 5);
    }

    #[test]
    fn missing_header_rejected() {
        assert!(parse_mutation_table("1ABC,TH31W,1.2\n").is_err());
    }

    #[test]
    fn insertion_codes() {
        let m: Mutation = "TH100aW".parse().unwrap();
        assert_eq!(m.icode, Some('a'));
        assert_eq!(m.to_string(), "TH100aW");
        let neg: Mutation = "GA-3A".parse().unwrap();
        assert_eq!(neg.seq, -3);
    }

    #[test]
    fn partition_from_id() {
        let p = ChainPartition::from_complex_id("1ABC_HL_A").unwrap();
        assert_eq!(p.receptor, vec!["H", "L"]);
        assert_eq!(p.ligand, vec!["A"]);
        assert!(ChainPartition::from_complex_id("1ABC").is_none());
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let s = split_three_folds(&ids, &mut seeded_rng(1)).unwrap();
        let mut sizes: Vec<usize> = s.folds().iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(s, split_three_folds(&ids, &mut seeded_rng(1)).unwrap());
        assert!(split_three_folds(&ids[..2], &mut seeded_rng(1)).is_err());
        let three = split_three_folds(&ids[..3], &mut seeded_rng(1)).unwrap();
        assert!(three.folds().iter().all(|f| f.len() == 1));
    }

    #[test]
    fn fold_json_round_trip() {
        let s = FoldSplit {
            fold0: vec!["a".into()],
            fold1: vec!["b".into()],
            fold2: vec!["c".into()],
        };
        assert_eq!(FoldSplit::from_json(&s.to_json().unwrap()).unwrap(), s);
        assert!(FoldSplit::from_json(r#"{"fold0":["a"],"fold1":["a"],"fold2":[]}"#).is_err());
    }

    #[test]
    fn patch_windows() {
        let mut rng = seeded_rng(3);
        assert_eq!(crop_patch(50, 128, &mut rng), 0..50);
        let w = crop_patch(300, 128, &mut rng);
        assert_eq!(w.len(), 128);
        assert!(w.end <= 300);
        assert_eq!(crop_patch(300, 128, &mut seeded_rng(9)), crop_patch(300, 128, &mut seeded_rng(9)));
    }

    #[test]
    fn clusters() {
        let c = parse_clusters("# x\n1abc_A 2xyz_B\n\n3foo_C\n").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0][1], ("2xyz".to_string(), "B".to_string()));
        assert!(parse_clusters("nochain\n").is_err());
    }

    #[test]
    fn crop_sizes() {
        let mut rng = seeded_rng(4);
        let small = crate::synth::random_complex(&mut rng, "s", 10, 10, 12.0).unwrap();
        let c = crop_interface(&small, CropMode::Interface, CROP_PER_BINDER, &mut rng).unwrap();
        assert_eq!(c.len(), 20);
        let big = crate::synth::random_complex(&mut rng, "b", 100, 100, 12.0).unwrap();
        for mode in [CropMode::Interface, CropMode::Uniform] {
            let c = crop_interface(&big, mode, CROP_PER_BINDER, &mut rng).unwrap();
            assert_eq!((c.len(), c.receptor.len(), c.ligand.len()), (128, 64, 64));
            assert!(c.receptor.iter().all(|&i| c.residues[i].chain == "A"));
            assert!(c.ligand.iter().all(|&i| c.residues[i].chain == "B"));
        }
    }

    #[test]
    fn interface_crop_prefers_contact_residues() {
        let mut rng = seeded_rng(5);
        let big = crate::synth::random_complex(&mut rng, "b", 100, 100, 12.0).unwrap();
        let c = crop_interface(&big, CropMode::Interface, 10, &mut rng).unwrap();
        let lc = big.ligand_centroid();
        let worst_kept = c.receptor.iter().map(|&i| distance(c.residues[i].position(), lc)).fold(0.0, f64::max);
        let kept: BTreeSet<_> = c.receptor.iter().map(|&i| c.residues[i].seq).collect();
        for &i in &big.receptor {
            let r = &big.residues[i];
            if !kept.contains(&r.seq) {
                assert!(distance(r.position(), lc) >= worst_kept - 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn folds_partition_ids(n in 3usize..40, seed in 0u64..1000) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let s = split_three_folds(&ids, &mut seeded_rng(seed)).unwrap();
            s.validate().unwrap();
            let all: BTreeSet<&String> = s.folds().iter().flat_map(|f| f.iter()).collect();
            prop_assert_eq!(all.len(), n);
            let sizes: Vec<usize> = s.folds().iter().map(|f| f.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

//! Synthetic protein structures built from internal coordinates.
//!
//! Backbones use ideal bond lengths and angles with caller-chosen φ/ψ;
//! sidechains are grown atom by atom along the χ definitions, so parsed χ
//! angles reproduce the requested ones.

use rand::Rng;

use crate::dataio::{Mutation, MutationRecord};
use crate::error::Result;
use crate::geometry::{add, cross, norm, scale, sub, Atom, Complex, RigidTransform, Residue, Vec3};
use crate::residue::{AminoAcid, ALL};
use crate::tensor::Rng64;

const N_CA: f64 = 1.458;
const CA_C: f64 = 1.525;
const C_N: f64 = 1.329;
const C_O: f64 = 1.231;
const SIDE_BOND: f64 = 1.52;
const TETRAHEDRAL: f64 = 1.911; // 109.5°

/// Places `d` so that |cd| = `bond`, ∠bcd = `angle`, and dihedral abcd = `torsion`.
pub fn place(a: Vec3, b: Vec3, c: Vec3, bond: f64, angle: f64, torsion: f64) -> Vec3 {
    let bc = sub(c, b);
    let bc = scale(bc, 1.0 / norm(bc));
    let n = cross(sub(b, a), bc);
    let n = scale(n, 1.0 / norm(n));
    let m = cross(n, bc);
    let d2 = [
        -bond * angle.cos(),
        bond * angle.sin() * torsion.cos(),
        bond * angle.sin() * torsion.sin(),
    ];
    let d = add(add(scale(bc, d2[0]), scale(m, d2[1])), scale(n, d2[2]));
    add(c, d)
}

/// Per-residue inputs for [`build_chain`].
#[derive(Clone, Debug)]
pub struct ResidueSpec {
    pub aa: AminoAcid,
    pub phi: f64,
    pub psi: f64,
    /// One angle per χ of `aa`.
    pub chi: Vec<f64>,
}

/// Builds a chain numbered from `first_seq`.
pub fn build_chain(specs: &[ResidueSpec], chain: &str, first_seq: i32) -> Result<Vec<Residue>> {
    let mut out = Vec::with_capacity(specs.len());
    let mut n = [0.0, 0.0, 0.0];
    let mut ca = [N_CA, 0.0, 0.0];
    let mut c = place([0.0, 1.0, 0.0], n, ca, CA_C, 1.940, 0.0);
    for (i, spec) in specs.iter().enumerate() {
        if i > 0 {
            let prev_psi = specs[i - 1].psi;
            let nn = place(n, ca, c, C_N, 2.028, prev_psi);
            let nca = place(ca, c, nn, N_CA, 2.124, std::f64::consts::PI);
            let nc = place(c, nn, nca, CA_C, 1.940, spec.phi);
            n = nn;
            ca = nca;
            c = nc;
        }
        let o = place(n, ca, c, C_O, 2.101, spec.psi + std::f64::consts::PI);
        let mut atoms = vec![
            Atom { name: "N".into(), pos: n },
            Atom { name: "CA".into(), pos: ca },
            Atom { name: "C".into(), pos: c },
            Atom { name: "O".into(), pos: o },
        ];
        if spec.aa != AminoAcid::Gly {
            let cb = place(c, n, ca, SIDE_BOND, TETRAHEDRAL, -2.14);
            atoms.push(Atom { name: "CB".into(), pos: cb });
        }
        for (def, &chi) in spec.aa.chi_atoms().iter().zip(&spec.chi) {
            let find = |name: &str| atoms.iter().find(|a| a.name == name).map(|a| a.pos);
            if let (Some(a), Some(b), Some(cc)) = (find(def[0]), find(def[1]), find(def[2])) {
                if find(def[3]).is_none() {
                    let p = place(a, b, cc, SIDE_BOND, TETRAHEDRAL, chi);
                    atoms.push(Atom { name: def[3].into(), pos: p });
                }
            }
        }
        out.push(Residue::from_atoms(spec.aa, chain, first_seq + i as i32, None, atoms)?);
    }
    Ok(out)
}

/// A rotamer-like angle: one of 60°, 180°, 300° plus 10° Gaussian jitter,
/// wrapped to `[0, 2π)`.
pub fn rotamer_angle(rng: &mut Rng64) -> f64 {
    let well = [60.0f64, 180.0, 300.0][rng.random_range(0..3)];
    let jitter: f64 = rng.sample(rand_distr::StandardNormal);
    (well + 10.0 * jitter).to_radians().rem_euclid(std::f64::consts::TAU)
}

/// Random residue types with rotamer-like χ angles on a near-helical
/// backbone with jittered φ/ψ.
pub fn random_chain(rng: &mut Rng64, chain: &str, len: usize) -> Result<Vec<Residue>> {
    let specs: Vec<ResidueSpec> = (0..len)
        .map(|_| {
            let aa = ALL[rng.random_range(0..ALL.len())];
            ResidueSpec {
                aa,
                phi: (-60.0f64 + rng.random_range(-15.0..15.0)).to_radians(),
                psi: (-45.0f64 + rng.random_range(-15.0..15.0)).to_radians(),
                chi: (0..aa.torsion_count()).map(|_| rotamer_angle(rng)).collect(),
            }
        })
        .collect();
    build_chain(&specs, chain, 1)
}

/// Two random chains (receptor `A`, ligand `B`) with the ligand centroid
/// placed `separation` Å from the receptor centroid.
pub fn random_complex(
    rng: &mut Rng64,
    id: &str,
    receptor_len: usize,
    ligand_len: usize,
    separation: f64,
) -> Result<Complex> {
    let rec = random_chain(rng, "A", receptor_len)?;
    let mut lig = random_chain(rng, "B", ligand_len)?;
    let rc = crate::geometry::centroid(rec.iter().map(|r| r.position()));
    let lc = crate::geometry::centroid(lig.iter().map(|r| r.position()));
    let rot = RigidTransform::random_rotation(rng);
    let dir = loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let l = norm(v);
        if l > 0.1 && l <= 1.0 {
            break scale(v, 1.0 / l);
        }
    };
    let target = add(rc, scale(dir, separation));
    let moved_centroid = crate::geometry::mat_vec(&rot.rotation, lc);
    let t = RigidTransform {
        rotation: rot.rotation,
        translation: sub(target, moved_centroid),
    };
    for r in &mut lig {
        r.transform(&t);
    }
    let n_rec = rec.len();
    let mut residues = rec;
    residues.extend(lig);
    let n = residues.len();
    Complex::new(id, residues, (0..n_rec).collect(), (n_rec..n).collect())
}

/// Kyte–Doolittle hydropathy, indexed like [`ALL`].
pub const HYDROPATHY: [f64; 20] = [
    1.8, -4.5, -3.5, -3.5, 2.5, -3.5, -3.5, -0.4, -3.2, 4.5, 3.8, -3.9, 1.9, 2.8, -1.6, -0.8, -0.7, -0.9, -1.3, 4.2,
];

/// Noise-free planted ΔΔG: half the summed hydropathy change.
pub fn planted_ddg(mutations: &[Mutation]) -> f64 {
    mutations
        .iter()
        .map(|m| 0.5 * (HYDROPATHY[m.mt.index()] - HYDROPATHY[m.wt.index()]))
        .sum()
}

/// Complexes with labelled mutation records.
#[derive(Clone, Debug)]
pub struct PlantedDataset {
    pub complexes: Vec<Complex>,
    pub records: Vec<MutationRecord>,
}

/// `per_complex` records on each of `complexes` random complexes, about a
/// quarter of them double mutants, labelled by [`planted_ddg`] plus
/// Gaussian noise of standard deviation `noise`.
pub fn planted_dataset(
    rng: &mut Rng64,
    complexes: usize,
    per_complex: usize,
    receptor_len: usize,
    ligand_len: usize,
    noise: f64,
) -> Result<PlantedDataset> {
    let normal = rand_distr::Normal::new(0.0, noise.max(0.0)).map_err(|e| crate::Error::Contract(e.to_string()))?;
    let mut out = PlantedDataset { complexes: Vec::new(), records: Vec::new() };
    for c in 0..complexes {
        let id = format!("S{c:03}");
        let complex = random_complex(rng, &id, receptor_len, ligand_len, 11.0)?;
        for _ in 0..per_complex {
            let sites = if rng.random_bool(0.25) { 2 } else { 1 };
            let picks = rand::seq::index::sample(rng, complex.len(), sites).into_vec();
            let mutations: Vec<Mutation> = picks
                .iter()
                .map(|&i| {
                    let r = &complex.residues[i];
                    let mt = loop {
                        let aa = ALL[rng.random_range(0..ALL.len())];
                        if aa != r.aa {
                            break aa;
                        }
                    };
                    Mutation { wt: r.aa, chain: r.chain.clone(), seq: r.seq, icode: r.icode, mt }
                })
                .collect();
            let ddg = planted_ddg(&mutations) + rng.sample(normal);
            out.records.push(MutationRecord { complex_id: id.clone(), mutations, ddg: Some(ddg) });
        }
        out.complexes.push(complex);
    }
    Ok(out)
}

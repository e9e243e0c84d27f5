//! Amino-acid alphabet and sidechain torsion definitions.

use std::fmt;

/// The 20 standard amino acids, indexed alphabetically by three-letter code
/// (ALA = 0 ... VAL = 19).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AminoAcid {
    Ala,
    Arg,
    Asn,
    Asp,
    Cys,
    Gln,
    Glu,
    Gly,
    His,
    Ile,
    Leu,
    Lys,
    Met,
    Phe,
    Pro,
    Ser,
    Thr,
    Trp,
    Tyr,
    Val,
}

use AminoAcid::*;

pub const ALL: [AminoAcid; 20] = [
    Ala, Arg, Asn, Asp, Cys, Gln, Glu, Gly, His, Ile, Leu, Lys, Met, Phe, Pro, Ser, Thr, Trp, Tyr,
    Val,
];

const THREE: [&str; 20] = [
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU", "LYS", "MET",
    "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
];

const ONE: [char; 20] = [
    'A', 'R', 'N', 'D', 'C', 'Q', 'E', 'G', 'H', 'I', 'L', 'K', 'M', 'F', 'P', 'S', 'T', 'W', 'Y',
    'V',
];

pub const NUM_TYPES: usize = 20;

impl AminoAcid {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        ALL.get(i).copied()
    }

    /// Parses a three-letter residue name. A few common modified residues map
    /// onto their parent (MSE -> MET, HSD/HSE/HIE/HID -> HIS).
    pub fn from_three(code: &str) -> Option<Self> {
        let code = code.trim().to_ascii_uppercase();
        let code = match code.as_str() {
            "MSE" => "MET",
            "HSD" | "HSE" | "HIE" | "HID" | "HIP" => "HIS",
            other => other,
        };
        THREE.iter().position(|&t| t == code).map(|i| ALL[i])
    }

    pub fn from_one(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        ONE.iter().position(|&o| o == c).map(|i| ALL[i])
    }

    pub fn three(self) -> &'static str {
        THREE[self.index()]
    }

    pub fn one(self) -> char {
        ONE[self.index()]
    }

    /// Four-atom definitions of χ1..χt.
    pub fn chi_atoms(self) -> &'static [[&'static str; 4]] {
        const N_CA_CB_CG: [&str; 4] = ["N", "CA", "CB", "CG"];
        match self {
            Ala | Gly => &[],
            Arg => &[
                N_CA_CB_CG,
                ["CA", "CB", "CG", "CD"],
                ["CB", "CG", "CD", "NE"],
                ["CG", "CD", "NE", "CZ"],
            ],
            Asn | Asp => &[N_CA_CB_CG, ["CA", "CB", "CG", "OD1"]],
            Cys => &[["N", "CA", "CB", "SG"]],
            Gln | Glu => &[
                N_CA_CB_CG,
                ["CA", "CB", "CG", "CD"],
                ["CB", "CG", "CD", "OE1"],
            ],
            His => &[N_CA_CB_CG, ["CA", "CB", "CG", "ND1"]],
            Ile => &[["N", "CA", "CB", "CG1"], ["CA", "CB", "CG1", "CD1"]],
            Leu => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD1"]],
            Lys => &[
                N_CA_CB_CG,
                ["CA", "CB", "CG", "CD"],
                ["CB", "CG", "CD", "CE"],
                ["CG", "CD", "CE", "NZ"],
            ],
            Met => &[
                N_CA_CB_CG,
                ["CA", "CB", "CG", "SD"],
                ["CB", "CG", "SD", "CE"],
            ],
            Phe | Trp | Tyr => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD1"]],
            Pro => &[N_CA_CB_CG, ["CA", "CB", "CG", "CD"]],
            Ser => &[["N", "CA", "CB", "OG"]],
            Thr => &[["N", "CA", "CB", "OG1"]],
            Val => &[["N", "CA", "CB", "CG1"]],
        }
    }

    /// Canonical number of sidechain torsions (0 for ALA/GLY, at most 4).
    pub fn torsion_count(self) -> usize {
        self.chi_atoms().len()
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.three())
    }
}

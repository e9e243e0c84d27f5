//! Rigid transforms, residue frames, torsions, distance maps and the
//! unbound-state randomization of the ligand binder.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::residue::AminoAcid;
use crate::tensor::Rng64;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Proper rigid motion `x -> R x + t` (Å).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, x), self.translation)
    }

    /// Maps global coordinates into this frame: `R^T (x - t)`.
    pub fn apply_inverse(&self, x: Vec3) -> Vec3 {
        mat_vec(&transpose(&self.rotation), sub(x, self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        RigidTransform {
            rotation: rt,
            translation: scale(mat_vec(&rt, self.translation), -1.0),
        }
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut err: f64 = (det(&self.rotation) - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                err = err.max((rtr[i][j] - IDENTITY[i][j]).abs());
            }
        }
        err
    }

    /// Rotation drawn uniformly on SO(3) (normalised Gaussian quaternion)
    /// with zero translation.
    pub fn random_rotation(rng: &mut Rng64) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for x in q.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                q.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self {
            rotation,
            translation: [0.0; 3],
        }
    }

    /// Uniform rotation plus a translation uniform in a ball of `radius`.
    pub fn random(rng: &mut Rng64, radius: f64) -> Self {
        let mut t = Self::random_rotation(rng);
        t.translation = random_in_ball(rng, radius);
        t
    }
}

fn random_in_ball(rng: &mut Rng64, radius: f64) -> Vec3 {
    loop {
        let d: Vec3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = norm(d);
        if n > 1e-8 {
            let r = radius * rng.random::<f64>().cbrt();
            return scale(d, r / n);
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can return exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed dihedral angle of four points, mapped into `[0, 2π)`.
pub fn dihedral(p1: Vec3, p2: Vec3, p3: Vec3, p4: Vec3) -> Result<f64> {
    let b1 = sub(p2, p1);
    let b2 = sub(p3, p2);
    let b3 = sub(p4, p3);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let scale_ref = norm(b1).max(norm(b2)).max(norm(b3)).max(1.0);
    let tol = 1e-10 * scale_ref * scale_ref;
    if norm(n1) <= tol || norm(n2) <= tol {
        return Err(Error::DegenerateGeometry(
            "three consecutive dihedral points are collinear".into(),
        ));
    }
    let y = norm(b2) * dot(b1, n2);
    let x = dot(n1, n2);
    Ok(wrap_angle(y.atan2(x)))
}

/// Local frame from backbone atoms: x-axis along Cα→C, y-axis the
/// Gram–Schmidt component of Cα→N, z = x × y; origin at Cα.
pub fn build_frame(n: Vec3, ca: Vec3, c: Vec3) -> Result<RigidTransform> {
    let v1 = sub(c, ca);
    let v2 = sub(n, ca);
    let l1 = norm(v1);
    if l1 < 1e-8 {
        return Err(Error::DegenerateGeometry("C coincides with CA".into()));
    }
    let e1 = scale(v1, 1.0 / l1);
    let u2 = sub(v2, scale(e1, dot(e1, v2)));
    let l2 = norm(u2);
    if l2 < 1e-8 * norm(v2).max(1.0) {
        return Err(Error::DegenerateGeometry("collinear backbone N-CA-C".into()));
    }
    let e2 = scale(u2, 1.0 / l2);
    let e3 = cross(e1, e2);
    // columns are the frame axes
    let rotation = [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ];
    Ok(RigidTransform {
        rotation,
        translation: ca,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub name: String,
    pub pos: Vec3,
}

/// One residue with its backbone frame and sidechain torsions.
#[derive(Clone, Debug, PartialEq)]
pub struct Residue {
    pub aa: AminoAcid,
    pub chain: String,
    pub seq: i32,
    pub icode: Option<char>,
    pub atoms: Vec<Atom>,
    /// Orientation and Cα position.
    pub frame: RigidTransform,
    /// χ1..χt in `[0, 2π)`; `None` when a defining sidechain atom is missing.
    pub chi: Option<Vec<f64>>,
}

impl Residue {
    /// Builds a residue from named atoms. N, CA and C are required.
    pub fn from_atoms(
        aa: AminoAcid,
        chain: impl Into<String>,
        seq: i32,
        icode: Option<char>,
        atoms: Vec<Atom>,
    ) -> Result<Self> {
        let chain = chain.into();
        let find = |name: &str| atoms.iter().find(|a| a.name == name).map(|a| a.pos);
        let label = || format!("{}{}{}", aa.three(), chain, seq);
        let (n, ca, c) = match (find("N"), find("CA"), find("C")) {
            (Some(n), Some(ca), Some(c)) => (n, ca, c),
            (_, None, _) => return Err(Error::Data(format!("residue {} has no CA atom", label()))),
            _ => return Err(Error::Data(format!("residue {} lacks backbone N or C", label()))),
        };
        let frame = build_frame(n, ca, c)?;
        let chi = sidechain_torsions(&atoms, aa);
        Ok(Self {
            aa,
            chain,
            seq,
            icode,
            atoms,
            frame,
            chi,
        })
    }

    pub fn position(&self) -> Vec3 {
        self.frame.translation
    }

    pub fn atom(&self, name: &str) -> Option<Vec3> {
        self.atoms.iter().find(|a| a.name == name).map(|a| a.pos)
    }

    /// Residue label such as `TH31` (one-letter type, chain, number).
    pub fn label(&self) -> String {
        format!("{}{}{}", self.aa.one(), self.chain, self.seq)
    }

    /// Rigidly moves every atom and the frame; torsions are unchanged.
    pub fn transform(&mut self, t: &RigidTransform) {
        for a in &mut self.atoms {
            a.pos = t.apply(a.pos);
        }
        self.frame = t.compose(&self.frame);
    }
}

/// χ angles for `aa` from named atoms, or `None` if any defining atom is
/// missing or degenerate.
pub fn sidechain_torsions(atoms: &[Atom], aa: AminoAcid) -> Option<Vec<f64>> {
    let find = |name: &str| atoms.iter().find(|a| a.name == name).map(|a| a.pos);
    aa.chi_atoms()
        .iter()
        .map(|names| {
            let p = [find(names[0])?, find(names[1])?, find(names[2])?, find(names[3])?];
            dihedral(p[0], p[1], p[2], p[3]).ok()
        })
        .collect()
}

/// Two-binder structure: residues plus disjoint receptor/ligand index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Complex {
    pub id: String,
    pub residues: Vec<Residue>,
    pub receptor: Vec<usize>,
    pub ligand: Vec<usize>,
}

impl Complex {
    /// Validates that the index sets are non-empty, disjoint and cover every residue.
    pub fn new(
        id: impl Into<String>,
        residues: Vec<Residue>,
        receptor: Vec<usize>,
        ligand: Vec<usize>,
    ) -> Result<Self> {
        let n = residues.len();
        if receptor.is_empty() || ligand.is_empty() {
            return Err(Error::Data("both binders must contain residues".into()));
        }
        let mut seen = vec![false; n];
        for &i in receptor.iter().chain(&ligand) {
            if i >= n {
                return Err(Error::Data(format!("binder index {i} out of range ({n} residues)")));
            }
            if seen[i] {
                return Err(Error::Data(format!("residue {i} assigned to a binder twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("binder index sets do not cover every residue".into()));
        }
        Ok(Self {
            id: id.into(),
            residues,
            receptor,
            ligand,
        })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Swaps the receptor and ligand roles.
    pub fn swapped(&self) -> Complex {
        Complex {
            id: self.id.clone(),
            residues: self.residues.clone(),
            receptor: self.ligand.clone(),
            ligand: self.receptor.clone(),
        }
    }

    /// Applies one rigid motion to every residue.
    pub fn transformed(&self, t: &RigidTransform) -> Complex {
        let mut out = self.clone();
        for r in &mut out.residues {
            r.transform(t);
        }
        out
    }

    /// Applies `t` to the ligand only; receptor residues are untouched.
    pub fn with_ligand_transform(&self, t: &RigidTransform) -> Complex {
        let mut out = self.clone();
        for &i in &self.ligand {
            out.residues[i].transform(t);
        }
        out
    }

    pub fn ligand_centroid(&self) -> Vec3 {
        centroid(self.ligand.iter().map(|&i| self.residues[i].position()))
    }
}

pub fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        sum = add(sum, p);
        n += 1;
    }
    scale(sum, 1.0 / n.max(1) as f64)
}

/// Radius (Å) of the ball from which the ligand offset is drawn.
pub const UNBOUND_TRANSLATION_RADIUS: f64 = 10.0;

/// Rigid motion that rotates the ligand about its Cα centroid by a uniform
/// random rotation and then shifts it by a random offset.
pub fn sample_unbound_transform(complex: &Complex, rng: &mut Rng64) -> RigidTransform {
    let r = RigidTransform::random(rng, UNBOUND_TRANSLATION_RADIUS);
    let c = complex.ligand_centroid();
    RigidTransform {
        rotation: r.rotation,
        translation: add(sub(c, mat_vec(&r.rotation, c)), r.translation),
    }
}

/// Simulated unbound state: receptor kept in place, ligand moved by one
/// shared random rigid motion.
pub fn random_unbound_transform(complex: &Complex, rng: &mut Rng64) -> Complex {
    let t = sample_unbound_transform(complex, rng);
    complex.with_ligand_transform(&t)
}

/// Ligand × receptor Cα distances (Å), row `i` for the i-th ligand residue.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

pub fn ca_distance_map(complex: &Complex) -> Result<DistanceMap> {
    if complex.ligand.is_empty() || complex.receptor.is_empty() {
        return Err(Error::Data("distance map needs two non-empty binders".into()));
    }
    let mut values = Vec::with_capacity(complex.ligand.len() * complex.receptor.len());
    for &i in &complex.ligand {
        let pi = complex.residues[i].position();
        for &j in &complex.receptor {
            values.push(distance(pi, complex.residues[j].position()));
        }
    }
    Ok(DistanceMap {
        rows: complex.ligand.len(),
        cols: complex.receptor.len(),
        values,
    })
}

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::Serialize;

use crate::molecules::{infer_bonds, BondMatrix, BondTable, Molecule, MoleculeError};
use crate::scalar::Real;

/// Per-atom flags (summed order is an allowed valence) and the stable fraction.
pub fn atom_stability<T: Real>(mol: &Molecule<T>, bonds: &BondMatrix, table: &BondTable) -> (Vec<bool>, f64) {
    let flags: Vec<bool> = (0..mol.len())
        .map(|i| table.allowed_valences(mol.types[i]).contains(&bonds.valence(i)))
        .collect();
    let frac = flags.iter().filter(|&&f| f).count() as f64 / flags.len().max(1) as f64;
    (flags, frac)
}

pub fn molecule_stability<T: Real>(mol: &Molecule<T>, bonds: &BondMatrix, table: &BondTable) -> bool {
    !mol.is_empty() && atom_stability(mol, bonds, table).0.into_iter().all(|s| s)
}

/// Validity proxy: at least two atoms, a connected bond graph and no atom
/// above its maximum valence.
pub fn is_valid<T: Real>(mol: &Molecule<T>, bonds: &BondMatrix, table: &BondTable) -> bool {
    mol.len() >= 2
        && bonds.is_connected()
        && (0..mol.len()).all(|i| bonds.valence(i) <= table.max_valence(mol.types[i]))
}

fn hash_of(v: &impl Hash) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

/// Graph identity from atom types and bond orders by iterated neighbourhood
/// refinement; coordinates and atom order do not enter.
pub fn graph_hash<T: Real>(mol: &Molecule<T>, bonds: &BondMatrix) -> u64 {
    let n = mol.len();
    let mut labels: Vec<u64> = mol.types.iter().map(|&t| hash_of(&(t as u64))).collect();
    for _ in 0..n {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut nb: Vec<(u8, u64)> = bonds.neighbors(i).map(|(j, o)| (o, labels[j])).collect();
                nb.sort_unstable();
                hash_of(&(labels[i], nb))
            })
            .collect();
        let classes = |l: &[u64]| l.iter().collect::<HashSet<_>>().len();
        let stable = classes(&next) == classes(&labels);
        labels = next;
        if stable {
            break;
        }
    }
    labels.sort_unstable();
    hash_of(&(n, labels))
}

/// Aggregate sample metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub molecules: usize,
    pub atoms: usize,
    pub stable_atoms: usize,
    pub stable_molecules: usize,
    pub valid: usize,
    pub valid_unique: usize,
}

impl MetricsReport {
    pub fn atom_stability(&self) -> f64 {
        self.stable_atoms as f64 / self.atoms.max(1) as f64
    }

    pub fn molecule_stability(&self) -> f64 {
        self.stable_molecules as f64 / self.molecules.max(1) as f64
    }

    pub fn validity(&self) -> f64 {
        self.valid as f64 / self.molecules.max(1) as f64
    }

    pub fn validity_uniqueness(&self) -> f64 {
        self.valid_unique as f64 / self.molecules.max(1) as f64
    }
}

/// `key=value` lines.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "molecules={}", self.molecules)?;
        writeln!(f, "atoms={}", self.atoms)?;
        writeln!(f, "atom_stability={:.6}", self.atom_stability())?;
        writeln!(f, "molecule_stability={:.6}", self.molecule_stability())?;
        writeln!(f, "validity={:.6}", self.validity())?;
        writeln!(f, "validity_uniqueness={:.6}", self.validity_uniqueness())
    }
}

/// Bond inference, stability, validity and uniqueness over a sample set.
pub fn validity_and_uniqueness<T: Real>(samples: &[Molecule<T>], table: &BondTable) -> Result<MetricsReport, MoleculeError> {
    if samples.is_empty() {
        return Err(MoleculeError::Empty);
    }
    let mut r = MetricsReport {
        molecules: samples.len(),
        atoms: 0,
        stable_atoms: 0,
        stable_molecules: 0,
        valid: 0,
        valid_unique: 0,
    };
    let mut seen = HashSet::new();
    for m in samples {
        let bonds = infer_bonds(m, table);
        let (flags, _) = atom_stability(m, &bonds, table);
        r.atoms += m.len();
        r.stable_atoms += flags.iter().filter(|&&f| f).count();
        r.stable_molecules += usize::from(!m.is_empty() && flags.iter().all(|&f| f));
        if is_valid(m, &bonds, table) {
            r.valid += 1;
            if seen.insert(graph_hash(m, &bonds)) {
                r.valid_unique += 1;
            }
        }
    }
    Ok(r)
}

//! Molecules, the plain-text dataset format, bond inference and the
//! stability / validity / uniqueness metrics.

mod bonds;
mod format;
mod metrics;

pub use bonds::{infer_bonds, BondMatrix, BondTable, BondTableError};
pub use format::{
    format_molecules, parse_dataset, parse_molecules, read_molecules, write_molecules, write_xyz, Dataset, MoleculeError,
};
pub use metrics::{
    atom_stability, graph_hash, is_valid, molecule_stability, validity_and_uniqueness, MetricsReport,
};

use crate::numcore::Tensor;
use crate::rotation::subtract_cog;
use crate::scalar::Real;

/// The QM9 element alphabet, in one-hot order.
pub const QM9_ELEMENTS: [&str; 5] = ["H", "C", "N", "O", "F"];

/// Ordered element symbols; the position of a symbol is its one-hot index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<String>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new(&QM9_ELEMENTS)
    }
}

impl Alphabet {
    pub fn new(symbols: &[&str]) -> Self {
        Self {
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Atom coordinates with element indices into an [`Alphabet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule<T> {
    /// `[N, 3]`.
    pub coords: Tensor<T>,
    pub types: Vec<usize>,
    pub charges: Option<Vec<i32>>,
    /// `key=value` pairs from the record header, in file order.
    pub meta: Vec<(String, String)>,
}

impl<T: Real> Molecule<T> {
    pub fn new(coords: Tensor<T>, types: Vec<usize>) -> Self {
        assert_eq!(coords.rows(), types.len(), "one type per atom");
        Self {
            coords,
            types,
            charges: None,
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `[N, k]` one-hot encoding of the atom types.
    pub fn one_hot(&self, k: usize) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.len(), k]);
        for (i, &t) in self.types.iter().enumerate() {
            out.set(i, t, T::one());
        }
        out
    }

    pub fn centered(&self) -> Self {
        Self {
            coords: subtract_cog(&self.coords),
            ..self.clone()
        }
    }

    pub fn with_coords(&self, coords: Tensor<T>) -> Self {
        assert_eq!(coords.shape(), self.coords.shape());
        Self {
            coords,
            ..self.clone()
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> T {
        let (a, b) = (self.coords.row(i), self.coords.row(j));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use crate::molecules::{Alphabet, Molecule};
use crate::scalar::Real;

const DEFAULT_TABLE: &str = include_str!("../../data/bonds.toml");

#[derive(Debug, thiserror::Error)]
pub enum BondTableError {
    #[error("bond table: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bond table: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct Margins {
    single: f64,
    double: f64,
    triple: f64,
}

#[derive(Deserialize)]
struct RawTable {
    elements: Vec<String>,
    margins: Margins,
    valences: BTreeMap<String, Vec<u32>>,
    single: BTreeMap<String, f64>,
    #[serde(default)]
    double: BTreeMap<String, f64>,
    #[serde(default)]
    triple: BTreeMap<String, f64>,
}

/// Reference bond lengths per unordered element pair and order, with
/// per-order margins and allowed valences per element. Element `k` of the
/// table is one-hot index `k` of its [`Alphabet`].
#[derive(Clone, Debug, PartialEq)]
pub struct BondTable {
    elements: Vec<String>,
    /// `lengths[order − 1][a·k + b]`.
    lengths: [Vec<Option<f64>>; 3],
    margins: [f64; 3],
    valences: Vec<Vec<u32>>,
}

static WARNED: Mutex<BTreeSet<(usize, usize)>> = Mutex::new(BTreeSet::new());

impl BondTable {
    /// The shipped H/C/N/O/F table.
    pub fn qm9() -> Self {
        Self::from_toml(DEFAULT_TABLE).expect("shipped bond table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, BondTableError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, BondTableError> {
        let raw: RawTable = toml::from_str(text)?;
        let k = raw.elements.len();
        let idx = |s: &str| {
            raw.elements
                .iter()
                .position(|e| e == s)
                .ok_or_else(|| BondTableError::Invalid(format!("unknown element {s}")))
        };
        let mut lengths = [vec![None; k * k], vec![None; k * k], vec![None; k * k]];
        for (order, map) in [&raw.single, &raw.double, &raw.triple].into_iter().enumerate() {
            for (pair, &len) in map {
                let (a, b) = pair
                    .split_once('-')
                    .ok_or_else(|| BondTableError::Invalid(format!("bad pair key {pair}")))?;
                let (a, b) = (idx(a)?, idx(b)?);
                if !(len > 0.0) {
                    return Err(BondTableError::Invalid(format!("non-positive length for {pair}")));
                }
                lengths[order][a * k + b] = Some(len);
                lengths[order][b * k + a] = Some(len);
            }
        }
        for p in 0..k * k {
            let l: Vec<f64> = (0..3).filter_map(|o| lengths[o][p]).collect();
            if l.windows(2).any(|w| w[0] < w[1]) {
                return Err(BondTableError::Invalid(format!(
                    "lengths must not increase with bond order for pair #{p}"
                )));
            }
        }
        let valences = raw
            .elements
            .iter()
            .map(|e| {
                raw.valences
                    .get(e)
                    .cloned()
                    .ok_or_else(|| BondTableError::Invalid(format!("no valence for {e}")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            margins: [raw.margins.single, raw.margins.double, raw.margins.triple],
            elements: raw.elements,
            lengths,
            valences,
        })
    }

    pub fn alphabet(&self) -> Alphabet {
        let s: Vec<&str> = self.elements.iter().map(String::as_str).collect();
        Alphabet::new(&s)
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Reference length of a bond of `order` (1..=3) between types `a` and `b`.
    pub fn length(&self, a: usize, b: usize, order: u8) -> Option<f64> {
        self.lengths[order as usize - 1][a * self.elements.len() + b]
    }

    pub fn margin(&self, order: u8) -> f64 {
        self.margins[order as usize - 1]
    }

    pub fn allowed_valences(&self, t: usize) -> &[u32] {
        &self.valences[t]
    }

    pub fn max_valence(&self, t: usize) -> u32 {
        self.valences[t].iter().copied().max().unwrap_or(0)
    }

    /// Highest order whose `length + margin` exceeds `dist`, tried triple first.
    pub fn bond_order(&self, a: usize, b: usize, dist: f64) -> u8 {
        let k = self.elements.len();
        if a >= k || b >= k || self.length(a, b, 1).is_none() {
            let key = (a.min(b), a.max(b));
            if WARNED.lock().map(|mut s| s.insert(key)).unwrap_or(false) {
                log::warn!("no bond table entry for element pair {key:?}; treated as unbonded");
            }
            return 0;
        }
        for order in [3u8, 2, 1] {
            if let Some(len) = self.length(a, b, order) {
                if dist < len + self.margin(order) {
                    return order;
                }
            }
        }
        0
    }
}

/// Symmetric `N×N` bond orders with zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BondMatrix {
    n: usize,
    orders: Vec<u8>,
}

impl BondMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            orders: vec![0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.orders[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, order: u8) {
        self.orders[i * self.n + j] = order;
        self.orders[j * self.n + i] = order;
    }

    /// Sum of bond orders at atom `i`.
    pub fn valence(&self, i: usize) -> u32 {
        self.orders[i * self.n..(i + 1) * self.n].iter().map(|&o| o as u32).sum()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, u8)> + '_ {
        (0..self.n).filter_map(move |j| {
            let o = self.get(i, j);
            (o > 0).then_some((j, o))
        })
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, _) in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn infer_bonds<T: Real>(mol: &Molecule<T>, table: &BondTable) -> BondMatrix {
    let n = mol.len();
    let mut b = BondMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let d = mol.distance(i, j).f64();
            b.set(i, j, table.bond_order(mol.types[i], mol.types[j], d));
        }
    }
    b
}

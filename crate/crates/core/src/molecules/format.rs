//! Text format, one record per molecule:
//!
//! ```text
//! 3
//! id=7 gap=0.25
//! O 0.000000 0.000000 0.117300
//! H 0.000000 0.757200 -0.469200
//! H 0.000000 -0.757200 -0.469200
//! ```
//!
//! The second line holds whitespace-separated `key=value` pairs and may be
//! empty. Atom lines may carry an integer charge as a fifth column. Records
//! are separated by one blank line. A file with zero records is empty.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::SizeDistribution;
use crate::molecules::{Alphabet, Molecule};
use crate::numcore::Tensor;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum MoleculeError {
    #[error("line {line}: malformed atom count `{text}`")]
    BadCount { line: usize, text: String },
    #[error("line {line}: unknown element `{symbol}`")]
    UnknownElement { line: usize, symbol: String },
    #[error("line {line}: non-numeric coordinate `{text}`")]
    BadCoordinate { line: usize, text: String },
    #[error("line {line}: malformed atom line")]
    BadAtomLine { line: usize },
    #[error("line {line}: malformed metadata token `{text}`")]
    BadMetadata { line: usize, text: String },
    #[error("line {line}: file ends inside a record")]
    Truncated { line: usize },
    #[error("no molecules in input")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed, centred molecules with their size histogram.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub molecules: Vec<Molecule<T>>,
    pub sizes: SizeDistribution,
    pub alphabet: Alphabet,
}

enum State {
    Count,
    Meta { n: usize },
    Atoms { n: usize },
}

/// Parse every record of `text`. Empty input yields an empty list.
pub fn parse_molecules<T: Real>(text: &str, alphabet: &Alphabet) -> Result<Vec<Molecule<T>>, MoleculeError> {
    let mut out = Vec::new();
    let mut state = State::Count;
    let mut meta = Vec::new();
    let mut coords: Vec<T> = Vec::new();
    let mut types = Vec::new();
    let mut charges: Vec<i32> = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let trimmed = raw.trim();
        state = match state {
            State::Count => {
                if trimmed.is_empty() {
                    State::Count
                } else {
                    let n: usize = trimmed.parse().map_err(|_| MoleculeError::BadCount {
                        line,
                        text: trimmed.to_string(),
                    })?;
                    if n == 0 {
                        return Err(MoleculeError::BadCount {
                            line,
                            text: trimmed.to_string(),
                        });
                    }
                    State::Meta { n }
                }
            }
            State::Meta { n } => {
                meta = parse_meta(trimmed, line)?;
                State::Atoms { n }
            }
            State::Atoms { n } => {
                let fields: Vec<&str> = trimmed.split_whitespace().collect();
                if fields.len() != 4 && fields.len() != 5 {
                    return Err(MoleculeError::BadAtomLine { line });
                }
                let t = alphabet.index(fields[0]).ok_or_else(|| MoleculeError::UnknownElement {
                    line,
                    symbol: fields[0].to_string(),
                })?;
                for f in &fields[1..4] {
                    let v: f64 = f.parse().map_err(|_| MoleculeError::BadCoordinate {
                        line,
                        text: f.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(MoleculeError::BadCoordinate {
                            line,
                            text: f.to_string(),
                        });
                    }
                    coords.push(T::c(v));
                }
                let had_charges = types.is_empty() || charges.len() == types.len();
                match (fields.get(4), had_charges) {
                    (Some(q), true) => charges.push(q.parse().map_err(|_| MoleculeError::BadAtomLine { line })?),
                    (None, _) if charges.is_empty() => {}
                    _ => return Err(MoleculeError::BadAtomLine { line }),
                }
                types.push(t);
                if types.len() == n {
                    let mut m = Molecule::new(Tensor::from_vec(&[n, 3], std::mem::take(&mut coords)), std::mem::take(&mut types));
                    if !charges.is_empty() {
                        m.charges = Some(std::mem::take(&mut charges));
                    }
                    m.meta = std::mem::take(&mut meta);
                    out.push(m);
                    State::Count
                } else {
                    State::Atoms { n }
                }
            }
        };
    }
    match state {
        State::Count => Ok(out),
        _ => Err(MoleculeError::Truncated { line: last_line + 1 }),
    }
}

fn parse_meta(line_text: &str, line: usize) -> Result<Vec<(String, String)>, MoleculeError> {
    line_text
        .split_whitespace()
        .map(|tok| match tok.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(MoleculeError::BadMetadata {
                line,
                text: tok.to_string(),
            }),
        })
        .collect()
}

pub fn read_molecules<T: Real>(path: &Path, alphabet: &Alphabet) -> Result<Vec<Molecule<T>>, MoleculeError> {
    let text = std::fs::read_to_string(path)?;
    parse_molecules(&text, alphabet)
}

/// Read a dataset file, centre every molecule and build `p(N)`.
pub fn parse_dataset<T: Real>(path: &Path, alphabet: &Alphabet) -> Result<Dataset<T>, MoleculeError> {
    let molecules: Vec<Molecule<T>> = read_molecules(path, alphabet)?
        .into_iter()
        .map(|m| m.centered())
        .collect();
    if molecules.is_empty() {
        return Err(MoleculeError::Empty);
    }
    let sizes = SizeDistribution::from_sizes(molecules.iter().map(|m| m.len()));
    Ok(Dataset {
        molecules,
        sizes,
        alphabet: alphabet.clone(),
    })
}

/// Serialise in the text format with 6-decimal coordinates.
pub fn format_molecules<T: Real>(mols: &[Molecule<T>], alphabet: &Alphabet) -> String {
    let mut s = String::new();
    for (k, m) in mols.iter().enumerate() {
        if k > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "{}", m.len());
        let meta: Vec<String> = m.meta.iter().map(|(a, b)| format!("{a}={b}")).collect();
        let _ = writeln!(s, "{}", meta.join(" "));
        for i in 0..m.len() {
            let p = m.coords.row(i);
            let _ = write!(
                s,
                "{} {:.6} {:.6} {:.6}",
                alphabet.symbol(m.types[i]),
                p[0].f64(),
                p[1].f64(),
                p[2].f64()
            );
            if let Some(q) = &m.charges {
                let _ = write!(s, " {}", q[i]);
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_molecules<T: Real>(mols: &[Molecule<T>], alphabet: &Alphabet, path: &Path) -> Result<(), MoleculeError> {
    std::fs::write(path, format_molecules(mols, alphabet))?;
    Ok(())
}

/// Concatenated XYZ records, for external cheminformatics tools.
pub fn write_xyz<T: Real>(mols: &[Molecule<T>], alphabet: &Alphabet, path: &Path) -> Result<(), MoleculeError> {
    let mut s = String::new();
    for (k, m) in mols.iter().enumerate() {
        let _ = writeln!(s, "{}\nsample {k}", m.len());
        for i in 0..m.len() {
            let p = m.coords.row(i);
            let _ = writeln!(
                s,
                "{} {:.6} {:.6} {:.6}",
                alphabet.symbol(m.types[i]),
                p[0].f64(),
                p[1].f64(),
                p[2].f64()
            );
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

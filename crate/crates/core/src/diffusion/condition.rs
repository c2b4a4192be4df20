use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionError;
use crate::molecules::Molecule;
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Per-property affine map to zero mean and unit variance over a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub keys: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn values<T: Real>(m: &Molecule<T>, keys: &[String]) -> Result<Vec<f64>, DiffusionError> {
    keys.iter()
        .map(|k| {
            let v = m
                .meta_value(k)
                .ok_or_else(|| DiffusionError::Condition(format!("molecule lacks property `{k}`")))?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| DiffusionError::Condition(format!("property `{k}` = `{v}` is not a number")))
        })
        .collect()
}

impl Standardizer {
    pub fn fit<T: Real>(molecules: &[Molecule<T>], keys: &[String]) -> Result<Self, DiffusionError> {
        if molecules.is_empty() {
            return Err(DiffusionError::Condition("no molecules to fit".into()));
        }
        let rows = molecules
            .iter()
            .map(|m| values(m, keys))
            .collect::<Result<Vec<_>, _>>()?;
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..keys.len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..keys.len())
            .map(|k| {
                let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            keys: keys.to_vec(),
            mean,
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.keys.len()
    }

    pub fn transform(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// `[B, c]` standardised values for raw property rows.
    pub fn tensor<T: Real>(&self, raw: &[Vec<f64>]) -> Result<Tensor<T>, DiffusionError> {
        let mut data = Vec::with_capacity(raw.len() * self.dim());
        for r in raw {
            if r.len() != self.dim() {
                return Err(DiffusionError::Condition(format!(
                    "expected {} condition values, got {}",
                    self.dim(),
                    r.len()
                )));
            }
            data.extend(self.transform(r).into_iter().map(T::c));
        }
        Ok(Tensor::from_vec(&[raw.len(), self.dim()], data))
    }

    /// `[B, c]` standardised values read from the molecules' metadata.
    pub fn molecules_tensor<T: Real>(&self, molecules: &[&Molecule<T>]) -> Result<Tensor<T>, DiffusionError> {
        let raw = molecules
            .iter()
            .map(|m| values(m, &self.keys))
            .collect::<Result<Vec<_>, _>>()?;
        self.tensor(&raw)
    }
}

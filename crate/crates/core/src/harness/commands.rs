use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autoencoder::{reconstruction_metrics, train_autoencoder, AEConfig, AEState, ReconMetrics};
use crate::diffusion::{
    build_schedule, generate, train_ldm, LatentCorpus, LatentScale, LdmConfig, LdmState, ModelBundle, SizeDistribution,
    Standardizer,
};
use crate::harness::{Checkpoint, HarnessError, RunConfig};
use crate::molecules::{
    infer_bonds, molecule_stability, parse_dataset, read_molecules, validity_and_uniqueness, write_molecules,
    Alphabet, BondTable, MetricsReport, Molecule, MoleculeError,
};
use crate::nets::Denoiser;
use crate::numcore::ParamStore;
use crate::rotation::pca_frame;

/// Line-delimited JSON records.
pub struct JsonLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self {
            out: BufWriter::new(File::create(path).map_err(|e| HarnessError::io(path, e))?),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, event: &str, value: &impl Serialize) -> Result<(), HarnessError> {
        let mut v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(m) = &mut v {
            m.insert("event".into(), json!(event));
        }
        serde_json::to_writer(&mut self.out, &v)?;
        self.out.write_all(b"\n").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), HarnessError> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// `ae.ckpt` → `ae.jsonl`.
pub fn log_path(out: &Path) -> PathBuf {
    out.with_extension("jsonl")
}

/// Dataset after the `stable_only` filter and `limit`.
pub fn load_training_set(cfg: &RunConfig) -> Result<(Vec<Molecule<f64>>, Alphabet), HarnessError> {
    let alphabet = Alphabet::default();
    let mut mols = parse_dataset::<f64>(&cfg.dataset, &alphabet)?.molecules;
    if cfg.stable_only {
        let table = BondTable::qm9();
        mols.retain(|m| molecule_stability(m, &infer_bonds(m, &table), &table));
    }
    if let Some(k) = cfg.limit {
        mols.truncate(k);
    }
    if mols.is_empty() {
        return Err(MoleculeError::Empty.into());
    }
    Ok((mols, alphabet))
}

#[derive(Serialize, Deserialize)]
struct AeExtra {
    num_types: usize,
    alphabet: Vec<String>,
    best_epoch: usize,
    /// Absent before any validation pass.
    best_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainAeReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub reconstruction: ReconMetrics,
}

pub fn ae_checkpoint(state: &AEState<f64>, alphabet: &Alphabet) -> Result<Checkpoint, HarnessError> {
    let extra = AeExtra {
        num_types: state.model.num_types,
        alphabet: alphabet.symbols().to_vec(),
        best_epoch: state.best_epoch,
        best_val: state.best_val.is_finite().then_some(state.best_val),
    };
    Ok(Checkpoint::new(
        "autoencoder",
        serde_json::to_value(&state.model.config)?,
        &state.store,
        serde_json::to_value(extra)?,
    ))
}

pub fn load_ae(ckpt: &Checkpoint) -> Result<(AEState<f64>, Alphabet), HarnessError> {
    if ckpt.manifest.kind != "autoencoder" {
        return Err(HarnessError::Checkpoint(format!("expected an autoencoder checkpoint, got {}", ckpt.manifest.kind)));
    }
    let cfg: AEConfig = serde_json::from_value(ckpt.manifest.config.clone())?;
    let extra: AeExtra = serde_json::from_value(ckpt.manifest.extra.clone())?;
    let mut state = AEState::new(&cfg, extra.num_types, 0)?;
    ckpt.restore(&mut state.store)?;
    state.best_epoch = extra.best_epoch;
    state.best_val = extra.best_val.unwrap_or(f64::INFINITY);
    let symbols: Vec<&str> = extra.alphabet.iter().map(String::as_str).collect();
    Ok((state, Alphabet::new(&symbols)))
}

/// Train the autoencoder; writes the best-validation checkpoint and a JSON log.
pub fn cmd_train_ae(cfg: &RunConfig, out: &Path) -> Result<TrainAeReport, HarnessError> {
    let (mols, alphabet) = load_training_set(cfg)?;
    let validation = match &cfg.validation {
        Some(p) => Some(parse_dataset::<f64>(p, &alphabet)?.molecules),
        None => None,
    };
    let log = log_path(out);
    let mut jl = JsonLog::create(&log)?;
    let mut log_err = None;
    let (state, history) = train_autoencoder(
        &mols,
        validation.as_deref(),
        &cfg.autoencoder,
        alphabet.len(),
        cfg.seed,
        cfg.stop_rmsd,
        |e| {
            if let Err(err) = jl.record("epoch", e) {
                log_err.get_or_insert(err);
            }
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let eval_set: Vec<&Molecule<f64>> = validation.as_ref().unwrap_or(&mols).iter().collect();
    let reconstruction = reconstruction_metrics(&state, &eval_set, cfg.seed.wrapping_add(1));
    let report = TrainAeReport {
        checkpoint: out.to_path_buf(),
        log: log.clone(),
        epochs: history.len(),
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        reconstruction,
    };
    jl.record("final", &report)?;
    jl.finish()?;
    ae_checkpoint(&state, &alphabet)?.save(out)?;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct LdmExtra {
    latent_dim: usize,
    cond_dim: usize,
    sizes: SizeDistribution,
    standardizer: Option<Standardizer>,
    ae_fingerprint: String,
    scale: LatentScale,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLdmReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean of the first and of the last `k` entries.
fn window_means(xs: &[f64], k: usize) -> (f64, f64) {
    let k = k.clamp(1, xs.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&xs[..k.min(xs.len())]), mean(&xs[xs.len().saturating_sub(k)..]))
}

/// Train the latent denoiser on the frozen encoder's latents.
pub fn cmd_train_ldm(cfg: &RunConfig, ae_path: &Path, out: &Path) -> Result<TrainLdmReport, HarnessError> {
    let ae_ckpt = Checkpoint::load(ae_path)?;
    let (ae, _) = load_ae(&ae_ckpt)?;
    let (mols, _) = load_training_set(cfg)?;
    let (standardizer, cond) = if cfg.conditioning.is_empty() {
        (None, None)
    } else {
        let st = Standardizer::fit(&mols, &cfg.conditioning)?;
        let refs: Vec<&Molecule<f64>> = mols.iter().collect();
        let t = st.molecules_tensor::<f64>(&refs)?;
        let rows = (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        (Some(st), Some(rows))
    };
    let corpus = LatentCorpus::encode(&ae, &mols, cond);
    let log = log_path(out);
    let mut jl = JsonLog::create(&log)?;
    let mut log_err = None;
    let (state, history) = train_ldm(&corpus, &cfg.diffusion, cfg.seed, |s| {
        if let Err(err) = jl.record("step", s) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let losses: Vec<f64> = history.iter().map(|s| s.loss).collect();
    let (initial_loss, final_loss) = window_means(&losses, 50);
    let report = TrainLdmReport {
        checkpoint: out.to_path_buf(),
        log: log.clone(),
        iterations: history.len(),
        initial_loss,
        final_loss,
    };
    jl.record("final", &report)?;
    jl.finish()?;
    let extra = LdmExtra {
        latent_dim: corpus.width(),
        cond_dim: corpus.cond_dim(),
        sizes: SizeDistribution::from_sizes(mols.iter().map(|m| m.len())),
        standardizer,
        ae_fingerprint: ae_ckpt.fingerprint(),
        scale: state.scale,
    };
    Checkpoint::new(
        "diffusion",
        serde_json::to_value(&cfg.diffusion)?,
        &state.store,
        serde_json::to_value(extra)?,
    )
    .save(out)?;
    Ok(report)
}

/// Restored diffusion model with its size distribution and standardiser.
pub struct LoadedLdm {
    pub state: LdmState<f64>,
    pub sizes: SizeDistribution,
    pub standardizer: Option<Standardizer>,
    pub ae_fingerprint: String,
}

pub fn load_ldm(ckpt: &Checkpoint) -> Result<LoadedLdm, HarnessError> {
    if ckpt.manifest.kind != "diffusion" {
        return Err(HarnessError::Checkpoint(format!("expected a diffusion checkpoint, got {}", ckpt.manifest.kind)));
    }
    let config: LdmConfig = serde_json::from_value(ckpt.manifest.config.clone())?;
    let extra: LdmExtra = serde_json::from_value(ckpt.manifest.extra.clone())?;
    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let denoiser = Denoiser::new(&mut store, "den", &config.denoiser, extra.latent_dim, extra.cond_dim, &mut rng);
    ckpt.restore(&mut store)?;
    let schedule = build_schedule(config.steps, config.schedule)?;
    Ok(LoadedLdm {
        state: LdmState {
            denoiser,
            store,
            schedule,
            config,
            scale: extra.scale,
        },
        sizes: extra.sizes,
        standardizer: extra.standardizer,
        ae_fingerprint: extra.ae_fingerprint,
    })
}

/// Sample `n` molecules and write them to `out`.
pub fn cmd_sample(
    ae_path: &Path,
    ldm_path: &Path,
    n: usize,
    seed: u64,
    condition: Option<&[f64]>,
    out: &Path,
) -> Result<Vec<Molecule<f64>>, HarnessError> {
    let ae_ckpt = Checkpoint::load(ae_path)?;
    let (ae, alphabet) = load_ae(&ae_ckpt)?;
    let ldm = load_ldm(&Checkpoint::load(ldm_path)?)?;
    if ldm.state.denoiser.latent_dim != ae.model.latent_width() {
        return Err(HarnessError::Checkpoint(format!(
            "denoiser latent width {} does not match autoencoder latent width {}",
            ldm.state.denoiser.latent_dim,
            ae.model.latent_width()
        )));
    }
    if ldm.ae_fingerprint != ae_ckpt.fingerprint() {
        return Err(HarnessError::Checkpoint(
            "diffusion checkpoint was trained on a different autoencoder".into(),
        ));
    }
    let bundle = ModelBundle {
        ae: &ae,
        ldm: &ldm.state,
        sizes: &ldm.sizes,
        standardizer: ldm.standardizer.as_ref(),
    };
    let samples = generate(&bundle, n, seed, condition)?;
    write_molecules(&samples, &alphabet, out).map_err(|e| HarnessError::io(out, e))?;
    Ok(samples)
}

/// Evaluate a sample file.
pub fn cmd_eval(samples: &Path, table: Option<&Path>) -> Result<MetricsReport, HarnessError> {
    let table = match table {
        Some(p) => BondTable::load(p).map_err(|e| HarnessError::Config(e.to_string()))?,
        None => BondTable::qm9(),
    };
    let mols = read_molecules::<f64>(samples, &table.alphabet())?;
    Ok(validity_and_uniqueness(&mols, &table)?)
}

/// PCA-align every molecule of `input` into `out`; returns the record count.
pub fn cmd_align_pca(input: &Path, out: &Path) -> Result<usize, HarnessError> {
    let alphabet = Alphabet::default();
    let mols = read_molecules::<f64>(input, &alphabet)?;
    let aligned: Vec<Molecule<f64>> = mols
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (c, frame) = pca_frame(&m.coords);
            let coords = match frame {
                Some(r) => crate::rotation::apply_rotation(&r, &c),
                None => {
                    log::warn!("record {k}: no unique principal frame; left centred");
                    c
                }
            };
            m.with_coords(coords)
        })
        .collect();
    write_molecules(&aligned, &alphabet, out).map_err(|e| HarnessError::io(out, e))?;
    Ok(aligned.len())
}

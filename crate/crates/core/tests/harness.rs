use std::path::{Path, PathBuf};

use alignmol::autoencoder::{decode, encode, AEConfig};
use alignmol::diffusion::{predict_noise_tensor, latent_noise, LdmConfig};
use alignmol::harness::{
    cmd_align_pca, cmd_eval, cmd_sample, cmd_train_ae, cmd_train_ldm, load_ae, load_ldm, Checkpoint, HarnessError,
    RunConfig,
};
use alignmol::molecules::{write_molecules, read_molecules, Alphabet, Molecule};
use alignmol::nets::{DenoiserConfig, GraphBatch};
use alignmol::numcore::Tensor;
use alignmol::rotation::{apply_rotation, random_rotation_haar};
use rand_chacha::ChaCha8Rng;

fn dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/qm9_subset.txt")
}

fn toy_config(dir: &Path) -> RunConfig {
    let mols: Vec<Molecule<f64>> = read_molecules(&dataset(), &Alphabet::default()).unwrap();
    let path = dir.join("toy.txt");
    write_molecules(&mols[..12], &Alphabet::default(), &path).unwrap();
    RunConfig {
        dataset: path,
        seed: 3,
        autoencoder: AEConfig {
            decoder_hidden: 16,
            encoder_hidden: 16,
            rotation_hidden: 16,
            decoder_layers: 2,
            batch_size: 6,
            epochs: 3,
            lr: 1e-3,
            ..AEConfig::default()
        },
        diffusion: LdmConfig {
            denoiser: DenoiserConfig::Dit {
                width: 16,
                heads: 2,
                blocks: 1,
                t_dim: 16,
                mlp_ratio: 2,
            },
            steps: 20,
            batch_size: 6,
            iterations: 30,
            lr: 1e-3,
            ..LdmConfig::default()
        },
        ..RunConfig::default()
    }
}

fn train_both(cfg: &RunConfig, dir: &Path, tag: &str) -> (PathBuf, PathBuf) {
    let ae = dir.join(format!("ae{tag}.ckpt"));
    let ldm = dir.join(format!("ldm{tag}.ckpt"));
    cmd_train_ae(cfg, &ae).unwrap();
    cmd_train_ldm(cfg, &ae, &ldm).unwrap();
    (ae, ldm)
}

#[test]
fn config_parses_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("d.txt"), "1\n\nH 0 0 0\n").unwrap();
    let text = "seed = 9\ndataset = \"d.txt\"\n[autoencoder]\nsigma = 0.2\n[diffusion]\nsteps = 100\n[diffusion.denoiser]\nkind = \"gnn\"\nhidden = 32\nlayers = 2\n";
    let cfg = RunConfig::from_toml(text, dir.path()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.dataset, dir.path().join("d.txt"));
    assert_eq!(cfg.autoencoder.sigma, 0.2);
    assert_eq!(cfg.diffusion.denoiser, DenoiserConfig::Gnn { hidden: 32, layers: 2 });
    let again = RunConfig::from_toml(&cfg.to_toml(), dir.path()).unwrap();
    assert_eq!(again, cfg);

    let missing = RunConfig::from_toml("dataset = \"nope.txt\"\n", dir.path());
    assert!(matches!(missing, Err(HarnessError::Config(_))));
    let unknown = RunConfig::from_toml("dataset = \"d.txt\"\nbogus = 1\n", dir.path());
    assert!(matches!(unknown, Err(ref e) if e.exit_code() == 1));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let (ae_path, ldm_path) = train_both(&cfg, dir.path(), "");
    let ck = Checkpoint::load(&ae_path).unwrap();
    let (ae, _) = load_ae(&ck).unwrap();
    let bytes = std::fs::read(&ae_path).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);

    let mols: Vec<Molecule<f64>> = read_molecules(&cfg.dataset, &Alphabet::default()).unwrap();
    let refs: Vec<&Molecule<f64>> = mols.iter().take(4).collect();
    let e = encode::<f64, ChaCha8Rng>(&ae, &refs, None);
    let (ae2, _) = load_ae(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let e2 = encode::<f64, ChaCha8Rng>(&ae2, &refs, None);
    assert_eq!(e.latent.z, e2.latent.z);
    assert_eq!(decode(&ae, &e.batch, &e.latent.z), decode(&ae2, &e2.batch, &e2.latent.z));

    let l1 = load_ldm(&Checkpoint::load(&ldm_path).unwrap()).unwrap();
    let l2 = load_ldm(&Checkpoint::load(&ldm_path).unwrap()).unwrap();
    let batch = GraphBatch::new(&[3, 5]);
    let z = latent_noise::<f64>(&batch, 5, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1));
    let a = predict_noise_tensor(&l1.state.denoiser, &l1.state.store, &batch, &z, 7, 20, None);
    let b = predict_noise_tensor(&l2.state.denoiser, &l2.state.store, &batch, &z, 7, 20, None);
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_missing_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let ae_path = dir.path().join("ae.ckpt");
    cmd_train_ae(&cfg, &ae_path).unwrap();
    let mut ck = Checkpoint::load(&ae_path).unwrap();
    ck.arrays.pop();
    let err = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap_err();
    assert!(err.to_string().contains("absent"));
    let mut ck = Checkpoint::load(&ae_path).unwrap();
    ck.manifest.arrays[0].shape.push(1);
    assert!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).is_err());
}

#[test]
fn training_and_sampling_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let (a1, l1) = train_both(&cfg, dir.path(), "1");
    let (a2, l2) = train_both(&cfg, dir.path(), "2");
    assert_eq!(std::fs::read(&a1).unwrap(), std::fs::read(&a2).unwrap());
    assert_eq!(std::fs::read(&l1).unwrap(), std::fs::read(&l2).unwrap());
    // the closing record names the output path, so compare per-epoch records
    let epochs = |p: &std::path::Path| -> Vec<String> {
        std::fs::read_to_string(p.with_extension("jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"event\":\"epoch\""))
            .map(String::from)
            .collect()
    };
    assert!(!epochs(&a1).is_empty());
    assert_eq!(epochs(&a1), epochs(&a2));
    let (s1, s2) = (dir.path().join("s1.txt"), dir.path().join("s2.txt"));
    cmd_sample(&a1, &l1, 7, 11, None, &s1).unwrap();
    cmd_sample(&a2, &l2, 7, 11, None, &s2).unwrap();
    let b1 = std::fs::read(&s1).unwrap();
    assert!(!b1.is_empty());
    assert_eq!(b1, std::fs::read(&s2).unwrap());
    assert_eq!(
        cmd_eval(&s1, None).unwrap().to_string(),
        cmd_eval(&s2, None).unwrap().to_string()
    );

    let empty = dir.path().join("empty.txt");
    assert!(cmd_sample(&a1, &l1, 0, 11, None, &empty).unwrap().is_empty());
    assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
}

#[test]
fn sampling_rejects_foreign_autoencoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let (ae, ldm) = train_both(&cfg, dir.path(), "");
    let other = dir.path().join("other.ckpt");
    cmd_train_ae(&RunConfig { seed: 99, ..cfg.clone() }, &other).unwrap();
    let out = dir.path().join("s.txt");
    assert!(matches!(cmd_sample(&other, &ldm, 3, 0, None, &out), Err(HarnessError::Checkpoint(_))));
    let wide = dir.path().join("wide.ckpt");
    let mut wcfg = cfg.clone();
    wcfg.autoencoder.latent_dim = 4;
    cmd_train_ae(&wcfg, &wide).unwrap();
    assert!(cmd_sample(&wide, &ldm, 3, 0, None, &out).is_err());
    assert!(cmd_sample(&ae, &ae, 3, 0, None, &out).is_err());
}

#[test]
fn ldm_loss_decreases_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    cfg.autoencoder.epochs = 20;
    cfg.diffusion.iterations = 500;
    cfg.diffusion.steps = 100;
    let ae = dir.path().join("ae.ckpt");
    cmd_train_ae(&cfg, &ae).unwrap();
    let r = cmd_train_ldm(&cfg, &ae, &dir.path().join("ldm.ckpt")).unwrap();
    assert_eq!(r.iterations, 500);
    assert!(r.final_loss < 0.8 * r.initial_loss, "{} vs {}", r.final_loss, r.initial_loss);
}

#[test]
fn conditioning_keys_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path());
    let ae = dir.path().join("ae.ckpt");
    cmd_train_ae(&cfg, &ae).unwrap();
    cfg.conditioning = vec!["no_such_key".into()];
    assert!(cmd_train_ldm(&cfg, &ae, &dir.path().join("l.ckpt")).is_err());

    cfg.conditioning = vec!["gap".into()];
    let ldm = dir.path().join("c.ckpt");
    cmd_train_ldm(&cfg, &ae, &ldm).unwrap();
    let out = dir.path().join("s.txt");
    assert_eq!(cmd_sample(&ae, &ldm, 4, 0, Some(&[0.25]), &out).unwrap().len(), 4);
    assert!(cmd_sample(&ae, &ldm, 4, 0, None, &out).is_err());
}

fn methane() -> Molecule<f64> {
    let a = 1.09 / 3f64.sqrt();
    let coords = Tensor::from_rows(&[
        vec![0.0, 0.0, 0.0],
        vec![a, a, a],
        vec![a, -a, -a],
        vec![-a, a, -a],
        vec![-a, -a, a],
    ]);
    Molecule::new(coords, vec![1, 0, 0, 0, 0])
}

#[test]
fn eval_counts_methane_copies() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.txt");
    write_molecules(&vec![methane(); 100], &Alphabet::default(), &p).unwrap();
    let r = cmd_eval(&p, None).unwrap();
    assert_eq!(r.atom_stability(), 1.0);
    assert_eq!(r.molecule_stability(), 1.0);
    assert!((r.validity_uniqueness() - 0.01).abs() < 1e-12);
    let e = dir.path().join("e.txt");
    std::fs::write(&e, "").unwrap();
    assert!(cmd_eval(&e, None).is_err());
}

fn pairwise(m: &Molecule<f64>) -> Vec<f64> {
    let mut d = Vec::new();
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            d.push(m.distance(i, j));
        }
    }
    d
}

#[test]
fn pca_alignment_is_invariant_to_pre_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let mols: Vec<Molecule<f64>> = read_molecules(&dataset(), &Alphabet::default()).unwrap();
    let mols = &mols[20..60];
    let a = Alphabet::default();
    let (p0, p1) = (dir.path().join("in.txt"), dir.path().join("rot.txt"));
    write_molecules(mols, &a, &p0).unwrap();
    let rotated: Vec<_> = mols
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let c = m.coords.map(|v| v + 0.7);
            m.with_coords(apply_rotation(&random_rotation_haar(k as u64), &c))
        })
        .collect();
    let (o0, o1) = (dir.path().join("o0.txt"), dir.path().join("o1.txt"));
    // Full precision for the rotated copy; the text format rounds to 1e-6.
    let x0: Vec<Molecule<f64>> = mols.to_vec();
    write_molecules(&rotated, &a, &p1).unwrap();
    assert_eq!(cmd_align_pca(&p0, &o0).unwrap(), 40);
    cmd_align_pca(&p1, &o1).unwrap();
    let aligned: Vec<Molecule<f64>> = read_molecules(&o0, &a).unwrap();
    for (m, al) in x0.iter().zip(&aligned) {
        for (d0, d1) in pairwise(m).iter().zip(pairwise(al)) {
            assert!((d0 - d1).abs() < 1e-5);
        }
    }
    for (m, r) in x0.iter().zip(&rotated) {
        let a0 = alignmol::rotation::pca_align(&m.coords);
        let a1 = alignmol::rotation::pca_align(&r.coords);
        assert!(a0.zip_map(&a1, |p, q| p - q).max_abs() < 1e-8);
    }
    let line = Molecule::new(
        Tensor::from_rows(&[vec![-1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]),
        vec![1, 1, 1],
    );
    let out = alignmol::rotation::pca_align(&line.coords);
    assert!(out.zip_map(&line.coords, |p, q| p - q).max_abs() < 1e-12);
}

use std::rc::Rc;

use rand::Rng;

use crate::autoencoder::{AEConfig, DecoderKind, RotationMode};
use crate::molecules::Molecule;
use crate::nets::{EgnnLayer, GnnLayer, GraphBatch, LayerDims, Linear, RotationNet};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Real;

/// Charges enter the features and the reconstruction target as `0.1·q`.
pub const CHARGE_SCALE: f64 = 0.1;

/// Molecules assembled for one forward pass.
#[derive(Clone, Debug)]
pub struct AeBatch<T> {
    pub batch: GraphBatch,
    /// `[N, 3]`, centred per molecule.
    pub x: Tensor<T>,
    /// `[N, F]`: one-hot types, then the scaled charge when enabled.
    pub h: Tensor<T>,
    pub types: Rc<[usize]>,
    /// `[N, 1]` scaled charges.
    pub charges: Option<Tensor<T>>,
}

impl<T: Real> AeBatch<T> {
    pub fn new(mols: &[&Molecule<T>], num_types: usize, charges: bool) -> Self {
        let sizes: Vec<usize> = mols.iter().map(|m| m.len()).collect();
        let batch = GraphBatch::new(&sizes);
        let n = batch.num_nodes();
        let f = num_types + usize::from(charges);
        let mut x = Vec::with_capacity(n * 3);
        let mut h = Tensor::zeros(&[n, f]);
        let mut types = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        let mut row = 0;
        for m in mols {
            x.extend_from_slice(m.centered().coords.data());
            for i in 0..m.len() {
                h.set(row, m.types[i], T::one());
                if charges {
                    let c = T::c(m.charges.as_ref().map_or(0, |c| c[i]) as f64 * CHARGE_SCALE);
                    h.set(row, num_types, c);
                    q.push(c);
                }
                types.push(m.types[i]);
                row += 1;
            }
        }
        Self {
            batch,
            x: Tensor::from_vec(&[n, 3], x),
            h,
            types: types.into(),
            charges: charges.then(|| Tensor::from_vec(&[n, 1], q)),
        }
    }

    /// Per-atom weights `1/(N_m·B)`.
    pub fn weights(&self) -> Rc<[T]> {
        let b = T::c(self.batch.num_molecules() as f64);
        self.batch.node_weights::<T>().iter().map(|&w| w / b).collect()
    }
}

#[derive(Clone, Debug)]
enum DecoderNet {
    Gnn {
        layers: Vec<GnnLayer>,
        coords: Linear,
        types: Linear,
        charge: Option<Linear>,
    },
    Egnn {
        layers: Vec<EgnnLayer>,
        types: Linear,
        charge: Option<Linear>,
    },
}

/// Graph nodes of an encoding.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, 9]` rotations in SO(3).
    pub r: Var,
    /// `R x`, the reconstruction target.
    pub xr: Var,
    /// `[N, 3 + d']` mean, coordinate block centred.
    pub mu: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub x: Var,
    pub logits: Var,
    pub charge: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub coord: Var,
    pub ce: Var,
    pub charge: Option<Var>,
    pub enc: Encoded,
    pub dec: Decoded,
}

/// Architecture; parameters live in a [`ParamStore`] under `rot.`, `enc.` and `dec.`.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AEConfig,
    pub num_types: usize,
    rot: Option<RotationNet>,
    enc: EgnnLayer,
    dec: DecoderNet,
}

impl Autoencoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &AEConfig, num_types: usize, rng: &mut impl Rng) -> Self {
        let f = num_types + usize::from(config.charges);
        let d = config.latent_dim;
        let rot = (config.rotation == RotationMode::Learned)
            .then(|| RotationNet::new(store, "rot", f, config.rotation_hidden, rng));
        let enc = EgnnLayer::new(
            store,
            "enc",
            LayerDims {
                inp: f,
                hidden: config.encoder_hidden,
                out: d,
                edge_attr: 0,
            },
            rng,
        );
        let hd = config.decoder_hidden;
        let layers = config.decoder_layers;
        let charge = |store: &mut ParamStore<T>, rng: &mut _| {
            config.charges.then(|| Linear::new(store, "dec.charge", hd, 1, rng))
        };
        let dec = match config.decoder {
            DecoderKind::Gnn => {
                let ls = (0..layers)
                    .map(|l| {
                        let dims = LayerDims {
                            inp: if l == 0 { 3 + d } else { hd },
                            hidden: hd,
                            out: hd,
                            edge_attr: 0,
                        };
                        GnnLayer::new(store, &format!("dec.gnn{l}"), dims, rng)
                    })
                    .collect();
                DecoderNet::Gnn {
                    layers: ls,
                    coords: Linear::new(store, "dec.coords", hd, 3, rng),
                    types: Linear::new(store, "dec.types", hd, num_types, rng),
                    charge: charge(store, rng),
                }
            }
            DecoderKind::Egnn => {
                let ls = (0..layers)
                    .map(|l| {
                        let dims = LayerDims {
                            inp: if l == 0 { d } else { hd },
                            hidden: hd,
                            out: hd,
                            edge_attr: 0,
                        };
                        EgnnLayer::new(store, &format!("dec.egnn{l}"), dims, rng)
                    })
                    .collect();
                DecoderNet::Egnn {
                    layers: ls,
                    types: Linear::new(store, "dec.types", hd, num_types, rng),
                    charge: charge(store, rng),
                }
            }
        };
        Self {
            config: config.clone(),
            num_types,
            rot,
            enc,
            dec,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.num_types + usize::from(self.config.charges)
    }

    /// `3 + d'`.
    pub fn latent_width(&self) -> usize {
        3 + self.config.latent_dim
    }

    /// Raw rotation-network output `[B, 9]`, or `None` in identity mode.
    pub fn rotation_raw<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &GraphBatch, x: Var, h: Var) -> Option<Var> {
        self.rot.as_ref().map(|r| r.forward(g, store, batch, x, h))
    }

    /// `R = SVD⁺(M)` (or a given `M`), `μ = E(R x, h)`, `z = μ + σ·noise`.
    pub fn encode_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ab: &AeBatch<T>,
        m_override: Option<Var>,
        noise: Option<&Tensor<T>>,
    ) -> Encoded {
        let batch = &ab.batch;
        let x = g.constant(ab.x.clone());
        let h = g.constant(ab.h.clone());
        let raw = m_override.or_else(|| self.rotation_raw(g, store, batch, x, h));
        let r = match raw {
            Some(m) => g.svd_project(m),
            None => {
                let b = batch.num_molecules();
                let eye = [1., 0., 0., 0., 1., 0., 0., 0., 1.].map(T::c);
                g.constant(Tensor::from_vec(&[b, 9], eye.repeat(b)))
            }
        };
        let rn = batch.broadcast(g, r);
        let xr = g.rotate_rows(rn, x);
        let (mx, mh) = self.enc.forward(g, store, batch, xr, h, None);
        let mx = batch.center(g, mx);
        let mu = g.concat_cols(&[mx, mh]);
        let sigma = T::c(self.config.sigma);
        let z = match noise {
            Some(e) if sigma > T::zero() => {
                let e = g.constant(e.scale(sigma));
                g.add(mu, e)
            }
            _ => mu,
        };
        Encoded { r, xr, mu, z }
    }

    pub fn decode_graph<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &GraphBatch, z: Var) -> Decoded {
        match &self.dec {
            DecoderNet::Gnn {
                layers,
                coords,
                types,
                charge,
            } => {
                let mut u = z;
                for l in layers {
                    u = l.forward(g, store, batch, u, None);
                }
                let x = coords.forward(g, store, u);
                Decoded {
                    x: batch.center(g, x),
                    logits: types.forward(g, store, u),
                    charge: charge.as_ref().map(|c| c.forward(g, store, u)),
                }
            }
            DecoderNet::Egnn { layers, types, charge } => {
                let w = g.value(z).cols();
                let mut x = g.slice_cols(z, 0, 3);
                let mut h = g.slice_cols(z, 3, w);
                for l in layers {
                    (x, h) = l.forward(g, store, batch, x, h, None);
                }
                Decoded {
                    x: batch.center(g, x),
                    logits: types.forward(g, store, h),
                    charge: charge.as_ref().map(|c| c.forward(g, store, h)),
                }
            }
        }
    }

    /// Coordinate squared error and type cross-entropy, each `Σ_i w_i·(·)`.
    pub fn recon_terms<T: Real>(
        g: &mut Graph<T>,
        x_hat: Var,
        target: Var,
        logits: Var,
        types: Rc<[usize]>,
        weights: Rc<[T]>,
    ) -> (Var, Var) {
        let coord = g.squared_error(x_hat, target, weights.clone());
        let ce = g.cross_entropy(logits, types, weights);
        (coord, ce)
    }

    /// Reconstruction loss against `R x`, per-atom then per-batch mean.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ab: &AeBatch<T>,
        noise: Option<&Tensor<T>>,
        m_override: Option<Var>,
    ) -> LossParts {
        let enc = self.encode_graph(g, store, ab, m_override, noise);
        let dec = self.decode_graph(g, store, &ab.batch, enc.z);
        let w = ab.weights();
        let (coord, ce) = Self::recon_terms(g, dec.x, enc.xr, dec.logits, ab.types.clone(), w.clone());
        let mut total = g.add(coord, ce);
        let charge = match (dec.charge, &ab.charges) {
            (Some(c), Some(q)) => {
                let qv = g.constant(q.clone());
                let term = g.squared_error(c, qv, w);
                total = g.add(total, term);
                Some(term)
            }
            _ => None,
        };
        LossParts {
            total,
            coord,
            ce,
            charge,
            enc,
            dec,
        }
    }

    /// Parameter-name prefix of the rotation network.
    pub fn rotation_prefix(&self) -> &'static str {
        "rot."
    }
}

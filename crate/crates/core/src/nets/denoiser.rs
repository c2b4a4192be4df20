use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::layers::{GnnLayer, LayerDims, Linear, Mlp};
use crate::nets::{GraphBatch, NetError, PaddedBatch};
use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::scalar::Real;

fn default_t_dim() -> usize {
    128
}

fn default_mlp_ratio() -> usize {
    4
}

/// Architecture of the noise-prediction network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserConfig {
    Gnn {
        hidden: usize,
        layers: usize,
    },
    Dit {
        width: usize,
        heads: usize,
        blocks: usize,
        #[serde(default = "default_t_dim")]
        t_dim: usize,
        #[serde(default = "default_mlp_ratio")]
        mlp_ratio: usize,
    },
}

impl DenoiserConfig {
    pub fn gnn_default() -> Self {
        Self::Gnn { hidden: 256, layers: 4 }
    }

    pub fn dit_small() -> Self {
        Self::Dit {
            width: 128,
            heads: 4,
            blocks: 6,
            t_dim: 128,
            mlp_ratio: 4,
        }
    }
}

/// Inputs of one denoiser evaluation on a compact batch.
#[derive(Clone, Debug)]
pub struct DenoiserInput<T> {
    /// Latent node states `[N, 3 + d']`.
    pub z: Tensor<T>,
    /// Step index per molecule.
    pub t: Vec<usize>,
    /// Standardised condition values per molecule, `[B, c]`.
    pub cond: Option<Tensor<T>>,
}

/// `[cos(t·f_k), sin(t·f_k)]` with `f_k = 10000^(−k/half)`.
pub fn timestep_embedding<T: Real>(t: &[T], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (r, &tv) in t.iter().enumerate() {
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            let a = tv.f64() * f;
            out.set(r, k, T::c(a.cos()));
            out.set(r, half + k, T::c(a.sin()));
        }
    }
    out
}

#[derive(Clone, Debug)]
struct DitBlock {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Dit {
    width: usize,
    heads: usize,
    t_dim: usize,
    embed: Linear,
    t_mlp: Mlp,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    head: Linear,
}

const LN_EPS: f64 = 1e-6;

impl Dit {
    fn modulate<T: Real>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
        let n = g.layer_norm(x, T::c(LN_EPS));
        let s1 = g.add_scalar(scale, T::one());
        let y = g.mul(n, s1);
        g.add(y, shift)
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        tokens: Var,
        t_scaled: &[T],
    ) -> Var {
        let w = self.width;
        let temb = g.constant(timestep_embedding(t_scaled, self.t_dim));
        let c = self.t_mlp.forward(g, store, temb);
        let c = g.silu(c);
        let mut x = self.embed.forward(g, store, tokens);
        for b in &self.blocks {
            let ada_m = b.ada.forward(g, store, c);
            let ada = batch.broadcast(g, ada_m);
            let part = |g: &mut Graph<T>, k: usize| g.slice_cols(ada, k * w, (k + 1) * w);
            let (sh1, sc1, g1) = (part(g, 0), part(g, 1), part(g, 2));
            let (sh2, sc2, g2) = (part(g, 3), part(g, 4), part(g, 5));

            let a = Self::modulate(g, x, sh1, sc1);
            let qkv = b.qkv.forward(g, store, a);
            let q = g.slice_cols(qkv, 0, w);
            let k = g.slice_cols(qkv, w, 2 * w);
            let v = g.slice_cols(qkv, 2 * w, 3 * w);
            let att = g.attention(q, k, v, self.heads, batch.segments());
            let att = b.proj.forward(g, store, att);
            let att = g.mul(g1, att);
            x = g.add(x, att);

            let a = Self::modulate(g, x, sh2, sc2);
            let hdn = b.fc1.forward(g, store, a);
            let hdn = g.silu(hdn);
            let hdn = b.fc2.forward(g, store, hdn);
            let hdn = g.mul(g2, hdn);
            x = g.add(x, hdn);
        }
        let ada_m = self.final_ada.forward(g, store, c);
        let ada = batch.broadcast(g, ada_m);
        let sh = g.slice_cols(ada, 0, w);
        let sc = g.slice_cols(ada, w, 2 * w);
        let x = Self::modulate(g, x, sh, sc);
        self.head.forward(g, store, x)
    }
}

#[derive(Clone, Debug)]
struct GnnDenoiser {
    layers: Vec<GnnLayer>,
    head: Linear,
}

#[derive(Clone, Debug)]
enum Arch {
    Gnn(GnnDenoiser),
    Dit(Dit),
}

/// Noise-prediction network `ε_φ(z_t, t[, c])`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: Arch,
    pub config: DenoiserConfig,
    pub latent_dim: usize,
    pub cond_dim: usize,
}

impl Denoiser {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &DenoiserConfig,
        latent_dim: usize,
        cond_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let inp = latent_dim + cond_dim;
        let arch = match *config {
            DenoiserConfig::Gnn { hidden, layers } => {
                let mut ls = Vec::with_capacity(layers);
                for l in 0..layers {
                    let dims = LayerDims {
                        inp: if l == 0 { inp + 1 } else { hidden },
                        hidden,
                        out: hidden,
                        edge_attr: 0,
                    };
                    ls.push(GnnLayer::new(store, &format!("{name}.gnn{l}"), dims, rng));
                }
                let last = if layers == 0 { inp + 1 } else { hidden };
                Arch::Gnn(GnnDenoiser {
                    layers: ls,
                    head: Linear::new(store, &format!("{name}.head"), last, latent_dim, rng),
                })
            }
            DenoiserConfig::Dit {
                width,
                heads,
                blocks,
                t_dim,
                mlp_ratio,
            } => {
                assert!(heads > 0 && width % heads == 0, "DiT width must be divisible by heads");
                let bs = (0..blocks)
                    .map(|l| {
                        let p = format!("{name}.block{l}");
                        DitBlock {
                            ada: Linear::zeroed(store, &format!("{p}.ada"), width, 6 * width),
                            qkv: Linear::new(store, &format!("{p}.qkv"), width, 3 * width, rng),
                            proj: Linear::new(store, &format!("{p}.proj"), width, width, rng),
                            fc1: Linear::new(store, &format!("{p}.fc1"), width, mlp_ratio * width, rng),
                            fc2: Linear::new(store, &format!("{p}.fc2"), mlp_ratio * width, width, rng),
                        }
                    })
                    .collect();
                Arch::Dit(Dit {
                    width,
                    heads,
                    t_dim,
                    embed: Linear::new(store, &format!("{name}.embed"), inp, width, rng),
                    t_mlp: Mlp::new(store, &format!("{name}.t_mlp"), (t_dim, width, width), false, rng),
                    blocks: bs,
                    final_ada: Linear::zeroed(store, &format!("{name}.final_ada"), width, 2 * width),
                    head: Linear::zeroed(store, &format!("{name}.head"), width, latent_dim),
                })
            }
        };
        Self {
            arch,
            config: config.clone(),
            latent_dim,
            cond_dim,
        }
    }

    /// Differentiable forward pass; `t` holds one step index per molecule.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        z: Var,
        t: &[usize],
        big_t: usize,
        cond: Option<&Tensor<T>>,
    ) -> Var {
        assert_eq!(t.len(), batch.num_molecules(), "one step index per molecule");
        let mut tokens = z;
        if self.cond_dim > 0 {
            let c = cond.expect("denoiser was built with conditioning");
            assert_eq!(c.shape(), &[batch.num_molecules(), self.cond_dim]);
            let cv = g.constant(c.clone());
            let cn = batch.broadcast(g, cv);
            tokens = g.concat_cols(&[tokens, cn]);
        }
        let frac: Vec<T> = t.iter().map(|&s| T::c(s as f64 / big_t.max(1) as f64)).collect();
        match &self.arch {
            Arch::Gnn(net) => {
                let col: Vec<T> = batch.node_mol().iter().map(|&m| frac[m]).collect();
                let tc = g.constant(Tensor::from_vec(&[col.len(), 1], col));
                let mut u = g.concat_cols(&[tokens, tc]);
                for l in &net.layers {
                    u = l.forward(g, store, batch, u, None);
                }
                net.head.forward(g, store, u)
            }
            Arch::Dit(net) => {
                // timestep on the conventional 0..1000 scale regardless of T
                let ts: Vec<T> = frac.iter().map(|&f| f * T::c(1000.0)).collect();
                net.forward(g, store, batch, tokens, &ts)
            }
        }
    }

    /// Inference on a compact batch.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        input: &DenoiserInput<T>,
        big_t: usize,
    ) -> Result<Tensor<T>, NetError> {
        if input.z.rows() != batch.num_nodes() || input.z.cols() != self.latent_dim {
            return Err(NetError::Shape(format!(
                "latent {:?} for {} nodes of width {}",
                input.z.shape(),
                batch.num_nodes(),
                self.latent_dim
            )));
        }
        if batch.sizes().contains(&0) {
            return Err(NetError::EmptyMolecule(batch.sizes().iter().position(|&n| n == 0).unwrap_or(0)));
        }
        if self.cond_dim > 0 && input.cond.is_none() {
            return Err(NetError::Shape("missing condition values".into()));
        }
        let mut g = Graph::new();
        let z = g.constant(input.z.clone());
        let out = self.forward(&mut g, store, batch, z, &input.t, big_t, input.cond.as_ref());
        Ok(g.value(out).clone())
    }

    /// Inference on a padded batch; padded rows of the result are zero.
    pub fn predict_padded<T: Real>(
        &self,
        store: &ParamStore<T>,
        padded: &PaddedBatch<T>,
        t: &[usize],
        big_t: usize,
        cond: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>, NetError> {
        let (z, batch) = padded.pack()?;
        let input = DenoiserInput {
            z,
            t: t.to_vec(),
            cond: cond.cloned(),
        };
        let out = self.predict(store, &batch, &input, big_t)?;
        Ok(padded.unpack(&out))
    }
}

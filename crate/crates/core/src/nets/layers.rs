use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nets::GraphBatch;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Real;

/// Affine map `x·W + b`, `W: [inp, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[inp, out], inp, rng);
        let b = store.add_uniform(format!("{name}.b"), &[1, out], inp, rng);
        Self { w, b, inp, out }
    }

    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), &[inp, out]);
        let b = store.add_zeros(format!("{name}.b"), &[1, out]);
        Self { w, b, inp, out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Two affine maps with a SiLU between them, optionally SiLU on the output too.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub out_act: bool,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        out_act: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (inp, hidden, out) = dims;
        Self {
            l1: Linear::new(store, &format!("{name}.0"), inp, hidden, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, out, rng),
            out_act,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let a = self.l1.forward(g, store, x);
        let a = g.silu(a);
        let y = self.l2.forward(g, store, a);
        if self.out_act {
            g.silu(y)
        } else {
            y
        }
    }
}

/// Two-layer MLP over the edge input `[u_i, u_j, d_ij², a_ij]`.
///
/// The first affine map is split into per-operand blocks so that the node
/// parts are computed once per node and then gathered onto the edges.
#[derive(Clone, Debug)]
pub struct EdgeMlp {
    pub w_i: ParamId,
    pub w_j: ParamId,
    pub w_d2: Option<ParamId>,
    pub w_attr: Option<ParamId>,
    pub b: ParamId,
    pub l2: Linear,
    pub out_act: bool,
}

/// Widths of an [`EdgeMlp`].
#[derive(Clone, Copy, Debug)]
pub struct EdgeDims {
    pub node: usize,
    pub hidden: usize,
    pub out: usize,
    pub distance: bool,
    pub attr: usize,
}

impl EdgeMlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: EdgeDims, out_act: bool, rng: &mut impl Rng) -> Self {
        let fan = 2 * d.node + usize::from(d.distance) + d.attr;
        let w_i = store.add_uniform(format!("{name}.0.wi"), &[d.node, d.hidden], fan, rng);
        let w_j = store.add_uniform(format!("{name}.0.wj"), &[d.node, d.hidden], fan, rng);
        let w_d2 = d
            .distance
            .then(|| store.add_uniform(format!("{name}.0.wd"), &[1, d.hidden], fan, rng));
        let w_attr = (d.attr > 0).then(|| store.add_uniform(format!("{name}.0.wa"), &[d.attr, d.hidden], fan, rng));
        let b = store.add_uniform(format!("{name}.0.b"), &[1, d.hidden], fan, rng);
        let l2 = Linear::new(store, &format!("{name}.1"), d.hidden, d.out, rng);
        Self {
            w_i,
            w_j,
            w_d2,
            w_attr,
            b,
            l2,
            out_act,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        node: Var,
        d2: Option<Var>,
        attr: Option<Var>,
    ) -> Var {
        let wi = g.param(store, self.w_i);
        let wj = g.param(store, self.w_j);
        let pi = g.matmul(node, wi);
        let pj = g.matmul(node, wj);
        let ei = g.gather_rows(pi, batch.src());
        let ej = g.gather_rows(pj, batch.dst());
        let mut pre = g.add(ei, ej);
        if let (Some(w), Some(d2)) = (self.w_d2, d2) {
            let w = g.param(store, w);
            let t = g.matmul(d2, w);
            pre = g.add(pre, t);
        }
        if let (Some(w), Some(a)) = (self.w_attr, attr) {
            let w = g.param(store, w);
            let t = g.matmul(a, w);
            pre = g.add(pre, t);
        }
        let b = g.param(store, self.b);
        let pre = g.add_row(pre, b);
        let a = g.silu(pre);
        let y = self.l2.forward(g, store, a);
        if self.out_act {
            g.silu(y)
        } else {
            y
        }
    }
}

/// Widths of a message-passing layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub inp: usize,
    pub hidden: usize,
    pub out: usize,
    #[serde(default)]
    pub edge_attr: usize,
}

/// Non-equivariant message passing on concatenated node states:
/// `m_ij = φ_e(u_i, u_j)`, `u_i' = φ_u(u_i, Σ_j sigmoid(φ_inf(m_ij))·m_ij)`.
#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub phi_e: EdgeMlp,
    pub phi_inf: Mlp,
    pub phi_u: Mlp,
    pub dims: LayerDims,
}

impl GnnLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: LayerDims, rng: &mut impl Rng) -> Self {
        let h = dims.hidden;
        let edge = EdgeDims {
            node: dims.inp,
            hidden: h,
            out: h,
            distance: false,
            attr: dims.edge_attr,
        };
        Self {
            phi_e: EdgeMlp::new(store, &format!("{name}.phi_e"), edge, true, rng),
            phi_inf: Mlp::new(store, &format!("{name}.phi_inf"), (h, h, 1), false, rng),
            phi_u: Mlp::new(store, &format!("{name}.phi_u"), (dims.inp + h, h, dims.out), false, rng),
            dims,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        u: Var,
        attr: Option<Var>,
    ) -> Var {
        let m = self.phi_e.forward(g, store, batch, u, None, attr);
        let agg = weighted_aggregate(g, store, batch, &self.phi_inf, m);
        let cat = g.concat_cols(&[u, agg]);
        self.phi_u.forward(g, store, cat)
    }
}

fn weighted_aggregate<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &GraphBatch,
    phi_inf: &Mlp,
    m: Var,
) -> Var {
    let logit = phi_inf.forward(g, store, m);
    let e = g.sigmoid(logit);
    let weighted = g.mul_col(m, e);
    g.segment_sum(weighted, batch.src(), batch.num_nodes())
}

/// E(n)-equivariant layer: rotation-equivariant coordinate update and
/// invariant feature update.
#[derive(Clone, Debug)]
pub struct EgnnLayer {
    pub phi_e: EdgeMlp,
    pub phi_inf: Mlp,
    pub phi_h: Mlp,
    pub phi_x: EdgeMlp,
    pub dims: LayerDims,
}

impl EgnnLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dims: LayerDims, rng: &mut impl Rng) -> Self {
        let h = dims.hidden;
        let edge = |out| EdgeDims {
            node: dims.inp,
            hidden: h,
            out,
            distance: true,
            attr: dims.edge_attr,
        };
        Self {
            phi_e: EdgeMlp::new(store, &format!("{name}.phi_e"), edge(h), true, rng),
            phi_inf: Mlp::new(store, &format!("{name}.phi_inf"), (h, h, 1), false, rng),
            phi_h: Mlp::new(store, &format!("{name}.phi_h"), (dims.inp + h, h, dims.out), false, rng),
            phi_x: EdgeMlp::new(store, &format!("{name}.phi_x"), edge(1), false, rng),
            dims,
        }
    }

    /// Returns `(x', h')`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &GraphBatch,
        x: Var,
        h: Var,
        attr: Option<Var>,
    ) -> (Var, Var) {
        let xi = g.gather_rows(x, batch.src());
        let xj = g.gather_rows(x, batch.dst());
        let diff = g.sub(xi, xj);
        let sq = g.mul(diff, diff);
        let d2 = g.row_sum(sq);

        let m = self.phi_e.forward(g, store, batch, h, Some(d2), attr);
        let agg = weighted_aggregate(g, store, batch, &self.phi_inf, m);
        let cat = g.concat_cols(&[h, agg]);
        let h_new = self.phi_h.forward(g, store, cat);

        let d = g.sqrt(d2);
        let d1 = g.add_scalar(d, T::one());
        let inv = g.recip(d1);
        let px = self.phi_x.forward(g, store, batch, h, Some(d2), attr);
        let coef = g.mul(inv, px);
        let upd = g.mul_col(diff, coef);
        let shift = g.segment_sum(upd, batch.src(), batch.num_nodes());
        let x_new = g.add(x, shift);
        (x_new, h_new)
    }
}

/// Two GNN layers on `[x, h]`, mean pooling and a two-layer head giving a
/// raw `[B, 9]` matrix per molecule (row-major 3×3).
#[derive(Clone, Debug)]
pub struct RotationNet {
    pub l1: GnnLayer,
    pub l2: GnnLayer,
    pub head: Mlp,
}

impl RotationNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let d1 = LayerDims {
            inp: 3 + features,
            hidden,
            out: hidden,
            edge_attr: 0,
        };
        let d2 = LayerDims { inp: hidden, ..d1 };
        Self {
            l1: GnnLayer::new(store, &format!("{name}.gnn0"), d1, rng),
            l2: GnnLayer::new(store, &format!("{name}.gnn1"), d2, rng),
            head: Mlp::new(store, &format!("{name}.head"), (hidden, hidden, 9), false, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &GraphBatch, x: Var, h: Var) -> Var {
        let u = g.concat_cols(&[x, h]);
        let u = self.l1.forward(g, store, batch, u, None);
        let u = self.l2.forward(g, store, batch, u, None);
        let pooled = batch.mean_pool(g, u);
        self.head.forward(g, store, pooled)
    }

    /// Zero the final affine map, so that `M ≡ 0`.
    pub fn zero_head<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.head.l2.w, self.head.l2.b] {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }
}

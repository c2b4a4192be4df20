use std::rc::Rc;

use crate::numcore::{Graph, Tensor, Var};
use crate::nets::NetError;
use crate::scalar::Real;

/// Compact layout of several molecules: nodes of molecule `m` occupy rows
/// `offsets[m]..offsets[m] + sizes[m]`, and every ordered pair `(i, j)`,
/// `i ≠ j`, inside one molecule is an edge.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    node_mol: Rc<[usize]>,
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    segments: Rc<[(usize, usize)]>,
}

impl GraphBatch {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut node_mol = Vec::new();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut off = 0;
        for (m, &n) in sizes.iter().enumerate() {
            offsets.push(off);
            node_mol.extend(std::iter::repeat_n(m, n));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        src.push(off + i);
                        dst.push(off + j);
                    }
                }
            }
            off += n;
        }
        let segments: Vec<(usize, usize)> = offsets.iter().copied().zip(sizes.iter().copied()).collect();
        Self {
            sizes: sizes.to_vec(),
            offsets,
            node_mol: node_mol.into(),
            src: src.into(),
            dst: dst.into(),
            segments: segments.into(),
        }
    }

    pub fn num_molecules(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_mol.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn node_mol(&self) -> Rc<[usize]> {
        self.node_mol.clone()
    }

    /// Receiving node `i` of every edge.
    pub fn src(&self) -> Rc<[usize]> {
        self.src.clone()
    }

    /// Sending node `j` of every edge.
    pub fn dst(&self) -> Rc<[usize]> {
        self.dst.clone()
    }

    pub fn segments(&self) -> Rc<[(usize, usize)]> {
        self.segments.clone()
    }

    /// `1/N_m` for every molecule.
    pub fn inv_sizes<T: Real>(&self) -> Rc<[T]> {
        self.sizes.iter().map(|&n| T::one() / T::c(n.max(1) as f64)).collect()
    }

    /// `1/N_m` repeated for every node of molecule `m`.
    pub fn node_weights<T: Real>(&self) -> Rc<[T]> {
        self.node_mol
            .iter()
            .map(|&m| T::one() / T::c(self.sizes[m] as f64))
            .collect()
    }

    /// Mean over the nodes of each molecule: `[N, F] → [B, F]`.
    pub fn mean_pool<T: Real>(&self, g: &mut Graph<T>, u: Var) -> Var {
        let s = g.segment_sum(u, self.node_mol(), self.num_molecules());
        g.scale_rows(s, self.inv_sizes())
    }

    /// Broadcast per-molecule rows to their nodes: `[B, F] → [N, F]`.
    pub fn broadcast<T: Real>(&self, g: &mut Graph<T>, per_mol: Var) -> Var {
        g.gather_rows(per_mol, self.node_mol())
    }

    /// Subtract each molecule's centroid from the rows of `x`.
    pub fn center<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mean = self.mean_pool(g, x);
        let per_node = self.broadcast(g, mean);
        g.sub(x, per_node)
    }

    /// Centre each molecule of a plain tensor.
    pub fn center_tensor<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        let w = x.cols();
        for (&off, &n) in self.offsets.iter().zip(&self.sizes) {
            for k in 0..w {
                let mean = (off..off + n).map(|i| x.at(i, k)).sum::<T>() / T::c(n.max(1) as f64);
                for i in off..off + n {
                    out.set(i, k, x.at(i, k) - mean);
                }
            }
        }
        out
    }

    /// Largest absolute per-molecule column mean over the first `cols` columns.
    pub fn max_abs_cog<T: Real>(&self, x: &Tensor<T>, cols: usize) -> T {
        let mut worst = T::zero();
        for (&off, &n) in self.offsets.iter().zip(&self.sizes) {
            for k in 0..cols {
                let mean = (off..off + n).map(|i| x.at(i, k)).sum::<T>() / T::c(n.max(1) as f64);
                worst = worst.max(mean.abs());
            }
        }
        worst
    }
}

/// Fixed-width layout: molecule `m` owns rows `m·max_n .. (m+1)·max_n`,
/// `mask` marks the real atoms, padded rows hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch<T> {
    pub data: Tensor<T>,
    pub mask: Vec<bool>,
    pub max_n: usize,
}

impl<T: Real> PaddedBatch<T> {
    pub fn num_molecules(&self) -> usize {
        self.mask.len() / self.max_n.max(1)
    }

    /// Real rows in molecule order plus the batch layout. Rejects molecules without real atoms.
    pub fn pack(&self) -> Result<(Tensor<T>, GraphBatch), NetError> {
        if self.max_n == 0 || self.mask.len() % self.max_n != 0 || self.data.rows() != self.mask.len() {
            return Err(NetError::Shape(format!(
                "padded batch of {} rows with mask {} and width {}",
                self.data.rows(),
                self.mask.len(),
                self.max_n
            )));
        }
        let w = self.data.cols();
        let mut sizes = Vec::new();
        let mut rows = Vec::new();
        for (m, chunk) in self.mask.chunks(self.max_n).enumerate() {
            let n = chunk.iter().filter(|&&b| b).count();
            if n == 0 {
                return Err(NetError::EmptyMolecule(m));
            }
            sizes.push(n);
            for (i, &real) in chunk.iter().enumerate() {
                if real {
                    rows.extend_from_slice(self.data.row(m * self.max_n + i));
                }
            }
        }
        let n = rows.len() / w.max(1);
        Ok((Tensor::from_vec(&[n, w], rows), GraphBatch::new(&sizes)))
    }

    /// Inverse of [`pack`](Self::pack): scatter compact rows back, zeros elsewhere.
    pub fn unpack(&self, compact: &Tensor<T>) -> Tensor<T> {
        let w = compact.cols();
        let mut out = Tensor::zeros(&[self.mask.len(), w]);
        let mut r = 0;
        for (i, &real) in self.mask.iter().enumerate() {
            if real {
                out.row_mut(i).copy_from_slice(compact.row(r));
                r += 1;
            }
        }
        out
    }
}

//! Reverse-mode autodiff on a construction-ordered tape.
//!
//! Every operation evaluates eagerly and appends one node to the tape; node
//! ids therefore form a topological order, and `backward` is a single reverse
//! sweep. The op set is exactly what the model needs: dense linear algebra,
//! a few pointwise maps, and three fused sequence ops (transitions, decayed
//! window statistics, masked cross-entropy) whose adjoints are hand-derived
//! and validated against finite differences in the test suite.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-8;

/// Which decayed-average window a statistics node computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// All positions up to the current one.
    Complete,
    /// The trailing `w` positions, with absent slots still counted in the
    /// normalizer.
    Short(usize),
}

/// Targets and per-position banned item lists for the fused masked
/// cross-entropy. Ban lists are stored CSR-style: row `r` owns
/// `items[offsets[r]..offsets[r + 1]]`. Target 0 marks a position that does
/// not contribute to the loss.
pub struct CrossEntropyMeta {
    pub vocab: usize,
    pub targets: Vec<u32>,
    pub ban_offsets: Vec<usize>,
    pub ban_items: Vec<u32>,
}

enum Op {
    Leaf { param: Option<ParamId> },
    /// lhs viewed as (rows, k) times a 2-d rhs (k, n).
    Matmul { lhs: usize, rhs: usize },
    /// Batched 3-d by 3-d matrix product.
    Bmm { lhs: usize, rhs: usize },
    /// Elementwise; rhs may be a trailing-shape broadcast of lhs.
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    ConcatLast { inputs: Vec<usize> },
    GatherRows { table: usize, ids: Rc<Vec<u32>> },
    /// Softmax over the trailing axis; masking happened via additive -inf
    /// before exponentiation, so the saved output is all backward needs.
    Softmax { input: usize },
    LayerNorm { input: usize, gain: usize, bias: usize, stats: Vec<f64> },
    Gelu { input: usize },
    Dropout { input: usize, mask: Rc<Vec<f64>> },
    TransposeLast { input: usize },
    SumAll { input: usize },
    MeanAll { input: usize },
    ClampMin { input: usize, floor: f64 },
    /// Decayed mean over real positions of a (batch, len, dim) sequence.
    DecayedMean { input: usize, gamma: f64, window: Window, mask: Rc<Vec<bool>> },
    /// First differences along the sequence axis, zeroed at pads and at each
    /// row's first real position.
    Transitions { input: usize, keep: Rc<Vec<bool>> },
    /// Mean negative log-likelihood over valid positions with per-position
    /// candidate bans. Saves each valid row's log-sum-exp for backward.
    CrossEntropy { logits: usize, meta: Rc<CrossEntropyMeta>, lse: Vec<f64>, valid: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Records one forward computation. Create with [`new_tape`], build the graph
/// through [`Var`] methods, then call [`Tape::backward`] on a scalar root.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

pub fn new_tape() -> Rc<Tape> {
    Rc::new(Tape { nodes: RefCell::new(Vec::new()) })
}

/// Handle to one tape node. Cloning is cheap and refers to the same node.
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
}

impl Tape {
    fn push(self: &Rc<Self>, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad: None, needs_grad, op });
        Var { tape: Rc::clone(self), id: nodes.len() - 1 }
    }

    pub fn leaf(self: &Rc<Self>, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, needs_grad)
    }

    pub fn constant(self: &Rc<Self>, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; bind each parameter once per tape
    /// and reuse the handle so tying (e.g. shared embedding tables) is literal
    /// node sharing.
    pub fn param(self: &Rc<Self>, store: &ParamStore, id: ParamId) -> Var {
        self.push(
            store.value(id).clone(),
            Op::Leaf { param: Some(id) },
            store.trainable(id),
        )
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Seeds the root with ones and sweeps the tape in reverse construction
    /// order. The root must be a scalar produced by an operation; repeated
    /// calls accumulate into stored gradients.
    pub fn backward(&self, root: &Var) {
        {
            let nodes = self.nodes.borrow();
            let node = &nodes[root.id];
            assert_eq!(node.value.numel(), 1, "backward: root must be scalar");
            assert!(
                !matches!(node.op, Op::Leaf { .. }),
                "backward: root is a leaf; nothing to differentiate"
            );
        }
        let seed = Tensor::new(root.shape(), vec![1.0]);
        self.backward_seeded(root, &seed);
    }

    /// Backward from an arbitrary root with an explicit adjoint seed of the
    /// same shape.
    pub fn backward_seeded(&self, root: &Var, seed: &Tensor) {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        assert!(root.id < n, "backward: root not on this tape");
        assert_eq!(
            seed.shape(),
            nodes[root.id].value.shape(),
            "backward: seed shape {:?} does not match root {:?}",
            seed.shape(),
            nodes[root.id].value.shape()
        );
        assert!(nodes[root.id].needs_grad, "backward: root does not require gradients");

        let mut pending: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut finished: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        pending[root.id] = Some(seed.data().to_vec());

        for id in (0..=root.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            propagate(&nodes, id, &g, &mut pending);
            finished[id] = Some(g);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, maybe_g) in finished.into_iter().enumerate() {
            let Some(g) = maybe_g else { continue };
            let slot = &mut nodes[id].grad;
            match slot {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }
    }

    /// Adds every bound parameter's accumulated adjoint into the store. Call
    /// once per tape after backward.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    store.add_grad(id, g);
                }
            }
        }
    }
}

/// Adds `g` into `pending[target]`, allocating on first touch.
fn deposit(pending: &mut [Option<Vec<f64>>], target: usize, len: usize) -> &mut Vec<f64> {
    pending[target].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
    let wants = |p: usize| nodes[p].needs_grad;
    let val = |p: usize| &nodes[p].value;

    match &nodes[id].op {
        Op::Leaf { .. } => {}

        Op::Matmul { lhs, rhs } => {
            let (l, r) = (val(*lhs), val(*rhs));
            let k = r.shape()[0];
            let n = r.shape()[1];
            let rows = l.numel() / k;
            if wants(*lhs) {
                let d = deposit(pending, *lhs, l.numel());
                kernels::matmul_nt_acc(g, r.data(), d, rows, n, k);
            }
            if wants(*rhs) {
                let d = deposit(pending, *rhs, r.numel());
                kernels::matmul_tn_acc(l.data(), g, d, rows, k, n);
            }
        }

        Op::Bmm { lhs, rhs } => {
            let (l, r) = (val(*lhs), val(*rhs));
            let (b, m, k) = (l.shape()[0], l.shape()[1], l.shape()[2]);
            let n = r.shape()[2];
            if wants(*lhs) {
                let d = deposit(pending, *lhs, l.numel());
                for i in 0..b {
                    kernels::matmul_nt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &r.data()[i * k * n..(i + 1) * k * n],
                        &mut d[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if wants(*rhs) {
                let d = deposit(pending, *rhs, r.numel());
                for i in 0..b {
                    kernels::matmul_tn_acc(
                        &l.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut d[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }

        Op::Add { lhs, rhs } => {
            if wants(*lhs) {
                let d = deposit(pending, *lhs, g.len());
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if wants(*rhs) {
                let rn = val(*rhs).numel();
                let d = deposit(pending, *rhs, rn);
                for chunk in g.chunks_exact(rn) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
            }
        }

        Op::Sub { lhs, rhs } => {
            if wants(*lhs) {
                let d = deposit(pending, *lhs, g.len());
                for (a, b) in d.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if wants(*rhs) {
                let rn = val(*rhs).numel();
                let d = deposit(pending, *rhs, rn);
                for chunk in g.chunks_exact(rn) {
                    for (a, b) in d.iter_mut().zip(chunk) {
                        *a -= b;
                    }
                }
            }
        }

        Op::Mul { lhs, rhs } => {
            let rn = val(*rhs).numel();
            if wants(*lhs) {
                let rv = val(*rhs).data();
                let d = deposit(pending, *lhs, g.len());
                for (i, (a, b)) in d.iter_mut().zip(g).enumerate() {
                    *a += b * rv[i % rn];
                }
            }
            if wants(*rhs) {
                let lv = val(*lhs).data();
                let d = deposit(pending, *rhs, rn);
                for (chunk_idx, chunk) in g.chunks_exact(rn).enumerate() {
                    let base = chunk_idx * rn;
                    for (j, (a, b)) in d.iter_mut().zip(chunk).enumerate() {
                        *a += b * lv[base + j];
                    }
                }
            }
        }

        Op::Scale { input, factor } => {
            if wants(*input) {
                let d = deposit(pending, *input, g.len());
                for (a, b) in d.iter_mut().zip(g) {
                    *a += factor * b;
                }
            }
        }

        Op::ConcatLast { inputs } => {
            let widths: Vec<usize> = inputs.iter().map(|&p| val(p).last_dim()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&p, &w) in inputs.iter().zip(&widths) {
                if wants(p) {
                    let d = deposit(pending, p, val(p).numel());
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        for (a, b) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                offset += w;
            }
        }

        Op::GatherRows { table, ids } => {
            if wants(*table) {
                let dim = val(*table).last_dim();
                let d = deposit(pending, *table, val(*table).numel());
                for (row, &id) in ids.iter().enumerate() {
                    let dst = id as usize * dim;
                    for (a, b) in d[dst..dst + dim].iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                        *a += b;
                    }
                }
            }
        }

        Op::Softmax { input } => {
            if wants(*input) {
                let p = nodes[id].value.data();
                let dim = nodes[id].value.last_dim();
                let d = deposit(pending, *input, g.len());
                for r in 0..g.len() / dim {
                    let span = r * dim..(r + 1) * dim;
                    let (pr, gr) = (&p[span.clone()], &g[span.clone()]);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (a, (pv, gv)) in d[span].iter_mut().zip(pr.iter().zip(gr)) {
                        *a += pv * (gv - dot);
                    }
                }
            }
        }

        Op::LayerNorm { input, gain, bias, stats } => {
            let x = val(*input).data();
            let gv = val(*gain).data();
            let dim = val(*gain).numel();
            let rows = x.len() / dim;
            let mut dx = if wants(*input) { Some(vec![0.0; x.len()]) } else { None };
            let mut dgain = if wants(*gain) { Some(vec![0.0; dim]) } else { None };
            let mut dbias = if wants(*bias) { Some(vec![0.0; dim]) } else { None };
            for r in 0..rows {
                let mean = stats[2 * r];
                let inv_std = stats[2 * r + 1];
                let span = r * dim..(r + 1) * dim;
                let xr = &x[span.clone()];
                let gr = &g[span.clone()];
                if dgain.is_some() || dbias.is_some() {
                    for j in 0..dim {
                        let xhat = (xr[j] - mean) * inv_std;
                        if let Some(dg) = &mut dgain {
                            dg[j] += gr[j] * xhat;
                        }
                        if let Some(db) = &mut dbias {
                            db[j] += gr[j];
                        }
                    }
                }
                if let Some(dx) = &mut dx {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..dim {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gv[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 /= dim as f64;
                    m2 /= dim as f64;
                    for j in 0..dim {
                        let xhat = (xr[j] - mean) * inv_std;
                        let dxhat = gr[j] * gv[j];
                        dx[r * dim + j] += inv_std * (dxhat - m1 - xhat * m2);
                    }
                }
            }
            if let Some(dx) = dx {
                let d = deposit(pending, *input, x.len());
                for (a, b) in d.iter_mut().zip(&dx) {
                    *a += b;
                }
            }
            if let Some(dg) = dgain {
                let d = deposit(pending, *gain, dim);
                for (a, b) in d.iter_mut().zip(&dg) {
                    *a += b;
                }
            }
            if let Some(db) = dbias {
                let d = deposit(pending, *bias, dim);
                for (a, b) in d.iter_mut().zip(&db) {
                    *a += b;
                }
            }
        }

        Op::Gelu { input } => {
            if wants(*input) {
                let x = val(*input).data();
                let d = deposit(pending, *input, g.len());
                for (i, (a, b)) in d.iter_mut().zip(g).enumerate() {
                    *a += b * gelu_prime(x[i]);
                }
            }
        }

        Op::Dropout { input, mask } => {
            if wants(*input) {
                let d = deposit(pending, *input, g.len());
                for (i, (a, b)) in d.iter_mut().zip(g).enumerate() {
                    *a += b * mask[i];
                }
            }
        }

        Op::TransposeLast { input } => {
            if wants(*input) {
                let shape = nodes[id].value.shape();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = g.len() / (r * c);
                let mut back = vec![0.0; g.len()];
                kernels::transpose_batch(g, &mut back, batch, r, c);
                let d = deposit(pending, *input, g.len());
                for (a, b) in d.iter_mut().zip(&back) {
                    *a += b;
                }
            }
        }

        Op::SumAll { input } => {
            if wants(*input) {
                let d = deposit(pending, *input, val(*input).numel());
                for a in d.iter_mut() {
                    *a += g[0];
                }
            }
        }

        Op::MeanAll { input } => {
            if wants(*input) {
                let n = val(*input).numel();
                let d = deposit(pending, *input, n);
                let per = g[0] / n as f64;
                for a in d.iter_mut() {
                    *a += per;
                }
            }
        }

        Op::ClampMin { input, floor } => {
            if wants(*input) {
                let x = val(*input).data();
                let d = deposit(pending, *input, g.len());
                // Subgradient choice: coordinates sitting exactly on the
                // floor are treated as clamped and pass nothing.
                for (i, (a, b)) in d.iter_mut().zip(g).enumerate() {
                    if x[i] > *floor {
                        *a += b;
                    }
                }
            }
        }

        Op::DecayedMean { input, gamma, window, mask } => {
            if wants(*input) {
                let shape = val(*input).shape();
                let (b, l, dim) = (shape[0], shape[1], shape[2]);
                let d = deposit(pending, *input, b * l * dim);
                match window {
                    Window::Complete => {
                        // dz_j = m_j * sum_{i >= j} gamma^(i-j) * [m_i] * g_i / C_i,
                        // accumulated as a reverse scan per feature.
                        let mut trail = vec![0.0; dim];
                        for row in 0..b {
                            trail.iter_mut().for_each(|t| *t = 0.0);
                            // Recompute the normalizer forward, then walk back.
                            let mut c = vec![0.0; l];
                            let mut acc = 0.0;
                            for i in 0..l {
                                acc = gamma * acc + if mask[row * l + i] { 1.0 } else { 0.0 };
                                c[i] = acc;
                            }
                            for i in (0..l).rev() {
                                let base = (row * l + i) * dim;
                                let emit = mask[row * l + i] && c[i] > 0.0;
                                for f in 0..dim {
                                    trail[f] = gamma * trail[f]
                                        + if emit { g[base + f] / c[i] } else { 0.0 };
                                    if mask[row * l + i] {
                                        d[base + f] += trail[f];
                                    }
                                }
                            }
                        }
                    }
                    Window::Short(w) => {
                        let c_full: f64 = (0..*w).map(|k| gamma.powi(k as i32)).sum();
                        for row in 0..b {
                            for j in 0..l {
                                if !mask[row * l + j] {
                                    continue;
                                }
                                let base_j = (row * l + j) * dim;
                                let top = (j + w).min(l);
                                for i in j..top {
                                    if !mask[row * l + i] {
                                        continue;
                                    }
                                    let coef = gamma.powi((i - j) as i32) / c_full;
                                    let base_i = (row * l + i) * dim;
                                    for f in 0..dim {
                                        d[base_j + f] += coef * g[base_i + f];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        Op::Transitions { input, keep } => {
            if wants(*input) {
                let shape = val(*input).shape();
                let (b, l, dim) = (shape[0], shape[1], shape[2]);
                let d = deposit(pending, *input, b * l * dim);
                for row in 0..b {
                    for i in 0..l {
                        let here = (row * l + i) * dim;
                        if keep[row * l + i] {
                            for f in 0..dim {
                                d[here + f] += g[here + f];
                            }
                        }
                        if i + 1 < l && keep[row * l + i + 1] {
                            let next = (row * l + i + 1) * dim;
                            for f in 0..dim {
                                d[here + f] -= g[next + f];
                            }
                        }
                    }
                }
            }
        }

        Op::CrossEntropy { logits, meta, lse, valid } => {
            if wants(*logits) {
                let s = val(*logits).data();
                let v = meta.vocab;
                let rows = s.len() / v;
                let scale = g[0] / *valid as f64;
                let d = deposit(pending, *logits, s.len());
                let mut banned = vec![false; v];
                for r in 0..rows {
                    let t = meta.targets[r];
                    if t == 0 {
                        continue;
                    }
                    let bans = &meta.ban_items[meta.ban_offsets[r]..meta.ban_offsets[r + 1]];
                    for &bi in bans {
                        if bi != t {
                            banned[bi as usize] = true;
                        }
                    }
                    let row = &s[r * v..(r + 1) * v];
                    let dr = &mut d[r * v..(r + 1) * v];
                    for c in 1..v {
                        if banned[c] {
                            continue;
                        }
                        let p = (row[c] - lse[r]).exp();
                        let indicator = if c as u32 == t { 1.0 } else { 0.0 };
                        dr[c] += (p - indicator) * scale;
                    }
                    for &bi in bans {
                        banned[bi as usize] = false;
                    }
                }
            }
        }
    }
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_A * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_C * x * x)
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Reads the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    fn same_tape(&self, other: &Var) {
        assert!(Rc::ptr_eq(&self.tape, &other.tape), "vars belong to different tapes");
    }

    fn binary(&self, other: &Var, name: &str) -> (Tensor, Tensor, bool) {
        self.same_tape(other);
        let nodes = self.tape.nodes.borrow();
        let l = nodes[self.id].value.clone();
        let r = nodes[other.id].value.clone();
        let lw = nodes[self.id].needs_grad;
        let rw = nodes[other.id].needs_grad;
        let broadcast_ok = l.shape() == r.shape()
            || (r.numel() > 0
                && l.shape().len() >= r.shape().len()
                && l.shape()[l.shape().len() - r.shape().len()..] == *r.shape());
        assert!(
            broadcast_ok,
            "{name}: shapes {:?} and {:?} are not elementwise/suffix compatible",
            l.shape(),
            r.shape()
        );
        (l, r, lw || rw)
    }

    pub fn add(&self, other: &Var) -> Var {
        let (l, r, needs) = self.binary(other, "add");
        let rn = r.numel();
        let mut out = l.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += r.data()[i % rn];
        }
        self.tape.push(
            Tensor::new(l.shape().to_vec(), out),
            Op::Add { lhs: self.id, rhs: other.id },
            needs,
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (l, r, needs) = self.binary(other, "sub");
        let rn = r.numel();
        let mut out = l.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o -= r.data()[i % rn];
        }
        self.tape.push(
            Tensor::new(l.shape().to_vec(), out),
            Op::Sub { lhs: self.id, rhs: other.id },
            needs,
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (l, r, needs) = self.binary(other, "mul");
        let rn = r.numel();
        let mut out = l.data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o *= r.data()[i % rn];
        }
        self.tape.push(
            Tensor::new(l.shape().to_vec(), out),
            Op::Mul { lhs: self.id, rhs: other.id },
            needs,
        )
    }

    pub fn scale(&self, factor: f64) -> Var {
        assert!(factor.is_finite(), "scale: factor must be finite");
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|x| x * factor).collect();
            (Tensor::new(v.shape().to_vec(), data), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::Scale { input: self.id, factor }, needs)
    }

    /// Matrix product with a 2-d rhs; self is treated as (.., k).
    pub fn matmul(&self, rhs: &Var) -> Var {
        self.same_tape(rhs);
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id].value;
            let r = &nodes[rhs.id].value;
            assert_eq!(r.ndim(), 2, "matmul: rhs must be 2-d, got {:?}", r.shape());
            assert!(l.ndim() >= 2, "matmul: lhs must have rank >= 2, got {:?}", l.shape());
            let k = r.shape()[0];
            let n = r.shape()[1];
            assert_eq!(
                l.last_dim(),
                k,
                "matmul: lhs {:?} does not match rhs {:?}",
                l.shape(),
                r.shape()
            );
            let rows = l.numel() / k;
            let mut out = vec![0.0; rows * n];
            kernels::matmul_acc(l.data(), r.data(), &mut out, rows, k, n);
            let mut shape = l.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            (
                Tensor::new(shape, out),
                nodes[self.id].needs_grad || nodes[rhs.id].needs_grad,
            )
        };
        self.tape.push(value, Op::Matmul { lhs: self.id, rhs: rhs.id }, needs)
    }

    /// Batched matrix product of two rank-3 tensors.
    pub fn bmm(&self, rhs: &Var) -> Var {
        self.same_tape(rhs);
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id].value;
            let r = &nodes[rhs.id].value;
            assert!(
                l.ndim() == 3 && r.ndim() == 3,
                "bmm: wants rank-3 operands, got {:?} and {:?}",
                l.shape(),
                r.shape()
            );
            let (b, m, k) = (l.shape()[0], l.shape()[1], l.shape()[2]);
            assert_eq!(r.shape()[0], b, "bmm: batch mismatch {:?} vs {:?}", l.shape(), r.shape());
            assert_eq!(r.shape()[1], k, "bmm: inner dim mismatch {:?} vs {:?}", l.shape(), r.shape());
            let n = r.shape()[2];
            let mut out = vec![0.0; b * m * n];
            for i in 0..b {
                kernels::matmul_acc(
                    &l.data()[i * m * k..(i + 1) * m * k],
                    &r.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            (
                Tensor::new(vec![b, m, n], out),
                nodes[self.id].needs_grad || nodes[rhs.id].needs_grad,
            )
        };
        self.tape.push(value, Op::Bmm { lhs: self.id, rhs: rhs.id }, needs)
    }

    /// Row lookup into a 2-d table; output shape is `prefix ++ [dim]`.
    pub fn gather_rows(&self, ids: Rc<Vec<u32>>, prefix: &[usize]) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            assert_eq!(t.ndim(), 2, "gather_rows: table must be 2-d");
            let rows = t.shape()[0];
            let dim = t.shape()[1];
            assert_eq!(
                ids.len(),
                prefix.iter().product::<usize>(),
                "gather_rows: {} ids do not fill shape {:?}",
                ids.len(),
                prefix
            );
            let mut out = Vec::with_capacity(ids.len() * dim);
            for &id in ids.iter() {
                assert!(
                    (id as usize) < rows,
                    "gather_rows: id {} out of range for table with {} rows",
                    id,
                    rows
                );
                out.extend_from_slice(&t.data()[id as usize * dim..(id as usize + 1) * dim]);
            }
            let mut shape = prefix.to_vec();
            shape.push(dim);
            (Tensor::new(shape, out), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::GatherRows { table: self.id, ids }, needs)
    }

    /// Softmax over the trailing axis after adding `mask` (0 or -inf entries).
    /// Panics if any row is fully masked.
    pub fn softmax_masked(&self, mask: Option<&Tensor>) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if let Some(m) = mask {
                assert_eq!(m.shape(), v.shape(), "softmax: mask shape mismatch");
            }
            let dim = v.last_dim();
            assert!(dim > 0, "softmax: empty trailing axis");
            let mut out = vec![0.0; v.numel()];
            for r in 0..v.rows() {
                let span = r * dim..(r + 1) * dim;
                let logits = &v.data()[span.clone()];
                let mut best = f64::NEG_INFINITY;
                for j in 0..dim {
                    let x = logits[j] + mask.map_or(0.0, |m| m.data()[r * dim + j]);
                    if x > best {
                        best = x;
                    }
                }
                assert!(
                    best.is_finite(),
                    "softmax: row {} is fully masked or non-finite",
                    r
                );
                let mut sum = 0.0;
                let o = &mut out[span];
                for j in 0..dim {
                    let x = logits[j] + mask.map_or(0.0, |m| m.data()[r * dim + j]);
                    let e = (x - best).exp();
                    o[j] = e;
                    sum += e;
                }
                for oj in o.iter_mut() {
                    *oj /= sum;
                }
            }
            (Tensor::new(v.shape().to_vec(), out), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::Softmax { input: self.id }, needs)
    }

    pub fn softmax(&self) -> Var {
        self.softmax_masked(None)
    }

    /// Normalizes the trailing axis to zero mean and unit variance, then
    /// applies a learned gain and bias.
    pub fn layer_norm(&self, gain: &Var, bias: &Var) -> Var {
        self.same_tape(gain);
        self.same_tape(bias);
        let (value, stats, needs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gv = &nodes[gain.id].value;
            let bv = &nodes[bias.id].value;
            let dim = x.last_dim();
            assert!(dim > 0, "layer_norm: empty trailing axis");
            assert_eq!(gv.shape(), &[dim], "layer_norm: gain must be [{dim}]");
            assert_eq!(bv.shape(), &[dim], "layer_norm: bias must be [{dim}]");
            let rows = x.rows();
            let mut out = vec![0.0; x.numel()];
            let mut stats = Vec::with_capacity(rows * 2);
            for r in 0..rows {
                let xr = &x.data()[r * dim..(r + 1) * dim];
                let mean = xr.iter().sum::<f64>() / dim as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                let inv_std = 1.0 / (var + LN_EPS).sqrt();
                stats.push(mean);
                stats.push(inv_std);
                for j in 0..dim {
                    out[r * dim + j] = (xr[j] - mean) * inv_std * gv.data()[j] + bv.data()[j];
                }
            }
            let needs = nodes[self.id].needs_grad
                || nodes[gain.id].needs_grad
                || nodes[bias.id].needs_grad;
            (Tensor::new(x.shape().to_vec(), out), stats, needs)
        };
        self.tape.push(
            value,
            Op::LayerNorm { input: self.id, gain: gain.id, bias: bias.id, stats },
            needs,
        )
    }

    pub fn gelu(&self) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| gelu(x)).collect();
            (Tensor::new(v.shape().to_vec(), data), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::Gelu { input: self.id }, needs)
    }

    /// Inverted dropout: keep probability 1-rate, kept values scaled by
    /// 1/(1-rate). Outside training (or at rate 0) this is the same node,
    /// hence bitwise identity.
    pub fn dropout(&self, rate: f64, training: bool, rng: &mut ChaCha8Rng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0, 1)");
        if !training || rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let (value, mask, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let mut mask = Vec::with_capacity(v.numel());
            for _ in 0..v.numel() {
                mask.push(if rng.gen::<f64>() < keep { inv } else { 0.0 });
            }
            let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(v.shape().to_vec(), data), mask, nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::Dropout { input: self.id, mask: Rc::new(mask) },
            needs,
        )
    }

    pub fn transpose_last(&self) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            assert!(v.ndim() >= 2, "transpose_last: wants rank >= 2, got {:?}", v.shape());
            let r = v.shape()[v.ndim() - 2];
            let c = v.shape()[v.ndim() - 1];
            let batch = v.numel() / (r * c);
            let mut out = vec![0.0; v.numel()];
            kernels::transpose_batch(v.data(), &mut out, batch, r, c);
            let mut shape = v.shape().to_vec();
            let n = shape.len();
            shape.swap(n - 2, n - 1);
            (Tensor::new(shape, out), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::TransposeLast { input: self.id }, needs)
    }

    pub fn sum_all(&self) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (Tensor::scalar(v.data().iter().sum()), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::SumAll { input: self.id }, needs)
    }

    pub fn mean_all(&self) -> Var {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            assert!(v.numel() > 0, "mean_all: empty tensor");
            (
                Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64),
                nodes[self.id].needs_grad,
            )
        };
        self.tape.push(value, Op::MeanAll { input: self.id }, needs)
    }

    pub fn clamp_min(&self, floor: f64) -> Var {
        assert!(floor.is_finite(), "clamp_min: floor must be finite");
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| x.max(floor)).collect();
            (Tensor::new(v.shape().to_vec(), data), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::ClampMin { input: self.id, floor }, needs)
    }

    /// Exponentially decayed mean over real positions of a (batch, len, dim)
    /// tensor. `gamma` is the per-step decay; `mask` flags real positions.
    ///
    /// Complete window: mu_i = sum_{j<=i} gamma^(i-j) m_j z_j / C_i with
    /// C_i = sum_{j<=i} gamma^(i-j) m_j, computed by an O(len) recurrence.
    /// Short window of width w: the trailing w slots, normalized by the full
    /// window weight sum_{k<w} gamma^k even when slots are absent, kept by a
    /// sliding update. Pad positions emit zero.
    pub fn decayed_mean(&self, gamma: f64, window: Window, mask: Rc<Vec<bool>>) -> Var {
        assert!(gamma > 0.0 && gamma < 1.0, "decayed_mean: gamma {gamma} outside (0, 1)");
        if let Window::Short(w) = window {
            assert!(w >= 1, "decayed_mean: short window must be >= 1");
        }
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            assert_eq!(v.ndim(), 3, "decayed_mean: wants (batch, len, dim), got {:?}", v.shape());
            let (b, l, dim) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            assert_eq!(mask.len(), b * l, "decayed_mean: mask length mismatch");
            let x = v.data();
            let mut out = vec![0.0; b * l * dim];
            match window {
                Window::Complete => {
                    let mut s = vec![0.0; dim];
                    for row in 0..b {
                        s.iter_mut().for_each(|v| *v = 0.0);
                        let mut c = 0.0;
                        for i in 0..l {
                            let real = mask[row * l + i];
                            let base = (row * l + i) * dim;
                            c = gamma * c + if real { 1.0 } else { 0.0 };
                            for f in 0..dim {
                                s[f] = gamma * s[f] + if real { x[base + f] } else { 0.0 };
                            }
                            if real && c > 0.0 {
                                for f in 0..dim {
                                    out[base + f] = s[f] / c;
                                }
                            }
                        }
                    }
                }
                Window::Short(w) => {
                    let c_full: f64 = (0..w).map(|k| gamma.powi(k as i32)).sum();
                    let gw = gamma.powi(w as i32);
                    let mut s = vec![0.0; dim];
                    for row in 0..b {
                        s.iter_mut().for_each(|v| *v = 0.0);
                        for i in 0..l {
                            let real = mask[row * l + i];
                            let base = (row * l + i) * dim;
                            for f in 0..dim {
                                let enter = if real { x[base + f] } else { 0.0 };
                                let leave = if i >= w && mask[row * l + i - w] {
                                    gw * x[(row * l + i - w) * dim + f]
                                } else {
                                    0.0
                                };
                                s[f] = gamma * s[f] + enter - leave;
                            }
                            if real {
                                for f in 0..dim {
                                    out[base + f] = s[f] / c_full;
                                }
                            }
                        }
                    }
                }
            }
            (Tensor::new(vec![b, l, dim], out), nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::DecayedMean { input: self.id, gamma, window, mask },
            needs,
        )
    }

    /// Position-to-position differences x_i - x_{i-1} along the sequence
    /// axis. Pads and each row's first real position emit zero.
    pub fn transitions(&self, mask: &[bool]) -> Var {
        let (value, keep, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            assert_eq!(v.ndim(), 3, "transitions: wants (batch, len, dim), got {:?}", v.shape());
            let (b, l, dim) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            assert_eq!(mask.len(), b * l, "transitions: mask length mismatch");
            let x = v.data();
            let mut keep = vec![false; b * l];
            let mut out = vec![0.0; b * l * dim];
            for row in 0..b {
                for i in 1..l {
                    let idx = row * l + i;
                    if mask[idx] && mask[idx - 1] {
                        keep[idx] = true;
                        let here = idx * dim;
                        let prev = (idx - 1) * dim;
                        for f in 0..dim {
                            out[here + f] = x[here + f] - x[prev + f];
                        }
                    }
                }
            }
            (Tensor::new(vec![b, l, dim], out), keep, nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::Transitions { input: self.id, keep: Rc::new(keep) },
            needs,
        )
    }

    /// Mean negative log-likelihood of `meta.targets` under a softmax over
    /// each row's allowed candidates: every item except pad and the row's
    /// banned list, with the target always allowed. Rows with target 0 are
    /// skipped; the mean is over contributing rows.
    pub fn masked_cross_entropy(&self, meta: Rc<CrossEntropyMeta>) -> Var {
        let (value, lse, valid, needs) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let vocab = meta.vocab;
            assert_eq!(v.last_dim(), vocab, "cross_entropy: vocab mismatch");
            let rows = v.rows();
            assert_eq!(meta.targets.len(), rows, "cross_entropy: target count mismatch");
            assert_eq!(meta.ban_offsets.len(), rows + 1, "cross_entropy: ban offsets malformed");
            let s = v.data();
            let mut lse = vec![0.0; rows];
            let mut banned = vec![false; vocab];
            let mut valid = 0usize;
            let mut total = 0.0;
            for r in 0..rows {
                let t = meta.targets[r];
                if t == 0 {
                    continue;
                }
                assert!(
                    (t as usize) < vocab,
                    "cross_entropy: target {} out of vocabulary {}",
                    t,
                    vocab
                );
                let bans = &meta.ban_items[meta.ban_offsets[r]..meta.ban_offsets[r + 1]];
                for &bi in bans {
                    assert!((bi as usize) < vocab, "cross_entropy: banned id out of range");
                    if bi != t {
                        banned[bi as usize] = true;
                    }
                }
                let row = &s[r * vocab..(r + 1) * vocab];
                let mut best = f64::NEG_INFINITY;
                for c in 1..vocab {
                    if !banned[c] && row[c] > best {
                        best = row[c];
                    }
                }
                assert!(best.is_finite(), "cross_entropy: row {r} has no finite candidate");
                let mut sum = 0.0;
                for c in 1..vocab {
                    if !banned[c] {
                        sum += (row[c] - best).exp();
                    }
                }
                let row_lse = best + sum.ln();
                lse[r] = row_lse;
                total += row_lse - row[t as usize];
                valid += 1;
                for &bi in bans {
                    banned[bi as usize] = false;
                }
            }
            assert!(valid > 0, "cross_entropy: no valid positions in batch");
            (
                Tensor::scalar(total / valid as f64),
                lse,
                valid,
                nodes[self.id].needs_grad,
            )
        };
        self.tape.push(
            value,
            Op::CrossEntropy { logits: self.id, meta, lse, valid },
            needs,
        )
    }
}

/// Concatenates along the trailing axis; all leading axes must agree.
pub fn concat_last(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty(), "concat_last: no inputs");
    let tape = Rc::clone(parts[0].tape());
    let (value, needs) = {
        let nodes = tape.nodes.borrow();
        let first = &nodes[parts[0].id].value;
        let lead = &first.shape()[..first.ndim() - 1];
        let mut total = 0;
        let mut needs = false;
        for p in parts {
            assert!(Rc::ptr_eq(&tape, p.tape()), "concat_last: vars on different tapes");
            let v = &nodes[p.id].value;
            assert_eq!(
                &v.shape()[..v.ndim() - 1],
                lead,
                "concat_last: leading shapes differ: {:?} vs {:?}",
                first.shape(),
                v.shape()
            );
            total += v.last_dim();
            needs |= nodes[p.id].needs_grad;
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            let w = v.last_dim();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        (Tensor::new(shape, out), needs)
    };
    tape.push(
        value,
        Op::ConcatLast { inputs: parts.iter().map(|p| p.id).collect() },
        needs,
    )
}

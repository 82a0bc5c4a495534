//! Dynamic group modeling: transition sequences, recency-weighted window
//! statistics, temporal user representations, soft group membership, and the
//! membership-weighted group representation.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::{standard_normal, uniform_symmetric};
use crate::tape::{concat_last, Var, Window};
use crate::tensor::Tensor;

/// Affine map, optionally with one GELU hidden layer of width `dim`.
#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub hidden: Option<(ParamId, ParamId)>,
    pub w: ParamId,
    pub b: ParamId,
}

fn init_mlp(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    hidden: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> MlpIds {
    let mut fan_in = input;
    let hidden = hidden.map(|h| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{name}.hidden_w"),
            Tensor::new(vec![fan_in, h], uniform_symmetric(rng, fan_in * h, bound)),
            true,
        );
        let b = store.add(format!("{name}.hidden_b"), Tensor::zeros(vec![h]), true);
        fan_in = h;
        (w, b)
    });
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(
        format!("{name}.w"),
        Tensor::new(vec![fan_in, output], uniform_symmetric(rng, fan_in * output, bound)),
        true,
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(vec![output]), true);
    MlpIds { hidden, w, b }
}

pub fn apply_mlp(binder: &Binder, mlp: &MlpIds, input: &Var) -> Var {
    let mut h = input.clone();
    if let Some((w, b)) = mlp.hidden {
        h = h.matmul(&binder.var(w)).add(&binder.var(b)).gelu();
    }
    h.matmul(&binder.var(mlp.w)).add(&binder.var(mlp.b))
}

/// Parameters of one block's group branch. Stream MLPs exist only for
/// enabled feature streams; disabled streams contribute zero vectors.
#[derive(Debug, Clone)]
pub struct GroupIds {
    pub current_complete: Option<MlpIds>,
    pub transition_complete: Option<MlpIds>,
    pub current_short: Option<MlpIds>,
    pub transition_short: Option<MlpIds>,
    pub affinity: MlpIds,
    /// Latent group table, (dim, groups); columns are group embeddings.
    pub table: ParamId,
}

/// Orthonormalizes whichever side of a (dim, groups) matrix fits: columns
/// when groups <= dim, rows otherwise. Modified Gram-Schmidt on a standard
/// normal draw.
fn orthogonal_init(dim: usize, groups: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (rows, cols, transposed) =
        if groups <= dim { (dim, groups, false) } else { (groups, dim, true) };
    // Column-major basis build: vectors live in R^rows, cols of them.
    let mut basis: Vec<Vec<f64>> = (0..cols).map(|_| standard_normal(rng, rows)).collect();
    for c in 0..cols {
        for prev in 0..c {
            let dot: f64 = basis[c].iter().zip(&basis[prev]).map(|(a, b)| a * b).sum();
            let (head, tail) = basis.split_at_mut(c);
            for (v, p) in tail[0].iter_mut().zip(&head[prev]) {
                *v -= dot * p;
            }
        }
        let norm: f64 = basis[c].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-10, "orthogonal init: degenerate draw");
        basis[c].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0; dim * groups];
    for r in 0..rows {
        for c in 0..cols {
            let (i, j) = if transposed { (c, r) } else { (r, c) };
            data[i * groups + j] = basis[c][r];
        }
    }
    Tensor::new(vec![dim, groups], data)
}

pub fn init_group(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> GroupIds {
    let d = cfg.dim;
    let hidden = if cfg.mlp_hidden { Some(d) } else { None };
    let stream = |store: &mut ParamStore, enabled: bool, rng: &mut ChaCha8Rng, name: &str| {
        enabled.then(|| init_mlp(store, &format!("{prefix}.{name}"), 3 * d, d, hidden, rng))
    };
    let current_complete = stream(store, cfg.features.current_complete, rng, "current_complete");
    let transition_complete =
        stream(store, cfg.features.transition_complete, rng, "transition_complete");
    let current_short = stream(store, cfg.features.current_short, rng, "current_short");
    let transition_short = stream(store, cfg.features.transition_short, rng, "transition_short");
    let affinity = init_mlp(store, &format!("{prefix}.affinity"), 2 * d, cfg.groups, hidden, rng);
    let table = store.add(
        format!("{prefix}.table"),
        orthogonal_init(d, cfg.groups, rng),
        true,
    );
    GroupIds {
        current_complete,
        transition_complete,
        current_short,
        transition_short,
        affinity,
        table,
    }
}

/// Decayed mean and floor-clamped variance of `z` over the given window.
pub fn window_stats(
    z: &Var,
    decay: f64,
    window: Window,
    mask: &Rc<Vec<bool>>,
    var_floor: f64,
) -> (Var, Var) {
    let gamma = 1.0 - decay;
    let mean = z.decayed_mean(gamma, window, Rc::clone(mask));
    let second = z.mul(z).decayed_mean(gamma, window, Rc::clone(mask));
    let var = second.sub(&mean.mul(&mean)).clamp_min(var_floor);
    (mean, var)
}

/// One temporal representation: MLP([z; mean; variance]).
fn temporal_representation(
    binder: &Binder,
    mlp: &MlpIds,
    z: &Var,
    decay: f64,
    window: Window,
    mask: &Rc<Vec<bool>>,
    var_floor: f64,
) -> Var {
    let (mean, var) = window_stats(z, decay, window, mask, var_floor);
    apply_mlp(binder, mlp, &concat_last(&[z, &mean, &var]))
}

/// Everything the group branch exposes: the aggregated representation and the
/// per-position membership distribution (uniform at pads).
pub struct GroupOutput {
    /// (rows, len, dim) group-aware representation.
    pub representation: Var,
    /// (rows, len, groups) membership probabilities.
    pub membership: Var,
}

pub fn group_forward(
    binder: &Binder,
    ids: &GroupIds,
    x: &Var,
    mask: &Rc<Vec<bool>>,
    cfg: &ModelConfig,
) -> GroupOutput {
    let shape = x.shape();
    let (rows, len, d) = (shape[0], shape[1], shape[2]);
    let zeros = || binder.constant(Tensor::zeros(vec![rows, len, d]));

    let need_transitions = ids.transition_complete.is_some() || ids.transition_short.is_some();
    let t = need_transitions.then(|| x.transitions(mask));

    let short = Window::Short(cfg.short_window);
    let f_xc = ids.current_complete.as_ref().map(|m| {
        temporal_representation(binder, m, x, cfg.decay_complete, Window::Complete, mask, cfg.var_floor)
    });
    let f_tc = ids.transition_complete.as_ref().map(|m| {
        temporal_representation(
            binder,
            m,
            t.as_ref().unwrap(),
            cfg.decay_complete,
            Window::Complete,
            mask,
            cfg.var_floor,
        )
    });
    let f_xs = ids.current_short.as_ref().map(|m| {
        temporal_representation(binder, m, x, cfg.decay_short, short, mask, cfg.var_floor)
    });
    let f_ts = ids.transition_short.as_ref().map(|m| {
        temporal_representation(
            binder,
            m,
            t.as_ref().unwrap(),
            cfg.decay_short,
            short,
            mask,
            cfg.var_floor,
        )
    });

    let pair = |a: Option<Var>, b: Option<Var>| match (a, b) {
        (Some(a), Some(b)) => a.add(&b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => zeros(),
    };
    let h_complete = pair(f_xc, f_tc);
    let h_short = pair(f_xs, f_ts);

    let logits = apply_mlp(binder, &ids.affinity, &concat_last(&[&h_complete, &h_short]));
    // Zero pad-position logits so their membership is exactly uniform.
    let mut gate = vec![0.0; rows * len * cfg.groups];
    for (p, &real) in mask.iter().enumerate() {
        if real {
            gate[p * cfg.groups..(p + 1) * cfg.groups].fill(1.0);
        }
    }
    let gate = binder.constant(Tensor::new(vec![rows, len, cfg.groups], gate));
    let membership = logits.scale(1.0 / cfg.tau).mul(&gate).softmax();

    // g_i = G c_i, position-wise: (rows, len, groups) x (groups, dim).
    let table_t = binder.var(ids.table).transpose_last();
    let representation = membership.matmul(&table_t);
    GroupOutput { representation, membership }
}

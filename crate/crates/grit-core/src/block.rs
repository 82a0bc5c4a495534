//! One encoder block: causal multi-head self-attention with residual and
//! normalization, fusion of the attention path with the group-aware
//! representation, and a position-wise feed-forward network.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::group::{group_forward, init_group, GroupIds, GroupOutput};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::uniform_symmetric;
use crate::tape::{concat_last, Var};
use crate::tensor::Tensor;

/// Query/key/value projections of one attention head, mapping dim -> dim/heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub heads: Vec<HeadIds>,
    /// Output projection over the concatenated heads, (dim, dim).
    pub wo: ParamId,
    pub bo: ParamId,
    pub attn_ln_gain: ParamId,
    pub attn_ln_bias: ParamId,
    pub group: GroupIds,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub out_ln_gain: ParamId,
    pub out_ln_bias: ParamId,
}

pub fn init_block(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut ChaCha8Rng,
) -> BlockIds {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let bound = 1.0 / (d as f64).sqrt();
    let proj = |store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        let b = 1.0 / (rows as f64).sqrt();
        store.add(name, Tensor::new(vec![rows, cols], uniform_symmetric(rng, rows * cols, b)), true)
    };
    let heads = (0..cfg.heads)
        .map(|h| HeadIds {
            wq: proj(store, format!("{prefix}.head{h}.wq"), d, dh, rng),
            bq: store.add(format!("{prefix}.head{h}.bq"), Tensor::zeros(vec![dh]), true),
            wk: proj(store, format!("{prefix}.head{h}.wk"), d, dh, rng),
            bk: store.add(format!("{prefix}.head{h}.bk"), Tensor::zeros(vec![dh]), true),
            wv: proj(store, format!("{prefix}.head{h}.wv"), d, dh, rng),
            bv: store.add(format!("{prefix}.head{h}.bv"), Tensor::zeros(vec![dh]), true),
        })
        .collect();
    let wo = store.add(
        format!("{prefix}.wo"),
        Tensor::new(vec![d, d], uniform_symmetric(rng, d * d, bound)),
        true,
    );
    let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(vec![d]), true);
    let attn_ln_gain = store.add(format!("{prefix}.attn_ln_gain"), Tensor::filled(vec![d], 1.0), true);
    let attn_ln_bias = store.add(format!("{prefix}.attn_ln_bias"), Tensor::zeros(vec![d]), true);
    let group = init_group(store, cfg, &format!("{prefix}.group"), rng);
    let ffn_w1 = proj(store, format!("{prefix}.ffn_w1"), d, cfg.ff_dim, rng);
    let ffn_b1 = store.add(format!("{prefix}.ffn_b1"), Tensor::zeros(vec![cfg.ff_dim]), true);
    let ffn_w2 = proj(store, format!("{prefix}.ffn_w2"), cfg.ff_dim, d, rng);
    let ffn_b2 = store.add(format!("{prefix}.ffn_b2"), Tensor::zeros(vec![d]), true);
    let out_ln_gain = store.add(format!("{prefix}.out_ln_gain"), Tensor::filled(vec![d], 1.0), true);
    let out_ln_bias = store.add(format!("{prefix}.out_ln_bias"), Tensor::zeros(vec![d]), true);
    BlockIds {
        heads,
        wo,
        bo,
        attn_ln_gain,
        attn_ln_bias,
        group,
        ffn_w1,
        ffn_b1,
        ffn_w2,
        ffn_b2,
        out_ln_gain,
        out_ln_bias,
    }
}

/// Causal multi-head self-attention followed by residual add and layer
/// normalization. `attn_mask` is additive, (rows, len, len): 0 where
/// position i may attend to j, -inf elsewhere.
pub fn self_attention(
    binder: &Binder,
    ids: &BlockIds,
    x: &Var,
    attn_mask: &Tensor,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    let dh = cfg.dim / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let contexts: Vec<Var> = ids
        .heads
        .iter()
        .map(|h| {
            let q = x.matmul(&binder.var(h.wq)).add(&binder.var(h.bq));
            let k = x.matmul(&binder.var(h.wk)).add(&binder.var(h.bk));
            let v = x.matmul(&binder.var(h.wv)).add(&binder.var(h.bv));
            let scores = q.bmm(&k.transpose_last()).scale(scale);
            let probs = scores
                .softmax_masked(Some(attn_mask))
                .dropout(cfg.attn_dropout, training, rng);
            probs.bmm(&v)
        })
        .collect();
    let refs: Vec<&Var> = contexts.iter().collect();
    let merged = concat_last(&refs)
        .matmul(&binder.var(ids.wo))
        .add(&binder.var(ids.bo))
        .dropout(cfg.dropout, training, rng);
    merged
        .add(x)
        .layer_norm(&binder.var(ids.attn_ln_gain), &binder.var(ids.attn_ln_bias))
}

/// Convex mix of the group path and the attention path. The endpoints return
/// the corresponding input node itself, so beta = 0 disconnects the group
/// branch from the output graph exactly (and beta = 1 the attention branch).
pub fn fuse(e: &Var, g: &Var, beta: f64) -> Var {
    assert!((0.0..=1.0).contains(&beta), "fuse: beta {beta} outside [0, 1]");
    if beta == 0.0 {
        return e.clone();
    }
    if beta == 1.0 {
        return g.clone();
    }
    g.scale(beta).add(&e.scale(1.0 - beta))
}

/// Position-wise feed-forward with residual and layer normalization.
pub fn feed_forward(
    binder: &Binder,
    ids: &BlockIds,
    u: &Var,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    let y = u.matmul(&binder.var(ids.ffn_w1)).add(&binder.var(ids.ffn_b1)).gelu();
    let z = y
        .matmul(&binder.var(ids.ffn_w2))
        .add(&binder.var(ids.ffn_b2))
        .dropout(cfg.dropout, training, rng);
    z.add(u).layer_norm(&binder.var(ids.out_ln_gain), &binder.var(ids.out_ln_bias))
}

pub struct BlockOutput {
    pub hidden: Var,
    /// (rows, len, groups) membership probabilities from this block.
    pub membership: Var,
}

/// Full block: group branch and attention both consume the block input; the
/// attention output (after residual and norm) is fused with the group
/// representation and pushed through the feed-forward sublayer.
pub fn block_forward(
    binder: &Binder,
    ids: &BlockIds,
    x: &Var,
    mask: &Rc<Vec<bool>>,
    attn_mask: &Tensor,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> BlockOutput {
    let GroupOutput { representation, membership } = group_forward(binder, &ids.group, x, mask, cfg);
    let e = self_attention(binder, ids, x, attn_mask, cfg, training, rng);
    let u = fuse(&e, &representation, cfg.beta);
    let hidden = feed_forward(binder, ids, &u, cfg, training, rng);
    BlockOutput { hidden, membership }
}

/// Additive attention mask: query i may attend to key j when j <= i and j is
/// a real position; every query may also attend to itself so that pad rows
/// still produce a valid (discarded) distribution.
pub fn build_attn_mask(mask: &[bool], rows: usize, len: usize) -> Tensor {
    let mut m = vec![f64::NEG_INFINITY; rows * len * len];
    for r in 0..rows {
        for i in 0..len {
            for j in 0..=i {
                if mask[r * len + j] || j == i {
                    m[(r * len + i) * len + j] = 0.0;
                }
            }
        }
    }
    Tensor::new(vec![rows, len, len], m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::new_tape;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            max_len: 4,
            heads: 2,
            ff_dim: 16,
            groups: 3,
            short_window: 2,
            beta: 0.3,
            dropout: 0.0,
            attn_dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (ParamStore, BlockIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = init_block(&mut store, cfg, "block0", &mut rng);
        (store, ids)
    }

    fn rand_input(rows: usize, len: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rows * len * dim;
        Tensor::new(vec![rows, len, dim], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_position_attention_weights_only_itself() {
        let cfg = ModelConfig { max_len: 1, ..toy_cfg() };
        let (store, ids) = setup(&cfg, 1);
        let tape = new_tape();
        let binder = Binder::new(tape, &store);
        let x = binder.constant(rand_input(1, 1, 8, 2));
        let mask = build_attn_mask(&[true], 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = self_attention(&binder, &ids, &x, &mask, &cfg, false, &mut rng);

        // By hand: probs are [[1]], so the context is exactly v(x); compare
        // against layernorm(x + (concat v)(wo) + bo).
        let v: Vec<Var> = ids
            .heads
            .iter()
            .map(|h| x.matmul(&binder.var(h.wv)).add(&binder.var(h.bv)))
            .collect();
        let refs: Vec<&Var> = v.iter().collect();
        let want = concat_last(&refs)
            .matmul(&binder.var(ids.wo))
            .add(&binder.var(ids.bo))
            .add(&x)
            .layer_norm(&binder.var(ids.attn_ln_gain), &binder.var(ids.attn_ln_bias));
        let (ev, wv) = (e.value(), want.value());
        for (a, b) in ev.data().iter().zip(wv.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_causal_at_eval() {
        let cfg = toy_cfg();
        let (store, ids) = setup(&cfg, 3);
        let mask_bools = vec![true; 4];
        let attn_mask = build_attn_mask(&mask_bools, 1, 4);
        let base = rand_input(1, 4, 8, 4);
        let run = |input: &Tensor| {
            let tape = new_tape();
            let binder = Binder::new(tape, &store);
            let x = binder.constant(input.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            self_attention(&binder, &ids, &x, &attn_mask, &cfg, false, &mut rng).value()
        };
        let e0 = run(&base);
        for j in 1..4 {
            let mut bumped = base.clone();
            for f in 0..8 {
                bumped.data_mut()[j * 8 + f] += 0.5;
            }
            let e1 = run(&bumped);
            for i in 0..j {
                for f in 0..8 {
                    assert_eq!(
                        e0.at(&[0, i, f]),
                        e1.at(&[0, i, f]),
                        "position {i} changed after perturbing {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn pad_keys_are_never_attended() {
        let cfg = toy_cfg();
        let (store, ids) = setup(&cfg, 5);
        // Row with two leading pads; change pad content, real outputs stay.
        let mask_bools = vec![false, false, true, true];
        let attn_mask = build_attn_mask(&mask_bools, 1, 4);
        let base = rand_input(1, 4, 8, 6);
        let run = |input: &Tensor| {
            let tape = new_tape();
            let binder = Binder::new(tape, &store);
            let x = binder.constant(input.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            self_attention(&binder, &ids, &x, &attn_mask, &cfg, false, &mut rng).value()
        };
        let e0 = run(&base);
        let mut bumped = base.clone();
        for p in 0..2 {
            for f in 0..8 {
                bumped.data_mut()[p * 8 + f] = 9.0 + (p * 8 + f) as f64;
            }
        }
        let e1 = run(&bumped);
        for i in 2..4 {
            for f in 0..8 {
                assert_eq!(e0.at(&[0, i, f]), e1.at(&[0, i, f]));
            }
        }
    }

    #[test]
    fn fuse_endpoints_return_the_input_node() {
        let tape = new_tape();
        let e = tape.constant(Tensor::new(vec![2], vec![0.0, 2.0]));
        let g = tape.constant(Tensor::new(vec![2], vec![2.0, 0.0]));
        assert_eq!(fuse(&e, &g, 0.0).id(), e.id());
        assert_eq!(fuse(&e, &g, 1.0).id(), g.id());
        let mid = fuse(&e, &g, 0.5).value();
        assert_eq!(mid.data(), &[1.0, 1.0]);
    }

    #[test]
    fn fuse_is_linear_in_beta() {
        let tape = new_tape();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = tape.constant(Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let g = tape.constant(Tensor::new(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let (b1, b2) = (0.2, 0.7);
        let lhs = fuse(&e, &g, b1).add(&fuse(&e, &g, b2)).value();
        let rhs = fuse(&e, &g, (b1 + b2) / 2.0).scale(2.0).value();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn fuse_rejects_beta_outside_unit_interval() {
        let tape = new_tape();
        let e = tape.constant(Tensor::zeros(vec![1]));
        fuse(&e, &e, 1.5);
    }

    #[test]
    fn feed_forward_with_zero_weights_is_layernorm() {
        let cfg = toy_cfg();
        let (mut store, ids) = setup(&cfg, 8);
        for id in [ids.ffn_w1, ids.ffn_b1, ids.ffn_w2, ids.ffn_b2] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let tape = new_tape();
        let binder = Binder::new(tape, &store);
        let u = binder.constant(rand_input(1, 4, 8, 9));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = feed_forward(&binder, &ids, &u, &cfg, false, &mut rng);
        let want = u.layer_norm(&binder.var(ids.out_ln_gain), &binder.var(ids.out_ln_bias));
        assert_eq!(o.value().data(), want.value().data());
    }

    #[test]
    fn feed_forward_is_position_wise() {
        let cfg = toy_cfg();
        let (store, ids) = setup(&cfg, 10);
        let base = rand_input(1, 4, 8, 11);
        let mut permuted_data = vec![0.0; 32];
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            permuted_data[dst * 8..(dst + 1) * 8].copy_from_slice(&base.data()[src * 8..(src + 1) * 8]);
        }
        let permuted = Tensor::new(vec![1, 4, 8], permuted_data);
        let run = |input: &Tensor| {
            let tape = new_tape();
            let binder = Binder::new(tape, &store);
            let u = binder.constant(input.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            feed_forward(&binder, &ids, &u, &cfg, false, &mut rng).value()
        };
        let o_base = run(&base);
        let o_perm = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for f in 0..8 {
                assert_eq!(o_perm.at(&[0, dst, f]), o_base.at(&[0, src, f]));
            }
        }
    }

    #[test]
    fn block_forward_reports_shapes_and_is_deterministic_at_eval() {
        let cfg = toy_cfg();
        let (store, ids) = setup(&cfg, 12);
        let mask = Rc::new(vec![false, true, true, true]);
        let attn_mask = build_attn_mask(&mask, 1, 4);
        let input = rand_input(1, 4, 8, 13);
        let run = || {
            let tape = new_tape();
            let binder = Binder::new(tape, &store);
            let x = binder.constant(input.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = block_forward(&binder, &ids, &x, &mask, &attn_mask, &cfg, false, &mut rng);
            (out.hidden.value(), out.membership.value())
        };
        let (h1, c1) = run();
        let (h2, c2) = run();
        assert_eq!(h1.shape(), &[1, 4, 8]);
        assert_eq!(c1.shape(), &[1, 4, 3]);
        assert_eq!(h1.data(), h2.data());
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn attn_mask_allows_diagonal_for_pad_rows() {
        let m = build_attn_mask(&[false, true], 1, 2);
        // Pad query row 0 may attend only to itself.
        assert_eq!(m.at(&[0, 0, 0]), 0.0);
        assert_eq!(m.at(&[0, 0, 1]), f64::NEG_INFINITY);
        // Real query row 1: key 0 is a pad, banned; itself allowed.
        assert_eq!(m.at(&[0, 1, 0]), f64::NEG_INFINITY);
        assert_eq!(m.at(&[0, 1, 1]), 0.0);
    }
}

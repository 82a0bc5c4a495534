//! Input encoding: item embedding plus positional embedding, then layer
//! normalization and dropout. Item id 0 is the pad row and stays zero.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, PositionalMode};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::truncated_normal;
use crate::tape::Var;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingIds {
    pub items: ParamId,
    pub positions: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// The classic interleaved sin/cos table, rows are positions.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "sinusoid table needs an even dim");
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for k in 0..dim / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * k as f64 / dim as f64);
            data[p * dim + 2 * k] = (p as f64 * rate).sin();
            data[p * dim + 2 * k + 1] = (p as f64 * rate).cos();
        }
    }
    Tensor::new(vec![len, dim], data)
}

/// Allocates the item table (`item_count + 1` rows, row 0 = pad, kept zero),
/// the positional table per the configured mode, and the encoder layer norm.
pub fn init_embeddings(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    item_count: usize,
    rng: &mut ChaCha8Rng,
) -> EmbeddingIds {
    let d = cfg.dim;
    let vocab = item_count + 1;
    let mut item_data = truncated_normal(rng, vocab * d, INIT_STD);
    item_data[..d].iter_mut().for_each(|v| *v = 0.0);
    let items = store.add("embed.items", Tensor::new(vec![vocab, d], item_data), true);

    let positions = match cfg.positional {
        PositionalMode::FixedSinusoidal => {
            store.add("embed.positions", sinusoid_table(cfg.max_len, d), false)
        }
        PositionalMode::LearnableSinusoidalInit => {
            store.add("embed.positions", sinusoid_table(cfg.max_len, d), true)
        }
        PositionalMode::FullyLearnable => store.add(
            "embed.positions",
            Tensor::new(vec![cfg.max_len, d], truncated_normal(rng, cfg.max_len * d, INIT_STD)),
            true,
        ),
    };
    let ln_gain = store.add("embed.ln_gain", Tensor::filled(vec![d], 1.0), true);
    let ln_bias = store.add("embed.ln_bias", Tensor::zeros(vec![d]), true);
    EmbeddingIds { items, positions, ln_gain, ln_bias }
}

/// Encodes a left-padded id batch into (rows, max_len, dim) representations.
/// The positional table broadcasts across rows, so every batch must span the
/// full configured window.
pub fn encode_sequence(
    binder: &Binder,
    ids: &EmbeddingIds,
    items: Rc<Vec<u32>>,
    rows: usize,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    assert_eq!(items.len(), rows * cfg.max_len, "encode_sequence: id count mismatch");
    let table = binder.var(ids.items);
    let gathered = table.gather_rows(items, &[rows, cfg.max_len]);
    let with_pos = gathered.add(&binder.var(ids.positions));
    let normed = with_pos.layer_norm(&binder.var(ids.ln_gain), &binder.var(ids.ln_bias));
    normed.dropout(cfg.dropout, training, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tape::new_tape;
    use rand::SeedableRng;

    #[test]
    fn sinusoid_position_zero_alternates_zero_one() {
        let t = sinusoid_table(3, 4);
        assert_eq!(&t.data()[0..4], &[0.0, 1.0, 0.0, 1.0]);
        // position 1, first pair: sin(1), cos(1).
        assert!((t.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(&[1, 1]) - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn pad_row_initializes_to_zero() {
        let cfg = ModelConfig { dim: 8, max_len: 4, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = init_embeddings(&mut store, &cfg, 10, &mut rng);
        let table = store.value(ids.items);
        assert_eq!(table.shape(), &[11, 8]);
        assert!(table.data()[..8].iter().all(|&v| v == 0.0));
        assert!(table.data()[8..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fixed_sinusoidal_table_is_frozen() {
        let cfg = ModelConfig {
            dim: 8,
            max_len: 4,
            positional: PositionalMode::FixedSinusoidal,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = init_embeddings(&mut store, &cfg, 10, &mut rng);
        assert!(!store.trainable(ids.positions));
        assert_eq!(store.value(ids.positions).data(), sinusoid_table(4, 8).data());
    }

    #[test]
    fn encode_produces_batch_shape_and_is_deterministic_in_eval() {
        let cfg = ModelConfig { dim: 8, max_len: 4, dropout: 0.5, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ids = init_embeddings(&mut store, &cfg, 10, &mut rng);
        let tape = new_tape();
        let binder = Binder::new(tape, &store);
        let items = Rc::new(vec![0u32, 0, 1, 2, 0, 3, 4, 5]);
        let mut drng = ChaCha8Rng::seed_from_u64(1);
        let x = encode_sequence(&binder, &ids, Rc::clone(&items), 2, &cfg, false, &mut drng);
        assert_eq!(x.shape(), vec![2, 4, 8]);
        let y = encode_sequence(&binder, &ids, items, 2, &cfg, false, &mut drng);
        assert_eq!(x.value().data(), y.value().data(), "eval encode must be deterministic");
    }
}

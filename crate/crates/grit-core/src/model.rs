//! The assembled model: embeddings, a stack of encoder blocks, tied-table
//! scoring, and a binary checkpoint format that round-trips bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;
use std::rc::Rc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{block_forward, build_attn_mask, init_block, BlockIds};
use crate::config::ModelConfig;
use crate::embedding::{encode_sequence, init_embeddings, EmbeddingIds};
use crate::error::{GritError, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::SeedFanout;
use crate::tape::{new_tape, Var};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"GRITCKPT";
const CKPT_VERSION: u32 = 1;

pub struct GritModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    item_count: usize,
    embed: EmbeddingIds,
    blocks: Vec<BlockIds>,
}

/// One recorded forward evaluation. Holding the tape alive keeps every
/// intermediate reachable for backward or inspection.
pub struct ForwardPass {
    pub hidden: Var,
    /// Per block, (rows, len, groups) membership probabilities.
    pub memberships: Vec<Var>,
    /// The tied item table as a graph leaf; scoring through it routes
    /// gradients into the same storage the input lookup reads.
    pub item_table: Var,
}

impl ForwardPass {
    /// Scores for every position: hidden @ table^T, (rows, len, vocab).
    pub fn logits(&self) -> Var {
        self.hidden.matmul(&self.item_table.transpose_last())
    }
}

impl GritModel {
    pub fn new(config: ModelConfig, item_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if item_count == 0 {
            return Err(GritError::Config("model needs at least one item".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = SeedFanout::new(seed).init_rng();
        let embed = init_embeddings(&mut store, &config, item_count, &mut rng);
        let blocks = (0..config.layers)
            .map(|b| init_block(&mut store, &config, &format!("block{b}"), &mut rng))
            .collect();
        Ok(GritModel { config, store, item_count, embed, blocks })
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// The latent group table of one block, (dim, groups).
    pub fn group_table(&self, block_index: usize) -> Option<&Tensor> {
        self.blocks.get(block_index).map(|b| self.store.value(b.group.table))
    }

    /// Vocabulary size including the pad row at index 0.
    pub fn vocab(&self) -> usize {
        self.item_count + 1
    }

    /// Runs the block stack over a left-padded id batch. `mask` flags real
    /// positions, row-major (rows * max_len). The dropout rng is consumed
    /// only when `training` is set.
    pub fn forward(
        &self,
        items: Rc<Vec<u32>>,
        mask: &[bool],
        rows: usize,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> ForwardPass {
        let len = self.config.max_len;
        assert_eq!(items.len(), rows * len, "forward: id count mismatch");
        assert_eq!(mask.len(), rows * len, "forward: mask length mismatch");
        let tape = new_tape();
        let binder = Binder::new(Rc::clone(&tape), &self.store);
        let mask_rc = Rc::new(mask.to_vec());
        let attn_mask = build_attn_mask(mask, rows, len);

        let mut hidden =
            encode_sequence(&binder, &self.embed, items, rows, &self.config, training, rng);
        let mut memberships = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block_forward(
                &binder,
                block,
                &hidden,
                &mask_rc,
                &attn_mask,
                &self.config,
                training,
                rng,
            );
            hidden = out.hidden;
            memberships.push(out.membership);
        }
        let item_table = binder.var(self.embed.items);
        ForwardPass { hidden, memberships, item_table }
    }

    /// Next-item scores from the most recent position of each row, against
    /// the whole vocabulary. The pad column scores negative infinity. Runs
    /// off-tape: use it for evaluation, not training.
    pub fn score_last(&self, pass: &ForwardPass) -> Tensor {
        let hidden = pass.hidden.value();
        let (rows, len, d) = (hidden.shape()[0], hidden.shape()[1], hidden.shape()[2]);
        let mut last = vec![0.0; rows * d];
        for r in 0..rows {
            let src = (r * len + len - 1) * d;
            last[r * d..(r + 1) * d].copy_from_slice(&hidden.data()[src..src + d]);
        }
        let tape = new_tape();
        let h = tape.constant(Tensor::new(vec![rows, d], last));
        let table = tape.constant(self.store.value(self.embed.items).clone());
        let mut scores = h.matmul(&table.transpose_last()).value();
        let vocab = self.vocab();
        for r in 0..rows {
            scores.data_mut()[r * vocab] = f64::NEG_INFINITY;
        }
        scores
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| GritError::io(path, e))?);
        let io = |e: std::io::Error| GritError::io(path, e);
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CKPT_VERSION).map_err(io)?;
        let meta = serde_json::to_vec(&CheckpointMeta {
            config: self.config.clone(),
            item_count: self.item_count,
        })
        .map_err(|e| GritError::Checkpoint(format!("encoding metadata: {e}")))?;
        w.write_u64::<LittleEndian>(meta.len() as u64).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_u64::<LittleEndian>(self.store.len() as u64).map_err(io)?;
        for id in self.store.ids() {
            let name = self.store.name(id).as_bytes();
            w.write_u64::<LittleEndian>(name.len() as u64).map_err(io)?;
            w.write_all(name).map_err(io)?;
            let value = self.store.value(id);
            w.write_u64::<LittleEndian>(value.ndim() as u64).map_err(io)?;
            for &dim in value.shape() {
                w.write_u64::<LittleEndian>(dim as u64).map_err(io)?;
            }
            for &v in value.data() {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| GritError::io(path, e))?);
        let io = |e: std::io::Error| GritError::io(path, e);
        let bad = |msg: String| GritError::Checkpoint(msg);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("not a model checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)
            .map_err(|e| bad(format!("corrupt metadata: {e}")))?;

        let mut model = GritModel::new(meta.config, meta.item_count, 0)?;
        let count = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        if count != model.store.len() {
            return Err(bad(format!(
                "checkpoint holds {count} tensors, model defines {}",
                model.store.len()
            )));
        }
        for _ in 0..count {
            let name_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| bad(format!("tensor name: {e}")))?;
            let rank = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| bad(format!("checkpoint tensor {name} has no slot in the model")))?;
            let value = model.store.value_mut(id);
            if value.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "tensor {name}: checkpoint shape {shape:?} vs model shape {:?}",
                    value.shape()
                )));
            }
            for v in value.data_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io)?;
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    item_count: usize,
}

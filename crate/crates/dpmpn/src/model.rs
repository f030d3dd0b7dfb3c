//! Trainable parameters: entity/relation embeddings, the message and
//! update MLPs of both GNNs, the state projection, and the attention
//! bilinear forms with their projection MLPs.
//!
//! Parameters live in a fixed catalog order so optimizer state and
//! checkpoints line up by index.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Model dimensions. `state` is the message-passing width, `attention` the
/// (usually smaller) width used for attention scoring, `hidden` the MLP
/// hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_entities: usize,
    pub n_relations: usize,
    pub state: usize,
    pub attention: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// The full parameter set.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: Dims,
    entries: Vec<ParamEntry>,
}

/// Catalog of parameter names and shapes for a given dimension set.
/// Message MLP inputs concatenate [source state, relation embedding,
/// destination state] (3 x state) for the full-graph GNN and
/// [source state, context (3 x state), destination state] (5 x state) for
/// the pruned GNN; update MLPs mirror the same widths. Attention MLPs
/// project [state, context] (4 x state) down to the attention width.
pub fn catalog(d: &Dims) -> Vec<(&'static str, Vec<usize>)> {
    let (s, a, h) = (d.state, d.attention, d.hidden);
    vec![
        ("entity_emb", vec![d.n_entities, s]),
        ("rel_emb", vec![d.n_relations, s]),
        ("ignn_msg_w1", vec![3 * s, h]),
        ("ignn_msg_b1", vec![h]),
        ("ignn_msg_w2", vec![h, s]),
        ("ignn_msg_b2", vec![s]),
        ("ignn_upd_w1", vec![3 * s, h]),
        ("ignn_upd_b1", vec![h]),
        ("ignn_upd_w2", vec![h, s]),
        ("ignn_upd_b2", vec![s]),
        ("agnn_msg_w1", vec![5 * s, h]),
        ("agnn_msg_b1", vec![h]),
        ("agnn_msg_w2", vec![h, s]),
        ("agnn_msg_b2", vec![s]),
        ("agnn_upd_w1", vec![5 * s, h]),
        ("agnn_upd_b1", vec![h]),
        ("agnn_upd_w2", vec![h, s]),
        ("agnn_upd_b2", vec![s]),
        ("attend_proj", vec![s, s]),
        ("att_bilinear_state", vec![a, a]),
        ("att_bilinear_full", vec![a, a]),
        ("att_state_src_w", vec![4 * s, a]),
        ("att_state_src_b", vec![a]),
        ("att_state_dst_w", vec![4 * s, a]),
        ("att_state_dst_b", vec![a]),
        ("att_full_src_w", vec![4 * s, a]),
        ("att_full_src_b", vec![a]),
        ("att_full_dst_w", vec![4 * s, a]),
        ("att_full_dst_b", vec![a]),
    ]
}

impl ModelParams {
    /// Fresh parameters: embeddings uniform in `(-init_scale, init_scale)`,
    /// weight matrices Glorot-uniform, biases zero.
    pub fn init(dims: Dims, init_scale: f32, rng: &mut ChaCha8Rng) -> ModelParams {
        let entries = catalog(&dims)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("_b1") || name.ends_with("_b2") || name.ends_with("_b")
                {
                    vec![0.0; n]
                } else if name.ends_with("_emb") {
                    (0..n)
                        .map(|_| rng.random_range(-init_scale..init_scale))
                        .collect()
                } else {
                    let (fan_in, fan_out) = (shape[0] as f32, shape[1] as f32);
                    let limit = (6.0 / (fan_in + fan_out)).sqrt();
                    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
                };
                ParamEntry { name, shape, data }
            })
            .collect();
        ModelParams { dims, entries }
    }

    /// Rebuild from checkpoint blocks; names and shapes must match the
    /// catalog for `dims` exactly.
    pub fn from_entries(dims: Dims, entries: Vec<ParamEntry>) -> Result<ModelParams> {
        let expect = catalog(&dims);
        if entries.len() != expect.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expect.len(),
                entries.len()
            )));
        }
        for (e, (name, shape)) in entries.iter().zip(&expect) {
            if e.name != *name || &e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter block mismatch: found {} {:?}, expected {} {:?}",
                    e.name, e.shape, name, shape
                )));
            }
            if e.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    shape
                )));
            }
        }
        Ok(ModelParams { dims, entries })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.data.len()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.entries
            .iter_mut()
            .map(|e| e.data.as_mut_slice())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.data.iter().all(|x| x.is_finite()))
    }

    /// Put every parameter on a tape (tracked) or wrap as constants
    /// (frozen, for evaluation).
    pub fn bind(&self, tape: &Tape, tracked: bool) -> BoundParams {
        let mut it = self.entries.iter().map(|e| {
            if tracked {
                tape.leaf(e.data.clone(), &e.shape)
            } else {
                Tensor::constant(e.data.clone(), &e.shape)
            }
        });
        let mut next = || it.next().expect("catalog exhausted");
        BoundParams {
            entity_emb: next(),
            rel_emb: next(),
            ignn_msg: Mlp2 {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            ignn_upd: Mlp2 {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            agnn_msg: Mlp2 {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            agnn_upd: Mlp2 {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            attend_proj: next(),
            att_bilinear_state: next(),
            att_bilinear_full: next(),
            att_state_src: Mlp1 {
                w: next(),
                b: next(),
            },
            att_state_dst: Mlp1 {
                w: next(),
                b: next(),
            },
            att_full_src: Mlp1 {
                w: next(),
                b: next(),
            },
            att_full_dst: Mlp1 {
                w: next(),
                b: next(),
            },
        }
    }
}

/// Two-layer MLP: leaky-relu first layer, tanh second.
pub struct Mlp2 {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp2 {
    pub fn forward(&self, tape: &Tape, x: &Tensor, slope: f32) -> Result<Tensor> {
        let h = tape.add_bias(&tape.matmul(x, &self.w1)?, &self.b1)?;
        let h = tape.leaky_relu(&h, slope);
        let out = tape.add_bias(&tape.matmul(&h, &self.w2)?, &self.b2)?;
        Ok(tape.tanh(&out))
    }
}

/// Single-layer leaky-relu projection used for attention scoring.
pub struct Mlp1 {
    pub w: Tensor,
    pub b: Tensor,
}

impl Mlp1 {
    pub fn forward(&self, tape: &Tape, x: &Tensor, slope: f32) -> Result<Tensor> {
        let out = tape.add_bias(&tape.matmul(x, &self.w)?, &self.b)?;
        Ok(tape.leaky_relu(&out, slope))
    }
}

/// Tape-bound view of the parameters, in catalog order for gradient and
/// optimizer bookkeeping.
pub struct BoundParams {
    pub entity_emb: Tensor,
    pub rel_emb: Tensor,
    pub ignn_msg: Mlp2,
    pub ignn_upd: Mlp2,
    pub agnn_msg: Mlp2,
    pub agnn_upd: Mlp2,
    pub attend_proj: Tensor,
    pub att_bilinear_state: Tensor,
    pub att_bilinear_full: Tensor,
    pub att_state_src: Mlp1,
    pub att_state_dst: Mlp1,
    pub att_full_src: Mlp1,
    pub att_full_dst: Mlp1,
}

impl BoundParams {
    /// Leaves in catalog order, matching [`ModelParams::entries`].
    pub fn leaves(&self) -> Vec<&Tensor> {
        vec![
            &self.entity_emb,
            &self.rel_emb,
            &self.ignn_msg.w1,
            &self.ignn_msg.b1,
            &self.ignn_msg.w2,
            &self.ignn_msg.b2,
            &self.ignn_upd.w1,
            &self.ignn_upd.b1,
            &self.ignn_upd.w2,
            &self.ignn_upd.b2,
            &self.agnn_msg.w1,
            &self.agnn_msg.b1,
            &self.agnn_msg.w2,
            &self.agnn_msg.b2,
            &self.agnn_upd.w1,
            &self.agnn_upd.b1,
            &self.agnn_upd.w2,
            &self.agnn_upd.b2,
            &self.attend_proj,
            &self.att_bilinear_state,
            &self.att_bilinear_full,
            &self.att_state_src.w,
            &self.att_state_src.b,
            &self.att_state_dst.w,
            &self.att_state_dst.b,
            &self.att_full_src.w,
            &self.att_full_src.b,
            &self.att_full_dst.w,
            &self.att_full_dst.b,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_dims() -> Dims {
        Dims {
            n_entities: 5,
            n_relations: 4,
            state: 6,
            attention: 3,
            hidden: 6,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ModelParams::init(small_dims(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        let b = ModelParams::init(small_dims(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.data, y.data);
        }
        let c = ModelParams::init(small_dims(), 0.05, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(a.entries()[0].data != c.entries()[0].data);
    }

    #[test]
    fn bind_preserves_catalog_order() {
        let m = ModelParams::init(small_dims(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        for (leaf, entry) in bound.leaves().iter().zip(m.entries()) {
            assert_eq!(
                leaf.data(),
                entry.data.as_slice(),
                "misaligned {}",
                entry.name
            );
        }
    }

    #[test]
    fn from_entries_rejects_shape_drift() {
        let m = ModelParams::init(small_dims(), 0.05, &mut ChaCha8Rng::seed_from_u64(1));
        let mut entries: Vec<ParamEntry> = m.entries().to_vec();
        entries[2].shape = vec![1, 1];
        entries[2].data = vec![0.0];
        assert!(ModelParams::from_entries(small_dims(), entries).is_err());
    }
}

//! Batched training: leakage masking, cross-entropy on the final attention
//! distribution, and an epoch loop with Adam plus gradient-norm clipping.
//!
//! The full-graph states are computed once per batch and shared by every
//! query in it; each query then runs its own pruned pass on the same tape
//! so one backward sweep reaches all parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agnn::{run_agnn, QueryContext};
use crate::attention::AttentionVector;
use crate::error::{Error, Result};
use crate::expand::Horizons;
use crate::graph::{KnowledgeGraph, MaskMode, Triple, TripleSet};
use crate::ignn::run_ignn;
use crate::model::ModelParams;
use crate::tensor::optim::{clip_grad_norm, AdamState};
use crate::tensor::{Tape, Tensor};

/// Everything the epoch loop needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_dims: usize,
    pub n_dims_att: usize,
    /// Hidden width of the two-layer MLPs; `None` follows `n_dims`.
    pub mlp_hidden: Option<usize>,
    /// Edge-sample cap per full-graph step.
    pub max_sampling_per_step: usize,
    pub horizons: Horizons,
    pub n_steps_in_ignn: usize,
    pub learning_rate: f32,
    pub grad_clipnorm: f32,
    pub n_epochs: usize,
    pub mask_mode: MaskMode,
    pub loss_epsilon: f32,
    pub leaky_relu_slope: f32,
    pub init_scale: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn hidden_dims(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.n_dims)
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f32,
    pub grad_norm: f32,
    pub millis: u128,
}

/// Per-epoch log: per-batch entries plus aggregates.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// How many times the shared full-graph pass ran (once per batch).
    pub ignn_runs: usize,
    /// Queries whose target was never visited (constant loss, no gradient).
    pub unreached_queries: usize,
}

impl TrainLog {
    pub fn mean_loss(&self) -> f32 {
        if self.entries.is_empty() {
            return f32::NAN;
        }
        self.entries.iter().map(|e| e.loss).sum::<f32>() / self.entries.len() as f32
    }
}

/// Training queries: the train triples themselves, plus each triple's
/// inverse as its own query when the graph was built with inverse edges.
pub fn build_queries(train: &TripleSet, g: &KnowledgeGraph) -> Vec<Triple> {
    let mut queries = train.triples.clone();
    if g.has_inverse() {
        queries.extend(
            train
                .triples
                .iter()
                .map(|t| Triple::new(t.tail, g.inverse_rel(t.rel).expect("base relation"), t.head)),
        );
    }
    queries
}

/// Shuffled partition into batches; the last batch may be short.
pub fn make_batches(
    queries: &[Triple],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Triple>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut shuffled = queries.to_vec();
    shuffled.shuffle(rng);
    shuffled.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// `-log(max(pred[tail], eps))`. A never-visited tail scores zero, giving
/// the constant floor `-log(eps)` with no gradient.
pub fn loss_fn(tape: &Tape, pred: &AttentionVector, tail: usize, eps: f32) -> Result<Tensor> {
    match pred.position(tail) {
        Some(pos) => {
            let p = tape.gather_rows(&pred.values, &[pos])?;
            tape.neg_log_clamped(&p, eps)
        }
        None => Ok(Tensor::constant(vec![-eps.ln()], &[1])),
    }
}

/// Decorrelated per-query RNG stream.
pub fn derive_rng(seed: u64, salt: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salt {
        state ^= s
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(state << 6)
            ^ (state >> 2);
        state = splitmix(state);
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One optimizer step over a single batch with an explicit edge mask
/// (`None` trains on the full graph, as the memorization sanity check
/// does). Runs the shared full-graph pass once, every query's pruned
/// pass, averages the losses, backprops, clips, and applies Adam.
#[allow(clippy::too_many_arguments)]
pub fn train_batch(
    model: &mut ModelParams,
    opt: &mut AdamState,
    g: &KnowledgeGraph,
    batch: &[Triple],
    cfg: &TrainConfig,
    mask: Option<&crate::graph::EdgeMask>,
    epoch: usize,
    batch_idx: usize,
    step: usize,
    log: &mut TrainLog,
) -> Result<()> {
    let slope = cfg.leaky_relu_slope;
    let start = std::time::Instant::now();
    let tape = Tape::new();
    let bound = model.bind(&tape, true);

    let mut ignn_rng = derive_rng(cfg.seed, &[epoch as u64, batch_idx as u64, u64::MAX]);
    let full = run_ignn(
        &tape,
        g,
        &bound,
        cfg.n_steps_in_ignn,
        cfg.max_sampling_per_step,
        slope,
        &mut ignn_rng,
    )?;
    log.ignn_runs += 1;

    let mut total: Option<Tensor> = None;
    let mut constant_loss = 0.0f64;
    for (q_idx, q) in batch.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[epoch as u64, batch_idx as u64, q_idx as u64]);
        let query = QueryContext {
            head: q.head,
            rel: q.rel,
        };
        let (pred, _state) = run_agnn(
            &tape,
            query,
            g,
            &full,
            &bound,
            &cfg.horizons,
            mask,
            slope,
            &mut rng,
        )?;
        let loss = loss_fn(&tape, &pred, q.tail, cfg.loss_epsilon)?;
        if loss.is_tracked() {
            total = Some(match total {
                Some(t) => tape.add(&t, &loss)?,
                None => loss,
            });
        } else {
            log.unreached_queries += 1;
            constant_loss += loss.scalar() as f64;
        }
    }

    let tracked_mean = total.map(|t| tape.scale(&t, 1.0 / batch.len() as f32));
    let mean_loss = tracked_mean.as_ref().map_or(0.0, |t| t.scalar())
        + (constant_loss / batch.len() as f64) as f32;
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {mean_loss} at epoch {epoch} batch {batch_idx}"
        )));
    }

    let mut grad_norm = 0.0;
    if let Some(mean) = &tracked_mean {
        let grads = tape.backward(mean)?;
        let mut grad_vecs: Vec<Vec<f32>> = bound
            .leaves()
            .iter()
            .map(|l| grads.get_or_zeros(l))
            .collect();
        grad_norm = clip_grad_norm(&mut grad_vecs, cfg.grad_clipnorm);
        let mut slices = model.param_slices_mut();
        opt.step(&mut slices, &grad_vecs, cfg.learning_rate)?;
    }

    log.entries.push(LogEntry {
        step,
        loss: mean_loss,
        grad_norm,
        millis: start.elapsed().as_millis(),
    });
    Ok(())
}

/// One pass over the given batches, masking each batch's leakage edges
/// per the configured mode.
#[allow(clippy::too_many_arguments)]
pub fn train_batches(
    model: &mut ModelParams,
    opt: &mut AdamState,
    g: &KnowledgeGraph,
    batches: &[Vec<Triple>],
    cfg: &TrainConfig,
    epoch: usize,
    step_offset: usize,
    log: &mut TrainLog,
) -> Result<()> {
    for (batch_idx, batch) in batches.iter().enumerate() {
        let mask = g.mask_for_batch(batch, cfg.mask_mode);
        train_batch(
            model,
            opt,
            g,
            batch,
            cfg,
            Some(&mask),
            epoch,
            batch_idx,
            step_offset + batch_idx,
            log,
        )?;
    }
    Ok(())
}

/// One epoch: shuffle queries, partition, and run [`train_batches`].
pub fn train_epoch(
    model: &mut ModelParams,
    opt: &mut AdamState,
    g: &KnowledgeGraph,
    train: &TripleSet,
    cfg: &TrainConfig,
    epoch: usize,
    step_offset: usize,
) -> Result<TrainLog> {
    let queries = build_queries(train, g);
    let mut batch_rng = derive_rng(cfg.seed, &[epoch as u64, u64::MAX, u64::MAX]);
    let batches = make_batches(&queries, cfg.batch_size, &mut batch_rng);
    let mut log = TrainLog::default();
    train_batches(model, opt, g, &batches, cfg, epoch, step_offset, &mut log)?;
    Ok(log)
}

//! Finite-difference verification of the analytic gradients.
//!
//! Every reference forward here is an independent 64-bit reimplementation
//! written as direct loops; nothing in this module calls back into the
//! tape kernels it checks. Central differences with `h = 1e-3` are
//! compared against the tape's gradients elementwise, with the relative
//! error denominated by `max(|a|, |b|, 0.01)` so near-zero entries are
//! judged on an absolute scale consistent with f32 forward noise.
//!
//! The full-pipeline check runs one query end to end on a small random
//! graph with saturating horizons, so top-k selection and edge sampling
//! keep every candidate and the computation stays smooth under
//! perturbation.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agnn::{run_agnn, QueryContext};
use crate::error::{Error, Result};
use crate::expand::Horizons;
use crate::graph::{KnowledgeGraph, Triple, TripleSet};
use crate::ignn::run_ignn;
use crate::model::{Dims, ModelParams};
use crate::tensor::{Tape, Tensor};
use crate::train::loss_fn;

pub const FD_STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-2;

/// One named check and its worst elementwise error.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "gradcheck {:28} max_rel_err={:.3e} tol={:.0e} -> {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn max_rel_err(analytic: &[f32], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &b)| rel_err(a as f64, b))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` w.r.t. every element of `inputs`.
fn fd_gradients(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + FD_STEP;
            let up = f(&work);
            work[i][j] = orig - FD_STEP;
            let down = f(&work);
            work[i][j] = orig;
            g[j] = (up - down) / (2.0 * FD_STEP);
        }
        grads.push(g);
    }
    grads
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---------------------------------------------------------------------
// Reference forwards (f64, independent of the tape kernels).
// ---------------------------------------------------------------------

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn ref_leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn ref_segment_softmax(scores: &[f64], ids: &[usize], n_segments: usize) -> Vec<f64> {
    let mut maxes = vec![f64::NEG_INFINITY; n_segments];
    for (e, &s) in ids.iter().enumerate() {
        maxes[s] = maxes[s].max(scores[e]);
    }
    let mut out: Vec<f64> = ids
        .iter()
        .zip(scores)
        .map(|(&s, &x)| (x - maxes[s]).exp())
        .collect();
    let mut sums = vec![0.0; n_segments];
    for (e, &s) in ids.iter().enumerate() {
        sums[s] += out[e];
    }
    for (e, &s) in ids.iter().enumerate() {
        out[e] /= sums[s];
    }
    out
}

fn weighted(out: &[f64], w: &[f64]) -> f64 {
    out.iter().zip(w).map(|(o, w)| o * w).sum()
}

// ---------------------------------------------------------------------
// Per-op checks. Each builds a random case, wraps the op into a scalar
// via a fixed random weighting, and compares tape gradients to central
// differences of the reference forward.
// ---------------------------------------------------------------------

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values bounded away from zero, for kinked activations.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.0f32);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

type RefForward = Box<dyn Fn(&[Vec<f64>]) -> f64>;

struct OpCase {
    /// Analytic gradients per tracked input, from the tape.
    analytic: Vec<Vec<f32>>,
    /// Reference forward over f64 copies of the tracked inputs.
    reference: RefForward,
    inputs: Vec<Vec<f64>>,
}

fn run_case(case: OpCase) -> f64 {
    let fd = fd_gradients(case.reference.as_ref(), &case.inputs);
    case.analytic
        .iter()
        .zip(&fd)
        .map(|(a, f)| max_rel_err(a, f))
        .fold(0.0, f64::max)
}

fn grads_of(tape: &Tape, loss: &Tensor, tracked: &[&Tensor]) -> Vec<Vec<f32>> {
    let grads = tape.backward(loss).expect("backward");
    tracked.iter().map(|t| grads.get_or_zeros(t)).collect()
}

fn case_matmul(rng: &mut ChaCha8Rng) -> OpCase {
    let (m, k, n) = (
        rng.random_range(1..5usize),
        rng.random_range(1..5usize),
        rng.random_range(1..5usize),
    );
    let a = rand_vec(rng, m * k, -1.0, 1.0);
    let b = rand_vec(rng, k * n, -1.0, 1.0);
    let w = to_f64(&rand_vec(rng, m * n, -1.0, 1.0));

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[m, k]);
    let tb = tape.leaf(b.clone(), &[k, n]);
    let out = tape.matmul(&ta, &tb).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[m, n]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ta, &tb]),
        inputs: vec![to_f64(&a), to_f64(&b)],
        reference: Box::new(move |ins| weighted(&ref_matmul(&ins[0], &ins[1], m, k, n), &w)),
    }
}

fn case_elementwise(rng: &mut ChaCha8Rng, kind: &str) -> OpCase {
    let n = rng.random_range(1..12usize);
    let a = match kind {
        "leaky_relu" => rand_vec_off_zero(rng, n),
        _ => rand_vec(rng, n, -1.0, 1.0),
    };
    let b = rand_vec(rng, n, -1.0, 1.0);
    let c = rng.random_range(-2.0..2.0f32);
    let slope = 0.2f32;
    let w = to_f64(&rand_vec(rng, n, -1.0, 1.0));

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[n]);
    let tb = tape.leaf(b.clone(), &[n]);
    let (out, tracked, inputs): (Tensor, Vec<&Tensor>, Vec<Vec<f64>>) = match kind {
        "add" => (
            tape.add(&ta, &tb).unwrap(),
            vec![&ta, &tb],
            vec![to_f64(&a), to_f64(&b)],
        ),
        "mul" => (
            tape.mul(&ta, &tb).unwrap(),
            vec![&ta, &tb],
            vec![to_f64(&a), to_f64(&b)],
        ),
        "scale" => (tape.scale(&ta, c), vec![&ta], vec![to_f64(&a)]),
        "leaky_relu" => (tape.leaky_relu(&ta, slope), vec![&ta], vec![to_f64(&a)]),
        "tanh" => (tape.tanh(&ta), vec![&ta], vec![to_f64(&a)]),
        _ => unreachable!(),
    };
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[n]),
            )
            .unwrap(),
    );
    let kind = kind.to_string();
    OpCase {
        analytic: grads_of(&tape, &loss, &tracked),
        inputs,
        reference: Box::new(move |ins| {
            let out: Vec<f64> = match kind.as_str() {
                "add" => ins[0].iter().zip(&ins[1]).map(|(x, y)| x + y).collect(),
                "mul" => ins[0].iter().zip(&ins[1]).map(|(x, y)| x * y).collect(),
                "scale" => ins[0].iter().map(|x| x * c as f64).collect(),
                "leaky_relu" => ins[0].iter().map(|&x| ref_leaky(x, slope as f64)).collect(),
                "tanh" => ins[0].iter().map(|x| x.tanh()).collect(),
                _ => unreachable!(),
            };
            weighted(&out, &w)
        }),
    }
}

fn case_concat(rng: &mut ChaCha8Rng) -> OpCase {
    let rows = rng.random_range(1..5usize);
    let widths = [
        rng.random_range(1..4usize),
        rng.random_range(1..4usize),
        rng.random_range(1..4usize),
    ];
    let parts: Vec<Vec<f32>> = widths
        .iter()
        .map(|&w| rand_vec(rng, rows * w, -1.0, 1.0))
        .collect();
    let total: usize = widths.iter().sum();
    let w = to_f64(&rand_vec(rng, rows * total, -1.0, 1.0));

    let tape = Tape::new();
    let tensors: Vec<Tensor> = parts
        .iter()
        .zip(&widths)
        .map(|(p, &wd)| tape.leaf(p.clone(), &[rows, wd]))
        .collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    let out = tape.concat_cols(&refs).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[rows, total]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &refs),
        inputs: parts.iter().map(|p| to_f64(p)).collect(),
        reference: Box::new(move |ins| {
            let mut out = vec![0.0; rows * total];
            for i in 0..rows {
                let mut off = 0;
                for (p, &wd) in ins.iter().zip(&widths) {
                    out[i * total + off..i * total + off + wd]
                        .copy_from_slice(&p[i * wd..(i + 1) * wd]);
                    off += wd;
                }
            }
            weighted(&out, &w)
        }),
    }
}

fn case_gather_scatter_segment(rng: &mut ChaCha8Rng, kind: &str) -> OpCase {
    let rows = rng.random_range(2..6usize);
    let width = rng.random_range(1..4usize);
    let a = rand_vec(rng, rows * width, -1.0, 1.0);

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[rows, width]);
    match kind {
        "gather_rows" => {
            let m = rng.random_range(1..8usize);
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..rows)).collect();
            let w = to_f64(&rand_vec(rng, m * width, -1.0, 1.0));
            let out = tape.gather_rows(&ta, &idx).unwrap();
            let loss = tape.sum_all(
                &tape
                    .mul(
                        &out,
                        &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[m, width]),
                    )
                    .unwrap(),
            );
            OpCase {
                analytic: grads_of(&tape, &loss, &[&ta]),
                inputs: vec![to_f64(&a)],
                reference: Box::new(move |ins| {
                    let mut out = vec![0.0; idx.len() * width];
                    for (o, &i) in idx.iter().enumerate() {
                        out[o * width..(o + 1) * width]
                            .copy_from_slice(&ins[0][i * width..(i + 1) * width]);
                    }
                    weighted(&out, &w)
                }),
            }
        }
        "scatter_rows" => {
            let n_out = rows + rng.random_range(0..4usize);
            let mut pos: Vec<usize> = (0..n_out).collect();
            for i in (1..pos.len()).rev() {
                pos.swap(i, rng.random_range(0..=i));
            }
            pos.truncate(rows);
            let w = to_f64(&rand_vec(rng, n_out * width, -1.0, 1.0));
            let out = tape.scatter_rows(&ta, &pos, n_out).unwrap();
            let loss = tape.sum_all(
                &tape
                    .mul(
                        &out,
                        &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[n_out, width]),
                    )
                    .unwrap(),
            );
            OpCase {
                analytic: grads_of(&tape, &loss, &[&ta]),
                inputs: vec![to_f64(&a)],
                reference: Box::new(move |ins| {
                    let mut out = vec![0.0; n_out * width];
                    for (i, &p) in pos.iter().enumerate() {
                        out[p * width..(p + 1) * width]
                            .copy_from_slice(&ins[0][i * width..(i + 1) * width]);
                    }
                    weighted(&out, &w)
                }),
            }
        }
        "segment_sum" => {
            let n_segments = rng.random_range(1..5usize);
            let ids: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n_segments)).collect();
            let w = to_f64(&rand_vec(rng, n_segments * width, -1.0, 1.0));
            let out = tape.segment_sum(&ta, &ids, n_segments).unwrap();
            let loss = tape.sum_all(
                &tape
                    .mul(
                        &out,
                        &Tensor::constant(
                            w.iter().map(|&x| x as f32).collect(),
                            &[n_segments, width],
                        ),
                    )
                    .unwrap(),
            );
            OpCase {
                analytic: grads_of(&tape, &loss, &[&ta]),
                inputs: vec![to_f64(&a)],
                reference: Box::new(move |ins| {
                    let mut out = vec![0.0; n_segments * width];
                    for (e, &s) in ids.iter().enumerate() {
                        for j in 0..width {
                            out[s * width + j] += ins[0][e * width + j];
                        }
                    }
                    weighted(&out, &w)
                }),
            }
        }
        _ => unreachable!(),
    }
}

fn case_segment_softmax(rng: &mut ChaCha8Rng) -> OpCase {
    let n_segments = rng.random_range(1..4usize);
    // Every segment gets at least one member.
    let mut ids: Vec<usize> = (0..n_segments).collect();
    for _ in 0..rng.random_range(0..8usize) {
        ids.push(rng.random_range(0..n_segments));
    }
    ids.sort_unstable();
    let n = ids.len();
    let scores = rand_vec(rng, n, -2.0, 2.0);
    let w = to_f64(&rand_vec(rng, n, -1.0, 1.0));

    let tape = Tape::new();
    let ts = tape.leaf(scores.clone(), &[n]);
    let out = tape.segment_softmax(&ts, &ids, n_segments).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[n]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ts]),
        inputs: vec![to_f64(&scores)],
        reference: Box::new(move |ins| {
            weighted(&ref_segment_softmax(&ins[0], &ids, n_segments), &w)
        }),
    }
}

fn case_reductions(rng: &mut ChaCha8Rng, kind: &str) -> OpCase {
    let rows = rng.random_range(1..5usize);
    let width = rng.random_range(1..5usize);
    let a = rand_vec(rng, rows * width, -1.0, 1.0);
    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[rows, width]);
    match kind {
        "sum_all" => {
            let out = tape.sum_all(&ta);
            OpCase {
                analytic: grads_of(&tape, &out, &[&ta]),
                inputs: vec![to_f64(&a)],
                reference: Box::new(move |ins| ins[0].iter().sum()),
            }
        }
        "row_sum" => {
            let w = to_f64(&rand_vec(rng, rows, -1.0, 1.0));
            let out = tape.row_sum(&ta).unwrap();
            let loss = tape.sum_all(
                &tape
                    .mul(
                        &out,
                        &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[rows]),
                    )
                    .unwrap(),
            );
            OpCase {
                analytic: grads_of(&tape, &loss, &[&ta]),
                inputs: vec![to_f64(&a)],
                reference: Box::new(move |ins| {
                    let sums: Vec<f64> = (0..rows)
                        .map(|i| ins[0][i * width..(i + 1) * width].iter().sum())
                        .collect();
                    weighted(&sums, &w)
                }),
            }
        }
        _ => unreachable!(),
    }
}

fn case_scale_rows(rng: &mut ChaCha8Rng) -> OpCase {
    let rows = rng.random_range(1..5usize);
    let width = rng.random_range(1..5usize);
    let a = rand_vec(rng, rows * width, -1.0, 1.0);
    let s = rand_vec(rng, rows, -1.0, 1.0);
    let w = to_f64(&rand_vec(rng, rows * width, -1.0, 1.0));

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[rows, width]);
    let ts = tape.leaf(s.clone(), &[rows]);
    let out = tape.scale_rows(&ta, &ts).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[rows, width]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ta, &ts]),
        inputs: vec![to_f64(&a), to_f64(&s)],
        reference: Box::new(move |ins| {
            let out: Vec<f64> = (0..rows * width)
                .map(|i| ins[0][i] * ins[1][i / width])
                .collect();
            weighted(&out, &w)
        }),
    }
}

fn case_add_bias(rng: &mut ChaCha8Rng) -> OpCase {
    let rows = rng.random_range(1..5usize);
    let width = rng.random_range(1..5usize);
    let a = rand_vec(rng, rows * width, -1.0, 1.0);
    let b = rand_vec(rng, width, -1.0, 1.0);
    let w = to_f64(&rand_vec(rng, rows * width, -1.0, 1.0));

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[rows, width]);
    let tb = tape.leaf(b.clone(), &[width]);
    let out = tape.add_bias(&ta, &tb).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[rows, width]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ta, &tb]),
        inputs: vec![to_f64(&a), to_f64(&b)],
        reference: Box::new(move |ins| {
            let out: Vec<f64> = (0..rows * width)
                .map(|i| ins[0][i] + ins[1][i % width])
                .collect();
            weighted(&out, &w)
        }),
    }
}

fn case_div_scalar(rng: &mut ChaCha8Rng) -> OpCase {
    let n = rng.random_range(1..8usize);
    let a = rand_vec(rng, n, -1.0, 1.0);
    let s = vec![rng.random_range(0.5..2.0f32) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
    let w = to_f64(&rand_vec(rng, n, -1.0, 1.0));

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[n]);
    let ts = tape.leaf(s.clone(), &[1]);
    let out = tape.div_scalar(&ta, &ts).unwrap();
    let loss = tape.sum_all(
        &tape
            .mul(
                &out,
                &Tensor::constant(w.iter().map(|&x| x as f32).collect(), &[n]),
            )
            .unwrap(),
    );
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ta, &ts]),
        inputs: vec![to_f64(&a), to_f64(&s)],
        reference: Box::new(move |ins| {
            let out: Vec<f64> = ins[0].iter().map(|x| x / ins[1][0]).collect();
            weighted(&out, &w)
        }),
    }
}

fn case_neg_log(rng: &mut ChaCha8Rng) -> OpCase {
    let a = vec![rng.random_range(0.05..1.0f32)];
    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[1]);
    let loss = tape.neg_log_clamped(&ta, 1e-20).unwrap();
    OpCase {
        analytic: grads_of(&tape, &loss, &[&ta]),
        inputs: vec![to_f64(&a)],
        reference: Box::new(move |ins| -(ins[0][0].max(1e-20)).ln()),
    }
}

pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "leaky_relu",
    "tanh",
    "concat_cols",
    "gather_rows",
    "scatter_rows",
    "segment_sum",
    "segment_softmax",
    "sum_all",
    "row_sum",
    "scale_rows",
    "add_bias",
    "div_scalar",
    "neg_log_clamped",
];

/// Check one op over `n_cases` random shapes/seeds.
pub fn check_op(name: &str, n_cases: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_cases {
        let case = match name {
            "matmul" => case_matmul(&mut rng),
            "add" | "mul" | "scale" | "leaky_relu" | "tanh" => case_elementwise(&mut rng, name),
            "concat_cols" => case_concat(&mut rng),
            "gather_rows" | "scatter_rows" | "segment_sum" => {
                case_gather_scatter_segment(&mut rng, name)
            }
            "segment_softmax" => case_segment_softmax(&mut rng),
            "sum_all" | "row_sum" => case_reductions(&mut rng, name),
            "scale_rows" => case_scale_rows(&mut rng),
            "add_bias" => case_add_bias(&mut rng),
            "div_scalar" => case_div_scalar(&mut rng),
            "neg_log_clamped" => case_neg_log(&mut rng),
            _ => panic!("unknown op {name}"),
        };
        worst = worst.max(run_case(case));
    }
    CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: TOLERANCE,
    }
}

/// All per-op checks.
pub fn check_all_ops(n_cases: usize, seed: u64) -> Vec<CheckReport> {
    OP_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| check_op(n, n_cases, seed + i as u64))
        .collect()
}

// ---------------------------------------------------------------------
// Full-pipeline reference model.
// ---------------------------------------------------------------------

/// f64 copies of the parameters, keyed by catalog name.
pub struct RefParams {
    dims: Dims,
    map: HashMap<&'static str, Vec<f64>>,
}

impl RefParams {
    pub fn of(model: &ModelParams) -> RefParams {
        RefParams {
            dims: model.dims,
            map: model
                .entries()
                .iter()
                .map(|e| (e.name, to_f64(&e.data)))
                .collect(),
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.map[name]
    }

    /// Mutable access for perturbation drivers.
    pub fn map_mut(&mut self, name: &str) -> &mut [f64] {
        self.map.get_mut(name).expect("unknown parameter name")
    }

    fn row(&self, name: &str, i: usize, width: usize) -> &[f64] {
        &self.map[name][i * width..(i + 1) * width]
    }
}

/// Rolling record of the sign pattern of every kinked (leaky-relu)
/// pre-activation, in evaluation order. Two evaluations with different
/// signatures lie in different linear regions, so a finite difference
/// across them does not measure the derivative.
#[derive(Default, Clone, Copy, PartialEq, Eq)]
pub struct KinkSignature(u64);

impl KinkSignature {
    fn push(&mut self, negative: bool) {
        self.0 = self
            .0
            .rotate_left(1)
            .wrapping_mul(0x100000001b3)
            .wrapping_add(negative as u64);
    }
}

fn ref_mlp2(
    params: &RefParams,
    prefix: &str,
    x: &[f64],
    hidden: usize,
    out_dim: usize,
    slope: f64,
    sig: &mut KinkSignature,
) -> Vec<f64> {
    let w1 = params.get(&format!("{prefix}_w1"));
    let b1 = params.get(&format!("{prefix}_b1"));
    let w2 = params.get(&format!("{prefix}_w2"));
    let b2 = params.get(&format!("{prefix}_b2"));
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = b1[j];
        for (i, xv) in x.iter().enumerate() {
            acc += xv * w1[i * hidden + j];
        }
        sig.push(acc <= 0.0);
        h[j] = ref_leaky(acc, slope);
    }
    let mut out = vec![0.0; out_dim];
    for j in 0..out_dim {
        let mut acc = b2[j];
        for (i, hv) in h.iter().enumerate() {
            acc += hv * w2[i * out_dim + j];
        }
        out[j] = acc.tanh();
    }
    out
}

fn ref_mlp1(
    params: &RefParams,
    prefix: &str,
    x: &[f64],
    out_dim: usize,
    slope: f64,
    sig: &mut KinkSignature,
) -> Vec<f64> {
    let w = params.get(&format!("{prefix}_w"));
    let b = params.get(&format!("{prefix}_b"));
    (0..out_dim)
        .map(|j| {
            let mut acc = b[j];
            for (i, xv) in x.iter().enumerate() {
                acc += xv * w[i * out_dim + j];
            }
            sig.push(acc <= 0.0);
            ref_leaky(acc, slope)
        })
        .collect()
}

fn ref_bilinear(u: &[f64], w: &[f64], v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for (i, &uv) in u.iter().enumerate() {
        for (j, &vv) in v.iter().enumerate() {
            acc += uv * w[i * n + j] * vv;
        }
    }
    acc
}

/// Reference forward of the whole pipeline under saturating horizons:
/// every step attends from all supported nodes, samples every out-edge,
/// and attends to every candidate destination.
#[allow(clippy::too_many_arguments)]
pub fn ref_full_forward(
    params: &RefParams,
    g: &KnowledgeGraph,
    query: QueryContext,
    tail: usize,
    ignn_steps: usize,
    agnn_steps: usize,
    slope: f64,
    eps: f64,
) -> f64 {
    ref_full_forward_sig(params, g, query, tail, ignn_steps, agnn_steps, slope, eps).0
}

/// Same as [`ref_full_forward`] but also reports the activation-region
/// signature of the evaluation.
#[allow(clippy::too_many_arguments)]
pub fn ref_full_forward_sig(
    params: &RefParams,
    g: &KnowledgeGraph,
    query: QueryContext,
    tail: usize,
    ignn_steps: usize,
    agnn_steps: usize,
    slope: f64,
    eps: f64,
) -> (f64, KinkSignature) {
    let mut sig = KinkSignature::default();
    let d = params.dims.state;
    let hidden = params.dims.hidden;
    let a_dim = params.dims.attention;
    let n = g.n_entities();

    // Full-graph pass over every edge.
    let mut full: Vec<f64> = params.get("entity_emb").to_vec();
    for _ in 0..ignn_steps {
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for id in 0..g.n_edges() {
            let e = g.edge(id);
            let mut x = Vec::with_capacity(3 * d);
            x.extend_from_slice(&full[e.src * d..(e.src + 1) * d]);
            x.extend_from_slice(params.row("rel_emb", e.rel, d));
            x.extend_from_slice(&full[e.dst * d..(e.dst + 1) * d]);
            let msg = ref_mlp2(params, "ignn_msg", &x, hidden, d, slope, &mut sig);
            for j in 0..d {
                sums[e.dst * d + j] += msg[j];
            }
            counts[e.dst] += 1;
        }
        let mut next = full.clone();
        for v in 0..n {
            let scale = if counts[v] > 0 {
                1.0 / (counts[v] as f64).sqrt()
            } else {
                0.0
            };
            let mut x = Vec::with_capacity(3 * d);
            x.extend_from_slice(&full[v * d..(v + 1) * d]);
            x.extend(sums[v * d..(v + 1) * d].iter().map(|s| s * scale));
            x.extend_from_slice(params.row("entity_emb", v, d));
            let delta = ref_mlp2(params, "ignn_upd", &x, hidden, d, slope, &mut sig);
            for j in 0..d {
                next[v * d + j] += delta[j];
            }
        }
        full = next;
    }

    let q_head = params.row("entity_emb", query.head, d).to_vec();
    let q_rel = params.row("rel_emb", query.rel, d).to_vec();
    let ctx_of = |rel: usize| -> Vec<f64> {
        let mut c = Vec::with_capacity(3 * d);
        c.extend_from_slice(params.row("rel_emb", rel, d));
        c.extend_from_slice(&q_head);
        c.extend_from_slice(&q_rel);
        c
    };

    // Pruned pass with everything saturated.
    let mut states: HashMap<usize, Vec<f64>> = HashMap::from([(
        query.head,
        full[query.head * d..(query.head + 1) * d].to_vec(),
    )]);
    let mut attention: HashMap<usize, f64> = HashMap::from([(query.head, 1.0)]);

    for _ in 0..agnn_steps {
        let mut sources: Vec<usize> = attention.keys().copied().collect();
        sources.sort_unstable();
        // All out-edges of every source.
        let mut edges: Vec<(usize, usize, usize)> = Vec::new();
        for &s in &sources {
            for id in g.out_edge_ids(s) {
                let e = g.edge(id);
                edges.push((e.src, e.rel, e.dst));
            }
        }
        let zero = vec![0.0; d];
        let state_of = |v: usize| -> &[f64] { states.get(&v).map_or(&zero, |s| s) };

        // Merged per-pair logits.
        let mut pair_logits: HashMap<(usize, usize), f64> = HashMap::new();
        for &(src, rel, dst) in &edges {
            let ctx = ctx_of(rel);
            let mut src_in = state_of(src).to_vec();
            src_in.extend_from_slice(&ctx);
            let mut dst_in = state_of(dst).to_vec();
            dst_in.extend_from_slice(&ctx);
            let mut full_in = full[dst * d..(dst + 1) * d].to_vec();
            full_in.extend_from_slice(&ctx);

            let u1 = ref_mlp1(params, "att_state_src", &src_in, a_dim, slope, &mut sig);
            let v1 = ref_mlp1(params, "att_state_dst", &dst_in, a_dim, slope, &mut sig);
            let s1 = ref_bilinear(&u1, params.get("att_bilinear_state"), &v1);
            let u2 = ref_mlp1(params, "att_full_src", &src_in, a_dim, slope, &mut sig);
            let v2 = ref_mlp1(params, "att_full_dst", &full_in, a_dim, slope, &mut sig);
            let s2 = ref_bilinear(&u2, params.get("att_bilinear_full"), &v2);
            *pair_logits.entry((src, dst)).or_insert(0.0) += s1 + s2;
        }

        // Per-source softmax over pairs, then flow and renormalize.
        let mut probs: HashMap<(usize, usize), f64> = HashMap::new();
        for &s in &sources {
            let mut dsts: Vec<usize> = pair_logits
                .keys()
                .filter(|&&(src, _)| src == s)
                .map(|&(_, dst)| dst)
                .collect();
            dsts.sort_unstable();
            let logits: Vec<f64> = dsts.iter().map(|&t| pair_logits[&(s, t)]).collect();
            let sm = ref_segment_softmax(&logits, &vec![0; logits.len()], 1);
            for (t, p) in dsts.iter().zip(sm) {
                probs.insert((s, *t), p);
            }
        }
        let mut next_attention: HashMap<usize, f64> = HashMap::new();
        for (&(s, t), &p) in &probs {
            *next_attention.entry(t).or_insert(0.0) += p * attention[&s];
        }
        let total: f64 = next_attention.values().sum();
        for v in next_attention.values_mut() {
            *v /= total;
        }

        // Messages over every edge (targets saturate), aggregated per dst.
        let mut msg_sums: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut msg_counts: HashMap<usize, usize> = HashMap::new();
        for &(src, rel, dst) in &edges {
            let mut x = state_of(src).to_vec();
            x.extend_from_slice(&ctx_of(rel));
            x.extend_from_slice(state_of(dst));
            let msg = ref_mlp2(params, "agnn_msg", &x, hidden, d, slope, &mut sig);
            let sum = msg_sums.entry(dst).or_insert_with(|| vec![0.0; d]);
            for j in 0..d {
                sum[j] += msg[j];
            }
            *msg_counts.entry(dst).or_insert(0) += 1;
        }

        // Targets: sources plus every candidate destination.
        let mut targets: Vec<usize> = sources
            .iter()
            .copied()
            .chain(next_attention.keys().copied())
            .collect();
        targets.sort_unstable();
        targets.dedup();

        let proj = params.get("attend_proj");
        let mut new_states = states.clone();
        for &v in &targets {
            let pooled: Vec<f64> = match msg_sums.get(&v) {
                Some(sum) => {
                    let scale = 1.0 / (msg_counts[&v] as f64).sqrt();
                    sum.iter().map(|s| s * scale).collect()
                }
                None => vec![0.0; d],
            };
            let att = next_attention.get(&v).copied().unwrap_or(0.0);
            let fv = &full[v * d..(v + 1) * d];
            let mut attended = vec![0.0; d];
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += fv[i] * proj[i * d + j];
                }
                attended[j] = att * acc;
            }
            let mut x = state_of(v).to_vec();
            x.extend_from_slice(&pooled);
            x.extend_from_slice(&attended);
            x.extend_from_slice(&q_head);
            x.extend_from_slice(&q_rel);
            let delta = ref_mlp2(params, "agnn_upd", &x, hidden, d, slope, &mut sig);
            let entry = new_states.entry(v).or_insert_with(|| vec![0.0; d]);
            for j in 0..d {
                entry[j] += delta[j];
            }
        }
        states = new_states;
        attention = next_attention;
    }

    let p = attention.get(&tail).copied().unwrap_or(0.0);
    (-(p.max(eps)).ln(), sig)
}

/// The graph used by the full-pipeline check: a small random KG with
/// inverse edges and self-loops.
pub fn gradcheck_graph(n_entities: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_rel = 3usize;
    // Node 0 is the query head; give it a real out-edge so the expansion
    // is never degenerate.
    let mut triples = vec![Triple::new(0, 0, 1)];
    for _ in 0..n_entities * 2 {
        let t = Triple::new(
            rng.random_range(0..n_entities),
            rng.random_range(0..n_rel),
            rng.random_range(0..n_entities),
        );
        if t.head != t.tail && !triples.contains(&t) {
            triples.push(t);
        }
    }
    let ts = TripleSet {
        triples,
        n_duplicates: 0,
    };
    KnowledgeGraph::build(&ts, n_entities, n_rel, true, true).expect("synthetic graph")
}

/// End-to-end gradient check: one query on a 10-node graph, every
/// parameter element perturbed both ways in 64-bit, against the tape's
/// analytic gradients at the same point.
#[allow(clippy::needless_range_loop)]
pub fn check_full_pipeline(seed: u64) -> Result<CheckReport> {
    let g = gradcheck_graph(10, seed);
    let dims = Dims {
        n_entities: g.n_entities(),
        n_relations: g.n_relations(),
        state: 8,
        attention: 4,
        hidden: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let model = ModelParams::init(dims, 0.3, &mut rng);
    let query = QueryContext { head: 0, rel: 1 };
    let (ignn_steps, agnn_steps) = (2usize, 2usize);
    let slope = 0.2f32;
    let eps = 1e-20f32;
    // Saturating horizons: every selection keeps all candidates, so the
    // pipeline is smooth under perturbation.
    let horizons = Horizons::new(1000, 1000, 1000, agnn_steps);

    // Analytic gradients from the tape.
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mut run_rng = ChaCha8Rng::seed_from_u64(0);
    let full = run_ignn(
        &tape,
        &g,
        &bound,
        ignn_steps,
        g.n_edges(),
        slope,
        &mut run_rng,
    )?;
    let (pred, _) = run_agnn(
        &tape,
        query,
        &g,
        &full,
        &bound,
        &horizons,
        None,
        slope,
        &mut run_rng,
    )?;
    // Any reached node works as the supervision target; prefer one that is
    // not the head so the loss exercises multi-hop structure.
    let tail = pred
        .nodes()
        .iter()
        .copied()
        .filter(|&n| n != query.head)
        .max_by(|&a, &b| {
            pred.score(a)
                .partial_cmp(&pred.score(b))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(query.head);
    let loss = loss_fn(&tape, &pred, tail, eps)?;
    if !loss.is_tracked() {
        return Err(Error::Numeric(
            "gradcheck query lost its gradient path".into(),
        ));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f32>> = bound
        .leaves()
        .iter()
        .map(|l| grads.get_or_zeros(l))
        .collect();
    if analytic.iter().all(|g| g.iter().all(|&x| x == 0.0)) {
        return Err(Error::Numeric(
            "gradcheck gradients are identically zero".into(),
        ));
    }

    // Finite differences in f64 through the reference forward. When a
    // +-h interval crosses a leaky-relu kink the difference quotient does
    // not measure the derivative, so such elements re-sample at smaller
    // steps until the evaluation stays inside one linear region.
    let mut refp = RefParams::of(&model);
    let (_, base_sig) = ref_full_forward_sig(
        &refp,
        &g,
        query,
        tail,
        ignn_steps,
        agnn_steps,
        slope as f64,
        eps as f64,
    );
    let names: Vec<&'static str> = model.entries().iter().map(|e| e.name).collect();
    let mut worst = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let len = refp.map[name].len();
        for j in 0..len {
            let orig = refp.map[name][j];
            let mut eval = |h: f64| {
                refp.map.get_mut(name).unwrap()[j] = orig + h;
                let out = ref_full_forward_sig(
                    &refp,
                    &g,
                    query,
                    tail,
                    ignn_steps,
                    agnn_steps,
                    slope as f64,
                    eps as f64,
                );
                refp.map.get_mut(name).unwrap()[j] = orig;
                out
            };
            let mut err = f64::INFINITY;
            for h in [FD_STEP, 1e-5, 1e-7] {
                let (up, sig_up) = eval(h);
                let (down, sig_down) = eval(-h);
                let fd = (up - down) / (2.0 * h);
                err = rel_err(analytic[pi][j] as f64, fd);
                if sig_up == base_sig && sig_down == base_sig {
                    break;
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(CheckReport {
        name: "full_pipeline".to_string(),
        max_rel_err: worst,
        tolerance: TOLERANCE,
    })
}

/// Everything the `gradcheck` command runs.
pub fn run_all(n_cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = check_all_ops(n_cases, seed);
    reports.push(check_full_pipeline(seed)?);
    Ok(reports)
}

//! Command-line entry points: train, eval, stats, visualize,
//! validate-proposition, gradcheck.
//!
//! Every subcommand accepts `--config <file>` plus `--key=value` overrides
//! for any configuration key (flags beat the file, the file beats
//! defaults). Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpmpn::agnn::QueryContext;
use dpmpn::checkpoint;
use dpmpn::config::Config;
use dpmpn::error::Error;
use dpmpn::eval::{self, KnownTrue};
use dpmpn::expand::validate_proposition;
use dpmpn::export::export_dot;
use dpmpn::gradcheck;
use dpmpn::graph::{dataset_stats, Dataset};
use dpmpn::model::{Dims, ModelParams};
use dpmpn::tensor::optim::AdamState;
use dpmpn::train::{build_queries, derive_rng, make_batches, train_batches, TrainLog};

#[derive(Parser)]
#[command(
    name = "dpmpn",
    version,
    about = "Dynamically pruned message passing networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any `--key=value` configuration override, e.g. `--n_steps_in_AGNN=8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints to the output directory.
    Train(CommonArgs),
    /// Evaluate filtered ranking metrics on a split.
    Eval {
        /// Checkpoint to load; a fresh model is initialized when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report metrics grouped by relation id.
        #[arg(long = "by_relation")]
        by_relation: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Dataset statistics (multi-edge proportions, mean path length).
    Stats(CommonArgs),
    /// Export one query's attention subgraph as DOT.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query head entity name.
        #[arg(long)]
        head: String,
        /// Query relation name.
        #[arg(long)]
        rel: String,
        /// Minimum peak attention for a node to be drawn.
        #[arg(long, default_value_t = 0.05)]
        threshold: f32,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte-Carlo validation of the subgraph growth bound.
    ValidateProposition {
        /// Degree caps to test, comma separated.
        #[arg(long, default_value = "3,4,5")]
        degree: String,
        /// Expansion step counts to test, comma separated.
        #[arg(long, default_value = "1,2,3,4")]
        steps: String,
        #[arg(long, default_value_t = 1000)]
        trials: u32,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-difference verification of all gradients.
    Gradcheck {
        /// Random cases per operation.
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Split raw trailing arguments into `(key, value)` pairs. Accepts
/// `--key=value` and `--key value`.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = raw.iter().peekable();
    while let Some(arg) = it.next() {
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(format!(
                "unexpected argument '{arg}' (overrides look like --key=value)"
            ));
        };
        if let Some((k, v)) = stripped.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else if let Some(v) = it.next() {
            out.push((stripped.to_string(), v.clone()));
        } else {
            return Err(format!("flag '--{stripped}' is missing a value"));
        }
    }
    Ok(out)
}

fn load_config(common: &CommonArgs) -> Result<Config, Error> {
    let mut cfg = Config::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    let overrides = match parse_overrides(&common.overrides) {
        Ok(o) => o,
        Err(msg) => {
            // Malformed flags are usage errors.
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    };
    if let Err(e) = cfg.apply_overrides(&overrides) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            cmd_train(&cfg)
        }
        Command::Eval {
            checkpoint,
            split,
            by_relation,
            common,
        } => {
            let cfg = load_config(&common)?;
            cmd_eval(&cfg, checkpoint.as_deref(), &split, by_relation)
        }
        Command::Stats(common) => {
            let cfg = load_config(&common)?;
            cmd_stats(&cfg)
        }
        Command::Visualize {
            checkpoint,
            head,
            rel,
            threshold,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            cmd_visualize(
                &cfg,
                checkpoint.as_deref(),
                &head,
                &rel,
                threshold,
                out.as_deref(),
            )
        }
        Command::ValidateProposition {
            degree,
            steps,
            trials,
            common,
        } => {
            let cfg = load_config(&common)?;
            cmd_validate(&cfg, &degree, &steps, trials)
        }
        Command::Gradcheck { cases, common } => {
            let cfg = load_config(&common)?;
            cmd_gradcheck(cases, cfg.train.seed)
        }
    }
}

fn require_train_path(cfg: &Config) -> Result<&std::path::Path, Error> {
    cfg.train_path.as_deref().ok_or_else(|| {
        Error::Config("train_path is required (set it in the config or via --train_path)".into())
    })
}

fn load_dataset(cfg: &Config) -> Result<Dataset, Error> {
    let train = require_train_path(cfg)?;
    let ds = Dataset::load(
        train,
        cfg.valid_path.as_deref(),
        cfg.test_path.as_deref(),
        cfg.add_inverse,
    )?;
    if ds.train.n_duplicates > 0 {
        eprintln!(
            "warning: dropped {} duplicate train triples",
            ds.train.n_duplicates
        );
    }
    Ok(ds)
}

fn model_dims(cfg: &Config, ds: &Dataset) -> Dims {
    Dims {
        n_entities: ds.graph.n_entities(),
        n_relations: ds.graph.n_relations(),
        state: cfg.train.n_dims,
        attention: cfg.train.n_dims_att,
        hidden: cfg.train.hidden_dims(),
    }
}

fn fresh_model(cfg: &Config, ds: &Dataset) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    ModelParams::init(model_dims(cfg, ds), cfg.train.init_scale, &mut rng)
}

fn load_or_init_model(
    cfg: &Config,
    ds: &Dataset,
    checkpoint_path: Option<&std::path::Path>,
) -> Result<ModelParams, Error> {
    match checkpoint_path {
        Some(path) => checkpoint::load_checked(path, &model_dims(cfg, ds)),
        None => Ok(fresh_model(cfg, ds)),
    }
}

fn cmd_train(cfg: &Config) -> Result<ExitCode, Error> {
    let ds = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| Error::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    let echo_path = cfg.output_dir.join("config.effective");
    std::fs::write(&echo_path, cfg.echo()).map_err(|source| Error::Io {
        path: echo_path.clone(),
        source,
    })?;

    let mut model = fresh_model(cfg, &ds);
    let mut opt = AdamState::new(&model.sizes());

    // Snapshot points in optimizer steps, from the configured fractions.
    let queries = build_queries(&ds.train, &ds.graph);
    let steps_per_epoch = queries.len().div_ceil(cfg.train.batch_size);
    let total_steps = steps_per_epoch * cfg.train.n_epochs;
    let mut snapshots: Vec<(usize, f64)> = cfg
        .checkpoint_fractions
        .iter()
        .map(|&f| {
            (
                ((total_steps as f64 * f).ceil() as usize).clamp(1, total_steps),
                f,
            )
        })
        .collect();
    snapshots.sort_by_key(|s| s.0);

    let mut step = 0usize;
    for epoch in 0..cfg.train.n_epochs {
        let mut rng = derive_rng(cfg.train.seed, &[epoch as u64, u64::MAX, u64::MAX]);
        let batches = make_batches(&queries, cfg.train.batch_size, &mut rng);
        let mut cursor = 0usize;
        while cursor < batches.len() {
            // Run up to the next snapshot boundary (or epoch end).
            let next_stop = snapshots
                .iter()
                .find(|&&(s, _)| s > step)
                .map(|&(s, _)| (s - step).min(batches.len() - cursor))
                .unwrap_or(batches.len() - cursor);
            let slice = &batches[cursor..cursor + next_stop];
            let mut log = TrainLog::default();
            train_batches(
                &mut model, &mut opt, &ds.graph, slice, &cfg.train, epoch, step, &mut log,
            )?;
            for e in &log.entries {
                println!(
                    "step={} loss={:.6} gnorm={:.6} ms={}",
                    e.step, e.loss, e.grad_norm, e.millis
                );
            }
            step += next_stop;
            cursor += next_stop;
            for &(_, frac) in snapshots.iter().filter(|&&(s, _)| s == step) {
                let path = cfg.output_dir.join(format!("model_f{frac:.2}.ckpt"));
                checkpoint::save(&model, &path)?;
                println!("snapshot={} step={}", path.display(), step);
            }
        }
    }

    let final_path = cfg.output_dir.join("model.ckpt");
    checkpoint::save(&model, &final_path)?;
    println!("checkpoint={}", final_path.display());

    if ds.valid.is_some() {
        let report = eval_split(cfg, &ds, &model, "valid")?;
        print!("{}", report.summary());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_split(
    cfg: &Config,
    ds: &Dataset,
    model: &ModelParams,
    split: &str,
) -> Result<eval::EvalReport, Error> {
    let triples = match split {
        "valid" => ds
            .valid
            .as_ref()
            .ok_or_else(|| Error::Config("no valid_path configured".into()))?,
        "test" => ds
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("no test_path configured".into()))?,
        "train" => &ds.train,
        _ => {
            return Err(Error::Config(format!(
                "unknown split '{split}' (train|valid|test)"
            )))
        }
    };
    let mut splits: Vec<&dpmpn::graph::TripleSet> = vec![&ds.train];
    splits.extend(ds.valid.as_ref());
    splits.extend(ds.test.as_ref());
    let known = KnownTrue::build(&splits, &ds.graph);
    let queries = eval::eval_queries(triples, &ds.graph);
    eval::evaluate(model, &ds.graph, &queries, &known, &cfg.train)
}

fn cmd_eval(
    cfg: &Config,
    checkpoint_path: Option<&std::path::Path>,
    split: &str,
    by_relation: bool,
) -> Result<ExitCode, Error> {
    let ds = load_dataset(cfg)?;
    let model = load_or_init_model(cfg, &ds, checkpoint_path)?;
    let report = eval_split(cfg, &ds, &model, split)?;
    for r in &report.records {
        println!(
            "query={},{} target={} rank={}",
            ds.vocab.entity_name(r.query.head),
            relation_name(&ds, r.query.rel),
            ds.vocab.entity_name(r.query.tail),
            r.rank
        );
    }
    for (t, e) in report.mean_entropy.iter().enumerate() {
        println!(
            "attention step={t} entropy={:.4} top1={:.4} top3={:.4} top5={:.4}",
            e, report.mean_top1[t], report.mean_top3[t], report.mean_top5[t]
        );
    }
    if by_relation {
        let mut grouped: std::collections::BTreeMap<usize, Vec<dpmpn::eval::RankResult>> =
            std::collections::BTreeMap::new();
        for r in &report.records {
            grouped
                .entry(r.query.rel)
                .or_default()
                .push(dpmpn::eval::RankResult {
                    rank: r.rank,
                    n_candidates: ds.graph.n_entities(),
                });
        }
        for (rel, ranks) in grouped {
            let m = dpmpn::eval::compute_metrics(&ranks)?;
            println!(
                "relation={} name={} n={} hits1={:.4} hits3={:.4} hits10={:.4} mrr={:.4}",
                rel,
                relation_name(&ds, rel),
                ranks.len(),
                m.hits1,
                m.hits3,
                m.hits10,
                m.mrr
            );
        }
    }
    print!("{}", report.summary());

    if let Some(neg_path) = &cfg.negatives_path {
        let map = eval_map(cfg, &ds, &model, neg_path)?;
        println!("metric=map value={map:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn relation_name(ds: &Dataset, rel: usize) -> String {
    let base = ds.graph.n_base_relations();
    if rel < base {
        ds.vocab.relation_name(rel).to_string()
    } else if rel < 2 * base && ds.graph.has_inverse() {
        format!("{}^-1", ds.vocab.relation_name(rel - base))
    } else {
        "<self>".to_string()
    }
}

/// Mean average precision against a labeled candidate file: per line
/// `head<TAB>rel<TAB>candidate<TAB>label` with label 1 for positives.
fn eval_map(
    cfg: &Config,
    ds: &Dataset,
    model: &ModelParams,
    path: &std::path::Path,
) -> Result<f64, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    let mut grouped: HashMap<(usize, usize), Vec<(usize, bool)>> = HashMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: line_no + 1,
            msg,
        };
        if fields.len() != 4 {
            return Err(err("expected head<TAB>rel<TAB>candidate<TAB>label".into()));
        }
        let head = ds
            .vocab
            .lookup_entity(fields[0])
            .ok_or_else(|| err(format!("unknown entity '{}'", fields[0])))?;
        let rel = ds
            .vocab
            .lookup_relation(fields[1])
            .ok_or_else(|| err(format!("unknown relation '{}'", fields[1])))?;
        let cand = ds
            .vocab
            .lookup_entity(fields[2])
            .ok_or_else(|| err(format!("unknown entity '{}'", fields[2])))?;
        let label = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("label must be 0 or 1, got '{other}'"))),
        };
        let key = (head, rel);
        if !grouped.contains_key(&key) {
            order.push(key);
        }
        grouped.entry(key).or_default().push((cand, label));
    }
    if order.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "no candidates".into(),
        });
    }

    let mut per_query = Vec::with_capacity(order.len());
    for (idx, key) in order.iter().enumerate() {
        let (head, rel) = *key;
        let (scores, _) = eval::score_query(
            model,
            &ds.graph,
            QueryContext { head, rel },
            &cfg.train,
            &[0x3a9, idx as u64],
        )?;
        let mut candidates = grouped[key].clone();
        candidates.sort_unstable(); // deterministic candidate order
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (cand, label) in candidates {
            let s = scores.get(&cand).copied().unwrap_or(0.0);
            if label {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        per_query.push((pos, neg));
    }
    Ok(eval::map_score(&per_query))
}

fn cmd_stats(cfg: &Config) -> Result<ExitCode, Error> {
    let train_path = require_train_path(cfg)?;
    let valid_path = cfg
        .valid_path
        .as_deref()
        .ok_or_else(|| Error::Config("valid_path is required for stats".into()))?;
    let mut vocab = dpmpn::graph::Vocab::new();
    let train = dpmpn::graph::load_triples(train_path, &mut vocab)?;
    let n_base_relations = vocab.n_relations();
    let valid = dpmpn::graph::load_triples(valid_path, &mut vocab)?;
    let stats = dataset_stats(&train, &valid, vocab.n_entities(), n_base_relations);
    print!("{}", stats.report());
    Ok(ExitCode::SUCCESS)
}

fn cmd_visualize(
    cfg: &Config,
    checkpoint_path: Option<&std::path::Path>,
    head: &str,
    rel: &str,
    threshold: f32,
    out: Option<&std::path::Path>,
) -> Result<ExitCode, Error> {
    let ds = load_dataset(cfg)?;
    let model = load_or_init_model(cfg, &ds, checkpoint_path)?;
    let head_id = ds
        .vocab
        .lookup_entity(head)
        .ok_or_else(|| Error::Graph(format!("unknown entity '{head}'")))?;
    let rel_id = ds
        .vocab
        .lookup_relation(rel)
        .ok_or_else(|| Error::Graph(format!("unknown relation '{rel}'")))?;
    let (_, trace) = eval::score_query(
        &model,
        &ds.graph,
        QueryContext {
            head: head_id,
            rel: rel_id,
        },
        &cfg.train,
        &[0xd07, head_id as u64, rel_id as u64],
    )?;
    let entity_name = |id: usize| ds.vocab.entity_name(id).to_string();
    let rel_name = |id: usize| relation_name(&ds, id);
    let dot = export_dot(&trace, &entity_name, &rel_name, threshold);
    match out {
        Some(path) => std::fs::write(path, dot).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?,
        None => print!("{dot}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_list(name: &str, raw: &str) -> Result<Vec<u64>, Error> {
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("cannot parse '{f}' in --{name}")))
        })
        .collect()
}

fn cmd_validate(cfg: &Config, degree: &str, steps: &str, trials: u32) -> Result<ExitCode, Error> {
    let degrees = parse_list("degree", degree)?;
    let step_counts = parse_list("steps", steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut all_passed = true;
    for &d in &degrees {
        for &t in &step_counts {
            let report = validate_proposition(d, t as u32, trials, &mut rng)?;
            println!("{}", report.summary());
            all_passed &= report.passed();
        }
    }
    if all_passed {
        println!("validate-proposition: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("validate-proposition: FAIL");
        Err(Error::Numeric("growth bound violated".into()))
    }
}

fn cmd_gradcheck(cases: usize, seed: u64) -> Result<ExitCode, Error> {
    let reports = gradcheck::run_all(cases, seed)?;
    let mut all_passed = true;
    for r in &reports {
        println!("{}", r.line());
        all_passed &= r.passed();
    }
    if all_passed {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: FAIL");
        Err(Error::Numeric("gradient check failed".into()))
    }
}

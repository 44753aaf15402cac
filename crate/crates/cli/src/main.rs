//! Command-line front end: salience scoring over tensor files, cache
//! policy simulation, salience-head training, diagnostics, and the
//! dense-vs-streaming bench.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure (non-finite values), 1 anything else. Failures print one
//! machine-parseable line `error[<kind>]: <message>` to stderr. All
//! randomness is controlled by `--seed` (default 0, overriding the config
//! file's seed when given); timing output goes to stderr so stdout and
//! output files are byte-identical across reruns.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pafu_core::attention::{AttentionBatch, AttentionWeights};
use pafu_core::cache::Policy;
use pafu_core::error::Error;
use pafu_core::harness::{
    rollout_infer, train_seh_loop, DenoiseSchedule, RolloutOptions, ToyModel, ToyModelConfig,
};
use pafu_core::io::{
    load_checkpoint, read_tensor, save_cache_snapshot, save_checkpoint, write_tensor, RunConfig,
};
use pafu_core::metrics::{argmax_histogram, topk_overlap};
use pafu_core::rng::Rng;
use pafu_core::salience::{
    blockwise_salience_with, salience_scores_with, BlockGeometry, HeadReduce,
};
use pafu_core::seh::{OptimizerState, SehParams};
use pafu_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "pafu-kv", version, about = "Salience-driven KV cache policy toolkit")]
struct Cli {
    /// Seed for all randomness; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Salience,
    Fifo,
    Max,
    Avg,
    Random,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Policy {
        match p {
            PolicyArg::Salience => Policy::Salience,
            PolicyArg::Fifo => Policy::Fifo,
            PolicyArg::Max => Policy::Max,
            PolicyArg::Avg => Policy::Avg,
            PolicyArg::Random => Policy::Random,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadReduceArg {
    /// Max over queries per head, then mean across heads.
    MaxMean,
    /// Mean across heads first, then max over queries.
    MeanMax,
}

impl From<HeadReduceArg> for HeadReduce {
    fn from(r: HeadReduceArg) -> HeadReduce {
        match r {
            HeadReduceArg::MaxMean => HeadReduce::MaxThenMean,
            HeadReduceArg::MeanMax => HeadReduce::MeanThenMax,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score tokens from q/k tensor files ([B, N, L, D] each).
    Salience(SalienceArgs),
    /// Roll out the toy generator under a cache policy.
    Simulate(SimulateArgs),
    /// Train the salience head against the bidirectional teacher.
    TrainSeh(TrainArgs),
    /// Diagnostics over score vectors and attention weights.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Compare the dense and streaming salience paths.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SalienceArgs {
    /// Query tensor file [B, N, L, D].
    #[arg(long)]
    q: PathBuf,
    /// Key tensor file [B, N, L, D].
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    block_len: usize,
    /// Streaming query-chunk length; dense when absent.
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Output salience tensor [B, L].
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "max-mean")]
    head_reduce: HeadReduceArg,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[arg(long)]
    frames: usize,
    /// Trace output, one JSON record per chunk.
    #[arg(long)]
    out_trace: PathBuf,
    /// Optional cache snapshot prefix written after the rollout.
    #[arg(long)]
    out_cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Loss/overlap curve CSV.
    #[arg(long)]
    out_curve: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// 7x7 query-argmax histogram of an attention tensor [B, N, L, L].
    Histogram {
        #[arg(long)]
        p: PathBuf,
        /// Output CSV (7 rows of 7 counts).
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k index overlap of two score vectors ([L] or [1, L]).
    Overlap {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        k: usize,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    len: usize,
    #[arg(long)]
    block_len: usize,
    #[arg(long)]
    chunk_len: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    head_dim: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = match &err {
                Error::Shape(_) => "shape",
                Error::NonFinite(_) => "non-finite",
                Error::Index(_) => "index",
                Error::Argument(_) => "argument",
                Error::Capacity(_) => "capacity",
                Error::Format { .. } => "format",
                Error::Config(_) => "config",
                Error::Io(_) => "io",
            };
            eprintln!("error[{kind}]: {err}");
            match err {
                Error::NonFinite(_) => ExitCode::from(3),
                Error::Argument(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Salience(args) => cmd_salience(args),
        Command::Simulate(args) => cmd_simulate(args, cli.seed),
        Command::TrainSeh(args) => cmd_train(args, cli.seed),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Bench(args) => cmd_bench(args, cli.seed.unwrap_or(0)),
    }
}

fn load_config(path: &std::path::Path, seed_override: Option<u64>) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path)?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn cmd_salience(args: SalienceArgs) -> Result<(), Error> {
    let q = read_tensor(&args.q)?;
    let k = read_tensor(&args.k)?;
    let batch = AttentionBatch::from_qk(q, k)?;
    let geom = BlockGeometry::new(batch.q_len(), args.block_len)?;
    let reduce = args.head_reduce.into();
    let scores = match args.chunk_len {
        None => salience_scores_with(&batch, &geom, reduce)?.0,
        Some(chunk_len) => blockwise_salience_with(&batch, &geom, chunk_len, reduce)?.0,
    };
    let out = Tensor::from_vec(&[scores.batch(), scores.seq_len()], scores.data().to_vec())?;
    write_tensor(&args.out, &out)?;
    Ok(())
}

fn model_from_config(cfg: &RunConfig) -> ToyModel {
    ToyModel::new(ToyModelConfig {
        layers: cfg.layers,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        frame_tokens: cfg.frame_tokens,
        chunk_frames: cfg.chunk_frames,
        seed: cfg.seed,
    })
}

fn options_from_config(cfg: &RunConfig, policy: Policy, track_mass: bool) -> RolloutOptions {
    RolloutOptions {
        capacity: cfg.capacity,
        sink_count: cfg.sink_count,
        policy,
        order: cfg.eviction_order,
        block_len: cfg.block_len,
        head_reduce: cfg.head_reduce,
        track_retained_mass: track_mass,
    }
}

fn cmd_simulate(args: SimulateArgs, seed_override: Option<u64>) -> Result<(), Error> {
    let cfg = load_config(&args.config, seed_override)?;
    let policy: Policy = args.policy.into();
    let model = model_from_config(&cfg);
    let sched = DenoiseSchedule::linear(cfg.timesteps)?;
    let opts = options_from_config(&cfg, policy, true);

    let seh = match (&cfg.seh_checkpoint, policy) {
        (Some(path), Policy::Salience) => Some(load_checkpoint(path)?.0),
        _ => None,
    };

    let started = Instant::now();
    let trace = rollout_infer(&model, &sched, &opts, args.frames, cfg.seed, seh.as_ref())?;
    eprintln!(
        "simulated {} chunks in {:?}",
        trace.records.len(),
        started.elapsed()
    );

    fs::write(&args.out_trace, trace.to_jsonl())?;
    if let Some(prefix) = &args.out_cache {
        let cache = replay_final_cache(&cfg, policy, &trace)?;
        save_cache_snapshot(&cache, prefix)?;
    }
    let mut summary = serde_json::to_string(&trace.summary()).expect("summary serializes");
    summary.push('\n');
    print!("{summary}");
    Ok(())
}

// Rebuild the final cache state from the trace's recorded chunks.
fn replay_final_cache(
    cfg: &RunConfig,
    policy: Policy,
    trace: &pafu_core::harness::RolloutTrace,
) -> Result<pafu_core::cache::KvCache, Error> {
    use pafu_core::cache::{KvCache, KvCacheConfig};
    let mut cache = KvCache::new(KvCacheConfig {
        capacity: cfg.capacity,
        sink_count: cfg.sink_count,
        policy,
        order: cfg.eviction_order,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        seed: cfg.seed,
    })?;
    let n = cfg.heads;
    let d = cfg.head_dim;
    for (record, qkv) in trace.records.iter().zip(&trace.chunk_qkv) {
        let k_rows = pafu_core::harness::head_major_to_rows(&qkv.k, n, qkv.t_len, d);
        let v_rows = pafu_core::harness::head_major_to_rows(&qkv.v, n, qkv.t_len, d);
        cache.append_chunk(&k_rows, &v_rows, &record.predicted)?;
    }
    Ok(cache)
}

fn cmd_train(args: TrainArgs, seed_override: Option<u64>) -> Result<(), Error> {
    let cfg = load_config(&args.config, seed_override)?;
    let model = model_from_config(&cfg);
    let sched = DenoiseSchedule::linear(cfg.timesteps)?;
    let opts = options_from_config(&cfg, Policy::Salience, false);

    let mut params = SehParams::init(cfg.seh_d_in(), cfg.seh_hidden, cfg.seh_out, cfg.seed)?;
    let mut opt = OptimizerState::new(
        &params,
        cfg.lr,
        cfg.beta1,
        cfg.beta2,
        cfg.weight_decay,
        cfg.epsilon,
    );
    let frames = cfg.train_chunks * cfg.chunk_frames;

    let started = Instant::now();
    let curves = train_seh_loop(
        &model,
        &sched,
        &opts,
        &mut params,
        &mut opt,
        args.steps,
        frames,
        cfg.smooth_l1_beta,
        cfg.seed,
    )?;
    eprintln!("trained {} steps in {:?}", args.steps, started.elapsed());

    save_checkpoint(&args.out_ckpt, &params, cfg.seed)?;
    let mut csv = String::from("step,loss,overlap\n");
    for (i, (loss, overlap)) in curves.losses.iter().zip(&curves.overlaps).enumerate() {
        csv.push_str(&format!("{i},{loss:?},{overlap:?}\n"));
    }
    fs::write(&args.out_curve, csv)?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeCommand) -> Result<(), Error> {
    match args {
        AnalyzeCommand::Histogram { p, out } => {
            let tensor = read_tensor(&p)?;
            let weights = AttentionWeights::new(tensor)?;
            let hist = argmax_histogram(&weights)?;
            fs::write(&out, hist.to_csv())?;
            let summary = serde_json::json!({
                "total": hist.total(),
                "diagonal_total": hist.diagonal_total(),
                "diagonal_share": hist.diagonal_total() as f64 / hist.total() as f64,
            });
            println!("{summary}");
            Ok(())
        }
        AnalyzeCommand::Overlap { a, b, k } => {
            let va = score_vector(&a)?;
            let vb = score_vector(&b)?;
            let ratio = topk_overlap(&va, &vb, k)?;
            println!("{ratio:?}");
            Ok(())
        }
    }
}

fn score_vector(path: &std::path::Path) -> Result<Vec<f64>, Error> {
    let t = read_tensor(path)?;
    match t.dims() {
        [_] => Ok(t.into_data()),
        [1, _] => Ok(t.into_data()),
        dims => Err(Error::Shape(format!(
            "expected a score vector [L] or [1, L], got {dims:?}"
        ))),
    }
}

fn cmd_bench(args: BenchArgs, seed: u64) -> Result<(), Error> {
    let (l, n, d) = (args.len, args.heads, args.head_dim);
    let mut rng = Rng::derive(seed, &[0xbe4c]);
    let q = Tensor::randn(&[1, n, l, d], 1.0, &mut rng);
    let k = Tensor::randn(&[1, n, l, d], 1.0, &mut rng);
    let batch = AttentionBatch::from_qk(q, k)?;
    let geom = BlockGeometry::new(l, args.block_len)?;

    let t_dense = Instant::now();
    let (dense, dense_stats) = salience_scores_with(&batch, &geom, HeadReduce::MaxThenMean)?;
    let dense_elapsed = t_dense.elapsed();

    let t_stream = Instant::now();
    let (stream, stream_stats) =
        blockwise_salience_with(&batch, &geom, args.chunk_len, HeadReduce::MaxThenMean)?;
    let stream_elapsed = t_stream.elapsed();

    let max_diff = dense
        .data()
        .iter()
        .zip(stream.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // Deterministic facts on stdout; wall times on stderr.
    println!(
        "len,block_len,chunk_len,heads,head_dim,dense_peak_elems,stream_peak_elems,max_abs_diff"
    );
    println!(
        "{},{},{},{},{},{},{},{:e}",
        l,
        args.block_len,
        args.chunk_len,
        n,
        d,
        dense_stats.peak_row_elems,
        stream_stats.peak_row_elems,
        max_diff
    );
    eprintln!(
        "dense {:?} streaming {:?} (len {l}, chunk {})",
        dense_elapsed, stream_elapsed, args.chunk_len
    );
    Ok(())
}

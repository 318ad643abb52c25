mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use posattn::compiler::{compile, default_tolerance, verify, CompiledNetwork};
use posattn::harness::{
    length_sweep, ood_sweep, read_metrics_csv, sample_size_sweep, train_with_progress, write_ood_csv, write_run,
    write_sweep_csv, RunManifest, TrainConfig,
};
use posattn::model::{AttentionKind, ModelParams};
use posattn::ood::{attn_dump, attn_dump_compiled, bound_grid, monte_carlo_p_in, RAMP_INPUT};
use posattn::par::Execution;
use posattn::pcoc::{Algorithm, PcocInstance};
use posattn::tasks::{sample_test_ood, sample_train, LengthMode, TaskKind, TRAIN_BOUND};

use config::{resolve, FileConfig, FlagOverrides};

/// Positional-attention experiments, the parallel computation simulator and
/// the network compiler.
#[derive(Parser, Debug)]
#[command(name = "posattn", version)]
struct Cli {
    /// Base seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with `task`, `seed`, `[model]`, `[sampler]` and `[optimizer]` keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run data-parallel loops on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write manifest, metrics, checkpoint and OOD table.
    Train(TrainArgs),
    /// Evaluate a trained run at several input scales.
    OodSweep(OodSweepArgs),
    /// Train over training-set sizes and seeds; report OOD MSE at one scale.
    SizeSweep(SizeSweepArgs),
    /// Train over fixed lengths and seeds; report OOD MSE at one scale.
    LengthSweep(LengthSweepArgs),
    /// Run or validate a parallel-computation protocol.
    #[command(subcommand)]
    Pcoc(PcocCommand),
    /// Compile a protocol into a network and compare it with the simulator.
    CompileVerify(CompileArgs),
    /// Print the in-domain overlap bound as a CSV grid.
    OodProb(OodProbArgs),
    /// Dump attention matrices for scaled copies of one input.
    AttnDump(AttnDumpArgs),
    /// Write a sampled batch as JSON lines.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    #[arg(long)]
    task: Option<TaskKind>,
    /// positional | self | self_rope
    #[arg(long = "attn")]
    attention: Option<AttentionKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train on every length `1..=n`.
    #[arg(long)]
    variable_length: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    /// Scales for the OOD table written next to the run.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    scales: Vec<f64>,
    /// Test samples per scale; 0 skips the OOD table.
    #[arg(long, default_value_t = 1000)]
    ood_samples: usize,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct OodSweepArgs {
    /// Run directory with manifest.json and checkpoint.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    scales: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
}

#[derive(Args, Debug)]
struct SweepShared {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 3.0)]
    scale: f64,
    #[arg(long, default_value_t = 1000)]
    test_samples: usize,
}

#[derive(Args, Debug)]
struct SizeSweepArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_delimiter = ',', default_value = "5000,10000,20000,30000,40000,50000")]
    sizes: Vec<usize>,
    #[command(flatten)]
    shared: SweepShared,
}

#[derive(Args, Debug)]
struct LengthSweepArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    lengths: Vec<usize>,
    #[command(flatten)]
    shared: SweepShared,
}

#[derive(Args, Debug)]
struct InstanceArgs {
    /// tree_min | tree_sum | cumulative_min | cumulative_sum | odd_even_sort
    #[arg(long, conflicts_with = "instance")]
    alg: Option<Algorithm>,
    #[arg(long, requires = "alg")]
    n: Option<usize>,
    /// Instance JSON file.
    #[arg(long)]
    instance: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PcocCommand {
    /// Execute all rounds; writes trace.json (and instance.json) under --out.
    Run {
        #[command(flatten)]
        inst: InstanceArgs,
        /// Comma-separated input values; random in [-2, 2] when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        input: Option<Vec<f64>>,
    },
    /// Check shapes, budgets and collisions.
    Validate {
        #[command(flatten)]
        inst: InstanceArgs,
    },
}

#[derive(Args, Debug)]
struct CompileArgs {
    #[command(flatten)]
    inst: InstanceArgs,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Maximum deviation; defaults to 1e3 * eps * s * R.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct OodProbArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8,9,10")]
    c: Vec<f64>,
    /// Adds Monte Carlo estimates from this many test lists per grid point.
    #[arg(long)]
    monte_carlo: Option<usize>,
}

#[derive(Args, Debug)]
struct AttnDumpArgs {
    /// Model checkpoint, or a run directory containing checkpoint.json.
    #[arg(long, conflicts_with = "alg")]
    checkpoint: Option<PathBuf>,
    /// Dump a compiled protocol instead of a trained model.
    #[arg(long)]
    alg: Option<Algorithm>,
    #[arg(long, requires = "alg")]
    n: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    /// Base input; defaults to the length-8 descending ramp.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    input: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    scales: Vec<f64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    task: TaskKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// 1 samples the training distribution; larger values the OOD test distribution.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long)]
    variable_length: bool,
}

struct Globals {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    exec: Execution,
}

impl Globals {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn train_config(&self, m: &ModelFlags) -> Result<TrainConfig> {
        let file = FileConfig::load(self.config.as_deref())?;
        let flags = FlagOverrides {
            task: m.task,
            attention: m.attention,
            n: m.n,
            layers: m.layers,
            seed: self.seed,
            epochs: m.epochs,
            train_samples: m.train_samples,
            val_samples: m.val_samples,
            batch_size: m.batch_size,
            lr: m.lr,
            variable_length: m.variable_length,
        };
        resolve(&file, &flags)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = Globals {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        exec: if cli.sequential { Execution::Sequential } else { Execution::Parallel },
    };
    match run(cli.command, &g) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command, g: &Globals) -> Result<ExitCode> {
    match command {
        Command::Train(a) => cmd_train(a, g),
        Command::OodSweep(a) => cmd_ood_sweep(a, g),
        Command::SizeSweep(a) => {
            let base = g.train_config(&a.model)?;
            let s = &a.shared;
            let rows = sample_size_sweep(&base, &a.sizes, &s.seeds, s.scale, s.test_samples, g.exec)?;
            let out = g.out_or("runs/size_sweep");
            std::fs::create_dir_all(&out)?;
            write_sweep_csv(&out.join("size_sweep.csv"), &rows)?;
            println!("{}", out.join("size_sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::LengthSweep(a) => {
            let mut flags = a.model.clone();
            flags.n = flags.n.or(a.lengths.first().copied());
            let base = g.train_config(&flags)?;
            let s = &a.shared;
            let rows = length_sweep(&base, &a.lengths, &s.seeds, s.scale, s.test_samples, g.exec)?;
            let out = g.out_or("runs/length_sweep");
            std::fs::create_dir_all(&out)?;
            write_sweep_csv(&out.join("length_sweep.csv"), &rows)?;
            println!("{}", out.join("length_sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Pcoc(PcocCommand::Run { inst, input }) => cmd_pcoc_run(&inst, input, g),
        Command::Pcoc(PcocCommand::Validate { inst }) => {
            let inst = load_instance(&inst)?;
            match inst.validate() {
                Ok(()) => {
                    println!("valid: N={} R={} s={}", inst.machines, inst.rounds, inst.mem_size);
                    Ok(ExitCode::SUCCESS)
                }
                Err(v) => {
                    println!("invalid: {v}");
                    Ok(ExitCode::FAILURE)
                }
            }
        }
        Command::CompileVerify(a) => cmd_compile_verify(a, g),
        Command::OodProb(a) => cmd_ood_prob(a, g),
        Command::AttnDump(a) => cmd_attn_dump(a, g),
        Command::GenData(a) => cmd_gen_data(a, g),
    }
}

fn cmd_train(a: TrainArgs, g: &Globals) -> Result<ExitCode> {
    let config = g.train_config(&a.model)?;
    let out = g.out_or(&format!(
        "runs/{}_{}_n{}_s{}",
        config.task, config.model.attention, config.model.max_len, config.seed
    ));
    let quiet = a.quiet;
    let run = train_with_progress(&config, g.exec, |m| {
        if !quiet {
            eprintln!("epoch {:>5}  train_mse {:.6e}  val_mse {:.6e}", m.epoch, m.train_mse, m.val_mse);
        }
    })?;
    let mut manifest = run.manifest;
    if a.ood_samples > 0 && !manifest.failed() {
        manifest.ood = ood_sweep(
            &run.best,
            config.task,
            config.lengths(),
            &a.scales,
            a.ood_samples,
            config.seed,
            g.exec,
        )?;
    }
    write_run(&out, &mut manifest, &run.best)?;
    println!("{}", out.display());
    Ok(if manifest.failed() {
        eprintln!("run failed: {:?}", manifest.status);
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_ood_sweep(a: OodSweepArgs, g: &Globals) -> Result<ExitCode> {
    let manifest_path = a.run.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let mut manifest: RunManifest = serde_json::from_str(&text)?;
    let params = ModelParams::load(&a.run.join("checkpoint.json"))?;
    let c = &manifest.config;
    let seed = g.seed.unwrap_or(c.seed);
    let rows = ood_sweep(&params, c.task, c.lengths(), &a.scales, a.samples, seed, g.exec)?;
    match &g.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            write_ood_csv(&out.join("ood.csv"), &rows)?;
        }
        None => {
            // Refresh the run in place, keeping its recorded metrics.
            manifest.metrics = read_metrics_csv(&a.run.join("metrics.csv"))?;
            manifest.ood = rows.clone();
            write_run(&a.run, &mut manifest, &params)?;
        }
    }
    for r in &rows {
        println!("{},{:.6e},{},{}", r.scale, r.mse, r.n_samples, r.seed);
    }
    Ok(ExitCode::SUCCESS)
}

fn load_instance(a: &InstanceArgs) -> Result<PcocInstance> {
    if let Some(path) = &a.instance {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let (Some(alg), Some(n)) = (a.alg, a.n) else {
        bail!("give either --instance <file> or --alg <name> --n <N>");
    };
    let min = if alg == Algorithm::OddEvenSort { 2 } else { 1 };
    if n < min {
        bail!("{alg} needs at least {min} machines");
    }
    Ok(alg.build(n))
}

fn cmd_pcoc_run(a: &InstanceArgs, input: Option<Vec<f64>>, g: &Globals) -> Result<ExitCode> {
    let inst = load_instance(a)?;
    let x = match input {
        Some(x) => x,
        None => random_input(inst.machines, g.seed()),
    };
    let (state, trace) = inst.run_traced(&x)?;
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("instance.json"), serde_json::to_string_pretty(&inst)?)?;
        std::fs::write(out.join("trace.json"), serde_json::to_string_pretty(&trace)?)?;
    }
    println!("input  {}", join(&x));
    println!("output {}", join(&state.outputs()));
    Ok(ExitCode::SUCCESS)
}

fn random_input(n: usize, seed: u64) -> Vec<f64> {
    sample_train(TaskKind::CumulativeSum, 1, TRAIN_BOUND, LengthMode::Fixed(n), seed).inputs.remove(0)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_compile_verify(a: CompileArgs, g: &Globals) -> Result<ExitCode> {
    let inst = load_instance(&a.inst)?;
    let net = compile(&inst, a.eps)?;
    let tol = a.tol.unwrap_or_else(|| default_tolerance(&net));
    let report = verify(&net, &inst, a.trials, tol, g.seed(), g.exec)?;
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        net.save(&inst, &out.join("compiled.json"), &out.join("compiled.sidecar.json"))?;
        std::fs::write(out.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_ood_prob(a: OodProbArgs, g: &Globals) -> Result<ExitCode> {
    let grid = bound_grid(&a.n, &a.c)?;
    let mut csv = String::from("n,c,p_in_upper,branch");
    if a.monte_carlo.is_some() {
        csv.push_str(",mc_estimate,mc_half_width");
    }
    csv.push('\n');
    for (k, b) in grid.iter().enumerate() {
        let branch = if b.n >= 3 { "n>=3" } else { "n=2" };
        write!(csv, "{},{},{:.6e},{}", b.n, b.c, b.p_in_upper, branch)?;
        if let Some(trials) = a.monte_carlo {
            let mc = monte_carlo_p_in(b.n, b.c, trials, g.seed().wrapping_add(k as u64), g.exec)?;
            write!(csv, ",{:.6e},{:.6e}", mc.estimate, mc.half_width)?;
        }
        csv.push('\n');
    }
    if let Some(out) = &g.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ood_prob.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn load_params(path: &Path) -> Result<ModelParams> {
    let file = if path.is_dir() { path.join("checkpoint.json") } else { path.to_path_buf() };
    ModelParams::load(&file).with_context(|| format!("loading {}", file.display()))
}

fn cmd_attn_dump(a: AttnDumpArgs, g: &Globals) -> Result<ExitCode> {
    let records = if let Some(alg) = a.alg {
        let n = a.n.unwrap_or(8);
        let inst = load_instance(&InstanceArgs {
            alg: Some(alg),
            n: Some(n),
            instance: None,
        })?;
        let net: CompiledNetwork = compile(&inst, a.eps)?;
        attn_dump_compiled(&net, &a.scales)?
    } else {
        let Some(path) = &a.checkpoint else {
            bail!("give --checkpoint <file|run dir> or --alg <name>");
        };
        let params = load_params(path)?;
        let x = a.input.clone().unwrap_or_else(|| RAMP_INPUT.to_vec());
        if x.len() > params.config.max_len {
            bail!(
                "input has {} values but the model takes at most {}; pass --input",
                x.len(),
                params.config.max_len
            );
        }
        attn_dump(&params, &x, &a.scales)?
    };
    let json = serde_json::to_string_pretty(&records)?;
    match &g.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("attn.json"), json)?;
            println!("{}", out.join("attn.json").display());
        }
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(a: GenDataArgs, g: &Globals) -> Result<ExitCode> {
    let lengths = if a.variable_length {
        LengthMode::Variable(a.n)
    } else {
        LengthMode::Fixed(a.n)
    };
    let batch = if a.scale == 1.0 {
        sample_train(a.task, a.count, TRAIN_BOUND, lengths, g.seed())
    } else {
        sample_test_ood(a.task, a.scale, a.count, lengths, g.seed())?
    };
    let text = batch.to_jsonl();
    match &g.out {
        Some(out) => {
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("data.jsonl"), text)?;
            println!("{}", out.join("data.jsonl").display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

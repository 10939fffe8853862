use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cortis::baselines::Method;
use cortis::config::ExperimentConfig;
use cortis::error::{CortisError, Result};
use cortis::evalkit::evaluate;
use cortis::experiment::{
    build_pretrained, calibrate, cost_csv, load_pretrained, plot_series, reports_csv, run_sequence, save_pretrained,
    RunRecord,
};
use cortis::rundir::RunDir;
use cortis::toytts::make_world;

#[derive(Parser)]
#[command(name = "cortis", version, about = "Continual speaker unlearning on a toy zero-shot TTS world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Without it the built-in defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seeds, comma separated; replaces the config's `seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Output root; each run goes to <out>/<method>/seed_<s>/.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    /// Process only the first N requests of the sequence.
    #[arg(long)]
    requests: Option<usize>,
    /// Allow methods that keep forget data (cumulative TGU). The run still
    /// fails the audit and exits with status 3.
    #[arg(long)]
    violate_c2: bool,
    /// Overwrite existing run directories.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world and pretrain θ₀ into the config's `pretrained` dir.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's `pretrained` directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run a request sequence per seed from the pretrained checkpoint.
    Unlearn {
        #[command(flatten)]
        run: RunArgs,
        /// Per-request basis rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Mask size in percent of parameters.
        #[arg(long = "mask-k")]
        mask_k: Option<f64>,
    },
    /// Score a run directory's current model, or θ₀ when given the
    /// pretrained directory.
    Eval {
        #[command(flatten)]
        common: Common,
        dir: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate the retain and forget similarity thresholds.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run directories into results.csv, cost.csv and plot.json.
    Report {
        /// Run directories, or roots searched for them.
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Repeat `unlearn` over basis ranks or mask sizes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        rank: Vec<usize>,
        #[arg(long = "mask-k", value_delimiter = ',')]
        mask_k: Vec<f64>,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CortisError + '_ {
    move |source| CortisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, text).map_err(io(path))
}

/// Loads the config and applies `--seed`. A relative `pretrained` path is
/// resolved against the config file's directory.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            if c.pretrained.is_relative() {
                if let Some(dir) = path.parent() {
                    c.pretrained = dir.join(&c.pretrained);
                }
            }
            c
        }
        None => ExperimentConfig::default(),
    };
    if !common.seed.is_empty() {
        config.seeds = common.seed.clone();
    }
    config.validate()?;
    Ok(config)
}

fn cmd_pretrain(common: &Common, out: Option<&Path>, force: bool) -> Result<()> {
    let config = load_config(common)?;
    let dir = out.map_or(config.pretrained.clone(), Path::to_path_buf);
    let pre = build_pretrained(&config)?;
    save_pretrained(&pre, &dir, force)?;
    println!("pretrained θ₀ with {} parameters into {}", pre.theta0.num_params(), dir.display());
    Ok(())
}

/// Runs every seed into `<out>/<method>/seed_<s>/`. Returns the records and
/// whether every audit passed.
fn run_all(config: &ExperimentConfig, run: &RunArgs, out: &Path) -> Result<(Vec<RunRecord>, bool)> {
    let method = run.method.unwrap_or(config.unlearn.method);
    let n = run.requests.unwrap_or(config.requests.len());
    if method.retains_forget_data() && !run.violate_c2 {
        return Err(CortisError::Config(format!("{method} retains forget data and only runs with --violate-c2")));
    }
    let pre = load_pretrained(&config.pretrained)?;
    let mut records = Vec::new();
    let mut clean = true;
    for &seed in &config.seeds {
        let dir = out.join(method.name()).join(format!("seed_{seed}"));
        let rd = RunDir::create(&dir, run.force)?;
        write(&dir.join("config.toml"), &config.to_toml())?;
        let outcome = run_sequence(config, &pre, method, seed, n, Some(&rd), run.violate_c2)?;
        for r in &outcome.reports {
            let sf: Vec<String> = r.s_f.iter().map(|(s, v)| format!("{s}:{v:.3}")).collect();
            println!("{method} seed {seed} request {}: S-R {:.3} S-f {}", r.request_index, r.s_r, sf.join(" "));
        }
        if !outcome.audit.passed {
            clean = false;
            for v in &outcome.audit.violations {
                eprintln!("audit: {}: {v}", dir.display());
            }
        }
        records.push(RunRecord::from_outcome(&outcome));
    }
    Ok((records, clean))
}

fn audit_failure() -> CortisError {
    CortisError::C2Violation("run kept forget data; see the audit lines above".into())
}

fn cmd_unlearn(run: &RunArgs, rank: Option<usize>, mask_k: Option<f64>) -> Result<()> {
    let mut config = load_config(&run.common)?;
    if let Some(r) = rank {
        config.unlearn.rank = r;
    }
    if let Some(k) = mask_k {
        config.unlearn.k_percent = k;
    }
    config.validate()?;
    let (_, clean) = run_all(&config, run, &run.out)?;
    if clean {
        Ok(())
    } else {
        Err(audit_failure())
    }
}

fn cmd_sweep(run: &RunArgs, ranks: &[usize], ks: &[f64]) -> Result<()> {
    let base = load_config(&run.common)?;
    let (param, values): (&str, Vec<String>) = match (ranks.is_empty(), ks.is_empty()) {
        (false, true) => ("rank", ranks.iter().map(|r| r.to_string()).collect()),
        (true, false) => ("mask_k", ks.iter().map(|k| k.to_string()).collect()),
        _ => return Err(CortisError::Config("sweep needs exactly one of --rank or --mask-k".into())),
    };
    let mut table = String::new();
    let mut clean = true;
    for (k, value) in values.iter().enumerate() {
        let mut config = base.clone();
        match param {
            "rank" => config.unlearn.rank = ranks[k],
            _ => config.unlearn.k_percent = ks[k],
        }
        config.validate()?;
        let (records, ok) = run_all(&config, run, &run.out.join(format!("{param}_{value}")))?;
        clean &= ok;
        let csv = reports_csv(&records)?;
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if table.is_empty() {
            table = format!("{param},{header}\n");
        }
        for line in lines {
            table.push_str(&format!("{value},{line}\n"));
        }
    }
    let path = run.out.join("sweep.csv");
    write(&path, &table)?;
    println!("wrote {}", path.display());
    if clean {
        Ok(())
    } else {
        Err(audit_failure())
    }
}

fn cmd_eval(common: &Common, dir: &Path, out: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let report = if dir.join("state").is_dir() {
        let pre = load_pretrained(&config.pretrained)?;
        let state = RunDir::open(dir)?.load_state()?;
        let method = state.log.last().map_or("unknown", |l| l.method.name());
        evaluate(&state.theta, &pre.world, &state.remain.eval_speakers, &state.forgotten(), &config.eval, state.last_index(), method)?
    } else {
        let pre = load_pretrained(dir)?;
        let speakers: Vec<_> = config.requests.iter().flatten().copied().collect();
        evaluate(&pre.theta0, &pre.world, &config.remain.eval_speakers, &speakers, &config.eval, 0, "pretrained")?
    };
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    match out {
        Some(path) => write(path, &text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_calibrate(common: &Common, out: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let world = make_world(&config.world)?;
    let t = calibrate(&config, &world)?;
    let text = serde_json::to_string_pretty(&t).expect("serializable");
    match out {
        Some(path) => write(path, &text)?,
        None => println!("{text}"),
    }
    eprintln!("retain fails below {:.4}, forget fails above {:.4}", t.retain_fail_below, t.forget_fail_above);
    Ok(())
}

fn find_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("state").join("run.json").is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut found = Vec::new();
    for d in dirs {
        find_runs(d, &mut found)?;
    }
    if found.is_empty() {
        return Err(CortisError::Precondition("no run directories found".into()));
    }
    let records: Vec<RunRecord> = found.iter().map(|d| RunRecord::load(d)).collect::<Result<_>>()?;
    write(&out.join("results.csv"), &reports_csv(&records)?)?;
    write(&out.join("cost.csv"), &cost_csv(&records))?;
    let plot = serde_json::to_string_pretty(&plot_series(&records)).expect("serializable");
    write(&out.join("plot.json"), &plot)?;
    println!("aggregated {} runs into {}", records.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Pretrain { common, out, force } => cmd_pretrain(common, out.as_deref(), *force),
        Command::Unlearn { run, rank, mask_k } => cmd_unlearn(run, *rank, *mask_k),
        Command::Eval { common, dir, out } => cmd_eval(common, dir, out.as_deref()),
        Command::Calibrate { common, out } => cmd_calibrate(common, out.as_deref()),
        Command::Report { dirs, out } => cmd_report(dirs, out),
        Command::Sweep { run, rank, mask_k } => cmd_sweep(run, rank, mask_k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

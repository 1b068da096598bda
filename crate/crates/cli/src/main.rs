use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jointcycle::config::{env_overrides, parse_flag, read_kv_file, ENV_SEED, ENV_THREADS};
use jointcycle::data::{
    decode_pgm, encode_pgm, make_paired_eval, make_unpaired_split, write_atomic, Dataset, Manifest, Task, TRAIN_SOURCE,
    TRAIN_TARGET,
};
use jointcycle::metrics::{evaluate_run, read_ledger, Direction, EvalConfig};
use jointcycle::sampler::{encode_components, generate, terminal_noise, SamplerConfig};
use jointcycle::trainer::{eval_models_from_pack, load_pack, train_run, RunDir, TrainConfig, Trainer, LOSS_COLUMNS};

#[derive(Parser)]
#[command(
    name = "jointcycle",
    version,
    about = "Unpaired image translation with jointly trained diffusion chains"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic training and eval splits.
    GenData(GenData),
    /// Train a run into a directory.
    Train(Train),
    /// Translate images with a checkpoint.
    Translate(Translate),
    /// Score a checkpoint on the paired eval split.
    Eval(Eval),
    /// Export loss and metric series as CSV.
    Plot(Plot),
}

#[derive(Args)]
struct GenData {
    /// solids-edges | bright-dark
    #[arg(long)]
    task: String,
    /// Images per training domain.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Eval pairs (default: 2n/5, at least 20).
    #[arg(long)]
    eval_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Run directory.
    out: PathBuf,
    /// desk | paper | quick
    #[arg(long)]
    preset: Option<String>,
    /// no-joint | no-time
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Data directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the run's latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Start from the warmup checkpoint of a sibling run.
    #[arg(long, value_name = "CKPT")]
    warmup_from: Option<PathBuf>,
    /// Stop after this iteration.
    #[arg(long)]
    until: Option<usize>,
    /// Progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct Translate {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM files or directories of them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "translated")]
    out: PathBuf,
    /// Sampler steps (default: 200 cross-modality, 100 otherwise).
    #[arg(long)]
    steps: Option<usize>,
    /// s2t | t2s
    #[arg(long, default_value = "s2t")]
    direction: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data directory holding the eval split.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "s2t")]
    direction: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Edge matching tolerance in pixels.
    #[arg(long, default_value_t = 1)]
    tol: usize,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Report file.
    #[arg(long, default_value = "report.txt")]
    out: PathBuf,
    /// Runs ledger CSV to append to.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Run label stored in the ledger.
    #[arg(long)]
    run: Option<String>,
}

#[derive(Args)]
struct Plot {
    /// Run directory with losses.csv.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Runs ledger CSV for metric series.
    #[arg(long)]
    ledger: Option<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

fn env_seed() -> Result<Option<u64>> {
    std::env::var(ENV_SEED)
        .ok()
        .map(|v| v.trim().parse().with_context(|| format!("{ENV_SEED}={v:?}")))
        .transpose()
}

fn env_threads() -> Result<Option<usize>> {
    std::env::var(ENV_THREADS)
        .ok()
        .map(|v| v.trim().parse().with_context(|| format!("{ENV_THREADS}={v:?}")))
        .transpose()
}

fn gen_data(a: GenData) -> Result<()> {
    let task = Task::parse(&a.task)?;
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let pairs = a.eval_pairs.unwrap_or((2 * a.n / 5).max(20));
    let (s, t) = make_unpaired_split(&a.out, task, a.n, a.n, a.size, seed)?;
    let e = make_paired_eval(&a.out, task, pairs, a.size, seed)?;
    println!(
        "task={} seed={seed} size={} train_S={} train_T={} eval_pairs={} out={}",
        task.name(),
        a.size,
        s.entries.len(),
        t.entries.len(),
        e.entries.len() / 2,
        a.out.display()
    );
    Ok(())
}

/// Config layers in increasing precedence: file, environment, flags.
fn train_config(a: &Train) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => read_kv_file(p)?,
        None => Vec::new(),
    };
    let env = env_overrides(|k| std::env::var(k).ok());
    let mut flags = Vec::new();
    let mut push = |k: &str, v: String| flags.push((k.to_string(), v));
    if let Some(p) = &a.preset {
        push("preset", p.clone());
    }
    if let Some(arm) = &a.ablate {
        push("arm", arm.clone());
    }
    if let Some(s) = a.seed {
        push("seed", s.to_string());
    }
    if let Some(t) = a.threads {
        push("threads", t.to_string());
    }
    if let Some(d) = &a.data {
        push("data_dir", d.display().to_string());
    }
    for s in &a.set {
        flags.push(parse_flag(s)?);
    }
    Ok(TrainConfig::resolve(&[&file, &env, &flags])?)
}

fn train(a: Train) -> Result<()> {
    let cfg = train_config(&a)?;
    let dir = RunDir::new(&a.out);
    let manifest = Manifest::load(&cfg.data_dir.join(format!("{TRAIN_SOURCE}.manifest")))
        .with_context(|| format!("no training data under {}", cfg.data_dir.display()))?;
    if manifest.task != cfg.task || manifest.size != cfg.size {
        bail!(
            "data is {} at {}px but the run expects {} at {}px",
            manifest.task.name(),
            manifest.size,
            cfg.task.name(),
            cfg.size
        );
    }
    let data_s = Dataset::load(&cfg.data_dir, TRAIN_SOURCE, "S")?;
    let data_t = Dataset::load(&cfg.data_dir, TRAIN_TARGET, "T")?;
    let mut tr = if a.resume && dir.latest().exists() {
        let tr = Trainer::resume(&dir.latest(), data_s, data_t)?;
        if tr.cfg != cfg {
            bail!("{} was trained with a different configuration", dir.root.display());
        }
        eprintln!("resuming at iteration {}", tr.iter);
        tr
    } else {
        Trainer::new(cfg, data_s, data_t)?
    };
    if let Some(w) = &a.warmup_from {
        tr.adopt_warmup(&load_pack(w)?)?;
        eprintln!("adopted warmup state at iteration {}", tr.iter);
    }
    let every = a.log_every;
    train_run(&mut tr, &dir, a.until, |r| {
        if every > 0 && (r.iter + 1) % every == 0 {
            eprintln!("{r}");
        }
    })?;
    println!(
        "iter={} run_length={} dir={}",
        tr.iter,
        tr.cfg.run_length(),
        dir.root.display()
    );
    Ok(())
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| p.display().to_string())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pgm"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no input images");
    }
    Ok(out)
}

fn translate(a: Translate) -> Result<()> {
    let pack = load_pack(&a.checkpoint)?;
    let (cfg, m) = eval_models_from_pack(&pack)?;
    let direction = Direction::parse(&a.direction)?;
    let steps = a.steps.unwrap_or(cfg.task.default_steps());
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let sampler = SamplerConfig::new(steps, seed)?;
    let (from, fwd, to) = match direction {
        Direction::SourceToTarget => (&m.net_s, &m.g, &m.net_t),
        Direction::TargetToSource => (&m.net_t, &m.f, &m.net_s),
    };
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut log = format!(
        "checkpoint={}\ndirection={}\nsteps={steps}\nseed={seed}\n",
        a.checkpoint.display(),
        direction.tag()
    );
    for (i, path) in collect_inputs(&a.inputs)?.iter().enumerate() {
        let img = decode_pgm(&fs::read(path).with_context(|| path.display().to_string())?)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let x0 = img.reshape([1, cfg.channels, h, w])?;
        if x0.shape()[2..] != [cfg.size, cfg.size] {
            bail!(
                "{}: expected {}x{} image, got {h}x{w}",
                path.display(),
                cfg.size,
                cfg.size
            );
        }
        let trace = encode_components(&x0, from, fwd, &sampler)?;
        let noise = terminal_noise(x0.shape(), jointcycle::metrics::image_noise_seed(seed, i));
        let y = generate(trace, to, &sampler, Some(noise))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = a.out.join(format!("{stem}_{}.pgm", direction.tag()));
        write_atomic(&dest, &encode_pgm(&y))?;
        log.push_str(&format!("{} -> {}\n", path.display(), dest.display()));
    }
    write_atomic(&a.out.join("translate.log"), log.as_bytes())?;
    eprintln!("translated with {steps} steps ({})", direction.tag());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let pack = load_pack(&a.checkpoint)?;
    let (cfg, _) = eval_models_from_pack(&pack)?;
    let mut ec = EvalConfig::new(
        a.steps.unwrap_or(cfg.task.default_steps()),
        a.seed.or(env_seed()?).unwrap_or(0),
    );
    ec.direction = Direction::parse(&a.direction)?;
    ec.tol = a.tol;
    ec.threads = a.threads.or(env_threads()?).unwrap_or(1);
    ec.chunk = a.chunk;
    let mut report = evaluate_run(&a.checkpoint, &a.data, &ec)?;
    let run = a.run.clone().unwrap_or_else(|| run_label(&a.checkpoint));
    report.meta.insert("run".into(), run);
    report.save(&a.out)?;
    if let Some(l) = &a.ledger {
        report.append_to_ledger(l)?;
    }
    print!("{}", report.to_kv());
    Ok(())
}

/// Run directory name of a checkpoint inside `<run>/checkpoints/`.
fn run_label(ckpt: &Path) -> String {
    ckpt.parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .or_else(|| ckpt.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_series(path: &Path, header: &str, rows: &[(String, String)]) -> Result<()> {
    let mut text = format!("{header}\n");
    for (x, y) in rows {
        text.push_str(&format!("{x},{y}\n"));
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn plot(a: Plot) -> Result<()> {
    if a.run.is_none() && a.ledger.is_none() {
        bail!("nothing to export: pass --run and/or --ledger");
    }
    let mut written = 0;
    if let Some(run) = &a.run {
        let path = RunDir::new(run).losses();
        let mut r = csv::Reader::from_path(&path).with_context(|| path.display().to_string())?;
        let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let col = |name: &str| headers.iter().position(|h| h == name);
        let iter_col = col("iter").context("losses.csv has no iter column")?;
        for term in &LOSS_COLUMNS[4..] {
            let c = col(term).with_context(|| format!("losses.csv has no {term} column"))?;
            let rows: Vec<_> = records
                .iter()
                .map(|rec| (rec[iter_col].to_string(), rec[c].to_string()))
                .collect();
            write_series(&a.out.join(format!("loss_{term}.csv")), &format!("iter,{term}"), &rows)?;
            written += 1;
        }
    }
    if let Some(ledger) = &a.ledger {
        if !ledger.exists() {
            bail!("run ledger {} not found", ledger.display());
        }
        let rows = read_ledger(ledger)?;
        for metric in ["ssim", "mmd", "edge_f1", "cycle_l1"] {
            let series: Vec<_> = rows
                .iter()
                .filter(|r| r.get(metric).is_some_and(|v| !v.is_empty()))
                .map(|r| {
                    let g = |k: &str| r.get(k).cloned().unwrap_or_default();
                    (
                        format!("{},{},{},{},{}", g("run"), g("arm"), g("seed"), g("steps"), g("iter")),
                        g(metric),
                    )
                })
                .collect();
            write_series(
                &a.out.join(format!("metric_{metric}.csv")),
                &format!("run,arm,seed,steps,iter,{metric}"),
                &series,
            )?;
            written += 1;
        }
    }
    println!("wrote {written} series to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Translate(a) => translate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Plot(a) => plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

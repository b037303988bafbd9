//! `fetap`: synthetic data generation, training, tracking, evaluation and
//! plotting.
//!
//! Every command prints one `ok key=value ...` line on success. Failures
//! print one `error: ...` line and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fetap_core::config::RunConfig;
use fetap_core::dataset::{generate_dataset, read_dataset, read_gt, read_queries, read_tracks, write_dataset, write_tracks, Sequence};
use fetap_core::metrics::evaluate;
use fetap_core::model::FeTapModel;
use fetap_core::pipeline::{run_offline, Track};
use fetap_core::plot::overlay;
use fetap_core::train::{append_loss_log, Trainer};

#[derive(Parser)]
#[command(name = "fetap", version, about = "Frame-plus-event point tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth tracks.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Track the queries of one sequence.
    Track(TrackArgs),
    /// Score predicted tracks against ground truth.
    Eval(EvalArgs),
    /// Draw tracks over the frames of a sequence.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Canvas size as WxH.
    #[arg(long)]
    size: Option<String>,
    /// Run configuration; only its [synth] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sprites only translate over a static background.
    #[arg(long)]
    translation_only: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight file; the manifest goes next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    /// Sequence directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Query CSV; defaults to the sequence's queries.csv.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration whose [tracker] section overrides runtime settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_time_embed: bool,
    #[arg(long)]
    no_frames: bool,
    #[arg(long)]
    no_events: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Sequence directory holding gt.csv, or a gt CSV file.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    delta: f64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Sequence directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Sequence directory holding gt.csv, or a gt CSV file.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn gen_synth(a: GenSynthArgs) -> Result<String> {
    let mut synth = load_config(a.config.as_deref())?.synth;
    if let Some(size) = &a.size {
        let (w, h) = size
            .split_once(['x', 'X'])
            .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
            .with_context(|| format!("--size must look like 64x64, got `{size}`"))?;
        synth.width = w;
        synth.height = h;
    }
    synth.translation_only |= a.translation_only;
    if a.scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let (manifest, seqs) = generate_dataset(&synth, a.seed, a.scenes)?;
    write_dataset(&a.out, &manifest, &seqs)?;
    let events: usize = seqs.iter().map(|s| s.events.len()).sum();
    Ok(format!("ok command=gen-synth scenes={} events={events} out={}", seqs.len(), a.out.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn train(a: TrainArgs) -> Result<String> {
    let (_, data) = read_dataset(&a.data)?;
    if data.is_empty() {
        bail!("dataset {} has no sequences", a.data.display());
    }
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt)?,
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(s) = a.steps {
                cfg.train.steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s);
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
                cfg.model.seed = s;
            }
            Trainer::new(&cfg.tracker, &cfg.model, cfg.train)?
        }
    };
    let log_path = sibling(&a.out, ".loss.csv");
    let ckpt_path = sibling(&a.out, ".ckpt.bin");
    if a.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let every = trainer.cfg.checkpoint_every;
    let mut last = None;
    while trainer.step < trainer.cfg.steps {
        let entry = trainer.step(&data)?;
        append_loss_log(&log_path, &[entry])?;
        last = Some(entry);
        if every > 0 && trainer.step % every == 0 {
            trainer.save_checkpoint(&ckpt_path)?;
        }
    }
    trainer.save_checkpoint(&ckpt_path)?;
    trainer.export(&a.out)?;
    let loss = last.map_or("none".to_string(), |e| format!("{:.6}", e.loss));
    Ok(format!("ok command=train steps={} final_loss={loss} out={}", trainer.step, a.out.display()))
}

fn track(a: TrackArgs) -> Result<String> {
    let seq = Sequence::read(&a.data)?;
    let (model, _) = FeTapModel::load(&a.weights)?;
    let mut runtime = match &a.config {
        Some(p) => RunConfig::load(p)?.tracker,
        None => model.tracker.clone(),
    };
    runtime.time_embed &= !a.no_time_embed;
    runtime.use_frames &= !a.no_frames;
    runtime.use_events &= !a.no_events;
    let model = model.with_runtime(&runtime)?;
    let queries = match &a.queries {
        Some(q) => read_queries(q)?,
        None => seq.queries.clone(),
    };
    let tracks = run_offline(&model, &seq.recording(), &queries)?;
    write_tracks(&a.out, &tracks)?;
    let rows: usize = tracks.iter().map(|t| t.samples.len()).sum();
    Ok(format!("ok command=track queries={} rows={rows} out={}", queries.len(), a.out.display()))
}

fn gt_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("gt.csv")
    } else {
        path.to_path_buf()
    }
}

fn eval(a: EvalArgs) -> Result<String> {
    let pred = read_tracks(&a.pred)?;
    let gt_path = gt_file(&a.gt);
    let gt = read_gt(&gt_path)?;
    let seq_dir = if a.gt.is_dir() { a.gt.as_path() } else { a.gt.parent().unwrap_or(Path::new("")) };
    let name = seq_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate(&name, &pred, &gt, a.delta)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, &json).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{json}"),
    }
    Ok(format!(
        "ok command=eval tracks={} fa_avg={:.6} efa_avg={:.6} delta_px={}",
        report.per_track.len(),
        report.fa_avg,
        report.efa_avg,
        a.delta
    ))
}

fn plot(a: PlotArgs) -> Result<String> {
    let seq = Sequence::read(&a.data)?;
    let pred = read_tracks(&a.pred)?;
    let gt: Vec<Track> = match &a.gt {
        Some(g) => read_tracks(&gt_file(g))?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (i, (t, img)) in seq.frames.iter().enumerate() {
        overlay(img, *t, &pred, &gt).write_png(&a.out.join(format!("frame_{i:06}.png")))?;
    }
    Ok(format!("ok command=plot frames={} out={}", seq.frames.len(), a.out.display()))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn one_line(e: &anyhow::Error) -> String {
    let text = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

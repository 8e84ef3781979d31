use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use psgforge_core::attribution::{AttributeOptions, Displacement, HeatmapOptions};
use psgforge_core::config::PipelineConfig;
use psgforge_core::dataset::{Split, SplitMode};
use psgforge_core::gate::{self, protocol, Classifier, BACKEND_ENV};
use psgforge_core::synth::{self, SynthSpec};
use psgforge_core::tune::LrSchedule;
use psgforge_core::workflow::{self, PlanSource, SubjectInput};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

#[derive(Parser)]
#[command(name = "psgforge", version, about = "Polysomnography signal-to-image toolkit")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "PSGFORGE_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Log filter, e.g. `info` or `psgforge_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML pipeline configuration.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Output root (overrides `output_root`).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Target sampling rate, e.g. 200 or 125/2.
    #[arg(long)]
    f_target: Option<String>,
    /// Comma-separated channel order.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<String>>,
    /// Comma-separated split seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Split by subject instead of by epoch.
    #[arg(long)]
    subject_wise: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_root = o.clone();
        }
        if let Some(f) = &self.f_target {
            cfg.f_target = f.clone();
        }
        if let Some(c) = &self.channels {
            cfg.channels.wanted = c.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if self.subject_wise {
            cfg.split_mode = SplitMode::Subject;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Directory holding `<subject>.edf` with `<subject>.txt|.csv` hypnograms.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Recording files (paired with hypnograms by file stem).
    #[arg(long = "edf", num_args = 1..)]
    edf: Vec<PathBuf>,
    #[arg(long = "hypnogram", num_args = 1..)]
    hypnograms: Vec<PathBuf>,
}

impl InputArgs {
    fn resolve(&self) -> Result<Vec<SubjectInput>> {
        let mut inputs = match &self.input_dir {
            Some(dir) => workflow::discover_inputs(dir)?,
            None => Vec::new(),
        };
        if !self.edf.is_empty() {
            inputs.extend(workflow::pair_inputs(&self.edf, &self.hypnograms)?);
        }
        if inputs.is_empty() {
            bail!("no recordings given (use --input-dir or --edf/--hypnogram)");
        }
        inputs.sort_by(|a, b| a.subject.cmp(&b.subject));
        if let Some(w) = inputs.windows(2).find(|w| w[0].subject == w[1].subject) {
            bail!("subject `{}` given twice", w[0].subject);
        }
        Ok(inputs)
    }
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Classifier backend: mock:constant:<STAGE>, mock:echo, mock:probe:<ids>[:<w>],
    /// mock:fixture:<file>, tcp:<addr>, unix:<path>, exec:<cmd>.
    #[arg(long, env = BACKEND_ENV)]
    backend: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout_s: f64,
}

impl BackendArgs {
    fn open(&self) -> Result<Box<dyn Classifier>> {
        Ok(gate::open_backend(&self.backend, Duration::from_secs_f64(self.timeout_s))?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Convert recordings into labelled images and per-seed manifests.
    Convert {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Render a channel-failure variant of the dataset under <out>/corrupted.
    Corrupt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        inputs: InputArgs,
        /// Draw a new plan from this seed.
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        seed: Option<u64>,
        /// Replay an existing plan file.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Failed channels per affected subject.
        #[arg(long)]
        k_channels: Option<usize>,
        /// Fixed noise standard deviation (default: pre-onset std).
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Score a classifier on a manifest split; prints a JSON report.
    Evaluate {
        /// Manifest files or directories of `seed_*.jsonl`.
        #[arg(long = "manifest", required = true, num_args = 1..)]
        manifests: Vec<PathBuf>,
        /// Directory image paths are relative to (default: manifest's parent's parent).
        #[arg(long)]
        root: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        prompt: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Patch-occlusion heatmaps for rendered images.
    Attribute {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Output directory for overlays and score matrices.
        #[arg(long, short = 'o', default_value = "attribution")]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Masking luminance (default from config: 255).
        #[arg(long)]
        baseline: Option<u8>,
        #[arg(long)]
        top_fraction: Option<f64>,
        #[arg(long)]
        no_smooth: bool,
        /// Measure displacement on logits instead of probabilities.
        #[arg(long)]
        logits: bool,
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Serve a backend over the line protocol (stdio unless --listen is given).
    ProtocolServe {
        #[arg(long, env = BACKEND_ENV, default_value = "mock:echo")]
        backend: String,
        /// tcp:<addr> or unix:<path>.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Print the resolved configuration, its provenance hash and training defaults.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training samples used to print the learning-rate schedule length.
        #[arg(long)]
        train_samples: Option<usize>,
    },
    /// Write a seeded synthetic fixture (EDF + hypnogram per subject, plus a
    /// matching `psgforge.toml`).
    Synth {
        #[arg(long, short = 'o')]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        subjects: usize,
        /// Recording length per subject in seconds.
        #[arg(long, default_value_t = 600)]
        seconds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Convert { cfg, inputs } => {
            let cfg = cfg.resolve()?;
            let inputs = inputs.resolve()?;
            let report = workflow::cmd_convert(&cfg, &inputs, cli.workers)?;
            tracing::info!(images = report.images, written = report.files_written, root = %report.root.display(), "convert finished");
            print_json(&report)?;
        }
        Command::Corrupt { cfg, inputs, seed, plan, k_channels, noise_sigma } => {
            let mut cfg = cfg.resolve()?;
            if let Some(k) = k_channels {
                cfg.corruption.k_channels = k;
            }
            if noise_sigma.is_some() {
                cfg.corruption.noise_sigma = noise_sigma;
            }
            cfg.validate()?;
            let inputs = inputs.resolve()?;
            let source = match (seed, plan) {
                (_, Some(p)) => PlanSource::File(p),
                (Some(s), None) => PlanSource::Seed(s),
                (None, None) => bail!("either --seed or --plan is required"),
            };
            let report = workflow::cmd_corrupt(&cfg, &inputs, &source, cli.workers)?;
            tracing::info!(subjects = report.augmented_subjects.len(), plan = %report.plan_path.display(), "corrupt finished");
            print_json(&report)?;
        }
        Command::Evaluate { manifests, root, backend, split, prompt, output } => {
            let loaded = workflow::load_manifests(&manifests)?;
            let root = match root {
                Some(r) => r,
                None => default_image_root(&manifests[0])?,
            };
            let classifier = backend.open()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let prompt = prompt.unwrap_or_else(|| gate::DEFAULT_PROMPT.to_string());
            let report = workflow::cmd_evaluate(&loaded, &root, classifier.as_ref(), &prompt, split)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(o) = output {
                workflow::write_if_changed(&o, text.as_bytes())?;
            }
            print!("{text}");
        }
        Command::Attribute { images, backend, out, config, baseline, top_fraction, no_smooth, logits, prompt } => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            let opts = AttributeOptions {
                baseline: baseline.unwrap_or(cfg.attribution.baseline),
                prompt: prompt.unwrap_or_else(|| cfg.prompt.clone()),
                mode: if logits { Displacement::Logits } else { cfg.attribution.displacement },
            };
            let heat = HeatmapOptions {
                top_fraction: top_fraction.unwrap_or(cfg.attribution.top_fraction),
                smooth: cfg.attribution.smooth && !no_smooth,
                ..Default::default()
            };
            if !(heat.top_fraction > 0.0 && heat.top_fraction <= 1.0) {
                bail!("--top-fraction must lie in (0, 1]");
            }
            let classifier = backend.open()?;
            let provenance = cfg.provenance_hash();
            let report = workflow::with_workers(cli.workers, || {
                workflow::cmd_attribute(&images, classifier.as_ref(), &opts, &heat, &out, &provenance)
            })?;
            tracing::info!(done = report.done.len(), failed = report.failed.len(), "attribute finished");
            print_json(&report)?;
            return Ok(report.failed.is_empty());
        }
        Command::ProtocolServe { backend, listen } => serve(&backend, listen.as_deref())?,
        Command::Config { cfg, train_samples } => {
            let cfg = cfg.resolve()?;
            print!("{}", cfg.to_toml());
            println!("# provenance = {}", cfg.provenance_hash());
            if let Some(n) = train_samples {
                let t = &cfg.training;
                let steps = t.total_steps(n, t.epochs);
                let sched = LrSchedule::new(t.learning_rate, 0.0, steps, t.warmup_ratio)?;
                println!("# total_steps = {steps} warmup_steps = {}", sched.warmup_steps);
            }
        }
        Command::Synth { out, subjects, seconds, seed } => {
            if subjects == 0 {
                bail!("--subjects must be positive");
            }
            let spec = SynthSpec::standard(vec![seconds; subjects], seed);
            for f in synth::write_fixture(&spec, &out)? {
                println!("{}\t{}\t{}", f.subject, f.edf.display(), f.hypnogram.display());
            }
            let mut cfg = PipelineConfig::default();
            cfg.channels.aliases = synth::standard_aliases();
            let cfg_path = out.join("psgforge.toml");
            workflow::write_if_changed(&cfg_path, cfg.to_toml().as_bytes())?;
            tracing::info!(config = %cfg_path.display(), "fixture written");
        }
    }
    Ok(true)
}

fn default_image_root(manifest: &Path) -> Result<PathBuf> {
    let dir = if manifest.is_dir() { manifest.to_path_buf() } else { manifest.parent().map(Path::to_path_buf).unwrap_or_default() };
    dir.parent().map(Path::to_path_buf).context("cannot infer image root; pass --root")
}

fn serve(backend: &str, listen: Option<&str>) -> Result<()> {
    let classifier: Arc<dyn Classifier> = Arc::from(gate::open_backend(backend, Duration::from_secs(120))?);
    match listen {
        None => {
            let stdin = std::io::stdin();
            let served = protocol::serve_connection(classifier.as_ref(), stdin.lock(), std::io::stdout().lock())?;
            tracing::info!(served, "stdin closed");
        }
        Some(spec) => {
            if let Some(addr) = spec.strip_prefix("tcp:") {
                let listener = std::net::TcpListener::bind(addr).with_context(|| format!("bind {addr}"))?;
                tracing::info!(addr = %listener.local_addr()?, backend, "listening");
                protocol::serve_tcp(classifier, listener)?;
            } else if let Some(path) = spec.strip_prefix("unix:") {
                serve_unix(classifier, Path::new(path))?;
            } else {
                bail!("--listen expects tcp:<addr> or unix:<path>");
            }
        }
    }
    Ok(())
}

#[cfg(unix)]
fn serve_unix(classifier: Arc<dyn Classifier>, path: &Path) -> Result<()> {
    let listener = std::os::unix::net::UnixListener::bind(path).with_context(|| format!("bind {}", path.display()))?;
    tracing::info!(path = %path.display(), "listening");
    protocol::serve_unix(classifier, listener)?;
    Ok(())
}

#[cfg(not(unix))]
fn serve_unix(_: Arc<dyn Classifier>, _: &Path) -> Result<()> {
    bail!("unix sockets are not available on this platform")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "info".into()))
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            tracing::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `itm`: command-line front end for image-guided topic modeling.
//!
//! Exit codes: 0 success, 2 validation failure (bad bundle, config or
//! arguments), 3 stage failure. Failures are reported on stderr as a single
//! JSON object.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use itm_core::ablation::{run_ablation, BundleSource, Method};
use itm_core::bundle::{load_bundle, save_bundle, synth_bundle, Bundle, BundleError, SynthSpec};
use itm_core::explain::{self, global_explanation, sankey_csv};
use itm_core::pipeline::{self as pl, PipelineConfig, StageError};
use itm_core::privnet::load_model;
use itm_core::reduce::ReduceMethod;
use itm_core::topics::TopicScope;
use serde_json::json;

#[derive(Parser)]
#[command(name = "itm", version, about = "Image-guided topic modeling for interpretable classification")]
struct Cli {
    /// Pipeline config as JSON; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a bundle directory.
    Validate { dir: PathBuf },
    /// Write a synthetic bundle with planted content groups.
    Synth(SynthArgs),
    /// Reduce image embeddings; writes reduced.bin.
    Reduce {
        dir: PathBuf,
        #[arg(long)]
        method: Option<MethodArg>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cluster reduced embeddings of train and val images; writes clusters.json.
    Cluster {
        dir: PathBuf,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        #[arg(long)]
        min_samples: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Discover tag topics; writes topics.json.
    Topics {
        dir: PathBuf,
        #[arg(long)]
        min_topic_size: Option<usize>,
        #[arg(long)]
        scope: Option<ScopeArg>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Build content descriptors; writes descriptors.json.
    Descriptors {
        dir: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the linear classifier on train images; writes model.json.
    Train {
        dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score test images; writes metrics.json.
    Eval {
        dir: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Recompute metrics from the predictions stored in this metrics.json.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Explain predictions.
    Explain {
        dir: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Print the explanation of one image as JSON.
        #[arg(long, conflicts_with = "global")]
        image: Option<String>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Write sankey.csv and global.json.
        #[arg(long)]
        global: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run every stage and write all artifacts plus manifest.json.
    Run {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Compare TM and ITM across sizes and seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct OutArg {
    /// Artifact directory (defaults to the bundle directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn dir<'a>(&'a self, bundle: &'a Path) -> &'a Path {
        self.out.as_deref().unwrap_or(bundle)
    }
}

#[derive(Args, Clone)]
struct SpecArgs {
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 50)]
    images_per_group: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Probability that a tag comes from another group.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Private fraction per group, comma separated.
    #[arg(long, value_delimiter = ',')]
    private_bias: Option<Vec<f64>>,
}

impl SpecArgs {
    fn spec(&self) -> SynthSpec {
        let mut s = SynthSpec::new(self.groups, self.images_per_group, self.dim, self.sigma, self.noise);
        if let Some(b) = &self.private_bias {
            s.private_bias = b.clone();
        }
        s
    }
}

#[derive(Args)]
struct SynthArgs {
    out: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Fixed bundle; without it every seed draws a fresh synthetic bundle.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, value_delimiter = ',', default_value = "TM,ITM")]
    methods: Vec<AblateMethod>,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30")]
    sizes: Vec<usize>,
    /// Explicit seeds; otherwise 0..runs.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 5)]
    runs: u64,
    /// Directory for ablation.csv, ablation.txt and ablation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pca,
    Precomputed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    PerCluster,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateMethod {
    #[value(name = "TM", alias = "tm")]
    Tm,
    #[value(name = "ITM", alias = "itm")]
    Itm,
}

enum Failure {
    Validation { kind: String, message: String },
    Stage { stage: String, message: String },
}

impl Failure {
    fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        Failure::Stage {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }

    fn config(e: anyhow::Error) -> Self {
        Failure::Validation {
            kind: "InvalidConfig".into(),
            message: format!("{e:#}"),
        }
    }

    fn report(&self) -> (serde_json::Value, u8) {
        match self {
            Failure::Validation { kind, message } => (json!({"error": kind, "message": message}), 2),
            Failure::Stage { stage, message } => (json!({"error": "StageFailed", "stage": stage, "message": message}), 3),
        }
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        Failure::Validation {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<pl::PipelineError> for Failure {
    fn from(e: pl::PipelineError) -> Self {
        if let StageError::Bundle(b) = e.source {
            return b.into();
        }
        Failure::stage(&e.stage.to_string(), &e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (report, code) = f.report();
            eprintln!("{report}");
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::config)
}

fn check_config(cfg: &PipelineConfig) -> Result<(), Failure> {
    let bad = |m: &str| Err(Failure::config(anyhow::anyhow!("{m}")));
    if cfg.reducer.target_dim == 0 {
        return bad("reducer.target_dim must be positive");
    }
    if cfg.cluster.min_cluster_size < 2 {
        return bad("cluster.min_cluster_size must be at least 2");
    }
    if cfg.cluster.min_samples == Some(0) {
        return bad("cluster.min_samples must be positive");
    }
    if cfg.topics.min_topic_size < 2 {
        return bad("topics.min_topic_size must be at least 2");
    }
    if cfg.train.epochs == 0 || cfg.train.batch == 0 {
        return bad("train.epochs and train.batch must be positive");
    }
    if !(cfg.train.lr.is_finite() && cfg.train.lr > 0.0) {
        return bad("train.lr must be a positive number");
    }
    if cfg.top_k == 0 {
        return bad("top_k must be positive");
    }
    Ok(())
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Outcome {
    pl::write_artifact(dir, name, bytes).map_err(|e| Failure::stage("io", e))?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(())
}

fn model_path(model: &Option<PathBuf>, out: &Path) -> PathBuf {
    model.clone().unwrap_or_else(|| out.join(pl::MODEL_ARTIFACT))
}

fn dispatch(cli: Cli) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Validate { dir } => {
            let b = load_bundle(&dir)?;
            println!(
                "{}",
                json!({"ok": true, "images": b.records.len(), "vocabulary": b.vocabulary.len(), "dim": b.dim()})
            );
            Ok(())
        }
        Command::Synth(args) => {
            let b = synth_bundle(&args.spec.spec(), args.seed)?;
            save_bundle(&b, &args.out)?;
            Ok(())
        }
        Command::Reduce { dir, method, dim, seed, out } => {
            if let Some(m) = method {
                cfg.reducer.method = match m {
                    MethodArg::Pca => ReduceMethod::Pca,
                    MethodArg::Precomputed => ReduceMethod::Precomputed,
                };
            }
            set(&mut cfg.reducer.target_dim, dim);
            set(&mut cfg.seed, seed);
            check_config(&cfg)?;
            let b = load_bundle(&dir)?;
            let reduced = pl::stage_reduce(&b, &cfg).map_err(|e| Failure::stage("reduce", e))?;
            write(out.dir(&dir), pl::REDUCED_ARTIFACT, &pl::reduced_bytes(&reduced))
        }
        Command::Cluster {
            dir,
            min_cluster_size,
            min_samples,
            out,
        } => {
            set(&mut cfg.cluster.min_cluster_size, min_cluster_size);
            if min_samples.is_some() {
                cfg.cluster.min_samples = min_samples;
            }
            check_config(&cfg)?;
            let b = load_bundle(&dir)?;
            let od = out.dir(&dir);
            let clusters = pl::read_reduced(od, &b)
                .and_then(|r| pl::stage_cluster(&b, &r, &cfg.cluster))
                .map_err(|e| Failure::stage("cluster", e))?;
            write(od, pl::CLUSTERS_ARTIFACT, &pl::json_bytes(&clusters))
        }
        Command::Topics {
            dir,
            min_topic_size,
            scope,
            out,
        } => {
            set(&mut cfg.topics.min_topic_size, min_topic_size);
            if let Some(s) = scope {
                cfg.topics.scope = match s {
                    ScopeArg::PerCluster => TopicScope::PerCluster,
                    ScopeArg::Global => TopicScope::Global,
                };
            }
            check_config(&cfg)?;
            let b = load_bundle(&dir)?;
            let od = out.dir(&dir);
            let topics = pl::read_artifact(od, pl::CLUSTERS_ARTIFACT)
                .and_then(|c| pl::stage_topics(&b, &c, &cfg.topics))
                .map_err(|e| Failure::stage("topics", e))?;
            write(od, pl::TOPICS_ARTIFACT, &pl::json_bytes(&topics))
        }
        Command::Descriptors { dir, out } => {
            let b = load_bundle(&dir)?;
            let od = out.dir(&dir);
            let descriptors = (|| {
                let clusters = pl::read_artifact(od, pl::CLUSTERS_ARTIFACT)?;
                let topics = pl::read_artifact(od, pl::TOPICS_ARTIFACT)?;
                pl::stage_descriptors(&b, &clusters, &topics, &cfg.name_overrides)
            })()
            .map_err(|e| Failure::stage("descriptors", e))?;
            write(od, pl::DESCRIPTORS_ARTIFACT, &pl::json_bytes(&descriptors))
        }
        Command::Train {
            dir,
            epochs,
            lr,
            batch,
            seed,
            out,
        } => {
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.lr, lr);
            set(&mut cfg.train.batch, batch);
            set(&mut cfg.seed, seed);
            check_config(&cfg)?;
            let b = load_bundle(&dir)?;
            let od = out.dir(&dir);
            let model = pl::read_artifact::<Vec<_>>(od, pl::DESCRIPTORS_ARTIFACT)
                .and_then(|d| pl::stage_train(&b, &d, &cfg.train_config()))
                .map_err(|e| Failure::stage("train", e))?;
            write(od, pl::MODEL_ARTIFACT, &pl::json_bytes(&model))
        }
        Command::Eval {
            dir,
            model,
            predictions,
            out,
        } => {
            if let Some(p) = predictions {
                return recompute_metrics(&p);
            }
            let b = load_bundle(&dir)?;
            let od = out.dir(&dir);
            let model = load_model(&model_path(&model, od)).map_err(|e| Failure::stage("eval", e))?;
            let metrics = pl::stage_eval(&b, &model, cfg.topics.scope).map_err(|e| Failure::stage("eval", e))?;
            for w in &metrics.metrics.warnings {
                log::warn!("{w}");
            }
            write(od, pl::METRICS_ARTIFACT, &pl::json_bytes(&metrics))?;
            println!("{}", summary(&metrics.metrics));
            Ok(())
        }
        Command::Explain {
            dir,
            model,
            image,
            top_k,
            global,
            out,
        } => {
            set(&mut cfg.top_k, top_k);
            check_config(&cfg)?;
            let od = out.dir(&dir);
            let model = load_model(&model_path(&model, od)).map_err(|e| Failure::stage("explain", e))?;
            if global {
                let g = global_explanation(&model);
                let csv = sankey_csv(&g).map_err(|e| Failure::stage("explain", e))?;
                write(od, "sankey.csv", csv.as_bytes())?;
                return write(od, "global.json", &pl::json_bytes(&g));
            }
            let b = load_bundle(&dir)?;
            if let Some(id) = image {
                let e = pl::explain_image(&b, &model, &id, cfg.top_k).map_err(|e| Failure::stage("explain", e))?;
                print!("{}", String::from_utf8_lossy(&pl::json_bytes(&e)));
                return Ok(());
            }
            let all = pl::stage_explain(&b, &model, cfg.top_k).map_err(|e| Failure::stage("explain", e))?;
            write(od, pl::EXPLANATIONS_ARTIFACT, &pl::json_bytes(&all))?;
            explain::render_report(&all.local, &od.join("report.json")).map_err(|e| Failure::stage("explain", e))
        }
        Command::Run { dir, seed, out } => {
            set(&mut cfg.seed, seed);
            check_config(&cfg)?;
            let b = load_bundle(&dir)?;
            let result = pl::run_pipeline(&b, &cfg, Some(out.dir(&dir)))?;
            for w in &result.metrics.metrics.warnings {
                log::warn!("{w}");
            }
            println!("{}", summary(&result.metrics.metrics));
            Ok(())
        }
        Command::Ablate(args) => ablate(cfg, args),
    }
}

fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

fn summary(m: &itm_core::privnet::Metrics) -> serde_json::Value {
    let f1 = |c: &str| m.class(c).map(|x| x.f1);
    json!({
        "u_ba": m.u_ba,
        "u_f1": m.u_f1,
        "f1_public": f1("public"),
        "f1_private": f1("private"),
        "total": m.total,
    })
}

fn recompute_metrics(path: &Path) -> Outcome {
    let (dir, name) = match (path.parent(), path.file_name()) {
        (Some(d), Some(n)) => (d, n.to_string_lossy().into_owned()),
        _ => return Err(Failure::config(anyhow::anyhow!("bad predictions path {}", path.display()))),
    };
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    let stored: pl::MetricsArtifact = pl::read_artifact(dir, &name).map_err(|e| Failure::stage("eval", e))?;
    let m = pl::metrics_from_stored(&stored.predictions, &pl::class_names()).map_err(|e| Failure::stage("eval", e))?;
    print!("{}", String::from_utf8_lossy(&pl::json_bytes(&m)));
    Ok(())
}

fn ablate(cfg: PipelineConfig, args: AblateArgs) -> Outcome {
    check_config(&cfg)?;
    let source = match &args.bundle {
        Some(dir) => BundleSource::Fixed(Box::new(load_bundle(dir)?)),
        None => {
            let spec = args.spec.spec();
            // surface spec errors as validation failures before fanning out
            let _: Bundle = synth_bundle(&spec, 0)?;
            BundleSource::Synth(spec)
        }
    };
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| match m {
            AblateMethod::Tm => Method::Tm,
            AblateMethod::Itm => Method::Itm,
        })
        .collect();
    let seeds = args.seeds.clone().unwrap_or_else(|| (0..args.runs).collect());
    let report = run_ablation(&source, &cfg, &methods, &args.sizes, &seeds).map_err(|e| match e {
        itm_core::ablation::AblationError::TooFewSeeds(_) | itm_core::ablation::AblationError::EmptyGrid => {
            Failure::config(e.into())
        }
        other => Failure::stage("ablation", other),
    })?;
    let table = report.to_table();
    if let Some(out) = &args.out {
        write(out, "ablation.csv", report.to_csv().as_bytes())?;
        write(out, "ablation.txt", table.as_bytes())?;
        write(out, "ablation.json", &pl::json_bytes(&report))?;
    }
    print!("{table}");
    Ok(())
}

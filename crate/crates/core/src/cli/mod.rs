//! Command-line front end. `run` parses arguments, executes one subcommand on
//! a worker pool of the requested size and maps errors to exit codes:
//! 0 success, 1 usage, 2 data, 3 numeric failure.

mod pipeline;

pub use pipeline::{distance_cache_path, materialize, Materialized, TimingReport};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::align::{align_directed, align_symmetric, bootstrap_ci, AlignMode, Statistic};
use crate::cde::{train, CdeConfig};
use crate::data::{
    self, load_distance_matrix, load_manifest, load_transfer_matrix, load_transfer_matrix_as_stored,
    write_distance_matrix, DistanceKind, DistanceMatrix, Split, TransferMatrix,
};
use crate::directed::{directed_distance_matrix, dsw_tag, DswConfig};
use crate::distance::{distance_matrix, metric_tag, Metric, SwConfig};
use crate::encoder::{load_head, save_head, EncoderSpec, MetricHead};
use crate::error::{Error, ErrorClass, Result};
use crate::protocols::{
    augmentation_gain, kmedoids_select, rank_auxiliaries, select_source, source_selection_report, subset_regret,
    AugmentationReport, DecisionReport, KMedoidsResult, Protocol, RegretReport, SubsetScore,
};
use crate::robustness::{corruption_sweep, CorruptionMode, SweepConfig, SweepRow};
use crate::synth::{gen_library, gen_transfer_matrix, write_bundle, Distortion, Link, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "dsgeo", version, about = "Dataset geometry: distances, refinement and selection for embedding libraries")]
pub struct Cli {
    /// Seed for every random choice (defaults to 0, or the config file's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic library with a planted ground truth.
    Synth(SynthArgs),
    /// Materialize embeddings (encoder, then optional head) for a manifest.
    Embed(EmbedArgs),
    /// Build a dataset distance matrix.
    Dist(DistArgs),
    /// Train a metric head against a transfer matrix.
    Refine(RefineArgs),
    /// Correlate a distance matrix with a transfer matrix.
    Eval(EvalArgs),
    /// Rank candidate sources for a target.
    SelectSource(SelectSourceArgs),
    /// Choose k datasets with k-medoids.
    SelectSubset(SelectSubsetArgs),
    /// Rank auxiliary datasets for augmenting a target.
    RankAux(RankAuxArgs),
    /// Label-corruption sweep.
    Corrupt(CorruptArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub datasets: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub spread_jitter: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Random rotation plus per-coordinate scaling in [1/s, s].
    #[arg(long)]
    pub distort: Option<f64>,
    #[arg(long, value_enum)]
    pub link: Option<LinkKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkKind {
    Affine,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderKind {
    /// Inputs already are embeddings.
    File,
    /// Seeded random linear projection of raw features.
    Toy,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = EncoderKind::File)]
    pub encoder: EncoderKind,
    /// Output dimension of the toy encoder.
    #[arg(long, default_value_t = 16)]
    pub toy_dim: usize,
    /// Metric head checkpoint applied after the encoder.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Reuse embeddings across runs.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Write {t_embed, t_dist, t_total} here.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub enc: EncodeArgs,
    /// Directory for the embeddings and a manifest pointing at them.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelAware {
    /// Require labels and a shared class for every pair.
    On,
    Off,
    /// Label-aware where possible, label-agnostic otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Centroid,
    Sw,
}

#[derive(Debug, Args)]
pub struct SwArgs {
    #[arg(long, value_enum, default_value_t = MetricArg::Sw)]
    pub metric: MetricArg,
    /// Number of random projections.
    #[arg(long, default_value_t = 64)]
    pub projections: usize,
    /// Per-class sample cap.
    #[arg(long, default_value_t = 200)]
    pub cap: usize,
    #[arg(long, value_enum, default_value_t = LabelAware::Auto)]
    pub label_aware: LabelAware,
}

#[derive(Debug, Args)]
pub struct DistArgs {
    #[command(flatten)]
    pub enc: EncodeArgs,
    #[command(flatten)]
    pub sw: SwArgs,
    /// Directed prior-weighted distance with a spread penalty.
    #[arg(long)]
    pub directed: bool,
    /// Spread-penalty weight of the directed distance.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub renormalize_priors: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub enc: EncodeArgs,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub p_matrix: PathBuf,
    /// Starting head (default: identity-initialized MLP).
    #[arg(long)]
    pub init_head: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Head checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log, one JSON record per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Symmetric,
    Directed,
    /// Directed for directed matrices, symmetric otherwise.
    Auto,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub p_matrix: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Auto)]
    pub mode: EvalMode,
    /// Dataset-bootstrap resamples for std estimates (0 disables).
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectSourceArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long, default_value_t = 1)]
    pub top: usize,
    /// Score the choice against this transfer matrix.
    #[arg(long)]
    pub p_matrix: Option<PathBuf>,
    /// Also print a plain-text table to stdout.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectSubsetArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// JSON list of {"ids": [...], "score": x} used to compute regret.
    #[arg(long)]
    pub universe: Option<PathBuf>,
    /// Universe scores are errors (lower is better) rather than accuracies.
    #[arg(long)]
    pub lower_is_better: bool,
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankAuxArgs {
    #[arg(long)]
    pub dist: PathBuf,
    #[arg(long)]
    pub target: String,
    /// Defaults to every other dataset.
    #[arg(long)]
    pub top: Option<usize>,
    /// CSV `id,score` of performance after augmenting with each auxiliary.
    #[arg(long)]
    pub aug_scores: Option<PathBuf>,
    /// Performance without augmentation.
    #[arg(long, requires = "aug_scores")]
    pub base: Option<f64>,
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Noise,
    Drop,
    Strip,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub p_matrix: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    pub mode: Vec<ModeArg>,
    /// Corruption levels (flip probability or drop fraction); ignored by strip.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub level: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[command(flatten)]
    pub sw: SwArgs,
    /// Also score the directed distance.
    #[arg(long)]
    pub directed: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `argv` and execute. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Embed(a) => cmd_embed(a, seed),
        Command::Dist(a) => cmd_dist(a, seed),
        Command::Refine(a) => cmd_refine(a, cli.seed),
        Command::Eval(a) => cmd_eval(a, seed, cli.format),
        Command::SelectSource(a) => cmd_select_source(a, cli.format),
        Command::SelectSubset(a) => cmd_select_subset(a, seed, cli.format),
        Command::RankAux(a) => cmd_rank_aux(a, cli.format),
        Command::Corrupt(a) => cmd_corrupt(a, seed, cli.format),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::parse("report", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::parse("csv", e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::parse("csv", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::parse("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::parse("csv", e))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(a: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                spec.$field = v;
            }
        };
    }
    set!(a.datasets, n_datasets);
    set!(a.classes, n_classes);
    set!(a.dim, dim);
    set!(a.samples, samples_per_dataset);
    set!(a.shift, shift_scale);
    set!(a.spread_jitter, spread_jitter);
    set!(a.noise, noise_std);
    if let Some(s) = a.distort {
        if !(s >= 1.0) {
            return Err(Error::InvalidConfig(format!("--distort must be >= 1, got {s}")));
        }
        spec.distortion = Distortion::Linear {
            scale_min: 1.0 / s,
            scale_max: s,
        };
    }
    match a.link {
        Some(LinkKind::Affine) if !matches!(spec.link, Link::Affine { .. }) => {
            spec.link = Link::Affine {
                slope: 0.1,
                intercept: 0.05,
            }
        }
        Some(LinkKind::Logistic) if !matches!(spec.link, Link::Logistic { .. }) => {
            spec.link = Link::Logistic {
                slope: 1.0,
                midpoint: 2.0,
            }
        }
        _ => {}
    }
    spec.validate()?;
    let lib = gen_library(&spec)?;
    let p = gen_transfer_matrix(&lib.g, &spec.link, spec.noise_std, spec.seed)?;
    let paths = write_bundle(&a.out, &lib, &p)?;
    write_text(&a.out.join("spec.json"), &to_json(&spec)?)?;
    log::info!("wrote {}", paths.manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// embed / dist

fn build_encoder(a: &EncodeArgs, manifest: &data::LibraryManifest, seed: u64) -> Result<EncoderSpec> {
    match a.encoder {
        EncoderKind::File => Ok(EncoderSpec::FileBacked),
        EncoderKind::Toy => {
            let first = manifest.entries.first().ok_or(Error::EmptyLibrary)?;
            let (_, d_raw) = data::read_embedding_dims(&data::input_path(manifest, first))?;
            EncoderSpec::toy_linear(d_raw, a.toy_dim, seed)
        }
    }
}

fn materialize_from(a: &EncodeArgs, seed: u64) -> Result<(data::LibraryManifest, Materialized)> {
    let manifest = load_manifest(&a.manifest)?;
    let encoder = build_encoder(a, &manifest, seed)?;
    let head = a.head.as_deref().map(load_head).transpose()?;
    let m = materialize(&manifest, &encoder, head.as_ref(), a.cache_dir.as_deref())?;
    Ok((manifest, m))
}

fn write_timing(path: Option<&Path>, t: TimingReport) -> Result<()> {
    match path {
        Some(p) => write_text(p, &to_json(&t)?),
        None => Ok(()),
    }
}

fn cmd_embed(a: &EmbedArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    let (manifest, m) = materialize_from(&a.enc, seed)?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for (entry, set) in manifest.entries.iter().zip(&m.library.sets) {
        let emb = PathBuf::from(format!("{}.emb", entry.dataset_id));
        data::write_embeddings(&a.out_dir.join(&emb), set.z())?;
        let labels_path = match &entry.labels_path {
            Some(src) => {
                let dst = PathBuf::from(format!("{}.labels", entry.dataset_id));
                let src = manifest.resolve(src);
                fs::copy(&src, a.out_dir.join(&dst)).map_err(|e| Error::io(&src, e))?;
                Some(dst)
            }
            None => None,
        };
        entries.push(data::ManifestEntry {
            dataset_id: entry.dataset_id.clone(),
            embedding_path: Some(emb),
            raw_path: None,
            labels_path,
        });
    }
    let out = data::LibraryManifest {
        entries,
        split_tags: manifest.split_tags.clone(),
        base_dir: a.out_dir.clone(),
    };
    data::write_manifest(&a.out_dir.join("manifest.json"), &out)?;
    write_timing(
        a.enc.timing.as_deref(),
        TimingReport {
            t_embed: m.t_embed,
            t_dist: 0.0,
            t_total: t0.elapsed().as_secs_f64(),
        },
    )
}

fn sw_config(a: &SwArgs, seed: u64) -> SwConfig {
    SwConfig {
        projections: a.projections,
        per_class_cap: a.cap,
        seed,
        label_aware: a.label_aware != LabelAware::Off,
    }
}

fn metric_of(a: &SwArgs) -> Metric {
    match a.metric {
        MetricArg::Centroid => Metric::Centroid,
        MetricArg::Sw => Metric::Sw,
    }
}

/// Under `--label-aware on` every set must be labeled and every pair must share a class.
fn require_labels(sets: &[data::EmbeddingSet]) -> Result<()> {
    if let Some(s) = sets.iter().find(|s| !s.is_labeled()) {
        return Err(Error::Unlabeled(s.id().into()));
    }
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if a.shared_classes(b).is_empty() {
                return Err(Error::NoSharedClasses(a.id().into(), b.id().into()));
            }
        }
    }
    Ok(())
}

fn cmd_dist(a: &DistArgs, seed: u64) -> Result<()> {
    let t0 = Instant::now();
    if a.directed && a.sw.metric != MetricArg::Sw {
        return Err(Error::InvalidConfig("--directed requires --metric sw".into()));
    }
    let (_, m) = materialize_from(&a.enc, seed)?;
    let sets = &m.library.sets;
    if a.sw.label_aware == LabelAware::On || a.directed {
        require_labels(sets)?;
    }
    let sw = sw_config(&a.sw, seed);
    let metric = metric_of(&a.sw);
    let dsw = DswConfig {
        alpha: a.alpha,
        renormalize_priors: a.renormalize_priors,
    };
    let tag = if a.directed { dsw_tag(&sw, &dsw) } else { metric_tag(metric, &sw) };
    let t1 = Instant::now();
    let cached = a.enc.cache_dir.as_deref().map(|dir| distance_cache_path(dir, &m.keys, &tag));
    let d = match &cached {
        Some(p) if p.exists() => load_distance_matrix(p, None)?,
        _ => {
            let d = if a.directed {
                directed_distance_matrix(sets, &sw, &dsw)?
            } else {
                distance_matrix(sets, metric, &sw)?
            };
            if let Some(p) = &cached {
                write_distance_matrix(p, &d)?;
            }
            d
        }
    };
    let t_dist = t1.elapsed().as_secs_f64();
    write_distance_matrix(&a.out, &d)?;
    write_timing(
        a.enc.timing.as_deref(),
        TimingReport {
            t_embed: m.t_embed,
            t_dist,
            t_total: t0.elapsed().as_secs_f64(),
        },
    )
}

// ---------------------------------------------------------------------------
// refine

fn cmd_refine(a: &RefineArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: CdeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CdeConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let (manifest, m) = materialize_from(&a.enc, cfg.seed)?;
    let train_ids = manifest.ids_in(Split::Train);
    let sets: Vec<_> = m
        .library
        .sets
        .iter()
        .filter(|s| train_ids.iter().any(|id| id == s.id()))
        .cloned()
        .collect();
    let p = load_transfer_matrix_as_stored(&a.p_matrix)?;
    let positions = train_ids.iter().map(|id| p.index_of(id)).collect::<Result<Vec<_>>>()?;
    let p = p.submatrix(&positions);
    let dim = sets.first().ok_or(Error::EmptyLibrary)?.dim();
    let head = match &a.init_head {
        Some(path) => load_head(path)?,
        None => MetricHead::default_for(dim, cfg.seed)?,
    };
    let (head, log_records) = train(&sets, &p, &head, &cfg)?;
    save_head(&a.out, &head)?;
    if let Some(path) = &a.log {
        let mut text = String::new();
        for r in &log_records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::parse("log", e))?);
            text.push('\n');
        }
        write_text(path, &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Serialize)]
struct EvalReport {
    mode: &'static str,
    pearson: f64,
    spearman: f64,
    kendall: f64,
    n_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_resamples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_pearson: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    std_kendall: Option<f64>,
}

fn cmd_eval(a: &EvalArgs, seed: u64, format: Format) -> Result<()> {
    let d = load_distance_matrix(&a.dist, None)?;
    let p = load_transfer_matrix(&a.p_matrix, d.ids())?;
    let mode = match (a.mode, d.kind()) {
        (EvalMode::Symmetric, _) | (EvalMode::Auto, DistanceKind::Symmetric) => AlignMode::Symmetric,
        _ => AlignMode::Directed,
    };
    let al = match mode {
        AlignMode::Symmetric => align_symmetric(&d, &p)?,
        AlignMode::Directed => align_directed(&d, &p)?,
    };
    let mut report = EvalReport {
        mode: match mode {
            AlignMode::Symmetric => "symmetric",
            AlignMode::Directed => "directed",
        },
        pearson: al.pearson,
        spearman: al.spearman,
        kendall: al.kendall,
        n_pairs: al.n_pairs,
        bootstrap_resamples: None,
        std_pearson: None,
        std_spearman: None,
        std_kendall: None,
    };
    if a.bootstrap > 0 {
        let std = |stat| bootstrap_ci(&d, &p, stat, mode, a.bootstrap, seed).map(|s| s.std);
        report.bootstrap_resamples = Some(a.bootstrap);
        report.std_pearson = Some(std(Statistic::Pearson)?);
        report.std_spearman = Some(std(Statistic::Spearman)?);
        report.std_kendall = Some(std(Statistic::Kendall)?);
    }
    let text = match format {
        Format::Json => to_json(&report)?,
        Format::Csv => csv_text(
            &[
                "mode",
                "pearson",
                "spearman",
                "kendall",
                "n_pairs",
                "bootstrap_resamples",
                "std_pearson",
                "std_spearman",
                "std_kendall",
            ],
            &[vec![
                report.mode.to_string(),
                num(report.pearson),
                num(report.spearman),
                num(report.kendall),
                report.n_pairs.to_string(),
                report.bootstrap_resamples.map(|r| r.to_string()).unwrap_or_default(),
                opt_num(report.std_pearson),
                opt_num(report.std_spearman),
                opt_num(report.std_kendall),
            ]],
        )?,
    };
    emit(a.out.as_deref(), &text)
}

// ---------------------------------------------------------------------------
// selection

fn ranked_csv(report: &DecisionReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .ranked
        .iter()
        .enumerate()
        .map(|(i, r)| vec![(i + 1).to_string(), r.id.clone(), num(r.distance)])
        .collect();
    csv_text(&["rank", "id", "distance"], &rows)
}

fn emit_report<T: Serialize>(
    full: &T,
    report: &DecisionReport,
    format: Format,
    out: Option<&Path>,
    table: bool,
) -> Result<()> {
    let text = match format {
        Format::Json => to_json(full)?,
        Format::Csv => ranked_csv(report)?,
    };
    if table {
        print!("{}", report.to_table());
        if out.is_none() {
            return Ok(());
        }
    }
    emit(out, &text)
}

fn cmd_select_source(a: &SelectSourceArgs, format: Format) -> Result<()> {
    let d = load_distance_matrix(&a.dist, None)?;
    let report = match &a.p_matrix {
        Some(path) => {
            let p = load_transfer_matrix(path, d.ids())?;
            source_selection_report(&d, &p, &a.target, a.top)?
        }
        None => DecisionReport {
            protocol: Protocol::SourceSelection,
            target_id: Some(a.target.clone()),
            ranked: select_source(&d, &a.target, a.top)?,
            oracle_id: None,
            payoff: None,
            objective: None,
        },
    };
    emit_report(&report, &report, format, a.out.as_deref(), a.table)
}

#[derive(Debug, Serialize)]
struct SubsetReport {
    #[serde(flatten)]
    decision: DecisionReport,
    kmedoids: KMedoidsResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    regret: Option<RegretReport>,
}

fn cmd_select_subset(a: &SelectSubsetArgs, seed: u64, format: Format) -> Result<()> {
    let d = load_distance_matrix(&a.dist, None)?;
    let km = kmedoids_select(&d, a.k, seed)?;
    let regret = match &a.universe {
        Some(path) => {
            let universe: Vec<SubsetScore> = read_json(path)?;
            Some(subset_regret(&d, &universe, &km.ids, !a.lower_is_better)?)
        }
        None => None,
    };
    let decision = DecisionReport {
        protocol: Protocol::SubsetSelection,
        target_id: None,
        ranked: cluster_costs(&d, &km),
        oracle_id: None,
        payoff: None,
        objective: Some(km.objective),
    };
    let report = SubsetReport {
        decision,
        kmedoids: km,
        regret,
    };
    emit_report(&report, &report.decision, format, a.out.as_deref(), a.table)
}

/// Each medoid with the summed distance of the datasets it covers, ascending.
fn cluster_costs(d: &DistanceMatrix, km: &KMedoidsResult) -> Vec<crate::protocols::Ranked> {
    let d = if d.kind() == DistanceKind::Directed { d.symmetrized() } else { d.clone() };
    let v = d.values();
    let mut cost = vec![0.0; km.medoids.len()];
    for i in 0..d.len() {
        let (slot, dist) = km
            .medoids
            .iter()
            .enumerate()
            .map(|(s, &m)| (s, v[[i, m]]))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("k >= 1");
        cost[slot] += dist;
    }
    let mut ranked: Vec<_> = km
        .ids
        .iter()
        .zip(cost)
        .map(|(id, c)| crate::protocols::Ranked {
            id: id.clone(),
            distance: c,
        })
        .collect();
    ranked.sort_by(|x, y| x.distance.total_cmp(&y.distance).then_with(|| x.id.cmp(&y.id)));
    ranked
}

#[derive(Debug, Serialize)]
struct AuxReport {
    #[serde(flatten)]
    decision: DecisionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    augmentation: Option<AugmentationReport>,
}

fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::parse(path.display().to_string(), e))?;
            let id = rec.get(0).ok_or_else(|| Error::MissingField("id".into()))?.trim().to_string();
            let v = rec
                .get(1)
                .ok_or_else(|| Error::MissingField("score".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(path.display().to_string(), e))?;
            Ok((id, v))
        })
        .collect()
}

fn cmd_rank_aux(a: &RankAuxArgs, format: Format) -> Result<()> {
    let d = load_distance_matrix(&a.dist, None)?;
    let k = a.top.unwrap_or(d.len().saturating_sub(1));
    let ranked = rank_auxiliaries(&d, &a.target, k)?;
    let augmentation = match (&a.aug_scores, a.base) {
        (Some(path), Some(base)) => {
            let scores = read_scores(path)?;
            let mut aug = Vec::with_capacity(scores.len());
            let mut dist = Vec::with_capacity(scores.len());
            let t = d.index_of(&a.target)?;
            for (id, s) in &scores {
                aug.push(*s);
                dist.push(d.values()[[d.index_of(id)?, t]]);
            }
            Some(augmentation_gain(&aug, base, Some(&dist))?)
        }
        (Some(_), None) => return Err(Error::InvalidConfig("--aug-scores needs --base".into())),
        _ => None,
    };
    let report = AuxReport {
        decision: DecisionReport {
            protocol: Protocol::Augmentation,
            target_id: Some(a.target.clone()),
            ranked,
            oracle_id: None,
            payoff: None,
            objective: None,
        },
        augmentation,
    };
    emit_report(&report, &report.decision, format, a.out.as_deref(), a.table)
}

// ---------------------------------------------------------------------------
// corrupt

fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.name().to_string(),
                num(r.level),
                r.trials.to_string(),
                num(r.pearson.mean),
                num(r.pearson.std),
                num(r.spearman.mean),
                num(r.spearman.std),
                opt_num(r.directed_pearson.map(|m| m.mean)),
                opt_num(r.directed_pearson.map(|m| m.std)),
                opt_num(r.directed_spearman.map(|m| m.mean)),
                opt_num(r.directed_spearman.map(|m| m.std)),
            ]
        })
        .collect();
    csv_text(
        &[
            "mode",
            "level",
            "trials",
            "pearson_mean",
            "pearson_std",
            "spearman_mean",
            "spearman_std",
            "directed_pearson_mean",
            "directed_pearson_std",
            "directed_spearman_mean",
            "directed_spearman_std",
        ],
        &body,
    )
}

fn cmd_corrupt(a: &CorruptArgs, seed: u64, format: Format) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let lib = data::load_library(&manifest)?;
    let p: TransferMatrix = load_transfer_matrix(&a.p_matrix, &lib.ids())?;
    let mut cells = Vec::new();
    for &m in &a.mode {
        match m {
            ModeArg::Strip => cells.push((CorruptionMode::Strip, 1.0)),
            ModeArg::Noise => cells.extend(a.level.iter().map(|&l| (CorruptionMode::Noise, l))),
            ModeArg::Drop => cells.extend(a.level.iter().map(|&l| (CorruptionMode::Drop, l))),
        }
    }
    let cfg = SweepConfig {
        cells,
        trials: a.trials,
        metric: metric_of(&a.sw),
        sw: sw_config(&a.sw, seed),
        directed: a.directed.then(DswConfig::default),
        seed,
    };
    let rows = corruption_sweep(&lib.sets, &p, &cfg)?;
    let text = match format {
        Format::Csv => sweep_csv(&rows)?,
        Format::Json => to_json(&rows)?,
    };
    emit(a.out.as_deref(), &text)
}

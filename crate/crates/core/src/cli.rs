//! Command-line front end mirroring the HTTP service.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::directions::{
    channel_relevance, direction_from_relevance, edit_global, encode_prompt_pair,
    precompute_channel_stats, rank_channels, top_k_direction, ChannelStats, PromptSpec, Sparsity,
    StatsParams, TemplateBank, DEFAULT_PAIR_COUNT, DEFAULT_PERTURB_ALPHA, DEFAULT_SAMPLE_COUNT,
};
use crate::error::{EditError, Result};
use crate::gateway::{BackendBundle, BackendConfig, ImageTensor, ToyConfig, ToyLinearBackend};
use crate::guidance::TextGuidance;
use crate::latent::{LayerGroup, WPlusCode};
use crate::mapper::{
    apply_mapper, direction_similarity_report, load_checkpoint, sample_training_latents,
    save_checkpoint, train_mapper_with, MapperConfig, MapperModel,
};
use crate::optimizer::{optimize_latent, OptimizeConfig};
use crate::service::{self, AppState, ServiceOptions, CONFIG_ENV, DEFAULT_MAX_UPLOAD};
use crate::store::{content_fingerprint, ArtifactKey, ArtifactKind, ArtifactStore};

#[derive(Debug, Parser)]
#[command(
    name = "latent-edit",
    version,
    about = "Text-driven latent editing for style-based generators"
)]
pub struct Cli {
    /// Backend config (JSON); defaults to the built-in 64-channel toy backend.
    #[arg(long, global = true, env = CONFIG_ENV, hide_env_values = true, value_name = "PATH")]
    pub backend: Option<PathBuf>,
    /// Artifact store directory.
    #[arg(
        long,
        global = true,
        default_value = "latent-edit-store",
        value_name = "DIR"
    )]
    pub store: PathBuf,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print machine-readable JSON instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Precompute per-channel statistics for global directions.
    Precompute(PrecomputeArgs),
    /// Report the style direction for a prompt pair.
    Direction(DirectionArgs),
    /// Apply a global direction to an image.
    EditGlobal(EditGlobalArgs),
    /// Optimize a latent code towards a text prompt.
    Optimize(OptimizeArgs),
    /// Train a latent mapper for a text prompt.
    TrainMapper(TrainMapperArgs),
    /// Apply a trained mapper to an image.
    ApplyMapper(ApplyMapperArgs),
    /// Cosine similarity of a mapper's manipulation steps across latents.
    ReportSimilarity(SimilarityArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    /// Style codes perturbed per channel.
    #[arg(long, default_value_t = DEFAULT_PAIR_COUNT)]
    pub pairs: usize,
    /// Perturbation size in channel standard deviations.
    #[arg(long, default_value_t = DEFAULT_PERTURB_ALPHA)]
    pub perturb_alpha: f64,
    /// Style codes drawn to estimate channel standard deviations.
    #[arg(long, default_value_t = DEFAULT_SAMPLE_COUNT)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Target attribute text, e.g. "grey hair".
    #[arg(long)]
    pub target: String,
    /// Neutral class text, e.g. "hair".
    #[arg(long)]
    pub neutral: String,
    /// Template bank file with one "{}" slot per line; defaults to the 80 ImageNet templates.
    #[arg(long, value_name = "PATH")]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "sparsity")]
pub struct SparsityArgs {
    /// Relevance threshold.
    #[arg(long, group = "sparsity")]
    pub beta: Option<f64>,
    /// Number of active channels.
    #[arg(long, group = "sparsity")]
    pub k: Option<usize>,
}

impl SparsityArgs {
    fn sparsity(&self) -> Sparsity {
        match (self.beta, self.k) {
            (Some(b), _) => Sparsity::Beta(b),
            (_, Some(k)) => Sparsity::K(k),
            _ => unreachable!("clap enforces one of beta or k"),
        }
    }
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Input PNG to invert; without it a latent is sampled with --seed.
    #[arg(long, value_name = "PNG")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DirectionArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub sparsity: SparsityArgs,
}

#[derive(Debug, Args)]
pub struct EditGlobalArgs {
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub sparsity: SparsityArgs,
    /// Manipulation strength; negative values reverse the edit.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Where to write the edited PNG.
    #[arg(long, value_name = "PNG")]
    pub output: PathBuf,
    /// Also write the unedited render here.
    #[arg(long, value_name = "PNG")]
    pub original: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Text prompt to move towards.
    #[arg(long)]
    pub prompt: String,
    /// Start from published weights (beyonce, beard, trump); explicit flags still win.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub lambda_l2: Option<f64>,
    #[arg(long)]
    pub lambda_id: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Where to write the optimized PNG.
    #[arg(long, value_name = "PNG")]
    pub output: PathBuf,
    /// Where to write the per-step loss CSV.
    #[arg(long, value_name = "CSV")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMapperArgs {
    /// Name the checkpoint is stored under.
    #[arg(long)]
    pub name: String,
    /// Text prompt the mapper is trained for.
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Training latents sampled from the prior.
    #[arg(long, default_value_t = 64)]
    pub latents: usize,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Enabled branches, comma separated.
    #[arg(long, value_delimiter = ',', value_name = "GROUPS")]
    pub branches: Option<Vec<LayerGroup>>,
    #[arg(long)]
    pub lambda_l2: Option<f64>,
    #[arg(long)]
    pub lambda_id: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also write the checkpoint to this file.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "mapper_source")]
pub struct MapperSource {
    /// Stored mapper name.
    #[arg(long, group = "mapper_source")]
    pub name: Option<String>,
    /// Checkpoint file.
    #[arg(long, group = "mapper_source", value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyMapperArgs {
    #[command(flatten)]
    pub mapper: MapperSource,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Where to write the edited PNG.
    #[arg(long, value_name = "PNG")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub mapper: MapperSource,
    /// Latents sampled from the prior.
    #[arg(long, default_value_t = 50)]
    pub latents: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Job worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Largest accepted upload in bytes.
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD)]
    pub max_upload: usize,
}

/// Parses `args` and runs the command, writing reports to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn load_backend(path: Option<&Path>) -> Result<BackendBundle> {
    match path {
        Some(p) => BackendConfig::load(p)?.build(),
        None => Ok(BackendBundle::toy(ToyLinearBackend::new(
            ToyConfig::channels64(0),
        )?)),
    }
}

fn load_bank(path: Option<&Path>) -> Result<TemplateBank> {
    path.map_or_else(|| Ok(TemplateBank::imagenet()), TemplateBank::load)
}

fn source_latent(backend: &BackendBundle, image: Option<&Path>, seed: u64) -> Result<WPlusCode> {
    match image {
        Some(p) => backend.invert_image(&ImageTensor::from_png(&fs::read(p)?)?),
        None => Ok(backend.sample_latent(&mut ChaCha8Rng::seed_from_u64(seed))),
    }
}

fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, img.to_png()?)?;
    Ok(())
}

/// Newest stats stored for `backend`.
pub fn stored_stats(store: &ArtifactStore, backend: &BackendBundle) -> Result<ChannelStats> {
    let record = store
        .find_label(ArtifactKind::Stats, backend.fingerprint())
        .ok_or_else(|| {
            EditError::NotFound(format!(
                "no channel statistics for backend {}; run `latent-edit precompute` first",
                backend.fingerprint()
            ))
        })?;
    let stats = ChannelStats::decode(&store.get(ArtifactKind::Stats, &record.key.fingerprint)?)?;
    stats.check_backend(backend)?;
    Ok(stats)
}

fn load_mapper(
    store: &ArtifactStore,
    backend: &BackendBundle,
    src: &MapperSource,
) -> Result<MapperModel> {
    let bytes = match (&src.name, &src.checkpoint) {
        (Some(name), _) => {
            let record = store
                .find_label(ArtifactKind::Mapper, name)
                .ok_or_else(|| EditError::NotFound(format!("no mapper named {name}")))?;
            store.get(ArtifactKind::Mapper, &record.key.fingerprint)?
        }
        (_, Some(path)) => fs::read(path)?,
        _ => unreachable!("clap enforces one mapper source"),
    };
    load_checkpoint(&bytes, Some(backend.geometry()))
}

fn emit(
    out: &mut dyn Write,
    json_mode: bool,
    value: serde_json::Value,
    table: String,
) -> Result<()> {
    if json_mode {
        writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    } else {
        write!(out, "{table}")?;
    }
    Ok(())
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::Serve(args) = &cli.command {
        return serve(cli, args);
    }
    let backend = load_backend(cli.backend.as_deref())?;
    let store = ArtifactStore::open(&cli.store)?;
    match &cli.command {
        Command::Precompute(a) => {
            let params = StatsParams {
                sample_count: a.samples,
                pair_count: a.pairs,
                perturb_alpha: a.perturb_alpha,
                seed: cli.seed,
            };
            let key = params.key(backend.fingerprint());
            if !store.contains(ArtifactKind::Stats, &key) {
                let stats = precompute_channel_stats(&backend, &params, |done, total| {
                    if done % 64 == 0 || done == total {
                        log::info!("channel {done}/{total}");
                    }
                })?;
                store.put(
                    &ArtifactKey::new(ArtifactKind::Stats, &key, backend.fingerprint()),
                    &stats.encode()?,
                )?;
            }
            emit(
                out,
                cli.json,
                json!({ "stats": key, "backend": backend.fingerprint(), "params": params }),
                format!("stats {key} stored for backend {}\n", backend.fingerprint()),
            )
        }
        Command::Direction(a) => {
            let stats = stored_stats(&store, &backend)?;
            let spec = PromptSpec::new(&a.prompt.target, &a.prompt.neutral)?;
            let delta_t =
                encode_prompt_pair(&backend, &spec, &load_bank(a.prompt.bank.as_deref())?)?;
            let relevance = channel_relevance(&stats, &delta_t)?;
            let (direction, beta, saturated) = match a.sparsity.sparsity() {
                Sparsity::Beta(b) => (direction_from_relevance(&relevance, b)?, b, false),
                Sparsity::K(k) => {
                    let (d, t) = top_k_direction(&relevance, k)?;
                    (d, t.beta, t.saturated)
                }
            };
            let geom = backend.geometry();
            let active: Vec<_> = rank_channels(&relevance)
                .into_iter()
                .filter(|c| direction.values()[*c] != 0.0)
                .map(|c| {
                    let (layer, index) = geom.locate_channel(c).expect("channel in range");
                    (c, layer, index, relevance[c])
                })
                .collect();
            let mut table = format!(
                "beta {beta:.6}  active {}{}\nrank  channel  layer  index  relevance\n",
                active.len(),
                if saturated {
                    "  (fewer channels than requested have nonzero relevance)"
                } else {
                    ""
                }
            );
            for (rank, (c, layer, index, r)) in active.iter().enumerate() {
                table.push_str(&format!(
                    "{:>4}  {c:>7}  {layer:>5}  {index:>5}  {r:>+.6}\n",
                    rank + 1
                ));
            }
            emit(
                out,
                cli.json,
                json!({
                    "beta": beta,
                    "saturated": saturated,
                    "active_count": active.len(),
                    "channels": active.iter().map(|(c, layer, index, r)| json!({
                        "channel": c, "layer": layer, "index": index, "relevance": r,
                    })).collect::<Vec<_>>(),
                }),
                table,
            )
        }
        Command::EditGlobal(a) => {
            let stats = stored_stats(&store, &backend)?;
            let spec = PromptSpec::new(&a.prompt.target, &a.prompt.neutral)?;
            let w = source_latent(&backend, a.source.image.as_deref(), cli.seed)?;
            let s = backend.wplus_to_style(&w)?;
            let edit = edit_global(
                &backend,
                &stats,
                &s,
                &spec,
                &load_bank(a.prompt.bank.as_deref())?,
                a.sparsity.sparsity(),
                a.alpha,
            )?;
            write_png(&a.output, &edit.image)?;
            if let Some(p) = &a.original {
                write_png(p, &backend.generate_from_style(&s)?)?;
            }
            emit(
                out,
                cli.json,
                json!({
                    "output": a.output,
                    "active_channels": edit.direction.active_count(),
                    "beta_used": edit.beta_used,
                    "saturated": edit.saturated,
                }),
                format!(
                    "wrote {} ({} active channels, beta {:.6})\n",
                    a.output.display(),
                    edit.direction.active_count(),
                    edit.beta_used
                ),
            )
        }
        Command::Optimize(a) => {
            let base = match &a.preset {
                Some(p) => OptimizeConfig::preset(p)
                    .ok_or_else(|| EditError::InvalidArgument(format!("unknown preset {p:?}")))?,
                None => OptimizeConfig::default(),
            };
            let cfg = OptimizeConfig {
                lambda_l2: a.lambda_l2.unwrap_or(base.lambda_l2),
                lambda_id: a.lambda_id.unwrap_or(base.lambda_id),
                steps: a.steps.unwrap_or(base.steps),
                learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
                seed: cli.seed,
                ..base
            };
            let w = source_latent(&backend, a.source.image.as_deref(), cli.seed)?;
            let guidance = TextGuidance::new(&backend, &a.prompt)?;
            let trace = optimize_latent(&backend, &guidance, &w, &cfg)?;
            write_png(&a.output, &backend.generate_from_wplus(&trace.final_code)?)?;
            let csv = trace.to_csv()?;
            if let Some(p) = &a.trace {
                fs::write(p, &csv)?;
            }
            let key = ArtifactKey::new(
                ArtifactKind::Trace,
                content_fingerprint(csv.as_bytes()),
                &a.prompt,
            );
            store.put(&key, csv.as_bytes())?;
            let t = trace.final_terms;
            emit(
                out,
                cli.json,
                json!({ "output": a.output, "trace": key.fingerprint, "final_terms": t }),
                format!(
                    "wrote {}  total {:.6}  clip {:.6}  l2 {:.6}  id {:.6}\n",
                    a.output.display(),
                    t.total,
                    t.clip,
                    t.l2,
                    t.id
                ),
            )
        }
        Command::TrainMapper(a) => {
            let d = MapperConfig::default();
            let cfg = MapperConfig {
                enabled_branches: a.branches.clone().unwrap_or(d.enabled_branches.clone()),
                hidden_dim: a.hidden_dim.unwrap_or(d.hidden_dim),
                lambda_l2: a.lambda_l2.unwrap_or(d.lambda_l2),
                lambda_id: a.lambda_id.unwrap_or(d.lambda_id),
                steps: a.steps.unwrap_or(d.steps),
                batch_size: a.batch_size.unwrap_or(d.batch_size),
                learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
                seed: cli.seed,
                ..d
            };
            let latents = sample_training_latents(&backend, a.latents, cli.seed);
            let guidance = TextGuidance::new(&backend, &a.prompt)?;
            let model = train_mapper_with(
                &backend,
                &guidance,
                &a.prompt,
                &latents,
                &cfg,
                |done, total| {
                    if done % 100 == 0 || done == total {
                        log::info!("step {done}/{total}");
                    }
                },
            )?;
            let bytes = save_checkpoint(&model)?;
            let key = ArtifactKey::new(ArtifactKind::Mapper, content_fingerprint(&bytes), &a.name);
            store.put(&key, &bytes)?;
            if let Some(p) = &a.checkpoint {
                fs::write(p, &bytes)?;
            }
            let history = &model.meta.loss_history;
            emit(
                out,
                cli.json,
                json!({
                    "name": a.name,
                    "fingerprint": key.fingerprint,
                    "first_loss": history.first(),
                    "final_loss": history.last(),
                }),
                format!(
                    "mapper {} ({}) loss {:.6} -> {:.6}\n",
                    a.name,
                    key.fingerprint,
                    history.first().copied().unwrap_or(f64::NAN),
                    history.last().copied().unwrap_or(f64::NAN)
                ),
            )
        }
        Command::ApplyMapper(a) => {
            let model = load_mapper(&store, &backend, &a.mapper)?;
            let w = source_latent(&backend, a.source.image.as_deref(), cli.seed)?;
            let (_, image) = apply_mapper(&backend, &model, &w)?;
            write_png(&a.output, &image)?;
            emit(
                out,
                cli.json,
                json!({ "output": a.output }),
                format!("wrote {}\n", a.output.display()),
            )
        }
        Command::ReportSimilarity(a) => {
            let model = load_mapper(&store, &backend, &a.mapper)?;
            let latents = sample_training_latents(&backend, a.latents, cli.seed);
            let r = direction_similarity_report(&model, &latents)?;
            emit(
                out,
                cli.json,
                serde_json::to_value(r)?,
                format!(
                    "mean {:.6}  std {:.6}  pairs {}  excluded {}\n",
                    r.mean, r.std, r.pair_count, r.excluded_pairs
                ),
            )
        }
        Command::Serve(_) => unreachable!("handled above"),
    }
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<()> {
    let backend = load_backend(cli.backend.as_deref())?;
    let options = ServiceOptions {
        workers: args.workers,
        max_upload_bytes: args.max_upload,
        ..ServiceOptions::new(&cli.store)
    };
    let state = AppState::new(backend, options)?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(service::serve(state, args.listen))
}

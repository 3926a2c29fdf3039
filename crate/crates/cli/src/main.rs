//! Command-line front end: runs experiments from config files, replays
//! recorded observation streams through a filter, and manages posterior
//! snapshots. Every run writes a manifest with enough detail to repeat it.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use dekf::bandit::Policy;
use dekf::config::{ExperimentConfig, ModelKind};
use dekf::filter::UpdateMode;
use dekf::signal::{Context, EntityId};
use dekf::{sim, snapshot, DekfError};

#[derive(Parser)]
#[command(
    name = "dekf",
    version,
    about = "Online Bayesian learning for exponential-family factorization models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Replace the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Force a static world (overrides `dynamic = true`).
    #[arg(long = "static")]
    static_world: bool,

    /// Drop reference-vector anchoring: filters revert toward zero instead
    /// of the configured priors.
    #[arg(long)]
    no_reference_vectors: bool,

    /// Echo the effective config to stderr before running.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the estimation comparison and write one CSV per method.
    Estimate {
        #[command(flatten)]
        config: ConfigArgs,

        /// Output directory for CSVs and the manifest.
        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,

        /// Worker threads for replicas (1 keeps runs byte-reproducible
        /// across platforms; higher counts are still deterministic here).
        #[arg(long, value_name = "N", default_value_t = 1)]
        jobs: usize,
    },
    /// Run the interactive recommendation comparison and write one CSV per
    /// policy.
    Bandit {
        #[command(flatten)]
        config: ConfigArgs,

        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,

        #[arg(long, value_name = "N", default_value_t = 1)]
        jobs: usize,

        /// Run a single policy (thompson, greedy, random) instead of all
        /// three.
        #[arg(long, value_name = "NAME")]
        policy: Option<String>,
    },
    /// Replay a recorded observation CSV through a fresh (or imported)
    /// filter and export the final posterior snapshot.
    UpdateStream {
        #[command(flatten)]
        config: ConfigArgs,

        /// Observation CSV (see docs/stream-format.md).
        #[arg(long, value_name = "PATH")]
        stream: PathBuf,

        /// Posterior snapshot to start from instead of a fresh filter.
        #[arg(long, value_name = "PATH")]
        snapshot: Option<PathBuf>,

        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Export a filter's posterior snapshot (fresh from the config, or
    /// loaded from an existing snapshot first).
    SnapshotExport {
        #[command(flatten)]
        config: ConfigArgs,

        /// Snapshot to load before exporting.
        #[arg(long, value_name = "PATH")]
        snapshot: Option<PathBuf>,

        #[arg(long, value_name = "DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Validate a snapshot against a config: load it and report its
    /// contents, optionally re-exporting it.
    SnapshotImport {
        #[command(flatten)]
        config: ConfigArgs,

        /// Snapshot to import.
        #[arg(long, value_name = "PATH")]
        snapshot: PathBuf,

        /// Re-export the imported state here (round-trip check).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config file without running anything.
    ValidateConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(args: &ConfigArgs) -> dekf::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.static_world {
        cfg.dynamic = false;
    }
    if args.no_reference_vectors {
        cfg.reference_vectors = false;
    }
    cfg.validate()?;
    if args.verbose {
        eprintln!("effective config ({}):", args.config.display());
        match toml::to_string_pretty(&cfg) {
            Ok(text) => eprintln!("{text}"),
            Err(err) => eprintln!("  (could not render: {err})"),
        }
    }
    Ok(cfg)
}

fn run(command: Command) -> dekf::Result<()> {
    match command {
        Command::Estimate { config, out, jobs } => {
            let cfg = load_config(&config)?;
            let summaries = sim::run_estimation(&cfg, jobs)?;
            let paths = sim::write_summaries(&out, &summaries)?;
            write_manifest(&out, &cfg, jobs, &summaries, &paths)?;
            for summary in &summaries {
                let final_err = summary
                    .series
                    .final_cum_avg_abs_err()
                    .unwrap_or(f64::NAN);
                println!(
                    "{}: final cumulative avg abs error {final_err:.6} over {} sims",
                    summary.method, cfg.n_sims
                );
            }
            println!("wrote {} files to {}", paths.len() + 1, out.display());
            Ok(())
        }
        Command::Bandit {
            config,
            out,
            jobs,
            policy,
        } => {
            let cfg = load_config(&config)?;
            let policies = match policy {
                Some(name) => vec![Policy::parse(&name)?],
                None => vec![Policy::Thompson, Policy::GreedyMean, Policy::Random],
            };
            let summaries = sim::run_bandit_policies(&cfg, &policies, jobs)?;
            let paths = sim::write_summaries(&out, &summaries)?;
            write_manifest(&out, &cfg, jobs, &summaries, &paths)?;
            for summary in &summaries {
                let final_regret = summary
                    .series
                    .points
                    .last()
                    .and_then(|p| p.norm_regret)
                    .unwrap_or(f64::NAN);
                println!(
                    "{}: final normalized regret {final_regret:.4} over {} sims",
                    summary.method, cfg.n_sims
                );
            }
            println!("wrote {} files to {}", paths.len() + 1, out.display());
            Ok(())
        }
        Command::UpdateStream {
            config,
            stream,
            snapshot: snapshot_in,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut filter = sim::default_filter(&cfg)?;
            if let Some(path) = snapshot_in {
                snapshot::import_from_path(&mut filter, &path)?;
            }
            let observations = read_stream(&cfg, &stream)?;
            let n = observations.len();
            for (t, ctx, y) in observations {
                filter.update(t, &ctx, &y, UpdateMode::Dekf)?;
            }
            fs::create_dir_all(&out)?;
            let snap_path = out.join("snapshot.txt");
            snapshot::export_to_path(&filter, &snap_path)?;
            println!(
                "processed {n} observations; {} entities tracked; snapshot at {}",
                filter.len(),
                snap_path.display()
            );
            Ok(())
        }
        Command::SnapshotExport {
            config,
            snapshot: snapshot_in,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut filter = sim::default_filter(&cfg)?;
            if let Some(path) = snapshot_in {
                snapshot::import_from_path(&mut filter, &path)?;
            }
            fs::create_dir_all(&out)?;
            let snap_path = out.join("snapshot.txt");
            snapshot::export_to_path(&filter, &snap_path)?;
            println!(
                "exported {} entities to {}",
                filter.len(),
                snap_path.display()
            );
            Ok(())
        }
        Command::SnapshotImport {
            config,
            snapshot: snapshot_in,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut filter = sim::default_filter(&cfg)?;
            snapshot::import_from_path(&mut filter, &snapshot_in)?;
            println!(
                "imported {} entities from {}",
                filter.len(),
                snapshot_in.display()
            );
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                let snap_path = out.join("snapshot.txt");
                snapshot::export_to_path(&filter, &snap_path)?;
                println!("re-exported to {}", snap_path.display());
            }
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config)?;
            println!(
                "ok: {} model, horizon {}, {} sims, {} entities",
                match cfg.model {
                    ModelKind::Regression => "regression",
                    ModelKind::Mf => "mf",
                    ModelKind::Tf => "tf",
                },
                cfg.horizon,
                cfg.n_sims,
                cfg.all_entities().len()
            );
            Ok(())
        }
    }
}

fn write_manifest(
    out: &Path,
    cfg: &ExperimentConfig,
    jobs: usize,
    summaries: &[sim::RunSummary],
    csv_paths: &[PathBuf],
) -> dekf::Result<()> {
    fs::create_dir_all(out)?;
    let results: Vec<serde_json::Value> = summaries
        .iter()
        .map(|s| {
            serde_json::json!({
                "method": s.method,
                "per_sim_final": s.per_sim_final,
                "mean_final": s.per_sim_final.iter().sum::<f64>()
                    / s.per_sim_final.len().max(1) as f64,
            })
        })
        .collect();
    let files: Vec<String> = csv_paths
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "jobs": jobs,
        "config": cfg,
        "harness_choices": sim::reproduction_notes(cfg),
        "outputs": files,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DekfError::ConfigError(format!("manifest serialization failed: {e}")))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn bad_stream(line: usize, msg: impl std::fmt::Display) -> DekfError {
    DekfError::IoError(io::Error::new(
        io::ErrorKind::InvalidData,
        format!("stream line {line}: {msg}"),
    ))
}

/// Parses an observation CSV into update calls. The column layout depends on
/// the config's model; see docs/stream-format.md.
fn read_stream(
    cfg: &ExperimentConfig,
    path: &Path,
) -> dekf::Result<Vec<(u64, Context, DVector<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let expected_header = match cfg.model {
        ModelKind::Regression => {
            let dim = cfg.entity_dim("theta");
            let xs: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
            format!("t,{},y", xs.join(","))
        }
        ModelKind::Mf => "t,user,item,y".to_string(),
        ModelKind::Tf => {
            let modes = cfg.namespace_names().join(",");
            format!("t,{modes},y")
        }
    };
    let Some((_, header)) = lines.next() else {
        return Err(bad_stream(1, "empty file"));
    };
    if header.trim() != expected_header {
        return Err(bad_stream(
            1,
            format!("expected header `{expected_header}`, got `{}`", header.trim()),
        ));
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected_fields = expected_header.split(',').count();
        if fields.len() != expected_fields {
            return Err(bad_stream(
                line_no,
                format!("expected {expected_fields} fields, got {}", fields.len()),
            ));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|e| bad_stream(line_no, format!("bad t `{}`: {e}", fields[0])))?;
        let y: f64 = fields[fields.len() - 1]
            .parse()
            .map_err(|e| bad_stream(line_no, format!("bad y `{}`: {e}", fields.last().unwrap())))?;
        let ctx = match cfg.model {
            ModelKind::Regression => {
                let dim = cfg.entity_dim("theta");
                let mut x = DVector::zeros(dim);
                for (i, field) in fields[1..1 + dim].iter().enumerate() {
                    x[i] = field
                        .parse()
                        .map_err(|e| bad_stream(line_no, format!("bad x{i} `{field}`: {e}")))?;
                }
                Context::Glm {
                    x: DMatrix::from_column_slice(dim, 1, x.as_slice()),
                }
            }
            ModelKind::Mf => {
                let user: u64 = fields[1]
                    .parse()
                    .map_err(|e| bad_stream(line_no, format!("bad user `{}`: {e}", fields[1])))?;
                let item: u64 = fields[2]
                    .parse()
                    .map_err(|e| bad_stream(line_no, format!("bad item `{}`: {e}", fields[2])))?;
                Context::Mf {
                    user: EntityId::new("user", user),
                    item: EntityId::new("item", item),
                }
            }
            ModelKind::Tf => {
                let names = cfg.namespace_names();
                let mut ids = Vec::with_capacity(names.len());
                for (m, ns) in names.iter().enumerate() {
                    let id: u64 = fields[1 + m].parse().map_err(|e| {
                        bad_stream(line_no, format!("bad {ns} `{}`: {e}", fields[1 + m]))
                    })?;
                    ids.push(EntityId::new(ns.clone(), id));
                }
                Context::Tf { ids }
            }
        };
        out.push((t, ctx, DVector::from_element(1, y)));
    }
    Ok(out)
}

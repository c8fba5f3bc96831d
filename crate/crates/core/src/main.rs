use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use rigfield::dataset::{load_rig, load_virtual_views, save_rig, save_virtual_views, Dataset};
use rigfield::eval::{config_hash, evaluate, render_panorama, render_view, split_dataset, CodePolicy};
use rigfield::geometry::{RigFile, RigState};
use rigfield::pose_refine::{observability_report, solve, CorrespondenceGraph, SolverOptions};
use rigfield::radiance::Checkpoint;
use rigfield::scenegen::{generate, SceneSpec};
use rigfield::trainer::{posed_images, prepare_virtual_views, train, TrainConfig, TrainError, TrainSet};

const REFINED_RIG: &str = "rig_refined.json";
const VIRTUAL_DIR: &str = "virtual";

#[derive(Parser)]
#[command(name = "rigfield", version, about = "Radiance fields for multi-camera rigs")]
struct Cli {
    /// Overrides the seed of the scene spec and the training config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Training config (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic rig dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Scene spec as JSON; defaults to the built-in street scene.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Refine a rig from a correspondence graph.
    ///
    /// With `--scene`, paths not given default to the scene's
    /// `graph.jsonl`, `rig_init.json` and `rig_refined.json`.
    RefinePoses {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        rig_in: Option<PathBuf>,
        #[arg(long)]
        rig_out: Option<PathBuf>,
        /// Hold match depths at their stored values.
        #[arg(long)]
        no_point_depths: bool,
        /// Solver report as JSON; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Warp training images into virtual views.
    Warp {
        #[command(flatten)]
        input: SceneArgs,
        /// Defaults to `<scene>/virtual`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `virtual_per_real` from the config.
        #[arg(long)]
        virtual_per_real: Option<usize>,
    },
    /// Fit a radiance field to the training split.
    Train {
        #[command(flatten)]
        input: SceneArgs,
        /// Checkpoint path; metrics go next to it with a `.jsonl` extension.
        #[arg(long)]
        out: PathBuf,
        /// Virtual views; defaults to `<scene>/virtual` when it exists.
        #[arg(long)]
        virtual_views: Option<PathBuf>,
    },
    /// Render a camera view or a panorama from a checkpoint.
    Render {
        #[command(flatten)]
        input: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        timestamp: usize,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Equirectangular output as `WIDTHxHEIGHT` from the camera centre.
        #[arg(long)]
        panorama: Option<String>,
        /// `nearest`, `identity` or `image:<id>`.
        #[arg(long, default_value = "nearest")]
        codes: CodePolicy,
    },
    /// Score held-out views and print a table.
    Evaluate {
        #[command(flatten)]
        input: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report JSON; defaults to `<checkpoint>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "nearest")]
        codes: CodePolicy,
    },
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Rig to use; defaults to `<scene>/rig_refined.json`, else the reference rig.
    #[arg(long)]
    rig: Option<PathBuf>,
}

impl SceneArgs {
    fn load(&self) -> Result<(Dataset, RigState)> {
        let ds = Dataset::load(&self.scene).with_context(|| format!("loading {}", self.scene.display()))?;
        let refined = self.scene.join(REFINED_RIG);
        let rig = match &self.rig {
            Some(path) => load_rig(path)?.rig(),
            None if refined.exists() => load_rig(&refined)?.rig(),
            None => {
                warn!("no refined rig in {}; using the reference rig", self.scene.display());
                ds.rig_true.rig()
            }
        };
        Ok((ds, rig))
    }
}

fn load_config(cli: &Cli) -> Result<(TrainConfig, String)> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let canonical = cfg.to_toml();
    Ok((cfg, canonical))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once('x').context("panorama size must look like 512x256")?;
    Ok((w.parse()?, h.parse()?))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { out, spec } => {
            let mut spec = match spec {
                Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
                    .with_context(|| format!("parsing {}", path.display()))?,
                None => SceneSpec::street(0),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let ds = generate(&spec)?;
            ds.save(out)?;
            info!("wrote {} frames to {}", ds.frames.len(), out.display());
        }
        Command::RefinePoses { scene, graph, rig_in, rig_out, no_point_depths, report } => {
            let path = |given: &Option<PathBuf>, flag: &str, name: &str| -> Result<PathBuf> {
                match (given, scene) {
                    (Some(p), _) => Ok(p.clone()),
                    (None, Some(dir)) => Ok(dir.join(name)),
                    (None, None) => bail!("pass --scene or --{flag}"),
                }
            };
            let init = load_rig(&path(rig_in, "rig-in", "rig_init.json")?)?;
            let graph_path = path(graph, "graph", "graph.jsonl")?;
            let text = fs::read_to_string(&graph_path).with_context(|| format!("reading {}", graph_path.display()))?;
            let graph = CorrespondenceGraph::from_jsonl(&text, init.ego_poses.len(), init.cameras.len())?;
            let ks = init.intrinsics();
            let obs = observability_report(&graph, &init.rig(), &ks)?;
            for block in obs.flagged() {
                warn!("camera {} offset translation is unconstrained by the graph", block.camera);
            }
            let opts = SolverOptions { optimize_point_depths: !no_point_depths, ..SolverOptions::default() };
            let solution = solve(&graph, &init.rig(), &ks, &opts)?;
            info!(
                "cost {:.4e} -> {:.4e} in {} iterations, {} outlier edges dropped",
                solution.report.initial_cost,
                solution.report.final_cost,
                solution.report.iterations,
                solution.report.rejected_edges
            );
            let refined = RigFile::from_parts(&solution.rig, &ks, &init.names(), &init.timestamps());
            save_rig(&path(rig_out, "rig-out", REFINED_RIG)?, &refined)?;
            let json = serde_json::to_string_pretty(&solution.report)?;
            match report {
                Some(p) => write_file(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Warp { input, out, virtual_per_real } => {
            let (mut cfg, _) = load_config(cli)?;
            if let Some(v) = virtual_per_real {
                cfg.virtual_per_real = *v;
            }
            let (ds, rig) = input.load()?;
            let (train_ids, _) = split_dataset(&ds)?;
            let views = prepare_virtual_views(&ds, &rig, &train_ids, &cfg)?;
            let out = out.clone().unwrap_or_else(|| input.scene.join(VIRTUAL_DIR));
            save_virtual_views(&out, &views)?;
            info!("wrote {} virtual views to {}", views.len(), out.display());
        }
        Command::Train { input, out, virtual_views } => {
            let (cfg, canonical) = load_config(cli)?;
            let (ds, rig) = input.load()?;
            let (train_ids, test_ids) = split_dataset(&ds)?;
            let vdir = virtual_views.clone().unwrap_or_else(|| input.scene.join(VIRTUAL_DIR));
            let views = if cfg.virtual_per_real > 0 && vdir.exists() {
                load_virtual_views(&vdir)?
            } else {
                Vec::new()
            };
            let set = TrainSet::from_dataset(&ds, &rig, &train_ids, views)?;
            let held_out = posed_images(&ds, &rig, &test_ids)?;
            info!("config hash {}", config_hash(&canonical));
            let output = match train(&set, &held_out, &cfg) {
                Ok(output) => output,
                Err(TrainError::NonFinite { step, last }) => {
                    let path = out.with_extension("last");
                    last.save(&path)?;
                    bail!("loss became non-finite at step {step}; last finite state saved to {}", path.display());
                }
                Err(e) => return Err(e.into()),
            };
            write_file(out, output.checkpoint.to_bytes())?;
            write_file(&out.with_extension("jsonl"), output.log_jsonl())?;
        }
        Command::Render { input, checkpoint, out, timestamp, camera, panorama, codes } => {
            let (ds, rig) = input.load()?;
            let ck = Checkpoint::load(checkpoint)?;
            let pose = rig.camera_pose(*timestamp, *camera)?;
            let image = match panorama {
                Some(size) => {
                    let (w, h) = parse_size(size)?;
                    render_panorama(&ck, &pose, w, h, *codes)?
                }
                None => {
                    let ks = ds.intrinsics();
                    let k = ks.get(*camera).context("camera index out of range")?;
                    render_view(&ck, &pose, k, *codes)?
                }
            };
            image.save_png(out)?;
        }
        Command::Evaluate { input, checkpoint, out, codes } => {
            let (_, canonical) = load_config(cli)?;
            let (ds, rig) = input.load()?;
            let ck = Checkpoint::load(checkpoint)?;
            let (_, test_ids) = split_dataset(&ds)?;
            let report = evaluate(&ck, &ds, &rig, &test_ids, *codes, &config_hash(&canonical))?;
            let out = out.clone().unwrap_or_else(|| checkpoint.with_extension("eval.json"));
            write_file(&out, report.to_json())?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    run(&cli)
}

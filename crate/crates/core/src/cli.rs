//! Command-line front end: `map`, `eval`, `transfer` and `synth`.
//!
//! Exit status: 0 success, 1 numerical failure, 2 bad input or
//! configuration, 3 degenerate spline fit (the affine fallback is still
//! written), 4 unreachable planning goal.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, EvalReport};
use crate::pipeline::{build_scene_map_detailed, SceneMap};
use crate::scene::{load_scene, save_scene};
use crate::testkit::{gen_pair, whole_scene_group, GroundTruth, GroupTransform, SynthSpec, Transform};
use crate::transfer::{build_occupancy, transfer_long, transfer_short, Trajectory};

#[derive(Debug, Parser)]
#[command(name = "scene-analogy", version, about = "Estimate dense maps between 3D scenes and transfer trajectories through them")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the map from a target scene into a reference scene.
    Map {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Where to write the map artifact (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-point displacements (JSON).
        #[arg(long)]
        displacements: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a map with Chamfer accuracy.
    Eval {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Move a trajectory from the target scene into the reference scene.
    Transfer {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Short)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic target/reference pair with ground truth.
    Synth {
        /// Synthesis request (JSON); the built-in room when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Short,
    Long,
}

/// Config file plus per-key overrides.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Pipeline configuration (JSON); unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    /// Neighbors used by the feature field.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sample_spacing: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated Chamfer thresholds (m).
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    resolution: Option<f64>,
    #[arg(long)]
    stride: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self, base: Option<&PipelineConfig>) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => PipelineConfig::load(path)?,
            (None, Some(base)) => base.clone(),
            (None, None) => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.edge_threshold {
            cfg.edge_threshold = v;
        }
        if let Some(v) = self.k {
            cfg.field.k = v;
        }
        if let Some(v) = self.sample_spacing {
            cfg.optim.sample_spacing = v;
        }
        if let Some(v) = self.lambda {
            cfg.tps.lambda = v;
        }
        if let Some(v) = &self.thresholds {
            cfg.eval.thresholds = v.clone();
        }
        if let Some(v) = self.resolution {
            cfg.planning.resolution = v;
        }
        if let Some(v) = self.stride {
            cfg.planning.waypoint_stride = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalArtifact {
    report: EvalReport,
    config: PipelineConfig,
}

/// Synthesis request read by `synth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRequest {
    pub spec: SynthSpec,
    /// Defaults to one identity group holding every object.
    pub groups: Option<Vec<GroupTransform>>,
}

impl Default for SynthRequest {
    fn default() -> Self {
        SynthRequest {
            spec: SynthSpec::default(),
            groups: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct GroundTruthArtifact<'a> {
    truth: &'a GroundTruth,
    request: &'a SynthRequest,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn cmd_map(
    target: &Path,
    reference: &Path,
    out: &Path,
    displacements: Option<&Path>,
    config: &ConfigArgs,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let cfg = config.resolve(None)?;
    let tgt = load_scene(target)?;
    let rfr = load_scene(reference)?;
    let (map, solution) = build_scene_map_detailed(&tgt, &rfr, &cfg)?;
    map.save(out)?;
    if let Some(path) = displacements {
        write_text(path, &(solution.to_json() + "\n"))?;
    }
    let _ = write!(stdout, "{}", map.summary());
    Ok(if map.is_degenerate_fallback() { 3 } else { 0 })
}

fn cmd_eval(map: &Path, target: &Path, reference: &Path, out: Option<&Path>, config: &ConfigArgs, stdout: &mut dyn Write) -> Result<i32> {
    let map = SceneMap::load(map)?;
    let cfg = config.resolve(Some(&map.config))?;
    let tgt = load_scene(target)?;
    let rfr = load_scene(reference)?;
    let report = evaluate_map(&map, &tgt, &rfr, &cfg.eval.thresholds)?;
    let _ = write!(stdout, "{}", report.table("scene map"));
    if let Some(out) = out {
        write_text(out, &pretty(&EvalArtifact { report, config: cfg }))?;
    }
    Ok(0)
}

fn cmd_transfer(map: &Path, trajectory: &Path, reference: &Path, mode: Mode, out: &Path, config: &ConfigArgs) -> Result<i32> {
    let map = SceneMap::load(map)?;
    let cfg = config.resolve(Some(&map.config))?;
    let traj = Trajectory::load(trajectory)?;
    let mut result = match mode {
        Mode::Short => transfer_short(&traj, &map)?,
        Mode::Long => {
            let rfr = load_scene(reference)?;
            let p = &cfg.planning;
            let grid = build_occupancy(&rfr, p.resolution, p.inflation_radius, p.bounds_margin)?;
            transfer_long(&traj, &map, &grid, p.waypoint_stride, p.snap_radius)?
        }
    };
    result.config = Some(cfg);
    write_text(out, &(result.to_json() + "\n"))?;
    Ok(0)
}

fn cmd_synth(spec: Option<&Path>, out_dir: &Path) -> Result<i32> {
    let request: SynthRequest = match spec {
        None => SynthRequest::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut de = serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Format {
                context: path.display().to_string(),
                message: format!("at `{}`: {}", e.path(), e.inner()),
            })?
        }
    };
    let groups = request
        .groups
        .clone()
        .unwrap_or_else(|| whole_scene_group(&request.spec, Transform::identity()));
    let pair = gen_pair(&request.spec, &groups)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_scene(&pair.target, out_dir.join("target.json"))?;
    save_scene(&pair.reference, out_dir.join("reference.json"))?;
    let truth = GroundTruthArtifact {
        truth: &pair.truth,
        request: &request,
    };
    write_text(&out_dir.join("ground_truth.json"), &pretty(&truth))?;
    Ok(0)
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Map {
            target,
            reference,
            out,
            displacements,
            config,
        } => cmd_map(target, reference, out, displacements.as_deref(), config, stdout),
        Command::Eval {
            map,
            target,
            reference,
            out,
            config,
        } => cmd_eval(map, target, reference, out.as_deref(), config, stdout),
        Command::Transfer {
            map,
            trajectory,
            reference,
            mode,
            out,
            config,
        } => cmd_transfer(map, trajectory, reference, *mode, out, config),
        Command::Synth { spec, out_dir } => cmd_synth(spec.as_deref(), out_dir),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

//! Command-line front end for the full pipeline.
//!
//! Subcommands: `synth` (generate a ground-truth tree, render an orbit of
//! depth/mask frames, optionally derive a leaf-season variant), `fuse`
//! (manifest to volume, surface cloud, trajectory), `register` (align two
//! PLY clouds), `measure` (structural measurements of a cloud), `evalseg`
//! (mask-vs-mask segmentation metrics), `evalmeas` (measurement report vs
//! ground truth), and `fitness` (alignment quality of two clouds under a
//! transform).
//!
//! Exit codes: 0 success, 1 validation error (flags, files, configs),
//! 2 computation failure (divergence, degenerate geometry). Failures print
//! one JSON object `{"error":{"kind":...,"detail":...}}` on the error
//! stream. With `--json` every subcommand prints exactly one JSON document
//! on standard output; `--threads 1` makes reruns byte-identical.

use crate::evaluation::{fitness_score, mae, rmse, segmentation_metrics, DEFAULT_FITNESS_MAX_DIST_M};
use crate::fusion::{fuse_manifest, save_volume, BoundsPolicy, FusionConfig, FusionError, TrackingMode};
use crate::geometry::{GeometryError, PointLabel, RigidTransform, Vec3};
use crate::ingest::{
    load_mask_pgm, load_ply, manifest_load, manifest_save, save_depth_pgm, save_mask_pgm,
    save_ply, IngestError, PlyFormat,
};
use crate::measurement::{measure_tree, MeasurementConfig, MeasurementError, SpacingMode};
use crate::registration::{register, Method, RegistrationConfig, RegistrationError};
use crate::synth::{
    generate_tree, make_canopy_variant, orbit_poses, render_depth_frame, GroundTruth, SynthError,
    TreeSpec,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Intrinsics used for `synth` renders: a 640x576 depth sensor with
/// millimeter depth units.
const SYNTH_CAMERA: (u32, u32, f64, f64, f64, f64, f64) =
    (640, 576, 430.0, 430.0, 319.5, 287.5, 0.001);

/// One configuration record for the whole pipeline; each subcommand reads
/// its section, and explicit flags override file values. Unknown keys are
/// rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub fusion: FusionConfig,
    pub registration: RegistrationConfig,
    pub measurement: MeasurementConfig,
}

struct Failure {
    exit: i32,
    kind: &'static str,
    detail: String,
}

impl Failure {
    fn usage(detail: String) -> Self {
        Failure { exit: 1, kind: "usage", detail }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { exit: 1, kind: "io", detail: format!("{}: {e}", path.display()) }
    }

    fn json(path: &Path, e: serde_json::Error) -> Self {
        Failure { exit: 1, kind: "json", detail: format!("{}: {e}", path.display()) }
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        Failure { exit: 1, kind: "ingest", detail: e.to_string() }
    }
}

impl From<GeometryError> for Failure {
    fn from(e: GeometryError) -> Self {
        Failure { exit: 1, kind: "geometry", detail: e.to_string() }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        Failure { exit: 1, kind: "synth", detail: e.to_string() }
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        let exit = match &e {
            FusionError::EmptyScene
            | FusionError::VolumeTooLarge { .. }
            | FusionError::Tracking { .. }
            | FusionError::TrackingDidNotConverge { .. } => 2,
            _ => 1,
        };
        Failure { exit, kind: "fusion", detail: e.to_string() }
    }
}

impl From<RegistrationError> for Failure {
    fn from(e: RegistrationError) -> Self {
        let exit = match &e {
            RegistrationError::BadConfig { .. } => 1,
            _ => 2,
        };
        Failure { exit, kind: "registration", detail: e.to_string() }
    }
}

impl From<MeasurementError> for Failure {
    fn from(e: MeasurementError) -> Self {
        let exit = match &e {
            MeasurementError::BadConfig { .. } => 1,
            _ => 2,
        };
        Failure { exit, kind: "measurement", detail: e.to_string() }
    }
}

impl From<crate::evaluation::EvalError> for Failure {
    fn from(e: crate::evaluation::EvalError) -> Self {
        Failure { exit: 1, kind: "evaluation", detail: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "orchardfuse",
    about = "Volumetric tree reconstruction, registration, and measurement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tree: cloud, ground truth, rendered frames.
    Synth(SynthArgs),
    /// Fuse a manifest of depth/mask frames into a surface model.
    Fuse(FuseArgs),
    /// Align a source PLY cloud onto a target PLY cloud.
    Register(RegisterArgs),
    /// Measure trunk and branch structure of a labeled cloud.
    Measure(MeasureArgs),
    /// Segmentation metrics of a predicted mask against a truth mask.
    Evalseg(EvalsegArgs),
    /// Measurement report errors against ground truth.
    Evalmeas(EvalmeasArgs),
    /// Alignment fitness of two clouds under a given transform.
    Fitness(FitnessArgs),
}

#[derive(Args)]
struct Common {
    /// Emit one JSON document on standard output.
    #[arg(long)]
    json: bool,
    /// Worker threads; 0 picks automatically, 1 guarantees byte-identical
    /// reruns.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Tree spec JSON; omitted means the built-in reference tree.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    /// Rendered orbit frames.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// Camera orbit radius around the trunk.
    #[arg(long, default_value_t = 1.5)]
    orbit_radius_m: f64,
    /// Camera height; omitted means half the trunk height.
    #[arg(long)]
    orbit_height_m: Option<f64>,
    /// Also derive a leaf-season variant cloud (canopy.ply).
    #[arg(long)]
    canopy: bool,
    /// Fraction of branch clusters the canopy variant keeps.
    #[arg(long, default_value_t = 7.0 / 109.0)]
    keep_branch_frac: f64,
    /// Clutter points per cubic meter in the canopy variant.
    #[arg(long, default_value_t = 100.0)]
    clutter_density: f64,
    #[arg(long, default_value_t = 1)]
    canopy_seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FuseArgs {
    /// Capture manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    voxel_size_m: Option<f64>,
    #[arg(long)]
    truncation_m: Option<f64>,
    #[arg(long)]
    max_weight: Option<f64>,
    #[arg(long)]
    max_range_m: Option<f64>,
    #[arg(long)]
    erode_px: Option<u32>,
    /// manifest_poses or frame_to_model.
    #[arg(long)]
    tracking: Option<TrackingMode>,
    /// Fixed volume corner "x,y,z"; needs --bounds-max too.
    #[arg(long, value_parser = parse_vec3)]
    bounds_min: Option<[f64; 3]>,
    /// Fixed volume corner "x,y,z"; needs --bounds-min too.
    #[arg(long, value_parser = parse_vec3)]
    bounds_max: Option<[f64; 3]>,
    /// Padding around the observed points when bounds are automatic.
    #[arg(long)]
    auto_padding_m: Option<f64>,
    /// Also write the raw volume (volume.bin + volume.json).
    #[arg(long)]
    dump_volume: bool,
    /// Pipeline config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RegisterArgs {
    /// Cloud to move (PLY).
    #[arg(long)]
    source: PathBuf,
    /// Cloud to align against (PLY).
    #[arg(long)]
    target: PathBuf,
    /// icp, gicp, or fast_gicp.
    #[arg(long)]
    method: Option<Method>,
    /// Initial guess JSON {"transform": [16 row-major values]}.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the solved transform JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    max_corr_dist_m: Option<f64>,
    /// Gaussian voxel cell size (fast_gicp).
    #[arg(long)]
    voxel_size_m: Option<f64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    /// Align trunk-labeled points only.
    #[arg(long)]
    trunk_only: bool,
    /// Pipeline config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MeasureArgs {
    /// Labeled cloud to measure (PLY).
    #[arg(long)]
    cloud: PathBuf,
    /// Write the measurement report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    link_radius_m: Option<f64>,
    #[arg(long)]
    min_cluster_points: Option<usize>,
    /// offset_points or station_difference.
    #[arg(long)]
    spacing_mode: Option<SpacingMode>,
    /// Distance up the branch where its diameter is taken.
    #[arg(long)]
    branch_offset_m: Option<f64>,
    /// Pipeline config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalsegArgs {
    /// Predicted mask PGM.
    #[arg(long)]
    predicted: PathBuf,
    /// Ground-truth mask PGM.
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalmeasArgs {
    /// Measurement report JSON (from `measure --out`).
    #[arg(long)]
    report: PathBuf,
    /// Ground-truth JSON (from `synth`).
    #[arg(long)]
    truth: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FitnessArgs {
    /// Cloud the transform moves (PLY).
    #[arg(long)]
    source: PathBuf,
    /// Cloud it is scored against (PLY).
    #[arg(long)]
    target: PathBuf,
    /// Transform JSON {"transform": [...]}; omitted means identity.
    #[arg(long)]
    transform: Option<PathBuf>,
    /// Pairing cutoff.
    #[arg(long, default_value_t = DEFAULT_FITNESS_MAX_DIST_M)]
    max_dist_m: f64,
    /// Score trunk-labeled points only.
    #[arg(long)]
    trunk_only: bool,
    #[command(flatten)]
    common: Common,
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected \"x,y,z\", got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad coordinate {part:?}: {e}"))?;
    }
    Ok(out)
}

/// On-disk shape of a single rigid transform.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformDoc {
    transform: RigidTransform,
}

/// On-disk shape of a camera trajectory.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryDoc {
    poses: Vec<RigidTransform>,
}

/// Run the CLI on a full argument vector (program name first) and return
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run_with(argv, &mut out, &mut err)
}

fn run_with<I, T, W>(argv: I, out: &mut W, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: Write + Send,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            return emit_failure(err, &Failure::usage(e.render().to_string()));
        }
    };
    let threads = match &cli.command {
        Command::Synth(a) => a.common.threads,
        Command::Fuse(a) => a.common.threads,
        Command::Register(a) => a.common.threads,
        Command::Measure(a) => a.common.threads,
        Command::Evalseg(a) => a.common.threads,
        Command::Evalmeas(a) => a.common.threads,
        Command::Fitness(a) => a.common.threads,
    };
    let command = cli.command;
    let result = if threads == 0 {
        dispatch(command, out)
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(move || dispatch(command, out)),
            Err(e) => Err(Failure::usage(format!("cannot build a {threads}-thread pool: {e}"))),
        }
    };
    match result {
        Ok(()) => 0,
        Err(failure) => emit_failure(err, &failure),
    }
}

fn dispatch(command: Command, out: &mut impl Write) -> Result<(), Failure> {
    match command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Fuse(a) => cmd_fuse(&a, out),
        Command::Register(a) => cmd_register(&a, out),
        Command::Measure(a) => cmd_measure(&a, out),
        Command::Evalseg(a) => cmd_evalseg(&a, out),
        Command::Evalmeas(a) => cmd_evalmeas(&a, out),
        Command::Fitness(a) => cmd_fitness(&a, out),
    }
}

fn emit_failure(err: &mut impl Write, failure: &Failure) -> i32 {
    let doc = serde_json::json!({
        "error": {"kind": failure.kind, "detail": failure.detail}
    });
    let _ = writeln!(err, "{doc}");
    failure.exit
}

fn emit_json(out: &mut impl Write, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure { exit: 1, kind: "json", detail: e.to_string() })?;
    writeln!(out, "{text}").map_err(|e| Failure {
        exit: 1,
        kind: "io",
        detail: format!("stdout: {e}"),
    })
}

fn read_json_file<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::json(path, e))
}

fn write_json_file(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure { exit: 1, kind: "json", detail: e.to_string() })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn load_pipeline_config(path: Option<&PathBuf>) -> Result<PipelineConfig, Failure> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let cfg: PipelineConfig = read_json_file(p)?;
            Ok(cfg)
        }
    }
}

fn load_transform(path: Option<&PathBuf>) -> Result<RigidTransform, Failure> {
    match path {
        None => Ok(RigidTransform::identity()),
        Some(p) => {
            let doc: TransformDoc = read_json_file(p)?;
            Ok(doc.transform)
        }
    }
}

fn cmd_synth(args: &SynthArgs, out: &mut impl Write) -> Result<(), Failure> {
    let spec: TreeSpec = match &args.spec {
        Some(path) => read_json_file(path)?,
        None => TreeSpec::default(),
    };
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::io(&args.out_dir, e))?;

    let (cloud, truth) = generate_tree(&spec)?;
    let tree_ply = args.out_dir.join("tree.ply");
    save_ply(&cloud, &tree_ply, PlyFormat::BinaryLittleEndian)?;
    let truth_path = args.out_dir.join("ground_truth.json");
    write_json_file(&truth_path, &truth)?;

    let (w, h, fx, fy, cx, cy, scale) = SYNTH_CAMERA;
    let intrinsics = crate::geometry::CameraIntrinsics::new(w, h, fx, fy, cx, cy, scale)?;
    let center = Vec3::new(0.0, 0.0, spec.trunk_height_m / 2.0);
    let height = args.orbit_height_m.unwrap_or(spec.trunk_height_m / 2.0);
    let poses = orbit_poses(center, args.orbit_radius_m, height, args.frames)?;
    let mut records = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let (depth, mask) = render_depth_frame(&spec, pose, &intrinsics)?;
        let depth_name = format!("depth_{i:03}.pgm");
        let mask_name = format!("mask_{i:03}.pgm");
        save_depth_pgm(&depth, args.out_dir.join(&depth_name))?;
        save_mask_pgm(&mask, args.out_dir.join(&mask_name))?;
        records.push((depth_name, mask_name, Some(*pose), None));
    }
    let manifest_path = args.out_dir.join("manifest.json");
    manifest_save(&manifest_path, &intrinsics, &records)?;

    let canopy_points = if args.canopy {
        let variant = make_canopy_variant(
            &cloud,
            args.keep_branch_frac,
            args.clutter_density,
            args.canopy_seed,
        )?;
        let path = args.out_dir.join("canopy.ply");
        save_ply(&variant, &path, PlyFormat::BinaryLittleEndian)?;
        Some(variant.len())
    } else {
        None
    };

    if args.common.json {
        let doc = serde_json::json!({
            "out_dir": args.out_dir.display().to_string(),
            "tree_points": cloud.len(),
            "frames": args.frames,
            "canopy_points": canopy_points,
            "artifacts": {
                "tree_ply": "tree.ply",
                "ground_truth_json": "ground_truth.json",
                "manifest_json": "manifest.json",
                "canopy_ply": canopy_points.map(|_| "canopy.ply"),
            },
        });
        emit_json(out, &doc)?;
    } else {
        let _ = writeln!(
            out,
            "wrote tree.ply ({} points), ground_truth.json, and {} frame pairs to {}",
            cloud.len(),
            args.frames,
            args.out_dir.display()
        );
        if let Some(n) = canopy_points {
            let _ = writeln!(out, "wrote canopy.ply ({n} points)");
        }
    }
    Ok(())
}

fn cmd_fuse(args: &FuseArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut cfg = load_pipeline_config(args.config.as_ref())?.fusion;
    if let Some(v) = args.voxel_size_m {
        cfg.voxel_size = v;
    }
    if let Some(t) = args.truncation_m {
        cfg.truncation = Some(t);
    }
    if let Some(w) = args.max_weight {
        cfg.max_weight = w;
    }
    if let Some(r) = args.max_range_m {
        cfg.max_range_m = r;
    }
    if let Some(e) = args.erode_px {
        cfg.erode_px = e;
    }
    if let Some(t) = args.tracking {
        cfg.tracking = t;
    }
    match (args.bounds_min, args.bounds_max) {
        (Some(min), Some(max)) => {
            if args.auto_padding_m.is_some() {
                return Err(Failure::usage(
                    "--auto-padding-m conflicts with fixed --bounds-min/--bounds-max".into(),
                ));
            }
            cfg.bounds = BoundsPolicy::Fixed { min, max };
        }
        (None, None) => {
            if let Some(pad) = args.auto_padding_m {
                cfg.bounds = BoundsPolicy::Auto { padding_m: pad };
            }
        }
        _ => {
            return Err(Failure::usage(
                "--bounds-min and --bounds-max must be given together".into(),
            ));
        }
    }

    let manifest = manifest_load(&args.manifest)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::io(&args.out_dir, e))?;
    let output = fuse_manifest(&manifest, &cfg)?;

    let model_path = args.out_dir.join("model.ply");
    save_ply(&output.cloud, &model_path, PlyFormat::BinaryLittleEndian)?;
    let trajectory_path = args.out_dir.join("trajectory.json");
    write_json_file(&trajectory_path, &TrajectoryDoc { poses: output.trajectory.clone() })?;
    let volume_artifacts = if args.dump_volume {
        let bin = args.out_dir.join("volume.bin");
        let json = args.out_dir.join("volume.json");
        save_volume(&output.volume, &bin, &json)?;
        true
    } else {
        false
    };

    let dims = output.volume.dims();
    if args.common.json {
        let doc = serde_json::json!({
            "frames": manifest.frames.len(),
            "model_points": output.cloud.len(),
            "voxel_size_m": output.volume.voxel_size(),
            "truncation_m": output.volume.truncation(),
            "dims": dims,
            "observed_voxels": output.volume.observed_voxels(),
            "artifacts": {
                "model_ply": "model.ply",
                "trajectory_json": "trajectory.json",
                "volume_bin": volume_artifacts.then_some("volume.bin"),
                "volume_json": volume_artifacts.then_some("volume.json"),
            },
        });
        emit_json(out, &doc)?;
    } else {
        let _ = writeln!(
            out,
            "fused {} frames into {} surface points ({}x{}x{} voxels at {} m) in {}",
            manifest.frames.len(),
            output.cloud.len(),
            dims[0],
            dims[1],
            dims[2],
            output.volume.voxel_size(),
            args.out_dir.display()
        );
    }
    Ok(())
}

fn cmd_register(args: &RegisterArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut cfg = load_pipeline_config(args.config.as_ref())?.registration;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(n) = args.max_iterations {
        cfg.max_iterations = n;
    }
    if let Some(d) = args.max_corr_dist_m {
        cfg.max_corr_dist = d;
    }
    if let Some(v) = args.voxel_size_m {
        cfg.voxel_size = v;
    }
    if let Some(k) = args.k_neighbors {
        cfg.k_neighbors = k;
    }
    if args.trunk_only {
        cfg.trunk_only = true;
    }

    let source = load_ply(&args.source)?;
    let target = load_ply(&args.target)?;
    let init = load_transform(args.init.as_ref())?;
    let result = register(&source, &target, &init, &cfg)?;
    if !result.converged {
        return Err(Failure {
            exit: 2,
            kind: "non_convergent",
            detail: format!(
                "registration did not converge within {} iterations (fitness {:.6} m over {} pairs)",
                cfg.max_iterations, result.fitness_m, result.inlier_count
            ),
        });
    }
    if let Some(path) = &args.out {
        write_json_file(path, &TransformDoc { transform: result.transform })?;
    }
    if args.common.json {
        emit_json(out, &result)?;
    } else {
        let _ = writeln!(
            out,
            "converged in {} iterations: fitness {:.6} m over {} pairs",
            result.iterations, result.fitness_m, result.inlier_count
        );
    }
    Ok(())
}

fn cmd_measure(args: &MeasureArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut cfg = load_pipeline_config(args.config.as_ref())?.measurement;
    if let Some(r) = args.link_radius_m {
        cfg.link_radius_m = r;
    }
    if let Some(n) = args.min_cluster_points {
        cfg.min_cluster_points = n;
    }
    if let Some(m) = args.spacing_mode {
        cfg.spacing_mode = m;
    }
    if let Some(b) = args.branch_offset_m {
        cfg.branch_offset_m = b;
    }

    let cloud = load_ply(&args.cloud)?;
    let report = measure_tree(&cloud, &cfg)?;
    if let Some(path) = &args.out {
        write_json_file(path, &report)?;
    }
    if args.common.json {
        emit_json(out, &report)?;
    } else {
        let _ = writeln!(
            out,
            "trunk diameter {:.2} mm from {} stations; {} branches, {} spacings",
            report.trunk_diameter_mm,
            report.measurement_heights_m.len(),
            report.branch_count,
            report.branch_spacings_mm.len()
        );
    }
    Ok(())
}

fn cmd_evalseg(args: &EvalsegArgs, out: &mut impl Write) -> Result<(), Failure> {
    let predicted = load_mask_pgm(&args.predicted)?;
    let truth = load_mask_pgm(&args.truth)?;
    let predicted_labels: Vec<PointLabel> = predicted.labels().collect();
    let truth_labels: Vec<PointLabel> = truth.labels().collect();
    let report = segmentation_metrics(&predicted_labels, &truth_labels)?;
    if args.common.json {
        emit_json(out, &report)?;
    } else {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "iou: trunk {}, branch {}, clutter {}, mean {}",
            fmt(report.trunk.iou),
            fmt(report.branch.iou),
            fmt(report.clutter.iou),
            fmt(report.mean_iou)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ErrorStats {
    rmse_mm: Option<f64>,
    mae_mm: Option<f64>,
    /// Pairs actually compared.
    count: usize,
    /// Pairs dropped because the report has no value there.
    skipped: usize,
}

fn error_stats(predicted: &[f64], truth: &[f64], skipped: usize) -> Result<ErrorStats, Failure> {
    if predicted.is_empty() {
        return Ok(ErrorStats { rmse_mm: None, mae_mm: None, count: 0, skipped });
    }
    Ok(ErrorStats {
        rmse_mm: Some(rmse(predicted, truth)?),
        mae_mm: Some(mae(predicted, truth)?),
        count: predicted.len(),
        skipped,
    })
}

fn median_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

fn cmd_evalmeas(args: &EvalmeasArgs, out: &mut impl Write) -> Result<(), Failure> {
    let report: crate::measurement::MeasurementReport = read_json_file(&args.report)?;
    let truth: GroundTruth = read_json_file(&args.truth)?;

    // Trunk: the report's (median) diameter against the ground-truth
    // median across its stations.
    let trunk = match median_of(&truth.trunk_diameters_mm) {
        Some(gt) => error_stats(&[report.trunk_diameter_mm], &[gt], 0)?,
        None => ErrorStats { rmse_mm: None, mae_mm: None, count: 0, skipped: 0 },
    };

    // Branches pair by station order; absent fits are skipped, not scored.
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut skipped = 0usize;
    for (b, t) in report.branch_diameters_mm.iter().zip(&truth.branch_diameters_mm) {
        match b.diameter_mm {
            Some(d) => {
                pred.push(d);
                gt.push(*t);
            }
            None => skipped += 1,
        }
    }
    let branch_diameter = error_stats(&pred, &gt, skipped)?;

    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (s, t) in report.branch_spacings_mm.iter().zip(&truth.spacings_mm) {
        pred.push(s.spacing_mm);
        gt.push(*t);
    }
    let spacing = error_stats(&pred, &gt, 0)?;

    #[derive(Serialize)]
    struct EvalmeasDoc {
        trunk_diameter: ErrorStats,
        branch_diameter: ErrorStats,
        spacing: ErrorStats,
        report_branches: usize,
        truth_branches: usize,
    }
    let doc = EvalmeasDoc {
        trunk_diameter: trunk,
        branch_diameter,
        spacing,
        report_branches: report.branch_count,
        truth_branches: truth.branch_diameters_mm.len(),
    };
    if args.common.json {
        emit_json(out, &doc)?;
    } else {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            out,
            "rmse_mm: trunk {}, branch diameter {}, spacing {}",
            fmt(doc.trunk_diameter.rmse_mm),
            fmt(doc.branch_diameter.rmse_mm),
            fmt(doc.spacing.rmse_mm)
        );
    }
    Ok(())
}

fn cmd_fitness(args: &FitnessArgs, out: &mut impl Write) -> Result<(), Failure> {
    let mut source = load_ply(&args.source)?;
    let mut target = load_ply(&args.target)?;
    if args.trunk_only {
        source = source.filter_labels(|l| l == PointLabel::Trunk);
        target = target.filter_labels(|l| l == PointLabel::Trunk);
    }
    let transform = load_transform(args.transform.as_ref())?;
    let outcome = fitness_score(&source, &target, &transform, args.max_dist_m)?;
    if args.common.json {
        emit_json(out, &outcome)?;
    } else {
        match outcome.report() {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "fitness {:.6} m over {} pairs (cutoff {} m)",
                    r.fitness_m, r.pair_count, r.max_dist_m
                );
            }
            None => {
                let _ = writeln!(out, "no overlap within {} m", args.max_dist_m);
            }
        }
    }
    Ok(())
}

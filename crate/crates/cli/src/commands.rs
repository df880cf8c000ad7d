use std::fs;
use std::path::{Path, PathBuf};

use cyclemap::analysis::{
    evaluate, export_uv_obj, AnalysisError, export_uv_svg, infer_uv_with_normals, normal_colors, EvalSettings,
    Evaluation, MetricReport,
};
use cyclemap::geometry::{
    farthest_point_sampling, normalize_cloud, sample_mesh_surface, NormalizeTransform,
    PointCloud3, TriangleMesh, UvCloud,
};
use cyclemap::losses::{DistortionMode, LossReport};
use cyclemap::networks::{load_checkpoint, CheckpointError, SubNetworkSet};
use cyclemap::pipeline::{BranchMode, PipelineError};
use cyclemap::trainer::{ConfigError, RunWriter, TrainConfig, TrainError, Trainer};
use serde::{Deserialize, Serialize};

use crate::io::{parse_inputs, InputError, InputFormat, Loaded, Shape};
use crate::CliError;

/// Points per batch when inferring UVs for dense inputs.
pub const INFERENCE_CHUNK: usize = 4096;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SEAMS_FILE: &str = "seams.json";
pub const UV_OBJ_FILE: &str = "uv.obj";
pub const UV_SVG_FILE: &str = "uv.svg";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Everything needed to rerun a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Absolute path of the input file.
    pub input: PathBuf,
    pub format: InputFormat,
    /// Points sampled from the input, if a count was requested.
    pub points: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
}

/// Inputs of [`cmd_parameterize`] and [`cmd_ablate`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub input: PathBuf,
    pub config: TrainConfig,
    pub points: Option<usize>,
    pub out_dir: PathBuf,
}

impl RunOptions {
    pub fn from_manifest(m: &RunManifest, out_dir: PathBuf) -> Self {
        Self {
            input: m.input.clone(),
            config: m.config.clone(),
            points: m.points,
            out_dir,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub final_report: Option<LossReport>,
    pub metrics: MetricReport,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<InputError> for CliError {
    fn from(e: InputError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Input(format!("cannot read checkpoint: {io}")),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Geometry(g) => CliError::Input(g.to_string()),
            e @ TrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            other => CliError::Output(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Pipeline(PipelineError::NonFinite(_)) => CliError::NonFinite(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(output_err(path))
}

/// Reads a config file (if any) and applies `key=value` overrides on top.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig, CliError> {
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            TrainConfig::from_toml_str(&text)?
        }
        None => TrainConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn eval_settings(cfg: &TrainConfig) -> EvalSettings {
    EvalSettings {
        eps_factor: cfg.eps_factor,
        k_cut: cfg.k_cut,
        t_cut_fraction: cfg.t_cut_fraction,
    }
}

fn load(input: &Path) -> Result<(Loaded, InputFormat), CliError> {
    let format = InputFormat::from_path(input)?;
    Ok((parse_inputs(input)?, format))
}

/// Training points in input coordinates, plus the mesh (if any) used for
/// mesh-based metrics.
fn training_points(
    loaded: &Loaded,
    points: Option<usize>,
    seed: u64,
) -> Result<(PointCloud3, Option<TriangleMesh>), CliError> {
    match (&loaded.shape, points) {
        (Shape::Mesh(m), Some(n)) => Ok((
            sample_mesh_surface(m, n, seed).map_err(|e| CliError::Input(e.to_string()))?,
            Some(m.clone()),
        )),
        (Shape::Mesh(m), None) => Ok((PointCloud3::new(m.vertices.clone()), Some(m.clone()))),
        (Shape::Cloud(c), Some(n)) if n > c.len() => Err(CliError::Config(format!(
            "--points {n} exceeds the {} points in the input",
            c.len()
        ))),
        (Shape::Cloud(c), Some(n)) => Ok((c.select(&farthest_point_sampling(&c.points, n, 0)), None)),
        (Shape::Cloud(c), None) => Ok((c.clone(), None)),
    }
}

fn normalized_mesh(mesh: &TriangleMesh, t: &NormalizeTransform) -> TriangleMesh {
    TriangleMesh {
        vertices: mesh.vertices.iter().map(|&v| t.apply(v)).collect(),
        ..mesh.clone()
    }
}

/// Writes `uv.obj`, `uv.svg` and `seams.json` for an evaluation.
fn write_artifacts(dir: &Path, raw_points: &PointCloud3, mesh: Option<&TriangleMesh>, e: &Evaluation) -> Result<(), CliError> {
    let obj_path = dir.join(UV_OBJ_FILE);
    let mut obj = fs::File::create(&obj_path).map_err(output_err(&obj_path))?;
    match (mesh, &e.mesh) {
        (Some(raw), Some(with_uv)) => export_uv_obj(
            &mut obj,
            &raw.vertices,
            &UvCloud::new(with_uv.uvs.clone().expect("evaluation attaches UVs")),
            Some(&raw.triangles),
        ),
        _ => export_uv_obj(&mut obj, &raw_points.points, &e.uv, None),
    }
    .map_err(output_err(&obj_path))?;
    let svg_path = dir.join(UV_SVG_FILE);
    let mut svg = fs::File::create(&svg_path).map_err(output_err(&svg_path))?;
    export_uv_svg(&mut svg, &e.uv, &normal_colors(&e.normals)).map_err(output_err(&svg_path))?;
    write_json(&dir.join(SEAMS_FILE), &e.seams)
}

/// Trains on one input and writes a complete run directory.
pub fn cmd_parameterize(opts: &RunOptions) -> Result<RunSummary, CliError> {
    let cfg = &opts.config;
    let (loaded, format) = load(&opts.input)?;
    let (raw, mesh) = training_points(&loaded, opts.points, cfg.seed)?;
    let (p, transform) = normalize_cloud(&raw).map_err(|e| CliError::Input(e.to_string()))?;
    cfg.validate_for(p.len())?;

    fs::create_dir_all(&opts.out_dir).map_err(output_err(&opts.out_dir))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        input: fs::canonicalize(&opts.input).unwrap_or_else(|_| opts.input.clone()),
        format,
        points: opts.points,
        seed: cfg.seed,
        out_dir: opts.out_dir.clone(),
        config: cfg.clone(),
    };
    write_json(&opts.out_dir.join(MANIFEST_FILE), &manifest)?;

    log::info!(
        "training on {} points for {} steps ({} branches, {} distortion)",
        p.len(),
        cfg.steps,
        cfg.branches.as_str(),
        cfg.distortion.as_str()
    );
    let net = SubNetworkSet::init(&cfg.architecture(), cfg.seed);
    let mut trainer = Trainer::new(net, p.clone(), transform, cfg.clone())?;
    let mut writer = RunWriter::create(&opts.out_dir, cfg)?;
    let log = trainer.run(cfg.steps, Some(&mut writer))?;

    let norm_mesh = mesh.as_ref().map(|m| normalized_mesh(m, &transform));
    let e = evaluate(trainer.net(), &p, norm_mesh.as_ref(), eval_settings(cfg))?;
    write_artifacts(&opts.out_dir, &raw, mesh.as_ref(), &e)?;
    write_json(&opts.out_dir.join(METRICS_FILE), &e.report)?;
    Ok(RunSummary {
        manifest,
        final_report: log.reports.last().cloned(),
        metrics: e.report,
    })
}

fn load_net(checkpoint: &Path, cfg: &TrainConfig) -> Result<(SubNetworkSet, NormalizeTransform), CliError> {
    let ckpt = load_checkpoint(checkpoint, &cfg.architecture())?;
    Ok((ckpt.net, ckpt.transform))
}

/// Feeds every vertex of `input` through a trained checkpoint and writes
/// the metric report to `out`.
pub fn cmd_evaluate(checkpoint: &Path, input: &Path, cfg: &TrainConfig, out: &Path) -> Result<MetricReport, CliError> {
    let (net, transform) = load_net(checkpoint, cfg)?;
    let (loaded, _) = load(input)?;
    let raw = PointCloud3::new(loaded.shape.vertices().to_vec());
    let p = transform.apply_cloud(&raw);
    let mesh = match &loaded.shape {
        Shape::Mesh(m) => Some(normalized_mesh(m, &transform)),
        Shape::Cloud(_) => None,
    };
    let e = evaluate(&net, &p, mesh.as_ref(), eval_settings(cfg))?;
    write_json(out, &e.report)?;
    Ok(e.report)
}

/// Writes `uv.obj` and `uv.svg` for every vertex of `input`, inferred in
/// batches so dense clouds fit in memory.
pub fn cmd_export(checkpoint: &Path, input: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<(), CliError> {
    let (net, transform) = load_net(checkpoint, cfg)?;
    let (loaded, _) = load(input)?;
    let raw = loaded.shape.vertices();
    let p = transform.apply_cloud(&PointCloud3::new(raw.to_vec()));
    let (uv, normals) = infer_uv_with_normals(&net, &p, INFERENCE_CHUNK)?;
    fs::create_dir_all(out_dir).map_err(output_err(out_dir))?;
    let obj_path = out_dir.join(UV_OBJ_FILE);
    let mut obj = fs::File::create(&obj_path).map_err(output_err(&obj_path))?;
    let faces = match &loaded.shape {
        Shape::Mesh(m) => Some(&m.triangles[..]),
        Shape::Cloud(_) => None,
    };
    export_uv_obj(&mut obj, raw, &uv, faces).map_err(output_err(&obj_path))?;
    let svg_path = out_dir.join(UV_SVG_FILE);
    let mut svg = fs::File::create(&svg_path).map_err(output_err(&svg_path))?;
    export_uv_svg(&mut svg, &uv, &normal_colors(&normals)).map_err(output_err(&svg_path))
}

/// One line of `ablation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub branches: BranchMode,
    pub distortion: DistortionMode,
    pub seed: u64,
    pub steps: u64,
    pub loss_unwrap: Option<f64>,
    pub loss_wrap: Option<f64>,
    pub loss_cycle: Option<f64>,
    pub loss_distortion: Option<f64>,
    pub loss_aflip: Option<f64>,
    pub loss_total: Option<f64>,
    pub uv_overlap_fraction: f64,
    pub conformality: Option<f64>,
    pub conformality_proxy: f64,
    pub isometric_residual: f64,
    pub flip_fraction: Option<f64>,
    pub chamfer: f64,
    pub cycle_error: f64,
    pub seam_fraction: f64,
}

pub const ABLATION_VARIANTS: [(BranchMode, DistortionMode); 6] = [
    (BranchMode::Both, DistortionMode::Conformal),
    (BranchMode::Both, DistortionMode::Isometric),
    (BranchMode::ThreeDOnly, DistortionMode::Conformal),
    (BranchMode::ThreeDOnly, DistortionMode::Isometric),
    (BranchMode::TwoDOnly, DistortionMode::Conformal),
    (BranchMode::TwoDOnly, DistortionMode::Isometric),
];

fn ablation_row(name: String, cfg: &TrainConfig, s: &RunSummary) -> AblationRow {
    let r = s.final_report.as_ref();
    let m = &s.metrics;
    AblationRow {
        variant: name,
        branches: cfg.branches,
        distortion: cfg.distortion,
        seed: cfg.seed,
        steps: cfg.steps,
        loss_unwrap: r.and_then(|r| r.unwrap),
        loss_wrap: r.and_then(|r| r.wrap),
        loss_cycle: r.and_then(|r| r.cycle),
        loss_distortion: r.and_then(|r| r.distortion),
        loss_aflip: r.and_then(|r| r.aflip),
        loss_total: r.map(|r| r.total),
        uv_overlap_fraction: m.uv_overlap_fraction,
        conformality: m.conformality,
        conformality_proxy: m.conformality_proxy,
        isometric_residual: m.isometric_residual,
        flip_fraction: m.flip_fraction,
        chamfer: m.chamfer,
        cycle_error: m.cycle_error,
        seam_fraction: m.seam_fraction,
    }
}

/// Runs the six branch × distortion variants with a shared seed, each in
/// its own subdirectory, `jobs` at a time, and writes `ablation.csv`.
pub fn cmd_ablate(opts: &RunOptions, jobs: usize) -> Result<Vec<AblationRow>, CliError> {
    fs::create_dir_all(&opts.out_dir).map_err(output_err(&opts.out_dir))?;
    let runs: Vec<(String, RunOptions)> = ABLATION_VARIANTS
        .iter()
        .map(|&(branches, distortion)| {
            let name = format!("{}_{}", branches.as_str(), distortion.as_str());
            let config = TrainConfig {
                branches,
                distortion,
                ..opts.config.clone()
            };
            let run = RunOptions {
                config,
                out_dir: opts.out_dir.join(&name),
                ..opts.clone()
            };
            (name, run)
        })
        .collect();
    let mut rows = Vec::with_capacity(runs.len());
    for batch in runs.chunks(jobs.max(1)) {
        let results: Vec<Result<RunSummary, CliError>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|(_, run)| s.spawn(move || cmd_parameterize(run)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("variant thread panicked"))
                .collect()
        });
        for ((name, run), res) in batch.iter().zip(results) {
            rows.push(ablation_row(name.clone(), &run.config, &res?));
        }
    }
    let path = opts.out_dir.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Output(e.to_string()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Output(e.to_string()))?;
    }
    w.flush().map_err(output_err(&path))?;
    Ok(rows)
}

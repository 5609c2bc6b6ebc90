//! `splatsim` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or input/config error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::align::{apply_similarity, kabsch_align, Correspondences};
use crate::blocks::{partition, BlockSet, PartitionConfig, PoseEntry, Vec2};
use crate::buffers::{write_channel, Channel, FrameBuffers};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::lidar::{simulate_lidar_hybrid, write_point_cloud, CloudFormat, LidarSettings, ScanPattern};
use crate::math::{quat_to_wxyz, PoseJson, RigidTransform, Vec3};
use crate::mesh::{composite_hybrid, load_scenario, rasterize_meshes, LightingSettings, DEFAULT_OCCL_ALPHA_MIN};
use crate::raster::render_raster;
use crate::raytrace::render_rt;
use crate::regularizers::{fit_toy_scene, render_targets, FitSchedule};
use crate::scene::{load_ply, save_ply, SplatScene};
use crate::settings::{read_json, write_json, RenderSettings};

#[derive(Parser, Debug)]
#[command(name = "splatsim", version, about = "Gaussian splat sensor simulator")]
pub struct Cli {
    /// Worker threads; falls back to SPLATSIM_THREADS, then all cores.
    #[arg(long, global = true, env = "SPLATSIM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render camera buffers from a splat scene.
    Render(RenderArgs),
    /// Simulate a spinning LiDAR scan.
    Lidar(LidarArgs),
    /// Partition a pose trajectory into overlapping BEV blocks.
    Partition(PartitionArgs),
    /// Render splats with mesh actors inserted.
    Composite(CompositeArgs),
    /// Align source poses to target poses with a similarity transform.
    Align(AlignArgs),
    /// Print scene statistics.
    Info(InfoArgs),
    /// Fit appearance parameters of a toy scene to reference renders.
    Fit(FitArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Raster,
    Rt,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, required_unless_present = "blocks")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long, value_enum, default_value = "raster")]
    pub backend: Backend,
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rgb,depth,normal,intensity,seg")]
    pub channels: Vec<String>,
    /// Block index; block scenes are resolved relative to it.
    #[arg(long)]
    pub blocks: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ply,
    Csv,
}

#[derive(Args, Debug)]
pub struct LidarArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub pattern: PathBuf,
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "ply")]
    pub format: FormatArg,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub hit_alpha_min: f64,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub max_radius: f64,
    #[arg(long)]
    pub max_images: usize,
    #[arg(long)]
    pub cell_size: f64,
    #[arg(long, default_value_t = 0.0)]
    pub overlap_m: f64,
    #[arg(long)]
    pub margin_m: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompositeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub lighting: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rgb,depth,normal,intensity,seg")]
    pub channels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub with_scale: bool,
    /// Similarity JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Source poses mapped into the target frame.
    #[arg(long)]
    pub out_poses: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long)]
    pub scene: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub init: PathBuf,
    /// Reference scene rendered to produce the targets.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub settings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure split by exit code.
#[derive(Debug)]
enum Failure {
    Input(Error),
    Runtime(Error),
}

trait Stage<T> {
    fn input(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T> Stage<T> for Result<T> {
    fn input(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Input)
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize, Debug, Default)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub settings: serde_json::Value,
    pub timings_ms: std::collections::BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            ..Default::default()
        }
    }

    fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let r = f();
        self.timings_ms.insert(label.into(), t.elapsed().as_secs_f64() * 1e3);
        r
    }

    /// Writes via a temporary file and rename.
    fn write(mut self, path: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        self.inputs = hashes(inputs)?;
        self.outputs = hashes(outputs)?;
        let tmp = path.with_extension("json.tmp");
        write_json(&tmp, &self)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn load_settings(path: &Option<PathBuf>) -> Result<RenderSettings> {
    match path {
        Some(p) => RenderSettings::load(p),
        None => Ok(RenderSettings::default()),
    }
}

fn parse_channels(names: &[String]) -> Result<Vec<Channel>> {
    let mut out: Vec<Channel> = names
        .iter()
        .map(|n| Channel::parse(n).ok_or_else(|| Error::Config(format!("unknown channel `{n}`"))))
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_channels(dir: &Path, fb: &FrameBuffers, channels: &[Channel]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    channels.iter().map(|&c| write_channel(dir, fb, c)).collect()
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    let mut man = RunManifest::new("render");
    let cam = CameraModel::load(&a.camera).input()?;
    let settings = load_settings(&a.settings).input()?;
    settings.validate().input()?;
    let channels = parse_channels(&a.channels).input()?;
    let mut inputs = vec![a.camera.clone()];
    inputs.extend(a.settings.clone());
    let fb = if let Some(index) = &a.blocks {
        let blocks = BlockSet::load(index).input()?;
        let scenes = blocks.load_scenes(index.parent().unwrap_or(Path::new("."))).input()?;
        inputs.push(index.clone());
        man.time("render", || crate::blocks::render_blended(&scenes, &blocks, &cam, &settings)).runtime()?
    } else {
        let path = a.scene.as_ref().expect("clap enforces --scene without --blocks");
        let scene = load_ply(path).input()?;
        inputs.push(path.clone());
        man.time("render", || match a.backend {
            Backend::Raster => render_raster(&scene, &cam, &settings),
            Backend::Rt => render_rt(&scene, &cam, &settings),
        })
        .runtime()?
    };
    let outputs = write_channels(&a.out, &fb, &channels).runtime()?;
    man.settings = serde_json::json!({ "render": settings, "backend": format!("{:?}", a.backend).to_lowercase() });
    man.write(&a.out.join("manifest.json"), &inputs, &outputs).runtime()
}

fn cmd_lidar(a: &LidarArgs) -> CliResult<()> {
    let mut man = RunManifest::new("lidar");
    let scene = load_ply(&a.scene).input()?;
    let pattern = ScanPattern::load(&a.pattern).input()?;
    let pose = match &a.pose {
        Some(p) => RigidTransform::from(&read_json::<PoseJson>(p).input()?),
        None => RigidTransform::identity(),
    };
    let settings = load_settings(&a.settings).input()?;
    let meshes = match &a.scenario {
        Some(p) => load_scenario(p).input()?,
        None => Vec::new(),
    };
    if !(a.hit_alpha_min > 0.0 && a.hit_alpha_min <= 1.0) {
        return Err(Failure::Input(Error::Config("hit_alpha_min must be in (0, 1]".into())));
    }
    let lidar = LidarSettings {
        hit_alpha_min: a.hit_alpha_min,
    };
    let pc = man
        .time("simulate", || simulate_lidar_hybrid(&scene, &meshes, &pattern, &pose, &settings, &lidar))
        .runtime()?;
    let format = match a.format {
        FormatArg::Ply => CloudFormat::Ply,
        FormatArg::Csv => CloudFormat::Csv,
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir).runtime()?;
    }
    write_point_cloud(&pc, &a.out, format).runtime()?;
    let mut inputs = vec![a.scene.clone(), a.pattern.clone()];
    inputs.extend(a.pose.clone());
    inputs.extend(a.scenario.clone());
    man.settings = serde_json::json!({ "render": settings, "lidar": lidar, "points": pc.len() });
    man.write(&sidecar_manifest(&a.out), &inputs, std::slice::from_ref(&a.out)).runtime()
}

fn cmd_partition(a: &PartitionArgs) -> CliResult<()> {
    let mut man = RunManifest::new("partition");
    let cfg = PartitionConfig {
        max_radius: a.max_radius,
        max_images: a.max_images,
        cell_size: a.cell_size,
        overlap_m: a.overlap_m,
        margin_m: a.margin_m,
    };
    cfg.validate().input()?;
    let poses: Vec<PoseEntry> = read_json(&a.poses).input()?;
    if poses.is_empty() {
        return Err(Failure::Input(Error::Config("pose file is empty".into())));
    }
    let positions: Vec<Vec2> = poses.iter().map(|p| Vec2::new(p.position[0], p.position[1])).collect();
    let (_, blocks) = man.time("partition", || partition(&positions, &cfg)).runtime()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir).runtime()?;
    }
    blocks.save(&a.out).runtime()?;
    man.settings = serde_json::to_value(&cfg).unwrap_or_default();
    man.write(&sidecar_manifest(&a.out), std::slice::from_ref(&a.poses), std::slice::from_ref(&a.out))
        .runtime()
}

fn cmd_composite(a: &CompositeArgs) -> CliResult<()> {
    let mut man = RunManifest::new("composite");
    let scene = load_ply(&a.scene).input()?;
    let cam = CameraModel::load(&a.camera).input()?;
    let meshes = load_scenario(&a.scenario).input()?;
    let settings = load_settings(&a.settings).input()?;
    settings.validate().input()?;
    let lighting: LightingSettings = match &a.lighting {
        Some(p) => read_json(p).input()?,
        None => LightingSettings::default(),
    };
    let channels = parse_channels(&a.channels).input()?;
    let fb = man
        .time("render", || -> Result<FrameBuffers> {
            let splat = render_raster(&scene, &cam, &settings)?;
            let mesh = rasterize_meshes(&meshes, &cam, &lighting, &settings)?;
            composite_hybrid(&splat, &mesh, DEFAULT_OCCL_ALPHA_MIN)
        })
        .runtime()?;
    let outputs = write_channels(&a.out, &fb, &channels).runtime()?;
    let mut inputs = vec![a.scene.clone(), a.camera.clone(), a.scenario.clone()];
    inputs.extend(a.settings.clone());
    inputs.extend(a.lighting.clone());
    man.settings = serde_json::json!({ "render": settings, "lighting": lighting });
    man.write(&a.out.join("manifest.json"), &inputs, &outputs).runtime()
}

#[derive(Serialize)]
struct SimilarityJson {
    rotation: [f64; 4],
    translation: [f64; 3],
    scale: f64,
    rms_residual: f64,
}

fn cmd_align(a: &AlignArgs) -> CliResult<()> {
    let mut man = RunManifest::new("align");
    let src: Vec<PoseJson> = read_json(&a.source).input()?;
    let tgt: Vec<PoseJson> = read_json(&a.target).input()?;
    let pos = |v: &[PoseJson]| v.iter().map(|p| Vec3::from(p.translation)).collect::<Vec<_>>();
    let c = Correspondences::new(pos(&src), pos(&tgt));
    let al = man.time("align", || kabsch_align(&c, a.with_scale)).input()?;
    let out = SimilarityJson {
        rotation: quat_to_wxyz(&al.transform.rotation),
        translation: al.transform.translation.into(),
        scale: al.transform.scale,
        rms_residual: al.rms_residual,
    };
    write_json(&a.out, &out).runtime()?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.out_poses {
        let poses: Vec<RigidTransform> = src.iter().map(RigidTransform::from).collect();
        let mapped: Vec<PoseJson> = apply_similarity(&al.transform, &poses).iter().map(PoseJson::from).collect();
        write_json(p, &mapped).runtime()?;
        outputs.push(p.clone());
    }
    man.settings = serde_json::json!({ "with_scale": a.with_scale });
    man.write(&sidecar_manifest(&a.out), &[a.source.clone(), a.target.clone()], &outputs)
        .runtime()
}

#[derive(Serialize)]
pub struct SceneInfo {
    pub count: usize,
    pub sh_degree: u8,
    pub extent_min: Option<[f64; 3]>,
    pub extent_max: Option<[f64; 3]>,
    pub has_labels: bool,
}

pub fn scene_info(scene: &SplatScene) -> SceneInfo {
    let ext = scene.extent();
    SceneInfo {
        count: scene.len(),
        sh_degree: scene.sh_degree,
        extent_min: ext.map(|e| e.0.into()),
        extent_max: ext.map(|e| e.1.into()),
        has_labels: scene.label_names.is_some(),
    }
}

fn cmd_info(a: &InfoArgs) -> CliResult<()> {
    let scene = load_ply(&a.scene).input()?;
    let info = scene_info(&scene);
    let text = serde_json::to_string_pretty(&info).expect("plain data serializes");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))
}

#[derive(serde::Deserialize)]
struct FitConfig {
    cameras: Vec<PathBuf>,
    #[serde(flatten)]
    schedule: FitSchedule,
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let mut man = RunManifest::new("fit");
    let init = load_ply(&a.init).input()?;
    let reference = load_ply(&a.target).input()?;
    let cfg: FitConfig = read_json(&a.config).input()?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let cams: Vec<CameraModel> = cfg
        .cameras
        .iter()
        .map(|p| CameraModel::load(base.join(p)))
        .collect::<Result<_>>()
        .input()?;
    let settings = load_settings(&a.settings).input()?;
    let targets = render_targets(&reference, &cams, &settings).input()?;
    let fit = man
        .time("fit", || fit_toy_scene(&targets, &init, &settings, &cfg.schedule))
        .runtime()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir).runtime()?;
    }
    save_ply(&fit.scene, &a.out).runtime()?;
    println!(
        "steps {} converged {} final loss {:.6e}",
        fit.steps_run,
        fit.converged,
        fit.losses.last().copied().unwrap_or(0.0)
    );
    man.settings = serde_json::json!({ "schedule": cfg.schedule, "losses": fit.losses });
    man.write(
        &sidecar_manifest(&a.out),
        &[a.init.clone(), a.target.clone(), a.config.clone()],
        std::slice::from_ref(&a.out),
    )
    .runtime()
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Lidar(a) => cmd_lidar(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Composite(a) => cmd_composite(a),
        Command::Align(a) => cmd_align(a),
        Command::Info(a) => cmd_info(a),
        Command::Fit(a) => cmd_fit(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use relight_core::align::{align_take_with, FlowParams, TakeLayout};
use relight_core::error::ErrorKind;
use relight_core::imagecore::{self, read_image, write_image, write_png};
use relight_core::lightrig::{env_to_weights, load_manifest, Vec3};
use relight_core::oracle::{default_camera, default_scene, generate_rig, write_oracle_stack, SceneFile};
use relight_core::quality::rmse;
use relight_core::reflectfield::{
    load_field, render_olat, save_field, train_with, FieldDims, RaySampleConfig, TrainConfig,
    TrainError, TrainView, TriplaneField,
};
use relight_core::relight::{assemble, combine, combine_stream, TilePlan};
use relight_core::{CameraModel, EnvMap, Error, HdrImage, OlatStack, Result, ToneMapParams, WeightVector};
use relight_service::{AppState, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "relight", version, about = "OLAT relighting, capture alignment and reflectance-field training")]
struct Cli {
    /// Worker threads (default: all cores). Never changes output bytes.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-light weights for an environment map.
    Weights {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        env: PathBuf,
        /// Azimuthal rotation in radians.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        rotation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relit frame from weights or an environment map.
    Relight(RelightArgs),
    /// Warps every frame of a take onto a tracking frame.
    Align {
        /// Directory of `.hdr`/`.pfm` frames, read in file-name order.
        #[arg(long)]
        take: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Index into the layout's tracking frames.
        #[arg(long, default_value_t = 0)]
        reference: usize,
        /// Directory of unmoved frames; prints an RMSE report when given.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Also write each frame's flow as `.pf2`.
        #[arg(long)]
        flows: bool,
    },
    /// Renders the analytic sphere under a Fibonacci rig.
    Oracle {
        /// Sphere plus camera; the built-in scene when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        rig_size: usize,
        /// Image size for the built-in camera.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a reflectance field to an OLAT stack.
    Train(TrainArgs),
    /// Renders a trained field under one light.
    Render {
        #[arg(long)]
        field: PathBuf,
        /// Light direction `x,y,z`.
        #[arg(long, allow_hyphen_values = true)]
        light: String,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        tone: ToneArgs,
        #[arg(long, default_value_t = RaySampleConfig::default().samples)]
        samples: usize,
    },
    /// Serves the HTTP API over one or more stacks.
    Serve {
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = relight_service::DEFAULT_MAX_ENV_BYTES)]
        max_env_bytes: usize,
        /// Browser origin allowed by CORS; any when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Args, Debug)]
struct ToneArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    exposure: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
}

impl ToneArgs {
    fn params(&self) -> Result<ToneMapParams> {
        ToneMapParams::new(self.exposure, self.gamma)
    }
}

#[derive(Args, Debug)]
struct RelightArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `{label: [r, g, b]}` JSON as written by `weights`.
    #[arg(long, conflicts_with = "env", required_unless_present = "env")]
    weights: Option<PathBuf>,
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rotation: f64,
    /// Keep only the k strongest lights.
    #[arg(long)]
    max_lights: Option<usize>,
    /// Stream the combination in square tiles of this size.
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
    #[command(flatten)]
    tone: ToneArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Loss log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    iters: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().lambda_mrf)]
    lambda_mrf: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_rays)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().mrf_crop)]
    crop: usize,
    #[arg(long, default_value_t = TrainConfig::default().mrf_every)]
    mrf_every: usize,
    /// Iterations trained on the reconstruction term alone before the patch loss starts.
    #[arg(long, default_value_t = TrainConfig::default().mrf_warmup)]
    mrf_warmup: usize,
    #[arg(long, default_value_t = RaySampleConfig::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = FieldDims::default().channels)]
    channels: usize,
    #[arg(long, default_value_t = FieldDims::default().resolution)]
    resolution: usize,
    #[arg(long, default_value_t = FieldDims::default().hidden)]
    hidden: usize,
    /// Resume from an existing checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numeric => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Validation("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Weights {
            manifest,
            env,
            rotation,
            out,
        } => cmd_weights(&manifest, &env, rotation, &out),
        Command::Relight(args) => cmd_relight(&args),
        Command::Align {
            take,
            layout,
            out,
            reference,
            ground_truth,
            flows,
        } => cmd_align(&take, &layout, &out, reference, ground_truth.as_deref(), flows),
        Command::Oracle {
            scene,
            rig_size,
            size,
            out,
        } => cmd_oracle(scene.as_deref(), rig_size, size, &out),
        Command::Train(args) => cmd_train(&args, cli.seed),
        Command::Render {
            field,
            light,
            camera,
            out,
            png,
            tone,
            samples,
        } => cmd_render(&field, &light, &camera, &out, png.as_deref(), &tone, samples, cli.seed),
        Command::Serve {
            manifest,
            port,
            host,
            max_env_bytes,
            cors_origin,
        } => cmd_serve(&manifest, &host, port, max_env_bytes, cors_origin),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory"),
        ))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn load_env(path: &Path) -> Result<EnvMap> {
    EnvMap::new(read_image(path)?)
}

fn env_weights(stack: &OlatStack, env: &Path, rotation: f64) -> Result<WeightVector> {
    if !rotation.is_finite() {
        return Err(Error::Validation("--rotation must be finite".into()));
    }
    Ok(env_to_weights(&load_env(env)?, &stack.rig, rotation))
}

fn cmd_weights(manifest: &Path, env: &Path, rotation: f64, out: &Path) -> Result<()> {
    require_file(manifest)?;
    require_file(env)?;
    let stack = load_manifest(manifest)?;
    let w = env_weights(&stack, env, rotation)?;
    let map: serde_json::Map<String, serde_json::Value> = w
        .to_labeled(&stack.rig)
        .into_iter()
        .map(|(label, rgb)| (label, serde_json::json!(rgb)))
        .collect();
    let mut text = serde_json::to_string_pretty(&map)?;
    text.push('\n');
    write_bytes(out, text.as_bytes())
}

fn relit_image(stack: &OlatStack, w: &WeightVector, tile: Option<usize>) -> Result<HdrImage> {
    match tile {
        None => combine(stack, w),
        Some(t) => {
            let mut tiles = Vec::new();
            combine_stream(stack, w, TilePlan::new(t, t)?, |tile| {
                tiles.push(tile);
                true
            })?;
            Ok(assemble(stack.width(), stack.height(), &tiles))
        }
    }
}

fn cmd_relight(a: &RelightArgs) -> Result<()> {
    require_file(&a.manifest)?;
    for p in a.weights.iter().chain(&a.env) {
        require_file(p)?;
    }
    let tone = a.tone.params()?;
    let stack = load_manifest(&a.manifest)?;
    let mut w = match (&a.weights, &a.env) {
        (Some(path), _) => {
            let map: HashMap<String, [f64; 3]> = read_json(path)?;
            WeightVector::from_labeled(&stack.rig, &map)?
        }
        (None, Some(env)) => env_weights(&stack, env, a.rotation)?,
        (None, None) => return Err(Error::Validation("give --weights or --env".into())),
    };
    if let Some(k) = a.max_lights {
        if k == 0 {
            return Err(Error::Validation("--max-lights must be >= 1".into()));
        }
        w = w.truncate_top_k(k);
    }
    let img = relit_image(&stack, &w, a.tile)?;
    ensure_parent(&a.out)?;
    write_image(&a.out, &img)?;
    if let Some(png) = &a.png {
        ensure_parent(png)?;
        write_png(png, &img, tone)?;
    }
    Ok(())
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("hdr") | Some("pfm")
                )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn read_frames(paths: &[PathBuf]) -> Result<Vec<HdrImage>> {
    paths.iter().map(|p| read_image(p)).collect()
}

fn mean_rmse(a: &[HdrImage], b: &[HdrImage]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += rmse(x, y)?;
    }
    Ok(total / a.len().max(1) as f64)
}

fn cmd_align(
    take: &Path,
    layout: &Path,
    out: &Path,
    reference: usize,
    ground_truth: Option<&Path>,
    write_flows: bool,
) -> Result<()> {
    require_dir(take)?;
    require_file(layout)?;
    if let Some(gt) = ground_truth {
        require_dir(gt)?;
    }
    let layout: TakeLayout = read_json(layout)?;
    layout.validate()?;
    let paths = frame_paths(take)?;
    if paths.len() != layout.frame_count {
        return Err(Error::Validation(format!(
            "layout describes {} frames, {} holds {}",
            layout.frame_count,
            take.display(),
            paths.len()
        )));
    }
    let frames = read_frames(&paths)?;
    let aligned = align_take_with(&frames, &layout, reference, &FlowParams::default())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, (p, img)) in paths.iter().zip(&aligned.frames).enumerate() {
        let name = p.file_name().expect("listed files have names");
        write_image(&out.join(name), img)?;
        if write_flows {
            aligned.flows[i].write(&out.join(format!("flow_{i:04}.pf2")))?;
        }
    }
    if let Some(gt) = ground_truth {
        let gt_paths = frame_paths(gt)?;
        if gt_paths.len() != frames.len() {
            return Err(Error::Validation(format!(
                "ground truth holds {} frames, take holds {}",
                gt_paths.len(),
                frames.len()
            )));
        }
        let truth = read_frames(&gt_paths)?;
        let before = mean_rmse(&frames, &truth)?;
        let after = mean_rmse(&aligned.frames, &truth)?;
        let reduction = if before > 0.0 { 100.0 * (1.0 - after / before) } else { 0.0 };
        println!("rmse before {before:.6} after {after:.6} reduction {reduction:.1}%");
    }
    Ok(())
}

fn cmd_oracle(scene: Option<&Path>, rig_size: usize, size: usize, out: &Path) -> Result<()> {
    if let Some(p) = scene {
        require_file(p)?;
    }
    let (scene, camera) = match scene {
        Some(p) => {
            let f: SceneFile = read_json(p)?;
            (f.scene, CameraModel::from_json(&f.camera)?)
        }
        None => {
            if size == 0 {
                return Err(Error::Validation("--size must be >= 1".into()));
            }
            (default_scene(), default_camera(size, size))
        }
    };
    scene.validate()?;
    let rig = generate_rig(rig_size)?;
    write_oracle_stack(&scene, &rig, &camera, out)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    require_file(&a.manifest)?;
    if let Some(p) = &a.init {
        require_file(p)?;
    }
    let cfg = TrainConfig {
        learning_rate: a.lr,
        iterations: a.iters,
        batch_rays: a.batch,
        lambda_mrf: a.lambda_mrf,
        seed,
        mrf_crop: a.crop,
        mrf_every: a.mrf_every,
        mrf_warmup: a.mrf_warmup,
        sampling: RaySampleConfig {
            samples: a.samples,
            seed,
            ..RaySampleConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let field = match &a.init {
        Some(p) => load_field(p)?,
        None => TriplaneField::init(
            FieldDims {
                channels: a.channels,
                resolution: a.resolution,
                hidden: a.hidden,
            },
            seed,
        )?,
    };
    let stack = load_manifest(&a.manifest)?;
    let views = stack
        .rig
        .directions()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(TrainView {
                camera: stack.camera.clone(),
                light: *d,
                target: (*stack.image(i)?).clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let trained = train_with(field, &views, &cfg, |i, loss| {
        if (i + 1) % 100 == 0 {
            log::info!("iteration {} loss {loss:.6}", i + 1);
        }
    });
    let trained = match trained {
        Ok(t) => t,
        Err(TrainError::NonFinite { iteration, snapshot }) => {
            let path = a.out.with_extension("nonfinite.bin");
            ensure_parent(&path)?;
            save_field(&snapshot, &path)?;
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iteration}; parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    ensure_parent(&a.out)?;
    save_field(&trained.field, &a.out)?;
    let mut text = String::from("iteration,loss\n");
    for (i, l) in trained.losses.iter().enumerate() {
        text.push_str(&format!("{i},{l:e}\n"));
    }
    write_bytes(&csv, text.as_bytes())
}

fn parse_light(s: &str) -> Result<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Validation(format!("--light {s:?} is not x,y,z")))?;
    let v = match parts.as_slice() {
        [x, y, z] => Vec3::new(*x, *y, *z),
        _ => return Err(Error::Validation(format!("--light {s:?} is not x,y,z"))),
    };
    let n = v.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Validation("--light must be a nonzero finite vector".into()));
    }
    Ok(v / n)
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    field: &Path,
    light: &str,
    camera: &Path,
    out: &Path,
    png: Option<&Path>,
    tone: &ToneArgs,
    samples: usize,
    seed: u64,
) -> Result<()> {
    require_file(field)?;
    require_file(camera)?;
    let light = parse_light(light)?;
    let tone = tone.params()?;
    let cfg = RaySampleConfig {
        samples,
        seed,
        ..RaySampleConfig::default()
    }
    .deterministic();
    cfg.validate()?;
    let camera = CameraModel::from_json(&read_json(camera)?)?;
    let field = load_field(field)?;
    let img = render_olat(&field, &camera, &light, &cfg);
    ensure_parent(out)?;
    write_image(out, &img)?;
    if let Some(p) = png {
        write_bytes(p, &imagecore::png_bytes(&img, tone)?)?;
    }
    Ok(())
}

fn cmd_serve(
    manifests: &[PathBuf],
    host: &str,
    port: u16,
    max_env_bytes: usize,
    cors_origin: Option<String>,
) -> Result<()> {
    for m in manifests {
        require_file(m)?;
    }
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::Validation(format!("bad address {host}:{port}: {e}")))?;
    let stacks = manifests
        .iter()
        .map(|m| load_manifest(m))
        .collect::<Result<Vec<_>>>()?;
    let state = Arc::new(AppState::new(
        stacks,
        ServiceConfig {
            max_env_bytes,
            cors_origin,
        },
    ));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    eprintln!("serving on http://{addr}/api");
    rt.block_on(relight_service::serve(state, addr))
        .map_err(|e| Error::io(addr.to_string(), e))
}

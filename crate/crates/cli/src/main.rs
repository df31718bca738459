use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use sogs_core::anchor::refresh_basis;
use sogs_core::io::{load_checkpoint, read_image, save_checkpoint, write_image, write_xyz};
use sogs_core::loss::{sobel_gradients, SglVariant};
use sogs_core::scene::{generate_synthetic_scene, Scene, SceneSpec, View};
use sogs_core::train::{evaluate, metrics_csv, parse_config_echo, TrainConfig, Trainer};

const CHECKPOINT_FILE: &str = "checkpoint.sogs";
const METRICS_FILE: &str = "metrics.csv";
const SCENE_FILE: &str = "scene.txt";
/// Largest per-channel Sobel response for images in [0, 1], times √3 for the channel norm.
const GRADMAP_NORM: f64 = 4.0 * 1.732_050_807_568_877_2;

#[derive(Parser, Debug)]
#[command(name = "sogs", version, about = "Anchor-based Gaussian splatting with second-order anchor features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a synthetic scene; writes checkpoint.sogs and metrics.csv into --out.
    Train(TrainArgs),
    /// Render one view of a checkpoint's scene (train views first, then test views).
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-view and mean PSNR/SSIM on the scene's test views.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which views to score: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sobel gradient magnitude images: <prefix>_gx.ppm and <prefix>_gy.ppm.
    Gradmap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "out-prefix")]
        out_prefix: String,
    },
    /// Dump the feature statistics and principal co-variations as CSV.
    Stats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a scene: spec copy, ground-truth PPMs and the init point cloud.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Scene spec file, or a directory containing scene.txt.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "no-soa")]
    no_soa: bool,
    #[arg(long = "no-sgl")]
    no_sgl: bool,
    /// per-pixel or literal.
    #[arg(long = "sgl-variant", default_value = "per-pixel")]
    sgl_variant: String,
    #[arg(long = "lr-features", default_value_t = 1e-2)]
    lr_features: f64,
    #[arg(long = "lr-offsets", default_value_t = 1e-3)]
    lr_offsets: f64,
    #[arg(long = "lr-scalings", default_value_t = 1e-3)]
    lr_scalings: f64,
    #[arg(long = "lr-mlps", default_value_t = 2e-3)]
    lr_mlps: f64,
    #[arg(long = "lr-final-fraction", default_value_t = 0.1)]
    lr_final_fraction: f64,
    #[arg(long = "refresh-every", default_value_t = 1)]
    refresh_every: usize,
    #[arg(long = "eval-every", default_value_t = 100)]
    eval_every: usize,
    #[arg(long = "l1-weight", default_value_t = 0.8)]
    l1_weight: f64,
    #[arg(long = "ssim-weight", default_value_t = 0.2)]
    ssim_weight: f64,
    #[arg(long = "vol-weight", default_value_t = 0.01)]
    vol_weight: f64,
    #[arg(long = "sgl-weight", default_value_t = 0.01)]
    sgl_weight: f64,
    #[arg(long = "full-batch")]
    full_batch: bool,
    /// Continue from a checkpoint written by an earlier run with the same flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed iterations; the checkpoint can be resumed later.
    #[arg(long)]
    until: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<sogs_core::Error> for Failure {
    fn from(e: sogs_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

fn configure_threads() -> CliResult<()> {
    let threads = match std::env::var("SOGS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::Usage(format!("SOGS_THREADS must be a non-negative integer, got '{v}'")))?,
        Err(_) => 0,
    };
    let threads = if env_flag("SOGS_DETERMINISTIC") { 1 } else { threads };
    if threads > 0 {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

fn load_scene(path: &Path) -> CliResult<Scene> {
    let file = if path.is_dir() { path.join(SCENE_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading scene spec {}", file.display()))?;
    let spec = SceneSpec::parse(&text).with_context(|| format!("parsing {}", file.display()))?;
    Ok(generate_synthetic_scene(&spec)?)
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let sgl_variant = SglVariant::parse(&a.sgl_variant)
        .ok_or_else(|| Failure::Usage(format!("unknown --sgl-variant '{}' (per-pixel or literal)", a.sgl_variant)))?;
    let mut config = TrainConfig {
        dim: a.dim,
        m: a.m,
        k: a.k,
        hidden: a.hidden,
        iterations: a.iters,
        lr_features: a.lr_features,
        lr_offsets: a.lr_offsets,
        lr_scalings: a.lr_scalings,
        lr_mlps: a.lr_mlps,
        lr_final_fraction: a.lr_final_fraction,
        basis_refresh_every: a.refresh_every,
        eval_every: a.eval_every,
        seed: a.seed,
        use_soa: !a.no_soa,
        use_sgl: !a.no_sgl,
        sgl_variant,
        full_batch: a.full_batch,
        deterministic: env_flag("SOGS_DETERMINISTIC"),
        ..Default::default()
    };
    config.weights.l1 = a.l1_weight;
    config.weights.ssim = a.ssim_weight;
    config.weights.vol = a.vol_weight;
    config.weights.selective = a.sgl_weight;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let config = train_config(a)?;
    let scene = load_scene(&a.scene)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::from_checkpoint(scene, config, ckpt)?
        }
        None => Trainer::new(scene, config)?,
    };
    let outcome = trainer.run_until(a.until.unwrap_or(a.iters));
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    fs::write(a.out.join(METRICS_FILE), metrics_csv(&trainer.metrics))?;
    match outcome {
        Ok(()) => {
            match trainer.metrics.last() {
                Some(last) => eprintln!(
                    "trained to iteration {}: test PSNR {:.3} dB, SSIM {:.4} at iteration {}",
                    trainer.iteration, last.test_psnr, last.test_ssim, last.iteration
                ),
                None => eprintln!("trained to iteration {}", trainer.iteration),
            }
            Ok(())
        }
        Err(e) => Err(Failure::Runtime(anyhow!(e).context(format!(
            "last good state saved to {}",
            ckpt_path.display()
        )))),
    }
}

fn cmd_render(ckpt: &Path, view: usize, out: &Path) -> CliResult<()> {
    let c = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (_, spec) = parse_config_echo(&c.config)?;
    let scene = generate_synthetic_scene(&spec)?;
    let camera = &scene.view(view).map_err(|e| Failure::Usage(e.to_string()))?.camera;
    let basis = match (&c.basis, c.model.use_soa()) {
        (Some(b), true) => Some(b.clone()),
        (None, true) => Some(refresh_basis(&c.model.field, c.model.m, c.iteration as usize)?),
        _ => None,
    };
    let image = c.model.render(basis.as_ref(), camera)?;
    write_image(out, &image)?;
    Ok(())
}

fn cmd_eval(ckpt: &Path, scene: &Path, out: &Path, split: &str) -> CliResult<()> {
    let c = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let scene = load_scene(scene)?;
    let views: Vec<&View> = match split {
        "test" => scene.test.iter().collect(),
        "train" => scene.train.iter().collect(),
        "all" => scene.views().collect(),
        other => return Err(Failure::Usage(format!("unknown --split '{other}' (test, train or all)"))),
    };
    let basis = match (&c.basis, c.model.use_soa()) {
        (Some(b), true) => Some(b.clone()),
        (None, true) => Some(refresh_basis(&c.model.field, c.model.m, c.iteration as usize)?),
        _ => None,
    };
    let table = evaluate(&c.model, basis.as_ref(), &views)?;
    fs::write(out, table.to_csv())?;
    eprintln!("mean PSNR {:.4} dB, mean SSIM {:.5}", table.mean_psnr, table.mean_ssim);
    Ok(())
}

fn cmd_gradmap(image: &Path, prefix: &str) -> CliResult<()> {
    let img = read_image(image).with_context(|| format!("reading {}", image.display()))?;
    let g = sobel_gradients(&img);
    write_image(Path::new(&format!("{prefix}_gx.ppm")), &g.magnitude_image(true, GRADMAP_NORM))?;
    write_image(Path::new(&format!("{prefix}_gy.ppm")), &g.magnitude_image(false, GRADMAP_NORM))?;
    Ok(())
}

fn cmd_stats(ckpt: &Path, out: &Path) -> CliResult<()> {
    let c = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let basis = match c.basis {
        Some(b) => b,
        None => refresh_basis(&c.model.field, c.model.m, c.iteration as usize)?,
    };
    let mut s = String::from("iteration,quantity,index,value\n");
    let it = basis.iteration;
    for (u, v) in basis.mean.iter().enumerate() {
        s.push_str(&format!("{it},mean,{u},{v}\n"));
    }
    for (u, v) in basis.covariance.diagonal().iter().enumerate() {
        s.push_str(&format!("{it},cov_diag,{u},{v}\n"));
    }
    for (u, v) in basis.eigen.values.iter().enumerate() {
        s.push_str(&format!("{it},eigenvalue,{u},{v}\n"));
    }
    for (i, p) in basis.principal.iter().enumerate() {
        for (u, v) in p.iter().enumerate() {
            s.push_str(&format!("{it},principal_{i},{u},{v}\n"));
        }
    }
    fs::write(out, s)?;
    Ok(())
}

fn cmd_gen_scene(spec_path: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SceneSpec::parse(&text)?;
    let scene = generate_synthetic_scene(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(SCENE_FILE), spec.to_text())?;
    for (i, v) in scene.train.iter().enumerate() {
        write_image(&out.join(format!("train_{i:03}.ppm")), &v.image)?;
    }
    for (i, v) in scene.test.iter().enumerate() {
        write_image(&out.join(format!("test_{i:03}.ppm")), &v.image)?;
    }
    write_xyz(&out.join("points.xyz"), &scene.init_points)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Render { ckpt, view, out } => cmd_render(&ckpt, view, &out),
        Command::Eval {
            ckpt,
            scene,
            out,
            split,
        } => cmd_eval(&ckpt, &scene, &out, &split),
        Command::Gradmap { image, out_prefix } => cmd_gradmap(&image, &out_prefix),
        Command::Stats { ckpt, out } => cmd_stats(&ckpt, &out),
        Command::GenScene { spec, out } => cmd_gen_scene(&spec, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests go to stdout with status 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `sogs --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

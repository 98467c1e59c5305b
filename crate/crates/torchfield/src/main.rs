use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use torchfield::checkpoint::load_checkpoint;
use torchfield::config::{Strategy, TrainConfig};
use torchfield::dataset::{load_dataset, save_dataset, Dataset, Split};
use torchfield::error::{Error, Result};
use torchfield::img::save_image;
use torchfield::metrics::{psnr, ssim_images};
use torchfield::render::{render_image, RenderMode, RenderOptions};
use torchfield::scene::{oracle_render, scene_by_name, default_views};
use torchfield::trainer::Trainer;

#[derive(Parser)]
#[command(name = "torchfield", about = "Patch-rendering radiance fields", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with the quadrature oracle.
    Generate(GenerateArgs),
    /// Run the training loop.
    Train(TrainArgs),
    /// Render one view from a checkpoint.
    Render(RenderArgs),
    /// Per-view PSNR/SSIM of a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Sweep one design axis and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene name (three-spheres | single-sphere).
    #[arg(long, default_value = "three-spheres")]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    /// Train+test view counts, e.g. 12+4.
    #[arg(long, default_value = "12+4")]
    views: String,
    /// Image size, e.g. 64x64.
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Quadrature steps per ray.
    #[arg(long, default_value_t = 4096)]
    steps: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Must agree with the config file when both specify it.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera_index: usize,
    #[arg(long, default_value = "center")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// p | strategy | conv.
    #[arg(long)]
    axis: String,
    #[arg(long)]
    out: PathBuf,
    /// Base config for every cell of the sweep.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

fn main() -> ExitCode {
    torchfield::tune_blas();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numerical(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn parse_views(s: &str) -> Result<(usize, usize)> {
    let (t, e) = s
        .split_once('+')
        .ok_or_else(|| Error::Config(format!("bad --views '{s}' (expected T+E, e.g. 12+4)")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad view count '{v}'")))
    };
    Ok((parse(t)?, parse(e)?))
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("bad --size '{s}' (expected WxH, e.g. 64x64)")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| Error::Config(format!("bad dimension '{v}'")))
    };
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err(Error::Config("image dimensions must be positive".into()));
    }
    Ok((w, h))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let scene = scene_by_name(&args.scene)
        .ok_or_else(|| Error::Config(format!("unknown scene '{}'", args.scene)))?;
    scene.validate()?;
    let (n_train, n_test) = parse_views(&args.views)?;
    let (width, height) = parse_size(&args.size)?;
    if args.steps == 0 {
        return Err(Error::Config("--steps must be positive".into()));
    }
    let views = default_views(n_train, n_test, width, height);
    let mut cameras = Vec::new();
    let mut splits = Vec::new();
    let mut image_names = Vec::new();
    let mut images = Vec::new();
    for (idx, (cam, is_train)) in views.into_iter().enumerate() {
        let start = Instant::now();
        images.push(oracle_render(&scene, &cam, args.steps));
        println!(
            "view {idx:03}: rendered {width}x{height} in {:.2}s",
            start.elapsed().as_secs_f64()
        );
        cameras.push(cam);
        splits.push(if is_train { Split::Train } else { Split::Test });
        image_names.push(format!("view_{idx:03}.png"));
    }
    let dataset = Dataset {
        cameras,
        image_names,
        splits,
    };
    save_dataset(&args.out, &dataset, &images)?;
    println!("wrote {} views to {}", images.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config_text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?,
        None => String::new(),
    };
    let mut config = TrainConfig::parse(&config_text)?;
    if let Some(flag) = &args.strategy {
        let flag = Strategy::parse(flag)?;
        let config_sets_strategy = config_text.lines().any(|l| {
            l.split('#').next().unwrap_or("").trim().starts_with("strategy")
        });
        if config_sets_strategy && config.strategy != flag {
            return Err(Error::Config(format!(
                "--strategy {} conflicts with the config file's strategy {}",
                flag.as_str(),
                config.strategy.as_str()
            )));
        }
        config.strategy = flag;
    }
    let (dataset, images) = load_dataset(&args.data)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != config && args.config.is_some() {
                return Err(Error::Config(
                    "--resume checkpoint was trained with a different config".into(),
                ));
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(config)?,
    };
    trainer.run(&dataset, &images, &args.out)
}

fn load_pair(ckpt_path: &Path) -> Result<(Trainer, RenderOptions)> {
    let trainer = Trainer::from_checkpoint(load_checkpoint(ckpt_path)?)?;
    let opts = RenderOptions {
        n_coarse: trainer.config.n_coarse,
        n_fine: trainer.config.n_fine,
        ..RenderOptions::default()
    };
    Ok((trainer, opts))
}

fn render(args: RenderArgs) -> Result<()> {
    let mode = RenderMode::parse(&args.mode)?;
    let (trainer, mut opts) = load_pair(&args.ckpt)?;
    opts.mode = mode;
    let (dataset, _) = load_dataset(&args.data)?;
    let camera = dataset.cameras.get(args.camera_index).ok_or_else(|| {
        Error::Config(format!(
            "camera index {} out of range ({} cameras)",
            args.camera_index,
            dataset.cameras.len()
        ))
    })?;
    let start = Instant::now();
    let (image, rays) = render_image(&trainer.render_pair(), camera, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    save_image(&args.out, &image)?;
    println!(
        "{}x{} in {:.2}s with {} rays ({:?} mode)",
        image.width, image.height, secs, rays, mode
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let (trainer, opts) = load_pair(&args.ckpt)?;
    let (dataset, images) = load_dataset(&args.data)?;
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split '{}' is empty", args.split)));
    }
    let pair = trainer.render_pair();
    let mut rows = String::from("view,psnr,ssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for &idx in &indices {
        let (rendered, _) = render_image(&pair, &dataset.cameras[idx], &opts)?;
        let p = psnr(&rendered, &images[idx])?;
        let s = ssim_images(&rendered, &images[idx])?;
        psnr_sum += p;
        ssim_sum += s;
        rows.push_str(&format!("{},{},{}\n", dataset.image_names[idx], fmt(p), fmt(s)));
    }
    let n = indices.len() as f64;
    rows.push_str(&format!("mean,{},{}\n", fmt(psnr_sum / n), fmt(ssim_sum / n)));
    std::fs::write(&args.out, &rows).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    print!("{rows}");
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => desk_scale_config(),
    };
    // (cell label, config) pairs per axis, mirroring the paper's tables
    let cells: Vec<(String, TrainConfig)> = match args.axis.as_str() {
        "p" => [1usize, 3, 5, 7, 9]
            .iter()
            .map(|&p| {
                let mut c = base.clone();
                c.patch_size = p;
                (format!("p={p}"), c)
            })
            .collect(),
        "strategy" => [Strategy::Separate, Strategy::Shared, Strategy::Synced]
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.strategy = s;
                (s.as_str().to_string(), c)
            })
            .collect(),
        "conv" => [1usize, 3]
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.kernel_size = k;
                (
                    if k == 1 { "mlp-style K=1" } else { "distance-aware K=3" }.to_string(),
                    c,
                )
            })
            .collect(),
        other => return Err(Error::Config(format!("unknown axis '{other}' (p|strategy|conv)"))),
    };
    let (dataset, images) = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let test_idx = dataset.indices(Split::Test);
    let eval_split = if test_idx.is_empty() {
        Split::Train
    } else {
        Split::Test
    };
    let eval_idx = dataset.indices(eval_split);
    let mut table = String::from(
        "Desk-scale sweep; numbers are not comparable to full-scale results.\n\n\
         | cell | seed | psnr | ssim | checkpoint |\n|---|---|---|---|---|\n",
    );
    for (label, cfg) in &cells {
        for rep in 0..args.repeats {
            let mut cfg = cfg.clone();
            cfg.seed += rep;
            let slug: String = label
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '-' })
                .collect();
            let cell_dir = args.out.join(format!("{slug}-seed{}", cfg.seed));
            let seed = cfg.seed;
            let mut trainer = Trainer::new(cfg)?;
            eprintln!("ablate cell {label} seed {seed}");
            trainer.run(&dataset, &images, &cell_dir)?;
            let cams: Vec<_> = eval_idx.iter().map(|&i| dataset.cameras[i].clone()).collect();
            let imgs: Vec<_> = eval_idx.iter().map(|&i| images[i].clone()).collect();
            let (p, s) = trainer.evaluate(&cams, &imgs)?;
            table.push_str(&format!(
                "| {label} | {seed} | {} | {} | {} |\n",
                fmt(p),
                fmt(s),
                cell_dir.join("checkpoint.bin").display()
            ));
        }
    }
    let table_path = args.out.join("table.md");
    std::fs::write(&table_path, &table)
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    print!("{table}");
    Ok(())
}

/// Small enough to sweep on one desk machine.
fn desk_scale_config() -> TrainConfig {
    TrainConfig {
        channels: vec![16, 16, 32, 32],
        n_coarse: 32,
        n_fine: 64,
        batch: 32,
        iterations: 1500,
        eval_period: 1500,
        l_pos: 6,
        l_dir: 2,
        ..TrainConfig::default()
    }
}

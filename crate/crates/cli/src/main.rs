use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use blurfield::dsk::{build_rays, eval_pixel_kernel};
use blurfield::image::Image;
use blurfield::metrics::MetricsReport;
use blurfield::renderer::Camera;
use blurfield::synth::{generate_dataset, read_dataset, read_poses, write_dataset, BlurKind, SynthConfig};
use blurfield::trainer::{render_view, Checkpoint, StepLosses, TrainConfig, Trainer};

mod viz;

#[derive(Parser)]
#[command(name = "blurfield", version, about = "Sharp radiance fields from blurry multi-view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a blurry multi-view dataset of an analytic scene.
    Synth {
        #[arg(long, default_value = "blobs")]
        scene: String,
        #[arg(long, default_value = "motion")]
        blur: BlurKind,
        /// Number of blurry training views.
        #[arg(long, default_value_t = 16)]
        views: usize,
        /// Number of sharp held-out views.
        #[arg(long, default_value_t = 4)]
        test_views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Marching steps of the reference renderer.
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a field (with the blur kernel unless --no-dsk).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_dsk: bool,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render sharp views from a checkpoint, one PNG per pose line.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Samples per ray; the training setting when omitted.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of predicted PNGs against ground truth of the same name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw the learned kernels of a grid of pixels of one training view.
    KernelViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        view: usize,
        /// Kernels per image side.
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Output pixels per input pixel.
        #[arg(long, default_value_t = 8)]
        zoom: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("resolution must be positive, got {s:?}"));
    }
    Ok((w, h))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            scene,
            blur,
            views,
            test_views,
            res,
            seed,
            steps,
            out,
        } => synth(
            &SynthConfig {
                scene,
                blur,
                train_views: views,
                test_views,
                width: res.0,
                height: res.1,
                seed,
                steps,
                ..SynthConfig::default()
            },
            &out,
        ),
        Command::Train {
            data,
            config,
            no_dsk,
            resume,
            out,
        } => train(&data, config.as_deref(), no_dsk, resume.as_deref(), &out),
        Command::Render {
            ckpt,
            poses,
            samples,
            out,
        } => render(&ckpt, &poses, samples, &out),
        Command::Eval { pred, gt, csv } => eval(&pred, &gt, csv.as_deref()),
        Command::KernelViz {
            ckpt,
            view,
            grid,
            zoom,
            out,
        } => kernel_viz(&ckpt, view, grid, zoom, &out),
    }
}

fn synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(cfg)?;
    write_dataset(&ds, out)?;
    eprintln!(
        "wrote {} {} views and {} sharp test views to {}",
        ds.train_images.len(),
        cfg.blur.as_str(),
        ds.test_images.len(),
        out.display()
    );
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, no_dsk: bool, resume: Option<&Path>, out: &Path) -> Result<()> {
    let ds = read_dataset(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let mut trainer = match resume {
        Some(path) => {
            if config.is_some() || no_dsk {
                bail!("--resume takes its settings from the checkpoint; drop --config and --no-dsk");
            }
            Trainer::resume(Checkpoint::load(path)?, &ds)?
        }
        None => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            if no_dsk {
                cfg.dsk_enabled = false;
            }
            Trainer::new(cfg, &ds)?
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let log_path = out.join("loss.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        fs::read_to_string(&log_path)?
    } else {
        format!("{}\n", StepLosses::CSV_HEADER)
    };
    let every = trainer.config.checkpoint_every;
    let until = trainer.config.iterations;
    while trainer.iteration < until {
        let next = if every > 0 {
            ((trainer.iteration / every + 1) * every).min(until)
        } else {
            until
        };
        trainer.run_until(next, |l| {
            log.push_str(&l.csv_row());
            log.push('\n');
            eprintln!(
                "iter {:>6}  loss {:.5}  rec {:.5}  align {:.4}  lr {:.2e}",
                l.iteration, l.loss, l.rec, l.align, l.lr
            );
            Ok(())
        })?;
        fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
        if every > 0 && next < until {
            trainer
                .checkpoint()
                .save(&out.join(format!("checkpoint_{next:06}.ckpt")))?;
        }
    }
    trainer.checkpoint().save(&out.join("checkpoint.ckpt"))?;
    eprintln!("finished at iteration {}; wrote {}", trainer.iteration, out.display());
    Ok(())
}

fn render(ckpt: &Path, poses: &Path, samples: Option<usize>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cameras = read_poses(poses, ck.scene.intrinsics)?;
    if cameras.is_empty() {
        bail!("{} lists no poses", poses.display());
    }
    let samples = samples.unwrap_or(ck.config.samples_per_ray);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, cam) in cameras.iter().enumerate() {
        let img = render_view(&ck.model.field, &ck.scene, cam, samples)?;
        img.save_png(&out.join(format!("{i:03}.png")))?;
    }
    eprintln!("rendered {} views to {}", cameras.len(), out.display());
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn eval(pred: &Path, gt: &Path, csv: Option<&Path>) -> Result<()> {
    let names = png_names(gt)?;
    if names.is_empty() {
        bail!("no PNG images in {}", gt.display());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let p = pred.join(name);
        if !p.is_file() {
            bail!("{} has no prediction {}", pred.display(), name);
        }
        pairs.push((name.clone(), Image::load_png(&p)?, Image::load_png(&gt.join(name))?));
    }
    let report = MetricsReport::compute(pairs.iter().map(|(n, a, b)| (n.clone(), a, b)))?;
    let table = report.to_csv();
    print!("{table}");
    if let Some(path) = csv {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn kernel_viz(ckpt: &Path, view: usize, grid: usize, zoom: usize, out: &Path) -> Result<()> {
    if grid == 0 || zoom == 0 {
        bail!("--grid and --zoom must be positive");
    }
    let ck = Checkpoint::load(ckpt)?;
    let Some(dsk) = &ck.model.dsk else {
        bail!("{} was trained without the blur kernel", ckpt.display());
    };
    let Some(camera) = ck.scene.train_cameras.get(view) else {
        bail!("view {view} out of range; the checkpoint has {} training views", ck.scene.train_cameras.len());
    };
    let (w, h) = (camera.width, camera.height);
    let mut canvas = viz::Canvas::new(w * zoom, h * zoom, zoom as f64);
    for gy in 0..grid {
        for gx in 0..grid {
            let p = [(gx as f64 + 0.5) * w as f64 / grid as f64, (gy as f64 + 0.5) * h as f64 / grid as f64];
            draw_kernel(&mut canvas, dsk, camera, view, p)?;
        }
    }
    canvas.into_image().save_png(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn draw_kernel(
    canvas: &mut viz::Canvas,
    dsk: &blurfield::dsk::DskParams,
    camera: &Camera,
    view: usize,
    p: [f64; 2],
) -> Result<()> {
    let outputs = eval_pixel_kernel(dsk, camera, view, p)?;
    let (_, weights) = build_rays(camera, p, &outputs, &dsk.canonical)?;
    canvas.cross(p, [0.5, 0.5, 0.5]);
    for (i, (o, w)) in outputs.iter().zip(&weights).enumerate() {
        let q = [p[0] + o.delta_pixel[0], p[1] + o.delta_pixel[1]];
        let color = if i == 0 { [0.2, 1.0, 0.3] } else { [1.0, 0.35, 0.2] };
        canvas.line(p, q, [0.3, 0.3, 0.3]);
        canvas.dot(q, 0.15 + 0.6 * w.sqrt(), color, w.sqrt().max(0.25) as f32);
    }
    Ok(())
}

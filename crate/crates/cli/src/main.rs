use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lostgan_core::dataset::{
    ingest_coco_stuff, make_synthetic_corpus, tensor_to_images, write_corpus, IngestOptions, LayoutDataset,
    SyntheticSceneSpec, TensorDataset, MANIFEST_FILE,
};
use lostgan_core::metrics::{
    dataset_crops, evaluate_generator, train_desk_embedder, Embedder, EvalOptions, IdentityEmbedder, MetricKind,
};
use lostgan_core::training::{load_generator, ExperimentConfig, Trainer};
use lostgan_core::layout::{parse_layout, sample_style_dims};
use lostgan_core::{Lattice, Layout, LayoutLimits};

#[derive(Parser)]
#[command(name = "lostgan", version, about = "Layout- and style-conditioned image synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Coco64,
    Desk32,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderChoice {
    /// Small classifier fit to the real object crops of the dataset.
    Desk,
    /// Raw pixels.
    Identity,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic layout/image corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        lattice: usize,
    },
    /// Convert COCO-style annotations into a layout dataset.
    Ingest {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        lattice: usize,
        /// `source=target` category renames.
        #[arg(long = "remap", value_parser = parse_remap)]
        remap: Vec<(String, String)>,
    },
    /// Print a configuration preset as JSON.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Desk32)]
        preset: Preset,
        #[arg(long)]
        classes: usize,
    },
    /// Train a generator/discriminator pair.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics for a checkpoint against a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "is,fid,diversity,cas")]
        metrics: Vec<MetricKind>,
        #[arg(long, value_enum, default_value_t = EmbedderChoice::Desk)]
        embedder: EmbedderChoice,
        #[arg(long, default_value_t = 500)]
        layouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate one image from a layout document.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Style seed, used when the document carries no style.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "CKPT_PATH")]
        ckpt: Option<PathBuf>,
        #[arg(long, env = "BIND_ADDR", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn parse_remap(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .ok_or_else(|| format!("expected source=target, got {s:?}"))
}

fn load_data(dir: &Path, side: usize) -> Result<TensorDataset> {
    let ds = LayoutDataset::load(dir, &LayoutLimits::COCO).with_context(|| format!("loading {}", dir.display()))?;
    Ok(TensorDataset::load(&ds, side)?)
}

fn synth(out: &Path, images: usize, seed: u64, lattice: usize) -> Result<()> {
    let spec = SyntheticSceneSpec {
        lattice,
        ..SyntheticSceneSpec::default()
    };
    let (ds, imgs) = make_synthetic_corpus(&spec, images, seed)?;
    write_corpus(out, &ds, &imgs)?;
    log::info!("wrote {} scenes to {}", images, out.display());
    Ok(())
}

fn ingest(annotations: &Path, images: &Path, out: &Path, lattice: usize, remap: Vec<(String, String)>) -> Result<()> {
    let text = std::fs::read_to_string(annotations).with_context(|| format!("reading {}", annotations.display()))?;
    let opts = IngestOptions {
        lattice: Lattice::square(lattice),
        remap: remap.into_iter().collect::<BTreeMap<_, _>>(),
        ..IngestOptions::default()
    };
    let (ds, manifest) = ingest_coco_stuff(&text, images, &opts)?;
    std::fs::create_dir_all(out)?;
    ds.save_index(out)?;
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    println!(
        "retained {} images, dropped {} images and {} objects, {} missing",
        manifest.retained.len(),
        manifest.dropped_images.len(),
        manifest.dropped_objects.len(),
        manifest.missing_images
    );
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::load(dir)?;
            if t.config().generator != cfg.generator || t.config().discriminator != cfg.discriminator {
                bail!("checkpoint architecture differs from {}", config.display());
            }
            t
        }
        None => {
            let ds = LayoutDataset::load(data, &LayoutLimits::COCO)?;
            Trainer::new(cfg.clone(), ds.cats.clone())?
        }
    };
    let side = cfg.generator.output_side();
    let tensors = load_data(data, side)?;
    if tensors.cats != *trainer.categories() {
        bail!("dataset vocabulary differs from the checkpoint's");
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json()?)?;
    let start = Instant::now();
    let total = cfg.training.total_steps;
    let every = cfg.training.log_every.max(1);
    let last = trainer.train(&tensors, Some(out), |r| {
        if r.step % every == 0 {
            log::info!(
                "step {}/{} d {:.4} g {:.4} ({:.1}s)",
                r.step,
                total,
                r.d_total,
                r.g_total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    match last {
        Some(p) => println!("final checkpoint: {}", p.display()),
        None => println!("nothing to do: checkpoint already at step {}", trainer.step()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    data: &Path,
    metrics: Vec<MetricKind>,
    embedder: EmbedderChoice,
    layouts: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (g, cats, meta) = load_generator(ckpt)?;
    let tensors = load_data(data, g.config().output_side())?;
    if tensors.cats != cats {
        bail!("dataset vocabulary differs from the checkpoint's");
    }
    let opts = EvalOptions {
        metrics,
        max_layouts: layouts,
        seed,
        ..EvalOptions::default()
    };
    let desk;
    let emb: &dyn Embedder = match embedder {
        EmbedderChoice::Identity => &IdentityEmbedder,
        EmbedderChoice::Desk => {
            desk = train_desk_embedder(
                &dataset_crops(&tensors, opts.crop_side),
                cats.len(),
                opts.classifier.clone(),
            )?;
            &desk
        }
    };
    let values = evaluate_generator(&g, &tensors, emb, &opts)?;
    let report = serde_json::json!({
        "checkpoint": ckpt,
        "step": meta.step,
        "layouts": tensors.len().min(layouts),
        "metrics": values,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn sample(ckpt: &Path, layout: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let (g, cats, _) = load_generator(ckpt)?;
    let text = std::fs::read_to_string(layout)?;
    let (l, style) = parse_layout(&text, &cats)?;
    l.validate(&cats, &LayoutLimits::default())?;
    let cfg = g.config();
    let l = Layout::new(cfg.lattice(), l.objects);
    let style = match style.as_ref().and_then(|s| s.explicit()) {
        Some(s) => s,
        None => {
            let seed = seed.or(style.and_then(|s| s.seed)).unwrap_or(0);
            sample_style_dims(l.len(), cfg.d_img, cfg.d_noise, seed)
        }
    };
    let img = g.generate(&l, &style)?.image;
    tensor_to_images(&img)?.remove(0).save(out)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth {
            out,
            images,
            seed,
            lattice,
        } => synth(&out, images, seed, lattice),
        Cmd::Ingest {
            annotations,
            images,
            out,
            lattice,
            remap,
        } => ingest(&annotations, &images, &out, lattice, remap),
        Cmd::Config { preset, classes } => {
            let cfg = match preset {
                Preset::Coco64 => ExperimentConfig::coco_64(classes),
                Preset::Desk32 => ExperimentConfig::desk_32(classes),
            };
            println!("{}", cfg.to_json()?);
            Ok(())
        }
        Cmd::Train {
            config,
            data,
            out,
            resume,
        } => train(&config, &data, &out, resume.as_deref()),
        Cmd::Evaluate {
            ckpt,
            data,
            metrics,
            embedder,
            layouts,
            seed,
            out,
        } => evaluate(&ckpt, &data, metrics, embedder, layouts, seed, out.as_deref()),
        Cmd::Sample {
            ckpt,
            layout,
            out,
            seed,
        } => sample(&ckpt, &layout, &out, seed),
        Cmd::Serve { ckpt, bind } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(lostgan_service::serve(bind, ckpt.as_deref()))?;
            Ok(())
        }
    }
}

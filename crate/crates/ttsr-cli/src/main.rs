//! `ttsr` — batch command-line surface for the texture-transformer
//! super-resolution library: training, inference, evaluation, diagnostics,
//! and kernel benchmarking. Every command is deterministic under its seed;
//! every error path exits nonzero without leaving partial output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ttsr_core::data::{ImageU8, PairedDataset};
use ttsr_core::eval::{relevance_level_eval, level_scores_csv, transferred_image_viz, EvalItem};
use ttsr_core::network::{
    network_gradient_battery, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use ttsr_core::rng::{seeded, Stream};
use ttsr_core::tensor::conv::PatchGeometry;
use ttsr_core::tensor::gradcheck::op_battery;
use ttsr_core::train::{load_generator, train, TrainConfig};
use ttsr_core::transformer::{relevance_embedding, relevance_embedding_naive};

#[derive(Parser)]
#[command(
    name = "ttsr",
    about = "Reference-based 4x super-resolution with texture transfer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a paired dataset (input/NNN.png + ref/NNN.png)
    Train {
        /// Training config file (key = value lines; see README)
        #[arg(long)]
        config: PathBuf,
        /// Dataset root containing input/ and ref/
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and loss_log.csv
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve one LR image using a reference image
    Infer {
        /// Trained checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Low-resolution input PNG
        #[arg(long)]
        lr: PathBuf,
        /// High-resolution reference PNG
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
        /// Output PNG (4x the LR extents)
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model per reference-relevance level, emitting a CSV
    Eval {
        /// Trained checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Eval root containing hr/ and refs/<level>/ subdirectories
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer raw reference patches through the hard attention map
    VizTransfer {
        /// Trained checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Low-resolution input PNG
        #[arg(long)]
        lr: PathBuf,
        /// High-resolution reference PNG
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
        /// Output PNG of the transferred reference content
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient battery over all ops and networks
    Gradcheck {
        /// Element type for the checks (only f64 is meaningful)
        #[arg(long, default_value = "f64")]
        dtype: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print generator/discriminator parameter counts
    CountParams {
        /// Base channel width of the generator streams
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// Cross-scale feature exchange between streams
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        csfi: bool,
        /// Fail unless the counts land within 5% of the reference totals
        /// (6.42M with exchange on, 4.42M off; only valid at 64 channels)
        #[arg(long)]
        assert: bool,
    },
    /// Time the batched relevance kernel against the naive per-pair oracle
    Bench {
        /// Comma-separated square grid extents to benchmark
        #[arg(long, default_value = "1,8,16,32")]
        sizes: String,
        /// Feature channels of the matched maps
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Write a file atomically: errors can never leave a partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn save_png_atomic(img: &ImageU8, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp.png");
    img.save(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dataset = PairedDataset::open(data)?;
    let report = train(&dataset, &cfg, out, resume)?;
    println!(
        "trained {} steps; final rec loss {:.6}; log at {}",
        report.steps,
        report.final_rec,
        report.log_path.display()
    );
    for ckpt in &report.checkpoints {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn cmd_infer(ckpt: &Path, lr: &Path, reference: &Path, out: &Path) -> Result<()> {
    let (gen, _cfg) = load_generator::<f32>(ckpt)?;
    let lr_img = ImageU8::load(lr)?;
    let ref_img = ImageU8::load(reference)?;
    let sr = ttsr_core::eval::infer(&gen, &lr_img, &ref_img)?;
    save_png_atomic(&sr, out)?;
    println!(
        "wrote {} ({}x{} from {}x{})",
        out.display(),
        sr.width,
        sr.height,
        lr_img.width,
        lr_img.height
    );
    Ok(())
}

/// Load the eval layout: `hr/<id>.png` ground truths with reference variants
/// under `refs/<level>/<id>.png`. Levels are evaluated in sorted name order,
/// then an extra `LR` level (the upscaled input itself) is appended.
fn load_eval_items(root: &Path) -> Result<Vec<EvalItem>> {
    let hr_dir = root.join("hr");
    let refs_dir = root.join("refs");
    let mut levels: Vec<String> = fs::read_dir(&refs_dir)
        .with_context(|| format!("reading {}", refs_dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    levels.sort();
    if levels.is_empty() {
        bail!("no reference-level directories under {}", refs_dir.display());
    }

    let mut ids: Vec<String> = fs::read_dir(&hr_dir)
        .with_context(|| format!("reading {}", hr_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_string_lossy()
                .strip_suffix(".png")
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no PNG ground truths under {}", hr_dir.display());
    }

    let mut items = Vec::new();
    for id in ids {
        let hr = ImageU8::load(&hr_dir.join(format!("{id}.png")))?;
        let mut refs = Vec::new();
        for level in &levels {
            let p = refs_dir.join(level).join(format!("{id}.png"));
            refs.push((level.clone(), ImageU8::load(&p)?));
        }
        // the no-external-reference baseline: the input itself, upscaled
        let lr = ttsr_core::data::make_lr(&hr)?;
        let lr_up = ttsr_core::tensor::resize::bicubic_resize(&lr.to_tensor01::<f32>(), 4.0)?;
        refs.push(("LR".to_string(), ImageU8::from_tensor01(&lr_up)));
        items.push(EvalItem { id, hr, refs });
    }
    Ok(items)
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (gen, _cfg) = load_generator::<f32>(ckpt)?;
    let items = load_eval_items(data)?;
    let scores = relevance_level_eval(&gen, &items).map_err(anyhow::Error::msg)?;
    let csv = level_scores_csv(&scores);
    match out {
        Some(p) => {
            write_atomic(p, csv.as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_viz_transfer(ckpt: &Path, lr: &Path, reference: &Path, out: &Path) -> Result<()> {
    let (gen, _cfg) = load_generator::<f32>(ckpt)?;
    let lr_img = ImageU8::load(lr)?;
    let ref_img = ImageU8::load(reference)?;
    let viz = transferred_image_viz(&gen, &lr_img, &ref_img)?;
    save_png_atomic(&viz, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(dtype: &str, seed: u64) -> Result<()> {
    if dtype != "f64" {
        bail!("unsupported --dtype {dtype}: finite differences need f64");
    }
    const TOL: f64 = 1e-5;
    let mut entries = op_battery(seed, 1e-6)?;
    entries.extend(network_gradient_battery(seed, 1e-5, 2)?);
    let mut failed = 0usize;
    for e in &entries {
        let verdict = if e.rel_err < TOL { "ok" } else { "FAIL" };
        println!("{:<32} rel_err {:.3e}  {}", e.name, e.rel_err, verdict);
        if e.rel_err >= TOL {
            failed += 1;
        }
    }
    let mut worst = entries.clone();
    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    println!("worst offenders:");
    for e in worst.iter().take(3) {
        println!("  {:<30} {:.3e}", e.name, e.rel_err);
    }
    if failed > 0 {
        bail!("{failed} of {} checks exceeded rel err {TOL}", entries.len());
    }
    println!("all {} checks within rel err {TOL}", entries.len());
    Ok(())
}

fn cmd_count_params(channels: usize, csfi: bool, assert: bool) -> Result<()> {
    let mut rng = seeded(0, Stream::Init);
    let cfg = GeneratorConfig {
        base_channels: channels,
        csfi,
        ..GeneratorConfig::default()
    };
    let gen: Generator<f32> = Generator::new(cfg, &mut rng);
    let gen_count = gen.count_params();
    let disc: Discriminator<f32> = Discriminator::new(
        DiscriminatorConfig {
            input_extent: 160,
            base_channels: 32,
        },
        &mut rng,
    );
    let disc_count = disc.count_params();
    println!("generator ({} ch, exchange {}): {gen_count}", channels, if csfi { "on" } else { "off" });
    println!("discriminator (160px, 32 ch):   {disc_count}");

    if assert {
        if channels != 64 {
            bail!("--assert targets are defined for --channels 64 only");
        }
        let target = if csfi { 6_420_000.0 } else { 4_420_000.0 };
        let rel = (gen_count as f64 - target).abs() / target;
        if rel > 0.05 {
            bail!(
                "generator count {gen_count} deviates {:.2}% from target {target}",
                rel * 100.0
            );
        }
        println!("within 5% of target {target} ({:+.2}%)", (gen_count as f64 / target - 1.0) * 100.0);
    }
    Ok(())
}

fn cmd_bench(sizes: &str, channels: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut rng = seeded(seed, Stream::Eval);
    let geo = PatchGeometry::new(3, 1, 1);
    let mut csv = String::from("grid,l_q,l_k,naive_ms,batched_ms,speedup,pairs_per_sec_batched\n");
    for tok in sizes.split(',') {
        let g: usize = tok
            .trim()
            .parse()
            .with_context(|| format!("bad grid size {tok:?}"))?;
        if g == 0 {
            bail!("grid sizes must be positive");
        }
        // extent g with kernel 3 / stride 1 / pad 1 gives a g x g sliding grid
        let q = ttsr_core::nn::uniform::<f32>(&[1, channels, g, g], -1.0, 1.0, &mut rng);
        let k = ttsr_core::nn::uniform::<f32>(&[1, channels, g, g], -1.0, 1.0, &mut rng);

        let t0 = Instant::now();
        let fast = relevance_embedding(&q, &k, geo)?;
        let batched_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let slow = relevance_embedding_naive(&q, &k, geo)?;
        let naive_ms = t1.elapsed().as_secs_f64() * 1e3;

        // keep both kernels honest while we are here
        let (fv, sv) = (fast.r.to_vec(), slow.r.to_vec());
        let worst = fv
            .iter()
            .zip(&sv)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if worst > 1e-4 {
            bail!("kernel mismatch during bench: max abs diff {worst}");
        }

        let pairs = (g * g * g * g) as f64;
        csv.push_str(&format!(
            "{g},{lq},{lk},{naive_ms:.3},{batched_ms:.3},{speedup:.2},{thr:.0}\n",
            lq = g * g,
            lk = g * g,
            speedup = naive_ms / batched_ms.max(1e-9),
            thr = pairs / (batched_ms / 1e3).max(1e-12),
        ));
    }
    match out {
        Some(p) => {
            write_atomic(p, csv.as_bytes())?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => cmd_train(config, data, out, *seed, resume.as_deref()),
        Command::Infer {
            ckpt,
            lr,
            reference,
            out,
        } => cmd_infer(ckpt, lr, reference, out),
        Command::Eval { ckpt, data, out } => cmd_eval(ckpt, data, out.as_deref()),
        Command::VizTransfer {
            ckpt,
            lr,
            reference,
            out,
        } => cmd_viz_transfer(ckpt, lr, reference, out),
        Command::Gradcheck { dtype, seed } => cmd_gradcheck(dtype, *seed),
        Command::CountParams {
            channels,
            csfi,
            assert,
        } => cmd_count_params(*channels, *csfi, *assert),
        Command::Bench {
            sizes,
            channels,
            seed,
            out,
        } => cmd_bench(sizes, *channels, *seed, out.as_deref()),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

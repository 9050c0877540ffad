//! Command-line entry points: dataset generation and import, training,
//! evaluation, gradient checking, and mask dumps.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pmrn::config::TrainConfig;
use pmrn::data::{self, partsworld::PartsWorldConfig, SplitRole};
use pmrn::error::Result;
use pmrn::jigsaw;
use pmrn::model::masks_for_image;
use pmrn::tensor::{all_op_kinds, grad_check_default};
use pmrn::train::{self, checkpoint, eval::evaluate, metrics_csv};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "pmrn", about = "Primitive-based few-shot classification", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parts-compositional dataset.
    SynthGen(SynthGenArgs),
    /// Convert a directory tree of per-class P6 images into the dataset format.
    Import(ImportArgs),
    /// Train episodically and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint over freshly sampled episodes.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite over every graph op.
    Gradcheck(GradcheckArgs),
    /// Write per-primitive masks as PGM images.
    DumpMasks(DumpMasksArgs),
    /// Write the jigsaw permutation table as text.
    DumpPerms(DumpPermsArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    classes_train: usize,
    #[arg(long, default_value_t = 10)]
    classes_val: usize,
    #[arg(long, default_value_t = 10)]
    classes_novel: usize,
    #[arg(long, default_value_t = 30)]
    images_per_class: usize,
    #[arg(long, default_value_t = 96)]
    canvas: usize,
    #[arg(long, default_value_t = 44)]
    jitter: usize,
    #[arg(long, default_value_t = 30)]
    noise_amp: u8,
    #[arg(long, default_value_t = 14)]
    part_size: usize,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes_train: usize,
    #[arg(long)]
    classes_val: usize,
    #[arg(long)]
    classes_novel: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Plain-text key=value config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (defaults to the checkpoint path with .csv).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue a previous run instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    k_primitives: Option<usize>,
    #[arg(long)]
    lambda_div: Option<f64>,
    #[arg(long)]
    alpha_ssl: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Disable the jigsaw pretext task.
    #[arg(long)]
    no_ssj: bool,
    /// Disable channel grouping (plain pooled-cosine baseline).
    #[arg(long)]
    no_acg: bool,
    /// Disable graph reasoning over primitives.
    #[arg(long)]
    no_crn: bool,
    /// Disable task-specific pair weighting.
    #[arg(long)]
    no_tsw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value = "novel")]
    split: String,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct DumpMasksArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value = "novel")]
    split: String,
}

#[derive(Args)]
struct DumpPermsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = jigsaw::DEFAULT_PERMS)]
    n_perm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(name: &str) -> Result<SplitRole> {
    match name {
        "train" => Ok(SplitRole::Train),
        "val" => Ok(SplitRole::Val),
        "novel" => Ok(SplitRole::Novel),
        other => Err(pmrn::Error::InvalidConfig(format!("unknown split {other:?}"))),
    }
}

fn run_synth_gen(args: SynthGenArgs) -> Result<()> {
    let cfg = PartsWorldConfig {
        canvas: args.canvas,
        classes_train: args.classes_train,
        classes_val: args.classes_val,
        classes_novel: args.classes_novel,
        images_per_class: args.images_per_class,
        jitter: args.jitter,
        noise_amp: args.noise_amp,
        part_size: args.part_size,
        seed: args.seed,
        ..Default::default()
    };
    let (contents, manifest) = data::partsworld::generate(&cfg)?;
    data::save_dataset(&args.out, &contents, &manifest)?;
    println!(
        "wrote {} images ({} classes) to {}",
        contents.images.len(),
        cfg.total_classes(),
        args.out.display()
    );
    Ok(())
}

fn run_import(args: ImportArgs) -> Result<()> {
    let (contents, manifest) =
        data::import_ppm_tree(&args.src, args.classes_train, args.classes_val, args.classes_novel)?;
    data::save_dataset(&args.out, &contents, &manifest)?;
    println!(
        "imported {} images at side {} to {}",
        contents.images.len(),
        contents.side,
        args.out.display()
    );
    Ok(())
}

fn merged_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    macro_rules! merge {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    merge!(n_way, k_shot, queries, episodes, lr, k_primitives, lambda_div, alpha_ssl, seed, eval_interval, eval_episodes);
    if args.no_ssj {
        cfg.toggles.ssj = false;
    }
    if args.no_acg {
        cfg.toggles.acg = false;
    }
    if args.no_crn {
        cfg.toggles.crn = false;
    }
    if args.no_tsw {
        cfg.toggles.tsw = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let dataset = data::load_dataset(&args.data)?;
    let outcome = match &args.resume {
        Some(path) => {
            let mut ck = checkpoint::load(path)?;
            // Flag overrides may extend the episode budget on resume.
            if let Some(episodes) = args.episodes {
                ck.config.episodes = episodes;
            }
            train::train_resume(ck, &dataset)?
        }
        None => {
            let cfg = merged_config(&args)?;
            train::train(&cfg, &dataset)?
        }
    };
    checkpoint::save(&outcome.checkpoint, &args.out)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));
    std::fs::write(&metrics_path, metrics_csv(&outcome.metrics))?;
    match &outcome.aborted {
        Some(reason) => println!(
            "aborted ({reason}); last good checkpoint at episode {} saved to {}",
            outcome.checkpoint.episode,
            args.out.display()
        ),
        None => println!(
            "trained {} episodes; checkpoint {} metrics {}",
            outcome.checkpoint.episode,
            args.out.display(),
            metrics_path.display()
        ),
    }
    if let Some(last) = outcome.metrics.last() {
        println!(
            "final: l_total {:.4} train_acc {:.3} val_acc {:.3}",
            last.l_total, last.train_acc, last.eval_acc
        );
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let dataset = data::load_dataset(&args.data)?;
    let ck = checkpoint::load(&args.ckpt)?;
    let split = dataset.split(parse_split(&args.split)?);
    let n_way = args.n_way.unwrap_or(ck.config.n_way);
    let k_shot = args.k_shot.unwrap_or(ck.config.k_shot);
    let queries = args.queries.unwrap_or(ck.config.queries);
    let model_cfg = train::model_config(&ck.config, dataset.side);
    let report = evaluate(
        &ck.params,
        &model_cfg,
        split,
        n_way,
        k_shot,
        queries,
        args.episodes,
        args.seed,
    )?;
    println!(
        "{}-way {}-shot on {}: {:.2} ± {:.2} over {} episodes",
        n_way,
        k_shot,
        args.split,
        report.mean_acc * 100.0,
        report.ci95 * 100.0,
        report.episodes
    );
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> std::process::ExitCode {
    let mut all_pass = true;
    for kind in all_op_kinds() {
        let mut worst: f64 = 0.0;
        let mut pass = true;
        for seed in 0..args.seeds {
            let report = grad_check_default(kind, seed, args.tol);
            worst = worst.max(report.max_rel_err);
            pass &= report.pass;
        }
        println!(
            "{:<18} max_rel_err {:>10.3e}  {}",
            kind.to_string(),
            worst,
            if pass { "pass" } else { "FAIL" }
        );
        all_pass &= pass;
    }
    if all_pass {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}

fn run_dump_masks(args: DumpMasksArgs) -> Result<()> {
    let dataset = data::load_dataset(&args.data)?;
    let ck = checkpoint::load(&args.ckpt)?;
    let split = dataset.split(parse_split(&args.split)?);
    let model_cfg = train::model_config(&ck.config, dataset.side);
    std::fs::create_dir_all(&args.out)?;
    let mut written = 0;
    'outer: for (class_id, images) in &split.classes {
        for (idx, image) in images.iter().enumerate() {
            if written >= args.samples {
                break 'outer;
            }
            let masks = masks_for_image(&ck.params, &model_cfg, &image.to_tensor())?;
            let (k, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
            for prim in 0..k {
                let gray: Vec<u8> = masks.data()[prim * h * w..(prim + 1) * h * w]
                    .iter()
                    .map(|&m| (255.0 * m).round() as u8)
                    .collect();
                let name = format!("class{class_id}_sample{idx}_prim{prim}.pgm");
                std::fs::write(args.out.join(name), data::ppm::encode_pgm(w, h, &gray))?;
            }
            written += 1;
        }
    }
    println!("wrote masks for {written} samples to {}", args.out.display());
    Ok(())
}

fn run_dump_perms(args: DumpPermsArgs) -> Result<()> {
    let table = jigsaw::build_permutation_table(args.n_perm, args.seed)?;
    table.write_to(&args.out)?;
    println!(
        "wrote {} permutations (min pairwise Hamming {}) to {}",
        table.n_perm(),
        table.min_pairwise_hamming(),
        args.out.display()
    );
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthGen(args) => run_synth_gen(args),
        Command::Import(args) => run_import(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => return run_gradcheck(args),
        Command::DumpMasks(args) => run_dump_masks(args),
        Command::DumpPerms(args) => run_dump_perms(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}

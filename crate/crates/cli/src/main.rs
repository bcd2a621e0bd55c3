use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmda_cli::pipeline::{self, RunPaths};
use pmda_core::error::Error;
use pmda_core::inference::FuseMode;
use pmda_core::io::Manifest;

#[derive(Parser)]
#[command(
    name = "pmda",
    about = "Multi-domain adaptation pipeline for semantic segmentation of stylized images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default desk-scale manifest.
    Init {
        /// Where to write the manifest.
        #[arg(long, default_value = "manifest.json")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of synthetic sub-domains (1..=2 use the built-in styles).
        #[arg(long)]
        subdomains: Option<usize>,
    },
    /// Generate the synthetic dataset and the filled manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the style-transfer decoder.
    TrainStyle {
        #[command(flatten)]
        common: Common,
    },
    /// Stylize the source set once per sub-domain.
    MakePseudo {
        #[command(flatten)]
        common: Common,
        /// Content/style blend override.
        #[arg(long)]
        alpha: Option<f32>,
    },
    /// Train one segmentation model per sub-domain on its pseudo set.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        parallel_domains: usize,
    },
    /// Adversarially refine each model against its real target images.
    Confuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        parallel_domains: usize,
    },
    /// Fit the style feature space over the target corpora.
    BuildSpace {
        #[command(flatten)]
        common: Common,
    },
    /// Segment one image with the weighted ensemble.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Neighbor count override.
        #[arg(long)]
        k: Option<usize>,
        /// Combine probabilities (default) or raw logits.
        #[arg(long, value_parser = parse_fuse_mode, default_value = "prob")]
        fuse_mode: FuseMode,
    },
    /// Compare predictions against ground truth and print mIoU.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Name used for the written metric files.
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Cut class segments out of images into a comparison collection.
    ExtractSegments {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        class_id: u8,
        #[arg(long, default_value_t = 1)]
        min_area: usize,
    },
    /// Chain every stage with the shared seed.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        parallel_domains: usize,
    },
}

fn parse_fuse_mode(s: &str) -> Result<FuseMode, String> {
    match s {
        "prob" => Ok(FuseMode::Probability),
        "logit" => Ok(FuseMode::Logit),
        other => Err(format!("unknown fuse mode `{other}` (use prob|logit)")),
    }
}

fn load_manifest(common: &Common) -> Result<Manifest, Error> {
    let mut manifest = Manifest::load(&common.manifest)?;
    if let Some(seed) = common.seed {
        manifest.seed = seed;
    }
    Ok(manifest)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::MissingInput(_) => 2,
        Error::Manifest { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Init {
            out,
            seed,
            subdomains,
        } => {
            let mut manifest = Manifest::default_desk();
            if let Some(seed) = seed {
                manifest.seed = seed;
            }
            if let Some(n) = subdomains {
                if n == 0 || n > manifest.subdomains.len() {
                    return Err(Error::Manifest {
                        key: "subdomains".into(),
                        message: format!(
                            "init supports 1..={} built-in sub-domains",
                            manifest.subdomains.len()
                        ),
                    });
                }
                manifest.subdomains.truncate(n);
            }
            manifest.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::GenData { common } => {
            let manifest = load_manifest(&common)?;
            pipeline::gen_data(&manifest, &common.out)?;
            println!(
                "data generated under {}; manifest at {}",
                RunPaths::new(&common.out).data_dir().display(),
                RunPaths::new(&common.out).manifest().display()
            );
        }
        Command::TrainStyle { common } => {
            let manifest = load_manifest(&common)?;
            pipeline::train_style(&manifest, &common.out)?;
            println!(
                "style model at {}",
                RunPaths::new(&common.out).style_model().display()
            );
        }
        Command::MakePseudo { common, alpha } => {
            let manifest = load_manifest(&common)?;
            pipeline::make_pseudo(&manifest, &common.out, alpha)?;
            println!("pseudo sets under {}", common.out.join("pseudo").display());
        }
        Command::TrainSeg {
            common,
            parallel_domains,
        } => {
            let manifest = load_manifest(&common)?;
            pipeline::train_seg(&manifest, &common.out, parallel_domains)?;
            println!(
                "segmentation models under {}",
                RunPaths::new(&common.out).models_dir().display()
            );
        }
        Command::Confuse {
            common,
            parallel_domains,
        } => {
            let manifest = load_manifest(&common)?;
            pipeline::confuse_stage(&manifest, &common.out, parallel_domains)?;
            println!(
                "refined models under {}",
                RunPaths::new(&common.out).models_dir().display()
            );
        }
        Command::BuildSpace { common } => {
            let manifest = load_manifest(&common)?;
            pipeline::build_space(&manifest, &common.out)?;
            println!(
                "style space at {}",
                RunPaths::new(&common.out).space().display()
            );
        }
        Command::Infer {
            common,
            image,
            k,
            fuse_mode,
        } => {
            let manifest = load_manifest(&common)?;
            let outcome = pipeline::infer_image(&manifest, &common.out, &image, k, fuse_mode)?;
            let formatted: Vec<String> =
                outcome.weights.iter().map(|w| format!("{w:.4}")).collect();
            println!("w = [{}]", formatted.join(", "));
            println!("labels written to {}", outcome.label_path.display());
        }
        Command::Evaluate {
            common,
            pred,
            gt,
            split,
        } => {
            let manifest = load_manifest(&common)?;
            let report = pipeline::evaluate_dirs(&manifest, &pred, &gt)?;
            print!("{}", pipeline::format_metrics(&manifest, &report));
            pipeline::write_metrics(&manifest, &RunPaths::new(&common.out), &split, &report)?;
        }
        Command::ExtractSegments {
            common,
            images,
            labels,
            class_id,
            min_area,
        } => {
            let manifest = load_manifest(&common)?;
            let written = pipeline::extract_segments(
                &manifest, &common.out, &images, &labels, class_id, min_area,
            )?;
            println!("{} segment patches written", written.len());
        }
        Command::RunAll {
            common,
            parallel_domains,
        } => {
            let manifest = load_manifest(&common)?;
            let report = pipeline::run_all(&manifest, &common.out, parallel_domains)?;
            println!(
                "fused mIoU: combined {:.4}, unseen {:.4}",
                report.fused_combined_miou, report.fused_unseen_miou
            );
            println!(
                "report at {}",
                RunPaths::new(&common.out).report().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PMDA_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(exit_code_for(&err))
        }
    }
}

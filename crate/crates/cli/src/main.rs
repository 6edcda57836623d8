//! Command-line frontend: train, embed, extract, attack, evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavemark::attacks::{apply_attack, AttackSpec};
use wavemark::io::{load_checkpoint, load_dataset, load_image, resize_to_256, save_checkpoint, save_image};
use wavemark::metrics::{evaluate, standard_evaluation_attacks};
use wavemark::model::{embed_pipeline, extract_pipeline, PipelineConfig, WatermarkBits};
use wavemark::training::{train_loop, TrainingConfig};
use wavemark::wavelet::BandId;

#[derive(Parser)]
#[command(name = "wavemark", about = "Blind image watermarking with a wavelet-domain CNN", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        /// Image-distortion loss weight
        #[arg(long, default_value_t = 33.0)]
        lambda1: f32,
        /// Payload-error loss weight
        #[arg(long, default_value_t = 0.2)]
        lambda2: f32,
        #[arg(long, default_value_t = 0.001)]
        lr: f32,
        /// Wavelet subband to embed into
        #[arg(long, default_value = "LL")]
        band: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable the training-time attack simulator
        #[arg(long)]
        no_attack_sim: bool,
        /// Checkpoint path; the best epoch by held-out BER is kept at <out>.best
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a 256-bit watermark (64 hex chars) into an image
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        watermark: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the watermark from an image; prints 64 hex chars
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Apply one attack to an image
    Attack {
        /// none | salt-pepper | gaussian | jpeg | dropout
        #[arg(long = "type")]
        attack_type: String,
        /// Pixel probability for salt-pepper / dropout
        #[arg(long)]
        p: Option<f32>,
        /// Noise level for gaussian
        #[arg(long)]
        sigma: Option<f32>,
        /// JPEG quality 1-100
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long)]
        image: PathBuf,
        /// Unmarked original; required by dropout
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure PSNR and per-attack BER of a model over a directory of images
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Train {
            data,
            epochs,
            batch_size,
            lambda1,
            lambda2,
            lr,
            band,
            seed,
            no_attack_sim,
            out,
        } => {
            let band: BandId = band.parse()?;
            let config = TrainingConfig {
                batch_size,
                epochs,
                lambda1,
                lambda2,
                learning_rate: lr,
                seed,
                attack_simulator: !no_attack_sim,
                band,
            };
            let dataset = load_dataset(&data)?;
            if dataset.skipped > 0 {
                eprintln!("skipped {} unreadable entries", dataset.skipped);
            }
            let best = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
                Some(ext) => format!("{ext}.best"),
                None => "best".to_string(),
            });
            println!("epoch, l1, l2, l3, psnr, ber");
            let mut sink = |state: &wavemark::training::TrainState,
                            log: &wavemark::training::EpochLog,
                            is_best: bool|
             -> wavemark::Result<()> {
                println!("{log}");
                save_checkpoint(state, &out)?;
                if is_best {
                    save_checkpoint(state, &best)?;
                }
                Ok(())
            };
            train_loop(&config, &dataset.images, &mut sink)?;
            Ok(())
        }
        Command::Embed { model, image, watermark, out } => {
            let state = load_checkpoint(&model)?;
            let wm = WatermarkBits::from_hex(&watermark)?;
            let host = resize_to_256(&load_image(&image)?)?;
            let config = PipelineConfig::for_band(state.params.band);
            let marked = embed_pipeline(&host, &wm, &state.params, &config)?;
            save_image(&marked, &out)?;
            Ok(())
        }
        Command::Extract { model, image } => {
            let state = load_checkpoint(&model)?;
            let img = resize_to_256(&load_image(&image)?)?;
            let config = PipelineConfig::for_band(state.params.band);
            let wm = extract_pipeline(&img, &state.params, &config)?;
            println!("{}", wm.to_hex());
            Ok(())
        }
        Command::Attack { attack_type, p, sigma, quality, image, original, out, seed } => {
            let spec = match attack_type.as_str() {
                "none" => AttackSpec::NoAttack,
                "salt-pepper" => AttackSpec::SaltPepper { p: p.unwrap_or(0.1) },
                "gaussian" => AttackSpec::Gaussian { sigma: sigma.unwrap_or(0.15) },
                "jpeg" => AttackSpec::Jpeg { quality: quality.unwrap_or(50) },
                "dropout" => AttackSpec::Dropout { p: p.unwrap_or(0.3) },
                other => return Err(format!("unknown attack type `{other}`").into()),
            };
            if matches!(spec, AttackSpec::Dropout { .. }) && original.is_none() {
                return Err("attack type dropout requires --original".into());
            }
            let img = load_image(&image)?;
            let orig = original.map(|path| load_image(path)).transpose()?;
            if let Some(o) = &orig {
                if o.shape() != img.shape() {
                    return Err("--original dimensions must match --image".into());
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attacked = apply_attack(spec, &img, orig.as_ref(), &mut rng)?;
            save_image(&attacked, &out)?;
            Ok(())
        }
        Command::Evaluate { model, data, seed, report } => {
            let state = load_checkpoint(&model)?;
            let dataset = load_dataset(&data)?;
            if dataset.skipped > 0 {
                eprintln!("skipped {} unreadable entries", dataset.skipped);
            }
            let config = PipelineConfig::for_band(state.params.band);
            let attacks = standard_evaluation_attacks();
            let result = evaluate(&state.params, &config, &dataset.images, &attacks, seed)?;
            print!("{}", result.render_table());
            if let Some(path) = report {
                std::fs::write(path, serde_json::to_string_pretty(&result)?)?;
            }
            Ok(())
        }
    }
}

//! `atoken` command-line tool.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use atoken_core::codec::{
    detokenize_gaussians, detokenize_pixels, tokenize_asset, tokenize_image, tokenize_video, Asset,
};
use atoken_core::evalkit::{feature_stats, frechet, psnr, read_features, ssim};
use atoken_core::gsplat::{format_splats, parse_splats, render, splats_from_set, RenderTarget};
use atoken_core::media::{
    load_manifest, load_ppm, load_video, load_voxels, parse_camera, save_avid, save_ppm, Image,
};
use atoken_core::nnet::{read_checkpoint, ModelConfig, ModelParams};
use atoken_core::patchify::VoxelGrid;
use atoken_core::quantize::{fsq_quantize_rows, GROUP_DIMS};
use atoken_core::sparse4d::{read_tokens, write_tokens, Modality, TokenSet};
use atoken_core::stream::DEFAULT_TILE_LEN;
use atoken_core::trainer::{run_toy_with, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "atoken", version, about = "Unified sparse 4D visual tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Image,
    Video,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    /// ATCK checkpoint; without one a seeded random model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for the random model when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode media into an ATOK token file.
    Tokenize {
        #[arg(long, value_enum)]
        modality: ModalityArg,
        /// Emit FSQ ids instead of continuous latents.
        #[arg(long)]
        discrete: bool,
        /// Voxel list for 3D input (the input is then a view manifest).
        #[arg(long)]
        voxels: Option<PathBuf>,
        /// Tile length in frames for video input.
        #[arg(long, default_value_t = DEFAULT_TILE_LEN)]
        tile_len: usize,
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decode an ATOK file to PPM (image), AVID (video) or splat text (3D).
    Detokenize {
        #[arg(long, default_value_t = DEFAULT_TILE_LEN)]
        tile_len: usize,
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        output: PathBuf,
    },
    /// Encode an AVID video tile by tile with cached attention.
    StreamEncode {
        #[arg(long, default_value_t = DEFAULT_TILE_LEN)]
        tile_len: usize,
        #[arg(long)]
        discrete: bool,
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        output: PathBuf,
    },
    /// Convert continuous tokens into FSQ ids.
    Quantize { input: PathBuf, output: PathBuf },
    /// Fréchet distance between two ATFT feature files, split into mean and
    /// covariance terms.
    FidDecompose { first: PathBuf, second: PathBuf },
    /// PSNR and SSIM between two PPM images.
    Eval { first: PathBuf, second: PathBuf },
    /// Run a key=value training config and write a checkpoint.
    TrainToy {
        config: PathBuf,
        /// Checkpoint path (overrides `output` in the config).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Only print every n-th log line.
        #[arg(long, default_value_t = 1)]
        log_every: usize,
    },
    /// Render a splat text file to PPM.
    Render {
        splats: PathBuf,
        /// Fifteen numbers: row-major rotation, translation, focal, cx, cy.
        #[arg(long, allow_hyphen_values = true)]
        camera: String,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<atoken_core::Error> for Failure {
    fn from(e: atoken_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_params(args: &ModelArgs, latent: usize) -> CliResult<ModelParams> {
    match &args.checkpoint {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Ok(read_checkpoint(BufReader::new(f))?.0)
        }
        None => Ok(ModelParams::init(
            ModelConfig {
                latent,
                ..ModelConfig::default()
            },
            args.seed,
        )?),
    }
}

fn default_latent(discrete: bool) -> usize {
    // discrete ids need whole FSQ groups
    if discrete {
        48
    } else {
        ModelConfig::default().latent
    }
}

fn save_tokens(ts: &TokenSet, path: &Path) -> CliResult<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_tokens(ts, BufWriter::new(f))?;
    Ok(())
}

fn load_tokens(path: &Path) -> CliResult<TokenSet> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_tokens(BufReader::new(f))?)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Tokenize {
            modality,
            discrete,
            voxels,
            tile_len,
            model,
            input,
            output,
        } => {
            if modality != ModalityArg::ThreeD && voxels.is_some() {
                return Err(Failure::Usage("--voxels only applies to 3d input".into()));
            }
            let params = load_params(&model, default_latent(discrete))?;
            let ts = match modality {
                ModalityArg::Image => tokenize_image(&load_ppm(&input)?, &params, discrete)?,
                ModalityArg::Video => {
                    tokenize_video(&load_video(&input)?, &params, tile_len, discrete)?
                }
                ModalityArg::ThreeD => {
                    let voxels = voxels
                        .ok_or_else(|| Failure::Usage("--voxels is required for 3d".into()))?;
                    let asset = Asset {
                        views: load_manifest(&input)?,
                        voxels: VoxelGrid::new(load_voxels(&voxels)?)?,
                    };
                    tokenize_asset(&asset, &params, discrete)?
                }
            };
            save_tokens(&ts, &output)
        }
        Command::Detokenize {
            tile_len,
            model,
            input,
            output,
        } => {
            let ts = load_tokens(&input)?;
            let latent = if ts.discrete {
                ts.channels * GROUP_DIMS
            } else {
                ts.channels
            };
            let params = load_params(&model, latent)?;
            match ts.modality {
                Modality::Image => save_ppm(
                    &detokenize_pixels(&ts, &params, tile_len)?.frame(0),
                    &output,
                )?,
                Modality::Video => save_avid(&detokenize_pixels(&ts, &params, tile_len)?, &output)?,
                Modality::ThreeD => {
                    let splats = splats_from_set(&detokenize_gaussians(&ts, &params)?);
                    std::fs::write(&output, format_splats(&splats))
                        .with_context(|| format!("writing {}", output.display()))?;
                }
            }
            Ok(())
        }
        Command::StreamEncode {
            tile_len,
            discrete,
            model,
            input,
            output,
        } => {
            let params = load_params(&model, default_latent(discrete))?;
            let ts = tokenize_video(&load_video(&input)?, &params, tile_len, discrete)?;
            save_tokens(&ts, &output)
        }
        Command::Quantize { input, output } => {
            let ts = load_tokens(&input)?;
            if ts.discrete {
                return Err(Failure::Data(anyhow::anyhow!(
                    "{} already holds discrete ids",
                    input.display()
                )));
            }
            let z: Vec<f64> = ts.features.iter().map(|&v| v as f64).collect();
            let code = fsq_quantize_rows(&z, ts.channels)?;
            let ids = code.ids.iter().map(|&i| i as f32).collect();
            let mut q = TokenSet::new(ts.modality, ts.bounds, code.groups(), ts.coords, ids)?;
            q.discrete = true;
            save_tokens(&q, &output)
        }
        Command::FidDecompose { first, second } => {
            let stats = |p: &Path| -> CliResult<_> {
                let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                let (data, dim) = read_features(BufReader::new(f))?;
                let data: Vec<f64> = data.iter().map(|&v| v as f64).collect();
                Ok(feature_stats(&data, dim)?)
            };
            let f = frechet(&stats(&first)?, &stats(&second)?)?;
            let (mean, cov) = (nanos(f.mean_term), nanos(f.cov_term));
            println!(
                "total={} mean={} cov={}",
                format_nanos(mean + cov),
                format_nanos(mean),
                format_nanos(cov)
            );
            Ok(())
        }
        Command::Eval { first, second } => {
            let (a, b) = (load_ppm(&first)?, load_ppm(&second)?);
            let p = psnr(&a, &b)?;
            let s = ssim(&a, &b)?;
            println!("psnr={} ssim={}", format_metric(p), format_metric(s));
            Ok(())
        }
        Command::TrainToy {
            config,
            output,
            seed,
            log_every,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output = Some(o);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if log_every == 0 {
                return Err(Failure::Usage("--log-every must be positive".into()));
            }
            if cfg.output.is_none() {
                return Err(Failure::Usage(
                    "no checkpoint output: pass --output or set output=".into(),
                ));
            }
            let report = run_toy_with(&cfg, |m| {
                if m.step % log_every == 0 {
                    println!("{}", m.log_line());
                }
            })?;
            println!(
                "steps={} final_loss={:.6} train_psnr={}",
                report.steps,
                report.final_loss,
                format_metric(report.train_psnr)
            );
            Ok(())
        }
        Command::Render {
            splats,
            camera,
            width,
            height,
            output,
        } => {
            let text = std::fs::read_to_string(&splats)
                .with_context(|| format!("reading {}", splats.display()))?;
            let splats = parse_splats(&text)?;
            let target =
                RenderTarget::new(width, height).map_err(|e| Failure::Usage(e.to_string()))?;
            let cam = parse_camera(&camera, Image::filled(height, width, [0.0; 3]))
                .map_err(|e| Failure::Usage(e.to_string()))?;
            save_ppm(&render(&splats, &cam, &target), &output)?;
            Ok(())
        }
    }
}

/// Rounds to an integer count of 1e-9 so printed parts add up exactly.
fn nanos(v: f64) -> i128 {
    let n = (v * 1e9).round() as i128;
    if n == 0 {
        0
    } else {
        n
    }
}

fn format_nanos(n: i128) -> String {
    let sign = if n < 0 { "-" } else { "" };
    let n = n.unsigned_abs();
    let (int, frac) = (n / 1_000_000_000, n % 1_000_000_000);
    if frac == 0 {
        return format!("{sign}{int}");
    }
    let frac = format!("{frac:09}");
    format!("{sign}{int}.{}", frac.trim_end_matches('0'))
}

fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if v.fract() == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.6}")
    }
}

//! `shellnerf`: synthetic scenes, training, rendering, refinement,
//! benchmarking, and evaluation for the shell-sampled character radiance
//! field. Exit codes: 0 success, 1 runtime failure, 2 usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shellnerf_cli::bench::{run_bench, write_bench_csvs};
use shellnerf_cli::config::RunConfig;
use shellnerf_cli::io;
use shellnerf_cli::pipeline;
use shellnerf_cli::scene::{gen_scene, SceneKind, SceneParams};
use shellnerf_core::render::{NeuralField, OccupancyField};

#[derive(Parser)]
#[command(name = "shellnerf", version, about = "Deformable-template shell radiance field toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Production-scale defaults.
    Paper,
    /// Workstation-scale budgets.
    Desk,
    /// Tiny smoke-test budgets.
    Smoke,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; overrides the preset entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration preset.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => match self.preset {
                Preset::Paper => RunConfig::default(),
                Preset::Desk => RunConfig::desk(),
                Preset::Smoke => RunConfig::smoke(),
            },
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: template, rig, cameras, images, masks.
    GenScene {
        /// One of: sphere, bumpy-sphere, swinging-cylinder, two-bone-capsule.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        /// Full scene parameter JSON; overrides the kind preset.
        #[arg(long)]
        scene_config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Image resolution override.
        #[arg(long)]
        image_size: Option<usize>,
        /// Camera count override.
        #[arg(long)]
        cameras: Option<usize>,
        /// Frame count override.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the field (and optionally the full alternating schedule).
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after stage 1 (field training on frozen geometry).
        #[arg(long)]
        stage1_only: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Refine the displacement network from extracted or provided pointclouds.
    Refine {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of points_f***_c**.ply files (from `render`).
        #[arg(long)]
        points: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render images and pointclouds from a checkpoint.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render only the held-out cameras.
        #[arg(long)]
        heldout_only: bool,
        /// Also export depth maps (float binary + 16-bit PNG).
        #[arg(long)]
        depth: bool,
        /// Also export per-frame normal maps.
        #[arg(long)]
        normal_maps: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare shell sampling against the uniform baseline.
    Bench {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional checkpoint; without it a hand-set opaque field is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// PSNR tables for rendered images against scene ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn scene_params_from_args(
    kind: &str,
    scene_config: Option<&PathBuf>,
    image_size: Option<usize>,
    cameras: Option<usize>,
    frames: Option<usize>,
) -> Result<SceneParams> {
    let mut params = match scene_config {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => {
            let Some(kind) = SceneKind::parse(kind) else {
                bail!("unknown scene kind '{kind}' (expected sphere, bumpy-sphere, swinging-cylinder, or two-bone-capsule)");
            };
            SceneParams::preset(kind)
        }
    };
    if let Some(s) = image_size {
        params.image_size = s;
    }
    if let Some(c) = cameras {
        params.cameras = c;
    }
    if let Some(f) = frames {
        params.frames = f;
    }
    Ok(params)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene { kind, out, scene_config, seed, image_size, cameras, frames } => {
            let params =
                scene_params_from_args(&kind, scene_config.as_ref(), image_size, cameras, frames)?;
            let scene = gen_scene(&params, seed).map_err(|e| anyhow::anyhow!("scene: {e}"))?;
            pipeline::write_scene(&out, &scene)?;
            println!(
                "wrote {} scene: {} cameras, {} frames, {} vertices -> {}",
                params.kind.name(),
                params.cameras,
                params.frames,
                scene.template.vertex_count(),
                out.display()
            );
            Ok(())
        }
        Command::Train { scene, out, stage1_only, config } => {
            let config = config.resolve()?;
            pipeline::train_command(&scene, &out, &config, stage1_only)?;
            println!("training finished -> {}", out.display());
            Ok(())
        }
        Command::Refine { scene, checkpoint, out, points, config } => {
            let config = config.resolve()?;
            pipeline::refine_command(&scene, &checkpoint, &out, points.as_deref(), &config)?;
            println!("refinement finished -> {}", out.display());
            Ok(())
        }
        Command::Render { scene, checkpoint, out, heldout_only, depth, normal_maps, config } => {
            let config = config.resolve()?;
            pipeline::render_command(&scene, &checkpoint, &out, heldout_only, depth, normal_maps, &config)?;
            println!("renders written -> {}", out.display());
            Ok(())
        }
        Command::Bench { scene, out, checkpoint, config } => {
            let config = config.resolve()?;
            let scene = pipeline::load_scene(&scene)?;
            let rows = match checkpoint {
                Some(path) => {
                    let ckpt = io::load_checkpoint(&path)?;
                    let predictor = io::restore_predictor(&ckpt, &scene.template)?;
                    let models = pipeline::Models {
                        mlp: ckpt.mlp,
                        encoder: ckpt.encoder,
                        predictor,
                    };
                    let stacks = pipeline::build_stacks(&scene, &models.predictor, &config)?;
                    let meshes = pipeline::posed_meshes(&scene, &models.predictor)?;
                    let texture = models
                        .encoder
                        .encode(stacks[0].as_ref())
                        .map_err(|e| anyhow::anyhow!("{e}"))?;
                    let field = NeuralField { mlp: &models.mlp };
                    run_bench(&scene, &meshes[0], &texture, &field, &config)?
                }
                None => {
                    // Hand-set surface-wall field; with a flat-shaded scene
                    // both samplers reproduce ground truth almost exactly.
                    let color = match scene.params.shading {
                        shellnerf_cli::scene::Shading::Flat { color } => color,
                        _ => [0.5, 0.5, 0.5],
                    };
                    let field = OccupancyField { color, peak: 1e7 };
                    let texture = shellnerf_core::field::FeatureTexture::zeros(4, 4, config.feature.dim);
                    let mesh = shellnerf_core::charmodel::DeformedMesh::from_vertices(
                        scene.template.rest_vertices.clone(),
                        scene.template.topology.clone(),
                    );
                    run_bench(&scene, &mesh, &texture, &field, &config)?
                }
            };
            write_bench_csvs(&out, &rows)?;
            for row in &rows {
                println!(
                    "{}: {} evals/ray, psnr {:.2} dB, {:.1} ms/frame",
                    row.name, row.evals_per_ray, row.psnr, row.ms_per_frame
                );
            }
            Ok(())
        }
        Command::Eval { scene, renders, out } => {
            pipeline::eval_command(&scene, &renders, &out)?;
            println!("psnr table -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line interface: synthetic data generation, atlas building,
//! joint training, reconstruction, and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/format error.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use sadir_core::atlas::{fit_atlas, AtlasConfig, AtlasState};
use sadir_core::denoiser::DenoiserShape;
use sadir_core::error::Error;
use sadir_core::geodesic::ShootingConfig;
use sadir_core::grid::{GridSpec, ScalarVolume};
use sadir_core::io::{
    self, extract_slices, read_manifest, read_slice_stack, read_volume, write_slice_stack,
    write_vector_field, write_volume, DatasetManifest, RunConfig, SliceStack, Split,
};
use sadir_core::metric::FluidMetric;
use sadir_core::metrics::{self, MetricRecord};
use sadir_core::pipeline::{
    reconstruct, train, variational_reconstruct, ReconstructSettings, TrainConfig,
    TrainingSubject,
};
use sadir_core::synth::{synth_dataset, SynthConfig, TemplateKind};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sadir",
    about = "Shape-aware 3D reconstruction from sparse 2D slices",
    version
)]
struct Cli {
    /// Flat key=value config file (# comments allowed); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra config overrides, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground-truth deformations.
    Synth {
        /// Number of subjects.
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        /// Grid size: one integer (cubic) or nx,ny,nz.
        #[arg(long, default_value = "16")]
        grid: String,
    },
    /// Estimate the atlas and per-subject velocities on the train split.
    Atlas {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Joint training: atlas refinement alternating with denoiser epochs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Warm-start atlas checkpoint directory (defaults to fitting one).
        #[arg(long)]
        atlas: Option<PathBuf>,
    },
    /// Reconstruct one subject's volume from its sparse slices.
    Reconstruct {
        #[arg(long)]
        manifest: PathBuf,
        /// Subject index within the manifest.
        #[arg(long)]
        subject: usize,
        /// Atlas checkpoint directory (from `atlas` or `train`).
        #[arg(long)]
        atlas: PathBuf,
        /// Denoiser checkpoint (required for the diffusion method).
        #[arg(long)]
        denoiser: Option<PathBuf>,
        /// Reconstruction method: diffusion or variational.
        #[arg(long, default_value = "diffusion")]
        method: String,
        /// Also write the voxelwise |prediction - truth| map.
        #[arg(long)]
        error_map: bool,
    },
    /// Aggregate metrics of reconstructed volumes against ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding recon_###.svol files.
        #[arg(long)]
        pred_dir: PathBuf,
        /// Which split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Row label in the aggregate table.
        #[arg(long, default_value = "sadir")]
        label: String,
    },
    /// Extract a sparse slice stack from a volume file.
    Slices {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    init_thread_pool();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::InvalidParameter(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// SADIR_THREADS caps worker parallelism.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("SADIR_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.sets {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {kv:?}")))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn parse_grid(spec: &str) -> Result<GridSpec, Error> {
    let dims: Vec<usize> = spec
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Usage(format!("invalid grid dimension {p:?}")))
        })
        .collect::<Result<_, _>>()?;
    match dims.as_slice() {
        [n] => GridSpec::cubic(*n),
        [nx, ny, nz] => GridSpec::new(*nx, *ny, *nz),
        _ => Err(Error::Usage(format!(
            "grid must be N or NX,NY,NZ, got {spec:?}"
        ))),
    }
}

fn shoot_config(cfg: &RunConfig) -> ShootingConfig {
    ShootingConfig {
        steps: cfg.shoot_steps,
        ..ShootingConfig::default()
    }
}

fn atlas_config(cfg: &RunConfig) -> AtlasConfig {
    AtlasConfig {
        outer_iters: cfg.outer_iters,
        velocity_steps: cfg.velocity_steps,
        atlas_steps: cfg.atlas_steps,
        lr_velocity: cfg.lr_velocity,
        lr_atlas: cfg.lr_atlas,
        reg_weight: cfg.reg_weight,
    }
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: cfg.lambda,
        eta: cfg.eta,
        eps_loss_weight: cfg.eps_loss_weight,
        epochs: cfg.epochs,
        alternation_period: cfg.alternation_period,
        seed,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        optimizer: cfg.optimizer,
        shape: DenoiserShape {
            channels: cfg.channels,
            blocks: cfg.blocks,
            embed_dim: cfg.embed_dim,
            se_reduction: cfg.se_reduction,
        },
        band_fraction: cfg.band_fraction,
    }
}

/// Load a subject's volume and slice stack (extracting slices on the fly
/// when the manifest has none).
fn load_subject(
    base: &Path,
    manifest: &DatasetManifest,
    index: usize,
    cfg: &RunConfig,
) -> Result<(ScalarVolume<f64>, SliceStack<f64>), Error> {
    let entry = manifest.subjects.get(index).ok_or(Error::IndexOutOfRange {
        index,
        len: manifest.subjects.len(),
    })?;
    let volume = read_volume::<f64>(&base.join(&entry.volume))?;
    let slices = match &entry.slices {
        Some(p) => read_slice_stack::<f64>(&base.join(p))?,
        None => extract_slices(&volume, cfg.slice_axis, cfg.slice_count)?,
    };
    Ok((volume, slices))
}

fn manifest_base(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Synth { subjects, grid } => cmd_synth(&cli, &cfg, *subjects, grid),
        Command::Atlas { manifest } => cmd_atlas(&cli, &cfg, manifest),
        Command::Train { manifest, atlas } => cmd_train(&cli, &cfg, manifest, atlas.as_deref()),
        Command::Reconstruct {
            manifest,
            subject,
            atlas,
            denoiser,
            method,
            error_map,
        } => cmd_reconstruct(
            &cli,
            &cfg,
            manifest,
            *subject,
            atlas,
            denoiser.as_deref(),
            method,
            *error_map,
        ),
        Command::Eval {
            manifest,
            pred_dir,
            split,
            label,
        } => cmd_eval(&cli, &cfg, manifest, pred_dir, split, label),
        Command::Slices { volume, out } => cmd_slices(&cfg, volume, out),
    }
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig, subjects: usize, grid: &str) -> Result<(), Error> {
    let grid = parse_grid(grid)?;
    let metric = FluidMetric::<f64>::new(grid, cfg.alpha, cfg.gamma, cfg.power)?;
    let synth = SynthConfig {
        kind: TemplateKind::parse(&cfg.template)?,
        n_subjects: subjects,
        grid,
        deform_scale: cfg.deform_scale,
        slice_axis: cfg.slice_axis,
        slice_count: cfg.slice_count,
        seed: cli.seed,
    };
    let manifest = synth_dataset(&synth, &metric, &shoot_config(cfg), &cli.out_dir)?;
    println!(
        "wrote {} subjects ({} train / {} val / {} test) to {}",
        manifest.subjects.len(),
        manifest.subjects_in(Split::Train).count(),
        manifest.subjects_in(Split::Val).count(),
        manifest.subjects_in(Split::Test).count(),
        cli.out_dir.display()
    );
    Ok(())
}

fn load_train_split(
    manifest_path: &Path,
    cfg: &RunConfig,
) -> Result<(Vec<ScalarVolume<f64>>, Vec<SliceStack<f64>>), Error> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_base(manifest_path);
    let mut volumes = Vec::new();
    let mut stacks = Vec::new();
    let train: Vec<usize> = manifest.subjects_in(Split::Train).map(|(i, _)| i).collect();
    for i in train {
        let (v, s) = load_subject(&base, &manifest, i, cfg)?;
        volumes.push(v);
        stacks.push(s);
    }
    if volumes.is_empty() {
        return Err(Error::Usage(
            "the manifest has no subjects in the train split".into(),
        ));
    }
    Ok((volumes, stacks))
}

fn write_energy_log(path: &Path, state: &AtlasState<f64>) -> Result<(), Error> {
    let mut text = String::new();
    for e in &state.energy_trace {
        text.push_str(&format!("{e}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_atlas(cli: &Cli, cfg: &RunConfig, manifest_path: &Path) -> Result<(), Error> {
    let (volumes, _) = load_train_split(manifest_path, cfg)?;
    let grid = *volumes[0].grid();
    let metric = FluidMetric::<f64>::new(grid, cfg.alpha, cfg.gamma, cfg.power)?;
    let state = fit_atlas(
        &volumes,
        &metric,
        &atlas_config(cfg),
        &shoot_config(cfg),
        cfg.sigma,
    )?;
    let ckpt = cli.out_dir.join("atlas_ckpt");
    io::save_atlas_state(&ckpt, &state)?;
    write_energy_log(&cli.out_dir.join("energy.log"), &state)?;
    println!(
        "atlas over {} subjects: energy {:.6e} -> {:.6e} ({} iters), checkpoint {}",
        volumes.len(),
        state.energy_trace.first().copied().unwrap_or(f64::NAN),
        state.energy_trace.last().copied().unwrap_or(f64::NAN),
        state.energy_trace.len(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    cfg: &RunConfig,
    manifest_path: &Path,
    atlas_ckpt: Option<&Path>,
) -> Result<(), Error> {
    let (volumes, stacks) = load_train_split(manifest_path, cfg)?;
    let grid = *volumes[0].grid();
    let metric = FluidMetric::<f64>::new(grid, cfg.alpha, cfg.gamma, cfg.power)?;
    let shoot_cfg = shoot_config(cfg);

    let mut state = match atlas_ckpt {
        Some(dir) => io::load_atlas_state::<f64>(dir)?,
        None => fit_atlas(&volumes, &metric, &atlas_config(cfg), &shoot_cfg, cfg.sigma)?,
    };

    let subjects: Vec<TrainingSubject<f64>> = volumes
        .iter()
        .zip(&stacks)
        .map(|(v, s)| TrainingSubject {
            volume: v.clone(),
            slices: s.clone(),
        })
        .collect();

    let sched = cfg.noise_schedule::<f64>()?;
    // per-block refinement at a fraction of the warm-start length
    let refine_cfg = AtlasConfig {
        outer_iters: (cfg.outer_iters / 4).max(1),
        ..atlas_config(cfg)
    };
    let (params, report) = train(
        &subjects,
        &mut state,
        &sched,
        &metric,
        &refine_cfg,
        &shoot_cfg,
        &train_config(cfg, cli.seed),
    )?;

    let ckpt = cli.out_dir.join("atlas_ckpt");
    io::save_atlas_state(&ckpt, &state)?;
    io::save_denoiser(&cli.out_dir.join("denoiser.tns"), &params)?;
    let mut log = String::new();
    for line in &report.log {
        log.push_str(line);
        log.push('\n');
    }
    for (i, l) in report.epoch_losses.iter().enumerate() {
        log.push_str(&format!("epoch {i}: loss {l}\n"));
    }
    std::fs::write(cli.out_dir.join("train.log"), log)?;
    println!(
        "trained {} epochs over {} subjects (image term skipped {} times); loss {:.4} -> {:.4}",
        report.epoch_losses.len(),
        subjects.len(),
        report.skipped_samples,
        report.epoch_losses.first().copied().unwrap_or(f64::NAN),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_reconstruct(
    cli: &Cli,
    cfg: &RunConfig,
    manifest_path: &Path,
    subject: usize,
    atlas_ckpt: &Path,
    denoiser_ckpt: Option<&Path>,
    method: &str,
    error_map: bool,
) -> Result<(), Error> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_base(manifest_path);
    let (truth, slices) = load_subject(&base, &manifest, subject, cfg)?;
    let state = io::load_atlas_state::<f64>(atlas_ckpt)?;
    let grid = *state.atlas.grid();
    let metric = FluidMetric::<f64>::new(grid, cfg.alpha, cfg.gamma, cfg.power)?;
    let shoot_cfg = shoot_config(cfg);

    let mut result = match method {
        "diffusion" => {
            let ckpt = denoiser_ckpt.ok_or_else(|| {
                Error::Usage("--denoiser is required for the diffusion method".into())
            })?;
            let params = io::load_denoiser::<f64>(ckpt)?;
            let sched = cfg.noise_schedule::<f64>()?;
            let settings = ReconstructSettings {
                init_std: cfg.init_std,
                band_fraction: cfg.band_fraction,
                x0_clamp: (cfg.x0_clamp > 0.0).then_some(cfg.x0_clamp),
                sampler_noise: cfg.sampler_noise,
            };
            reconstruct(
                &params,
                &state.atlas,
                &slices,
                &sched,
                &metric,
                &shoot_cfg,
                &settings,
                cli.seed,
            )?
        }
        "variational" => variational_reconstruct(
            &state.atlas,
            &slices,
            &metric,
            &shoot_cfg,
            cfg.var_iters,
            cfg.var_lr,
            cfg.var_eta,
            cfg.sigma,
        )?,
        other => {
            return Err(Error::Usage(format!(
                "unknown method {other:?} (expected diffusion or variational)"
            )));
        }
    };

    let record = *result.evaluate(&truth, cfg.threshold)?;
    let tag = format!("{subject:03}");
    write_volume(&cli.out_dir.join(format!("recon_{tag}.svol")), &result.volume)?;
    write_vector_field(&cli.out_dir.join(format!("recon_{tag}_v0.svol")), &result.v0)?;
    let mut metrics_text = record.to_key_values();
    metrics_text.push_str(&format!(
        "jacobian_positive={}\nseed={}\n",
        result.jacobian_positive, result.seed
    ));
    std::fs::write(
        cli.out_dir.join(format!("recon_{tag}_metrics.txt")),
        metrics_text,
    )?;
    if error_map {
        let emap = metrics::error_map(&result.volume, &truth)?;
        write_volume(&cli.out_dir.join(format!("recon_{tag}_error.svol")), &emap)?;
    }
    println!(
        "subject {subject} ({method}): DSC {:.4}, Jaccard {:.4}, RHD95 {:.4}, MSE {:.6}, jac+ {}",
        record.dsc, record.jaccard, record.rhd95, record.mse, result.jacobian_positive
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &RunConfig,
    manifest_path: &Path,
    pred_dir: &Path,
    split: &str,
    label: &str,
) -> Result<(), Error> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_base(manifest_path);
    let split = Split::parse(split)?;
    let mut records = Vec::new();
    for (i, entry) in manifest.subjects_in(split) {
        let truth = read_volume::<f64>(&base.join(&entry.volume))?;
        let pred_path = pred_dir.join(format!("recon_{i:03}.svol"));
        if !pred_path.exists() {
            return Err(Error::Usage(format!(
                "missing reconstruction {} for subject {i}",
                pred_path.display()
            )));
        }
        let pred = read_volume::<f64>(&pred_path)?;
        let record = MetricRecord::compute(&pred, &truth, cfg.threshold)?;
        std::fs::write(
            cli.out_dir.join(format!("metrics_{i:03}.txt")),
            record.to_key_values(),
        )?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Usage(format!(
            "no subjects in the {split} split to evaluate"
        )));
    }
    let table = metrics::aggregate(&records)?;
    let rendered = table.format(label);
    std::fs::write(cli.out_dir.join("eval_table.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

fn cmd_slices(cfg: &RunConfig, volume: &Path, out: &Path) -> Result<(), Error> {
    let vol = read_volume::<f64>(volume)?;
    let stack = extract_slices(&vol, cfg.slice_axis, cfg.slice_count)?;
    write_slice_stack(out, &stack)?;
    println!(
        "extracted {} slices along {} at indices {:?}",
        stack.len(),
        stack.axis().name(),
        stack.indices()
    );
    Ok(())
}

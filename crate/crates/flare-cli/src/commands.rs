//! Subcommand implementations.
//!
//! Each command runs in two phases: a pre-flight that validates flags,
//! config and input files without touching the filesystem for writing, and
//! an execute phase that does the work. Pre-flight failures map to exit
//! code 2, execution failures to exit code 3, so no validation error ever
//! leaves a partially written output directory behind.

use crate::bench::{render_csv, time_mixer, BenchPoint, MixerKind};
use crate::config::ConfigBuilder;
use flare_core::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use flare_core::darcy::generate_darcy_dataset;
use flare_core::data::{
    compute_stats, meta_path, normalize, read_meta, read_pcf, write_meta, write_pcf, Dataset,
    DatasetMeta, GeneratorMeta, NormStats, SplitMeta,
};
use flare_core::model::{model_forward, mixer_qk_heads, ModelConfig};
use flare_core::spectral::{dense_spectrum_oracle, effective_rank, flare_spectrum};
use flare_core::train::{evaluate, fit, Precision, TrainConfig, TrainState};
use flare_core::{Error, Result, Scalar, Tensor};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TRAIN_FILE: &str = "train.pcf";
pub const TEST_FILE: &str = "test.pcf";

/// Error plus the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, CliError>;

fn validation<T>(r: Result<T>) -> CmdResult<T> {
    r.map_err(|e| CliError { code: 2, message: e.to_string() })
}

fn runtime<T>(r: Result<T>) -> CmdResult<T> {
    r.map_err(|e| CliError { code: 3, message: e.to_string() })
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError { code: 2, message: msg.into() }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(
    out: &Path,
    grid: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    force: bool,
) -> CmdResult {
    if grid < flare_core::darcy::MIN_GRID {
        return Err(invalid(format!(
            "grid {} is below the minimum of {}",
            grid,
            flare_core::darcy::MIN_GRID
        )));
    }
    if n_train == 0 || n_test == 0 {
        return Err(invalid("n-train and n-test must be >= 1"));
    }
    if out.exists() {
        let occupied = std::fs::read_dir(out)
            .map_err(|e| invalid(format!("cannot inspect {}: {e}", out.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(invalid(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }

    // Test samples continue the seed sequence so splits never overlap.
    let train = runtime(generate_darcy_dataset(grid, n_train, seed))?;
    let test = runtime(generate_darcy_dataset(grid, n_test, seed + n_train as u64))?;
    let stats = runtime(compute_stats(&train))?;

    runtime(
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)),
    )?;
    let train_path = out.join(TRAIN_FILE);
    runtime(write_pcf(&train_path, &train))?;
    runtime(write_pcf(&out.join(TEST_FILE), &test))?;
    let meta = DatasetMeta {
        format_version: 1,
        norm: Some(stats),
        generator: Some(GeneratorMeta {
            kind: "darcy".into(),
            grid_size: grid,
            base_seed: seed,
        }),
        split: Some(SplitMeta {
            train_file: TRAIN_FILE.into(),
            test_file: TEST_FILE.into(),
            n_train,
            n_test,
        }),
    };
    runtime(write_meta(&meta_path(&train_path), &meta))?;
    eprintln!(
        "wrote {} train and {} test samples of {} points to {}",
        n_train,
        n_test,
        grid * grid,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub stop_after: Option<usize>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    // Pre-flight: resolve the config, read the data, load any resume
    // checkpoint, and cross-check dimensions. Nothing is written yet.
    let mut builder = ConfigBuilder::new();
    if let Some(path) = &args.config {
        validation(builder.apply_file(path))?;
    }
    validation(builder.apply_env())?;
    for assignment in &args.overrides {
        validation(builder.apply_override(assignment))?;
    }
    if let Some(seed) = args.seed {
        validation(builder.apply_seed(seed))?;
    }
    let cfg = validation(builder.finish())?;

    let train_path = args.data.join(TRAIN_FILE);
    let train_raw = validation(read_pcf(&train_path))?;
    let test_raw = validation(read_pcf(&args.data.join(TEST_FILE)))?;
    validation(check_dims(&cfg.model, &train_raw, "train"))?;
    validation(check_dims(&cfg.model, &test_raw, "test"))?;

    let resume = match &args.resume {
        Some(path) => {
            let ckpt = validation(checkpoint_load(path))?;
            if ckpt.model != cfg.model {
                return Err(invalid(
                    "resume checkpoint was trained with a different model config",
                ));
            }
            if let Some(t) = &ckpt.train {
                if *t != cfg.train {
                    return Err(invalid(
                        "resume checkpoint was trained with a different train config; \
                         resumed runs must keep it identical to stay reproducible",
                    ));
                }
            }
            Some(ckpt)
        }
        None => None,
    };

    // Normalization statistics come from the checkpoint when resuming, the
    // dataset sidecar otherwise, and are recomputed as a last resort.
    let stats: NormStats = if let Some(c) = resume.as_ref().and_then(|c| c.norm.clone()) {
        c
    } else if let Ok(meta) = read_meta(&meta_path(&train_path)) {
        match meta.norm {
            Some(n) => n,
            None => validation(compute_stats(&train_raw))?,
        }
    } else {
        validation(compute_stats(&train_raw))?
    };
    let (train_set, _) = validation(normalize(&train_raw, Some(&stats)))?;
    let (test_set, _) = validation(normalize(&test_raw, Some(&stats)))?;

    // Execute.
    runtime(std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e)))?;
    let resolved = serde_json::to_string_pretty(&builder.resolved()).expect("resolved serializes");
    let resolved_path = args.out.join("resolved.json");
    runtime(
        std::fs::write(&resolved_path, resolved + "\n").map_err(|e| Error::io(&resolved_path, e)),
    )?;

    match cfg.train.precision {
        Precision::Single => run_training::<f32>(args, &cfg.model, &cfg.train, resume, &stats, &train_set, &test_set),
        Precision::Double => run_training::<f64>(args, &cfg.model, &cfg.train, resume, &stats, &train_set, &test_set),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training<T: Scalar>(
    args: &TrainArgs,
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    stats: &NormStats,
    train_set: &Dataset,
    test_set: &Dataset,
) -> CmdResult {
    let mut state: TrainState<T> = match resume {
        Some(ckpt) => ckpt.into_state(),
        None => runtime(TrainState::new(model))?,
    };
    let end = args.stop_after.unwrap_or(train_cfg.epochs).min(train_cfg.epochs);

    let mut csv = String::from("epoch,lr,train_rel_l2,test_rel_l2,seconds\n");
    // One epoch per call so progress streams; the schedule and shuffling
    // depend only on absolute epoch indices, so this matches a single call.
    while state.epochs_done < end {
        let target = state.epochs_done + 1;
        let rows = runtime(fit(&mut state, model, train_cfg, train_set, test_set, Some(target)))?;
        for row in &rows {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  train {:.6}  test {:.6}  ({:.2}s)",
                row.epoch, row.lr, row.train_rel_l2, row.test_rel_l2, row.seconds
            );
            let _ = writeln!(
                csv,
                "{},{},{},{},{:.3}",
                row.epoch, row.lr, row.train_rel_l2, row.test_rel_l2, row.seconds
            );
        }
    }

    let csv_path = args.out.join("run.csv");
    runtime(std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e)))?;
    let ckpt = Checkpoint::from_state(&state, model, Some(train_cfg), Some(stats));
    runtime(checkpoint_save(&args.out.join("final.flck"), &ckpt))?;
    eprintln!(
        "finished at epoch {}; wrote run.csv, final.flck, resolved.json to {}",
        state.epochs_done,
        args.out.display()
    );
    Ok(())
}

fn check_dims(model: &ModelConfig, set: &Dataset, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} split is empty")));
    }
    for (i, s) in set.samples.iter().enumerate() {
        if s.features.cols() != model.d_in || s.labels.cols() != model.d_out {
            return Err(Error::InvalidConfig(format!(
                "{what} sample {i} has {} feature / {} label dims; model wants {} / {}",
                s.features.cols(),
                s.labels.cols(),
                model.d_in,
                model.d_out
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn split_file(data: &Path, split: &str) -> CmdResult<PathBuf> {
    match split {
        "train" => Ok(data.join(TRAIN_FILE)),
        "test" => Ok(data.join(TEST_FILE)),
        other => Err(invalid(format!("split must be \"train\" or \"test\", got {other:?}"))),
    }
}

/// Loads a checkpoint and a split, cross-checking feature dimensions.
fn load_model_and_split(
    checkpoint: &Path,
    data: &Path,
    split: &str,
) -> CmdResult<(Checkpoint, Dataset)> {
    let ckpt = validation(checkpoint_load(checkpoint))?;
    let ds = validation(read_pcf(&split_file(data, split)?))?;
    validation(check_dims(&ckpt.model, &ds, split))?;
    Ok((ckpt, ds))
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, split: &str) -> CmdResult {
    let (ckpt, raw) = load_model_and_split(checkpoint, data, split)?;

    // Features are normalized exactly as in training; predictions are mapped
    // back so the metric is computed in raw label space.
    let params = ckpt.params.cast::<f64>();
    let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = match &ckpt.norm {
        Some(stats) => {
            let (normed, _) = runtime(normalize(&raw, Some(stats)))?;
            normed
                .samples
                .into_iter()
                .zip(&raw.samples)
                .map(|(n, r)| (n.features, r.labels.clone()))
                .collect()
        }
        None => raw.samples.iter().map(|s| (s.features.clone(), s.labels.clone())).collect(),
    };
    let predict = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let pred = model_forward(x, &ckpt.model, &params)?;
        Ok(match &ckpt.norm {
            Some(stats) => flare_core::data::denormalize_labels(&pred, stats),
            None => pred,
        })
    };
    let (mean, per_sample) = runtime(evaluate(predict, &pairs))?;
    let report = serde_json::json!({
        "mean_rel_l2": mean,
        "per_sample": per_sample,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

// ---------------------------------------------------------------------------
// spectra
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_spectra(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    sample: usize,
    block: usize,
    tau: f64,
    check: bool,
    out: Option<&Path>,
) -> CmdResult {
    let (ckpt, raw) = load_model_and_split(checkpoint, data, split)?;
    if sample >= raw.len() {
        return Err(invalid(format!(
            "sample {sample} out of range; split has {} samples",
            raw.len()
        )));
    }
    if block >= ckpt.model.blocks {
        return Err(invalid(format!(
            "block {block} out of range; model has {} blocks",
            ckpt.model.blocks
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("tau must be in (0, 1), got {tau}")));
    }

    let features = match &ckpt.norm {
        Some(stats) => {
            let (normed, _) = runtime(normalize(&raw, Some(stats)))?;
            normed.samples[sample].features.clone()
        }
        None => raw.samples[sample].features.clone(),
    };
    let params = ckpt.params.cast::<f64>();
    let heads = runtime(mixer_qk_heads(&features, &ckpt.model, &params, block))?;

    let mut csv = String::from("head,index,eigenvalue\n");
    for (h, (q, k)) in heads.iter().enumerate() {
        let spec = runtime(flare_spectrum(q, k))?;
        let rank = runtime(effective_rank(&spec.eigenvalues, tau))?;
        eprintln!(
            "head {h}: effective rank {rank} of {} (tau {tau:e})",
            spec.eigenvalues.len()
        );
        for (i, lambda) in spec.eigenvalues.iter().enumerate() {
            let _ = writeln!(csv, "{h},{i},{lambda}");
        }
        if check {
            let dense = runtime(dense_spectrum_oracle(q, k))?;
            let top = spec.eigenvalues[0].max(1e-300);
            let worst = spec
                .eigenvalues
                .iter()
                .zip(&dense.eigenvalues)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            if worst > 1e-8 * top {
                return Err(CliError {
                    code: 3,
                    message: format!(
                        "head {h}: low-rank eigenvalues deviate from the dense oracle by {worst:.3e}"
                    ),
                });
            }
            eprintln!("head {h}: dense-oracle check passed (max delta {worst:.3e})");
        }
    }

    match out {
        Some(path) => runtime(std::fs::write(path, csv).map_err(|e| Error::io(path, e)))?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    mixer: &str,
    n_list: &[usize],
    m: usize,
    channels: usize,
    heads: usize,
    reps: usize,
    threads: usize,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let kind = validation(MixerKind::parse(mixer))?;
    if n_list.is_empty() {
        return Err(invalid("--n needs at least one token count"));
    }
    if n_list.contains(&0) || m == 0 || reps == 0 || threads == 0 {
        return Err(invalid("token counts, latents, reps and threads must be >= 1"));
    }
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(invalid(format!("channels {channels} not divisible by heads {heads}")));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError { code: 3, message: format!("thread pool: {e}") })?;
    let points = pool.install(|| {
        n_list
            .iter()
            .map(|&n| {
                let p = time_mixer(kind, n, m, channels, heads, reps, seed)?;
                eprintln!(
                    "n {:>7}  {}  {:.6}s ± {:.6}s",
                    p.n, p.mixer, p.seconds_mean, p.seconds_std
                );
                Ok(p)
            })
            .collect::<Result<Vec<BenchPoint>>>()
    });
    let points = runtime(points)?;

    let csv = render_csv(&points);
    match out {
        Some(path) => runtime(std::fs::write(path, csv).map_err(|e| Error::io(path, e)))?,
        None => print!("{csv}"),
    }
    Ok(())
}

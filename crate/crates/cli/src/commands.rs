//! Subcommand implementations. Each one is a function of the resolved
//! configuration and an output directory, so runs can be scripted from
//! tests as well as from the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use manta_core::data::{load_episode, load_split, window, write_corpus, Episode, Split};
use manta_core::diffusion::{
    decode_labels, encode_labels, sample_many, training_step, DiffusionSchedule, TrainExample,
};
use manta_core::eval::{bench_csv, bench_scaling, evaluate_protocol, loglog_slope, BenchRow, EpisodeResult, EvalReport};
use manta_core::gradcheck::{check_generator, ParamCheck};
use manta_core::network::{build_condition, load_checkpoint, save_checkpoint, Denoiser, Generator, GeneratorConfig};
use manta_core::optim::{adam_update, AdamState};
use manta_core::{Error, Rng};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.tsv";
pub const RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.mntaw";
pub const LOSS_CSV: &str = "loss.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const BENCH_CSV: &str = "bench.csv";
pub const SAMPLES_DIR: &str = "samples";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join(RESOLVED), &cfg.render())
}

/// Generate the corpus described by the `data` section into `out`.
pub fn run_gendata(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let spec = cfg.grammar()?;
    prepare_dir(out, cfg)?;
    let d = &cfg.data;
    let counts = [(Split::Train, d.n_train), (Split::Val, d.n_val), (Split::Test, d.n_test)];
    let manifest = write_corpus(out, &spec, counts, cfg.seed)?;
    log::info!("wrote {} episodes to {}", d.n_train + d.n_val + d.n_test, out.display());
    Ok(manifest)
}

fn load_corpus(cfg: &RunConfig, split: Split, limit: usize) -> Result<Vec<Episode>, CliError> {
    let manifest = cfg.data.dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(CliError::Io(format!("no corpus manifest at {}", manifest.display())));
    }
    let mut eps = load_split(&manifest, split)?;
    if limit > 0 {
        eps.truncate(limit);
    }
    if eps.is_empty() {
        return Err(CliError::Config(format!("{} lists no {split} episodes", manifest.display())));
    }
    Ok(eps)
}

fn check_corpus(eps: &[Episode], g: &GeneratorConfig) -> Result<(), CliError> {
    for e in eps {
        if e.n_classes != g.n_classes || e.features.cols() != g.feat_dim {
            return Err(CliError::Config(format!(
                "episode {} has {} classes and {} features; model expects {} and {}",
                e.id,
                e.n_classes,
                e.features.cols(),
                g.n_classes,
                g.feat_dim
            )));
        }
    }
    Ok(())
}

fn schedule(cfg: &RunConfig) -> Result<DiffusionSchedule, CliError> {
    DiffusionSchedule::new(cfg.diffusion.steps, cfg.diffusion.schedule)
        .map_err(|e| CliError::Config(format!("diffusion: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
}

/// A training example: the episode observed up to a random ratio from
/// `train.alphas`, with targets over the next `train.beta` of its frames.
fn example(e: &Episode, cfg: &RunConfig, rng: &mut Rng) -> manta_core::Result<Option<TrainExample>> {
    let alphas = &cfg.train.alphas;
    let alpha = alphas[rng.int_inclusive(0, alphas.len() - 1)];
    let beta = cfg.train.beta.min(1.0 - alpha);
    let Ok(w) = window(e, alpha, beta) else {
        return Ok(None);
    };
    Ok(Some(TrainExample {
        y0: encode_labels(&w.target_labels, e.n_classes, cfg.diffusion.label_scale)?,
        x: build_condition(&w.observed, w.future_len)?,
    }))
}

fn nan_dump(dir: &Path, epoch: usize, batch: &[&Episode], gen: &Generator, last: Option<f64>) -> String {
    let mut s = format!("non-finite training loss\nepoch = {epoch}\nlast_finite_epoch_loss = {last:?}\nbatch =");
    for e in batch {
        let _ = write!(s, " {}", e.id);
    }
    s.push('\n');
    for (name, t) in gen.store().iter() {
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = writeln!(s, "{name} norm = {norm:e}");
    }
    let path = dir.join("nan_dump.txt");
    let _ = fs::write(&path, &s);
    path.display().to_string()
}

/// Train a generator on the corpus in `data.dir`, writing the checkpoint,
/// per-epoch losses and resolved config into `run_dir`.
pub fn run_train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainSummary, CliError> {
    let gcfg = cfg.generator()?;
    let sched = schedule(cfg)?;
    if cfg.train.batch_size == 0 || cfg.train.alphas.is_empty() {
        return Err(CliError::Config("train.batch_size and train.alphas must be nonempty".into()));
    }
    let eps = load_corpus(cfg, Split::Train, cfg.train.max_episodes)?;
    check_corpus(&eps, &gcfg)?;
    prepare_dir(run_dir, cfg)?;

    let root = Rng::new(cfg.seed);
    let mut gen = Generator::new(gcfg, &mut root.split(0))?.with_kernel(cfg.model.kernel);
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let mut csv = String::from("epoch,mean_loss,wall_time_s\n");
    let mut losses = Vec::with_capacity(cfg.train.epochs);
    let start = Instant::now();
    let mut skipped = 0usize;
    for epoch in 0..cfg.train.epochs {
        let epoch_start = Instant::now();
        let mut rng = root.split(1).split(epoch as u64);
        let mut order: Vec<usize> = (0..eps.len()).collect();
        rng.shuffle(&mut order);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.train.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match example(&eps[i], cfg, &mut rng)? {
                    Some(ex) => batch.push(ex),
                    None => skipped += 1,
                }
            }
            if batch.is_empty() {
                continue;
            }
            let (loss, grads) = match training_step(&gen, &batch, &sched, &mut rng) {
                Err(Error::NonFinite(what)) => {
                    let eps_in: Vec<&Episode> = chunk.iter().map(|&i| &eps[i]).collect();
                    let dump = nan_dump(run_dir, epoch, &eps_in, &gen, losses.last().copied());
                    return Err(CliError::Numeric(format!("{what} in epoch {epoch}; diagnostics in {dump}")));
                }
                other => other?,
            };
            adam_update(gen.store_mut().tensors_mut(), &grads, &mut state, &adam)?;
            if gen.store().tensors().iter().any(|t| !t.is_finite()) {
                let eps_in: Vec<&Episode> = chunk.iter().map(|&i| &eps[i]).collect();
                let dump = nan_dump(run_dir, epoch, &eps_in, &gen, losses.last().copied());
                return Err(CliError::Numeric(format!("non-finite parameters in epoch {epoch}; diagnostics in {dump}")));
            }
            sum += loss;
            n += 1;
        }
        let mean = sum / n.max(1) as f64;
        let secs = epoch_start.elapsed().as_secs_f64();
        let _ = writeln!(csv, "{},{mean:.8e},{secs:.3}", epoch + 1);
        log::info!("epoch {}/{}: loss {mean:.5} ({secs:.1}s)", epoch + 1, cfg.train.epochs);
        losses.push(mean);
    }
    if skipped > 0 {
        log::warn!("{skipped} training draws were too short for their observation ratio");
    }
    write_file(&run_dir.join(LOSS_CSV), &csv)?;
    let checkpoint = run_dir.join(CHECKPOINT);
    save_checkpoint(&checkpoint, &gen)?;
    Ok(TrainSummary { epoch_losses: losses, wall_time_s: start.elapsed().as_secs_f64(), checkpoint })
}

/// Load the run's checkpoint and check it against the configured model.
pub fn load_model(cfg: &RunConfig, run_dir: &Path) -> Result<Generator, CliError> {
    let want = cfg.generator()?;
    let path = run_dir.join(CHECKPOINT);
    let gen = load_checkpoint(&path).map_err(|e| match e {
        Error::Io(io) => io_err(&path, io),
        other => CliError::from(other),
    })?;
    let have = gen.config();
    let mut diffs = Vec::new();
    let mut cmp = |key: &str, c: String, k: String| {
        if c != k {
            diffs.push(format!("{key}: config {c}, checkpoint {k}"));
        }
    };
    cmp("model.n_blocks", want.n_blocks.to_string(), have.n_blocks.to_string());
    cmp("model.model_dim", want.model_dim.to_string(), have.model_dim.to_string());
    cmp("model.state_size", want.state_size.to_string(), have.state_size.to_string());
    cmp("model.expand", want.expand.to_string(), have.expand.to_string());
    cmp("model.bidirectional_blocks", want.bidirectional_blocks.to_string(), have.bidirectional_blocks.to_string());
    cmp("model.share_branch_weights", want.share_branch_weights.to_string(), have.share_branch_weights.to_string());
    cmp("model.selective", want.selective.to_string(), have.selective.to_string());
    cmp("model.zoh", want.zoh.to_string(), have.zoh.to_string());
    cmp("data n_classes", want.n_classes.to_string(), have.n_classes.to_string());
    cmp("data.feature_dim", want.feat_dim.to_string(), have.feat_dim.to_string());
    cmp("diffusion.steps", want.max_timestep.to_string(), have.max_timestep.to_string());
    if !diffs.is_empty() {
        return Err(CliError::Config(format!("checkpoint does not match config: {}", diffs.join("; "))));
    }
    Ok(gen.with_kernel(cfg.model.kernel))
}

fn split_of(cfg: &RunConfig) -> Result<Split, CliError> {
    cfg.eval.split.parse().map_err(|e: String| CliError::Config(format!("eval.split: {e}")))
}

fn sample_file_name(id: &str, alpha: f64, beta: f64) -> String {
    format!("{id}_a{alpha}_b{beta}.txt")
}

fn write_samples(dir: &Path, name: &str, samples: &[Vec<usize>]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut s = String::new();
    for seq in samples {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_file(&dir.join(name), &s)
}

/// Evaluate the run's checkpoint over the configured grid.
pub fn run_eval(cfg: &RunConfig, run_dir: &Path) -> Result<(EvalReport, Vec<EpisodeResult>), CliError> {
    let gen = load_model(cfg, run_dir)?;
    let eps = load_corpus(cfg, split_of(cfg)?, cfg.eval.max_episodes)?;
    check_corpus(&eps, gen.config())?;
    run_eval_with(&gen, cfg, &eps, run_dir)
}

/// Evaluate any denoiser on `episodes`, writing `eval.csv` (and sample dumps
/// when enabled) into `run_dir`.
pub fn run_eval_with<M: Denoiser + Sync + ?Sized>(
    model: &M,
    cfg: &RunConfig,
    episodes: &[Episode],
    run_dir: &Path,
) -> Result<(EvalReport, Vec<EpisodeResult>), CliError> {
    let sched = schedule(cfg)?;
    fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let (report, results) = evaluate_protocol(model, episodes, &sched, &cfg.eval_options())?;
    write_file(&run_dir.join(EVAL_CSV), &report.to_csv())?;
    if cfg.eval.dump_samples {
        let dir = run_dir.join(SAMPLES_DIR);
        for r in &results {
            write_samples(&dir, &sample_file_name(&r.id, r.alpha, r.beta), &r.samples)?;
        }
    }
    for r in &report.rows {
        if r.skipped > 0 {
            log::warn!("α={}, β={}: skipped {} short episodes", r.alpha, r.beta, r.skipped);
        }
    }
    Ok((report, results))
}

/// Draw `sample.samples` futures for the episode at `sample.episode`.
pub fn run_sample(cfg: &RunConfig, run_dir: &Path) -> Result<PathBuf, CliError> {
    let gen = load_model(cfg, run_dir)?;
    let sched = schedule(cfg)?;
    let s = &cfg.sample;
    if s.episode.as_os_str().is_empty() {
        return Err(CliError::Config("sample.episode must name an episode file".into()));
    }
    let e = load_episode(&s.episode).map_err(|err| match err {
        Error::Io(io) => io_err(&s.episode, io),
        other => CliError::from(other),
    })?;
    check_corpus(std::slice::from_ref(&e), gen.config())?;
    let w = window(&e, s.alpha, s.beta).map_err(|err| CliError::Config(format!("sample: {err}")))?;
    let x = build_condition(&w.observed, w.future_len)?;
    let bound = if cfg.diffusion.clamp { cfg.diffusion.label_scale } else { f64::INFINITY };
    let ys = sample_many(&gen, &x, s.samples, cfg.eval.ddim_steps, &sched, bound, cfg.seed)?;
    let labels: Vec<Vec<usize>> = ys.iter().map(decode_labels).collect();
    let name = sample_file_name(&e.id, s.alpha, s.beta);
    let dir = run_dir.join(SAMPLES_DIR);
    write_samples(&dir, &name, &labels)?;
    Ok(dir.join(name))
}

/// Time generator forward passes over `bench.lengths` for each kernel. Uses
/// the run's checkpoint when there is one, a seeded initialization otherwise.
pub fn run_bench(cfg: &RunConfig, run_dir: &Path) -> Result<Vec<BenchRow>, CliError> {
    let gen = if run_dir.join(CHECKPOINT).exists() {
        load_model(cfg, run_dir)?
    } else {
        Generator::new(cfg.generator()?, &mut Rng::new(cfg.seed))?
    };
    prepare_dir(run_dir, cfg)?;
    let mut rows = Vec::new();
    for &kernel in &cfg.bench.kernels {
        let r = bench_scaling(&gen, &cfg.bench.lengths, kernel, cfg.bench.repeats)?;
        if r.len() >= 2 {
            log::info!("{kernel}: log-log slope {:.3}", loglog_slope(&r)?);
        }
        rows.extend(r);
    }
    write_file(&run_dir.join(BENCH_CSV), &bench_csv(&rows))?;
    Ok(rows)
}

/// Finite-difference check of every parameter of a small generator. Fails
/// with a numeric error if any relative error exceeds the tolerance.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<Vec<ParamCheck>, CliError> {
    let g = &cfg.gradcheck;
    let base = cfg.generator()?;
    let gcfg = GeneratorConfig {
        n_blocks: g.n_blocks,
        bidirectional_blocks: g.bidirectional_blocks,
        model_dim: g.model_dim,
        state_size: g.state_size,
        ..base
    };
    gcfg.validate().map_err(|e| CliError::Config(format!("gradcheck: {e}")))?;
    let gen = Generator::new(gcfg, &mut Rng::new(cfg.seed))?.with_kernel(cfg.model.kernel);
    let t = cfg.diffusion.steps / 2;
    let checks = check_generator(&gen, g.frames, t, g.step, cfg.seed ^ 0x9e37)?;
    let worst = checks.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err));
    for c in &checks {
        log::info!("{:<40} rel {:.2e}", c.name, c.max_rel_err);
    }
    if !(worst <= g.tolerance) {
        let bad: Vec<&str> = checks.iter().filter(|c| !(c.max_rel_err <= g.tolerance)).map(|c| c.name.as_str()).collect();
        return Err(CliError::Numeric(format!(
            "gradient check failed: worst relative error {worst:.2e} > {:.0e} in {}",
            g.tolerance,
            bad.join(", ")
        )));
    }
    Ok(checks)
}

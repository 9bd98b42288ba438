//! Mean-over-classes accuracy, its Mean/Top-1 aggregation over sampled
//! futures, the (α, β) evaluation grid and the sequence-length benchmark.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{window, Episode};
use crate::diffusion::{decode_labels, encode_labels, sample_many, DiffusionSchedule};
use crate::error::{param_err, shape_err, Error, Result};
use crate::network::{build_condition, Denoiser, Generator};
use crate::rng::Rng;
use crate::ssm::ScanKernel;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-class correct/total frame counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassTally {
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
}

impl ClassTally {
    pub fn new(n_classes: usize) -> Self {
        Self { correct: vec![0; n_classes], total: vec![0; n_classes] }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize], range: Range<usize>) -> Result<()> {
        check_range(pred, gt, &range)?;
        for i in range {
            let g = gt[i];
            if g >= self.total.len() {
                return Err(Error::InvalidLabel { label: g, n_classes: self.total.len() });
            }
            self.total[g] += 1;
            self.correct[g] += u64::from(pred[i] == g);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassTally) {
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }

    /// Unweighted mean of per-class accuracy over classes that occur.
    pub fn moc(&self) -> f64 {
        let (sum, n) = self
            .correct
            .iter()
            .zip(&self.total)
            .filter(|(_, t)| **t > 0)
            .fold((0.0, 0usize), |(s, n), (c, t)| (s + *c as f64 / *t as f64, n + 1));
        sum / n as f64
    }
}

fn check_range(pred: &[usize], gt: &[usize], range: &Range<usize>) -> Result<()> {
    if pred.len() != gt.len() {
        return shape_err(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len()));
    }
    if range.start >= range.end || range.end > gt.len() {
        return param_err(format!("frame range {range:?} is empty or exceeds {} frames", gt.len()));
    }
    Ok(())
}

/// MoC of `pred` against `gt` on frames `range`.
pub fn moc(pred: &[usize], gt: &[usize], n_classes: usize, range: Range<usize>) -> Result<f64> {
    let mut tally = ClassTally::new(n_classes);
    tally.add(pred, gt, range)?;
    Ok(tally.moc())
}

fn sample_mocs(samples: &[Vec<usize>], gt: &[usize], n_classes: usize, range: &Range<usize>) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return param_err("at least one sample is required");
    }
    samples.iter().map(|s| moc(s, gt, n_classes, range.clone())).collect()
}

pub fn mean_moc(samples: &[Vec<usize>], gt: &[usize], n_classes: usize, range: Range<usize>) -> Result<f64> {
    let m = sample_mocs(samples, gt, n_classes, &range)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

pub fn top1_moc(samples: &[Vec<usize>], gt: &[usize], n_classes: usize, range: Range<usize>) -> Result<f64> {
    Ok(sample_mocs(samples, gt, n_classes, &range)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Index of the best-matching sample; the first one wins ties.
pub fn best_sample(samples: &[Vec<usize>], gt: &[usize], n_classes: usize, range: Range<usize>) -> Result<usize> {
    let m = sample_mocs(samples, gt, n_classes, &range)?;
    Ok((0..m.len()).fold(0, |best, i| if m[i] > m[best] { i } else { best }))
}

/// Framewise accuracy on `range`.
pub fn accuracy(pred: &[usize], gt: &[usize], range: Range<usize>) -> Result<f64> {
    check_range(pred, gt, &range)?;
    let n = range.len();
    Ok(range.filter(|&i| pred[i] == gt[i]).count() as f64 / n as f64)
}

/// How dataset-level Top-1 MoC is formed from the selected samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Top1Mode {
    /// Mean over episodes of the selected sample's MoC.
    #[default]
    PerEpisode,
    /// Pool per-class counts of the selected samples, then take the class mean.
    Pooled,
}

impl std::str::FromStr for Top1Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_episode" => Ok(Self::PerEpisode),
            "pooled" => Ok(Self::Pooled),
            other => Err(format!("unknown top-1 mode `{other}`")),
        }
    }
}

impl std::fmt::Display for Top1Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerEpisode => "per_episode",
            Self::Pooled => "pooled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub samples: usize,
    pub ddim_steps: usize,
    pub label_scale: f64,
    /// Clamp each clean estimate to `[−label_scale, label_scale]` while sampling.
    pub clamp: bool,
    pub seed: u64,
    /// Score all `P + F` frames instead of the future only.
    pub include_past: bool,
    pub top1: Top1Mode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alphas: vec![0.2, 0.3],
            betas: vec![0.1, 0.2, 0.3, 0.5],
            samples: 25,
            ddim_steps: 50,
            label_scale: 1.0,
            clamp: true,
            seed: 0,
            include_past: false,
            top1: Top1Mode::PerEpisode,
        }
    }
}

/// Decoded samples for one episode in one (α, β) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub id: String,
    pub alpha: f64,
    pub beta: f64,
    pub observed_len: usize,
    pub future_len: usize,
    /// Labels of the first `P + F` frames.
    pub gt: Vec<usize>,
    /// `S` sequences of `P + F` labels.
    pub samples: Vec<Vec<usize>>,
    pub wall_time_s: f64,
}

impl EpisodeResult {
    fn scored_range(&self, include_past: bool) -> Range<usize> {
        let end = self.observed_len + self.future_len;
        if include_past {
            0..end
        } else {
            self.observed_len..end
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub alpha: f64,
    pub beta: f64,
    pub mean_moc: f64,
    pub top1_moc: f64,
    pub past_acc: f64,
    pub n_episodes: usize,
    /// Episodes too short for this cell.
    pub skipped: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, alpha: f64, beta: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.alpha == alpha && r.beta == beta)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,mean_moc,top1_moc,past_acc,n_episodes,wall_time_s\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{},{:.3}",
                r.alpha, r.beta, r.mean_moc, r.top1_moc, r.past_acc, r.n_episodes, r.wall_time_s
            );
        }
        s
    }
}

/// Aggregate one cell from its episode results, using the first `samples`
/// draws of each episode (all of them if `None`).
pub fn summarize_cell(
    (alpha, beta): (f64, f64),
    results: &[&EpisodeResult],
    skipped: usize,
    n_classes: usize,
    samples: Option<usize>,
    opts: &EvalOptions,
) -> Result<EvalRow> {
    if results.is_empty() {
        return Ok(EvalRow {
            alpha,
            beta,
            mean_moc: f64::NAN,
            top1_moc: f64::NAN,
            past_acc: f64::NAN,
            n_episodes: 0,
            skipped,
            wall_time_s: 0.0,
        });
    }
    let mut mean_sum = 0.0;
    let mut top1_sum = 0.0;
    let mut past_sum = 0.0;
    let mut pooled = ClassTally::new(n_classes);
    for r in results {
        let pool = &r.samples[..samples.unwrap_or(r.samples.len()).min(r.samples.len())];
        let range = r.scored_range(opts.include_past);
        let mocs = sample_mocs(pool, &r.gt, n_classes, &range)?;
        mean_sum += mocs.iter().sum::<f64>() / mocs.len() as f64;
        let best = (0..mocs.len()).fold(0, |b, i| if mocs[i] > mocs[b] { i } else { b });
        top1_sum += mocs[best];
        pooled.add(&pool[best], &r.gt, range)?;
        let past: f64 = pool.iter().map(|s| accuracy(s, &r.gt, 0..r.observed_len)).sum::<Result<f64>>()?;
        past_sum += past / pool.len() as f64;
    }
    let n = results.len() as f64;
    Ok(EvalRow {
        alpha,
        beta,
        mean_moc: mean_sum / n,
        top1_moc: match opts.top1 {
            Top1Mode::PerEpisode => top1_sum / n,
            Top1Mode::Pooled => pooled.moc(),
        },
        past_acc: past_sum / n,
        n_episodes: results.len(),
        skipped,
        wall_time_s: results.iter().map(|r| r.wall_time_s).sum(),
    })
}

/// Sampled episodes of one (α, β) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResults {
    pub alpha: f64,
    pub beta: f64,
    pub results: Vec<EpisodeResult>,
    /// Episodes too short for the cell.
    pub skipped: usize,
}

/// Sample every episode of every (α, β) cell, α-major.
pub fn sample_protocol<M: Denoiser + Sync + ?Sized>(
    model: &M,
    episodes: &[Episode],
    sched: &DiffusionSchedule,
    opts: &EvalOptions,
) -> Result<Vec<CellResults>> {
    if episodes.is_empty() {
        return param_err("evaluation corpus is empty");
    }
    if opts.samples < 1 {
        return param_err("at least one sample per episode is required");
    }
    if let Some(e) = episodes.iter().find(|e| e.n_classes != model.n_classes()) {
        return param_err(format!(
            "episode {} has {} classes, model predicts {}",
            e.id,
            e.n_classes,
            model.n_classes()
        ));
    }
    let root = Rng::new(opts.seed);
    let mut cells = Vec::new();
    for &alpha in &opts.alphas {
        for &beta in &opts.betas {
            let cell_rng = root.split(cells.len() as u64);
            let results: Vec<Option<EpisodeResult>> = episodes
                .par_iter()
                .enumerate()
                .map(|(i, e)| {
                    let w = match window(e, alpha, beta) {
                        Ok(w) if w.future_len > 0 => w,
                        _ => {
                            log::warn!("episode {} ({} frames) is too short for α={alpha}, β={beta}", e.id, e.len());
                            return Ok(None);
                        }
                    };
                    let start = Instant::now();
                    let x = build_condition(&w.observed, w.future_len)?;
                    let seed = cell_rng.split(i as u64).next_u64();
                    let bound = if opts.clamp { opts.label_scale } else { f64::INFINITY };
                    let ys = sample_many(model, &x, opts.samples, opts.ddim_steps, sched, bound, seed)?;
                    Ok(Some(EpisodeResult {
                        id: e.id.clone(),
                        alpha,
                        beta,
                        observed_len: w.observed_len,
                        future_len: w.future_len,
                        gt: w.target_labels,
                        samples: ys.iter().map(decode_labels).collect(),
                        wall_time_s: start.elapsed().as_secs_f64(),
                    }))
                })
                .collect::<Result<_>>()?;
            let skipped = results.iter().filter(|r| r.is_none()).count();
            cells.push(CellResults { alpha, beta, results: results.into_iter().flatten().collect(), skipped });
        }
    }
    Ok(cells)
}

/// Run the (α, β) grid and aggregate it into a report. The per-episode
/// samples are returned alongside for dumping.
pub fn evaluate_protocol<M: Denoiser + Sync + ?Sized>(
    model: &M,
    episodes: &[Episode],
    sched: &DiffusionSchedule,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    let cells = sample_protocol(model, episodes, sched, opts)?;
    let mut report = EvalReport::default();
    let mut all = Vec::new();
    for c in cells {
        let refs: Vec<&EpisodeResult> = c.results.iter().collect();
        report.rows.push(summarize_cell((c.alpha, c.beta), &refs, c.skipped, model.n_classes(), None, opts)?);
        all.extend(c.results);
    }
    Ok((report, all))
}

/// A denoiser that knows the corpus: it recognises an episode by its first
/// observed feature row and returns its encoded ground truth. Used to check
/// the evaluation plumbing end to end.
#[derive(Clone, Debug)]
pub struct LabelOracle {
    pub episodes: Vec<Episode>,
    pub label_scale: f64,
}

impl Denoiser for LabelOracle {
    fn n_classes(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.n_classes)
    }

    fn denoise(&self, _y_t: &Tensor, _t: usize, x: &Tensor) -> Result<Tensor> {
        let nd = x.cols();
        let e = self
            .episodes
            .iter()
            .find(|e| e.features.cols() == nd && e.features.data()[..nd] == x.data()[..nd])
            .ok_or_else(|| Error::InvalidParameter("condition matches no known episode".into()))?;
        if x.rows() > e.len() {
            return shape_err(format!("condition has {} frames, episode {} has {}", x.rows(), e.id, e.len()));
        }
        encode_labels(&e.labels[..x.rows()], e.n_classes, self.label_scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub kernel: ScanKernel,
    pub median_s: f64,
    pub frames_per_s: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("T,kernel,median_s,frames_per_s\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6e},{:.1}", r.t, r.kernel, r.median_s, r.frames_per_s);
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of one generator forward pass per sequence length,
/// after one untimed warmup pass.
pub fn bench_scaling(model: &Generator, lengths: &[usize], kernel: ScanKernel, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats < 1 {
        return param_err("repeats must be at least 1");
    }
    let cfg = model.config();
    let mut rng = Rng::new(0xbe7c);
    let mut rows = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let y = Tensor::randn(&[t, cfg.n_classes], &mut rng, 0.0, 1.0)?;
        let x = Tensor::randn(&[t, cfg.feat_dim], &mut rng, 0.0, 1.0)?;
        let step = cfg.max_timestep / 2;
        let run = || -> Result<f64> {
            let start = Instant::now();
            let mut tape = Tape::no_grad().with_kernel(kernel);
            let bound = model.store().bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &y, step, &x)?;
            std::hint::black_box(tape.value(out));
            Ok(start.elapsed().as_secs_f64())
        };
        run()?;
        let times = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
        let m = median(times);
        rows.push(BenchRow { t, kernel, median_s: m, frames_per_s: t as f64 / m });
    }
    Ok(rows)
}

/// Least-squares slope of `ln median_s` against `ln T`.
pub fn loglog_slope(rows: &[BenchRow]) -> Result<f64> {
    if rows.len() < 2 {
        return param_err("a slope needs at least two lengths");
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| ((r.t as f64).ln(), r.median_s.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

//! Flat `section.key = value` run configuration.
//!
//! Every key has a default; files and `--set` overrides may only name known
//! keys. The resolved configuration renders back to the same text format, so
//! a run directory can be replayed from its `config.resolved`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use manta_core::data::GrammarSpec;
use manta_core::diffusion::ScheduleKind;
use manta_core::eval::{EvalOptions, Top1Mode};
use manta_core::network::GeneratorConfig;
use manta_core::optim::AdamConfig;
use manta_core::ssm::{ScanKernel, ZohForm};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GrammarKind {
    #[default]
    Branching,
    Recipes,
}

impl FromStr for GrammarKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "branching" => Ok(Self::Branching),
            "recipes" => Ok(Self::Recipes),
            other => Err(format!("unknown grammar `{other}`")),
        }
    }
}

impl fmt::Display for GrammarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Branching => "branching",
            Self::Recipes => "recipes",
        })
    }
}

/// Parsing and rendering of one config value.
trait Value: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, String, ScanKernel, ZohForm, ScheduleKind, Top1Mode, GrammarKind);

impl Value for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($($key:literal => $($field:ident).+ : $t:ty = $default:expr;)*) => {
        /// Every tunable of a run. Field paths mirror the config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            pub seed: u64,
            pub data: DataSection,
            pub model: ModelSection,
            pub diffusion: DiffusionSection,
            pub train: TrainSection,
            pub eval: EvalSection,
            pub sample: SampleSection,
            pub bench: BenchSection,
            pub gradcheck: GradcheckSection,
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set_value(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => self.$($field).+ = <$t as Value>::parse_value(value)?,)*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// One `key = value` line per key, in declaration order.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str($key);
                    out.push_str(" = ");
                    out.push_str(&Value::render(&self.$($field).+));
                    out.push('\n');
                )*
                out
            }
        }

        impl Default for RunConfig {
            fn default() -> Self {
                let mut c = RunConfig {
                    seed: 0,
                    data: DataSection::default(),
                    model: ModelSection::default(),
                    diffusion: DiffusionSection::default(),
                    train: TrainSection::default(),
                    eval: EvalSection::default(),
                    sample: SampleSection::default(),
                    bench: BenchSection::default(),
                    gradcheck: GradcheckSection::default(),
                };
                $( c.$($field).+ = $default; )*
                c
            }
        }
    };
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSection {
    pub dir: PathBuf,
    pub grammar: GrammarKind,
    pub n_classes: usize,
    pub recipes: usize,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub state_size: usize,
    pub expand: usize,
    pub bidirectional_blocks: usize,
    pub share_branch_weights: bool,
    pub selective: bool,
    pub zoh: ZohForm,
    pub kernel: ScanKernel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffusionSection {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub label_scale: f64,
    pub clamp: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alphas: Vec<f64>,
    pub beta: f64,
    /// Use only the first `max_episodes` training episodes; 0 means all.
    pub max_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSection {
    pub split: String,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub samples: usize,
    pub ddim_steps: usize,
    pub include_past: bool,
    pub top1: Top1Mode,
    pub max_episodes: usize,
    pub dump_samples: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSection {
    pub episode: PathBuf,
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub kernels: Vec<ScanKernel>,
    pub repeats: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckSection {
    pub n_blocks: usize,
    pub bidirectional_blocks: usize,
    pub model_dim: usize,
    pub state_size: usize,
    pub frames: usize,
    pub step: f64,
    pub tolerance: f64,
}

run_config! {
    "seed" => seed: u64 = 0;
    "data.dir" => data.dir: PathBuf = PathBuf::from("data");
    "data.grammar" => data.grammar: GrammarKind = GrammarKind::Branching;
    "data.n_classes" => data.n_classes: usize = 8;
    "data.recipes" => data.recipes: usize = 3;
    "data.feature_dim" => data.feature_dim: usize = 16;
    "data.feature_noise" => data.feature_noise: f64 = 0.5;
    "data.min_frames" => data.min_frames: usize = 200;
    "data.max_frames" => data.max_frames: usize = 600;
    "data.min_duration" => data.min_duration: usize = 30;
    "data.max_duration" => data.max_duration: usize = 110;
    "data.n_train" => data.n_train: usize = 200;
    "data.n_val" => data.n_val: usize = 20;
    "data.n_test" => data.n_test: usize = 50;
    "model.n_blocks" => model.n_blocks: usize = 15;
    "model.model_dim" => model.model_dim: usize = 64;
    "model.state_size" => model.state_size: usize = 16;
    "model.expand" => model.expand: usize = 2;
    "model.bidirectional_blocks" => model.bidirectional_blocks: usize = 15;
    "model.share_branch_weights" => model.share_branch_weights: bool = false;
    "model.selective" => model.selective: bool = true;
    "model.zoh" => model.zoh: ZohForm = ZohForm::Exact;
    "model.kernel" => model.kernel: ScanKernel = ScanKernel::Sequential;
    "diffusion.steps" => diffusion.steps: usize = 1000;
    "diffusion.schedule" => diffusion.schedule: ScheduleKind = ScheduleKind::Cosine;
    "diffusion.label_scale" => diffusion.label_scale: f64 = 1.0;
    "diffusion.clamp" => diffusion.clamp: bool = true;
    "train.epochs" => train.epochs: usize = 30;
    "train.lr" => train.lr: f64 = 5e-4;
    "train.batch_size" => train.batch_size: usize = 4;
    "train.alphas" => train.alphas: Vec<f64> = vec![0.2, 0.3];
    "train.beta" => train.beta: f64 = 0.5;
    "train.max_episodes" => train.max_episodes: usize = 0;
    "eval.split" => eval.split: String = "test".into();
    "eval.alphas" => eval.alphas: Vec<f64> = vec![0.2, 0.3];
    "eval.betas" => eval.betas: Vec<f64> = vec![0.1, 0.2, 0.3, 0.5];
    "eval.samples" => eval.samples: usize = 25;
    "eval.ddim_steps" => eval.ddim_steps: usize = 50;
    "eval.include_past" => eval.include_past: bool = false;
    "eval.top1" => eval.top1: Top1Mode = Top1Mode::PerEpisode;
    "eval.max_episodes" => eval.max_episodes: usize = 0;
    "eval.dump_samples" => eval.dump_samples: bool = true;
    "sample.episode" => sample.episode: PathBuf = PathBuf::new();
    "sample.alpha" => sample.alpha: f64 = 0.3;
    "sample.beta" => sample.beta: f64 = 0.5;
    "sample.samples" => sample.samples: usize = 25;
    "bench.lengths" => bench.lengths: Vec<usize> = vec![1024, 2048, 4096, 8192, 16384, 32768];
    "bench.kernels" => bench.kernels: Vec<ScanKernel> = vec![ScanKernel::Sequential, ScanKernel::Parallel];
    "bench.repeats" => bench.repeats: usize = 5;
    "gradcheck.n_blocks" => gradcheck.n_blocks: usize = 2;
    "gradcheck.bidirectional_blocks" => gradcheck.bidirectional_blocks: usize = 1;
    "gradcheck.model_dim" => gradcheck.model_dim: usize = 16;
    "gradcheck.state_size" => gradcheck.state_size: usize = 4;
    "gradcheck.frames" => gradcheck.frames: usize = 6;
    "gradcheck.step" => gradcheck.step: f64 = 1e-5;
    "gradcheck.tolerance" => gradcheck.tolerance: f64 = 1e-3;
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        self.set_value(key.trim(), value.trim()).map_err(|e| config_err(format!("{}: {e}", key.trim())))
    }

    /// Apply `key=value` text: one assignment per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k, v).map_err(|e| config_err(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Apply `k=v` pairs as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{}` is not key=value", p.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn grammar(&self) -> Result<GrammarSpec, CliError> {
        let d = &self.data;
        let mut spec = match d.grammar {
            GrammarKind::Branching => GrammarSpec::branching(d.n_classes, d.feature_dim),
            GrammarKind::Recipes => GrammarSpec::recipes(d.recipes, d.feature_dim),
        }
        .map_err(|e| config_err(format!("data: {e}")))?;
        spec.feature_noise = d.feature_noise;
        spec.n_frames = (d.min_frames, d.max_frames);
        spec.duration = vec![(d.min_duration, d.max_duration); spec.n_states()];
        spec.validate().map_err(|e| config_err(format!("data: {e}")))?;
        Ok(spec)
    }

    pub fn generator(&self) -> Result<GeneratorConfig, CliError> {
        let spec = self.grammar()?;
        let m = &self.model;
        let cfg = GeneratorConfig {
            n_blocks: m.n_blocks,
            model_dim: m.model_dim,
            state_size: m.state_size,
            expand: m.expand,
            n_classes: spec.n_classes,
            feat_dim: spec.feature_dim,
            bidirectional_blocks: m.bidirectional_blocks,
            share_branch_weights: m.share_branch_weights,
            selective: m.selective,
            max_timestep: self.diffusion.steps,
            zoh: m.zoh,
        };
        cfg.validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.train.lr, ..AdamConfig::default() }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let e = &self.eval;
        EvalOptions {
            alphas: e.alphas.clone(),
            betas: e.betas.clone(),
            samples: e.samples,
            ddim_steps: e.ddim_steps,
            label_scale: self.diffusion.label_scale,
            clamp: self.diffusion.clamp,
            seed: self.seed,
            include_past: e.include_past,
            top1: e.top1,
        }
    }
}

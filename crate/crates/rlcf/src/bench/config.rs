//! Experiment configuration: a human-readable `key = value` file, every key
//! overridable by a command-line flag of the same name. `seed` is mandatory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::gen::{BenchVariant, BenchmarkSpec};
use crate::captioner::CaptionPretrainConfig;
use crate::error::{Error, Result};
use crate::models::{EncoderArch, PretrainConfig};
use crate::pipelines::{MomentumConfig, Objective, TTAConfig, Task, TuneMode};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub mode: TuneMode,
    /// Objectives compared on the identical sample stream.
    pub objectives: Vec<Objective>,
    pub steps: usize,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub n_views: usize,
    pub rho: f64,
    pub beam_width: usize,
    pub kd_temperature: f64,
    pub k1_passthrough: bool,
    pub momentum_enabled: bool,
    pub momentum_m: f64,
    pub momentum_interval: usize,

    // benchmark
    pub classes: usize,
    pub d_in: usize,
    pub attrs_per_class: usize,
    pub shift: f64,
    pub variant: BenchVariant,
    pub sample_noise: f64,
    pub student_pairs: usize,
    pub scorer_pairs: usize,
    pub scorer_shift_pairs: usize,
    pub source_eval_samples: usize,
    pub target_samples: usize,
    pub retrieval_items: usize,
    pub caption_samples: usize,

    // pretraining
    pub d_tok: usize,
    pub d_emb: usize,
    pub scorer_d_emb: usize,
    pub prompt_len: usize,
    pub logit_scale: f64,
    pub epochs: usize,
    pub pretrain_lr: f64,
    pub temperature: f64,
    pub n_reward_models: usize,
    pub reward_weights: Vec<f64>,
    pub cap_d_dec: usize,
    pub cap_max_len: usize,
    pub cap_epochs: usize,
    pub cap_lr: f64,

    // sweep grids (empty → use the scalar field)
    pub sweep_seed: Vec<u64>,
    pub sweep_k: Vec<usize>,
    pub sweep_steps: Vec<usize>,
    pub sweep_lr: Vec<f64>,
    pub sweep_objective: Vec<Objective>,

    // io
    pub out_dir: PathBuf,
    pub bench_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub pretrain_if_missing: bool,
    pub charts: bool,
}

impl RunConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            seed,
            task: Task::Classify,
            mode: TuneMode::Prompt,
            objectives: Vec::new(),
            steps: 3,
            k: 3,
            lr: 7e-3,
            weight_decay: 5e-4,
            n_views: 64,
            rho: 0.1,
            beam_width: 5,
            kd_temperature: 2.0,
            k1_passthrough: true,
            momentum_enabled: false,
            momentum_m: 0.9998,
            momentum_interval: 64,
            classes: 20,
            d_in: 32,
            attrs_per_class: 3,
            shift: 0.6,
            variant: BenchVariant::Standard,
            sample_noise: 0.55,
            student_pairs: 40,
            scorer_pairs: 80,
            scorer_shift_pairs: 24,
            source_eval_samples: 1000,
            target_samples: 2000,
            retrieval_items: 60,
            caption_samples: 120,
            d_tok: 24,
            d_emb: 16,
            scorer_d_emb: 48,
            prompt_len: 4,
            logit_scale: 100.0,
            epochs: 30,
            pretrain_lr: 3e-3,
            temperature: 0.1,
            n_reward_models: 1,
            reward_weights: vec![10.0, 5.0, 3.0],
            cap_d_dec: 24,
            cap_max_len: 8,
            cap_epochs: 60,
            cap_lr: 5e-3,
            sweep_seed: Vec::new(),
            sweep_k: Vec::new(),
            sweep_steps: Vec::new(),
            sweep_lr: Vec::new(),
            sweep_objective: Vec::new(),
            out_dir: PathBuf::from("runs/out"),
            bench_dir: PathBuf::from("runs/bench"),
            ckpt_dir: PathBuf::from("runs/ckpt"),
            pretrain_if_missing: false,
            charts: false,
        }
    }

    /// Parse a config file (if given), then apply `key=value` overrides in
    /// order. `seed` must come from one of the two.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!(
                        "{}:{}: expected `key = value`, got `{raw}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        pairs.extend(overrides.iter().cloned());

        let seed = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "seed")
            .ok_or_else(|| Error::config("`seed` is mandatory (config file or --seed)"))?
            .1
            .parse::<u64>()
            .map_err(|_| Error::config("`seed` must be an unsigned integer"))?;

        let mut cfg = Self::defaults(seed);
        // per-task defaults first, so explicit keys always win
        if let Some((_, task)) = pairs.iter().rev().find(|(k, _)| k == "task") {
            cfg.apply_task_defaults(Task::parse(task)?);
        }
        for (k, v) in &pairs {
            cfg.apply(k, v)?;
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Adopt the per-task adaptation defaults (steps, K, learning rate,
    /// weight decay, views, tuning mode).
    pub fn apply_task_defaults(&mut self, task: Task) {
        let base = match task {
            Task::Classify => TTAConfig::classify_prompt(self.seed),
            Task::RetrieveT2i => TTAConfig::retrieve_t2i(self.seed),
            Task::RetrieveI2t => TTAConfig::retrieve_i2t(self.seed),
            Task::Caption => TTAConfig::caption(self.seed),
        };
        self.task = base.task;
        self.mode = base.mode;
        self.steps = base.steps;
        self.k = base.k;
        self.lr = base.lr;
        self.weight_decay = base.weight_decay;
        self.n_views = base.n_views;
        self.beam_width = base.beam_width;
    }

    /// Set one field by config-file key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>()
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
        }
        fn pb(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::config(format!("bad boolean `{v}` for `{key}`"))),
            }
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|_| Error::config(format!("bad list entry `{s}` for `{key}`")))
                })
                .collect()
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "task" => self.task = Task::parse(value)?,
            "mode" => self.mode = TuneMode::parse(value)?,
            "objectives" => {
                self.objectives = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Objective::parse)
                    .collect::<Result<_>>()?
            }
            "steps" => self.steps = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "n_views" => self.n_views = p(key, value)?,
            "rho" => self.rho = p(key, value)?,
            "beam_width" => self.beam_width = p(key, value)?,
            "kd_temperature" => self.kd_temperature = p(key, value)?,
            "k1_passthrough" => self.k1_passthrough = pb(key, value)?,
            "momentum_enabled" => self.momentum_enabled = pb(key, value)?,
            "momentum_m" => self.momentum_m = p(key, value)?,
            "momentum_interval" => self.momentum_interval = p(key, value)?,
            "classes" => self.classes = p(key, value)?,
            "d_in" => self.d_in = p(key, value)?,
            "attrs_per_class" => self.attrs_per_class = p(key, value)?,
            "shift" => self.shift = p(key, value)?,
            "variant" => self.variant = BenchVariant::parse(value)?,
            "sample_noise" => self.sample_noise = p(key, value)?,
            "student_pairs" => self.student_pairs = p(key, value)?,
            "scorer_pairs" => self.scorer_pairs = p(key, value)?,
            "scorer_shift_pairs" => self.scorer_shift_pairs = p(key, value)?,
            "source_eval_samples" => self.source_eval_samples = p(key, value)?,
            "target_samples" => self.target_samples = p(key, value)?,
            "retrieval_items" => self.retrieval_items = p(key, value)?,
            "caption_samples" => self.caption_samples = p(key, value)?,
            "d_tok" => self.d_tok = p(key, value)?,
            "d_emb" => self.d_emb = p(key, value)?,
            "scorer_d_emb" => self.scorer_d_emb = p(key, value)?,
            "prompt_len" => self.prompt_len = p(key, value)?,
            "logit_scale" => self.logit_scale = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "pretrain_lr" => self.pretrain_lr = p(key, value)?,
            "temperature" => self.temperature = p(key, value)?,
            "n_reward_models" => self.n_reward_models = p(key, value)?,
            "reward_weights" => self.reward_weights = list(key, value)?,
            "cap_d_dec" => self.cap_d_dec = p(key, value)?,
            "cap_max_len" => self.cap_max_len = p(key, value)?,
            "cap_epochs" => self.cap_epochs = p(key, value)?,
            "cap_lr" => self.cap_lr = p(key, value)?,
            "sweep_seed" => self.sweep_seed = list(key, value)?,
            "sweep_k" => self.sweep_k = list(key, value)?,
            "sweep_steps" => self.sweep_steps = list(key, value)?,
            "sweep_lr" => self.sweep_lr = list(key, value)?,
            "sweep_objective" => {
                self.sweep_objective = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(Objective::parse)
                    .collect::<Result<_>>()?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "bench_dir" => self.bench_dir = PathBuf::from(value),
            "ckpt_dir" => self.ckpt_dir = PathBuf::from(value),
            "pretrain_if_missing" => self.pretrain_if_missing = pb(key, value)?,
            "charts" => self.charts = pb(key, value)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn finalize(&mut self) -> Result<()> {
        if self.objectives.is_empty() {
            self.objectives = match self.task {
                Task::Classify => vec![
                    Objective::None,
                    Objective::Rlcf,
                    Objective::EntropyMin,
                    Objective::PseudoLabel,
                    Objective::Kd,
                ],
                Task::RetrieveT2i | Task::RetrieveI2t => vec![
                    Objective::None,
                    Objective::Rlcf,
                    Objective::EntropyMin,
                    Objective::PseudoLabel,
                    Objective::Kd,
                ],
                Task::Caption => vec![Objective::None, Objective::Rlcf],
            };
        }
        if self.task == Task::Caption {
            if let Some(bad) = self
                .objectives
                .iter()
                .find(|o| !matches!(o, Objective::None | Objective::Rlcf))
            {
                return Err(Error::config(format!(
                    "objective `{}` is not defined for captioning",
                    bad.name()
                )));
            }
        }
        if self.n_reward_models == 0 || self.n_reward_models > self.reward_weights.len() {
            return Err(Error::config(format!(
                "n_reward_models must be in 1..={}",
                self.reward_weights.len()
            )));
        }
        self.tta_config(Objective::Rlcf).validate()
    }

    pub fn tta_config(&self, objective: Objective) -> TTAConfig {
        TTAConfig {
            task: self.task,
            mode: self.mode,
            objective,
            steps: self.steps,
            k: self.k,
            lr: self.lr,
            weight_decay: self.weight_decay,
            n_views: self.n_views,
            rho: self.rho,
            beam_width: self.beam_width,
            kd_temperature: self.kd_temperature,
            k1_passthrough: self.k1_passthrough,
            momentum: MomentumConfig {
                enabled: self.momentum_enabled,
                m: self.momentum_m,
                interval: self.momentum_interval,
            },
            seed: self.seed,
        }
    }

    pub fn bench_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            classes: self.classes,
            d_in: self.d_in,
            d_tok: self.d_tok,
            attrs_per_class: self.attrs_per_class,
            shift: self.shift,
            variant: self.variant,
            sample_noise: self.sample_noise,
            student_pairs_per_class: self.student_pairs,
            scorer_pairs_per_class: self.scorer_pairs,
            scorer_shift_pairs_per_class: self.scorer_shift_pairs,
            source_eval_samples: self.source_eval_samples,
            target_samples: self.target_samples,
            retrieval_items: self.retrieval_items,
            caption_samples: self.caption_samples,
            seed: self.seed,
        }
    }

    pub fn student_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            arch: EncoderArch {
                d_in: self.d_in,
                d_tok: self.d_tok,
                d_emb: self.d_emb,
                prompt_len: self.prompt_len,
                logit_scale: self.logit_scale,
            },
            classes: self.classes,
            pairs_per_class: self.student_pairs,
            epochs: self.epochs,
            lr: self.pretrain_lr,
            temperature: self.temperature,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn scorer_pretrain(&self, index: usize) -> PretrainConfig {
        PretrainConfig {
            arch: EncoderArch {
                d_in: self.d_in,
                d_tok: self.d_tok,
                // each extra ensemble member is a bit narrower
                d_emb: (self.scorer_d_emb.saturating_sub(8 * index)).max(self.d_emb),
                prompt_len: self.prompt_len,
                logit_scale: self.logit_scale,
            },
            classes: self.classes,
            pairs_per_class: self.scorer_pairs,
            epochs: self.epochs,
            lr: self.pretrain_lr,
            temperature: self.temperature,
            seed: self.seed.wrapping_add(1000 + index as u64),
        }
    }

    pub fn caption_pretrain(&self) -> CaptionPretrainConfig {
        CaptionPretrainConfig {
            d_emb: self.d_emb,
            d_dec: self.cap_d_dec,
            n_words: 0, // filled from the benchmark's attribute vocabulary
            max_len: self.cap_max_len,
            epochs: self.cap_epochs,
            lr: self.cap_lr,
            seed: self.seed.wrapping_add(2000),
        }
    }

    pub fn bench_path(&self) -> PathBuf {
        self.bench_dir.join(format!(
            "bench_c{}_d{}_s{:02}_{}_seed{}.json",
            self.classes,
            self.d_in,
            (self.shift * 100.0).round() as u32,
            self.variant.name(),
            self.seed
        ))
    }

    pub fn student_ckpt(&self) -> PathBuf {
        self.ckpt_dir.join(format!("student_seed{}", self.seed))
    }

    pub fn scorer_ckpt(&self, index: usize) -> PathBuf {
        self.ckpt_dir
            .join(format!("scorer{}_{}_seed{}", index, self.variant.name(), self.seed))
    }

    pub fn captioner_ckpt(&self) -> PathBuf {
        self.ckpt_dir.join(format!("captioner_seed{}", self.seed))
    }
}

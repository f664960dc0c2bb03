//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lts_core::didl::{DefectConfig, TrainConfig};
use lts_core::hist::{BIN_WIDTH, NUM_BINS};
use lts_core::sbr::{RefineConfig, SbrTrainConfig, ScaleSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub bins: usize,
    pub delta: f64,
    pub tau: f64,
    pub seed: u64,
    pub threshold: f64,

    pub didl_lr: f64,
    pub didl_batch: usize,
    pub didl_first_epochs: usize,
    pub didl_later_epochs: usize,
    pub didl_iterations: usize,
    pub didl_init_frac: f64,
    pub didl_balance_ratio: f64,

    pub sbr_lr: f64,
    pub sbr_epochs: usize,
    pub sbr_weight_bg: f64,
    pub sbr_weight_fg: f64,
    /// Per scale: `(scale, batch size, patches per image)`.
    pub sbr_scales: Vec<(usize, usize, usize)>,
    pub sbr_l: usize,
    pub sbr_noise_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bins: NUM_BINS,
            delta: BIN_WIDTH,
            tau: 0.7,
            seed: 0,
            threshold: 0.5,
            didl_lr: 1e-4,
            didl_batch: 3000,
            didl_first_epochs: 120,
            didl_later_epochs: 30,
            didl_iterations: 4,
            didl_init_frac: 0.1,
            didl_balance_ratio: 5.0,
            sbr_lr: 1e-5,
            sbr_epochs: 10,
            sbr_weight_bg: 0.2,
            sbr_weight_fg: 0.8,
            sbr_scales: vec![(16, 8192, 1024), (32, 2048, 256), (64, 512, 64)],
            sbr_l: 32,
            sbr_noise_rate: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("{key}: cannot parse {value:?}: {e}"))
}

fn scale_slot(scales: &mut [(usize, usize, usize)], s: usize) -> Result<&mut (usize, usize, usize)> {
    scales
        .iter_mut()
        .find(|e| e.0 == s)
        .with_context(|| format!("scale {s} is not among sbr.scales"))
}

impl RunConfig {
    /// Assigns one key. Values are range-checked by [`RunConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "bins" => self.bins = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "didl.lr" => self.didl_lr = parse(key, value)?,
            "didl.batch" => self.didl_batch = parse(key, value)?,
            "didl.first_epochs" => self.didl_first_epochs = parse(key, value)?,
            "didl.later_epochs" => self.didl_later_epochs = parse(key, value)?,
            "didl.iterations" => self.didl_iterations = parse(key, value)?,
            "didl.init_frac" => self.didl_init_frac = parse(key, value)?,
            "didl.balance_ratio" => self.didl_balance_ratio = parse(key, value)?,
            "sbr.lr" => self.sbr_lr = parse(key, value)?,
            "sbr.epochs" => self.sbr_epochs = parse(key, value)?,
            "sbr.weight_bg" => self.sbr_weight_bg = parse(key, value)?,
            "sbr.weight_fg" => self.sbr_weight_fg = parse(key, value)?,
            "sbr.l" => self.sbr_l = parse(key, value)?,
            "sbr.noise_rate" => self.sbr_noise_rate = parse(key, value)?,
            "sbr.scales" | "sbr.batches" | "sbr.patches" => {
                let list: Vec<usize> = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?;
                if key == "sbr.scales" {
                    let old = std::mem::take(&mut self.sbr_scales);
                    self.sbr_scales = list
                        .into_iter()
                        .map(|s| old.iter().copied().find(|e| e.0 == s).unwrap_or((s, 512, 64)))
                        .collect();
                } else {
                    if list.len() != self.sbr_scales.len() {
                        bail!("{key}: expected {} values, one per scale", self.sbr_scales.len());
                    }
                    for (e, v) in self.sbr_scales.iter_mut().zip(list) {
                        if key == "sbr.batches" {
                            e.1 = v;
                        } else {
                            e.2 = v;
                        }
                    }
                }
            }
            _ => {
                if let Some(s) = key.strip_prefix("sbr.batch.") {
                    scale_slot(&mut self.sbr_scales, parse(key, s)?)?.1 = parse(key, value)?;
                } else if let Some(s) = key.strip_prefix("sbr.patches.") {
                    scale_slot(&mut self.sbr_scales, parse(key, s)?)?.2 = parse(key, value)?;
                } else {
                    bail!("unknown config key {key:?}");
                }
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be > 0");
            }
            Ok(())
        };
        if self.bins != NUM_BINS {
            bail!("bins is fixed at {NUM_BINS}");
        }
        if (self.delta - BIN_WIDTH).abs() > 1e-12 {
            bail!("delta is fixed at {BIN_WIDTH}");
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            bail!("tau must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!("threshold must lie in [0, 1]");
        }
        positive("didl.lr", self.didl_lr)?;
        positive("sbr.lr", self.sbr_lr)?;
        positive("sbr.weight_bg", self.sbr_weight_bg)?;
        positive("sbr.weight_fg", self.sbr_weight_fg)?;
        positive("didl.balance_ratio", self.didl_balance_ratio)?;
        if self.didl_batch == 0 {
            bail!("didl.batch must be ≥ 1");
        }
        if self.didl_iterations == 0 {
            bail!("didl.iterations must be ≥ 1");
        }
        if !(self.didl_init_frac > 0.0 && self.didl_init_frac <= 1.0) {
            bail!("didl.init_frac must lie in (0, 1]");
        }
        if self.sbr_l == 0 {
            bail!("sbr.l must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.sbr_noise_rate) {
            bail!("sbr.noise_rate must lie in [0, 1]");
        }
        if self.sbr_scales.is_empty() {
            bail!("sbr.scales must not be empty");
        }
        for &(s, b, _) in &self.sbr_scales {
            if s < 8 || s % 8 != 0 {
                bail!("sbr scale {s} must be a multiple of 8");
            }
            if b == 0 {
                bail!("sbr batch size for scale {s} must be ≥ 1");
            }
        }
        Ok(())
    }

    pub fn defect_config(&self) -> DefectConfig {
        DefectConfig {
            initial_fraction: self.didl_init_frac,
            iterations: self.didl_iterations,
            first_epochs: self.didl_first_epochs,
            later_epochs: self.didl_later_epochs,
            balance_ratio: self.didl_balance_ratio,
            train: TrainConfig {
                learning_rate: self.didl_lr,
                batch_size: self.didl_batch,
            },
            seed: self.seed,
        }
    }

    pub fn sbr_train_config(&self) -> SbrTrainConfig {
        // Largest patches first, as in the default schedule.
        let mut schedule: Vec<ScaleSchedule> = self
            .sbr_scales
            .iter()
            .map(|&(scale, batch_size, patches_per_image)| ScaleSchedule {
                scale,
                patches_per_image,
                batch_size,
            })
            .collect();
        schedule.sort_by(|a, b| b.scale.cmp(&a.scale));
        SbrTrainConfig {
            learning_rate: self.sbr_lr,
            epochs: self.sbr_epochs,
            class_weights: [self.sbr_weight_bg, self.sbr_weight_fg],
            schedule,
            seed: self.seed,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        let mut scales: Vec<usize> = self.sbr_scales.iter().map(|e| e.0).collect();
        scales.sort_unstable();
        RefineConfig {
            layers: self.sbr_l,
            scales,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    /// Resolved values, one `key = value` per line, in a form
    /// [`RunConfig::merge_text`] accepts.
    pub fn to_text(&self) -> String {
        let join = |f: fn(&(usize, usize, usize)) -> usize| {
            self.sbr_scales.iter().map(|e| f(e).to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("bins", self.bins.to_string());
        line("delta", self.delta.to_string());
        line("tau", self.tau.to_string());
        line("seed", self.seed.to_string());
        line("threshold", self.threshold.to_string());
        line("didl.lr", self.didl_lr.to_string());
        line("didl.batch", self.didl_batch.to_string());
        line("didl.first_epochs", self.didl_first_epochs.to_string());
        line("didl.later_epochs", self.didl_later_epochs.to_string());
        line("didl.iterations", self.didl_iterations.to_string());
        line("didl.init_frac", self.didl_init_frac.to_string());
        line("didl.balance_ratio", self.didl_balance_ratio.to_string());
        line("sbr.lr", self.sbr_lr.to_string());
        line("sbr.epochs", self.sbr_epochs.to_string());
        line("sbr.weight_bg", self.sbr_weight_bg.to_string());
        line("sbr.weight_fg", self.sbr_weight_fg.to_string());
        line("sbr.scales", join(|e| e.0));
        line("sbr.batches", join(|e| e.1));
        line("sbr.patches", join(|e| e.2));
        line("sbr.l", self.sbr_l.to_string());
        line("sbr.noise_rate", self.sbr_noise_rate.to_string());
        s
    }
}

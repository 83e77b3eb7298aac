//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use longscape::loss::LossWeights;
use longscape::optim::TrainSchedule;
use longscape::GeneratorConfig;

/// Every key a config file or `--set` may name, with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("scale", "multiplies the input side and every channel width"),
    ("input", "side of the square input image (overrides scale)"),
    ("channels", "encoder channel widths, five comma-separated values"),
    ("enc_blocks", "residual blocks in encoder stages 3-5"),
    ("dec_blocks", "residual blocks in the three upsampling stages"),
    ("rct_pred_len", "columns predicted by the recurrent bridge"),
    ("grb_dilations", "horizontal dilation of the three global residual blocks"),
    ("base_lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("batch", "images per batch"),
    ("warmup_iters", "reconstruction-only generator iterations"),
    ("epochs", "training epochs"),
    ("lr_drop_epoch", "epoch from which the learning rate is divided"),
    ("lr_drop_factor", "learning-rate divisor after the drop epoch"),
    ("n_cir_high", "critic updates early on and every n_cir_period iterations"),
    ("n_cir_low", "critic updates otherwise"),
    ("n_cir_threshold", "adversarial iterations that use n_cir_high"),
    ("n_cir_period", "period of the n_cir_high iterations"),
    ("lambda_rec", "reconstruction weight"),
    ("lambda_adv", "adversarial weight"),
    ("lambda_gp", "gradient-penalty weight"),
    ("beta", "global critic share of the adversarial terms"),
    ("seed", "seed of initialisation, shuffling and augmentation"),
    ("max_steps", "stop after this many generator iterations (0: no limit)"),
    ("checkpoint_every", "generator iterations between checkpoints"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scale: f64,
    pub model: GeneratorConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub seed: u64,
    pub max_steps: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scale: 1.0,
            model: GeneratorConfig::default(),
            schedule: TrainSchedule::default(),
            weights: LossWeights::default(),
            seed: 0,
            max_steps: 0,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|got: Vec<usize>| anyhow!("`{key}` needs {N} values, got {}", got.len()))
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies `pairs` in order over the defaults. `scale` is applied first
    /// so explicit model keys win over it regardless of position.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, _) in pairs {
            if !KEYS.iter().any(|(name, _)| name == k) {
                bail!("unknown configuration key `{k}`");
            }
        }
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "scale") {
            cfg.scale = parse("scale", v)?;
            cfg.model = GeneratorConfig::scaled(cfg.scale)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "scale") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut pairs = parse_pairs(&text).with_context(|| format!("in {}", path.display()))?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, s, w) = (&mut self.model, &mut self.schedule, &mut self.weights);
        match key {
            "input" => m.input = parse(key, v)?,
            "channels" => m.channels = parse_list(key, v)?,
            "enc_blocks" => m.enc_blocks = parse_list(key, v)?,
            "dec_blocks" => m.dec_blocks = parse_list(key, v)?,
            "rct_pred_len" => m.rct_pred_len = parse(key, v)?,
            "grb_dilations" => m.grb_dilations = parse_list(key, v)?,
            "base_lr" => s.base_lr = parse(key, v)?,
            "beta1" => s.beta1 = parse(key, v)?,
            "beta2" => s.beta2 = parse(key, v)?,
            "adam_eps" => s.adam_eps = parse(key, v)?,
            "batch" => s.batch = parse(key, v)?,
            "warmup_iters" => s.warmup_iters = parse(key, v)?,
            "epochs" => s.epochs = parse(key, v)?,
            "lr_drop_epoch" => s.lr_drop_epoch = parse(key, v)?,
            "lr_drop_factor" => s.lr_drop_factor = parse(key, v)?,
            "n_cir_high" => s.n_cir_high = parse(key, v)?,
            "n_cir_low" => s.n_cir_low = parse(key, v)?,
            "n_cir_threshold" => s.n_cir_threshold = parse(key, v)?,
            "n_cir_period" => s.n_cir_period = parse(key, v)?,
            "lambda_rec" => w.lambda_rec = parse(key, v)?,
            "lambda_adv" => w.lambda_adv = parse(key, v)?,
            "lambda_gp" => w.lambda_gp = parse(key, v)?,
            "beta" => w.beta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "scale" => {
                self.scale = parse(key, v)?;
                self.model = GeneratorConfig::scaled(self.scale)?;
            }
            _ => bail!("unknown configuration key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    fn value(&self, key: &str) -> String {
        let (m, s, w) = (&self.model, &self.schedule, &self.weights);
        match key {
            "scale" => self.scale.to_string(),
            "input" => m.input.to_string(),
            "channels" => list(&m.channels),
            "enc_blocks" => list(&m.enc_blocks),
            "dec_blocks" => list(&m.dec_blocks),
            "rct_pred_len" => m.rct_pred_len.to_string(),
            "grb_dilations" => list(&m.grb_dilations),
            "base_lr" => s.base_lr.to_string(),
            "beta1" => s.beta1.to_string(),
            "beta2" => s.beta2.to_string(),
            "adam_eps" => s.adam_eps.to_string(),
            "batch" => s.batch.to_string(),
            "warmup_iters" => s.warmup_iters.to_string(),
            "epochs" => s.epochs.to_string(),
            "lr_drop_epoch" => s.lr_drop_epoch.to_string(),
            "lr_drop_factor" => s.lr_drop_factor.to_string(),
            "n_cir_high" => s.n_cir_high.to_string(),
            "n_cir_low" => s.n_cir_low.to_string(),
            "n_cir_threshold" => s.n_cir_threshold.to_string(),
            "n_cir_period" => s.n_cir_period.to_string(),
            "lambda_rec" => w.lambda_rec.to_string(),
            "lambda_adv" => w.lambda_adv.to_string(),
            "lambda_gp" => w.lambda_gp.to_string(),
            "beta" => w.beta.to_string(),
            "seed" => self.seed.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => unreachable!("key table and value() disagree on `{key}`"),
        }
    }

    /// Every key with its current value, one `key = value` line each; the
    /// output parses back to the same configuration.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            writeln!(out, "{k} = {}", self.value(k)).expect("writing to a String");
        }
        out
    }
}

/// Key reference for `--help`: name, default and description.
pub fn key_help() -> String {
    let d = RunConfig::default();
    let mut out = String::from("Configuration keys (config file `key = value`, or --set key=value):\n");
    for (k, desc) in KEYS {
        writeln!(out, "  {k:<17} {:<22} {desc}", d.value(k)).expect("writing to a String");
    }
    out
}

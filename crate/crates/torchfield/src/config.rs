//! Training configuration: `key = value` lines, `#` comments, unknown keys
//! rejected.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Training-free coarse model periodically synced from the fine one.
    Synced,
    /// Independently optimized coarse and fine models.
    Separate,
    /// One network serving both passes.
    Shared,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "synced" => Ok(Strategy::Synced),
            "separate" => Ok(Strategy::Separate),
            "shared" => Ok(Strategy::Shared),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected synced|separate|shared)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Synced => "synced",
            Strategy::Separate => "separate",
            Strategy::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub patch_size: usize,
    pub kernel_size: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub sync_period: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub iterations: u64,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub l_pos: usize,
    pub l_dir: usize,
    pub ssim_loss: bool,
    pub ssim_weight: f64,
    pub weighted_mse: bool,
    pub eval_period: u64,
    /// Write wall_seconds as 0 so metrics files are bit-reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Synced,
            patch_size: 5,
            kernel_size: 3,
            n_coarse: 64,
            n_fine: 448,
            sync_period: 200,
            batch: 64,
            lr: 5e-4,
            lr_final: 5e-5,
            iterations: 20000,
            seed: 42,
            channels: vec![128, 128, 128, 256, 256, 256, 512, 512],
            l_pos: 10,
            l_dir: 4,
            ssim_loss: true,
            ssim_weight: 1.0,
            weighted_mse: true,
            eval_period: 1000,
            deterministic: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value for {key}: '{value}' ({e})")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value for {key}: '{value}' (expected true|false)"
        ))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected 'key = value'", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "strategy" => cfg.strategy = Strategy::parse(value)?,
                "patch_size" => cfg.patch_size = parse_num(key, value)?,
                "kernel_size" => cfg.kernel_size = parse_num(key, value)?,
                "n_coarse" => cfg.n_coarse = parse_num(key, value)?,
                "n_fine" => cfg.n_fine = parse_num(key, value)?,
                "sync_period" => cfg.sync_period = parse_num(key, value)?,
                "batch" => cfg.batch = parse_num(key, value)?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "lr_final" => cfg.lr_final = parse_num(key, value)?,
                "iterations" => cfg.iterations = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "channels" => {
                    cfg.channels = value
                        .split(',')
                        .map(|v| parse_num(key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "l_pos" => cfg.l_pos = parse_num(key, value)?,
                "l_dir" => cfg.l_dir = parse_num(key, value)?,
                "ssim_loss" => cfg.ssim_loss = parse_bool(key, value)?,
                "ssim_weight" => cfg.ssim_weight = parse_num(key, value)?,
                "weighted_mse" => cfg.weighted_mse = parse_bool(key, value)?,
                "eval_period" => cfg.eval_period = parse_num(key, value)?,
                "deterministic" => cfg.deterministic = parse_bool(key, value)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown config key '{other}' on line {}",
                        idx + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        TrainConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.network_config().validate()?;
        for (name, v) in [
            ("n_coarse", self.n_coarse),
            ("n_fine", self.n_fine),
            ("sync_period", self.sync_period),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.iterations == 0 || self.eval_period == 0 {
            return Err(Error::Config("iterations and eval_period must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(Error::Config(format!(
                "need 0 < lr_final <= lr, got lr {} lr_final {}",
                self.lr, self.lr_final
            )));
        }
        if self.ssim_weight < 0.0 {
            return Err(Error::Config("ssim_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            patch_size: self.patch_size,
            kernel_size: self.kernel_size,
            channels: self.channels.clone(),
            l_pos: self.l_pos,
            l_dir: self.l_dir,
        }
    }

    /// Serialize in a form `parse` reads back identically.
    pub fn to_text(&self) -> String {
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "strategy = {}\npatch_size = {}\nkernel_size = {}\nn_coarse = {}\nn_fine = {}\n\
             sync_period = {}\nbatch = {}\nlr = {:e}\nlr_final = {:e}\niterations = {}\n\
             seed = {}\nchannels = {}\nl_pos = {}\nl_dir = {}\nssim_loss = {}\n\
             ssim_weight = {:e}\nweighted_mse = {}\neval_period = {}\ndeterministic = {}\n",
            self.strategy.as_str(),
            self.patch_size,
            self.kernel_size,
            self.n_coarse,
            self.n_fine,
            self.sync_period,
            self.batch,
            self.lr,
            self.lr_final,
            self.iterations,
            self.seed,
            channels,
            self.l_pos,
            self.l_dir,
            self.ssim_loss,
            self.ssim_weight,
            self.weighted_mse,
            self.eval_period,
            self.deterministic,
        )
    }
}

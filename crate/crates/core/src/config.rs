//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::affinity::{GramMode, SaConfig, SaSampling};
use crate::error::{Error, Result};
use crate::hosts::{Host, HostConfig};
use crate::params::hex;
use crate::patch_grid::BlockMaskConfig;
use crate::probe::ProbeConfig;
use crate::tensor::AdamWConfig;
use crate::vit::{EncoderConfig, HeadConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    MrOnly,
    HrOnly,
    Sa,
    SaFalseHr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MrOnly, Variant::HrOnly, Variant::Sa, Variant::SaFalseHr];

    pub fn uses_sa(self) -> bool {
        matches!(self, Variant::Sa | Variant::SaFalseHr)
    }

    pub fn reads_hr(self) -> bool {
        matches!(self, Variant::HrOnly | Variant::Sa)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mr_only" => Ok(Variant::MrOnly),
            "hr_only" => Ok(Variant::HrOnly),
            "sa" => Ok(Variant::Sa),
            "sa_false_hr" => Ok(Variant::SaFalseHr),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MrOnly => "mr_only",
            Variant::HrOnly => "hr_only",
            Variant::Sa => "sa",
            Variant::SaFalseHr => "sa_false_hr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// warmup as a fraction of total steps
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub host: Host,
    pub variant: Variant,
    pub seed: u64,
    pub patch: usize,
    pub hr_only_crop: bool,
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub momentum: f64,
    pub visible_ratio: f64,
    pub blocks: BlockMaskConfig,
    pub sa: SaConfig,
    pub sa_independent: bool,
    pub optim: OptimConfig,
    pub probe: ProbeConfig,
    pub log_wall_ms: bool,
}

/// Desk-scale learning rates: the published rates scaled linearly from
/// their batch sizes (64 and 128) down to a batch of 16.
pub const IJEPA_DESK_LR: f64 = 1e-3 * 16.0 / 64.0;
pub const LATENTMIM_DESK_LR: f64 = 1.5e-4 * 16.0 / 128.0;

impl TrainConfig {
    /// Desk defaults for `host`.
    pub fn desk(host: Host) -> Self {
        let (lr, wd) = match host {
            Host::Ijepa => (IJEPA_DESK_LR, 0.04),
            Host::LatentMim => (LATENTMIM_DESK_LR, 0.05),
        };
        let patch = 8;
        TrainConfig {
            host,
            variant: Variant::MrOnly,
            seed: 0,
            patch,
            hr_only_crop: true,
            checkpoint_every: 0,
            encoder: EncoderConfig {
                in_dim: 4 * patch * patch,
                d: 64,
                depth: 2,
                heads: 4,
                mlp_hidden: 128,
            },
            head: HeadConfig {
                enc_d: 64,
                width: 48,
                depth: 2,
                heads: 4,
                mlp_hidden: 96,
            },
            momentum: 0.996,
            visible_ratio: 0.1,
            blocks: BlockMaskConfig::default(),
            sa: SaConfig::default(),
            sa_independent: false,
            optim: OptimConfig {
                lr,
                weight_decay: wd,
                batch: 16,
                epochs: 50,
                warmup_frac: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            probe: ProbeConfig::default(),
            log_wall_ms: false,
        }
    }

    /// Published architecture and optimizer settings; documented, too large
    /// for routine runs.
    pub fn full_preset(host: Host) -> Self {
        let mut c = TrainConfig::desk(host);
        c.patch = match host {
            Host::Ijepa => 14,
            Host::LatentMim => 16,
        };
        c.encoder = EncoderConfig {
            in_dim: 4 * c.patch * c.patch,
            d: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
        };
        c.head = match host {
            Host::Ijepa => HeadConfig {
                enc_d: 384,
                width: 384,
                depth: 12,
                heads: 6,
                mlp_hidden: 1536,
            },
            Host::LatentMim => HeadConfig {
                enc_d: 384,
                width: 384,
                depth: 3,
                heads: 6,
                mlp_hidden: 1536,
            },
        };
        let (lr, batch, wd) = match host {
            Host::Ijepa => (1e-3, 64, 0.04),
            Host::LatentMim => (1.5e-4, 128, 0.05),
        };
        c.optim.lr = lr;
        c.optim.batch = batch;
        c.optim.weight_decay = wd;
        c.optim.epochs = 300;
        c
    }

    pub fn host_config(&self) -> HostConfig {
        HostConfig {
            host: self.host,
            encoder: self.encoder,
            head: self.head,
            momentum: self.momentum,
            visible_ratio: self.visible_ratio,
            blocks: self.blocks,
        }
    }

    /// Parses `key=value` lines; `#` starts a comment. `run.host` is
    /// applied first so host-dependent defaults can be overridden.
    pub fn parse(text: &str) -> Result<Self> {
        TrainConfig::from_pairs(&parse_pairs(text)?)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let host = match pairs.iter().rev().find(|(k, _)| k == "run.host") {
            Some((_, v)) => v.parse()?,
            None => Host::Ijepa,
        };
        let mut c = TrainConfig::desk(host);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value;
        match key {
            "run.host" => {
                let h: Host = v.parse()?;
                if h != self.host {
                    // host-dependent defaults follow the host
                    let fresh = TrainConfig::desk(h);
                    self.optim.lr = fresh.optim.lr;
                    self.optim.weight_decay = fresh.optim.weight_decay;
                }
                self.host = h;
            }
            "run.variant" => self.variant = v.parse()?,
            "run.seed" => self.seed = p(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "hr_only.crop" => self.hr_only_crop = p(key, v)?,
            "model.patch" => {
                self.patch = p(key, v)?;
                self.encoder.in_dim = 4 * self.patch * self.patch;
            }
            "model.d" => {
                self.encoder.d = p(key, v)?;
                self.head.enc_d = self.encoder.d;
            }
            "model.depth" => self.encoder.depth = p(key, v)?,
            "model.heads" => self.encoder.heads = p(key, v)?,
            "model.mlp_hidden" => self.encoder.mlp_hidden = p(key, v)?,
            "head.width" => self.head.width = p(key, v)?,
            "head.depth" => self.head.depth = p(key, v)?,
            "head.heads" => self.head.heads = p(key, v)?,
            "head.mlp_hidden" => self.head.mlp_hidden = p(key, v)?,
            "host.momentum" => self.momentum = p(key, v)?,
            "host.visible_ratio" => self.visible_ratio = p(key, v)?,
            "mask.n_targets" => self.blocks.n_targets = p(key, v)?,
            "mask.target_scale_min" => self.blocks.target_scale.0 = p(key, v)?,
            "mask.target_scale_max" => self.blocks.target_scale.1 = p(key, v)?,
            "mask.aspect_min" => self.blocks.aspect.0 = p(key, v)?,
            "mask.aspect_max" => self.blocks.aspect.1 = p(key, v)?,
            "mask.context_scale_min" => self.blocks.context_scale.0 = p(key, v)?,
            "mask.context_scale_max" => self.blocks.context_scale.1 = p(key, v)?,
            "sa.s" => self.sa.s = p(key, v)?,
            "sa.lambda" => self.sa.lambda = p(key, v)?,
            "sa.downsample" => self.sa.downsample = v.parse()?,
            "sa.m_hr" => self.sa.m_hr = p(key, v)?,
            "sa.sampling" => {
                self.sa.sampling = match v {
                    "host_default" => SaSampling::HostDefault,
                    "sa_block" => SaSampling::SaBlock,
                    _ => return Err(Error::Config(format!("sa.sampling: unknown value {v:?}"))),
                }
            }
            "sa.block_scale" => self.sa.block_scale = p(key, v)?,
            "sa.gram_mode" => {
                self.sa.gram_mode = match v {
                    "mean" => GramMode::Mean,
                    "sum" => GramMode::Sum,
                    _ => return Err(Error::Config(format!("sa.gram_mode: unknown value {v:?}"))),
                }
            }
            "sa.independent" => self.sa_independent = p(key, v)?,
            "optim.lr" => self.optim.lr = p(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = p(key, v)?,
            "optim.batch" => self.optim.batch = p(key, v)?,
            "optim.epochs" => self.optim.epochs = p(key, v)?,
            "optim.warmup_frac" => self.optim.warmup_frac = p(key, v)?,
            "optim.beta1" => self.optim.beta1 = p(key, v)?,
            "optim.beta2" => self.optim.beta2 = p(key, v)?,
            "optim.eps" => self.optim.eps = p(key, v)?,
            "probe.epochs" => self.probe.epochs = p(key, v)?,
            "probe.lr" => self.probe.lr = p(key, v)?,
            "log.wall_ms" => self.log_wall_ms = p(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.head.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sa.validate()?;
        if self.head.enc_d != self.encoder.d {
            return Err(Error::Config("head.enc_d must equal model.d".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("host.momentum must be in [0, 1], got {}", self.momentum)));
        }
        if !(self.visible_ratio > 0.0 && self.visible_ratio < 1.0) {
            return Err(Error::Config("host.visible_ratio must be in (0, 1)".into()));
        }
        let o = &self.optim;
        if o.batch == 0 || o.epochs == 0 {
            return Err(Error::Config("optim.batch and optim.epochs must be positive".into()));
        }
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.warmup_frac)) {
            return Err(Error::Config("optim.lr, optim.weight_decay >= 0 and optim.warmup_frac in [0, 1) required".into()));
        }
        Ok(())
    }

    /// Every key with its value, sorted by key.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: String| {
            m.insert(k, v);
        };
        put("run.host", self.host.to_string());
        put("run.variant", self.variant.to_string());
        put("run.seed", self.seed.to_string());
        put("run.checkpoint_every", self.checkpoint_every.to_string());
        put("hr_only.crop", self.hr_only_crop.to_string());
        put("model.patch", self.patch.to_string());
        put("model.d", self.encoder.d.to_string());
        put("model.depth", self.encoder.depth.to_string());
        put("model.heads", self.encoder.heads.to_string());
        put("model.mlp_hidden", self.encoder.mlp_hidden.to_string());
        put("head.width", self.head.width.to_string());
        put("head.depth", self.head.depth.to_string());
        put("head.heads", self.head.heads.to_string());
        put("head.mlp_hidden", self.head.mlp_hidden.to_string());
        put("host.momentum", format!("{:?}", self.momentum));
        put("host.visible_ratio", format!("{:?}", self.visible_ratio));
        put("mask.n_targets", self.blocks.n_targets.to_string());
        put("mask.target_scale_min", format!("{:?}", self.blocks.target_scale.0));
        put("mask.target_scale_max", format!("{:?}", self.blocks.target_scale.1));
        put("mask.aspect_min", format!("{:?}", self.blocks.aspect.0));
        put("mask.aspect_max", format!("{:?}", self.blocks.aspect.1));
        put("mask.context_scale_min", format!("{:?}", self.blocks.context_scale.0));
        put("mask.context_scale_max", format!("{:?}", self.blocks.context_scale.1));
        put("sa.s", self.sa.s.to_string());
        put("sa.lambda", format!("{:?}", self.sa.lambda));
        put("sa.downsample", self.sa.downsample.to_string());
        put("sa.m_hr", format!("{:?}", self.sa.m_hr));
        put(
            "sa.sampling",
            match self.sa.sampling {
                SaSampling::HostDefault => "host_default",
                SaSampling::SaBlock => "sa_block",
            }
            .into(),
        );
        put("sa.block_scale", format!("{:?}", self.sa.block_scale));
        put(
            "sa.gram_mode",
            match self.sa.gram_mode {
                GramMode::Mean => "mean",
                GramMode::Sum => "sum",
            }
            .into(),
        );
        put("sa.independent", self.sa_independent.to_string());
        put("optim.lr", format!("{:?}", self.optim.lr));
        put("optim.weight_decay", format!("{:?}", self.optim.weight_decay));
        put("optim.batch", self.optim.batch.to_string());
        put("optim.epochs", self.optim.epochs.to_string());
        put("optim.warmup_frac", format!("{:?}", self.optim.warmup_frac));
        put("optim.beta1", format!("{:?}", self.optim.beta1));
        put("optim.beta2", format!("{:?}", self.optim.beta2));
        put("optim.eps", format!("{:?}", self.optim.eps));
        put("probe.epochs", self.probe.epochs.to_string());
        put("probe.lr", format!("{:?}", self.probe.lr));
        put("log.wall_ms", self.log_wall_ms.to_string());
        m
    }

    pub fn canonical_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }
}

/// `key=value` lines in file order; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        pairs.push(split_pair(line).map_err(|_| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?);
    }
    Ok(pairs)
}

pub fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::desk(Host::LatentMim);
        c.set("sa.lambda", "0.25").unwrap();
        c.set("run.variant", "sa").unwrap();
        let back = TrainConfig::parse(&c.canonical_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn host_sets_preset_lr() {
        let c = TrainConfig::parse("run.host=latentmim\n").unwrap();
        assert_eq!(c.optim.lr, LATENTMIM_DESK_LR);
        let c = TrainConfig::parse("optim.lr=0.5\nrun.host=latentmim\n").unwrap();
        assert_eq!(c.optim.lr, 0.5);
    }

    #[test]
    fn digest_detects_drift() {
        let a = TrainConfig::desk(Host::Ijepa);
        let mut b = a.clone();
        b.set("sa.m_hr", "0.99").unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::parse("model.width=3").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn full_presets_match_reference_settings() {
        let i = TrainConfig::full_preset(Host::Ijepa);
        assert_eq!((i.optim.lr, i.optim.batch, i.optim.weight_decay), (0.001, 64, 0.04));
        let l = TrainConfig::full_preset(Host::LatentMim);
        assert_eq!((l.optim.lr, l.optim.batch, l.optim.weight_decay), (0.00015, 128, 0.05));
        assert_eq!(l.head.depth, 3);
    }
}

//! Run configuration: `key = value` lines with dotted keys and `#` comments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, KeyReduce};
use crate::guidance::{DenoiserConfig, Dilation, GuidanceConfig};
use crate::optim::AdamW;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            side: 128,
            min_objects: 1,
            max_objects: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            train_steps: 2000,
            lr: 1e-3,
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Reconstruction epochs run before fusion training.
    pub ae_epochs: usize,
    pub kl_weight: f64,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceConfig,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
            ae_epochs: 0,
            kl_weight: 1e-6,
            diffusion: DiffusionConfig::default(),
            guidance: GuidanceConfig::default(),
            data_dir: None,
            checkpoint: None,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed"),
    ("data.scenes", "number of generated scenes"),
    ("data.side", "image side in pixels, divisible by 32"),
    ("data.min_objects", "fewest objects per scene"),
    ("data.max_objects", "most objects per scene"),
    ("model.channels", "four stage widths, comma separated"),
    ("model.heads", "four stage head counts"),
    ("model.layers", "four stage depths"),
    ("model.window", "attention window side"),
    ("model.factor", "latent compression factor f: 2, 4 or 8"),
    ("model.latent_channels", "latent channels C_t"),
    ("model.decoder_layers", "window blocks per decoder stage"),
    ("fusion.dfa_stages", "stages using deformable alignment, subset of 2,3,4 or 'none'"),
    ("fusion.no_offsets", "fix offsets to zero"),
    ("fusion.no_scalar", "fix the modulation scalar to one"),
    ("fusion.no_card", "drop the cardinality factor of the completion"),
    ("fusion.t_only", "replace alignment with the offset transformer's attention"),
    ("fusion.null_key", "append a learned null key"),
    ("fusion.offset_dim", "offset transformer width"),
    ("fusion.epsilon", "completion distance epsilon"),
    ("fusion.key_reduce", "spatial key reduction for G: mean or max"),
    ("train.epochs", "fusion training epochs"),
    ("train.batch_size", "examples per update"),
    ("train.lr", "AdamW learning rate"),
    ("train.beta1", "AdamW first moment decay"),
    ("train.beta2", "AdamW second moment decay"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.lr_decay", "learning-rate multiplier per epoch"),
    ("train.ae_epochs", "reconstruction epochs before fusion training"),
    ("train.kl_weight", "latent regulariser weight"),
    ("diffusion.steps", "sampling steps T"),
    ("diffusion.train_steps", "denoiser training steps"),
    ("diffusion.lr", "denoiser learning rate"),
    ("diffusion.hidden", "denoiser width"),
    ("diffusion.heads", "denoiser cross-attention heads"),
    ("diffusion.null_key", "append a learned null key in the denoiser"),
    ("guidance.enabled", "apply backward guidance"),
    ("guidance.eta", "guidance strength"),
    ("guidance.steps", "number of guided sampling steps"),
    ("guidance.repeats", "gradient steps per guided step"),
    ("guidance.beta_frac", "activation threshold as a fraction of the maximum"),
    ("guidance.activation", "threshold G; false uses it as a soft mask"),
    ("guidance.dilation", "bbox, none or morph:K"),
    ("paths.data", "dataset directory"),
    ("paths.checkpoint", "checkpoint file"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Usage(format!("bad value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Usage(format!("bad boolean '{v}' for {key}"))),
    }
}

fn parse_four(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Usage(format!("{key} needs four comma-separated values")))
}

/// `"2,3,4"`, `"none"` or any subset of stages 2..4.
pub fn parse_dfa_stages(v: &str) -> Result<[bool; 3]> {
    let mut mask = [false; 3];
    if v.trim() == "none" || v.trim().is_empty() {
        return Ok(mask);
    }
    for p in v.split(',') {
        let s: usize = parse_num("fusion.dfa_stages", p.trim())?;
        if !(2..=4).contains(&s) {
            return Err(Error::Usage(format!("deformable stages must lie in 2..4, got {s}")));
        }
        mask[s - 2] = true;
    }
    Ok(mask)
}

pub fn parse_dilation(v: &str) -> Result<Dilation> {
    match v {
        "bbox" => Ok(Dilation::BBox),
        "none" => Ok(Dilation::None),
        _ => match v.strip_prefix("morph:") {
            Some(k) => Ok(Dilation::Morph(parse_num("guidance.dilation", k)?)),
            None => Err(Error::Usage(format!("unknown dilation mode '{v}'"))),
        },
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let adam: &mut AdamW = &mut self.train.adam;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data.scenes" => self.data.scenes = parse_num(key, v)?,
            "data.side" => self.data.side = parse_num(key, v)?,
            "data.min_objects" => self.data.min_objects = parse_num(key, v)?,
            "data.max_objects" => self.data.max_objects = parse_num(key, v)?,
            "model.channels" => self.backbone.stages.channels = parse_four(key, v)?,
            "model.heads" => self.backbone.stages.heads = parse_four(key, v)?,
            "model.layers" => self.backbone.stages.layers = parse_four(key, v)?,
            "model.window" => self.backbone.stages.window = parse_num(key, v)?,
            "model.factor" => self.backbone.factor = parse_num(key, v)?,
            "model.latent_channels" => {
                self.backbone.latent_channels = parse_num(key, v)?;
                self.diffusion.denoiser.latent_channels = self.backbone.latent_channels;
            }
            "model.decoder_layers" => self.backbone.decoder_layers = parse_num(key, v)?,
            "fusion.dfa_stages" => self.fusion.dfa_enabled = parse_dfa_stages(v)?,
            "fusion.no_offsets" => self.fusion.no_offsets = parse_bool(key, v)?,
            "fusion.no_scalar" => self.fusion.no_scalar = parse_bool(key, v)?,
            "fusion.no_card" => self.fusion.no_card = parse_bool(key, v)?,
            "fusion.t_only" => self.fusion.t_only = parse_bool(key, v)?,
            "fusion.null_key" => self.fusion.null_key = parse_bool(key, v)?,
            "fusion.offset_dim" => self.fusion.offset_dim = parse_num(key, v)?,
            "fusion.epsilon" => self.fusion.epsilon = parse_num(key, v)?,
            "fusion.key_reduce" => {
                self.fusion.key_reduce = match v {
                    "mean" => KeyReduce::Mean,
                    "max" => KeyReduce::Max,
                    _ => return Err(Error::Usage(format!("key_reduce must be mean or max, got '{v}'"))),
                }
            }
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => adam.lr = parse_num(key, v)?,
            "train.beta1" => adam.beta1 = parse_num(key, v)?,
            "train.beta2" => adam.beta2 = parse_num(key, v)?,
            "train.weight_decay" => adam.weight_decay = parse_num(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse_num(key, v)?,
            "train.ae_epochs" => self.ae_epochs = parse_num(key, v)?,
            "train.kl_weight" => self.kl_weight = parse_num(key, v)?,
            "diffusion.steps" => self.diffusion.steps = parse_num(key, v)?,
            "diffusion.train_steps" => self.diffusion.train_steps = parse_num(key, v)?,
            "diffusion.lr" => self.diffusion.lr = parse_num(key, v)?,
            "diffusion.hidden" => self.diffusion.denoiser.hidden = parse_num(key, v)?,
            "diffusion.heads" => self.diffusion.denoiser.heads = parse_num(key, v)?,
            "diffusion.null_key" => self.diffusion.denoiser.null_key = parse_bool(key, v)?,
            "guidance.enabled" => self.guidance.enabled = parse_bool(key, v)?,
            "guidance.eta" => self.guidance.eta = parse_num(key, v)?,
            "guidance.steps" => self.guidance.guided_steps = parse_num(key, v)?,
            "guidance.repeats" => self.guidance.repeats = parse_num(key, v)?,
            "guidance.beta_frac" => self.guidance.beta_frac = parse_num(key, v)?,
            "guidance.activation" => self.guidance.activation = parse_bool(key, v)?,
            "guidance.dilation" => self.guidance.dilation = parse_dilation(v)?,
            "paths.data" => self.data_dir = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => return Err(Error::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies the lines of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Usage(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.side == 0 || self.data.side % 32 != 0 {
            return Err(Error::Config(format!("image side must be a positive multiple of 32, got {}", self.data.side)));
        }
        if self.data.min_objects == 0 || self.data.max_objects < self.data.min_objects {
            return Err(Error::Config("object counts need 1 <= min <= max".into()));
        }
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.train.adam.validate()?;
        if self.train.epochs > 0 && self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.guidance.validate(self.diffusion.steps)?;
        if self.diffusion.steps < 2 {
            return Err(Error::Config("diffusion needs at least 2 steps".into()));
        }
        Ok(())
    }

    /// `key = value` lines reproducing this configuration.
    pub fn to_text(&self) -> String {
        let four = |a: [usize; 4]| a.map(|v| v.to_string()).join(",");
        let dfa: Vec<String> = (0..3).filter(|&i| self.fusion.dfa_enabled[i]).map(|i| (i + 2).to_string()).collect();
        let dil = match self.guidance.dilation {
            Dilation::BBox => "bbox".to_string(),
            Dilation::None => "none".to_string(),
            Dilation::Morph(k) => format!("morph:{k}"),
        };
        let a = &self.train.adam;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("data.scenes = {}", self.data.scenes),
            format!("data.side = {}", self.data.side),
            format!("data.min_objects = {}", self.data.min_objects),
            format!("data.max_objects = {}", self.data.max_objects),
            format!("model.channels = {}", four(self.backbone.stages.channels)),
            format!("model.heads = {}", four(self.backbone.stages.heads)),
            format!("model.layers = {}", four(self.backbone.stages.layers)),
            format!("model.window = {}", self.backbone.stages.window),
            format!("model.factor = {}", self.backbone.factor),
            format!("model.latent_channels = {}", self.backbone.latent_channels),
            format!("model.decoder_layers = {}", self.backbone.decoder_layers),
            format!("fusion.dfa_stages = {}", if dfa.is_empty() { "none".into() } else { dfa.join(",") }),
            format!("fusion.no_offsets = {}", self.fusion.no_offsets),
            format!("fusion.no_scalar = {}", self.fusion.no_scalar),
            format!("fusion.no_card = {}", self.fusion.no_card),
            format!("fusion.t_only = {}", self.fusion.t_only),
            format!("fusion.null_key = {}", self.fusion.null_key),
            format!("fusion.offset_dim = {}", self.fusion.offset_dim),
            format!("fusion.epsilon = {}", self.fusion.epsilon),
            format!(
                "fusion.key_reduce = {}",
                if self.fusion.key_reduce == KeyReduce::Max { "max" } else { "mean" }
            ),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.lr = {}", a.lr),
            format!("train.beta1 = {}", a.beta1),
            format!("train.beta2 = {}", a.beta2),
            format!("train.weight_decay = {}", a.weight_decay),
            format!("train.lr_decay = {}", self.train.lr_decay),
            format!("train.ae_epochs = {}", self.ae_epochs),
            format!("train.kl_weight = {}", self.kl_weight),
            format!("diffusion.steps = {}", self.diffusion.steps),
            format!("diffusion.train_steps = {}", self.diffusion.train_steps),
            format!("diffusion.lr = {}", self.diffusion.lr),
            format!("diffusion.hidden = {}", self.diffusion.denoiser.hidden),
            format!("diffusion.heads = {}", self.diffusion.denoiser.heads),
            format!("diffusion.null_key = {}", self.diffusion.denoiser.null_key),
            format!("guidance.enabled = {}", self.guidance.enabled),
            format!("guidance.eta = {}", self.guidance.eta),
            format!("guidance.steps = {}", self.guidance.guided_steps),
            format!("guidance.repeats = {}", self.guidance.repeats),
            format!("guidance.beta_frac = {}", self.guidance.beta_frac),
            format!("guidance.activation = {}", self.guidance.activation),
            format!("guidance.dilation = {dil}"),
        ];
        if let Some(p) = &self.data_dir {
            lines.push(format!("paths.data = {}", p.display()));
        }
        if let Some(p) = &self.checkpoint {
            lines.push(format!("paths.checkpoint = {}", p.display()));
        }
        lines.join("\n") + "\n"
    }
}

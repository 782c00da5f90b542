//! Run configuration and its flat `key = value` text form.

use crate::data::shapes::Jitter;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::io::parse_flat_config;
use crate::objectives::LossConfig;
use std::fmt::Write as _;
use std::str::FromStr;

/// Which point features feed the cross-modal queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmfmInput {
    /// IORM-enhanced region features.
    Enhanced,
    /// Backbone features before IORM.
    Raw,
}

impl CmfmInput {
    pub fn name(self) -> &'static str {
        match self {
            CmfmInput::Enhanced => "enhanced",
            CmfmInput::Raw => "raw",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "enhanced" => Some(CmfmInput::Enhanced),
            "raw" => Some(CmfmInput::Raw),
            _ => None,
        }
    }
}

/// Switchable components for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Pig,
    Psga,
    Iorm,
    Apa,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Pig, Component::Psga, Component::Iorm, Component::Apa];

    pub fn name(self) -> &'static str {
        match self {
            Component::Pig => "PIG",
            Component::Psga => "PSGA",
            Component::Iorm => "IORM",
            Component::Apa => "APA",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PIG" => Ok(Component::Pig),
            "PSGA" => Ok(Component::Psga),
            "IORM" => Ok(Component::Iorm),
            "APA" => Ok(Component::Apa),
            _ => Err(Error::invalid("component", format!("unknown component `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Feature width `C`.
    pub dim: usize,
    pub heads: usize,
    /// Regions at the large scale, `N_l`.
    pub large_regions: usize,
    /// Regions at the small scale, `N_s`.
    pub small_regions: usize,
    /// Neighbors grouped per region.
    pub group_size: usize,
    /// Token sequence length `L`.
    pub max_len: usize,
    pub top_k_large: usize,
    pub top_k_small: usize,
    pub cmfm_input: CmfmInput,
    pub loss: LossConfig,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the train split held back for checkpoint selection.
    pub val_fraction: f64,
    pub pig: bool,
    pub psga: bool,
    pub iorm: bool,
    pub apa: bool,
    /// Generation settings; `data.points` is `N`.
    pub data: DataConfig,
    pub data_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            heads: 8,
            large_regions: 64,
            small_regions: 128,
            group_size: 32,
            max_len: 40,
            top_k_large: 16,
            top_k_small: 32,
            cmfm_input: CmfmInput::Enhanced,
            loss: LossConfig::default(),
            lr: 6e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 8,
            seed: 42,
            val_fraction: 0.1,
            pig: true,
            psga: true,
            iorm: true,
            apa: true,
            data: DataConfig {
                points: 2048,
                ..DataConfig::default()
            },
            data_dir: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid("config", format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::invalid("config", format!("bad value `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Small dims that train in a few minutes on one core.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            heads: 4,
            large_regions: 16,
            small_regions: 32,
            group_size: 16,
            max_len: 16,
            top_k_large: 4,
            top_k_small: 8,
            lr: 3e-3,
            data: DataConfig {
                train_per_pair: 48,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    /// Gradient-check dims: `C=16, N=64, N_l=8, N_s=16, L=8`.
    pub fn tiny() -> Self {
        Self {
            dim: 16,
            heads: 2,
            large_regions: 8,
            small_regions: 16,
            group_size: 8,
            max_len: 8,
            top_k_large: 4,
            top_k_small: 4,
            data: DataConfig {
                points: 64,
                train_per_pair: 1,
                test_per_pair: 1,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn points(&self) -> usize {
        self.data.points
    }

    pub fn enabled(&self, c: Component) -> bool {
        match c {
            Component::Pig => self.pig,
            Component::Psga => self.psga,
            Component::Iorm => self.iorm,
            Component::Apa => self.apa,
        }
    }

    /// Turns `c` off, together with anything that depends on it.
    pub fn disable(&mut self, c: Component) {
        match c {
            Component::Pig => {
                self.pig = false;
                self.psga = false;
                self.apa = false;
            }
            Component::Psga => self.psga = false,
            Component::Iorm => self.iorm = false,
            Component::Apa => self.apa = false,
        }
        self.normalize();
    }

    /// Applies flag dependencies: PSGA and APA need PIG.
    pub fn normalize(&mut self) {
        if !self.pig {
            self.psga = false;
            self.apa = false;
        }
    }

    /// Alignment weight after ablation flags.
    pub fn align_weight(&self) -> f64 {
        if self.psga {
            self.loss.beta1
        } else {
            0.0
        }
    }

    /// Prototype weight after ablation flags.
    pub fn proto_weight(&self) -> f64 {
        if self.apa {
            self.loss.beta2
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("config", msg));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        let n = self.points();
        if self.small_regions == 0 || self.small_regions > n {
            return bad(format!("small_regions {} outside 1..={n}", self.small_regions));
        }
        if self.large_regions == 0 || self.large_regions > self.small_regions {
            return bad(format!(
                "large_regions {} outside 1..={}",
                self.large_regions, self.small_regions
            ));
        }
        if self.group_size == 0 || self.group_size > n {
            return bad(format!("group_size {} outside 1..={n}", self.group_size));
        }
        if self.top_k_large == 0 || self.top_k_large > self.large_regions {
            return bad(format!("top_k_large {} outside 1..={}", self.top_k_large, self.large_regions));
        }
        if self.top_k_small == 0 || self.top_k_small > self.small_regions {
            return bad(format!("top_k_small {} outside 1..={}", self.top_k_small, self.small_regions));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        self.loss.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam decay rates must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if (self.psga || self.apa) && !self.pig {
            return bad("PSGA and APA require PIG".into());
        }
        Ok(())
    }

    /// Parses flat config text on top of [`RunConfig::default`], or on top of
    /// a named preset given by a `preset` key.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_flat_config(text)?;
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            None => Self::default(),
            Some((_, p)) => Self::preset(p)?,
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::invalid("config", format!("unknown preset `{name}`"))),
        }
    }

    /// Sets one field by key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => {}
            "dim" => self.dim = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "large_regions" => self.large_regions = parse_value(key, v)?,
            "small_regions" => self.small_regions = parse_value(key, v)?,
            "group_size" => self.group_size = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "top_k_large" => self.top_k_large = parse_value(key, v)?,
            "top_k_small" => self.top_k_small = parse_value(key, v)?,
            "cmfm_input" => {
                self.cmfm_input = CmfmInput::from_name(v)
                    .ok_or_else(|| Error::invalid("config", format!("bad cmfm_input `{v}`")))?
            }
            "focal_alpha" => self.loss.focal_alpha = parse_value(key, v)?,
            "focal_gamma" => self.loss.focal_gamma = parse_value(key, v)?,
            "loss_eps" => self.loss.eps = parse_value(key, v)?,
            "temperature" => self.loss.temperature = parse_value(key, v)?,
            "align_weight" => self.loss.beta1 = parse_value(key, v)?,
            "proto_weight" => self.loss.beta2 = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam_eps = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "val_fraction" => self.val_fraction = parse_value(key, v)?,
            "pig" => {
                if parse_bool(key, v)? {
                    self.pig = true;
                } else {
                    self.disable(Component::Pig);
                }
            }
            "psga" => self.psga = parse_bool(key, v)?,
            "iorm" => self.iorm = parse_bool(key, v)?,
            "apa" => self.apa = parse_bool(key, v)?,
            "points" => self.data.points = parse_value(key, v)?,
            "data_seed" => self.data.seed = parse_value(key, v)?,
            "classes" => self.data.classes = parse_value(key, v)?,
            "holdout" => self.data.holdout = parse_value(key, v)?,
            "train_per_pair" => self.data.train_per_pair = parse_value(key, v)?,
            "test_per_pair" => self.data.test_per_pair = parse_value(key, v)?,
            "jitter_scale" => self.data.jitter.scale = parse_value(key, v)?,
            "jitter_shift" => self.data.jitter.shift = parse_value(key, v)?,
            "jitter_yaw" => self.data.jitter.yaw = parse_value(key, v)?,
            "data_dir" => self.data_dir = Some(v.to_owned()),
            _ => return Err(Error::invalid("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as flat text; [`RunConfig::parse`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        let d = &self.data;
        let Jitter { scale, shift, yaw } = d.jitter;
        let fields: Vec<(&str, String)> = vec![
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("large_regions", self.large_regions.to_string()),
            ("small_regions", self.small_regions.to_string()),
            ("group_size", self.group_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("top_k_large", self.top_k_large.to_string()),
            ("top_k_small", self.top_k_small.to_string()),
            ("cmfm_input", self.cmfm_input.name().to_owned()),
            ("focal_alpha", format!("{:?}", l.focal_alpha)),
            ("focal_gamma", format!("{:?}", l.focal_gamma)),
            ("loss_eps", format!("{:?}", l.eps)),
            ("temperature", format!("{:?}", l.temperature)),
            ("align_weight", format!("{:?}", l.beta1)),
            ("proto_weight", format!("{:?}", l.beta2)),
            ("lr", format!("{:?}", self.lr)),
            ("adam_beta1", format!("{:?}", self.adam_beta1)),
            ("adam_beta2", format!("{:?}", self.adam_beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("pig", self.pig.to_string()),
            ("psga", self.psga.to_string()),
            ("iorm", self.iorm.to_string()),
            ("apa", self.apa.to_string()),
            ("points", d.points.to_string()),
            ("data_seed", d.seed.to_string()),
            ("classes", d.classes.to_string()),
            ("holdout", d.holdout.to_string()),
            ("train_per_pair", d.train_per_pair.to_string()),
            ("test_per_pair", d.test_per_pair.to_string()),
            ("jitter_scale", format!("{scale:?}")),
            ("jitter_shift", format!("{shift:?}")),
            ("jitter_yaw", format!("{yaw:?}")),
        ];
        for (k, v) in fields {
            let _ = writeln!(s, "{k} = {v}");
        }
        if let Some(dir) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {dir}");
        }
        s
    }
}

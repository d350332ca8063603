//! Line-oriented `section.key = value` configuration.
//!
//! ```text
//! # the tiny topology written out in full
//! topology.image = 1x32x32
//! topology.pre_convs = 8:3:tanh
//! topology.layers = 16:3:pool, 16:3, 32:3:pool, 32:3
//! topology.output = sigmoid
//! train.learning_rate = 0.001
//! ```
//!
//! `topology.preset` (`tiny` or `full`) picks the starting topology; the
//! other topology keys then override it field by field. Unknown keys and
//! repeated keys are rejected. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::data::{read_idx, SpriteConfig, SpriteSource};
use crate::error::{Error, Result};
use crate::folded::{Activation, ConvSpec, ImageShape, LayerSpec, TopologySpec};
use crate::training::TrainConfig;

/// Environment variable that replaces both the training and the data seed.
pub const SEED_ENV: &str = "FRNN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteKind {
    Blob(usize),
    Block(usize),
    /// Digits read from `data.glyphs`.
    Glyphs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    pub sprite: SpriteKind,
    pub glyphs: Option<PathBuf>,
    pub max_speed: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SpriteConfig::default();
        DataConfig {
            height: s.height,
            width: s.width,
            frames: s.frames,
            sprites: s.sprites,
            sprite: SpriteKind::Blob(5),
            glyphs: None,
            max_speed: s.max_speed,
            seed: s.seed,
        }
    }
}

impl DataConfig {
    /// Resolve into a generator configuration, reading the glyph file if
    /// one is used.
    pub fn sprite_config(&self) -> Result<SpriteConfig> {
        let source = match self.sprite {
            SpriteKind::Blob(size) => SpriteSource::Blob { size },
            SpriteKind::Block(size) => SpriteSource::Block { size },
            SpriteKind::Glyphs => {
                let path = self
                    .glyphs
                    .as_ref()
                    .ok_or_else(|| Error::invalid("data.sprite = glyphs needs data.glyphs"))?;
                SpriteSource::Glyphs(Arc::new(read_idx(path)?))
            }
        };
        let cfg = SpriteConfig {
            height: self.height,
            width: self.width,
            frames: self.frames,
            sprites: self.sprites,
            source,
            max_speed: self.max_speed,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub g: usize,
    pub p: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { g: 10, p: 10 }
    }
}

/// Everything a command may need. Defaults: tiny topology, default
/// training, data and evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub topology: TopologySpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            topology: TopologySpec::tiny(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn parse_entries(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            message: format!("expected `section.key = value`, got `{content}`"),
        })?;
        let key = key.trim().to_string();
        if !key.contains('.') {
            return Err(Error::Config {
                line,
                message: format!("key `{key}` has no section"),
            });
        }
        let entry = Entry {
            line,
            value: value.trim().to_string(),
        };
        if entries.insert(key.clone(), entry).is_some() {
            return Err(Error::Config {
                line,
                message: format!("`{key}` is set twice"),
            });
        }
    }
    Ok(entries)
}

fn bad(entry: &Entry, key: &str, what: &str) -> Error {
    Error::Config {
        line: entry.line,
        message: format!("`{key}`: cannot parse `{}` as {what}", entry.value),
    }
}

fn num<T: FromStr>(entry: &Entry, key: &str) -> Result<T> {
    entry.value.parse().map_err(|_| bad(entry, key, "a number"))
}

fn parse_activation(entry: &Entry, key: &str, s: &str) -> Result<Activation> {
    Activation::parse(s).ok_or_else(|| bad(entry, key, "tanh, sigmoid or identity"))
}

fn parse_image(entry: &Entry, key: &str) -> Result<ImageShape> {
    let parts: Vec<&str> = entry.value.split('x').map(str::trim).collect();
    match parts.as_slice() {
        [c, h, w] => Ok(ImageShape {
            channels: c.parse().map_err(|_| bad(entry, key, "CxHxW"))?,
            height: h.parse().map_err(|_| bad(entry, key, "CxHxW"))?,
            width: w.parse().map_err(|_| bad(entry, key, "CxHxW"))?,
        }),
        _ => Err(bad(entry, key, "CxHxW")),
    }
}

fn list_items(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_convs(entry: &Entry, key: &str) -> Result<Vec<ConvSpec>> {
    list_items(&entry.value)
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            match parts.as_slice() {
                [c, k, act] => Ok(ConvSpec {
                    channels: c.parse().map_err(|_| bad(entry, key, "channels:kernel:activation"))?,
                    kernel: k.parse().map_err(|_| bad(entry, key, "channels:kernel:activation"))?,
                    activation: parse_activation(entry, key, act)?,
                }),
                _ => Err(bad(entry, key, "channels:kernel:activation")),
            }
        })
        .collect()
}

fn parse_layers(entry: &Entry, key: &str) -> Result<Vec<LayerSpec>> {
    let what = "channels:kernel[:pool]";
    list_items(&entry.value)
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let (c, k, pooled) = match parts.as_slice() {
                [c, k] => (c, k, false),
                [c, k, "pool"] => (c, k, true),
                _ => return Err(bad(entry, key, what)),
            };
            Ok(LayerSpec {
                channels: c.parse().map_err(|_| bad(entry, key, what))?,
                kernel: k.parse().map_err(|_| bad(entry, key, what))?,
                pooled,
            })
        })
        .collect()
}

fn parse_sprite(entry: &Entry, key: &str) -> Result<SpriteKind> {
    let what = "blob:SIZE, block:SIZE or glyphs";
    match entry.value.split_once(':') {
        Some(("blob", n)) => Ok(SpriteKind::Blob(n.trim().parse().map_err(|_| bad(entry, key, what))?)),
        Some(("block", n)) => Ok(SpriteKind::Block(n.trim().parse().map_err(|_| bad(entry, key, what))?)),
        None if entry.value == "glyphs" => Ok(SpriteKind::Glyphs),
        _ => Err(bad(entry, key, what)),
    }
}

fn apply_topology(spec: &mut TopologySpec, key: &str, entry: &Entry) -> Result<bool> {
    match key {
        "topology.preset" => {}
        "topology.image" => spec.image = parse_image(entry, key)?,
        "topology.pre_convs" => spec.pre_convs = parse_convs(entry, key)?,
        "topology.layers" => spec.layers = parse_layers(entry, key)?,
        "topology.output" => spec.output_activation = parse_activation(entry, key, &entry.value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn preset(entries: &BTreeMap<String, Entry>) -> Result<TopologySpec> {
    match entries.get("topology.preset") {
        None => Ok(TopologySpec::tiny()),
        Some(e) => match e.value.as_str() {
            "tiny" => Ok(TopologySpec::tiny()),
            "full" => Ok(TopologySpec::full()),
            _ => Err(bad(e, "topology.preset", "tiny or full")),
        },
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = RunConfig {
            topology: preset(&entries)?,
            ..RunConfig::default()
        };
        for (key, e) in &entries {
            if apply_topology(&mut cfg.topology, key, e)? {
                continue;
            }
            let (t, d, v) = (&mut cfg.train, &mut cfg.data, &mut cfg.eval);
            match key.as_str() {
                "train.g" => t.g = num(e, key)?,
                "train.p" => t.p = num(e, key)?,
                "train.learning_rate" => t.learning_rate = num(e, key)?,
                "train.batch_size" => t.batch_size = num(e, key)?,
                "train.steps" => t.steps = num(e, key)?,
                "train.seed" => t.seed = num(e, key)?,
                "train.rmsprop_decay" => t.rmsprop_decay = num(e, key)?,
                "train.rmsprop_epsilon" => t.rmsprop_epsilon = num(e, key)?,
                "data.height" => d.height = num(e, key)?,
                "data.width" => d.width = num(e, key)?,
                "data.frames" => d.frames = num(e, key)?,
                "data.sprites" => d.sprites = num(e, key)?,
                "data.sprite" => d.sprite = parse_sprite(e, key)?,
                "data.glyphs" => d.glyphs = Some(PathBuf::from(&e.value)),
                "data.max_speed" => d.max_speed = num(e, key)?,
                "data.seed" => d.seed = num(e, key)?,
                "eval.g" => v.g = num(e, key)?,
                "eval.p" => v.p = num(e, key)?,
                _ => {
                    return Err(Error::Config {
                        line: e.line,
                        message: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        cfg.topology.validate()?;
        cfg.train.validate()?;
        if cfg.eval.g == 0 || cfg.eval.p == 0 {
            return Err(Error::invalid("eval.g and eval.p must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Replace the training and data seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    /// Apply [`SEED_ENV`] if it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
                self.override_seed(seed);
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }
}

/// Serialise a topology as `topology.*` lines.
pub fn topology_to_text(spec: &TopologySpec) -> String {
    let convs: Vec<String> = spec
        .pre_convs
        .iter()
        .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.activation.name()))
        .collect();
    let layers: Vec<String> = spec
        .layers
        .iter()
        .map(|l| {
            let pool = if l.pooled { ":pool" } else { "" };
            format!("{}:{}{pool}", l.channels, l.kernel)
        })
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "topology.image = {}", spec.image);
    let _ = writeln!(out, "topology.pre_convs = {}", convs.join(", "));
    let _ = writeln!(out, "topology.layers = {}", layers.join(", "));
    let _ = writeln!(out, "topology.output = {}", spec.output_activation.name());
    out
}

/// Parse text containing only `topology.*` keys.
pub fn topology_from_text(text: &str) -> Result<TopologySpec> {
    let entries = parse_entries(text)?;
    let mut spec = preset(&entries)?;
    for (key, e) in &entries {
        if !apply_topology(&mut spec, key, e)? {
            return Err(Error::Config {
                line: e.line,
                message: format!("unexpected key `{key}` in a topology description"),
            });
        }
    }
    spec.validate()?;
    Ok(spec)
}

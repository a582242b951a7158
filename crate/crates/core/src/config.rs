//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, and
//! unknown or repeated keys are errors. A `preset` line selects one of the
//! named architectures before the remaining keys are applied, wherever it
//! appears in the file. [`RunConfig::canonical`] lists every key in sorted
//! order. Parsing that text again gives back the same configuration, and its
//! FNV-1a hash is the configuration digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::network::NetworkConfig;
use crate::objective::{COMPARE_THRESHOLD, EVAL_THRESHOLD};
use crate::recurrence::{CellKind, InputMap, RecurrenceConfig};
use crate::synth::{AugmentOptions, Background, Family, SynthConfig, TextureLevel};
use crate::training::{AdamConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub views: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: EVAL_THRESHOLD,
            views: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub threshold: f64,
    pub views: Vec<usize>,
    pub textures: Vec<TextureLevel>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            threshold: COMPARE_THRESHOLD,
            views: vec![1, 2, 3, 4, 5, 8],
            textures: TextureLevel::ALL.to_vec(),
        }
    }
}

/// Everything one run needs. `seed` feeds the dataset, initialization and
/// batching streams alike.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            synth: SynthConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// Named architectures: encoder and decoder variant, recurrent cell and
/// neighbour kernel.
pub const PRESETS: [(&str, Variant, CellKind, usize); 5] = [
    ("3d-lstm-1", Variant::Shallow, CellKind::Lstm3d, 1),
    ("3d-gru-1", Variant::Shallow, CellKind::Gru3d, 1),
    ("3d-lstm-3", Variant::Shallow, CellKind::Lstm3d, 3),
    ("3d-gru-3", Variant::Shallow, CellKind::Gru3d, 3),
    ("res3d-gru-3", Variant::Residual, CellKind::Gru3d, 3),
];

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| format!("`{key}`: bad list item `{s}`")))
        .collect()
}

fn parse_enum<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    f(v).ok_or_else(|| format!("`{key}`: unknown value `{v}`"))
}

impl RunConfig {
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let Some(&(_, variant, cell, kernel)) = PRESETS.iter().find(|p| p.0 == name.to_ascii_lowercase()) else {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            return Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                names.join(", ")
            )));
        };
        self.network.encoder.variant = variant;
        self.network.decoder.variant = variant;
        self.network.recurrence.cell = cell;
        self.network.recurrence.kernel = kernel;
        Ok(())
    }

    /// `(key, value)` for every key, sorted.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (e, r, d) = (&self.network.encoder, &self.network.recurrence, &self.network.decoder);
        let (t, a, s) = (&self.train, &self.train.augment, &self.synth);
        let mut v = vec![
            ("seed", self.seed.to_string()),
            ("synth.count", s.count.to_string()),
            (
                "synth.families",
                join(&s.families.iter().map(|f| f.name()).collect::<Vec<_>>()),
            ),
            ("synth.grid", s.grid.to_string()),
            ("synth.image_size", s.image_size.to_string()),
            ("synth.views", s.views.to_string()),
            (
                "synth.textures",
                join(&s.textures.iter().map(|x| x.name()).collect::<Vec<_>>()),
            ),
            ("encoder.variant", e.variant.name().to_string()),
            ("encoder.input_size", e.input_size.to_string()),
            ("encoder.in_channels", e.in_channels.to_string()),
            ("encoder.channels", join(&e.channels)),
            ("encoder.feature_dim", e.feature_dim.to_string()),
            ("recurrence.cell", r.cell.name().to_string()),
            ("recurrence.kernel", r.kernel.to_string()),
            ("recurrence.grid", r.grid.to_string()),
            ("recurrence.hidden", r.hidden.to_string()),
            ("recurrence.input_map", r.input_map.name().to_string()),
            ("decoder.variant", d.variant.name().to_string()),
            ("decoder.channels", join(&d.channels)),
            ("decoder.unpool_stages", d.unpool_stages.to_string()),
            ("decoder.n_vox", d.n_vox.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.learning_rate", t.adam.learning_rate.to_string()),
            ("train.beta1", t.adam.beta1.to_string()),
            ("train.beta2", t.adam.beta2.to_string()),
            ("train.epsilon", t.adam.epsilon.to_string()),
            ("train.view_min", t.view_range.0.to_string()),
            ("train.view_max", t.view_range.1.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.eval_views", t.eval_views.to_string()),
            ("train.heldout_limit", t.heldout_limit.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("augment.tint_min", a.tint.0.to_string()),
            ("augment.tint_max", a.tint.1.to_string()),
            ("augment.max_translate", a.max_translate.to_string()),
            ("augment.background", a.background.name().to_string()),
            ("augment.background_max", a.background_max.to_string()),
            ("eval.threshold", self.eval.threshold.to_string()),
            ("eval.views", join(&self.eval.views)),
            ("compare.threshold", self.compare.threshold.to_string()),
            ("compare.views", join(&self.compare.views)),
            (
                "compare.textures",
                join(&self.compare.textures.iter().map(|x| x.name()).collect::<Vec<_>>()),
            ),
        ];
        v.sort_by_key(|e| e.0);
        v
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|e| e.0).collect()
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        self.set_inner(key, v.trim()).map_err(Error::Config)
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let n = &mut self.network;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "synth.count" => self.synth.count = parse_num(key, v)?,
            "synth.families" => self.synth.families = parse_list(key, v, Family::parse)?,
            "synth.grid" => self.synth.grid = parse_num(key, v)?,
            "synth.image_size" => self.synth.image_size = parse_num(key, v)?,
            "synth.views" => self.synth.views = parse_num(key, v)?,
            "synth.textures" => self.synth.textures = parse_list(key, v, TextureLevel::parse)?,
            "encoder.variant" => n.encoder.variant = parse_enum(key, v, Variant::parse)?,
            "encoder.input_size" => n.encoder.input_size = parse_num(key, v)?,
            "encoder.in_channels" => n.encoder.in_channels = parse_num(key, v)?,
            "encoder.channels" => n.encoder.channels = parse_list(key, v, |s| s.parse().ok())?,
            "encoder.feature_dim" => n.encoder.feature_dim = parse_num(key, v)?,
            "recurrence.cell" => n.recurrence.cell = parse_enum(key, v, CellKind::parse)?,
            "recurrence.kernel" => n.recurrence.kernel = parse_num(key, v)?,
            "recurrence.grid" => n.recurrence.grid = parse_num(key, v)?,
            "recurrence.hidden" => n.recurrence.hidden = parse_num(key, v)?,
            "recurrence.input_map" => n.recurrence.input_map = parse_enum(key, v, InputMap::parse)?,
            "decoder.variant" => n.decoder.variant = parse_enum(key, v, Variant::parse)?,
            "decoder.channels" => n.decoder.channels = parse_list(key, v, |s| s.parse().ok())?,
            "decoder.unpool_stages" => n.decoder.unpool_stages = parse_num(key, v)?,
            "decoder.n_vox" => n.decoder.n_vox = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.iterations" => t.iterations = parse_num(key, v)?,
            "train.learning_rate" => t.adam.learning_rate = parse_num(key, v)?,
            "train.beta1" => t.adam.beta1 = parse_num(key, v)?,
            "train.beta2" => t.adam.beta2 = parse_num(key, v)?,
            "train.epsilon" => t.adam.epsilon = parse_num(key, v)?,
            "train.view_min" => t.view_range.0 = parse_num(key, v)?,
            "train.view_max" => t.view_range.1 = parse_num(key, v)?,
            "train.eval_every" => t.eval_every = parse_num(key, v)?,
            "train.eval_views" => t.eval_views = parse_num(key, v)?,
            "train.heldout_limit" => t.heldout_limit = parse_num(key, v)?,
            "train.log_every" => t.log_every = parse_num(key, v)?,
            "augment.tint_min" => t.augment.tint.0 = parse_num(key, v)?,
            "augment.tint_max" => t.augment.tint.1 = parse_num(key, v)?,
            "augment.max_translate" => t.augment.max_translate = parse_num(key, v)?,
            "augment.background" => t.augment.background = parse_enum(key, v, Background::parse)?,
            "augment.background_max" => t.augment.background_max = parse_num(key, v)?,
            "eval.threshold" => self.eval.threshold = parse_num(key, v)?,
            "eval.views" => self.eval.views = parse_list(key, v, |s| s.parse().ok())?,
            "compare.threshold" => self.compare.threshold = parse_num(key, v)?,
            "compare.views" => self.compare.views = parse_list(key, v, |s| s.parse().ok())?,
            "compare.textures" => self.compare.textures = parse_list(key, v, TextureLevel::parse)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        self.sync();
        Ok(())
    }

    /// Propagate the values several sub-configs share.
    fn sync(&mut self) {
        let n = &mut self.network;
        n.recurrence.feature_dim = n.encoder.feature_dim;
        n.decoder.in_channels = n.recurrence.hidden;
        n.decoder.grid = n.recurrence.grid;
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    n + 1
                )));
            };
            let k = k.trim().to_string();
            if let Some((first, _)) = pairs.get(&k) {
                return Err(Error::Config(format!(
                    "line {}: `{k}` already set on line {first}",
                    n + 1
                )));
            }
            pairs.insert(k, (n + 1, v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((line, p)) = pairs.remove("preset") {
            cfg.apply_preset(&p)
                .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("config: "))))?;
        }
        for (k, (line, v)) in &pairs {
            cfg.set_inner(k, v)
                .map_err(|m| Error::Config(format!("line {line}: {m}")))?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn canonical(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        let (grid, stages, n_vox) = (n.recurrence.grid, n.decoder.unpool_stages, n.decoder.n_vox);
        if grid.checked_shl(stages as u32) != Some(n_vox) {
            return Err(Error::Config(format!(
                "recurrence.grid {grid} unpooled {stages} times gives {}³ but decoder.n_vox is {n_vox}",
                grid << stages.min(32)
            )));
        }
        n.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.grid != n_vox {
            return Err(Error::Config(format!(
                "synth.grid {} differs from decoder.n_vox {n_vox}",
                self.synth.grid
            )));
        }
        if self.synth.image_size != n.encoder.input_size {
            return Err(Error::Config(format!(
                "synth.image_size {} differs from encoder.input_size {}",
                self.synth.image_size, n.encoder.input_size
            )));
        }
        if self.train.view_range.1 > self.synth.views {
            return Err(Error::Config(format!(
                "train.view_max {} exceeds the {} views rendered per sample",
                self.train.view_range.1, self.synth.views
            )));
        }
        if self.train.eval_views > self.synth.views {
            return Err(Error::Config(format!(
                "train.eval_views {} exceeds the {} views rendered per sample",
                self.train.eval_views, self.synth.views
            )));
        }
        for (name, t) in [("eval", self.eval.threshold), ("compare", self.compare.threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name}.threshold {t} must lie in (0, 1)")));
            }
        }
        for (name, views) in [("eval", &self.eval.views), ("compare", &self.compare.views)] {
            if views.is_empty() || views.iter().any(|&k| k == 0 || k > self.synth.views) {
                return Err(Error::Config(format!(
                    "{name}.views must be nonempty and within 1..={}",
                    self.synth.views
                )));
            }
        }
        if self.compare.textures.is_empty() {
            return Err(Error::Config("compare.textures must be nonempty".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }

    pub fn augment(&self) -> AugmentOptions {
        self.train.augment
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.network.encoder
    }

    pub fn recurrence(&self) -> &RecurrenceConfig {
        &self.network.recurrence
    }

    pub fn decoder(&self) -> &DecoderConfig {
        &self.network.decoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_canonical_is_a_fixed_point() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.canonical();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical(), text);
    }

    #[test]
    fn comments_presets_and_overrides() {
        let c = RunConfig::parse("# a run\npreset = 3d-lstm-1  # table row\nrecurrence.kernel = 3\nseed=9\n").unwrap();
        assert_eq!(c.network.recurrence.cell, CellKind::Lstm3d);
        assert_eq!(c.network.recurrence.kernel, 3);
        assert_eq!(c.network.encoder.variant, Variant::Shallow);
        assert_eq!((c.seed, c.train.seed, c.synth.seed), (9, 9, 9));
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(RunConfig::parse("nope = 1")
            .unwrap_err()
            .to_string()
            .contains("unknown key"));
        assert!(RunConfig::parse("seed = 1\nseed = 2")
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("preset = vgg").is_err());
    }

    #[test]
    fn unpool_mismatch_is_explained() {
        let c = RunConfig::parse("decoder.n_vox = 32").unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("decoder.n_vox is 32"), "{e}");
    }

    #[test]
    fn every_key_roundtrips_through_set() {
        let c = RunConfig::default();
        for (k, v) in c.entries() {
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }
}

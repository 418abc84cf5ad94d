//! Run configuration: a flat `key = value` document (or a flat JSON object)
//! with defaults for every key.

use std::path::{Path, PathBuf};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Injection, ModelConfig};
use crate::numcore::AdamConfig;
use crate::predictor::{Boundary, PredictorKind, SupportSpec};
use crate::synthvid::DegradationSpec;

/// Dataset used when no `data` file is given.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub degradation: DegradationSpec,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            clips: 200,
            frames: 8,
            height: 32,
            width: 32,
            classes: 4,
            seed: 0,
            degradation: DegradationSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub gen: GenSpec,
    pub classes: usize,
    pub patch: (usize, usize),
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    pub pos_embed: bool,
    pub predictor: PredictorKind,
    pub injection: Injection,
    pub support: SupportSpec,
    pub num_prompts: usize,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub eval_every: usize,
    pub eval_split: f64,
    pub seed: u64,
    pub record_wallclock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            gen: GenSpec::default(),
            classes: 4,
            patch: (8, 8),
            depth: 2,
            width: 32,
            heads: 2,
            ffn_hidden: 64,
            ln_eps: 1e-5,
            pos_embed: true,
            predictor: PredictorKind::Transformer,
            injection: Injection::Shallow,
            support: SupportSpec::default(),
            num_prompts: 7,
            adam: AdamConfig::default(),
            steps: 200,
            batch: 8,
            eval_every: 50,
            eval_split: 0.2,
            seed: 0,
            record_wallclock: false,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "data",
    "gen.clips",
    "gen.frames",
    "gen.size",
    "gen.classes",
    "gen.seed",
    "gen.blur_len",
    "gen.blur_angle",
    "gen.occl_frac",
    "gen.degrade_prob",
    "gen.deform_amp",
    "classes",
    "patch",
    "depth",
    "width",
    "heads",
    "ffn_hidden",
    "ln_eps",
    "pos_embed",
    "predictor",
    "injection",
    "S",
    "K",
    "NP",
    "boundary",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "steps",
    "batch",
    "eval_every",
    "eval_split",
    "seed",
    "record_wallclock",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

/// Parses `HxW` (or a single `N` meaning `NxN`).
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("invalid size {value:?}, expected HxW"));
    match value.split_once(['x', 'X']) {
        Some((h, w)) => Ok((
            h.trim().parse().map_err(|_| bad())?,
            w.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = value.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

impl RunConfig {
    /// Sets one key; keys `S`, `K` and `NP` are also accepted in lower case.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.gen.degradation;
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "gen.clips" => self.gen.clips = parse(key, value)?,
            "gen.frames" => self.gen.frames = parse(key, value)?,
            "gen.size" => (self.gen.height, self.gen.width) = parse_size(value)?,
            "gen.classes" => self.gen.classes = parse(key, value)?,
            "gen.seed" => self.gen.seed = parse(key, value)?,
            "gen.blur_len" => d.blur_len = parse(key, value)?,
            "gen.blur_angle" => d.blur_angle = parse(key, value)?,
            "gen.occl_frac" => d.occluder_fraction = parse(key, value)?,
            "gen.degrade_prob" => d.probability = parse(key, value)?,
            "gen.deform_amp" => d.deform_amplitude = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "patch" => self.patch = parse_size(value)?,
            "depth" => self.depth = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "pos_embed" => self.pos_embed = parse_bool(key, value)?,
            "predictor" => {
                self.predictor = match value {
                    "transformer" => PredictorKind::Transformer,
                    "mixer" => PredictorKind::Mixer,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid predictor {value:?}, expected transformer or mixer"
                        )))
                    }
                }
            }
            "injection" => {
                self.injection = match value {
                    "none" => Injection::None,
                    "shallow" => Injection::Shallow,
                    "deep" => Injection::Deep,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid injection {value:?}, expected none, shallow or deep"
                        )))
                    }
                }
            }
            "S" | "s" => self.support.stride = parse(key, value)?,
            "K" | "k" => self.support.count = parse(key, value)?,
            "NP" | "np" => self.num_prompts = parse(key, value)?,
            "boundary" => {
                self.support.boundary = match value {
                    "clamp" => Boundary::Clamp,
                    "reject" => Boundary::Reject,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid boundary {value:?}, expected clamp or reject"
                        )))
                    }
                }
            }
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_split" => self.eval_split = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "record_wallclock" => self.record_wallclock = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let d = &self.gen.degradation;
        Ok(match key {
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "gen.clips" => self.gen.clips.to_string(),
            "gen.frames" => self.gen.frames.to_string(),
            "gen.size" => format!("{}x{}", self.gen.height, self.gen.width),
            "gen.classes" => self.gen.classes.to_string(),
            "gen.seed" => self.gen.seed.to_string(),
            "gen.blur_len" => d.blur_len.to_string(),
            "gen.blur_angle" => d.blur_angle.to_string(),
            "gen.occl_frac" => d.occluder_fraction.to_string(),
            "gen.degrade_prob" => d.probability.to_string(),
            "gen.deform_amp" => d.deform_amplitude.to_string(),
            "classes" => self.classes.to_string(),
            "patch" => format!("{}x{}", self.patch.0, self.patch.1),
            "depth" => self.depth.to_string(),
            "width" => self.width.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "ln_eps" => self.ln_eps.to_string(),
            "pos_embed" => self.pos_embed.to_string(),
            "predictor" => match self.predictor {
                PredictorKind::Transformer => "transformer".into(),
                PredictorKind::Mixer => "mixer".into(),
            },
            "injection" => self.injection.as_str().into(),
            "S" | "s" => self.support.stride.to_string(),
            "K" | "k" => self.support.count.to_string(),
            "NP" | "np" => self.num_prompts.to_string(),
            "boundary" => match self.support.boundary {
                Boundary::Clamp => "clamp".into(),
                Boundary::Reject => "reject".into(),
            },
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_split" => self.eval_split.to_string(),
            "seed" => self.seed.to_string(),
            "record_wallclock" => self.record_wallclock.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses either format; JSON is recognised by a leading `{`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?;
            let obj = value
                .as_object()
                .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
            for (k, v) in obj {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Null => String::new(),
                    _ => return Err(Error::Config(format!("config key {k:?} must be a scalar"))),
                };
                cfg.set(k, &s)?;
            }
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
                cfg.set(k.trim(), v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data` path resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse_str(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.eval_split > 0.0 && self.eval_split < 1.0) {
            return Err(Error::Config(format!("eval_split {} not in (0, 1)", self.eval_split)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.support.count == 0 || self.support.stride == 0 {
            return Err(Error::Config("S and K must be at least 1".into()));
        }
        self.gen.degradation.validate()
    }

    /// Model layout for frames of the given size.
    pub fn model_config(&self, image: (usize, usize)) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image,
                patch: self.patch,
                depth: self.depth,
                width: self.width,
                heads: self.heads,
                ffn_hidden: self.ffn_hidden,
                ln_eps: self.ln_eps,
                pos_embed: self.pos_embed,
            },
            injection: self.injection,
            predictor: self.predictor,
            num_prompts: self.num_prompts,
            support: self.support,
            num_classes: self.classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.support.stride, c.support.count, c.num_prompts), (8, 7, 7));
        assert_eq!(c.injection, Injection::Shallow);
        assert_eq!(c.predictor, PredictorKind::Transformer);
    }

    #[test]
    fn flat_and_json_agree() {
        let flat = "# comment\nK = 3\nNP=5\npredictor = mixer\ngen.size = 16x24\npos_embed = false\n";
        let json = r#"{"K": 3, "NP": 5, "predictor": "mixer", "gen.size": "16x24", "pos_embed": false}"#;
        let a = RunConfig::parse_str(flat).unwrap();
        let b = RunConfig::parse_str(json).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.gen.height, a.gen.width), (16, 24));
        assert_eq!(a.support.count, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse_str("colour = red").is_err());
        assert!(RunConfig::parse_str("{\"bogus\": 1}").is_err());
        assert!(RunConfig::parse_str("K = many").is_err());
        assert!(RunConfig::parse_str("injection = sideways").is_err());
        assert!(RunConfig::parse_str("just text").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        assert!(c.apply_overrides(&["K"]).is_err());
    }

    #[test]
    fn overrides_win_in_order() {
        let mut c = RunConfig::parse_str("K = 3").unwrap();
        c.apply_overrides(&["K=5", "injection=none", "K=1"]).unwrap();
        assert_eq!(c.support.count, 1);
        assert_eq!(c.injection, Injection::None);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["lr=0.0025", "data=/tmp/x.stpv", "injection=deep", "gen.occl_frac=1"])
            .unwrap();
        let back = RunConfig::parse_str(&c.snapshot()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.snapshot().lines().count(), KEYS.len());
    }
}

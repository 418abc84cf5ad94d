//! The full pipeline: shared encoder, optional prompt predictor, optional
//! deep projections and a classification head, plus checkpoint IO.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::encoder::{encode_graph, head_graph, EncoderConfig, EncoderParams, Prompts};
use crate::error::{Error, Result};
use crate::numcore::serialize::{read_archive, write_archive};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{initialize, Leaves, LeavesMut, Linear};
use crate::predictor::{
    deep_leaves, deep_leaves_mut, init_deep_projections, predict_mixer_graph, predict_transformer_graph,
    project_deep_graph, sample_support_indices, MixerPredictorParams, PredictorKind, PredictorParams, SupportSpec,
    TransformerPredictorParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    None,
    Shallow,
    Deep,
}

impl Injection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Injection::None => "none",
            Injection::Shallow => "shallow",
            Injection::Deep => "deep",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub injection: Injection,
    pub predictor: PredictorKind,
    pub num_prompts: usize,
    pub support: SupportSpec,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if self.uses_predictor() && (self.support.count == 0 || self.support.stride == 0) {
            return Err(Error::Config("support stride and count must be positive".into()));
        }
        Ok(())
    }

    /// `N_P = 0` or `injection = none` leave the predictor out entirely.
    pub fn uses_predictor(&self) -> bool {
        self.injection != Injection::None && self.num_prompts > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub predictor: Option<PredictorParams<T>>,
    pub deep: Vec<Linear<T>>,
    pub head: Linear<T>,
}

impl Model<Tensor> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.encoder.width;
        let encoder = EncoderParams::init(&config.encoder, seed)?;
        let predictor = config.uses_predictor().then(|| match config.predictor {
            PredictorKind::Transformer => {
                PredictorParams::Transformer(TransformerPredictorParams::init(d, config.num_prompts, seed))
            }
            PredictorKind::Mixer => PredictorParams::Mixer(MixerPredictorParams::init(
                config.encoder.num_patches(),
                d,
                config.num_prompts,
                seed,
            )),
        });
        let deep = if config.uses_predictor() && config.injection == Injection::Deep {
            init_deep_projections(config.encoder.depth, d, seed)
        } else {
            Vec::new()
        };
        let mut head = Linear::zeros(config.num_classes, d);
        let mut leaves = Vec::new();
        head.leaves_mut("head.w".into(), "head.b".into(), &mut leaves);
        initialize(leaves, seed);
        Ok(Model {
            config: config.clone(),
            encoder,
            predictor,
            deep,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let leaves = self.leaves();
        write_archive(w, leaves.iter().map(|(n, _, t)| (n.as_str(), *t)))
    }

    /// Loads a checkpoint into the layout implied by `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, config)
    }

    pub fn read_from(r: &mut impl std::io::Read, config: &ModelConfig) -> Result<Self> {
        let entries = read_archive(r)?;
        let mut model = Model::init(config, 0)?;
        let mut stored: HashMap<String, Tensor> = HashMap::with_capacity(entries.len());
        for (name, t) in entries {
            if stored.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint {
                    name,
                    reason: "stored twice".into(),
                });
            }
        }
        for (name, _, slot) in model.leaves_mut() {
            let t = stored.remove(&name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint {
                    name,
                    reason: format!(
                        "checkpoint has shape {:?}, config expects {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = t;
        }
        if let Some(name) = stored.into_keys().min() {
            return Err(Error::Checkpoint {
                name,
                reason: "not used by this config".into(),
            });
        }
        Ok(model)
    }

    /// Binds every leaf as a trainable graph parameter.
    pub fn bind_params(&self, g: &mut Graph) -> Model<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    /// Binds every leaf as a constant (inference only).
    pub fn bind_constants(&self, g: &mut Graph) -> Model<Var> {
        self.map(&mut |t| g.constant(t.clone()))
    }
}

impl<T> Model<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Model<U> {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.map(f),
            predictor: self.predictor.as_ref().map(|p| p.map(f)),
            deep: self.deep.iter().map(|l| l.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    /// Every leaf with its checkpoint name, in a fixed order.
    pub fn leaves(&self) -> Leaves<'_, T> {
        let mut out = self.encoder.leaves();
        if let Some(p) = &self.predictor {
            out.extend(p.leaves());
        }
        out.extend(deep_leaves(&self.deep));
        self.head.leaves("head.w".into(), "head.b".into(), &mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> LeavesMut<'_, T> {
        let mut out = self.encoder.leaves_mut();
        if let Some(p) = &mut self.predictor {
            out.extend(p.leaves_mut());
        }
        out.extend(deep_leaves_mut(&mut self.deep));
        self.head.leaves_mut("head.w".into(), "head.b".into(), &mut out);
        out
    }
}

/// Builds the prompt argument for frame `t`. `support` maps a frame index to
/// its plain encoding; it is called once per sampled index.
pub fn prompts_graph(
    g: &mut Graph,
    m: &Model<Var>,
    t: usize,
    len: usize,
    support: &mut dyn FnMut(&mut Graph, usize) -> Result<Var>,
) -> Result<PromptVars> {
    let cfg = &m.config;
    let Some(pred) = &m.predictor else {
        return Ok(PromptVars::None);
    };
    let indices = sample_support_indices(t, &cfg.support, len)?;
    let sup = indices.iter().map(|&i| support(g, i)).collect::<Result<Vec<Var>>>()?;
    let eps = cfg.encoder.ln_eps;
    let base = match pred {
        PredictorParams::Transformer(p) => predict_transformer_graph(g, &sup, p, cfg.encoder.heads, eps)?,
        PredictorParams::Mixer(p) => predict_mixer_graph(g, &sup, p, eps)?,
    };
    Ok(match cfg.injection {
        Injection::Deep => PromptVars::Deep(project_deep_graph(g, base, &m.deep)?),
        _ => PromptVars::Shallow(base),
    })
}

pub enum PromptVars {
    None,
    Shallow(Var),
    Deep(Vec<Var>),
}

impl PromptVars {
    pub fn as_prompts(&self) -> Prompts<'_> {
        match self {
            PromptVars::None => Prompts::None,
            PromptVars::Shallow(v) => Prompts::Shallow(*v),
            PromptVars::Deep(v) => Prompts::Deep(v),
        }
    }
}

/// Logits `[1 × C]` for frame `t` of `frames`, encoding support frames in
/// the same graph so gradients reach the encoder through both stages.
pub fn forward_graph(g: &mut Graph, m: &Model<Var>, frames: &[Tensor], t: usize) -> Result<Var> {
    let frame = frames
        .get(t)
        .ok_or_else(|| Error::Config(format!("frame {t} outside clip of length {}", frames.len())))?;
    let prompts = prompts_graph(g, m, t, frames.len(), &mut |g, i| {
        Ok(encode_graph(g, &frames[i], &m.encoder, Prompts::None)?.patches)
    })?;
    let enc = encode_graph(g, frame, &m.encoder, prompts.as_prompts())?;
    head_graph(g, enc.patches, &m.head)
}

/// Cross-entropy of one `(clip, t)` sample; returns the loss node.
pub fn loss_graph(g: &mut Graph, m: &Model<Var>, frames: &[Tensor], t: usize, label: usize) -> Result<Var> {
    let logits = forward_graph(g, m, frames, t)?;
    g.cross_entropy(logits, label)
}

/// Loss value and gradients for every leaf, in `leaves()` order.
pub fn sample_gradients(
    model: &Model<Tensor>,
    frames: &[Tensor],
    t: usize,
    label: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let m = model.bind_params(&mut g);
    let loss = loss_graph(&mut g, &m, frames, t, label)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value} at frame {t}")));
    }
    let grads = g.backward(loss)?;
    Ok((value, m.leaves().iter().map(|(_, _, v)| grads.get(**v)).collect()))
}

/// Logits for every frame of a clip. Each frame is encoded plainly at most
/// once and reused as support for its neighbours.
pub fn predict_clip(model: &Model<Tensor>, frames: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let m = model.bind_constants(&mut g);
    let mut plain: Vec<Option<Var>> = vec![None; frames.len()];
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let prompts = prompts_graph(&mut g, &m, t, frames.len(), &mut |g, i| {
            if let Some(v) = plain[i] {
                return Ok(v);
            }
            let v = encode_graph(g, &frames[i], &m.encoder, Prompts::None)?.patches;
            plain[i] = Some(v);
            Ok(v)
        })?;
        let enc = encode_graph(&mut g, &frames[t], &m.encoder, prompts.as_prompts())?;
        let logits = head_graph(&mut g, enc.patches, &m.head)?;
        out.push(g.value(logits).clone());
    }
    Ok(out)
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

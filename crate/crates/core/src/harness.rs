//! Training, evaluation, hyper-parameter sweeps and the gradient-check suite.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::encoder::{encode_graph, head_graph, EncoderConfig, Prompts};
use crate::error::{Error, Result};
use crate::model::{argmax, loss_graph, predict_clip, sample_gradients, Injection, Model, ModelConfig};
use crate::numcore::{adam_step, finite_diff_report, AdamState, Graph, Rng, Tensor, Var};
use crate::params::Role;
use crate::predictor::{PredictorKind, SupportSpec};
use crate::synthvid::{gen_dataset, motion_iou_category, read_dataset, Clip, SpeedCategory, MOTION_IOU_WINDOW};

pub const METRICS_HEADER: &str = "step,loss,acc,acc_degraded,acc_clean,acc_slow,acc_medium,acc_fast,sec";
pub const SWEEP_HEADER: &str = "param,value,acc,acc_degraded,steps_per_sec";

/// Frame counts per stratum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StratumCounts {
    pub total: usize,
    pub degraded: usize,
    pub clean: usize,
    pub slow: usize,
    pub medium: usize,
    pub fast: usize,
}

/// One evaluation. Stratum accuracies are `None` when the stratum is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub acc_degraded: Option<f64>,
    pub acc_clean: Option<f64>,
    pub acc_slow: Option<f64>,
    pub acc_medium: Option<f64>,
    pub acc_fast: Option<f64>,
    pub sec: f64,
    pub counts: StratumCounts,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{},{},{},{:.3}",
            self.step,
            self.loss,
            self.acc,
            opt_field(self.acc_degraded),
            opt_field(self.acc_clean),
            opt_field(self.acc_slow),
            opt_field(self.acc_medium),
            opt_field(self.acc_fast),
            self.sec
        )
    }
}

pub fn metrics_csv(history: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Worker pool size; 1 runs everything on the calling thread.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { threads: 1 }
    }
}

impl TrainOptions {
    /// Reads `STPN_THREADS` (default 1).
    pub fn from_env() -> Result<Self> {
        match std::env::var("STPN_THREADS") {
            Err(_) => Ok(Self::default()),
            Ok(v) => {
                let threads: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("STPN_THREADS={v:?} is not a positive integer")))?;
                if threads == 0 {
                    return Err(Error::Config("STPN_THREADS must be at least 1".into()));
                }
                Ok(TrainOptions { threads })
            }
        }
    }

    /// Maps `f` over `0..n`; results come back in index order either way.
    fn map_indexed<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
        if self.threads <= 1 || n <= 1 {
            return Ok((0..n).map(f).collect());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
    }
}

/// Loads `data`, or generates the dataset described by the `gen.*` keys.
pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Clip>> {
    match &cfg.data {
        Some(path) => read_dataset(path).map_err(|e| match e {
            Error::Io(io) => Error::Format(format!("cannot read dataset {}: {io}", path.display())),
            other => other,
        }),
        None => {
            let g = &cfg.gen;
            gen_dataset(g.seed, g.clips, g.frames, g.height, g.width, g.classes, &g.degradation)
        }
    }
}

/// Common frame size of the clips and a check that labels fit `classes`.
pub fn check_dataset(clips: &[Clip], classes: usize) -> Result<(usize, usize)> {
    let first = clips.first().ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let size = (first.height, first.width);
    for (i, c) in clips.iter().enumerate() {
        if (c.height, c.width) != size {
            return Err(Error::Format(format!(
                "clip {i} is {}x{}, expected {}x{}",
                c.height, c.width, size.0, size.1
            )));
        }
        if c.is_empty() {
            return Err(Error::Format(format!("clip {i} has no frames")));
        }
        if c.class_label as usize >= classes {
            return Err(Error::Config(format!(
                "clip {i} has label {} but the model has {classes} classes",
                c.class_label
            )));
        }
    }
    Ok(size)
}

/// Trailing `eval_split` share of clips (at least one) is held out.
pub fn split_dataset(clips: &[Clip], eval_split: f64) -> Result<(&[Clip], &[Clip])> {
    let n_eval = ((clips.len() as f64 * eval_split).round() as usize).max(1);
    if n_eval >= clips.len() {
        return Err(Error::Config(format!(
            "{} clips cannot be split into train and eval sets",
            clips.len()
        )));
    }
    Ok(clips.split_at(clips.len() - n_eval))
}

fn cross_entropy(logits: &Tensor, label: usize) -> f64 {
    let d = logits.data();
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(d.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    lse - d[label]
}

/// Accuracy overall and per stratum for per-frame predictions.
pub fn score_predictions(clips: &[Clip], predictions: &[Vec<usize>]) -> Result<MetricRecord> {
    if clips.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    if predictions.len() != clips.len() {
        return Err(Error::shape("score_predictions", &[clips.len()], &[predictions.len()]));
    }
    let mut counts = StratumCounts::default();
    let mut hits = StratumCounts::default();
    for (clip, preds) in clips.iter().zip(predictions) {
        if preds.len() != clip.len() {
            return Err(Error::shape("score_predictions", &[clip.len()], &[preds.len()]));
        }
        let speed = if clip.len() >= 2 {
            motion_iou_category(&clip.track, MOTION_IOU_WINDOW)?.0
        } else {
            SpeedCategory::Slow
        };
        for (t, &p) in preds.iter().enumerate() {
            let hit = (p == clip.class_label as usize) as usize;
            counts.total += 1;
            hits.total += hit;
            if clip.degraded[t] {
                counts.degraded += 1;
                hits.degraded += hit;
            } else {
                counts.clean += 1;
                hits.clean += hit;
            }
            let (c, h) = match speed {
                SpeedCategory::Slow => (&mut counts.slow, &mut hits.slow),
                SpeedCategory::Medium => (&mut counts.medium, &mut hits.medium),
                SpeedCategory::Fast => (&mut counts.fast, &mut hits.fast),
            };
            *c += 1;
            *h += hit;
        }
    }
    let ratio = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(MetricRecord {
        step: 0,
        loss: 0.0,
        acc: hits.total as f64 / counts.total as f64,
        acc_degraded: ratio(hits.degraded, counts.degraded),
        acc_clean: ratio(hits.clean, counts.clean),
        acc_slow: ratio(hits.slow, counts.slow),
        acc_medium: ratio(hits.medium, counts.medium),
        acc_fast: ratio(hits.fast, counts.fast),
        sec: 0.0,
        counts,
    })
}

/// Scores every frame of every clip; `loss` is the mean cross-entropy.
pub fn evaluate(model: &Model<Tensor>, clips: &[Clip], opts: &TrainOptions) -> Result<MetricRecord> {
    if clips.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    check_dataset(clips, model.config.num_classes)?;
    let per_clip = opts.map_indexed(clips.len(), |i| predict_clip(model, &clips[i].frames))?;
    let mut predictions = Vec::with_capacity(clips.len());
    let mut loss = 0.0;
    let mut frames = 0usize;
    for (clip, logits) in clips.iter().zip(per_clip) {
        let logits = logits?;
        predictions.push(logits.iter().map(argmax).collect());
        for l in &logits {
            loss += cross_entropy(l, clip.class_label as usize);
            frames += 1;
        }
    }
    let mut rec = score_predictions(clips, &predictions)?;
    rec.loss = loss / frames as f64;
    if !rec.loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss is {}", rec.loss)));
    }
    Ok(rec)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<Tensor>,
    pub history: Vec<MetricRecord>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Wall-clock seconds per optimizer step.
    pub step_times: Vec<f64>,
}

impl TrainOutcome {
    /// `1 / median step time`; 0 when no step ran.
    pub fn steps_per_sec(&self) -> f64 {
        if self.step_times.is_empty() {
            return 0.0;
        }
        let mut t = self.step_times.clone();
        t.sort_by(f64::total_cmp);
        let mid = t.len() / 2;
        let median = if t.len() % 2 == 1 {
            t[mid]
        } else {
            0.5 * (t[mid - 1] + t[mid])
        };
        1.0 / median
    }
}

/// Trains jointly over every parameter with Adam on batches of random
/// `(clip, t)` pairs, evaluating every `eval_every` steps and at the end.
pub fn train(cfg: &RunConfig, train_clips: &[Clip], eval_clips: &[Clip], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_clips.is_empty() || eval_clips.is_empty() {
        return Err(Error::Config("training needs non-empty train and eval sets".into()));
    }
    let size = check_dataset(train_clips, cfg.classes)?;
    if check_dataset(eval_clips, cfg.classes)? != size {
        return Err(Error::Format("train and eval clips differ in frame size".into()));
    }
    let mcfg = cfg.model_config(size);
    let mut model = Model::init(&mcfg, cfg.seed)?;
    info!(
        "training {} parameters for {} steps ({} train / {} eval clips, {} thread(s))",
        model.num_parameters(),
        cfg.steps,
        train_clips.len(),
        eval_clips.len(),
        opts.threads
    );
    let mut state = AdamState::new(model.leaves().into_iter().map(|(_, _, t)| t));
    let mut rng = Rng::derive(cfg.seed, "batches");
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut step_times = Vec::with_capacity(cfg.steps);
    let mut elapsed = 0.0;
    let mut since_eval = Vec::new();
    for step in 1..=cfg.steps {
        let batch: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let c = rng.below(train_clips.len() as u64) as usize;
                let t = rng.below(train_clips[c].len() as u64) as usize;
                (c, t)
            })
            .collect();
        let start = Instant::now();
        let results = opts.map_indexed(batch.len(), |i| {
            let (c, t) = batch[i];
            let clip = &train_clips[c];
            sample_gradients(&model, &clip.frames, t, clip.class_label as usize)
        })?;
        let mut total: Option<Vec<Tensor>> = None;
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r.map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
                other => other,
            })?;
            loss += l;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        let grads: Vec<Tensor> = total.unwrap_or_default().iter().map(|g| g.scale(inv)).collect();
        let loss = loss * inv;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!(
                "step {step}: loss {loss} or its gradient is not finite"
            )));
        }
        {
            let mut params: Vec<&mut Tensor> = model.leaves_mut().into_iter().map(|(_, _, t)| t).collect();
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
        }
        let dt = start.elapsed().as_secs_f64();
        step_times.push(dt);
        elapsed += dt;
        losses.push(loss);
        since_eval.push(loss);
        debug!("step {step}: loss {loss:.6}");

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let mut rec = evaluate(&model, eval_clips, opts)?;
            rec.step = step;
            rec.loss = since_eval.iter().sum::<f64>() / since_eval.len() as f64;
            rec.sec = if cfg.record_wallclock { elapsed } else { 0.0 };
            since_eval.clear();
            info!(
                "step {step}: train loss {:.4}, eval acc {:.4} (degraded {})",
                rec.loss,
                rec.acc,
                opt_field(rec.acc_degraded)
            );
            history.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        losses,
        step_times,
    })
}

/// Loads data, trains and writes `config.snapshot`, `metrics.csv` and
/// `final.ckpt` into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let clips = load_dataset(cfg)?;
    check_dataset(&clips, cfg.classes)?;
    let (train_clips, eval_clips) = split_dataset(&clips, cfg.eval_split)?;
    let outcome = train(cfg, train_clips, eval_clips, opts)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.snapshot"), cfg.snapshot())?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&outcome.history))?;
    outcome.model.save(&out.join("final.ckpt"))?;
    Ok(outcome)
}

/// Loads a checkpoint laid out per `cfg` and evaluates it on all of `clips`.
pub fn evaluate_checkpoint(ckpt: &Path, clips: &[Clip], cfg: &RunConfig, opts: &TrainOptions) -> Result<MetricRecord> {
    let size = check_dataset(clips, cfg.classes)?;
    let model = Model::load(ckpt, &cfg.model_config(size))?;
    evaluate(&model, clips, opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    S,
    K,
    NP,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(SweepParam::S),
            "K" => Ok(SweepParam::K),
            "NP" => Ok(SweepParam::NP),
            _ => Err(Error::Config(format!(
                "unknown sweep parameter {s:?}, expected S, K or NP"
            ))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            SweepParam::S => "S",
            SweepParam::K => "K",
            SweepParam::NP => "NP",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: usize,
    pub record: MetricRecord,
    pub steps_per_sec: f64,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.3}",
            self.param.key(),
            self.value,
            self.record.acc,
            opt_field(self.record.acc_degraded),
            self.steps_per_sec
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// One train + evaluate per value on the same data; the final evaluation of
/// each run is reported.
pub fn ablation_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[usize],
    clips: &[Clip],
    opts: &TrainOptions,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let (train_clips, eval_clips) = split_dataset(clips, base.eval_split)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        cfg.set(param.key(), &value.to_string())?;
        info!("sweep {}={value}", param.key());
        let outcome = train(&cfg, train_clips, eval_clips, opts)?;
        let record = match outcome.history.last() {
            Some(r) => r.clone(),
            None => evaluate(&outcome.model, eval_clips, opts)?,
        };
        rows.push(SweepRow {
            param,
            value,
            record,
            steps_per_sec: outcome.steps_per_sec(),
        });
    }
    Ok(rows)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradGroup {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradGroup {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSuite {
    pub groups: Vec<GradGroup>,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GradGroup::passed)
    }

    /// `group,max_rel_error,coordinates,status` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,max_rel_error,coordinates,status\n");
        for g in &self.groups {
            let status = if g.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{},{:.3e},{},{}", g.name, g.max_rel_error, g.coordinates, status);
        }
        out
    }
}

/// Small model used by the gradient checks: 8×8 frames, 4×4 patches (n = 4),
/// d = 8, two layers.
pub fn gradcheck_config(injection: Injection, predictor: PredictorKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image: (8, 8),
            patch: (4, 4),
            depth: 2,
            width: 8,
            heads: 2,
            ffn_hidden: 16,
            ln_eps: 1e-5,
            pos_embed: true,
        },
        injection,
        predictor,
        num_prompts: 2,
        support: SupportSpec {
            stride: 1,
            count: 2,
            ..SupportSpec::default()
        },
        num_classes: 3,
    }
}

/// Model with weights large enough that every nonlinearity is exercised.
fn loud_model(cfg: &ModelConfig, seed: u64) -> Result<Model<Tensor>> {
    let mut m = Model::init(cfg, seed)?;
    for (name, role, t) in m.leaves_mut() {
        let mut rng = Rng::derive(seed, &format!("loud.{name}"));
        let noise = rng.normal_tensor(t.shape(), 1.0);
        *t = match role {
            Role::Weight => noise.scale(0.4),
            Role::Bias => noise.scale(0.1),
            Role::Gain => Tensor::ones(t.shape()).add(&noise.scale(0.2))?,
        };
    }
    Ok(m)
}

/// Binds `model` as constants except for the leaves named in `checked`,
/// which take the matching entries of `vars`.
fn bind_checked(g: &mut Graph, model: &Model<Tensor>, checked: &[String], vars: &[Var]) -> Model<Var> {
    let mut m = model.bind_constants(g);
    for (name, _, slot) in m.leaves_mut() {
        if let Some(i) = checked.iter().position(|c| *c == name) {
            *slot = vars[i];
        }
    }
    m
}

fn check_leaves(
    name: &'static str,
    model: &Model<Tensor>,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&mut Graph, &Model<Var>) -> Result<Var>,
) -> Result<GradGroup> {
    let (names, params): (Vec<String>, Vec<Tensor>) = model
        .leaves()
        .into_iter()
        .filter(|(n, _, _)| select(n))
        .map(|(n, _, t)| (n, t.clone()))
        .unzip();
    let report = finite_diff_report(&params, GRADCHECK_EPS, |g, vars| {
        let m = bind_checked(g, model, &names, vars);
        loss(g, &m)
    })?;
    Ok(GradGroup {
        name,
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
    })
}

/// Central-difference checks of every gradient path on a tiny model.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckSuite> {
    let mut rng = Rng::derive(seed, "gradcheck.frames");
    let frames: Vec<Tensor> = (0..4).map(|_| rng.uniform_tensor(&[3, 8, 8])).collect();
    let label = 1;
    let t = 2;
    let mut groups = Vec::new();

    let plain = loud_model(&gradcheck_config(Injection::None, PredictorKind::Transformer), seed)?;
    let features = rng.normal_tensor(&[4, 8], 1.0);
    groups.push(check_leaves(
        "head",
        &plain,
        |n| n.starts_with("head."),
        |g, m| {
            let f = g.constant(features.clone());
            let logits = head_graph(g, f, &m.head)?;
            g.cross_entropy(logits, label)
        },
    )?);
    groups.push(check_leaves(
        "encoder",
        &plain,
        |n| n.starts_with("encoder."),
        |g, m| loss_graph(g, m, &frames, t, label),
    )?);

    let shallow = loud_model(&gradcheck_config(Injection::None, PredictorKind::Transformer), seed)?;
    let prompt = rng.normal_tensor(&[2, 8], 1.0);
    let report = finite_diff_report(&[prompt], GRADCHECK_EPS, |g, vars| {
        let m = shallow.bind_constants(g);
        let enc = encode_graph(g, &frames[t], &m.encoder, Prompts::Shallow(vars[0]))?;
        let logits = head_graph(g, enc.patches, &m.head)?;
        g.cross_entropy(logits, label)
    })?;
    groups.push(GradGroup {
        name: "prompts",
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
    });
    let sets: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[2, 8], 1.0)).collect();
    let report = finite_diff_report(&sets, GRADCHECK_EPS, |g, vars| {
        let m = shallow.bind_constants(g);
        let enc = encode_graph(g, &frames[t], &m.encoder, Prompts::Deep(vars))?;
        let logits = head_graph(g, enc.patches, &m.head)?;
        g.cross_entropy(logits, label)
    })?;
    groups.push(GradGroup {
        name: "deep-prompts",
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
    });

    let pipeline = |g: &mut Graph, m: &Model<Var>| loss_graph(g, m, &frames, t, label);
    let tr = loud_model(&gradcheck_config(Injection::Shallow, PredictorKind::Transformer), seed)?;
    groups.push(check_leaves(
        "transformer-predictor",
        &tr,
        |n| n.starts_with("predictor."),
        pipeline,
    )?);
    groups.push(check_leaves(
        "pipeline-encoder",
        &tr,
        |n| n.starts_with("encoder."),
        pipeline,
    )?);
    let mx = loud_model(&gradcheck_config(Injection::Shallow, PredictorKind::Mixer), seed)?;
    groups.push(check_leaves(
        "mixer-predictor",
        &mx,
        |n| n.starts_with("mixer."),
        pipeline,
    )?);
    let deep = loud_model(&gradcheck_config(Injection::Deep, PredictorKind::Mixer), seed)?;
    groups.push(check_leaves(
        "deep",
        &deep,
        |n| n.starts_with("deep.") || n.starts_with("mixer."),
        pipeline,
    )?);
    Ok(GradCheckSuite { groups })
}

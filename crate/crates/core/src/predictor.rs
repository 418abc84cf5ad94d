//! Support-frame sampling and the two prompt predictors.
//!
//! The transformer predictor lets learnable prompt queries cross-attend to
//! the concatenated support tokens. The Mixer predictor averages supports
//! over time, mixes the token axis into `N_P` slots and then maps channels.

use crate::encoder::{encode_graph, mha_graph, EncoderParams, Prompts};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{initialize, Attention, Ffn, Leaves, LeavesMut, Linear, Norm, Role};

/// How sampled indices outside the clip are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Clamp into `[0, T-1]`; duplicates are kept so `K` stays constant.
    Clamp,
    /// Fail when any index leaves the clip.
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupportSpec {
    pub stride: usize,
    pub count: usize,
    pub boundary: Boundary,
}

impl Default for SupportSpec {
    fn default() -> Self {
        SupportSpec {
            stride: 8,
            count: 7,
            boundary: Boundary::Clamp,
        }
    }
}

/// Support frame indices around `t`, ascending.
///
/// Even `K` takes `K/2` frames on each side at multiples of `S`; odd `K`
/// takes the extra frame from the past.
pub fn sample_support_indices(t: usize, spec: &SupportSpec, len: usize) -> Result<Vec<usize>> {
    if spec.count == 0 {
        return Err(Error::Config("support count K must be at least 1".into()));
    }
    if spec.stride == 0 {
        return Err(Error::Config("temporal stride S must be at least 1".into()));
    }
    if t >= len {
        return Err(Error::Config(format!("frame {t} outside clip of length {len}")));
    }
    let past = spec.count.div_ceil(2) as i64;
    let future = (spec.count / 2) as i64;
    let s = spec.stride as i64;
    let t = t as i64;
    let raw = (1..=past)
        .rev()
        .map(|k| t - k * s)
        .chain((1..=future).map(|k| t + k * s));
    let last = len as i64 - 1;
    let mut out = Vec::with_capacity(spec.count);
    for i in raw {
        let idx = match spec.boundary {
            Boundary::Clamp => i.clamp(0, last),
            Boundary::Reject if (0..=last).contains(&i) => i,
            Boundary::Reject => return Err(Error::Config(format!("support index {i} outside clip of length {len}"))),
        };
        out.push(idx as usize);
    }
    Ok(out)
}

/// `N_P` prompt embeddings of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet(pub Tensor);

impl PromptSet {
    pub fn empty(width: usize) -> Self {
        PromptSet(Tensor::zeros(&[0, width]))
    }

    pub fn count(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerPredictorParams<T> {
    /// Learnable prompt queries `[N_P × d_L]`.
    pub queries: T,
    pub attn: Attention<T>,
    /// Applied to both the queries and the support tokens before attention.
    pub ln1: Norm<T>,
    pub ln2: Norm<T>,
    pub ffn: Ffn<T>,
}

impl TransformerPredictorParams<Tensor> {
    pub fn init(width: usize, num_prompts: usize, seed: u64) -> Self {
        let mut p = TransformerPredictorParams {
            queries: Tensor::zeros(&[num_prompts, width]),
            attn: Attention::zeros(width),
            ln1: Norm::new(width),
            ln2: Norm::new(width),
            ffn: Ffn::zeros(width, 2 * width, width),
        };
        initialize(p.leaves_mut(), seed);
        p
    }
}

impl<T> TransformerPredictorParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> TransformerPredictorParams<U> {
        TransformerPredictorParams {
            queries: f(&self.queries),
            attn: self.attn.map(f),
            ln1: self.ln1.map(f),
            ln2: self.ln2.map(f),
            ffn: self.ffn.map(f),
        }
    }

    pub fn leaves(&self) -> Leaves<'_, T> {
        let mut out = vec![("predictor.q".to_string(), Role::Weight, &self.queries)];
        self.attn.leaves("predictor.mha", &mut out);
        self.ln1.leaves("predictor.ln1", &mut out);
        self.ln2.leaves("predictor.ln2", &mut out);
        self.ffn.leaves("predictor.ffn", &mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> LeavesMut<'_, T> {
        let mut out = vec![("predictor.q".to_string(), Role::Weight, &mut self.queries)];
        self.attn.leaves_mut("predictor.mha", &mut out);
        self.ln1.leaves_mut("predictor.ln1", &mut out);
        self.ln2.leaves_mut("predictor.ln2", &mut out);
        self.ffn.leaves_mut("predictor.ffn", &mut out);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerPredictorParams<T> {
    /// LayerNorm over `d_L`.
    pub ln1: Norm<T>,
    /// Token mixing `n_L → 2·n_L → N_P`.
    pub mix: Ffn<T>,
    /// LayerNorm over the `N_P` axis.
    pub ln2: Norm<T>,
    /// Channel map `d_L → 2·d_L → d`.
    pub chan: Ffn<T>,
}

impl MixerPredictorParams<Tensor> {
    pub fn init(tokens: usize, width: usize, num_prompts: usize, seed: u64) -> Self {
        let mut p = MixerPredictorParams {
            ln1: Norm::new(width),
            mix: Ffn::zeros(tokens, 2 * tokens, num_prompts),
            ln2: Norm::new(num_prompts),
            chan: Ffn::zeros(width, 2 * width, width),
        };
        initialize(p.leaves_mut(), seed);
        p
    }
}

impl<T> MixerPredictorParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> MixerPredictorParams<U> {
        MixerPredictorParams {
            ln1: self.ln1.map(f),
            mix: self.mix.map(f),
            ln2: self.ln2.map(f),
            chan: self.chan.map(f),
        }
    }

    pub fn leaves(&self) -> Leaves<'_, T> {
        let mut out = Vec::new();
        self.ln1.leaves("mixer.ln1", &mut out);
        self.mix.leaves("mixer.mix", &mut out);
        self.ln2.leaves("mixer.ln2", &mut out);
        self.chan.leaves("mixer.chan", &mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> LeavesMut<'_, T> {
        let mut out = Vec::new();
        self.ln1.leaves_mut("mixer.ln1", &mut out);
        self.mix.leaves_mut("mixer.mix", &mut out);
        self.ln2.leaves_mut("mixer.ln2", &mut out);
        self.chan.leaves_mut("mixer.chan", &mut out);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    Transformer,
    Mixer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictorParams<T> {
    Transformer(TransformerPredictorParams<T>),
    Mixer(MixerPredictorParams<T>),
}

impl<T> PredictorParams<T> {
    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorParams::Transformer(_) => PredictorKind::Transformer,
            PredictorParams::Mixer(_) => PredictorKind::Mixer,
        }
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> PredictorParams<U> {
        match self {
            PredictorParams::Transformer(p) => PredictorParams::Transformer(p.map(f)),
            PredictorParams::Mixer(p) => PredictorParams::Mixer(p.map(f)),
        }
    }

    pub fn leaves(&self) -> Leaves<'_, T> {
        match self {
            PredictorParams::Transformer(p) => p.leaves(),
            PredictorParams::Mixer(p) => p.leaves(),
        }
    }

    pub fn leaves_mut(&mut self) -> LeavesMut<'_, T> {
        match self {
            PredictorParams::Transformer(p) => p.leaves_mut(),
            PredictorParams::Mixer(p) => p.leaves_mut(),
        }
    }
}

/// Per-layer projections `d → d` for the deep variant.
pub fn init_deep_projections(depth: usize, width: usize, seed: u64) -> Vec<Linear<Tensor>> {
    let mut fcs: Vec<Linear<Tensor>> = (0..depth).map(|_| Linear::zeros(width, width)).collect();
    initialize(deep_leaves_mut(&mut fcs), seed);
    fcs
}

pub fn deep_leaves<T>(fcs: &[Linear<T>]) -> Leaves<'_, T> {
    let mut out = Vec::new();
    for (i, fc) in fcs.iter().enumerate() {
        fc.leaves(format!("deep.fc{i}.w"), format!("deep.fc{i}.b"), &mut out);
    }
    out
}

pub fn deep_leaves_mut<T>(fcs: &mut [Linear<T>]) -> LeavesMut<'_, T> {
    let mut out = Vec::new();
    for (i, fc) in fcs.iter_mut().enumerate() {
        fc.leaves_mut(format!("deep.fc{i}.w"), format!("deep.fc{i}.b"), &mut out);
    }
    out
}

/// Encodes every support frame without prompts using the shared encoder.
pub fn extract_support_graph(
    g: &mut Graph,
    frames: &[Tensor],
    indices: &[usize],
    encoder: &EncoderParams<Var>,
) -> Result<Vec<Var>> {
    indices
        .iter()
        .map(|&i| {
            let frame = frames
                .get(i)
                .ok_or_else(|| Error::Config(format!("support index {i} outside clip of length {}", frames.len())))?;
            Ok(encode_graph(g, frame, encoder, Prompts::None)?.patches)
        })
        .collect()
}

fn check_supports(g: &Graph, support: &[Var], op: &'static str) -> Result<()> {
    let first = *support.first().ok_or(Error::EmptyAxis { op })?;
    let shape = g.shape(first).to_vec();
    for s in support {
        if g.shape(*s) != shape.as_slice() {
            return Err(Error::shape(op, &shape, g.shape(*s)));
        }
    }
    Ok(())
}

/// `K = Concat(E_sup)`; `Q̂ = MHA(LN(Q), LN(K)) + Q`; `P = FFN(LN(Q̂)) + LN(Q̂)`.
pub fn predict_transformer_graph(
    g: &mut Graph,
    support: &[Var],
    p: &TransformerPredictorParams<Var>,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    check_supports(g, support, "predict_transformer")?;
    let context = g.concat_rows(support)?;
    let q = p.ln1.apply(g, p.queries, eps)?;
    let k = p.ln1.apply(g, context, eps)?;
    let attended = mha_graph(g, q, k, &p.attn, heads)?;
    let q_hat = g.add(attended, p.queries)?;
    let normed = p.ln2.apply(g, q_hat, eps)?;
    let f = p.ffn.apply(g, normed)?;
    g.add(f, normed)
}

/// Returns the hidden `[d_L × N_P]` map and the prompts `[N_P × d]`.
pub fn predict_mixer_graph_with_hidden(
    g: &mut Graph,
    support: &[Var],
    p: &MixerPredictorParams<Var>,
    eps: f64,
) -> Result<(Var, Var)> {
    check_supports(g, support, "predict_mixer")?;
    let tokens = g.shape(support[0])[0];
    let expected = g.shape(p.mix.fc1.w)[1];
    if tokens != expected {
        return Err(Error::shape("predict_mixer", g.shape(support[0]), &[expected]));
    }
    let mean = g.mean_stack(support)?;
    let normed = p.ln1.apply(g, mean, eps)?;
    let transposed = g.transpose(normed)?;
    let hidden = p.mix.apply(g, transposed)?;
    let normed = p.ln2.apply(g, hidden, eps)?;
    let back = g.transpose(normed)?;
    let prompts = p.chan.apply(g, back)?;
    Ok((hidden, prompts))
}

pub fn predict_mixer_graph(g: &mut Graph, support: &[Var], p: &MixerPredictorParams<Var>, eps: f64) -> Result<Var> {
    Ok(predict_mixer_graph_with_hidden(g, support, p, eps)?.1)
}

pub fn project_deep_graph(g: &mut Graph, base: Var, fcs: &[Linear<Var>]) -> Result<Vec<Var>> {
    fcs.iter().map(|fc| fc.apply(g, base)).collect()
}

/// Last-layer embeddings of each support frame, in index order.
pub fn extract_support_embeddings(
    frames: &[Tensor],
    indices: &[usize],
    encoder: &EncoderParams<Tensor>,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let e = encoder.map(&mut |t| g.constant(t.clone()));
    let vars = extract_support_graph(&mut g, frames, indices, &e)?;
    Ok(vars.into_iter().map(|v| g.value(v).clone()).collect())
}

pub fn predict_transformer(
    support: &[Tensor],
    params: &TransformerPredictorParams<Tensor>,
    heads: usize,
    eps: f64,
) -> Result<PromptSet> {
    let mut g = Graph::new();
    let p = params.map(&mut |t| g.constant(t.clone()));
    let s: Vec<Var> = support.iter().map(|t| g.constant(t.clone())).collect();
    let out = predict_transformer_graph(&mut g, &s, &p, heads, eps)?;
    Ok(PromptSet(g.value(out).clone()))
}

pub fn predict_mixer(support: &[Tensor], params: &MixerPredictorParams<Tensor>, eps: f64) -> Result<PromptSet> {
    let mut g = Graph::new();
    let p = params.map(&mut |t| g.constant(t.clone()));
    let s: Vec<Var> = support.iter().map(|t| g.constant(t.clone())).collect();
    let out = predict_mixer_graph(&mut g, &s, &p, eps)?;
    Ok(PromptSet(g.value(out).clone()))
}

/// `P^i = base · W_iᵀ + b_i` for each of the `depth` maps; set `i` feeds layer `i+1`.
pub fn project_deep(base: &PromptSet, fcs: &[Linear<Tensor>], depth: usize) -> Result<Vec<PromptSet>> {
    if fcs.len() != depth {
        return Err(Error::Config(format!(
            "deep prompting needs {depth} projections, got {}",
            fcs.len()
        )));
    }
    let mut g = Graph::new();
    let b = g.constant(base.0.clone());
    let f: Vec<Linear<Var>> = fcs.iter().map(|fc| fc.map(&mut |t| g.constant(t.clone()))).collect();
    let sets = project_deep_graph(&mut g, b, &f)?;
    Ok(sets.into_iter().map(|v| PromptSet(g.value(v).clone())).collect())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::encoder::{encode_plain, encode_prompted_deep, encode_prompted_shallow, EncoderConfig};
    use crate::numcore::{layer_norm, Rng};

    fn spec(stride: usize, count: usize) -> SupportSpec {
        SupportSpec {
            stride,
            count,
            boundary: Boundary::Clamp,
        }
    }

    #[test]
    fn sampling_examples() {
        assert_eq!(
            sample_support_indices(100, &spec(2, 6), 1000).unwrap(),
            vec![94, 96, 98, 102, 104, 106]
        );
        assert_eq!(
            sample_support_indices(100, &spec(8, 7), 1000).unwrap(),
            vec![68, 76, 84, 92, 108, 116, 124]
        );
        assert_eq!(sample_support_indices(5, &spec(8, 2), 20).unwrap(), vec![0, 13]);
        assert_eq!(sample_support_indices(0, &spec(1, 1), 1).unwrap(), vec![0]);
        assert!(sample_support_indices(5, &spec(8, 0), 20).is_err());
        let reject = SupportSpec {
            boundary: Boundary::Reject,
            ..spec(8, 2)
        };
        assert!(sample_support_indices(5, &reject, 20).is_err());
    }

    #[test]
    fn sampling_never_includes_t_before_clamping() {
        for k in 1..10 {
            for s in 1..5 {
                let idx = sample_support_indices(500, &spec(s, k), 10_000).unwrap();
                assert_eq!(idx.len(), k);
                assert!(!idx.contains(&500));
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            image: (8, 8),
            patch: (4, 4),
            depth: 2,
            width: 8,
            heads: 2,
            ffn_hidden: 16,
            ln_eps: 1e-5,
            pos_embed: true,
        }
    }

    fn loud(leaves: LeavesMut<'_, Tensor>, seed: u64) {
        let mut rng = Rng::new(seed);
        for (_, _, t) in leaves {
            *t = rng.normal_tensor(t.shape(), 0.5).add(t).unwrap();
        }
    }

    fn transformer_params(seed: u64, np: usize) -> TransformerPredictorParams<Tensor> {
        let mut p = TransformerPredictorParams::init(8, np, seed);
        loud(p.leaves_mut(), seed + 1);
        p
    }

    fn mixer_params(seed: u64, n: usize, np: usize) -> MixerPredictorParams<Tensor> {
        let mut p = MixerPredictorParams::init(n, 8, np, seed);
        loud(p.leaves_mut(), seed + 1);
        p
    }

    fn supports(seed: u64, k: usize, n: usize) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        (0..k).map(|_| rng.normal_tensor(&[n, 8], 1.0)).collect()
    }

    #[test]
    fn support_embeddings_match_plain_encoding() {
        let cfg = enc_cfg();
        let enc = EncoderParams::init(&cfg, 3).unwrap();
        let mut rng = Rng::new(4);
        let frames: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[3, 8, 8], 1.0)).collect();
        let one = extract_support_embeddings(&frames, &[2], &enc).unwrap();
        assert_eq!(one[0], encode_plain(&frames[2], &enc).unwrap());
        let dup = extract_support_embeddings(&frames, &[0, 0, 4], &enc).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert_eq!(dup[2], encode_plain(&frames[4], &enc).unwrap());
        assert!(extract_support_embeddings(&frames, &[5], &enc).is_err());
    }

    fn lin(x: &[f64], l: &Linear<Tensor>) -> Vec<f64> {
        let (o, i) = (l.out_dim(), l.in_dim());
        (0..o)
            .map(|r| (0..i).map(|c| l.w.data()[r * i + c] * x[c]).sum::<f64>() + l.b.data()[r])
            .collect()
    }

    fn ffn(x: &[f64], f: &Ffn<Tensor>) -> Vec<f64> {
        let h: Vec<f64> = lin(x, &f.fc1)
            .into_iter()
            .map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
            .collect();
        lin(&h, &f.fc2)
    }

    fn ln(x: &[f64], n: &Norm<Tensor>) -> Vec<f64> {
        layer_norm(&Tensor::vector(x.to_vec()), &n.g, &n.b, 1e-5)
            .unwrap()
            .into_data()
    }

    #[test]
    fn transformer_identical_context_shortcut() {
        let p = transformer_params(5, 3);
        let v = Rng::new(6).normal_tensor(&[8], 1.0);
        let rows: Vec<&[f64]> = (0..8).map(|_| v.data()).collect();
        let s = Tensor::from_rows(&rows[..4]).unwrap();
        let out = predict_transformer(&[s.clone(), s], &p, 2, 1e-5).unwrap();
        assert_eq!(out.0.shape(), &[3, 8]);
        // identical keys give uniform weights, so every query receives o(v(LN(v)))
        let attended = lin(&lin(&ln(v.data(), &p.ln1), &p.attn.v), &p.attn.o);
        for i in 0..3 {
            let q_hat: Vec<f64> = p.queries.row(i).iter().zip(&attended).map(|(a, b)| a + b).collect();
            let n = ln(&q_hat, &p.ln2);
            let f = ffn(&n, &p.ffn);
            for c in 0..8 {
                assert!((out.0.row(i)[c] - (f[c] + n[c])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transformer_context_has_k_times_n_rows() {
        let p = transformer_params(7, 3);
        let s = supports(8, 2, 4);
        let mut g = Graph::new();
        let pv = p.map(&mut |t| g.constant(t.clone()));
        let sv: Vec<Var> = s.iter().map(|t| g.constant(t.clone())).collect();
        let out = predict_transformer_graph(&mut g, &sv, &pv, 2, 1e-5).unwrap();
        assert_eq!(g.shape(out), &[3, 8]);
        let concat = g.consumers(sv[0])[0];
        assert_eq!(g.shape(concat), &[8, 8]);
        assert!(predict_transformer(&[], &p, 2, 1e-5).is_err());
    }

    #[test]
    fn predictors_are_permutation_invariant() {
        let tp = transformer_params(9, 4);
        let mp = mixer_params(10, 4, 4);
        let s = supports(11, 5, 4);
        let t0 = predict_transformer(&s, &tp, 2, 1e-5).unwrap();
        let m0 = predict_mixer(&s, &mp, 1e-5).unwrap();
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let mut perm = s.clone();
            rng.shuffle(&mut perm);
            let t = predict_transformer(&perm, &tp, 2, 1e-5).unwrap();
            assert!(t.0.max_abs_diff(&t0.0) <= 1e-12);
            assert_eq!(predict_mixer(&perm, &mp, 1e-5).unwrap(), m0);
        }
    }

    #[test]
    fn mixer_single_and_repeated_support() {
        let mp = mixer_params(13, 4, 3);
        let s = supports(14, 1, 4);
        let one = predict_mixer(&s, &mp, 1e-5).unwrap();
        let rep = vec![s[0].clone(); 6];
        assert_eq!(predict_mixer(&rep, &mp, 1e-5).unwrap(), one);
        let mut bad = supports(15, 2, 4);
        bad[1] = Tensor::zeros(&[3, 8]);
        assert!(predict_mixer(&bad, &mp, 1e-5).is_err());
    }

    #[test]
    fn mixer_matches_step_by_step_oracle() {
        let (k, n, d, np) = (2, 4, 8, 3);
        let mp = mixer_params(16, n, np);
        let s = supports(17, k, n);
        let mut g = Graph::new();
        let pv = mp.map(&mut |t| g.constant(t.clone()));
        let sv: Vec<Var> = s.iter().map(|t| g.constant(t.clone())).collect();
        let (hidden, out) = predict_mixer_graph_with_hidden(&mut g, &sv, &pv, 1e-5).unwrap();
        assert_eq!(g.shape(hidden), &[d, np]);
        assert_eq!(g.shape(out), &[np, d]);

        let mean: Vec<Vec<f64>> = (0..n)
            .map(|r| (0..d).map(|c| (s[0].row(r)[c] + s[1].row(r)[c]) / 2.0).collect())
            .collect();
        let normed: Vec<Vec<f64>> = mean.iter().map(|r| ln(r, &mp.ln1)).collect();
        let h: Vec<Vec<f64>> = (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..n).map(|r| normed[r][c]).collect();
                ffn(&col, &mp.mix)
            })
            .collect();
        for c in 0..d {
            for j in 0..np {
                assert!((g.value(hidden).row(c)[j] - h[c][j]).abs() < 1e-10);
            }
        }
        let hn: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &mp.ln2)).collect();
        for j in 0..np {
            let row: Vec<f64> = (0..d).map(|c| hn[c][j]).collect();
            let p = ffn(&row, &mp.chan);
            for c in 0..d {
                assert!((g.value(out).row(j)[c] - p[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn output_shape_is_independent_of_k() {
        let tp = transformer_params(18, 5);
        let mp = mixer_params(19, 4, 5);
        for k in [1, 2, 7] {
            let s = supports(20 + k as u64, k, 4);
            assert_eq!(predict_transformer(&s, &tp, 2, 1e-5).unwrap().0.shape(), &[5, 8]);
            assert_eq!(predict_mixer(&s, &mp, 1e-5).unwrap().0.shape(), &[5, 8]);
        }
    }

    #[test]
    fn deep_projection_examples() {
        let base = PromptSet(Rng::new(21).normal_tensor(&[3, 8], 1.0));
        let ident = vec![Linear::identity(8), Linear::identity(8)];
        let sets = project_deep(&base, &ident, 2).unwrap();
        assert_eq!(sets, vec![base.clone(), base.clone()]);
        assert!(project_deep(&base, &ident, 3).is_err());

        let cfg = enc_cfg();
        let mut enc = EncoderParams::init(&cfg, 22).unwrap();
        loud(enc.leaves_mut(), 23);
        let frame = Rng::new(24).normal_tensor(&[3, 8, 8], 1.0);
        let zeros = vec![Linear::zeros(8, 8), Linear::zeros(8, 8)];
        let zero_sets: Vec<Tensor> = project_deep(&base, &zeros, 2)
            .unwrap()
            .into_iter()
            .map(|p| p.0)
            .collect();
        let deep = encode_prompted_deep(&frame, &zero_sets, &enc).unwrap();
        assert!(deep.max_abs_diff(&encode_plain(&frame, &enc).unwrap()) > 1e-6);

        let mut cfg1 = cfg.clone();
        cfg1.depth = 1;
        let enc1 = EncoderParams::init(&cfg1, 25).unwrap();
        let fcs = init_deep_projections(1, 8, 26);
        let sets = project_deep(&base, &fcs, 1).unwrap();
        assert_eq!(
            encode_prompted_deep(&frame, &[sets[0].0.clone()], &enc1).unwrap(),
            encode_prompted_shallow(&frame, &sets[0].0, &enc1).unwrap()
        );
    }

    #[test]
    fn checkpoint_names() {
        let tp = TransformerPredictorParams::init(8, 2, 0);
        let names: Vec<String> = tp.leaves().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.contains(&"predictor.q".to_string()));
        assert!(names.contains(&"predictor.mha.wq".to_string()));
        assert!(names.contains(&"predictor.ffn.w2".to_string()));
        let mp = MixerPredictorParams::init(4, 8, 2, 0);
        let names: Vec<String> = mp.leaves().into_iter().map(|(n, _, _)| n).collect();
        assert!(names.contains(&"mixer.mix.w1".to_string()));
        assert!(names.contains(&"mixer.ln2.g".to_string()));
        let fcs = init_deep_projections(2, 8, 0);
        let names: Vec<String> = deep_leaves(&fcs).into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, vec!["deep.fc0.w", "deep.fc0.b", "deep.fc1.w", "deep.fc1.b"]);
    }
}

//! Patch embedding and a constant-width pre-LN transformer encoder that runs
//! plain, with one prepended prompt set (shallow), or with a fresh prompt set
//! before every layer (deep).

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{initialize, Attention, Ffn, Leaves, LeavesMut, Linear, Norm, Role};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Frame height and width in pixels.
    pub image: (usize, usize),
    /// Patch height and width in pixels.
    pub patch: (usize, usize),
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    pub pos_embed: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image;
        let (ph, pw) = self.patch;
        if ph == 0 || pw == 0 || h == 0 || w == 0 || h % ph != 0 || w % pw != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not tiled by patches {ph}x{pw}"
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patch count `n`.
    pub fn num_patches(&self) -> usize {
        (self.image.0 / self.patch.0) * (self.image.1 / self.patch.1)
    }

    /// Flattened patch length `3·h·w`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch.0 * self.patch.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1: Norm<T>,
    pub attn: Attention<T>,
    pub ln2: Norm<T>,
    pub ffn: Ffn<T>,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            ln1: self.ln1.map(f),
            attn: self.attn.map(f),
            ln2: self.ln2.map(f),
            ffn: self.ffn.map(f),
        }
    }

    fn leaves<'a>(&'a self, prefix: &str, out: &mut Leaves<'a, T>) {
        self.attn.leaves(prefix, out);
        self.ln1.leaves(&format!("{prefix}.ln1"), out);
        self.ln2.leaves(&format!("{prefix}.ln2"), out);
        self.ffn.leaves(&format!("{prefix}.ffn"), out);
    }

    fn leaves_mut<'a>(&'a mut self, prefix: &str, out: &mut LeavesMut<'a, T>) {
        self.attn.leaves_mut(prefix, out);
        self.ln1.leaves_mut(&format!("{prefix}.ln1"), out);
        self.ln2.leaves_mut(&format!("{prefix}.ln2"), out);
        self.ffn.leaves_mut(&format!("{prefix}.ffn"), out);
    }
}

/// Patch projection, optional positional table and `L` layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub patch: Linear<T>,
    pub pos: Option<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl EncoderParams<Tensor> {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let mut p = EncoderParams {
            config: config.clone(),
            patch: Linear::zeros(d, config.patch_dim()),
            pos: config.pos_embed.then(|| Tensor::zeros(&[config.num_patches(), d])),
            layers: (0..config.depth)
                .map(|_| LayerParams {
                    ln1: Norm::new(d),
                    attn: Attention::zeros(d),
                    ln2: Norm::new(d),
                    ffn: Ffn::zeros(d, config.ffn_hidden, d),
                })
                .collect(),
        };
        initialize(p.leaves_mut(), seed);
        Ok(p)
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            patch: self.patch.map(f),
            pos: self.pos.as_ref().map(&mut *f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn leaves(&self) -> Leaves<'_, T> {
        let mut out = Vec::new();
        self.patch
            .leaves("encoder.patch.w".into(), "encoder.patch.b".into(), &mut out);
        if let Some(pos) = &self.pos {
            out.push(("encoder.pos".into(), Role::Weight, pos));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.leaves(&format!("encoder.layer{i}"), &mut out);
        }
        out
    }

    pub fn leaves_mut(&mut self) -> LeavesMut<'_, T> {
        let mut out = Vec::new();
        self.patch
            .leaves_mut("encoder.patch.w".into(), "encoder.patch.b".into(), &mut out);
        if let Some(pos) = &mut self.pos {
            out.push(("encoder.pos".into(), Role::Weight, pos));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.leaves_mut(&format!("encoder.layer{i}"), &mut out);
        }
        out
    }
}

/// Token matrix whose first `prompt_count` rows are prompt-derived and whose
/// remaining rows are patch tokens in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<T> {
    pub tokens: T,
    pub prompt_count: usize,
}

/// Prompt injection for one encoder pass.
#[derive(Clone, Copy, Debug)]
pub enum Prompts<'a> {
    None,
    /// One `[N_P × d]` set prepended before layer 1 and carried through.
    Shallow(Var),
    /// One set per layer; set `i` replaces the prompt rows entering layer `i+1`.
    Deep(&'a [Var]),
}

/// Output of [`encode_graph`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final `[n × d]` patch rows.
    pub patches: Var,
    /// Row count of the sequence entering each layer.
    pub layer_rows: Vec<usize>,
}

/// Splits a `[3 × H × W]` frame into `[n × 3hw]` raster-ordered flattened patches.
pub fn extract_patches(frame: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (h, w) = cfg.image;
    if frame.shape() != [3, h, w] {
        return Err(Error::shape("patch_embed", frame.shape(), &[3, h, w]));
    }
    let (ph, pw) = cfg.patch;
    let (gy, gx) = (h / ph, w / pw);
    let mut data = Vec::with_capacity(frame.len());
    let src = frame.data();
    for py in 0..gy {
        for px in 0..gx {
            for c in 0..3 {
                for y in 0..ph {
                    let row = (c * h + py * ph + y) * w + px * pw;
                    data.extend_from_slice(&src[row..row + pw]);
                }
            }
        }
    }
    Tensor::new(vec![gy * gx, cfg.patch_dim()], data)
}

pub fn patch_embed_graph(g: &mut Graph, frame: &Tensor, p: &EncoderParams<Var>) -> Result<TokenSeq<Var>> {
    let patches = extract_patches(frame, &p.config)?;
    let x = g.constant(patches);
    let mut tokens = p.patch.apply(g, x)?;
    if let Some(pos) = p.pos {
        tokens = g.add(tokens, pos)?;
    }
    Ok(TokenSeq {
        tokens,
        prompt_count: 0,
    })
}

fn check_width(g: &Graph, x: Var, d: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(op, s, &[d]));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
/// Returns the projected output and the per-head attention weights.
pub fn mha_graph_with_weights(
    g: &mut Graph,
    queries: Var,
    context: Var,
    attn: &Attention<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(attn.q.w)[0];
    check_width(g, queries, d, "mha")?;
    check_width(g, context, d, "mha")?;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let q = attn.q.apply(g, queries)?;
    let k = attn.k.apply(g, context)?;
    let v = attn.v.apply(g, context)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores);
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((attn.o.apply(g, merged)?, weights))
}

pub fn mha_graph(g: &mut Graph, queries: Var, context: Var, attn: &Attention<Var>, heads: usize) -> Result<Var> {
    Ok(mha_graph_with_weights(g, queries, context, attn, heads)?.0)
}

/// Pre-LN block: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn layer_graph(g: &mut Graph, x: Var, lp: &LayerParams<Var>, cfg: &EncoderConfig) -> Result<Var> {
    check_width(g, x, cfg.width, "transformer_layer")?;
    let h = lp.ln1.apply(g, x, cfg.ln_eps)?;
    let a = mha_graph(g, h, h, &lp.attn, cfg.heads)?;
    let x = g.add(x, a)?;
    let h = lp.ln2.apply(g, x, cfg.ln_eps)?;
    let f = lp.ffn.apply(g, h)?;
    g.add(x, f)
}

/// Runs the layer stack on already-embedded patch tokens.
pub fn encode_tokens_graph(
    g: &mut Graph,
    tokens: Var,
    p: &EncoderParams<Var>,
    prompts: Prompts<'_>,
) -> Result<Encoded> {
    let cfg = &p.config;
    let n = g.shape(tokens)[0];
    let mut layer_rows = Vec::with_capacity(p.layers.len());
    let mut patches = tokens;
    match prompts {
        Prompts::None => {
            for lp in &p.layers {
                layer_rows.push(n);
                patches = layer_graph(g, patches, lp, cfg)?;
            }
        }
        Prompts::Shallow(set) => {
            check_width(g, set, cfg.width, "encode_prompted_shallow")?;
            let np = g.shape(set)[0];
            let mut x = if np == 0 {
                patches
            } else {
                g.concat_rows(&[set, patches])?
            };
            for lp in &p.layers {
                layer_rows.push(np + n);
                x = layer_graph(g, x, lp, cfg)?;
            }
            patches = if np == 0 { x } else { g.slice_rows(x, np, n)? };
        }
        Prompts::Deep(sets) => {
            if sets.len() != p.layers.len() {
                return Err(Error::Config(format!(
                    "deep prompting needs {} prompt sets, got {}",
                    p.layers.len(),
                    sets.len()
                )));
            }
            for (lp, &set) in p.layers.iter().zip(sets) {
                check_width(g, set, cfg.width, "encode_prompted_deep")?;
                let np = g.shape(set)[0];
                let x = if np == 0 {
                    patches
                } else {
                    g.concat_rows(&[set, patches])?
                };
                layer_rows.push(np + n);
                let y = layer_graph(g, x, lp, cfg)?;
                patches = if np == 0 { y } else { g.slice_rows(y, np, n)? };
            }
        }
    }
    Ok(Encoded { patches, layer_rows })
}

pub fn encode_graph(g: &mut Graph, frame: &Tensor, p: &EncoderParams<Var>, prompts: Prompts<'_>) -> Result<Encoded> {
    let seq = patch_embed_graph(g, frame, p)?;
    encode_tokens_graph(g, seq.tokens, p, prompts)
}

fn bind_constants(g: &mut Graph, p: &EncoderParams<Tensor>) -> EncoderParams<Var> {
    p.map(&mut |t| g.constant(t.clone()))
}

/// Patch tokens of a frame (`prompt_count = 0`).
pub fn patch_embed(frame: &Tensor, params: &EncoderParams<Tensor>) -> Result<TokenSeq<Tensor>> {
    let mut g = Graph::new();
    let p = bind_constants(&mut g, params);
    let seq = patch_embed_graph(&mut g, frame, &p)?;
    Ok(TokenSeq {
        tokens: g.value(seq.tokens).clone(),
        prompt_count: 0,
    })
}

pub fn transformer_layer(
    x: &TokenSeq<Tensor>,
    layer: &LayerParams<Tensor>,
    cfg: &EncoderConfig,
) -> Result<TokenSeq<Tensor>> {
    let mut g = Graph::new();
    let lp = layer.map(&mut |t| g.constant(t.clone()));
    let xv = g.constant(x.tokens.clone());
    let y = layer_graph(&mut g, xv, &lp, cfg)?;
    Ok(TokenSeq {
        tokens: g.value(y).clone(),
        prompt_count: x.prompt_count,
    })
}

/// Cross-attention of `queries` (`[q × d]`) over `context` (`[k × d]`).
pub fn mha(queries: &Tensor, context: &Tensor, attn: &Attention<Tensor>, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = attn.map(&mut |t| g.constant(t.clone()));
    let q = g.constant(queries.clone());
    let c = g.constant(context.clone());
    let out = mha_graph(&mut g, q, c, &a, heads)?;
    Ok(g.value(out).clone())
}

/// Per-head `[q × k]` attention weights of [`mha`].
pub fn attention_weights(
    queries: &Tensor,
    context: &Tensor,
    attn: &Attention<Tensor>,
    heads: usize,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let a = attn.map(&mut |t| g.constant(t.clone()));
    let q = g.constant(queries.clone());
    let c = g.constant(context.clone());
    let (_, w) = mha_graph_with_weights(&mut g, q, c, &a, heads)?;
    Ok(w.into_iter().map(|v| g.value(v).clone()).collect())
}

fn run_encoder(frame: &Tensor, params: &EncoderParams<Tensor>, prompts: &[Tensor], deep: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_constants(&mut g, params);
    let sets: Vec<Var> = prompts.iter().map(|t| g.constant(t.clone())).collect();
    let mode = match (deep, sets.as_slice()) {
        (false, []) => Prompts::None,
        (false, [one]) => Prompts::Shallow(*one),
        (false, _) => unreachable!(),
        (true, s) => Prompts::Deep(s),
    };
    let out = encode_graph(&mut g, frame, &p, mode)?;
    Ok(g.value(out.patches).clone())
}

/// Last-layer patch embeddings `[n × d]` of an unprompted frame.
pub fn encode_plain(frame: &Tensor, params: &EncoderParams<Tensor>) -> Result<Tensor> {
    run_encoder(frame, params, &[], false)
}

/// Encodes with `prompts` (`[N_P × d]`) prepended before the first layer;
/// returns only the `n` patch rows.
pub fn encode_prompted_shallow(frame: &Tensor, prompts: &Tensor, params: &EncoderParams<Tensor>) -> Result<Tensor> {
    run_encoder(frame, params, std::slice::from_ref(prompts), false)
}

/// Encodes with a fresh prompt set before every layer; returns the `n` patch rows.
pub fn encode_prompted_deep(frame: &Tensor, sets: &[Tensor], params: &EncoderParams<Tensor>) -> Result<Tensor> {
    run_encoder(frame, params, sets, true)
}

/// 3×3 convolution applied to nine prompts laid out as a 3×3 map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[out × in × 3 × 3]`
    pub kernel: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

pub const CONV_PAD: usize = 2;
pub const CONV_STRIDE: usize = 2;
pub const CONV_KERNEL: usize = 3;

/// Reshapes nine prompts to a 3×3×d map (row-major), zero-pads by 2,
/// convolves with kernel 3 / stride 2 and flattens the 3×3×d' result back to
/// nine prompts.
pub fn conv_prompt_downscale(prompts: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    if prompts.rank() != 2 || prompts.shape()[0] != 9 {
        return Err(Error::Constraint(format!(
            "convolutional prompt path needs exactly 9 prompts to form a 3x3 map, got shape {:?}",
            prompts.shape()
        )));
    }
    let d = prompts.shape()[1];
    let ks = conv.kernel.shape();
    if ks.len() != 4 || ks[1] != d || ks[2] != CONV_KERNEL || ks[3] != CONV_KERNEL {
        return Err(Error::shape("conv_prompt_downscale", ks, prompts.shape()));
    }
    let d_out = ks[0];
    if conv.bias.shape() != [d_out] {
        return Err(Error::shape("conv_prompt_downscale", conv.bias.shape(), &[d_out]));
    }
    let side = 3;
    let padded = side + 2 * CONV_PAD;
    let out_side = (padded - CONV_KERNEL) / CONV_STRIDE + 1;
    let k = conv.kernel.data();
    let mut out = Vec::with_capacity(out_side * out_side * d_out);
    for oy in 0..out_side {
        for ox in 0..out_side {
            for o in 0..d_out {
                let mut acc = conv.bias.data()[o];
                for ky in 0..CONV_KERNEL {
                    for kx in 0..CONV_KERNEL {
                        let py = oy * CONV_STRIDE + ky;
                        let px = ox * CONV_STRIDE + kx;
                        if py < CONV_PAD || px < CONV_PAD || py >= CONV_PAD + side || px >= CONV_PAD + side {
                            continue;
                        }
                        let src = prompts.row((py - CONV_PAD) * side + (px - CONV_PAD));
                        for (i, &v) in src.iter().enumerate() {
                            acc += k[((o * d + i) * CONV_KERNEL + ky) * CONV_KERNEL + kx] * v;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![out_side * out_side, d_out], out)
}

pub fn head_graph(g: &mut Graph, features: Var, head: &Linear<Var>) -> Result<Var> {
    let pooled = g.mean_rows(features)?;
    head.apply(g, pooled)
}

/// Mean-pools `[n × d]` features over tokens and maps them to `C` logits.
pub fn head_classify(features: &Tensor, head: &Linear<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = head.map(&mut |t| g.constant(t.clone()));
    let f = g.constant(features.clone());
    if g.shape(f).len() != 2 || g.shape(f)[1] != head.in_dim() {
        return Err(Error::shape("head_classify", features.shape(), head.w.shape()));
    }
    let logits = head_graph(&mut g, f, &h)?;
    let c = head.out_dim();
    g.value(logits).clone().reshape(&[c])
}

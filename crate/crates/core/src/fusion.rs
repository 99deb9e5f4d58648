//! Token fusion over the four backbone outputs.
//!
//! Each level is projected to `token_dim` channels and flattened. Four stacked
//! self/cross/feed-forward units decode the levels from coarsest to finest; unit
//! `i` cross-attends to the finer backbone outputs and the coarser decoded
//! features, concatenated along the token axis.

use hrtnet_tensor::{Tape, Tensor, Var};

use crate::backbone::MultiResFeatures;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{add_norm, Conv, FeedForward, LayerNorm, Linear};
use crate::params::{Builder, Ctx, ParamId};

/// Source position of one token: level, row and column within an `h x w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenCoord {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// `[B, N, D]` tokens with one coordinate per token.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub tokens: Var,
    pub coords: Vec<TokenCoord>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Flattens a `[B, D, h, w]` grid in raster order.
    pub fn from_grid(tape: &mut Tape, f: Var, level: usize) -> Result<Self> {
        let s = tape.shape(f).to_vec();
        if s.len() != 4 {
            return Err(Error::Input(format!("token grid must be [B, D, h, w], got {s:?}")));
        }
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let t = tape.reshape(f, &[b, d, h * w])?;
        let tokens = tape.permute(t, &[0, 2, 1])?;
        let coords = (0..h * w)
            .map(|i| TokenCoord {
                level,
                y: i / w,
                x: i % w,
                h,
                w,
            })
            .collect();
        Ok(TokenSeq { tokens, coords })
    }

    /// Inverse of [`TokenSeq::from_grid`] for a single-grid sequence.
    pub fn to_grid(&self, tape: &mut Tape) -> Result<Var> {
        let c0 = self.coords.first().ok_or_else(|| Error::Invariant("empty token sequence".into()))?;
        let (h, w) = (c0.h, c0.w);
        if self.len() != h * w || self.coords.iter().any(|c| c.level != c0.level) {
            return Err(Error::Invariant("sequence does not cover a single grid".into()));
        }
        let s = tape.shape(self.tokens).to_vec();
        let t = tape.permute(self.tokens, &[0, 2, 1])?;
        Ok(tape.reshape(t, &[s[0], s[2], h, w])?)
    }
}

/// 1x1 conv to the token width, then raster flattening.
pub fn project_tokens(cx: &mut Ctx, proj: &Conv, f: Var, level: usize) -> Result<TokenSeq> {
    let y = proj.forward(cx, f)?;
    TokenSeq::from_grid(cx.tape, y, level)
}

/// Concatenation along the token axis.
pub fn flat_cat(tape: &mut Tape, parts: &[TokenSeq]) -> Result<TokenSeq> {
    let first = parts.first().ok_or_else(|| Error::Input("flat_cat needs at least one part".into()))?;
    let d = tape.shape(first.tokens)[2];
    for p in parts {
        let pd = tape.shape(p.tokens)[2];
        if pd != d {
            return Err(Error::Input(format!("flat_cat parts differ in token width: {d} vs {pd}")));
        }
    }
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let vars: Vec<Var> = parts.iter().map(|p| p.tokens).collect();
    Ok(TokenSeq {
        tokens: tape.concat(&vars, 1)?,
        coords: parts.iter().flat_map(|p| p.coords.iter().copied()).collect(),
    })
}

/// Fixed 2D sinusoid of a token position: the first `d/2` channels encode the row,
/// the rest the column. Positions are normalized to `(p + 1) / extent * 2pi`, and
/// channel pairs `(2k, 2k+1)` hold `sin` and `cos` at frequency `10000^(-2k/(d/2))`.
pub fn sine_embedding(c: &TokenCoord, d: usize) -> Vec<f64> {
    const SCALE: f64 = 2.0 * std::f64::consts::PI;
    const EPS: f64 = 1e-6;
    let half = d / 2;
    let ye = (c.y + 1) as f64 / (c.h as f64 + EPS) * SCALE;
    let xe = (c.x + 1) as f64 / (c.w as f64 + EPS) * SCALE;
    let mut out = vec![0.0; d];
    for (base, pos) in [(0, ye), (half, xe)] {
        for i in 0..half {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
            let a = pos / freq;
            out[base + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Sinusoid plus a learned vector per source level.
#[derive(Clone, Debug)]
pub struct PositionEmbedding {
    /// `[4, D]`, starts at zero.
    pub level_embed: ParamId,
    pub dim: usize,
}

impl PositionEmbedding {
    pub fn new(b: &mut Builder, dim: usize) -> Self {
        PositionEmbedding {
            level_embed: b.zeros("level_embed", &[4, dim]),
            dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, seq: &TokenSeq) -> Result<TokenSeq> {
        let s = cx.tape.shape(seq.tokens).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        if d != self.dim || n != seq.len() {
            return Err(Error::Input(format!(
                "position embedding for width {} got tokens {s:?} with {} coords",
                self.dim,
                seq.len()
            )));
        }
        let mut sine = Vec::with_capacity(n * d);
        for c in &seq.coords {
            sine.extend(sine_embedding(c, d));
        }
        let sine: Vec<f64> = (0..b).flat_map(|_| sine.iter().copied()).collect();
        let sine = cx.tape.constant(Tensor::new(&[b, n, d], sine)?);

        let table = cx.p(self.level_embed);
        let mut runs = Vec::new();
        let mut start = 0;
        while start < n {
            let level = seq.coords[start].level;
            let len = seq.coords[start..].iter().take_while(|c| c.level == level).count();
            let row = cx.tape.narrow(table, 0, level, 1)?;
            let row = cx.tape.reshape(row, &[1, 1, d])?;
            runs.push(cx.tape.broadcast_to(row, &[b, len, d])?);
            start += len;
        }
        let learned = if runs.len() == 1 { runs[0] } else { cx.tape.concat(&runs, 1)? };
        let t = cx.tape.add(seq.tokens, sine)?;
        Ok(TokenSeq {
            tokens: cx.tape.add(t, learned)?,
            coords: seq.coords.clone(),
        })
    }
}

/// Linear-cost attention on already projected `[B, N, D]` queries and `[B, M, D]`
/// keys/values: per head, `softmax_channels(Q) . (softmax_tokens(K)^T V)`.
pub fn efficient_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    let (b, n, dim) = (sq[0], sq[1], sq[2]);
    let m = sk[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Input(format!("token width {dim} is not divisible by {heads} heads")));
    }
    if sk.len() != 3 || sk[0] != b || sk[2] != dim || tape.shape(v) != sk.as_slice() {
        return Err(Error::Input(format!(
            "attention operands disagree: q {sq:?}, k {sk:?}, v {:?}",
            tape.shape(v)
        )));
    }
    let d = dim / heads;
    let q = tape.reshape(q, &[b, n, heads, d])?;
    let q = tape.softmax(q, 3)?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, m, heads, d])?;
    let k = tape.permute(k, &[0, 2, 1, 3])?;
    let k = tape.softmax(k, 2)?;
    let v = tape.reshape(v, &[b, m, heads, d])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    // [B, h, d, d] context, independent of token order
    let context = tape.matmul(k, v, true, false)?;
    let e = tape.matmul(q, context, false, false)?;
    let e = tape.permute(e, &[0, 2, 1, 3])?;
    Ok(tape.reshape(e, &[b, n, dim])?)
}

#[derive(Clone, Debug)]
pub struct EfficientAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl EfficientAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Self {
        EfficientAttention {
            q: Linear::new(&mut b.sub("q"), dim, dim),
            // a key bias shifts every token of a channel equally, which the token softmax cancels
            k: Linear::without_bias(&mut b.sub("k"), dim, dim),
            v: Linear::new(&mut b.sub("v"), dim, dim),
            out: Linear::new(&mut b.sub("out"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, kv)?;
        let v = self.v.forward(cx, kv)?;
        let e = efficient_attention(cx.tape, q, k, v, self.heads)?;
        self.out.forward(cx, e)
    }
}

/// Self-attention, cross-attention and feed-forward, each with post-norm residual.
#[derive(Clone, Debug)]
pub struct TripleItLayer {
    pub self_attn: EfficientAttention,
    pub norm1: LayerNorm,
    pub cross_attn: EfficientAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl TripleItLayer {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Self {
        TripleItLayer {
            self_attn: EfficientAttention::new(&mut b.sub("self_attn"), dim, heads),
            norm1: LayerNorm::new(&mut b.sub("norm1"), dim),
            cross_attn: EfficientAttention::new(&mut b.sub("cross_attn"), dim, heads),
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim),
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, 4 * dim),
            norm3: LayerNorm::new(&mut b.sub("norm3"), dim),
        }
    }

    pub fn self_step(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.self_attn.forward(cx, x, x)?;
        add_norm(cx, &self.norm1, x, a)
    }

    pub fn cross_step(&self, cx: &mut Ctx, x: Var, asso: Var) -> Result<Var> {
        let a = self.cross_attn.forward(cx, x, asso)?;
        add_norm(cx, &self.norm2, x, a)
    }

    pub fn ffn_step(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let f = self.ffn.forward(cx, x)?;
        add_norm(cx, &self.norm3, x, f)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, asso: Var) -> Result<Var> {
        let x = self.self_step(cx, x)?;
        let x = self.cross_step(cx, x, asso)?;
        self.ffn_step(cx, x)
    }
}

#[derive(Clone, Debug)]
pub struct TripleIt {
    pub layers: Vec<TripleItLayer>,
}

impl TripleIt {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, depth: usize) -> Self {
        TripleIt {
            layers: (0..depth)
                .map(|l| TripleItLayer::new(&mut b.sub(format!("layer{l}")), dim, heads))
                .collect(),
        }
    }

    /// `primary` is `[B, N, D]`, `asso` is `[B, M, D]`; returns `[B, N, D]`.
    pub fn forward(&self, cx: &mut Ctx, primary: Var, asso: Var) -> Result<Var> {
        let mut x = primary;
        for layer in &self.layers {
            x = layer.forward(cx, x, asso)?;
        }
        Ok(x)
    }
}

/// Backbone tokens and decoded features of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionState {
    /// Projected backbone outputs, before position embedding.
    pub f_o: Vec<TokenSeq>,
    f_dec: [Option<TokenSeq>; 4],
    /// Unit labels (1-based level) in execution order.
    pub order: Vec<usize>,
    /// Associated-sequence length per level.
    pub asso_tokens: [usize; 4],
}

impl FusionState {
    /// Decoded tokens of `level`; reading before the producing unit ran is a bug.
    pub fn dec(&self, level: usize) -> Result<&TokenSeq> {
        self.f_dec
            .get(level)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Invariant(format!("decoded feature {} read before it was written", level + 1)))
    }

    /// Decoded feature of `level` as a `[B, D, h, w]` grid.
    pub fn dec_grid(&self, tape: &mut Tape, level: usize) -> Result<Var> {
        self.dec(level)?.to_grid(tape)
    }
}

/// Members of the associated sequence for unit `level`: finer levels come from the
/// backbone, coarser levels from already decoded features.
pub fn asso_members(level: usize) -> Vec<(usize, bool)> {
    (0..4).filter(|&j| j != level).map(|j| (j, j > level)).collect()
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Vec<Conv>,
    pub pos: PositionEmbedding,
    /// `units[i]` decodes level `i`.
    pub units: Vec<TripleIt>,
    pub dim: usize,
}

impl Fusion {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Self {
        let d = config.token_dim;
        Fusion {
            proj: (0..4)
                .map(|i| Conv::new(&mut b.sub(format!("proj{i}")), config.branch_channels[i], d, 1, 1, true))
                .collect(),
            pos: PositionEmbedding::new(&mut b.sub("pos"), d),
            units: (0..4)
                .map(|i| TripleIt::new(&mut b.sub(format!("unit{i}")), d, config.fusion_heads, config.triple_it_depth))
                .collect(),
            dim: d,
        }
    }

    pub fn fuse_all(&self, cx: &mut Ctx, f_o: &MultiResFeatures) -> Result<FusionState> {
        let mut state = FusionState {
            f_o: Vec::with_capacity(4),
            f_dec: [None, None, None, None],
            order: Vec::with_capacity(4),
            asso_tokens: [0; 4],
        };
        for (i, (&f, proj)) in f_o.maps.iter().zip(&self.proj).enumerate() {
            state.f_o.push(project_tokens(cx, proj, f, i)?);
        }
        for level in (0..4).rev() {
            let mut parts = Vec::with_capacity(3);
            for (j, decoded) in asso_members(level) {
                parts.push(if decoded { state.dec(j)?.clone() } else { state.f_o[j].clone() });
            }
            let asso = flat_cat(cx.tape, &parts)?;
            let asso = self.pos.forward(cx, &asso)?;
            let primary = self.pos.forward(cx, &state.f_o[level])?;
            let out = self.units[level].forward(cx, primary.tokens, asso.tokens)?;
            state.asso_tokens[level] = asso.len();
            state.order.push(level + 1);
            state.f_dec[level] = Some(TokenSeq {
                tokens: out,
                coords: primary.coords,
            });
        }
        Ok(state)
    }
}

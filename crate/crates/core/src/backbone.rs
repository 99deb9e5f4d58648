//! Multi-resolution transformer backbone.
//!
//! A convolutional stem brings the image to stride 4. Stage `s` (0-based) creates
//! branch `s` (from the stem, or by a strided conv from branch `s - 1`), passes the
//! new branch's entry feature through an injection hook, runs the per-branch
//! transformer blocks and ends with a cross-resolution exchange.

use hrtnet_tensor::{Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{add_norm, Conv, ConvNorm, FeedForward, LayerNorm, Linear};
use crate::params::{Builder, Ctx};

/// Additive logit for masked attention entries; its exponential underflows to zero.
const MASKED: f64 = -1e9;

/// Four feature maps at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiResFeatures {
    pub maps: [Var; 4],
}

impl MultiResFeatures {
    /// Checks the stride and channel contract for a batch of `batch` samples.
    pub fn validate(&self, tape: &Tape, config: &ModelConfig, batch: usize) -> Result<()> {
        for (i, &m) in self.maps.iter().enumerate() {
            let (h, w) = config.level_hw(i);
            let want = [batch, config.branch_channels[i], h, w];
            if tape.shape(m) != want {
                return Err(Error::Invariant(format!(
                    "level {i} has shape {:?}, expected {want:?}",
                    tape.shape(m)
                )));
            }
        }
        Ok(())
    }
}

/// Two stride-2 conv + norm + GELU layers.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
}

impl Stem {
    pub fn new(b: &mut Builder, cin: usize, cout: usize) -> Self {
        Stem {
            conv1: ConvNorm::new(&mut b.sub("conv1"), cin, cout, 3, 2, true),
            conv2: ConvNorm::new(&mut b.sub("conv2"), cout, cout, 3, 2, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1] != self.conv1.conv.cin {
            return Err(Error::Input(format!(
                "stem expects [B, {}, H, W], got {s:?}",
                self.conv1.conv.cin
            )));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::Config(format!("input {}x{} is not divisible by 32", s[2], s[3])));
        }
        let y = self.conv1.forward(cx, x)?;
        self.conv2.forward(cx, y)
    }
}

/// Multi-head self-attention over `[N, L, C]` token groups.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Self {
        SelfAttention {
            qkv: Linear::new(&mut b.sub("qkv"), dim, 3 * dim),
            proj: Linear::new(&mut b.sub("proj"), dim, dim),
            heads,
        }
    }

    /// `mask` is added to the `[N, heads, L, L]` logits.
    pub fn forward(&self, cx: &mut Ctx, x: Var, mask: Option<Var>) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(cx, x)?;
        let qkv = cx.tape.reshape(qkv, &[n, l, 3, h, d])?;
        let qkv = cx.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut qkv_parts = [qkv; 3];
        for (k, part) in qkv_parts.iter_mut().enumerate() {
            let p = cx.tape.narrow(qkv, 0, k, 1)?;
            *part = cx.tape.reshape(p, &[n, h, l, d])?;
        }
        let [q, k, v] = qkv_parts;
        let logits = cx.tape.matmul(q, k, false, true)?;
        let mut logits = cx.tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        if let Some(m) = mask {
            logits = cx.tape.add(logits, m)?;
        }
        let attn = cx.tape.softmax(logits, 3)?;
        let o = cx.tape.matmul(attn, v, false, false)?;
        let o = cx.tape.permute(o, &[0, 2, 1, 3])?;
        let o = cx.tape.reshape(o, &[n, l, c])?;
        self.proj.forward(cx, o)
    }
}

/// Windowed attention then feed-forward, each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub window: usize,
}

/// Window extents actually used on an `h x w` map; a window covering the map
/// degenerates to full attention.
pub fn window_extent(window: usize, h: usize, w: usize) -> (usize, usize) {
    (window.min(h), window.min(w))
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, window: usize, hidden: usize) -> Self {
        TransformerBlock {
            attn: SelfAttention::new(&mut b.sub("attn"), dim, heads),
            norm1: LayerNorm::new(&mut b.sub("norm1"), dim),
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, hidden),
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim),
            window,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = cx.tape.permute(x, &[0, 2, 3, 1])?;
        let a = self.window_attention(cx, t, b, h, w, c)?;
        let t = add_norm(cx, &self.norm1, t, a)?;
        let f = self.ffn.forward(cx, t)?;
        let t = add_norm(cx, &self.norm2, t, f)?;
        Ok(cx.tape.permute(t, &[0, 3, 1, 2])?)
    }

    /// Attention within non-overlapping windows of channel-last tokens `[B, H, W, C]`.
    fn window_attention(&self, cx: &mut Ctx, t: Var, b: usize, h: usize, w: usize, c: usize) -> Result<Var> {
        let (wh, ww) = window_extent(self.window, h, w);
        let (ph, pw) = ((wh - h % wh) % wh, (ww - w % ww) % ww);
        let (hp, wp) = (h + ph, w + pw);
        let (nh, nw) = (hp / wh, wp / ww);
        let l = wh * ww;
        let padded = cx.tape.pad_end(t, 1, ph)?;
        let padded = cx.tape.pad_end(padded, 2, pw)?;
        let g = cx.tape.reshape(padded, &[b, nh, wh, nw, ww, c])?;
        let g = cx.tape.permute(g, &[0, 1, 3, 2, 4, 5])?;
        let g = cx.tape.reshape(g, &[b * nh * nw, l, c])?;

        let mask = if ph + pw > 0 {
            let heads = self.attn.heads;
            let mut m = vec![0.0; b * nh * nw * heads * l * l];
            for (win, chunk) in m.chunks_mut(heads * l * l).enumerate() {
                let (wy, wx) = ((win / nw) % nh, win % nw);
                for key in 0..l {
                    let (y, x) = (wy * wh + key / ww, wx * ww + key % ww);
                    if y >= h || x >= w {
                        for row in chunk.chunks_mut(l) {
                            row[key] = MASKED;
                        }
                    }
                }
            }
            let m = Tensor::new(&[b * nh * nw, heads, l, l], m)?;
            Some(cx.tape.constant(m))
        } else {
            None
        };
        let o = self.attn.forward(cx, g, mask)?;

        let o = cx.tape.reshape(o, &[b, nh, nw, wh, ww, c])?;
        let o = cx.tape.permute(o, &[0, 1, 3, 2, 4, 5])?;
        let o = cx.tape.reshape(o, &[b, hp, wp, c])?;
        let o = cx.tape.narrow(o, 1, 0, h)?;
        Ok(cx.tape.narrow(o, 2, 0, w)?)
    }
}

/// Resampling path from one branch to another inside an exchange unit.
#[derive(Clone, Debug)]
pub enum ExchangePath {
    Identity,
    /// Stride-2 3x3 convs; GELU between steps, none after the last.
    Down(Vec<Conv>),
    /// 1x1 conv to the target width, then bilinear upsampling by `factor`.
    Up { conv: Conv, factor: usize },
}

impl ExchangePath {
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            ExchangePath::Identity => Ok(x),
            ExchangePath::Down(steps) => {
                let mut y = x;
                for (i, conv) in steps.iter().enumerate() {
                    y = conv.forward(cx, y)?;
                    if i + 1 < steps.len() {
                        y = cx.tape.gelu(y)?;
                    }
                }
                Ok(y)
            }
            ExchangePath::Up { conv, factor } => {
                let y = conv.forward(cx, x)?;
                let s = cx.tape.shape(y).to_vec();
                Ok(cx.tape.bilinear_resize(y, s[2] * factor, s[3] * factor)?)
            }
        }
    }
}

/// Every output branch is GELU of the sum of all inputs resampled to it.
#[derive(Clone, Debug)]
pub struct Exchange {
    /// `paths[target][source]`.
    pub paths: Vec<Vec<ExchangePath>>,
}

impl Exchange {
    pub fn new(b: &mut Builder, channels: &[usize]) -> Self {
        let k = channels.len();
        let mut paths = Vec::with_capacity(k);
        for j in 0..k {
            let mut row = Vec::with_capacity(k);
            for i in 0..k {
                let mut pb = b.sub(format!("to{j}.from{i}"));
                row.push(if i == j {
                    ExchangePath::Identity
                } else if i < j {
                    let steps = (0..j - i)
                        .map(|n| {
                            let cout = if n + 1 == j - i { channels[j] } else { channels[i] };
                            Conv::new(&mut pb.sub(format!("step{n}")), channels[i], cout, 3, 2, true)
                        })
                        .collect();
                    ExchangePath::Down(steps)
                } else {
                    ExchangePath::Up {
                        conv: Conv::new(&mut pb, channels[i], channels[j], 1, 1, true),
                        factor: 1 << (i - j),
                    }
                });
            }
            paths.push(row);
        }
        Exchange { paths }
    }

    pub fn forward(&self, cx: &mut Ctx, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.paths.len() {
            return Err(Error::Invariant(format!(
                "exchange built for {} branches got {}",
                self.paths.len(),
                xs.len()
            )));
        }
        let mut out = Vec::with_capacity(xs.len());
        for row in &self.paths {
            let mut acc: Option<Var> = None;
            for (path, &x) in row.iter().zip(xs) {
                let y = path.forward(cx, x)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => cx.tape.add(a, y)?,
                });
            }
            out.push(cx.tape.gelu(acc.expect("at least one branch"))?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// `blocks[branch][i]`.
    pub blocks: Vec<Vec<TransformerBlock>>,
    pub exchange: Exchange,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    /// `transitions[s - 1]` creates branch `s` from branch `s - 1`.
    pub transitions: Vec<ConvNorm>,
    pub stages: Vec<Stage>,
}

/// Called with the stage index and the new branch's entry feature; returns the
/// feature that enters the branch.
pub type InjectionHook<'h> = dyn FnMut(&mut Ctx, usize, Var) -> Result<Var> + 'h;

impl Backbone {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Self {
        let ch = config.branch_channels;
        let stem = Stem::new(&mut b.sub("stem"), 3, ch[0]);
        let transitions = (1..4)
            .map(|s| ConvNorm::new(&mut b.sub(format!("transition{s}")), ch[s - 1], ch[s], 3, 2, true))
            .collect();
        let stages = (0..4)
            .map(|s| {
                let mut sb = b.sub(format!("stage{s}"));
                let blocks = (0..=s)
                    .map(|br| {
                        (0..config.blocks_per_stage[s])
                            .map(|i| {
                                TransformerBlock::new(
                                    &mut sb.sub(format!("branch{br}.block{i}")),
                                    ch[br],
                                    config.attention_heads,
                                    config.window_size,
                                    config.ffn_hidden(ch[br]),
                                )
                            })
                            .collect()
                    })
                    .collect();
                let exchange = Exchange::new(&mut sb.sub("exchange"), &ch[..=s]);
                Stage { blocks, exchange }
            })
            .collect();
        Backbone {
            stem,
            transitions,
            stages,
        }
    }

    pub fn forward_hooked(&self, cx: &mut Ctx, image: Var, hook: &mut InjectionHook) -> Result<MultiResFeatures> {
        let mut branches: Vec<Var> = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            let entry = match s {
                0 => self.stem.forward(cx, image)?,
                _ => self.transitions[s - 1].forward(cx, branches[s - 1])?,
            };
            branches.push(hook(cx, s, entry)?);
            for (br, blocks) in stage.blocks.iter().enumerate() {
                for blk in blocks {
                    branches[br] = blk.forward(cx, branches[br])?;
                }
            }
            branches = stage.exchange.forward(cx, &branches)?;
        }
        Ok(MultiResFeatures {
            maps: [branches[0], branches[1], branches[2], branches[3]],
        })
    }

    /// Runs the backbone, adding `stage_inputs[s]` to the entry of branch `s`.
    pub fn forward(&self, cx: &mut Ctx, image: Var, stage_inputs: Option<&[Var; 4]>) -> Result<MultiResFeatures> {
        let mut hook = |cx: &mut Ctx, s: usize, entry: Var| -> Result<Var> {
            let Some(inputs) = stage_inputs else {
                return Ok(entry);
            };
            let (want, got) = (cx.tape.shape(entry).to_vec(), cx.tape.shape(inputs[s]).to_vec());
            if want != got {
                return Err(Error::Injection {
                    stage: s + 1,
                    branch: s + 1,
                    expected: want,
                    got,
                });
            }
            Ok(cx.tape.add(entry, inputs[s])?)
        };
        self.forward_hooked(cx, image, &mut hook)
    }
}

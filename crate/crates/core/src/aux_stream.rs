//! Residual encoder for the supplementary modality.

use hrtnet_tensor::{Tensor, Var};

use crate::backbone::{MultiResFeatures, Stem};
use crate::config::{Modality, ModelConfig, MAX_FOCAL_SLICES};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvNorm};
use crate::params::{Builder, Ctx};

/// Depth or thermal map, or a focal stack zero-padded to [`MAX_FOCAL_SLICES`] RGB slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SupplementaryInput {
    kind: Modality,
    data: Tensor,
    real_slices: usize,
}

impl SupplementaryInput {
    /// Single-channel `[B, 1, H, W]` depth or thermal map.
    pub fn single(kind: Modality, data: Tensor) -> Result<Self> {
        if kind == Modality::FocalStack {
            return Err(Error::Input("use SupplementaryInput::focal_stack for focal slices".into()));
        }
        let s = data.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Input(format!("{} map must be [B, 1, H, W], got {s:?}", kind.name())));
        }
        Ok(SupplementaryInput {
            kind,
            data,
            real_slices: 1,
        })
    }

    /// Stacks `[B, 3, H, W]` slices channel-wise and appends all-zero slices up to 12.
    pub fn focal_stack(slices: &[Tensor]) -> Result<Self> {
        let k = slices.len();
        if k == 0 || k > MAX_FOCAL_SLICES {
            return Err(Error::Input(format!(
                "focal stack needs 1..={MAX_FOCAL_SLICES} slices, got {k}"
            )));
        }
        let s0 = slices[0].shape().to_vec();
        if s0.len() != 4 || s0[1] != 3 {
            return Err(Error::Input(format!("focal slice must be [B, 3, H, W], got {s0:?}")));
        }
        if let Some(bad) = slices.iter().find(|t| t.shape() != s0.as_slice()) {
            return Err(Error::Input(format!(
                "focal slices differ in shape: {s0:?} vs {:?}",
                bad.shape()
            )));
        }
        let (b, hw) = (s0[0], s0[2] * s0[3]);
        let plane = 3 * hw;
        let mut data = vec![0.0; b * MAX_FOCAL_SLICES * plane];
        for n in 0..b {
            for (i, sl) in slices.iter().enumerate() {
                let dst = (n * MAX_FOCAL_SLICES + i) * plane;
                data[dst..dst + plane].copy_from_slice(&sl.data()[n * plane..(n + 1) * plane]);
            }
        }
        Ok(SupplementaryInput {
            kind: Modality::FocalStack,
            data: Tensor::new(&[b, 3 * MAX_FOCAL_SLICES, s0[2], s0[3]], data)?,
            real_slices: k,
        })
    }

    pub fn kind(&self) -> Modality {
        self.kind
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    /// Slices before zero-padding (1 for single-channel maps).
    pub fn real_slices(&self) -> usize {
        self.real_slices
    }

    /// Checks modality and spatial agreement with a `[B, 3, H, W]` primary image.
    pub fn check_against(&self, config: &ModelConfig, primary_shape: &[usize]) -> Result<()> {
        if self.kind != config.modality {
            return Err(Error::Input(format!(
                "model expects {} input, got {}",
                config.modality.name(),
                self.kind.name()
            )));
        }
        let s = self.data.shape();
        if primary_shape.len() != 4 || s[0] != primary_shape[0] || s[2..] != primary_shape[2..] {
            return Err(Error::Input(format!(
                "supplementary shape {s:?} does not match primary {primary_shape:?}"
            )));
        }
        Ok(())
    }
}

/// Two 3x3 conv layers with an identity or 1x1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvNorm::new(&mut b.sub("shortcut"), cin, cout, 1, stride, false));
        BasicBlock {
            conv1: ConvNorm::new(&mut b.sub("conv1"), cin, cout, 3, stride, true),
            conv2: ConvNorm::new(&mut b.sub("conv2"), cout, cout, 3, 1, false),
            shortcut,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.conv2.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x)?,
            None => x,
        };
        let y = cx.tape.add(y, skip)?;
        Ok(cx.tape.gelu(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct AuxStream {
    pub stem: Stem,
    pub stages: Vec<Vec<BasicBlock>>,
    /// 1x1 per-level projections to the backbone widths; biases start at zero.
    pub proj: Vec<Conv>,
    pub in_channels: usize,
}

impl AuxStream {
    pub fn new(b: &mut Builder, config: &ModelConfig) -> Self {
        let ch = config.branch_channels;
        let cin = config.modality.channels();
        let stem = Stem::new(&mut b.sub("stem"), cin, ch[0]);
        let stages = (0..4)
            .map(|s| {
                (0..config.aux_blocks)
                    .map(|i| {
                        let (from, stride) = match (s, i) {
                            (0, 0) => (ch[0], 1),
                            (_, 0) => (ch[s - 1], 2),
                            _ => (ch[s], 1),
                        };
                        BasicBlock::new(&mut b.sub(format!("stage{s}.block{i}")), from, ch[s], stride)
                    })
                    .collect()
            })
            .collect();
        let proj = (0..4)
            .map(|s| Conv::zero_bias(&mut b.sub(format!("proj{s}")), ch[s], ch[s], 1, 1))
            .collect();
        AuxStream {
            stem,
            stages,
            proj,
            in_channels: cin,
        }
    }

    /// `x` is the (already padded) `[B, Cs, H, W]` supplementary tensor.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<MultiResFeatures> {
        let s = cx.tape.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Input(format!(
                "auxiliary stream expects {} channels, got shape {s:?}",
                self.in_channels
            )));
        }
        let mut y = self.stem.forward(cx, x)?;
        let mut maps = Vec::with_capacity(4);
        for (stage, proj) in self.stages.iter().zip(&self.proj) {
            for blk in stage {
                y = blk.forward(cx, y)?;
            }
            maps.push(proj.forward(cx, y)?);
        }
        Ok(MultiResFeatures {
            maps: [maps[0], maps[1], maps[2], maps[3]],
        })
    }
}

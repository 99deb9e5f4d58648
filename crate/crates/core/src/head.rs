//! Saliency head and the boundary-weighted BCE + IoU objective.

use hrtnet_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{Builder, Ctx};

/// `[B, 1, H, W]` logits and their sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct SaliencyMap {
    pub logits: Var,
    pub prob: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv,
}

impl Head {
    pub fn new(b: &mut Builder, dim: usize) -> Self {
        Head {
            conv: Conv::new(&mut b.sub("conv"), dim, 1, 3, 1, true),
        }
    }

    /// 3x3 conv to one channel, then 4x bilinear upsampling.
    pub fn predict(&self, cx: &mut Ctx, f1: Var) -> Result<SaliencyMap> {
        let y = self.conv.forward(cx, f1)?;
        let s = cx.tape.shape(y).to_vec();
        let logits = cx.tape.bilinear_resize(y, 4 * s[2], 4 * s[3])?;
        let prob = cx.tape.sigmoid(logits)?;
        Ok(SaliencyMap { logits, prob })
    }
}

/// Pooling window for the boundary weights: about a seventh of the short side,
/// odd, between 1 and 31 (31 at 224x224).
pub fn weight_window(h: usize, w: usize) -> usize {
    let k = (h.min(w) as f64 / 7.0).round() as usize;
    let k = if k % 2 == 0 { k.saturating_sub(1) } else { k };
    k.clamp(1, 31)
}

/// `1 + 5 |mean_k(gt) - gt|`, where the `k x k` stride-1 mean only averages
/// positions inside the map. Input and output are `[B, 1, H, W]`.
pub fn boundary_weights(gt: &Tensor, k: usize) -> Result<Tensor> {
    let s = gt.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Input(format!("ground truth must be [B, 1, H, W], got {s:?}")));
    }
    if k % 2 == 0 {
        return Err(Error::Input(format!("pooling window {k} must be odd")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let r = k / 2;
    let mut out = vec![0.0; gt.numel()];
    // summed-area table per image
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for n in 0..b {
        let g = &gt.data()[n * h * w..(n + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                sat[(y + 1) * (w + 1) + x + 1] =
                    g[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
                out[n * h * w + y * w + x] = 1.0 + 5.0 * (mean - g[y * w + x]).abs();
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input(format!("ground truth must be binary, found {v}")));
    }
    Ok(())
}

/// Weighted BCE (normalized by the weight sum) plus weighted soft IoU, averaged over the batch.
/// Uses [`weight_window`] for the pooling size.
pub fn ppa_loss(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    let s = gt.shape();
    let k = if s.len() == 4 { weight_window(s[2], s[3]) } else { 1 };
    ppa_loss_with_window(tape, logits, gt, k)
}

pub fn ppa_loss_with_window(tape: &mut Tape, logits: Var, gt: &Tensor, k: usize) -> Result<Var> {
    check_binary(gt)?;
    if tape.shape(logits) != gt.shape() {
        return Err(Error::Input(format!(
            "logits {:?} and ground truth {:?} differ in shape",
            tape.shape(logits),
            gt.shape()
        )));
    }
    let omega = boundary_weights(gt, k)?;
    let s = gt.shape().to_vec();
    let (b, hw) = (s[0], s[2] * s[3]);
    let inv_wsum: Vec<f64> = omega.data().chunks(hw).map(|c| 1.0 / c.iter().sum::<f64>()).collect();

    let w = tape.constant(omega);
    let g = tape.constant(gt.clone());
    let inv_wsum = tape.constant(Tensor::new(&[b, 1], inv_wsum)?);

    let per_sample = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, hw])?;
        Ok(tape.sum_axis(x, 1)?)
    };

    // softplus(x) - g x is the BCE of sigmoid(x) against g
    let sp = tape.softplus(logits)?;
    let gx = tape.mul(g, logits)?;
    let bce = tape.sub(sp, gx)?;
    let wbce = tape.mul(w, bce)?;
    let wbce = per_sample(tape, wbce)?;
    let wbce = tape.mul(wbce, inv_wsum)?;

    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, g)?;
    let inter = tape.mul(w, pg)?;
    let inter = per_sample(tape, inter)?;
    let union = tape.add(p, g)?;
    let union = tape.sub(union, pg)?;
    let union = tape.mul(w, union)?;
    let union = per_sample(tape, union)?;
    let num = tape.add_scalar(inter, 1.0)?;
    let den = tape.add_scalar(union, 1.0)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.scale(ratio, -1.0)?;
    let wiou = tape.add_scalar(ratio, 1.0)?;

    let total = tape.add(wbce, wiou)?;
    Ok(tape.mean(total)?)
}

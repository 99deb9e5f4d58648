//! Supplementary modality injection: per-sample modality weights, coordinate
//! attention on the weighted supplementary feature, additive fusion.

use hrtnet_tensor::Var;

use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{Builder, Ctx};

/// Per-sample scalar importance of the primary and supplementary features, each `[B, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityWeights {
    pub w_r: Var,
    pub w_s: Var,
}

/// Direction-aware gating: pooled row and column profiles produce multiplicative gates.
#[derive(Clone, Debug)]
pub struct CoordAttention {
    pub shared: Conv,
    pub gate_h: Conv,
    pub gate_w: Conv,
}

impl CoordAttention {
    /// Hidden width is `channels / reduction`, at least 1.
    pub fn new(b: &mut Builder, channels: usize, reduction: usize) -> Self {
        let mid = (channels / reduction).max(1);
        CoordAttention {
            shared: Conv::new(&mut b.sub("shared"), channels, mid, 1, 1, true),
            gate_h: Conv::new(&mut b.sub("gate_h"), mid, channels, 1, 1, true),
            gate_w: Conv::new(&mut b.sub("gate_w"), mid, channels, 1, 1, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let s = cx.tape.shape(f).to_vec();
        let (h, w) = (s[2], s[3]);
        let t = &mut *cx.tape;
        // [B,C,h,1] and [B,C,1,w] -> [B,C,w,1], stacked along the pooled axis
        let rows = t.mean_axis(f, 3)?;
        let cols = t.mean_axis(f, 2)?;
        let cols = t.permute(cols, &[0, 1, 3, 2])?;
        let y = t.concat(&[rows, cols], 2)?;
        let y = self.shared.forward(cx, y)?;
        let y = cx.tape.gelu(y)?;
        let yh = cx.tape.narrow(y, 2, 0, h)?;
        let yw = cx.tape.narrow(y, 2, h, w)?;
        let gh = self.gate_h.forward(cx, yh)?;
        let gw = self.gate_w.forward(cx, yw)?;
        let t = &mut *cx.tape;
        let gh = t.sigmoid(gh)?;
        let gw = t.sigmoid(gw)?;
        let gw = t.permute(gw, &[0, 1, 3, 2])?;
        let gh = t.broadcast_to(gh, &s)?;
        let gw = t.broadcast_to(gw, &s)?;
        let g = t.mul(f, gh)?;
        Ok(t.mul(g, gw)?)
    }
}

#[derive(Clone, Debug)]
pub struct Smim {
    /// 3x3 conv from the concatenated pair to two weight maps.
    pub weight_conv: Conv,
    pub coa: CoordAttention,
}

impl Smim {
    pub fn new(b: &mut Builder, channels: usize, reduction: usize) -> Self {
        Smim {
            weight_conv: Conv::new(&mut b.sub("weight_conv"), 2 * channels, 2, 3, 1, true),
            coa: CoordAttention::new(&mut b.sub("coa"), channels, reduction),
        }
    }

    pub fn modality_weights(&self, cx: &mut Ctx, f_r: Var, f_s: Var) -> Result<ModalityWeights> {
        same_shape(cx, f_r, f_s)?;
        let cat = cx.tape.concat(&[f_r, f_s], 1)?;
        let m = self.weight_conv.forward(cx, cat)?;
        let t = &mut *cx.tape;
        let mut w = [m; 2];
        for (k, slot) in w.iter_mut().enumerate() {
            let part = t.narrow(m, 1, k, 1)?;
            let part = t.sigmoid(part)?;
            *slot = t.global_avg_pool(part)?;
        }
        Ok(ModalityWeights { w_r: w[0], w_s: w[1] })
    }

    /// `w_r * f_r + CoA(w_s * f_s)`.
    pub fn inject(&self, cx: &mut Ctx, f_r: Var, f_s: Var) -> Result<Var> {
        let mw = self.modality_weights(cx, f_r, f_s)?;
        let r = scale_per_sample(cx, f_r, mw.w_r)?;
        let s = scale_per_sample(cx, f_s, mw.w_s)?;
        let s = self.coa.forward(cx, s)?;
        Ok(cx.tape.add(r, s)?)
    }

    /// Injection with the supplementary path removed: `w_r * f_r`.
    pub fn inject_primary_only(&self, cx: &mut Ctx, f_r: Var, f_s: Var) -> Result<Var> {
        let mw = self.modality_weights(cx, f_r, f_s)?;
        scale_per_sample(cx, f_r, mw.w_r)
    }
}

fn same_shape(cx: &Ctx, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (cx.tape.shape(a), cx.tape.shape(b));
    if sa != sb || sa.len() != 4 {
        return Err(Error::Input(format!(
            "modality features must share a [B, C, H, W] shape, got {sa:?} and {sb:?}"
        )));
    }
    Ok(())
}

/// Multiplies `[B, C, H, W]` by a `[B, 1]` per-sample scalar.
pub fn scale_per_sample(cx: &mut Ctx, f: Var, w: Var) -> Result<Var> {
    let s = cx.tape.shape(f).to_vec();
    let w = cx.tape.reshape(w, &[s[0], 1, 1, 1])?;
    let w = cx.tape.broadcast_to(w, &s)?;
    Ok(cx.tape.mul(f, w)?)
}

//! Analytic forward cost. Counts 2 FLOPs per multiply-add of every convolution,
//! linear map and matrix product, for a single sample.

use crate::backbone::window_extent;
use crate::config::ModelConfig;
use crate::fusion::asso_members;

pub fn conv(cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> u64 {
    2 * (cout * cin * k * k * ho * wo) as u64
}

pub fn linear(tokens: usize, din: usize, dout: usize) -> u64 {
    2 * (tokens * din * dout) as u64
}

/// Projections plus the per-head context and readout products.
pub fn efficient_attention(nq: usize, nkv: usize, dim: usize, heads: usize) -> u64 {
    let d = dim / heads;
    linear(nq, dim, dim) * 2 + linear(nkv, dim, dim) * 2 + 2 * (heads * d * d * (nkv + nq)) as u64
}

/// One windowed self-attention block plus feed-forward on a `c x h x w` map.
pub fn transformer_block(c: usize, h: usize, w: usize, heads: usize, window: usize, hidden: usize) -> u64 {
    let (wh, ww) = window_extent(window, h, w);
    let (hp, wp) = (h.div_ceil(wh) * wh, w.div_ceil(ww) * ww);
    let windows = (hp / wh) * (wp / ww);
    let l = wh * ww;
    let d = c / heads;
    let attn = linear(hp * wp, c, 3 * c) + 2 * 2 * (windows * heads * l * l * d) as u64 + linear(hp * wp, c, c);
    attn + linear(h * w, c, hidden) + linear(h * w, hidden, c)
}

pub fn forward_flops(cfg: &ModelConfig) -> u64 {
    let ch = cfg.branch_channels;
    let hw = |i: usize| cfg.level_hw(i);
    let [ih, iw] = cfg.input_hw;
    let mut total = 0u64;

    // auxiliary stream
    let cs = cfg.modality.channels();
    total += conv(cs, ch[0], 3, ih / 2, iw / 2) + conv(ch[0], ch[0], 3, ih / 4, iw / 4);
    for s in 0..4 {
        let (h, w) = hw(s);
        for i in 0..cfg.aux_blocks {
            let from = match (s, i) {
                (0, _) | (_, 1..) => ch[s],
                _ => ch[s - 1],
            };
            total += conv(from, ch[s], 3, h, w) + conv(ch[s], ch[s], 3, h, w);
            if from != ch[s] || (s > 0 && i == 0) {
                total += conv(from, ch[s], 1, h, w);
            }
        }
        total += conv(ch[s], ch[s], 1, h, w);
    }

    // injection
    for s in 0..4 {
        let (h, w) = hw(s);
        let mid = (ch[s] / cfg.coa_reduction).max(1);
        total += conv(2 * ch[s], 2, 3, h, w);
        total += conv(ch[s], mid, 1, h + w, 1) + conv(mid, ch[s], 1, h, 1) + conv(mid, ch[s], 1, w, 1);
    }

    // backbone
    total += conv(3, ch[0], 3, ih / 2, iw / 2) + conv(ch[0], ch[0], 3, ih / 4, iw / 4);
    for s in 0..4 {
        if s > 0 {
            let (h, w) = hw(s);
            total += conv(ch[s - 1], ch[s], 3, h, w);
        }
        for br in 0..=s {
            let (h, w) = hw(br);
            let block = transformer_block(ch[br], h, w, cfg.attention_heads, cfg.window_size, cfg.ffn_hidden(ch[br]));
            total += block * cfg.blocks_per_stage[s] as u64;
        }
        for j in 0..=s {
            for i in 0..=s {
                if i < j {
                    for n in 0..j - i {
                        let (h, w) = hw(i + n + 1);
                        let cout = if n + 1 == j - i { ch[j] } else { ch[i] };
                        total += conv(ch[i], cout, 3, h, w);
                    }
                } else if i > j {
                    let (h, w) = hw(i);
                    total += conv(ch[i], ch[j], 1, h, w);
                }
            }
        }
    }

    // fusion
    let d = cfg.token_dim;
    let tokens = |i: usize| hw(i).0 * hw(i).1;
    for (i, &c) in ch.iter().enumerate() {
        let (h, w) = hw(i);
        total += conv(c, d, 1, h, w);
    }
    for level in 0..4 {
        let n = tokens(level);
        let m: usize = asso_members(level).iter().map(|&(j, _)| tokens(j)).sum();
        let layer = efficient_attention(n, n, d, cfg.fusion_heads)
            + efficient_attention(n, m, d, cfg.fusion_heads)
            + linear(n, d, 4 * d)
            + linear(n, 4 * d, d);
        total += layer * cfg.triple_it_depth as u64;
    }

    // head
    let (h, w) = hw(0);
    total + conv(d, 1, 3, h, w)
}

//! Layer-by-layer parameter and FLOP table for a config, one row per layer.

use hrtnet::config::ModelConfig;

#[derive(Default)]
pub struct Table {
    pub rows: Vec<(String, u64, u64)>,
}

impl Table {
    fn row(&mut self, name: String, params: usize, flops: usize) {
        self.rows.push((name, params as u64, flops as u64));
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, bias: bool, out: (usize, usize)) {
        let p = cin * cout * k * k + if bias { cout } else { 0 };
        self.row(name, p, 2 * cin * cout * k * k * out.0 * out.1);
    }

    fn norm(&mut self, name: String, c: usize) {
        self.row(name, 2 * c, 0);
    }

    fn linear(&mut self, name: String, tokens: usize, din: usize, dout: usize, bias: bool) {
        self.row(name, din * dout + if bias { dout } else { 0 }, 2 * tokens * din * dout);
    }

    fn matmul(&mut self, name: String, m: usize, k: usize, n: usize, count: usize) {
        self.row(name, 0, 2 * m * k * n * count);
    }

    pub fn params(&self) -> u64 {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn flops(&self) -> u64 {
        self.rows.iter().map(|r| r.2).sum()
    }

    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, out: (usize, usize)) {
        self.conv(format!("{name}.conv"), cin, cout, k, false, out);
        self.norm(format!("{name}.norm"), cout);
    }

    fn efficient_attention(&mut self, name: &str, nq: usize, nkv: usize, dim: usize, heads: usize) {
        let d = dim / heads;
        self.linear(format!("{name}.q"), nq, dim, dim, true);
        self.linear(format!("{name}.k"), nkv, dim, dim, false);
        self.linear(format!("{name}.v"), nkv, dim, dim, true);
        self.matmul(format!("{name}.context"), d, nkv, d, heads);
        self.matmul(format!("{name}.readout"), nq, d, d, heads);
        self.linear(format!("{name}.out"), nq, dim, dim, true);
    }
}

pub fn table(cfg: &ModelConfig) -> Table {
    let mut t = Table::default();
    let c = cfg.branch_channels;
    let [ih, iw] = cfg.input_hw;
    let lv: Vec<(usize, usize)> = (0..4).map(|i| (ih >> (2 + i), iw >> (2 + i))).collect();

    // auxiliary encoder
    let cs = cfg.modality.channels();
    t.conv_norm("aux.stem1", cs, c[0], 3, (ih / 2, iw / 2));
    t.conv_norm("aux.stem2", c[0], c[0], 3, lv[0]);
    for s in 0..4 {
        for i in 0..cfg.aux_blocks {
            let (cin, strided) = if i == 0 && s > 0 { (c[s - 1], true) } else { (c[s], false) };
            let n = format!("aux.s{s}b{i}");
            t.conv_norm(&format!("{n}.conv1"), cin, c[s], 3, lv[s]);
            t.conv_norm(&format!("{n}.conv2"), c[s], c[s], 3, lv[s]);
            if strided || cin != c[s] {
                t.conv_norm(&format!("{n}.shortcut"), cin, c[s], 1, lv[s]);
            }
        }
        t.conv(format!("aux.proj{s}"), c[s], c[s], 1, true, lv[s]);
    }

    // injection modules
    for s in 0..4 {
        let (h, w) = lv[s];
        let mid = std::cmp::max(1, c[s] / cfg.coa_reduction);
        t.conv(format!("smim{s}.weights"), 2 * c[s], 2, 3, true, (h, w));
        t.conv(format!("smim{s}.shared"), c[s], mid, 1, true, (h + w, 1));
        t.conv(format!("smim{s}.gate_h"), mid, c[s], 1, true, (h, 1));
        t.conv(format!("smim{s}.gate_w"), mid, c[s], 1, true, (w, 1));
    }

    // backbone
    t.conv_norm("bb.stem1", 3, c[0], 3, (ih / 2, iw / 2));
    t.conv_norm("bb.stem2", c[0], c[0], 3, lv[0]);
    for s in 1..4 {
        t.conv_norm(&format!("bb.transition{s}"), c[s - 1], c[s], 3, lv[s]);
    }
    for s in 0..4 {
        for br in 0..=s {
            for i in 0..cfg.blocks_per_stage[s] {
                let n = format!("bb.s{s}.br{br}.blk{i}");
                let (h, w) = lv[br];
                let (wh, ww) = (cfg.window_size.min(h), cfg.window_size.min(w));
                let (hp, wp) = (h.div_ceil(wh) * wh, w.div_ceil(ww) * ww);
                let windows = (hp / wh) * (wp / ww);
                let (l, heads) = (wh * ww, cfg.attention_heads);
                let hidden = (c[br] as f64 * cfg.ffn_ratio).round() as usize;
                t.linear(format!("{n}.qkv"), hp * wp, c[br], 3 * c[br], true);
                t.matmul(format!("{n}.logits"), l, c[br] / heads, l, windows * heads);
                t.matmul(format!("{n}.mix"), l, l, c[br] / heads, windows * heads);
                t.linear(format!("{n}.proj"), hp * wp, c[br], c[br], true);
                t.norm(format!("{n}.norm1"), c[br]);
                t.linear(format!("{n}.fc1"), h * w, c[br], hidden, true);
                t.linear(format!("{n}.fc2"), h * w, hidden, c[br], true);
                t.norm(format!("{n}.norm2"), c[br]);
            }
        }
        for to in 0..=s {
            for from in 0..=s {
                let n = format!("bb.s{s}.ex{from}to{to}");
                if from < to {
                    for step in 0..to - from {
                        let cout = if step + 1 == to - from { c[to] } else { c[from] };
                        t.conv(format!("{n}.step{step}"), c[from], cout, 3, true, lv[from + step + 1]);
                    }
                } else if from > to {
                    t.conv(n, c[from], c[to], 1, true, lv[from]);
                }
            }
        }
    }

    // token fusion
    let d = cfg.token_dim;
    let tokens: Vec<usize> = lv.iter().map(|&(h, w)| h * w).collect();
    for i in 0..4 {
        t.conv(format!("fusion.proj{i}"), c[i], d, 1, true, lv[i]);
    }
    t.row("fusion.level_embed".into(), 4 * d, 0);
    for level in 0..4 {
        let n = tokens[level];
        let m: usize = (0..4).filter(|&j| j != level).map(|j| tokens[j]).sum();
        for l in 0..cfg.triple_it_depth {
            let name = format!("fusion.unit{level}.layer{l}");
            t.efficient_attention(&format!("{name}.self"), n, n, d, cfg.fusion_heads);
            t.norm(format!("{name}.norm1"), d);
            t.efficient_attention(&format!("{name}.cross"), n, m, d, cfg.fusion_heads);
            t.norm(format!("{name}.norm2"), d);
            t.linear(format!("{name}.fc1"), n, d, 4 * d, true);
            t.linear(format!("{name}.fc2"), n, 4 * d, d, true);
            t.norm(format!("{name}.norm3"), d);
        }
    }

    t.conv("head".into(), d, 1, 3, true, lv[0]);
    t
}

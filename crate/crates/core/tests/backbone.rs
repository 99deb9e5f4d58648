mod common;

use common::*;
use hrtnet::backbone::{Backbone, Exchange, ExchangePath, Stem, TransformerBlock};
use hrtnet::config::ModelConfig;
use hrtnet::params::{Ctx, ParamStore};
use hrtnet::tensor::{Tape, Tensor};
use hrtnet::Error;

fn zero(store: &mut ParamStore, id: hrtnet::params::ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}

/// `[1, C, h, w]` to channel-last rows `[h * w, C]` and back.
fn to_tokens(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = t.data()[ch * hw + p];
        }
    }
    out
}

fn from_tokens(rows: &[f64], c: usize) -> Vec<f64> {
    let hw = rows.len() / c;
    let mut out = vec![0.0; rows.len()];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = rows[p * c + ch];
        }
    }
    out
}

/// Transformer block written out: dense attention inside each window over the
/// in-bounds tokens only, then post-norm residuals with unit-scale norms.
fn block_oracle(store: &ParamStore, blk: &TransformerBlock, x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (wh, ww) = (blk.window.min(h), blk.window.min(w));
    let p = |id| store.get(id).data().to_vec();
    let tokens = to_tokens(x);
    let mut attn = vec![0.0; tokens.len()];
    for y0 in (0..h).step_by(wh) {
        for x0 in (0..w).step_by(ww) {
            let members: Vec<usize> = (y0..(y0 + wh).min(h))
                .flat_map(|y| (x0..(x0 + ww).min(w)).map(move |xx| y * w + xx))
                .collect();
            let sub: Vec<f64> = members.iter().flat_map(|&m| tokens[m * c..(m + 1) * c].to_vec()).collect();
            let o = dense_attention_oracle(
                &sub,
                members.len(),
                c,
                blk.attn.heads,
                &p(blk.attn.qkv.weight),
                &p(blk.attn.qkv.bias.unwrap()),
                &p(blk.attn.proj.weight),
                &p(blk.attn.proj.bias.unwrap()),
            );
            for (i, &m) in members.iter().enumerate() {
                attn[m * c..(m + 1) * c].copy_from_slice(&o[i * c..(i + 1) * c]);
            }
        }
    }
    let sum: Vec<f64> = tokens.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let t1 = layer_norm_oracle(&sum, c);
    let hidden = affine_oracle(&t1, c, &p(blk.ffn.fc1.weight), &p(blk.ffn.fc1.bias.unwrap()));
    let hidden: Vec<f64> = hidden.into_iter().map(gelu).collect();
    let f = affine_oracle(&hidden, blk.ffn.fc1.dout, &p(blk.ffn.fc2.weight), &p(blk.ffn.fc2.bias.unwrap()));
    let sum: Vec<f64> = t1.iter().zip(&f).map(|(a, b)| a + b).collect();
    from_tokens(&layer_norm_oracle(&sum, c), c)
}

fn run_block(store: &ParamStore, blk: &TransformerBlock, x: &Tensor) -> Tensor {
    eval(store, |cx| {
        let v = cx.tape.constant(x.clone());
        blk.forward(cx, v)
    })
}

#[test]
fn stem_reaches_stride_four() {
    let (store, stem) = build(0, |b| Stem::new(b, 3, 8));
    for (n, want) in [(224, 56), (64, 16)] {
        let x = uniform(&mut rng(1), &[1, 3, n, n], -1.0, 1.0);
        let y = eval(&store, |cx| {
            let v = cx.tape.constant(x);
            stem.forward(cx, v)
        });
        assert_eq!(y.shape(), &[1, 8, want, want]);
    }
}

#[test]
fn stem_rejects_indivisible_input() {
    let (store, stem) = build(0, |b| Stem::new(b, 3, 8));
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &store, false);
    let x = cx.tape.constant(Tensor::zeros(&[1, 3, 48, 64]));
    assert!(matches!(stem.forward(&mut cx, x), Err(Error::Config(_))));
}

#[test]
fn stem_of_zero_image_is_zero_and_random_image_is_stable() {
    let (store, stem) = build(3, |b| Stem::new(b, 3, 8));
    let y = eval(&store, |cx| {
        let v = cx.tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        stem.forward(cx, v)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = uniform(&mut rng(4), &[1, 3, 64, 64], 0.0, 1.0);
    let y = eval(&store, |cx| {
        let v = cx.tape.constant(x);
        stem.forward(cx, v)
    });
    // pre-activation is unit-variance per channel, so GELU keeps values above its minimum
    assert!(y.data().iter().all(|&v| v >= -0.171));
    let golden = [
        575.0274120631179,
        848.3551377811425,
        0.1285662195598581,
        -0.1020776937844771,
        0.046724286617142945,
        -0.0950809327768489,
    ];
    assert_close(&fingerprint(&y), &golden, 1e-9, "stem fingerprint");
}

#[test]
fn zeroed_sublayers_reduce_to_normalized_skip() {
    let (mut store, blk) = build(0, |b| TransformerBlock::new(b, 8, 2, 4, 16));
    zero(&mut store, blk.attn.proj.weight);
    zero(&mut store, blk.attn.proj.bias.unwrap());
    zero(&mut store, blk.ffn.fc2.weight);
    zero(&mut store, blk.ffn.fc2.bias.unwrap());
    let x = uniform(&mut rng(1), &[1, 8, 6, 5], -2.0, 2.0);
    let y = run_block(&store, &blk, &x);
    // two residual norms in a row: norm(norm(x)) per token
    let want = from_tokens(&layer_norm_oracle(&layer_norm_oracle(&to_tokens(&x), 8), 8), 8);
    assert_close(y.data(), &want, 1e-12, "skip path");
}

#[test]
fn block_keeps_shape() {
    let (store, blk) = build(0, |b| TransformerBlock::new(b, 32, 4, 4, 64));
    let x = uniform(&mut rng(1), &[2, 32, 8, 8], -1.0, 1.0);
    assert_eq!(run_block(&store, &blk, &x).shape(), &[2, 32, 8, 8]);
}

#[test]
fn single_window_matches_dense_attention() {
    for (seed, (window, h, w)) in [(8, 6, 6), (16, 5, 7), (7, 7, 7), (9, 3, 1)].into_iter().enumerate() {
        let (store, blk) = build(seed as u64, |b| TransformerBlock::new(b, 8, 2, window, 12));
        let x = uniform(&mut rng(seed as u64 + 10), &[1, 8, h, w], -1.5, 1.5);
        let y = run_block(&store, &blk, &x);
        let d = max_abs_diff(y.data(), &block_oracle(&store, &blk, &x));
        assert!(d <= 1e-10, "window {window} on {h}x{w}: {d}");
    }
}

#[test]
fn padded_windows_match_per_window_dense_attention() {
    // edge windows are padded; padded keys must not take part
    for (seed, (window, h, w)) in [(4, 6, 6), (4, 5, 9), (3, 7, 4)].into_iter().enumerate() {
        let (store, blk) = build(seed as u64, |b| TransformerBlock::new(b, 8, 4, window, 8));
        let x = uniform(&mut rng(seed as u64 + 20), &[1, 8, h, w], -1.5, 1.5);
        let y = run_block(&store, &blk, &x);
        let d = max_abs_diff(y.data(), &block_oracle(&store, &blk, &x));
        assert!(d <= 1e-10, "window {window} on {h}x{w}: {d}");
    }
}

#[test]
fn batch_samples_are_independent() {
    let (store, blk) = build(0, |b| TransformerBlock::new(b, 8, 2, 4, 8));
    let x = uniform(&mut rng(1), &[2, 8, 5, 6], -1.0, 1.0);
    let y = run_block(&store, &blk, &x);
    let second = Tensor::new(&[1, 8, 5, 6], x.data()[240..].to_vec()).unwrap();
    assert_close(&y.data()[240..], run_block(&store, &blk, &second).data(), 1e-12, "sample 1");
}

fn run_exchange(store: &ParamStore, ex: &Exchange, xs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, false);
    let vars: Vec<_> = xs.iter().map(|x| cx.tape.constant(x.clone())).collect();
    let out = ex.forward(&mut cx, &vars).unwrap();
    out.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn single_branch_exchange_is_gelu() {
    let (store, ex) = build(0, |b| Exchange::new(b, &[8]));
    assert!(matches!(ex.paths[0][0], ExchangePath::Identity));
    let x = uniform(&mut rng(1), &[2, 8, 4, 4], -3.0, 3.0);
    let y = run_exchange(&store, &ex, std::slice::from_ref(&x));
    let want: Vec<f64> = x.data().iter().map(|&v| gelu(v)).collect();
    assert_close(y[0].data(), &want, 1e-14, "gelu");
}

#[test]
fn zeroed_cross_paths_isolate_branches() {
    let (mut store, ex) = build(0, |b| Exchange::new(b, &[4, 8]));
    for row in &ex.paths {
        for path in row {
            let convs: Vec<_> = match path {
                ExchangePath::Identity => vec![],
                ExchangePath::Down(steps) => steps.iter().collect(),
                ExchangePath::Up { conv, .. } => vec![conv],
            };
            for c in convs {
                zero(&mut store, c.weight);
                zero(&mut store, c.bias.unwrap());
            }
        }
    }
    let mut r = rng(2);
    let x0 = uniform(&mut r, &[1, 4, 8, 8], -2.0, 2.0);
    let x1 = uniform(&mut r, &[1, 8, 4, 4], -2.0, 2.0);
    let y = run_exchange(&store, &ex, &[x0.clone(), x1.clone()]);
    for (out, x) in y.iter().zip([&x0, &x1]) {
        let want: Vec<f64> = x.data().iter().map(|&v| gelu(v)).collect();
        assert_close(out.data(), &want, 1e-14, "isolated branch");
    }
    let x1b = uniform(&mut r, &[1, 8, 4, 4], -2.0, 2.0);
    let y2 = run_exchange(&store, &ex, &[x0, x1b]);
    assert_eq!(y[0].data(), y2[0].data());
}

/// Output size of each resampling path computed from conv and upsampling arithmetic.
fn path_shape(path: &ExchangePath, from: &[usize]) -> Vec<usize> {
    match path {
        ExchangePath::Identity => from.to_vec(),
        ExchangePath::Down(steps) => steps.iter().fold(from.to_vec(), |s, c| {
            assert_eq!(s[1], c.cin);
            vec![s[0], c.cout, (s[2] + 2 * c.pad - c.kernel) / c.stride + 1, (s[3] + 2 * c.pad - c.kernel) / c.stride + 1]
        }),
        ExchangePath::Up { conv, factor } => {
            assert_eq!(from[1], conv.cin);
            vec![from[0], conv.cout, from[2] * factor, from[3] * factor]
        }
    }
}

#[test]
fn three_branch_exchange_preserves_shapes() {
    let ch = [4, 8, 12];
    let (store, ex) = build(5, |b| Exchange::new(b, &ch));
    let shapes: Vec<Vec<usize>> = (0..3).map(|i| vec![2, ch[i], 16 >> i, 16 >> i]).collect();
    for (j, row) in ex.paths.iter().enumerate() {
        for (i, path) in row.iter().enumerate() {
            assert_eq!(path_shape(path, &shapes[i]), shapes[j], "path {i} -> {j}");
        }
    }
    let mut r = rng(6);
    let xs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut r, s, -1.0, 1.0)).collect();
    for (y, s) in run_exchange(&store, &ex, &xs).iter().zip(&shapes) {
        assert_eq!(y.shape(), s.as_slice());
    }
}

fn run_backbone(store: &ParamStore, bb: &Backbone, image: &Tensor, injected: Option<&[Tensor; 4]>) -> hrtnet::Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, false);
    let x = cx.tape.constant(image.clone());
    let inj = injected.map(|ts| ts.clone().map(|t| cx.tape.constant(t)));
    let f = bb.forward(&mut cx, x, inj.as_ref())?;
    Ok(f.maps.iter().map(|&m| tape.value(m).clone()).collect())
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_hw: [64, 64],
        ..tiny_config()
    }
}

#[test]
fn full_size_output_shapes() {
    let config = ModelConfig::default();
    let (store, bb) = build(0, |b| Backbone::new(b, &config));
    let x = uniform(&mut rng(1), &[1, 3, 224, 224], 0.0, 1.0);
    let out = run_backbone(&store, &bb, &x, None).unwrap();
    for (i, (t, n)) in out.iter().zip([56, 28, 14, 7]).enumerate() {
        assert_eq!(t.shape(), &[1, config.branch_channels[i], n, n]);
    }
}

#[test]
fn zero_injection_equals_no_injection() {
    let config = small_config();
    let (store, bb) = build(0, |b| Backbone::new(b, &config));
    let x = uniform(&mut rng(1), &[2, 3, 64, 64], 0.0, 1.0);
    let zeros = std::array::from_fn(|i| {
        let (h, w) = config.level_hw(i);
        Tensor::zeros(&[2, config.branch_channels[i], h, w])
    });
    let plain = run_backbone(&store, &bb, &x, None).unwrap();
    let injected = run_backbone(&store, &bb, &x, Some(&zeros)).unwrap();
    assert_eq!(plain, injected);
}

#[test]
fn nonzero_injection_changes_every_level_from_its_stage() {
    let config = small_config();
    let (store, bb) = build(0, |b| Backbone::new(b, &config));
    let x = uniform(&mut rng(1), &[1, 3, 64, 64], 0.0, 1.0);
    let plain = run_backbone(&store, &bb, &x, None).unwrap();
    let mut inj: [Tensor; 4] = std::array::from_fn(|i| {
        let (h, w) = config.level_hw(i);
        Tensor::zeros(&[1, config.branch_channels[i], h, w])
    });
    inj[3].data_mut()[0] = 1.0;
    // only the last stage sees it, and its exchange spreads it to all branches
    let out = run_backbone(&store, &bb, &x, Some(&inj)).unwrap();
    for (a, b) in plain.iter().zip(&out) {
        assert!(max_abs_diff(a.data(), b.data()) > 0.0);
    }
}

#[test]
fn injection_mismatch_names_stage_and_branch() {
    let config = small_config();
    let (store, bb) = build(0, |b| Backbone::new(b, &config));
    let x = uniform(&mut rng(1), &[1, 3, 64, 64], 0.0, 1.0);
    let mut inj: [Tensor; 4] = std::array::from_fn(|i| {
        let (h, w) = config.level_hw(i);
        Tensor::zeros(&[1, config.branch_channels[i], h, w])
    });
    inj[2] = Tensor::zeros(&[1, config.branch_channels[2], 3, 4]);
    let err = run_backbone(&store, &bb, &x, Some(&inj)).unwrap_err();
    match &err {
        Error::Injection { stage, branch, expected, got } => {
            assert_eq!((*stage, *branch), (3, 3));
            assert_eq!(expected, &vec![1, 8, 4, 4]);
            assert_eq!(got, &vec![1, 8, 3, 4]);
        }
        other => panic!("unexpected error {other}"),
    }
    let msg = err.to_string();
    assert!(msg.contains("stage 3") && msg.contains("branch 3"), "{msg}");
}

#[test]
fn outputs_follow_stride_contract_for_non_square_inputs() {
    let config = ModelConfig {
        input_hw: [32, 96],
        ..tiny_config()
    };
    let (store, bb) = build(0, |b| Backbone::new(b, &config));
    let x = uniform(&mut rng(1), &[1, 3, 32, 96], 0.0, 1.0);
    let out = run_backbone(&store, &bb, &x, None).unwrap();
    for (i, t) in out.iter().enumerate() {
        let s = 4 << i;
        assert_eq!(t.shape(), &[1, config.branch_channels[i], 32 / s, 96 / s]);
    }
}

#[test]
fn forward_is_deterministic_with_golden_checksum() {
    let config = small_config();
    let x = uniform(&mut rng(1), &[1, 3, 64, 64], 0.0, 1.0);
    let runs: Vec<Vec<Tensor>> = (0..2)
        .map(|_| {
            let (store, bb) = build(42, |b| Backbone::new(b, &config));
            run_backbone(&store, &bb, &x, None).unwrap()
        })
        .collect();
    for (a, b) in runs[0].iter().zip(&runs[1]) {
        assert_eq!(a.checksum(), b.checksum());
    }
    let golden: [[f64; 2]; 4] = [
        [334.55188400019796, 686.2709322846357],
        [191.24053068265636, 381.46117631484634],
        [55.81393101672481, 101.64510938840422],
        [15.15292544130693, 28.098590883523787],
    ];
    for (i, t) in runs[0].iter().enumerate() {
        assert_close(&fingerprint(t)[..2], &golden[i], 1e-8, &format!("level {i}"));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let config = small_config();
    for seed in 0..3 {
        let (store, bb) = build(seed, |b| Backbone::new(b, &config));
        let x = uniform(&mut rng(seed + 100), &[1, 3, 64, 64], 0.0, 1.0);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, true);
        let xv = cx.tape.constant(x);
        let f = bb.forward(&mut cx, xv, None).unwrap();
        let mut total = None;
        for (i, &m) in f.maps.iter().enumerate() {
            let s = weighted_sum(cx.tape, m, seed * 10 + i as u64).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => cx.tape.add(t, s).unwrap(),
            });
        }
        cx.tape.backward(total.unwrap()).unwrap();
        for (k, g) in cx.param_grads().iter().enumerate() {
            let name = store.iter().nth(k).unwrap().0;
            let g = g.as_ref().unwrap_or_else(|| panic!("seed {seed}: {name} unused"));
            assert!(g.iter().any(|&v| v != 0.0), "seed {seed}: {name} has an all-zero gradient");
        }
    }
}

//! Finite-difference cases for every differentiable op: each case is an op name,
//! its input leaves and a closure producing the op output.
#![allow(dead_code)]

use hrtnet_tensor::{finite_diff_check, GradCheckReport, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub leaves: Vec<Tensor>,
    pub f: OpFn,
}

fn case(name: &'static str, leaves: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        leaves,
        f: Box::new(f),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `y` with a fixed random weighting so every output element matters.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let r = t.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = t.mul(y, r)?;
    t.sum(p)
}

impl Case {
    pub fn check(&self) -> GradCheckReport {
        finite_diff_check(
            |t, v| {
                let y = (self.f)(t, v)?;
                weighted_sum(t, y, 77)
            },
            &self.leaves,
            EPS,
            TOL,
        )
        .expect("gradient check runs")
    }
}

fn shapes() -> Vec<Vec<usize>> {
    vec![vec![3], vec![2, 3], vec![2, 3, 4], vec![1, 2, 3, 3], vec![2, 1, 4, 2], vec![3, 5]]
}

pub fn elementwise() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut out = Vec::new();
    for s in shapes() {
        let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &s, 0.5, 2.0);
        out.push(case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
        out.push(case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
        out.push(case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])));
        out.push(case("div", vec![a.clone(), pos.clone()], |t, v| t.div(v[0], v[1])));
        out.push(case("scale", vec![a.clone()], |t, v| t.scale(v[0], -1.7)));
        out.push(case("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3)));
        out.push(case("gelu", vec![a.clone()], |t, v| t.gelu(v[0])));
        out.push(case("sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0])));
        out.push(case("softplus", vec![a.clone()], |t, v| t.softplus(v[0])));
        // keep relu away from its kink
        let away = Tensor::from_fn(&s, |i| if i % 2 == 0 { pos.data()[i] } else { -pos.data()[i] });
        out.push(case("relu", vec![away], |t, v| t.relu(v[0])));
        out.push(case("custom", vec![a.clone()], |t, v| {
            t.custom_unary(
                v[0],
                |x| Tensor::from_fn(x.shape(), |i| x.data()[i].powi(3)),
                |x, _, g| x.data().iter().zip(g).map(|(a, g)| 3.0 * a * a * g).collect(),
            )
        }));
    }
    out
}

pub fn reductions() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    for s in shapes() {
        let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
        out.push(case("sum", vec![a.clone()], |t, v| t.sum(v[0])));
        out.push(case("mean", vec![a.clone()], |t, v| t.mean(v[0])));
        for axis in 0..s.len() {
            out.push(case("sum_axis", vec![a.clone()], move |t, v| t.sum_axis(v[0], axis)));
            out.push(case("mean_axis", vec![a.clone()], move |t, v| t.mean_axis(v[0], axis)));
            out.push(case("softmax", vec![a.clone()], move |t, v| t.softmax(v[0], axis)));
        }
    }
    for s in [[1, 2, 3, 3], [2, 1, 4, 2], [2, 3, 1, 1], [1, 1, 5, 2], [3, 2, 2, 2]] {
        let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
        out.push(case("global_avg_pool", vec![a], |t, v| t.global_avg_pool(v[0])));
    }
    out
}

pub fn shape_ops() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out = Vec::new();
    for s in shapes() {
        let a = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let n = a.numel();
        out.push(case("reshape", vec![a.clone()], move |t, v| t.reshape(v[0], &[n])));
        let mut perm: Vec<usize> = (0..s.len()).rev().collect();
        if perm.len() > 2 {
            perm.swap(0, 1);
        }
        out.push(case("permute", vec![a.clone()], move |t, v| t.permute(v[0], &perm)));
        let axis = s.len() - 1;
        let b = {
            let mut sb = s.clone();
            sb[axis] += 1;
            rand_tensor(&mut rng, &sb, -2.0, 2.0)
        };
        out.push(case("concat", vec![a.clone(), b], move |t, v| t.concat(&[v[0], v[1], v[0]], axis)));
        if s[0] > 1 {
            let len = s[0] - 1;
            out.push(case("narrow", vec![a.clone()], move |t, v| t.narrow(v[0], 0, 1, len)));
        }
        out.push(case("pad_end", vec![a.clone()], |t, v| t.pad_end(v[0], 0, 2)));
        let mut one = s.clone();
        one[0] = 1;
        let c = rand_tensor(&mut rng, &one, -2.0, 2.0);
        let mut target = s.clone();
        target[0] = 3;
        out.push(case("broadcast_to", vec![c], move |t, v| t.broadcast_to(v[0], &target)));
    }
    out
}

pub fn convolutions() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut out = Vec::new();
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3], 2, 1),
        ([2, 1, 4, 4], [2, 1, 3, 3], 1, 1),
        ([1, 3, 4, 6], [2, 3, 1, 1], 1, 0),
        ([2, 2, 6, 5], [1, 2, 3, 3], 2, 0),
        ([1, 2, 3, 3], [2, 2, 3, 3], 1, 2),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = rand_tensor(&mut rng, &xs, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &ws, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[ws[0]], -1.0, 1.0);
        out.push(case("conv2d", vec![x.clone(), w.clone(), b], move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        }));
        out.push(case("conv2d_nobias", vec![x, w], move |t, v| t.conv2d(v[0], v[1], None, stride, pad)));
    }
    out
}

pub fn products() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut out = Vec::new();
    for (lead, din, dout) in [(vec![3], 2, 4), (vec![2, 3], 4, 1), (vec![1], 5, 3), (vec![2, 2, 2], 3, 3), (vec![4], 1, 2)] {
        let mut xs = lead.clone();
        xs.push(din);
        let x = rand_tensor(&mut rng, &xs, -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[din, dout], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[dout], -1.0, 1.0);
        out.push(case("linear", vec![x.clone(), w.clone(), b], |t, v| t.linear(v[0], v[1], Some(v[2]))));
        out.push(case("linear_nobias", vec![x, w], |t, v| t.linear(v[0], v[1], None)));
    }
    for (batch, m, k, n) in [(vec![1], 2, 3, 4), (vec![2], 3, 3, 1), (vec![2, 2], 1, 4, 2), (vec![3], 4, 2, 3), (vec![1, 1], 2, 2, 2)] {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut sa = batch.clone();
            sa.extend(if ta { [k, m] } else { [m, k] });
            let mut sb = batch.clone();
            sb.extend(if tb { [n, k] } else { [k, n] });
            let a = rand_tensor(&mut rng, &sa, -1.0, 1.0);
            let b = rand_tensor(&mut rng, &sb, -1.0, 1.0);
            out.push(case("matmul", vec![a, b], move |t, v| t.matmul(v[0], v[1], ta, tb)));
        }
    }
    out
}

pub fn normalizations() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut out = Vec::new();
    for s in [vec![2, 4], vec![3, 2, 5], vec![1, 3], vec![2, 2, 2, 6], vec![4, 7]] {
        let d = *s.last().unwrap();
        let x = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[d], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[d], -0.5, 0.5);
        out.push(case("layer_norm", vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2])));
    }
    for s in [[1, 2, 3, 3], [2, 3, 2, 2], [1, 1, 4, 5], [2, 2, 1, 3], [1, 4, 3, 2]] {
        let x = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[s[1]], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[s[1]], -0.5, 0.5);
        out.push(case("instance_norm", vec![x, g, b], |t, v| t.instance_norm(v[0], v[1], v[2])));
    }
    out
}

pub fn resampling() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut out = Vec::new();
    for (s, oh, ow) in [([1, 1, 2, 2], 4, 4), ([2, 2, 3, 4], 5, 7), ([1, 2, 6, 6], 3, 2), ([1, 1, 1, 3], 4, 6), ([1, 3, 4, 4], 16, 16)] {
        let x = rand_tensor(&mut rng, &s, -1.0, 1.0);
        out.push(case("bilinear_resize", vec![x], move |t, v| t.bilinear_resize(v[0], oh, ow)));
    }
    out
}

pub fn all() -> Vec<Case> {
    [elementwise(), reductions(), shape_ops(), convolutions(), products(), normalizations(), resampling()]
        .into_iter()
        .flatten()
        .collect()
}

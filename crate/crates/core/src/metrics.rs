//! Saliency evaluation: MAE, adaptive F-measure, S-measure, adaptive E-measure and
//! precision/recall curves.
//!
//! Conventions follow the common Python toolkits: the adaptive threshold is
//! `min(2 mean(pred), 1)` with `>=` binarization, `beta^2 = 0.3`, `alpha = 0.5`.

use crate::error::{Error, Result};

pub const BETA2: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
pub const PR_THRESHOLDS: usize = 256;

/// Real-valued map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Input(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(GrayMap { height, width, data })
    }

    /// Min-max rescaling to `[0, 1]`; constant maps are left unchanged.
    pub fn normalized(&self) -> GrayMap {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let data = if hi > lo {
            self.data.iter().map(|&v| (v - lo) / (hi - lo)).collect()
        } else {
            self.data.clone()
        };
        GrayMap { data, ..*self }
    }
}

/// Binary ground truth, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::Input(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BinaryMap { height, width, data })
    }

    /// Foreground where `value >= threshold`.
    pub fn from_gray(m: &GrayMap, threshold: f64) -> Self {
        BinaryMap {
            height: m.height,
            width: m.width,
            data: m.data.iter().map(|&v| v >= threshold).collect(),
        }
    }

    fn count(&self) -> usize {
        self.data.iter().filter(|&&g| g).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub s: f64,
    pub f_beta: f64,
    pub e_xi: f64,
    pub mae: f64,
    /// `(precision, recall)` at thresholds `t / 255`, `t = 0..=255`.
    pub pr: Vec<(f64, f64)>,
}

fn check(pred: &GrayMap, gt: &BinaryMap) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::Input(format!(
            "prediction {}x{} and ground truth {}x{} differ in size",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(pred: &GrayMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / pred.data.len() as f64)
}

pub fn adaptive_threshold(pred: &GrayMap) -> f64 {
    (2.0 * mean(&pred.data)).min(1.0)
}

pub fn f_measure_adaptive(pred: &GrayMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let t = adaptive_threshold(pred);
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p >= t {
            predicted += 1;
            tp += g as usize;
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / gt.count() as f64;
    Ok((1.0 + BETA2) * precision * recall / (BETA2 * precision + recall))
}

pub fn s_measure(pred: &GrayMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let n = gt.data.len();
    let fg = gt.count();
    if fg == 0 {
        return Ok(1.0 - mean(&pred.data));
    }
    if fg == n {
        return Ok(mean(&pred.data));
    }
    let s = ALPHA * object_score(pred, gt, fg) + (1.0 - ALPHA) * region_score(pred, gt);
    Ok(s.max(0.0))
}

/// Mean and sample standard deviation (0 for fewer than two values).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn object_score(pred: &GrayMap, gt: &BinaryMap, fg: usize) -> f64 {
    let n = gt.data.len();
    let mut inside = Vec::with_capacity(fg);
    let mut outside = Vec::with_capacity(n - fg);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g {
            inside.push(p);
        } else {
            outside.push(1.0 - p);
        }
    }
    let score = |v: &[f64]| {
        let (m, sd) = mean_std(v);
        2.0 * m / (m * m + 1.0 + sd)
    };
    // area-weighted in integer counts so a perfect map scores exactly 1
    (fg as f64 * score(&inside) + (n - fg) as f64 * score(&outside)) / n as f64
}

/// Foreground centroid as a 1-based split point, rounding half to even.
fn centroid(gt: &BinaryMap) -> (usize, usize) {
    let (mut sy, mut sx, mut cnt) = (0.0, 0.0, 0usize);
    for (i, &g) in gt.data.iter().enumerate() {
        if g {
            sy += (i / gt.width) as f64;
            sx += (i % gt.width) as f64;
            cnt += 1;
        }
    }
    if cnt == 0 {
        let x = (gt.width as f64 / 2.0).round_ties_even() as usize;
        let y = (gt.height as f64 / 2.0).round_ties_even() as usize;
        return (x + 1, y + 1);
    }
    let y = (sy / cnt as f64).round_ties_even() as usize;
    let x = (sx / cnt as f64).round_ties_even() as usize;
    (x + 1, y + 1)
}

fn region_score(pred: &GrayMap, gt: &BinaryMap) -> f64 {
    let (h, w) = (gt.height, gt.width);
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    let mut acc = 0.0;
    for (y0, y1, x0, x1) in quads {
        let area = (y1 - y0) * (x1 - x0);
        if area == 0 {
            continue;
        }
        let mut p = Vec::with_capacity(area);
        let mut g = Vec::with_capacity(area);
        for r in y0..y1 {
            for c in x0..x1 {
                p.push(pred.data[r * w + c]);
                g.push(if gt.data[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        acc += area as f64 * ssim(&p, &g);
    }
    acc / (h * w) as f64
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    let (x, y) = (mean(p), mean(g));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&a, &b) in p.iter().zip(g) {
            sx += (a - x) * (a - x);
            sy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
        let d = (n - 1) as f64;
        (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn e_measure_adaptive(pred: &GrayMap, gt: &BinaryMap) -> Result<f64> {
    check(pred, gt)?;
    let t = adaptive_threshold(pred);
    let n = gt.data.len();
    let gt_fg = gt.count();
    // counts of (prediction, truth) = (fg, fg), (fg, bg), (bg, fg), (bg, bg)
    let mut parts = [0usize; 4];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let idx = if p >= t { 0 } else { 2 } + if g { 0 } else { 1 };
        parts[idx] += 1;
    }
    let pred_fg = parts[0] + parts[1];
    let sum = if gt_fg == 0 {
        (n - pred_fg) as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let combos = [(1.0 - mp, 1.0 - mg), (1.0 - mp, -mg), (-mp, 1.0 - mg), (-mp, -mg)];
        parts
            .iter()
            .zip(combos)
            .map(|(&cnt, (a, b))| {
                let align = 2.0 * a * b / (a * a + b * b);
                (align + 1.0) * (align + 1.0) / 4.0 * cnt as f64
            })
            .sum()
    };
    Ok(sum / n as f64)
}

/// Binarizes at `pred > t / 255` for every `t` in `0..=255`.
pub fn pr_curve(pred: &GrayMap, gt: &BinaryMap) -> Result<Vec<(f64, f64)>> {
    check(pred, gt)?;
    // histogram of the number of thresholds each pixel clears
    let mut fg_hist = [0usize; PR_THRESHOLDS + 1];
    let mut bg_hist = [0usize; PR_THRESHOLDS + 1];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        // count of t with t/255 < p
        let cleared = (0..PR_THRESHOLDS).take_while(|&t| p > t as f64 / 255.0).count();
        if g {
            fg_hist[cleared] += 1;
        } else {
            bg_hist[cleared] += 1;
        }
    }
    let gt_fg = gt.count();
    let mut out = Vec::with_capacity(PR_THRESHOLDS);
    let (mut tp, mut fp) = (0usize, 0usize);
    for c in (1..=PR_THRESHOLDS).rev() {
        tp += fg_hist[c];
        fp += bg_hist[c];
        // pixels clearing at least c thresholds are positive at t = c - 1
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if gt_fg == 0 { 1.0 } else { tp as f64 / gt_fg as f64 };
        out.push((precision, recall));
    }
    out.reverse();
    Ok(out)
}

pub fn evaluate(pred: &GrayMap, gt: &BinaryMap) -> Result<EvalResult> {
    Ok(EvalResult {
        s: s_measure(pred, gt)?,
        f_beta: f_measure_adaptive(pred, gt)?,
        e_xi: e_measure_adaptive(pred, gt)?,
        mae: mae(pred, gt)?,
        pr: pr_curve(pred, gt)?,
    })
}

/// Per-image mean of every metric and of the PR curve.
pub fn mean_result(results: &[EvalResult]) -> Result<EvalResult> {
    if results.is_empty() {
        return Err(Error::Input("no results to average".into()));
    }
    let n = results.len() as f64;
    let avg = |f: fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    let mut pr = vec![(0.0, 0.0); PR_THRESHOLDS];
    for r in results {
        for (acc, &(p, rc)) in pr.iter_mut().zip(&r.pr) {
            acc.0 += p / n;
            acc.1 += rc / n;
        }
    }
    Ok(EvalResult {
        s: avg(|r| r.s),
        f_beta: avg(|r| r.f_beta),
        e_xi: avg(|r| r.e_xi),
        mae: avg(|r| r.mae),
        pr,
    })
}

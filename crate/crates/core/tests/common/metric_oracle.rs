//! Metric definitions written out directly, pixel by pixel, without sharing code
//! with the library.

/// Row-major 2D arrays.
pub struct Pair<'a> {
    pub h: usize,
    pub w: usize,
    pub pred: &'a [f64],
    pub gt: &'a [bool],
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(p: &Pair) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.h * p.w {
        acc += (p.pred[i] - if p.gt[i] { 1.0 } else { 0.0 }).abs();
    }
    acc / (p.h * p.w) as f64
}

pub fn threshold(p: &Pair) -> f64 {
    let t = 2.0 * mean(p.pred);
    if t > 1.0 {
        1.0
    } else {
        t
    }
}

pub fn f_measure(p: &Pair) -> f64 {
    let t = threshold(p);
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for i in 0..p.h * p.w {
        match (p.pred[i] >= t, p.gt[i]) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    1.3 * precision * recall / (0.3 * precision + recall)
}

fn s_object(values: &[f64]) -> f64 {
    let x = mean(values);
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sd)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = mean(pred);
    let y = mean(gt);
    let (sx, sy, sxy) = if pred.len() > 1 {
        (
            pred.iter().map(|a| (a - x).powi(2)).sum::<f64>() / (n - 1.0),
            gt.iter().map(|b| (b - y).powi(2)).sum::<f64>() / (n - 1.0),
            pred.iter().zip(gt).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0),
        )
    } else {
        (0.0, 0.0, 0.0)
    };
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

pub fn s_measure(p: &Pair) -> f64 {
    let gtf: Vec<f64> = p.gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let y_mean = mean(&gtf);
    if y_mean == 0.0 {
        return 1.0 - mean(p.pred);
    }
    if y_mean == 1.0 {
        return mean(p.pred);
    }
    // object term
    let fg: Vec<f64> = (0..p.pred.len()).filter(|&i| p.gt[i]).map(|i| p.pred[i]).collect();
    let bg: Vec<f64> = (0..p.pred.len()).filter(|&i| !p.gt[i]).map(|i| 1.0 - p.pred[i]).collect();
    let object = y_mean * s_object(&fg) + (1.0 - y_mean) * s_object(&bg);

    // region term around the rounded centroid
    let (mut cy, mut cx, mut cnt) = (0.0, 0.0, 0.0);
    for r in 0..p.h {
        for c in 0..p.w {
            if p.gt[r * p.w + c] {
                cy += r as f64;
                cx += c as f64;
                cnt += 1.0;
            }
        }
    }
    let x = (cx / cnt).round_ties_even() as usize + 1;
    let y = (cy / cnt).round_ties_even() as usize + 1;
    let area = (p.h * p.w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = ((p.w - x) * y) as f64 / area;
    let w3 = (x * (p.h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> Option<f64> {
        if r0 == r1 || c0 == c1 {
            return None;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                a.push(p.pred[r * p.w + c]);
                b.push(gtf[r * p.w + c]);
            }
        }
        Some(ssim(&a, &b))
    };
    let mut region = 0.0;
    for (wgt, q) in [
        (w1, block(0, y, 0, x)),
        (w2, block(0, y, x, p.w)),
        (w3, block(y, p.h, 0, x)),
        (w4, block(y, p.h, x, p.w)),
    ] {
        if let Some(s) = q {
            region += wgt * s;
        }
    }
    let s = 0.5 * object + 0.5 * region;
    if s < 0.0 {
        0.0
    } else {
        s
    }
}

/// Enhanced alignment evaluated on every pixel of the bias-removed maps.
pub fn e_measure(p: &Pair) -> f64 {
    let t = threshold(p);
    let n = p.pred.len();
    let fm: Vec<f64> = p.pred.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = p.gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let enhanced: Vec<f64> = if gt.iter().all(|&g| g == 0.0) {
        fm.iter().map(|v| 1.0 - v).collect()
    } else if gt.iter().all(|&g| g == 1.0) {
        fm.clone()
    } else {
        let (mf, mg) = (mean(&fm), mean(&gt));
        (0..n)
            .map(|i| {
                let (a, b) = (fm[i] - mf, gt[i] - mg);
                let xi = 2.0 * a * b / (a * a + b * b);
                (xi + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n as f64
}

/// Counts each threshold separately.
pub fn pr_curve(p: &Pair) -> Vec<(f64, f64)> {
    (0..256)
        .map(|t| {
            let th = t as f64 / 255.0;
            let (mut tp, mut fp, mut pos) = (0usize, 0usize, 0usize);
            for i in 0..p.pred.len() {
                let hit = p.pred[i] > th;
                if p.gt[i] {
                    pos += 1;
                }
                if hit && p.gt[i] {
                    tp += 1;
                }
                if hit && !p.gt[i] {
                    fp += 1;
                }
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
            (precision, recall)
        })
        .collect()
}

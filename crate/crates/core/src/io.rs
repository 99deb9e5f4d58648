//! Map files, metric tables and PR plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hrtnet_tensor::Tensor;

use crate::error::{Error, Result};
use crate::metrics::{evaluate, mean_result, BinaryMap, EvalResult, GrayMap};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Reads an 8-bit grayscale PNG or PGM (colour images are converted to luma) as values in `[0, 1]`.
pub fn read_map(path: impl AsRef<Path>) -> Result<GrayMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    GrayMap::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Ground truth binarized at 128.
pub fn read_gt(path: impl AsRef<Path>) -> Result<BinaryMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    BinaryMap::new(h as usize, w as usize, img.into_raw().into_iter().map(|v| v >= 128).collect())
}

/// `p * 255` rounded half-up.
pub fn prob_to_u8(p: f64) -> u8 {
    (p * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn write_gray_png(path: impl AsRef<Path>, height: usize, width: usize, bytes: Vec<u8>) -> Result<()> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| image_err(path, "buffer does not match image size"))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

pub fn write_prob_png(path: impl AsRef<Path>, map: &GrayMap) -> Result<()> {
    write_gray_png(path, map.height, map.width, map.data.iter().map(|&p| prob_to_u8(p)).collect())
}

/// Reads an image as `[1, 3, H, W]` in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Reads a grayscale image as `[1, 1, H, W]` in `[0, 1]`.
pub fn read_plane(path: impl AsRef<Path>) -> Result<Tensor> {
    let m = read_map(path)?;
    Ok(Tensor::new(&[1, 1, m.height, m.width], m.data)?)
}

/// Writes the first sample of a `[N, 3, H, W]` tensor in `[0, 1]` as an RGB PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Input(format!("expected [N, 3, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let bytes: Vec<u8> = (0..h * w * 3).map(|i| prob_to_u8(t.data()[(i % 3) * h * w + i / 3])).collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| image_err(path, "buffer does not match image size"))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Writes channel `c` of the first sample of a `[N, C, H, W]` tensor in `[0, 1]` as a grayscale PNG.
pub fn write_plane_png(path: impl AsRef<Path>, t: &Tensor, c: usize) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || c >= s[1] {
        return Err(Error::Input(format!("no channel {c} in {s:?}")));
    }
    let n = s[2] * s[3];
    let plane = &t.data()[c * n..(c + 1) * n];
    write_gray_png(path, s[2], s[3], plane.iter().map(|&v| prob_to_u8(v)).collect())
}

fn map_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Pairs maps by file stem and evaluates each pair; predictions are min-max normalized.
pub fn evaluate_dirs(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<Vec<(String, EvalResult)>> {
    let preds = map_files(pred_dir.as_ref())?;
    let gts = map_files(gt_dir.as_ref())?;
    if gts.is_empty() {
        return Err(Error::Input(format!("no PNG/PGM maps in {}", gt_dir.as_ref().display())));
    }
    let mut out = Vec::with_capacity(gts.len());
    for (name, gt_path) in &gts {
        let pred_path = preds
            .get(name)
            .ok_or_else(|| Error::Input(format!("no prediction for ground truth {name}")))?;
        let pred = read_map(pred_path)?.normalized();
        let gt = read_gt(gt_path)?;
        out.push((name.clone(), evaluate(&pred, &gt)?));
    }
    Ok(out)
}

/// One row per image and a final `mean` row.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, EvalResult)]) -> Result<EvalResult> {
    let path = path.as_ref();
    let summary = mean_result(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image", "s_measure", "f_measure", "e_measure", "mae"])?;
    for (name, r) in rows.iter().map(|(n, r)| (n.as_str(), r)).chain([("mean", &summary)]) {
        w.write_record([
            name.to_string(),
            r.s.to_string(),
            r.f_beta.to_string(),
            r.e_xi.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

pub fn write_pr_csv(path: impl AsRef<Path>, pr: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["threshold", "precision", "recall"])?;
    for (t, (p, r)) in pr.iter().enumerate() {
        w.write_record([t.to_string(), p.to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pr_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Input(format!("{}: bad PR row {:?}", path.display(), rec)))
        };
        out.push((field(1)?, field(2)?));
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no PR rows", path.display())));
    }
    Ok(out)
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static precision (y) over recall (x) line plot.
pub fn pr_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let (pw, ph) = (W - 2.0 * M, H - 2.0 * M);
    let sx = |r: f64| M + r.clamp(0.0, 1.0) * pw;
    let sy = |p: f64| H - M - p.clamp(0.0, 1.0) * ph;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <rect x=\"{M}\" y=\"{M}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>\n"
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{v:.1}</text>\n",
            sx(v),
            H - M + 16.0
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>\n",
            M - 6.0,
            sy(v) + 4.0
        );
    }
    s += &format!("<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">Recall</text>\n", W / 2.0, H - 12.0);
    s += &format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">Precision</text>\n",
        H / 2.0,
        H / 2.0
    );
    for (k, (label, pts)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(p, r)| format!("{:.2},{:.2}", sx(r), sy(p))).collect();
        s += &format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        );
        let ly = M + 16.0 + 16.0 * k as f64;
        s += &format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            M + 10.0,
            M + 30.0
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>\n",
            M + 36.0,
            ly + 4.0,
            escape_xml(label)
        );
    }
    s + "</svg>\n"
}

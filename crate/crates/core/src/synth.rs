//! Synthetic paired-modality scenes: textured background, flat-colored objects,
//! and a supplementary channel that sees a possibly different subset of them.

use hrtnet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aux_stream::SupplementaryInput;
use crate::config::{Modality, MAX_FOCAL_SLICES};
use crate::error::{Error, Result};
use crate::metrics::BinaryMap;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub image_hw: [usize; 2],
    pub n_objects: usize,
    pub modality: Modality,
    /// Scales additive Gaussian noise on both modalities.
    pub noise_level: f64,
    /// Probability that an object is missing from the supplementary channel.
    pub supp_corruption: f64,
    /// Probability that an object is drawn only in the supplementary channel.
    pub hidden_in_primary: f64,
    /// Focal slices before zero-padding.
    pub focal_slices: usize,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            image_hw: [64, 64],
            n_objects: 2,
            modality: Modality::Depth,
            noise_level: 0.4,
            supp_corruption: 0.0,
            hidden_in_primary: 0.0,
            focal_slices: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySample {
    /// `[1, 3, H, W]`.
    pub primary: Tensor,
    pub supplementary: SupplementaryInput,
    /// `[1, 1, H, W]` in `{0, 1}`.
    pub gt: Tensor,
}

impl SaliencySample {
    pub fn gt_map(&self) -> BinaryMap {
        let s = self.gt.shape();
        BinaryMap {
            height: s[2],
            width: s[3],
            data: self.gt.data().iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

struct Object {
    cy: f64,
    cx: f64,
    rad: f64,
    rect: bool,
    color: [f64; 3],
    hidden: bool,
    omitted: bool,
    focus: usize,
}

impl Object {
    /// Squared normalized distance from the center; inside the shape when `<= 1`.
    fn dist2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = ((y - self.cy) / self.rad, (x - self.cx) / self.rad);
        if self.rect {
            let (ay, ax) = (dy.abs(), dx.abs() / 0.8);
            ay.max(ax).powi(2)
        } else {
            dy * dy + dx * dx
        }
    }
}

fn check(spec: &SyntheticSceneSpec) -> Result<()> {
    let [h, w] = spec.image_hw;
    if h == 0 || w == 0 {
        return Err(Error::Input("scene size must be positive".into()));
    }
    for (name, v) in [
        ("noise_level", spec.noise_level),
        ("supp_corruption", spec.supp_corruption),
        ("hidden_in_primary", spec.hidden_in_primary),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{name} = {v} must lie in [0, 1]")));
        }
    }
    if spec.modality == Modality::FocalStack && !(1..=MAX_FOCAL_SLICES).contains(&spec.focal_slices) {
        return Err(Error::Input(format!("focal_slices must lie in 1..={MAX_FOCAL_SLICES}")));
    }
    Ok(())
}

pub fn generate(spec: &SyntheticSceneSpec) -> Result<SaliencySample> {
    check(spec)?;
    let [h, w] = spec.image_hw;
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coord = |i: usize| ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let mut scene = vec![0.0; 3 * hw];
    for c in 0..3 {
        let (fy, fx, ph): (f64, f64, f64) = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(0.0..6.3));
        for i in 0..hw {
            let (y, x) = coord(i);
            scene[c * hw + i] = base[c] + 0.15 * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin();
        }
    }
    let mut primary = scene.clone();

    let objects: Vec<Object> = (0..spec.n_objects)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8);
            let cx = rng.random_range(0.2..0.8);
            let rad = rng.random_range(0.12..0.25);
            let rect = rng.random_bool(0.5);
            let mut color = [0.0; 3];
            for _ in 0..20 {
                color = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let dist: f64 = color.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
                if dist >= 0.6 {
                    break;
                }
            }
            let hidden = rng.random::<f64>() < spec.hidden_in_primary;
            let omitted = rng.random::<f64>() < spec.supp_corruption && !hidden;
            let focus = rng.random_range(0..spec.focal_slices.max(1));
            Object {
                cy,
                cx,
                rad,
                rect,
                color,
                hidden,
                omitted,
                focus,
            }
        })
        .collect();

    let mut gt = vec![0.0; hw];
    let mut depth: Vec<f64> = (0..hw).map(|i| 0.2 + 0.1 * coord(i).0).collect();
    let mut thermal = vec![0.15f64; hw];
    // per pixel: index of the topmost object, for focal compositing
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    for (k, o) in objects.iter().enumerate() {
        for i in 0..hw {
            let (y, x) = coord(i);
            let d2 = o.dist2(y, x);
            if d2 > 1.0 {
                continue;
            }
            gt[i] = 1.0;
            owner[i] = Some(k);
            for c in 0..3 {
                scene[c * hw + i] = o.color[c];
                if !o.hidden {
                    primary[c * hw + i] = o.color[c];
                }
            }
            if !o.omitted {
                depth[i] = 0.6 + 0.15 * (1.0 - d2);
                thermal[i] = thermal[i].max(0.5 + 0.4 * (-2.0 * d2).exp());
            }
        }
    }

    let prim_sigma = 0.25 * spec.noise_level;
    for v in primary.iter_mut() {
        *v += prim_sigma * rng.sample::<f64, _>(StandardNormal);
    }
    let supp_sigma = 0.05 * spec.noise_level;
    let mut noisy = |mut v: Vec<f64>| {
        for x in v.iter_mut() {
            *x += supp_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        v
    };
    let supplementary = match spec.modality {
        Modality::Depth => SupplementaryInput::single(Modality::Depth, Tensor::new(&[1, 1, h, w], noisy(depth))?)?,
        Modality::Thermal => SupplementaryInput::single(Modality::Thermal, Tensor::new(&[1, 1, h, w], noisy(thermal))?)?,
        Modality::FocalStack => {
            let blurred = box_blur(&scene, 3, h, w, 2);
            let mut slices = Vec::with_capacity(spec.focal_slices);
            for k in 0..spec.focal_slices {
                let mut s = blurred.clone();
                for i in 0..hw {
                    if let Some(o) = owner[i].map(|j| &objects[j]) {
                        if o.focus == k && !o.omitted {
                            for c in 0..3 {
                                s[c * hw + i] = scene[c * hw + i];
                            }
                        }
                    }
                }
                slices.push(Tensor::new(&[1, 3, h, w], noisy(s))?);
            }
            SupplementaryInput::focal_stack(&slices)?
        }
    };

    Ok(SaliencySample {
        primary: Tensor::new(&[1, 3, h, w], primary)?,
        supplementary,
        gt: Tensor::new(&[1, 1, h, w], gt)?,
    })
}

/// Mean over a `(2r+1)^2` window with clamped borders, per channel.
fn box_blur(img: &[f64], channels: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..=2 * r {
                    let yy = (y + dy).saturating_sub(r).min(h - 1);
                    for dx in 0..=2 * r {
                        let xx = (x + dx).saturating_sub(r).min(w - 1);
                        acc += plane[yy * w + xx];
                    }
                }
                out[c * h * w + y * w + x] = acc / ((2 * r + 1) * (2 * r + 1)) as f64;
            }
        }
    }
    out
}

/// Stacks single-sample tensors along the batch axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Input("nothing to stack".into()))?;
    let s = first.shape();
    if s[0] != 1 || parts.iter().any(|t| t.shape() != s) {
        return Err(Error::Input("stacked tensors must share a [1, ...] shape".into()));
    }
    let mut shape = s.to_vec();
    shape[0] = parts.len();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(&shape, data)?)
}

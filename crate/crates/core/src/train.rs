//! Training and evaluation loops over synthetic scenes.

use std::ops::ControlFlow;

use hrtnet_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::head::ppa_loss;
use crate::metrics::{evaluate, EvalResult, GrayMap};
use crate::model::{Injection, Model};
use crate::optim::AdamW;
use crate::params::Ctx;
use crate::synth::{generate, stack, SaliencySample, SyntheticSceneSpec};

/// Seed domains, so training, fresh and held-out scenes never share a seed.
pub const DOMAIN_TRAIN: u64 = 1;
pub const DOMAIN_FRESH: u64 = 2;
pub const DOMAIN_HELD_OUT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ domain) ^ index)
}

/// Scene description for one derived seed; the object count is drawn from it too.
pub fn scene_spec(train: &TrainConfig, model: &ModelConfig, seed: u64) -> SyntheticSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SyntheticSceneSpec {
        seed: rng.random(),
        image_hw: model.input_hw,
        n_objects: rng.random_range(train.min_objects..=train.max_objects),
        modality: model.modality,
        noise_level: train.noise_level,
        supp_corruption: train.supp_corruption,
        hidden_in_primary: train.hidden_in_primary,
        focal_slices: train.focal_slices,
    }
}

pub fn scenes(train: &TrainConfig, model: &ModelConfig, domain: u64, start: u64, count: usize) -> Result<Vec<SaliencySample>> {
    (0..count as u64)
        .map(|i| generate(&scene_spec(train, model, derive_seed(train.seed, domain, start + i))))
        .collect()
}

/// Batched model inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub primary: Tensor,
    pub supp: Tensor,
    pub gt: Tensor,
}

impl Batch {
    pub fn new(samples: &[&SaliencySample]) -> Result<Self> {
        let p: Vec<&Tensor> = samples.iter().map(|s| &s.primary).collect();
        let s: Vec<&Tensor> = samples.iter().map(|s| s.supplementary.data()).collect();
        let g: Vec<&Tensor> = samples.iter().map(|s| &s.gt).collect();
        Ok(Batch {
            primary: stack(&p)?,
            supp: stack(&s)?,
            gt: stack(&g)?,
        })
    }

    /// Replaces the supplementary input with zeros.
    pub fn without_supplementary(mut self) -> Self {
        self.supp = Tensor::zeros(self.supp.shape());
        self
    }
}

/// Loss and parameter gradients on one batch.
pub fn loss_and_grads(model: &Model, batch: &Batch, injection: Injection) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, model.params(), true);
    let p = cx.tape.constant(batch.primary.clone());
    let s = cx.tape.constant(batch.supp.clone());
    let out = model.forward(&mut cx, p, s, injection)?;
    let loss = ppa_loss(cx.tape, out.map.logits, &batch.gt)?;
    let value = cx.tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.state.step,
        });
    }
    cx.tape.backward(loss)?;
    Ok((value, cx.param_grads()))
}

/// One optimizer step; returns the loss before the update.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &Batch) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, Injection::Full)?;
    opt.step(model.params_mut(), &grads)?;
    model.state.step += 1;
    if model.params().tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: model.state.step,
        });
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
}

/// Trains for up to `train.steps` steps, cycling a fixed scene set or drawing fresh scenes.
/// With `zero_supplementary` every batch has its supplementary input zeroed.
/// `on_step` may end training early by returning `ControlFlow::Break`.
pub fn train(
    model: &mut Model,
    train: &TrainConfig,
    zero_supplementary: bool,
    mut on_step: impl FnMut(&Model, StepRecord) -> Result<ControlFlow<()>>,
) -> Result<Vec<StepRecord>> {
    train.validate()?;
    let fixed = if train.fresh_samples {
        Vec::new()
    } else {
        scenes(train, model.config(), DOMAIN_TRAIN, 0, train.num_samples)?
    };
    let mut opt = AdamW::new(model.params(), train.lr, train.weight_decay);
    let mut log = Vec::with_capacity(train.steps as usize);
    let bs = train.batch_size;
    for t in 0..train.steps {
        let fresh;
        let picked: Vec<&SaliencySample> = if train.fresh_samples {
            fresh = scenes(train, model.config(), DOMAIN_FRESH, t * bs as u64, bs)?;
            fresh.iter().collect()
        } else {
            (0..bs).map(|j| &fixed[(t as usize * bs + j) % fixed.len()]).collect()
        };
        let mut batch = Batch::new(&picked)?;
        if zero_supplementary {
            batch = batch.without_supplementary();
        }
        let loss = train_step(model, &mut opt, &batch)?;
        let rec = StepRecord {
            step: model.state.step,
            loss,
        };
        log.push(rec);
        if on_step(model, rec)?.is_break() {
            break;
        }
    }
    Ok(log)
}

/// Probability maps as metric inputs, min-max normalized.
pub fn predict_maps(model: &Model, samples: &[SaliencySample], zero_supplementary: bool) -> Result<Vec<GrayMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let refs: Vec<&SaliencySample> = chunk.iter().collect();
        let mut batch = Batch::new(&refs)?;
        if zero_supplementary {
            batch = batch.without_supplementary();
        }
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, model.params(), false);
        let p = cx.tape.constant(batch.primary);
        let s = cx.tape.constant(batch.supp);
        let out = model.forward(&mut cx, p, s, Injection::Full)?;
        let prob = tape.value(out.map.prob);
        let [h, w] = model.config().input_hw;
        for d in prob.data().chunks(h * w) {
            maps.push(GrayMap::new(h, w, d.to_vec())?.normalized());
        }
    }
    Ok(maps)
}

pub fn evaluate_samples(model: &Model, samples: &[SaliencySample], zero_supplementary: bool) -> Result<Vec<EvalResult>> {
    let maps = predict_maps(model, samples, zero_supplementary)?;
    maps.iter()
        .zip(samples)
        .map(|(m, s)| evaluate(m, &s.gt_map()))
        .collect()
}

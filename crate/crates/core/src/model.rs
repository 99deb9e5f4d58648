//! Full two-modality model: auxiliary stream, per-level injection, backbone,
//! token fusion and head.

use hrtnet_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aux_stream::{AuxStream, SupplementaryInput};
use crate::backbone::{Backbone, MultiResFeatures};
use crate::config::ModelConfig;
use crate::error::{Error, Result, StageExt};
use crate::fusion::{Fusion, FusionState};
use crate::head::{Head, SaliencyMap};
use crate::params::{Builder, Ctx, ParamStore};
use crate::smim::Smim;

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
}

/// How the supplementary feature enters the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Injection {
    #[default]
    Full,
    /// Drops the coordinate-attention path: each branch entry becomes `f_r + w_r f_r`.
    PrimaryOnly,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub map: SaliencyMap,
    pub aux: MultiResFeatures,
    pub backbone: MultiResFeatures,
    pub fusion: FusionState,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub state: ModelState,
    pub aux: AuxStream,
    pub smim: Vec<Smim>,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub head: Head,
}

struct Modules {
    aux: AuxStream,
    smim: Vec<Smim>,
    backbone: Backbone,
    fusion: Fusion,
    head: Head,
}

fn build(config: &ModelConfig, seed: u64) -> (ParamStore, Modules) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let aux = AuxStream::new(&mut b.sub("aux"), config);
    let smim = (0..4)
        .map(|i| Smim::new(&mut b.sub(format!("smim{i}")), config.branch_channels[i], config.coa_reduction))
        .collect();
    let backbone = Backbone::new(&mut b.sub("backbone"), config);
    let fusion = Fusion::new(&mut b.sub("fusion"), config);
    let head = Head::new(&mut b.sub("head"), config.token_dim);
    (
        store,
        Modules {
            aux,
            smim,
            backbone,
            fusion,
            head,
        },
    )
}

/// Names and shapes of the parameters a config defines, in registration order.
pub fn param_layout(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let (store, _) = build(config, 0);
    Ok(store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect())
}

/// Checks that `params` has exactly the names and shapes `config` defines.
pub fn check_layout(config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let layout = param_layout(config)?;
    if layout.len() != params.len() {
        return Err(Error::KeyMismatch(format!(
            "config defines {} tensors, found {}",
            layout.len(),
            params.len()
        )));
    }
    for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
        if name != pn {
            return Err(Error::KeyMismatch(format!("expected tensor {name}, found {pn}")));
        }
        if shape.as_slice() != pt.shape() {
            return Err(Error::KeyMismatch(format!(
                "tensor {name} has shape {:?}, config requires {shape:?}",
                pt.shape()
            )));
        }
    }
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, m) = build(&config, seed);
        Ok(Model {
            state: ModelState {
                config,
                params,
                step: 0,
            },
            aux: m.aux,
            smim: m.smim,
            backbone: m.backbone,
            fusion: m.fusion,
            head: m.head,
        })
    }

    pub fn from_state(state: ModelState) -> Result<Self> {
        check_layout(&state.config, &state.params)?;
        let (_, m) = build(&state.config, 0);
        Ok(Model {
            state,
            aux: m.aux,
            smim: m.smim,
            backbone: m.backbone,
            fusion: m.fusion,
            head: m.head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.state.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.state.params
    }

    fn check_inputs(&self, tape: &Tape, primary: Var, supp: Var) -> Result<()> {
        let c = self.config();
        let (ps, ss) = (tape.shape(primary), tape.shape(supp));
        let [h, w] = c.input_hw;
        if ps.len() != 4 || ps[1] != 3 || ps[2] != h || ps[3] != w {
            return Err(Error::Input(format!("primary image must be [B, 3, {h}, {w}], got {ps:?}")));
        }
        let cs = c.modality.channels();
        if ss.len() != 4 || ss[0] != ps[0] || ss[1] != cs || ss[2..] != ps[2..] {
            return Err(Error::Input(format!(
                "supplementary input must be [{}, {cs}, {h}, {w}], got {ss:?}",
                ps[0]
            )));
        }
        Ok(())
    }

    /// Auxiliary stream, injection at each branch entry, backbone, fusion, head.
    pub fn forward(&self, cx: &mut Ctx, primary: Var, supp: Var, injection: Injection) -> Result<ForwardOutput> {
        self.check_inputs(cx.tape, primary, supp)?;
        let aux = self.aux.forward(cx, supp).stage("auxiliary stream")?;
        let mut hook = |cx: &mut Ctx, s: usize, entry: Var| -> Result<Var> {
            let f_s = aux.maps[s];
            let f_rs = match injection {
                Injection::Full => self.smim[s].inject(cx, entry, f_s),
                Injection::PrimaryOnly => self.smim[s].inject_primary_only(cx, entry, f_s),
            }
            .stage("injection")?;
            Ok(cx.tape.add(entry, f_rs)?)
        };
        let backbone = self.backbone.forward_hooked(cx, primary, &mut hook).stage("backbone")?;
        let fusion = self.fusion.fuse_all(cx, &backbone).stage("fusion")?;
        let f1 = fusion.dec_grid(cx.tape, 0).stage("fusion")?;
        let map = self.head.predict(cx, f1).stage("head")?;
        Ok(ForwardOutput {
            map,
            aux,
            backbone,
            fusion,
        })
    }

    /// Inference without gradient tracking; returns the `[B, 1, H, W]` probability map.
    pub fn predict(&self, primary: &Tensor, supp: &SupplementaryInput) -> Result<Tensor> {
        supp.check_against(self.config(), primary.shape())?;
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, self.params(), false);
        let p = cx.tape.constant(primary.clone());
        let s = cx.tape.constant(supp.data().clone());
        let out = self.forward(&mut cx, p, s, Injection::Full)?;
        Ok(tape.value(out.map.prob).clone())
    }
}

/// `(parameter count, forward FLOPs for one sample at the configured resolution)`.
pub fn count_params_flops(state: &ModelState) -> (usize, u64) {
    (state.params.num_scalars(), crate::flops::forward_flops(&state.config))
}

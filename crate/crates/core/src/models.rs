//! Onset predictors behind one trait, registered by variant name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use numkit::{DenseArray, DropoutMode, Gru, Init, Linear, LossKind, ParamId, ParamStore, SeededRng, Tape, Var};

use crate::autoencoder::{AeDims, EncodedPatient, EncoderKind, PatientEncoder};
use crate::dataset::{PreparedVisit, Sample};
use crate::ehr::FeatureLayout;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "TRACE")]
    Trace,
    #[serde(rename = "TRACE_base")]
    TraceBase,
    #[serde(rename = "RACE")]
    Race,
    #[serde(rename = "RACE_base")]
    RaceBase,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "BiRNN")]
    BiRnn,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Trace,
        Variant::TraceBase,
        Variant::Race,
        Variant::RaceBase,
        Variant::Lr,
        Variant::Mlp,
        Variant::Rnn,
        Variant::BiRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Trace => "TRACE",
            Variant::TraceBase => "TRACE_base",
            Variant::Race => "RACE",
            Variant::RaceBase => "RACE_base",
            Variant::Lr => "LR",
            Variant::Mlp => "MLP",
            Variant::Rnn => "RNN",
            Variant::BiRnn => "BiRNN",
        }
    }

    /// Visit encoder of the pre-trained autoencoder this variant starts from.
    pub fn encoder_kind(self) -> Option<EncoderKind> {
        match self {
            Variant::Trace | Variant::TraceBase => Some(EncoderKind::Transformer),
            Variant::Race | Variant::RaceBase => Some(EncoderKind::Fc),
            _ => None,
        }
    }

    pub fn uses_code_history(self) -> bool {
        matches!(self, Variant::Trace | Variant::Race)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        REGISTRY
            .iter()
            .find(|e| e.name == s)
            .map(|e| e.variant)
            .ok_or_else(|| {
                let known: Vec<_> = REGISTRY.iter().map(|e| e.name).collect();
                CoreError::Config(format!("unknown variant `{s}` (known: {})", known.join(", ")))
            })
    }
}

/// Everything a builder needs to size and initialise a model.
pub struct BuildContext<'a> {
    pub ae: AeDims,
    pub d_m: usize,
    pub d_att: usize,
    /// Hidden width of the MLP and of the recurrent baselines.
    pub hidden: usize,
    /// Code embedding table aligned to the experiment vocabulary.
    pub code_table: Option<&'a DenseArray>,
}

impl BuildContext<'_> {
    pub fn layout(&self) -> FeatureLayout {
        self.ae.layout
    }
}

pub struct Prediction {
    pub prob: Var,
    pub encoded: Option<EncodedPatient>,
    /// Per-visit joint attention weights `α`.
    pub alpha: Option<Var>,
}

pub trait Predictor: Send + Sync {
    fn variant(&self) -> Variant;

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<Prediction>;

    /// Mean BCE of the prediction against the label.
    fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let p = self.forward(tape, store, sample, mode, rng)?;
        Ok(tape.loss(LossKind::Bce, p.prob, &DenseArray::vector(vec![f64::from(sample.label)]))?)
    }
}

type Builder = fn(&mut ParamStore, &BuildContext, &mut SeededRng) -> Result<Box<dyn Predictor>>;

pub struct RegistryEntry {
    pub name: &'static str,
    pub variant: Variant,
    pub build: Builder,
}

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "TRACE",
        variant: Variant::Trace,
        build: |s, c, r| Ok(Box::new(TraceModel::register(s, c, r, Variant::Trace)?)),
    },
    RegistryEntry {
        name: "TRACE_base",
        variant: Variant::TraceBase,
        build: |s, c, r| Ok(Box::new(TraceModel::register(s, c, r, Variant::TraceBase)?)),
    },
    RegistryEntry {
        name: "RACE",
        variant: Variant::Race,
        build: |s, c, r| Ok(Box::new(TraceModel::register(s, c, r, Variant::Race)?)),
    },
    RegistryEntry {
        name: "RACE_base",
        variant: Variant::RaceBase,
        build: |s, c, r| Ok(Box::new(TraceModel::register(s, c, r, Variant::RaceBase)?)),
    },
    RegistryEntry {
        name: "LR",
        variant: Variant::Lr,
        build: |s, c, r| Ok(Box::new(CountModel::register(s, c, r, false)?)),
    },
    RegistryEntry {
        name: "MLP",
        variant: Variant::Mlp,
        build: |s, c, r| Ok(Box::new(CountModel::register(s, c, r, true)?)),
    },
    RegistryEntry {
        name: "RNN",
        variant: Variant::Rnn,
        build: |s, c, r| Ok(Box::new(RecurrentBaseline::register(s, c, r, false)?)),
    },
    RegistryEntry {
        name: "BiRNN",
        variant: Variant::BiRnn,
        build: |s, c, r| Ok(Box::new(RecurrentBaseline::register(s, c, r, true)?)),
    },
];

/// Registers the parameters of `variant` in `store` and returns the model.
pub fn build_model(
    variant: Variant,
    store: &mut ParamStore,
    ctx: &BuildContext,
    rng: &mut SeededRng,
) -> Result<Box<dyn Predictor>> {
    let entry = REGISTRY
        .iter()
        .find(|e| e.variant == variant)
        .ok_or_else(|| CoreError::Config(format!("variant `{variant}` is not registered")))?;
    (entry.build)(store, ctx, rng)
}

fn output_head(store: &mut ParamStore, input: usize, rng: &mut SeededRng) -> Result<(ParamId, ParamId)> {
    Ok((
        store.add_init("out.w_y", &[input, 1], Init::Glorot, rng)?,
        store.add_init("out.b_y", &[1], Init::Zeros, rng)?,
    ))
}

fn apply_head(tape: &mut Tape, store: &ParamStore, head: (ParamId, ParamId), c: Var) -> Result<Var> {
    let w = tape.param(store, head.0);
    let b = tape.param(store, head.1);
    let logit = tape.matmul(c, w)?;
    let logit = tape.add_row_bias(logit, b)?;
    Ok(tape.sigmoid(logit))
}

/// Code-history recurrence and joint attention.
pub struct CodeHistory {
    pub w_m: ParamId,
    pub rnn: Gru,
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub u: ParamId,
}

impl CodeHistory {
    /// `h^m_t` for every visit, from `m_t = x_t W_m`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, visits: &[PreparedVisit]) -> Result<Vec<Var>> {
        if visits.is_empty() {
            return Err(CoreError::Validation("cannot encode an empty code history".into()));
        }
        let w_m = tape.param(store, self.w_m);
        let mut inputs = Vec::with_capacity(visits.len());
        for v in visits {
            let x = tape.constant(v.codes());
            inputs.push(tape.matmul(x, w_m)?);
        }
        Ok(self.rnn.unroll(tape, store, &inputs)?)
    }

    /// Returns `(α, G)` with `g_t = [e^p; h^m_t]` stacked as rows of `G`.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, ep: Var, history: &[Var]) -> Result<(Var, Var)> {
        let rows = history
            .iter()
            .map(|&h| tape.concat(&[ep, h]))
            .collect::<numkit::Result<Vec<_>>>()?;
        let g = tape.stack_rows(&rows)?;
        let w_g = tape.param(store, self.w_g);
        let b_g = tape.param(store, self.b_g);
        let u = tape.param(store, self.u);
        let pre = tape.matmul(g, w_g)?;
        let pre = tape.add_row_bias(pre, b_g)?;
        let act = tape.tanh(pre);
        let scores = tape.matmul(act, u)?;
        let scores = tape.reshape(scores, &[history.len()])?;
        Ok((tape.softmax_rows(scores), g))
    }
}

/// TRACE and its ablations.
pub struct TraceModel {
    pub variant: Variant,
    pub encoder: PatientEncoder,
    pub history: Option<CodeHistory>,
    pub head: (ParamId, ParamId),
}

impl TraceModel {
    pub fn register(store: &mut ParamStore, ctx: &BuildContext, rng: &mut SeededRng, variant: Variant) -> Result<Self> {
        let kind = variant
            .encoder_kind()
            .ok_or_else(|| CoreError::Config(format!("{variant} has no patient encoder")))?;
        let encoder = PatientEncoder::register(store, kind, &ctx.ae, rng)?;
        let d_h = ctx.ae.d_h;
        let history = if variant.uses_code_history() {
            let n_codes = ctx.layout().n_codes;
            let w_m = match ctx.code_table {
                Some(t) => {
                    if t.shape() != [n_codes, ctx.d_m] {
                        return Err(CoreError::Config(format!(
                            "code table shape {:?} does not match {n_codes}x{}",
                            t.shape(),
                            ctx.d_m
                        )));
                    }
                    store.add("code.w_m", t.clone())?
                }
                None => store.add_init("code.w_m", &[n_codes, ctx.d_m], Init::Glorot, rng)?,
            };
            let rnn = Gru::register(store, "code.gru", ctx.d_m, d_h, rng)?;
            let w_g = store.add_init("att.w_g", &[2 * d_h, ctx.d_att], Init::Glorot, rng)?;
            let b_g = store.add_init("att.b_g", &[ctx.d_att], Init::Zeros, rng)?;
            let u = store.add_init("att.u", &[ctx.d_att, 1], Init::Glorot, rng)?;
            Some(CodeHistory { w_m, rnn, w_g, b_g, u })
        } else {
            None
        };
        let c_len = if history.is_some() { 3 * d_h } else { d_h };
        let head = output_head(store, c_len, rng)?;
        Ok(Self {
            variant,
            encoder,
            history,
            head,
        })
    }
}

impl Predictor for TraceModel {
    fn variant(&self) -> Variant {
        self.variant
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<Prediction> {
        let encoded = self.encoder.encode(tape, store, &sample.visits, mode, rng)?;
        let ep = encoded.ep;
        let (c, alpha) = match &self.history {
            Some(h) => {
                let states = h.encode(tape, store, &sample.visits)?;
                let (alpha, g) = h.attend(tape, store, ep, &states)?;
                let ctx = tape.matmul(alpha, g)?;
                (tape.concat(&[ep, ctx])?, Some(alpha))
            }
            None => (ep, None),
        };
        let prob = apply_head(tape, store, self.head, c)?;
        Ok(Prediction {
            prob,
            encoded: Some(encoded),
            alpha,
        })
    }
}

/// Copies the encoder half of a pre-trained autoencoder into `store`.
///
/// Every encoder parameter registered in `store` must be present in
/// `pretrained` with the same shape; decoder parameters are ignored.
pub fn load_pretrained_encoder(store: &mut ParamStore, pretrained: &ParamStore) -> Result<Vec<String>> {
    let mut encoder_only = ParamStore::new();
    for (_, p) in pretrained.iter() {
        if PatientEncoder::is_encoder_param(&p.name) {
            encoder_only.add(p.name.clone(), p.value.clone())?;
        }
    }
    let copied = store.load_matching(&encoder_only)?;
    let missing: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| PatientEncoder::is_encoder_param(n) && !copied.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(CoreError::missing(
            "pretrain-autoencoder",
            format!("checkpoint lacks encoder parameters {}", missing.join(", ")),
        ));
    }
    Ok(copied)
}

/// Per-patient code and observation occurrence counts followed by the last
/// visit's demographics and numerics.
pub fn count_features(sample: &Sample, layout: FeatureLayout) -> Vec<f64> {
    let n_counts = layout.n_codes + layout.n_obs;
    let mut out = vec![0.0; layout.n_features()];
    for v in &sample.visits {
        for (o, x) in out.iter_mut().zip(&v.vector.x) {
            *o += x;
        }
        for (o, d) in out[layout.n_codes..n_counts].iter_mut().zip(&v.vector.d) {
            *o += d;
        }
    }
    if let Some(last) = sample.visits.last() {
        out[n_counts..].copy_from_slice(&last.vector.d[layout.n_obs..]);
    }
    out
}

/// LR, or MLP with one relu hidden layer, on count features.
pub struct CountModel {
    pub hidden: Option<Linear>,
    pub head: (ParamId, ParamId),
    pub layout: FeatureLayout,
}

impl CountModel {
    pub fn register(store: &mut ParamStore, ctx: &BuildContext, rng: &mut SeededRng, hidden: bool) -> Result<Self> {
        let n = ctx.layout().n_features();
        let (hidden, width) = if hidden {
            (Some(Linear::register(store, "mlp.hidden", n, ctx.hidden, true, rng)?), ctx.hidden)
        } else {
            (None, n)
        };
        let head = output_head(store, width, rng)?;
        Ok(Self {
            hidden,
            head,
            layout: ctx.layout(),
        })
    }
}

impl Predictor for CountModel {
    fn variant(&self) -> Variant {
        if self.hidden.is_some() {
            Variant::Mlp
        } else {
            Variant::Lr
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        _mode: DropoutMode,
        _rng: &mut SeededRng,
    ) -> Result<Prediction> {
        let x = tape.constant(DenseArray::vector(count_features(sample, self.layout)));
        let c = match &self.hidden {
            Some(layer) => {
                let h = layer.forward(tape, store, x)?;
                tape.relu(h)
            }
            None => x,
        };
        Ok(Prediction {
            prob: apply_head(tape, store, self.head, c)?,
            encoded: None,
            alpha: None,
        })
    }
}

/// Relu visit layer, forward (and optionally backward) recurrence, logistic
/// head on the last state(s).
pub struct RecurrentBaseline {
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub forward_rnn: Gru,
    pub backward_rnn: Option<Gru>,
    pub head: (ParamId, ParamId),
}

impl RecurrentBaseline {
    pub fn register(store: &mut ParamStore, ctx: &BuildContext, rng: &mut SeededRng, bidirectional: bool) -> Result<Self> {
        let n = ctx.layout().n_features();
        let d_h = ctx.ae.d_h;
        let fc_w = store.add_init("rnn.fc.w", &[n, ctx.hidden], Init::Glorot, rng)?;
        let fc_b = store.add_init("rnn.fc.b", &[ctx.hidden], Init::Zeros, rng)?;
        let forward_rnn = Gru::register(store, "rnn.fwd", ctx.hidden, d_h, rng)?;
        let backward_rnn = if bidirectional {
            Some(Gru::register(store, "rnn.bwd", ctx.hidden, d_h, rng)?)
        } else {
            None
        };
        let width = if bidirectional { 2 * d_h } else { d_h };
        let head = output_head(store, width, rng)?;
        Ok(Self {
            fc_w,
            fc_b,
            forward_rnn,
            backward_rnn,
            head,
        })
    }

    /// Last hidden state(s); `2·d_h` wide when bidirectional.
    pub fn last_state(&self, tape: &mut Tape, store: &ParamStore, visits: &[PreparedVisit]) -> Result<Var> {
        if visits.is_empty() {
            return Err(CoreError::Validation("cannot encode an empty visit sequence".into()));
        }
        let w = tape.param(store, self.fc_w);
        let b = tape.param(store, self.fc_b);
        let mut inputs = Vec::with_capacity(visits.len());
        for v in visits {
            let rows = tape.gather_rows(w, &v.active)?;
            let vals = tape.constant(DenseArray::vector(v.active_values.clone()));
            let h = tape.matmul(vals, rows)?;
            let h = tape.add_row_bias(h, b)?;
            inputs.push(tape.relu(h));
        }
        let fwd = *self.forward_rnn.unroll(tape, store, &inputs)?.last().expect("non-empty");
        match &self.backward_rnn {
            Some(cell) => {
                inputs.reverse();
                let bwd = *cell.unroll(tape, store, &inputs)?.last().expect("non-empty");
                Ok(tape.concat(&[fwd, bwd])?)
            }
            None => Ok(fwd),
        }
    }
}

impl Predictor for RecurrentBaseline {
    fn variant(&self) -> Variant {
        if self.backward_rnn.is_some() {
            Variant::BiRnn
        } else {
            Variant::Rnn
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sample: &Sample,
        _mode: DropoutMode,
        _rng: &mut SeededRng,
    ) -> Result<Prediction> {
        let last = self.last_state(tape, store, &sample.visits)?;
        Ok(Prediction {
            prob: apply_head(tape, store, self.head, last)?,
            encoded: None,
            alpha: None,
        })
    }
}

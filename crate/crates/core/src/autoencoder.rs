//! Transformer-RNN sequence autoencoder.
//!
//! Per visit: `Z = W_x ⊙ x'` (row i of `W_x` scaled by feature i), the
//! downsized `Z̃ = W̃_z Z`, a visit encoder producing `v_t`, then a recurrent
//! encoder over `{v_t}` whose last state is the patient embedding `e^p`. The
//! decoder recurrence reads `e^p` at every step and four heads reconstruct
//! codes, observations, demographics and the numeric tail of each visit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use numkit::{
    DenseArray, DropoutMode, Gru, Init, Linear, LossKind, ParamId, ParamStore, SeededRng, Tape, Var,
};

use crate::dataset::PreparedVisit;
use crate::ehr::FeatureLayout;
use crate::error::{CoreError, Result};

pub const PREFIX: &str = "ae";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Fc,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Fc => "fc",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        VISIT_ENCODERS
            .iter()
            .find(|e| e.name == s)
            .map(|e| e.kind)
            .ok_or_else(|| CoreError::Config(format!("unknown visit encoder `{s}`")))
    }
}

/// Widths of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeDims {
    pub layout: FeatureLayout,
    pub n_reduced: usize,
    pub d_z: usize,
    pub d_emb: usize,
    pub d_ff: usize,
    pub d_h: usize,
    pub dropout: f64,
}

impl AeDims {
    pub fn validate(&self) -> Result<()> {
        if [self.n_reduced, self.d_z, self.d_emb, self.d_ff, self.d_h].contains(&0) {
            return Err(CoreError::Config("autoencoder widths must be positive".into()));
        }
        if self.d_emb < 2 {
            return Err(CoreError::Config("d_emb must be at least 2 for layer norm".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Output of a visit encoder.
pub struct VisitEncoding {
    pub z_tilde: Var,
    pub v: Var,
    /// Transformer output `X` and attention `A`, when the encoder has them.
    pub x: Option<Var>,
    pub attention: Option<Var>,
}

/// Maps `Z̃: ñ×d_z` to a visit embedding of width `d_emb`.
pub trait VisitEncoder: Send + Sync {
    fn kind(&self) -> EncoderKind;

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_tilde: Var,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<VisitEncoding>;
}

type EncoderFactory = fn(&mut ParamStore, &str, &AeDims, &mut SeededRng) -> Result<Box<dyn VisitEncoder>>;

pub struct EncoderEntry {
    pub name: &'static str,
    pub kind: EncoderKind,
    pub register: EncoderFactory,
}

/// Visit encoders selectable by name.
pub const VISIT_ENCODERS: &[EncoderEntry] = &[
    EncoderEntry {
        name: "transformer",
        kind: EncoderKind::Transformer,
        register: |s, p, d, r| Ok(Box::new(TransformerBlock::register(s, p, d, r)?)),
    },
    EncoderEntry {
        name: "fc",
        kind: EncoderKind::Fc,
        register: |s, p, d, r| Ok(Box::new(FcVisitEncoder::register(s, p, d, r)?)),
    },
];

pub fn register_visit_encoder(
    kind: EncoderKind,
    store: &mut ParamStore,
    prefix: &str,
    dims: &AeDims,
    rng: &mut SeededRng,
) -> Result<Box<dyn VisitEncoder>> {
    let entry = VISIT_ENCODERS
        .iter()
        .find(|e| e.kind == kind)
        .ok_or_else(|| CoreError::Config(format!("visit encoder `{kind}` is not registered")))?;
    (entry.register)(store, prefix, dims, rng)
}

/// Single-head, single-block encoder without positional encoding.
pub struct TransformerBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Residual projection, present only when `d_z != d_emb`.
    pub w_proj: Option<ParamId>,
    pub ln1: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: (ParamId, ParamId),
    pub d_emb: usize,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn register(store: &mut ParamStore, prefix: &str, dims: &AeDims, rng: &mut SeededRng) -> Result<Self> {
        let p = format!("{prefix}.tf");
        let (d_z, d_emb) = (dims.d_z, dims.d_emb);
        let w_q = store.add_init(format!("{p}.w_q"), &[d_z, d_emb], Init::Glorot, rng)?;
        let w_k = store.add_init(format!("{p}.w_k"), &[d_z, d_emb], Init::Glorot, rng)?;
        let w_v = store.add_init(format!("{p}.w_v"), &[d_z, d_emb], Init::Glorot, rng)?;
        let w_proj = if d_z != d_emb {
            Some(store.add_init(format!("{p}.w_proj"), &[d_z, d_emb], Init::Glorot, rng)?)
        } else {
            None
        };
        let ln1 = (
            store.add_init(format!("{p}.ln1.gain"), &[d_emb], Init::Ones, rng)?,
            store.add_init(format!("{p}.ln1.bias"), &[d_emb], Init::Zeros, rng)?,
        );
        let ff1 = Linear::register(store, &format!("{p}.ff1"), d_emb, dims.d_ff, true, rng)?;
        let ff2 = Linear::register(store, &format!("{p}.ff2"), dims.d_ff, d_emb, true, rng)?;
        let ln2 = (
            store.add_init(format!("{p}.ln2.gain"), &[d_emb], Init::Ones, rng)?,
            store.add_init(format!("{p}.ln2.bias"), &[d_emb], Init::Zeros, rng)?,
        );
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_proj,
            ln1,
            ff1,
            ff2,
            ln2,
            d_emb,
            dropout: dims.dropout,
        })
    }

    /// Returns `(X, A)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<(Var, Var)> {
        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let wv = tape.param(store, self.w_v);
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let scores = tape.matmul_bt(q, k)?;
        let scaled = tape.scale(scores, 1.0 / (self.d_emb as f64).sqrt());
        let a = tape.softmax_rows(scaled);
        let av = tape.matmul(a, v)?;
        let residual = match self.w_proj {
            Some(p) => {
                let w = tape.param(store, p);
                tape.matmul(z, w)?
            }
            None => z,
        };
        let sum1 = tape.add(residual, av)?;
        let (g1, b1) = (tape.param(store, self.ln1.0), tape.param(store, self.ln1.1));
        let s1 = tape.layer_norm_rows(sum1, g1, b1)?;
        let hidden = self.ff1.forward(tape, store, s1)?;
        let hidden = tape.relu(hidden);
        let hidden = tape.dropout(hidden, self.dropout, mode, rng)?;
        let ff = self.ff2.forward(tape, store, hidden)?;
        let sum2 = tape.add(s1, ff)?;
        let (g2, b2) = (tape.param(store, self.ln2.0), tape.param(store, self.ln2.1));
        let x = tape.layer_norm_rows(sum2, g2, b2)?;
        Ok((x, a))
    }
}

impl VisitEncoder for TransformerBlock {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Transformer
    }

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_tilde: Var,
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<VisitEncoding> {
        let (x, a) = self.forward(tape, store, z_tilde, mode, rng)?;
        let v = tape.mean_pool_rows(x)?;
        Ok(VisitEncoding {
            z_tilde,
            v,
            x: Some(x),
            attention: Some(a),
        })
    }
}

/// `v = relu(mean(Z̃)·W + b)`, the attention-free visit encoder.
pub struct FcVisitEncoder {
    pub layer: Linear,
}

impl FcVisitEncoder {
    pub fn register(store: &mut ParamStore, prefix: &str, dims: &AeDims, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            layer: Linear::register(store, &format!("{prefix}.fc"), dims.d_z, dims.d_emb, true, rng)?,
        })
    }
}

impl VisitEncoder for FcVisitEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Fc
    }

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z_tilde: Var,
        _mode: DropoutMode,
        _rng: &mut SeededRng,
    ) -> Result<VisitEncoding> {
        let pooled = tape.mean_pool_rows(z_tilde)?;
        let h = self.layer.forward(tape, store, pooled)?;
        Ok(VisitEncoding {
            z_tilde,
            v: tape.relu(h),
            x: None,
            attention: None,
        })
    }
}

pub struct EncodedPatient {
    pub visits: Vec<VisitEncoding>,
    pub ep: Var,
}

/// Encoder half: feature embedding, downsizing, visit encoder, recurrence.
pub struct PatientEncoder {
    pub w_x: ParamId,
    pub w_down: ParamId,
    pub visit: Box<dyn VisitEncoder>,
    pub rnn: Gru,
    pub dims: AeDims,
}

impl PatientEncoder {
    pub fn register(store: &mut ParamStore, kind: EncoderKind, dims: &AeDims, rng: &mut SeededRng) -> Result<Self> {
        dims.validate()?;
        let n = dims.layout.n_features();
        let w_x = store.add_init(format!("{PREFIX}.w_x"), &[n, dims.d_z], Init::Glorot, rng)?;
        let w_down = store.add_init(format!("{PREFIX}.w_down"), &[dims.n_reduced, n], Init::Glorot, rng)?;
        let visit = register_visit_encoder(kind, store, PREFIX, dims, rng)?;
        let rnn = Gru::register(store, &format!("{PREFIX}.enc"), dims.d_emb, dims.d_h, rng)?;
        Ok(Self {
            w_x,
            w_down,
            visit,
            rnn,
            dims: *dims,
        })
    }

    /// `Z̃ = W̃_z (W_x ⊙ x')`, evaluated over the active features only.
    pub fn embed_and_downsize(&self, tape: &mut Tape, store: &ParamStore, visit: &PreparedVisit) -> Result<Var> {
        if visit.vector.x.len() + visit.vector.d.len() != self.dims.layout.n_features() {
            return Err(CoreError::Num(numkit::NumError::Dimension {
                op: "embed_and_downsize",
                left: vec![self.dims.layout.n_features()],
                right: vec![visit.vector.x.len() + visit.vector.d.len()],
            }));
        }
        if visit.active.is_empty() {
            return Ok(tape.constant(DenseArray::zeros(&[self.dims.n_reduced, self.dims.d_z])));
        }
        let w_x = tape.param(store, self.w_x);
        let rows = tape.gather_rows(w_x, &visit.active)?;
        let values = tape.constant(DenseArray::vector(visit.active_values.clone()));
        let z = tape.scale_rows(rows, values)?;
        let w_down = tape.param(store, self.w_down);
        let cols = tape.gather_cols(w_down, &visit.active)?;
        Ok(tape.matmul(cols, z)?)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visits: &[PreparedVisit],
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<EncodedPatient> {
        if visits.is_empty() {
            return Err(CoreError::Validation("cannot encode an empty visit sequence".into()));
        }
        let mut encoded = Vec::with_capacity(visits.len());
        for v in visits {
            let z = self.embed_and_downsize(tape, store, v)?;
            encoded.push(self.visit.encode(tape, store, z, mode, rng)?);
        }
        let inputs: Vec<Var> = encoded.iter().map(|e| e.v).collect();
        let states = self.rnn.unroll(tape, store, &inputs)?;
        Ok(EncodedPatient {
            visits: encoded,
            ep: *states.last().expect("non-empty"),
        })
    }

    /// Names of every encoder-half parameter in `store`.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with(&format!("{PREFIX}.")) && !name.starts_with(&format!("{PREFIX}.dec.")) && !name.starts_with(&format!("{PREFIX}.head_"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadLosses {
    pub codes: f64,
    pub observations: f64,
    pub demographics: f64,
    pub numerics: f64,
}

impl HeadLosses {
    pub fn total(&self) -> f64 {
        self.codes + self.observations + self.demographics + self.numerics
    }

    pub fn add_scaled(&mut self, other: &HeadLosses, w: f64) {
        self.codes += w * other.codes;
        self.observations += w * other.observations;
        self.demographics += w * other.demographics;
        self.numerics += w * other.numerics;
    }
}

pub struct AeLoss {
    pub total: Var,
    /// Each head's contribution to `total` (already divided by T).
    pub heads: HeadLosses,
}

pub struct Autoencoder {
    pub encoder: PatientEncoder,
    pub decoder: Gru,
    pub head_codes: Linear,
    pub head_obs: Option<Linear>,
    pub head_demo: Linear,
    pub head_num: Linear,
}

impl Autoencoder {
    pub fn register(store: &mut ParamStore, kind: EncoderKind, dims: &AeDims, rng: &mut SeededRng) -> Result<Self> {
        let encoder = PatientEncoder::register(store, kind, dims, rng)?;
        let l = dims.layout;
        let decoder = Gru::register(store, &format!("{PREFIX}.dec"), dims.d_h, dims.d_h, rng)?;
        let head_codes = Linear::register(store, &format!("{PREFIX}.head_codes"), dims.d_h, l.n_codes, true, rng)?;
        let head_obs = if l.n_obs > 0 {
            Some(Linear::register(store, &format!("{PREFIX}.head_obs"), dims.d_h, l.n_obs, true, rng)?)
        } else {
            None
        };
        let head_demo = Linear::register(store, &format!("{PREFIX}.head_demo"), dims.d_h, l.n_demographic(), true, rng)?;
        let head_num = Linear::register(store, &format!("{PREFIX}.head_num"), dims.d_h, 2, true, rng)?;
        Ok(Self {
            encoder,
            decoder,
            head_codes,
            head_obs,
            head_demo,
            head_num,
        })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        visits: &[PreparedVisit],
        mode: DropoutMode,
        rng: &mut SeededRng,
    ) -> Result<AeLoss> {
        let enc = self.encoder.encode(tape, store, visits, mode, rng)?;
        self.decode_and_loss(tape, store, enc.ep, visits)
    }

    /// Reconstruction loss of `visits` from `e^p`, averaged over visits.
    pub fn decode_and_loss(&self, tape: &mut Tape, store: &ParamStore, ep: Var, visits: &[PreparedVisit]) -> Result<AeLoss> {
        let l = self.encoder.dims.layout;
        let t_len = visits.len();
        if t_len == 0 {
            return Err(CoreError::Validation("cannot decode an empty visit sequence".into()));
        }
        let inputs = vec![ep; t_len];
        let states = self.decoder.unroll(tape, store, &inputs)?;
        let mut terms = Vec::with_capacity(4 * t_len);
        let mut heads = HeadLosses::default();
        let w = 1.0 / t_len as f64;
        for (h, visit) in states.iter().zip(visits) {
            let x = &visit.vector.x;
            let d = &visit.vector.d;
            let n_set: f64 = x.iter().sum();
            if n_set == 0.0 {
                return Err(CoreError::Validation("visit without codes reached the decoder".into()));
            }
            let logits = self.head_codes.forward(tape, store, *h)?;
            let target = DenseArray::vector(x.iter().map(|v| v / n_set).collect());
            let ce = tape.loss(LossKind::CeSoftmax, logits, &target)?;
            heads.codes += w * tape.scalar(ce);
            terms.push(ce);

            let obs = &d[..l.n_obs];
            let n_obs: f64 = obs.iter().sum();
            if let (Some(head), true) = (&self.head_obs, n_obs > 0.0) {
                let logits = head.forward(tape, store, *h)?;
                let target = DenseArray::vector(obs.iter().map(|v| v / n_obs).collect());
                let ce = tape.loss(LossKind::CeSoftmax, logits, &target)?;
                heads.observations += w * tape.scalar(ce);
                terms.push(ce);
            }

            let demo = &d[l.n_obs..l.n_obs + l.n_demographic()];
            let logits = self.head_demo.forward(tape, store, *h)?;
            let probs = tape.sigmoid(logits);
            let bce = tape.loss(LossKind::Bce, probs, &DenseArray::vector(demo.to_vec()))?;
            heads.demographics += w * tape.scalar(bce);
            terms.push(bce);

            let num = &d[l.n_obs + l.n_demographic()..];
            let pred = self.head_num.forward(tape, store, *h)?;
            let mse = tape.loss(LossKind::Mse, pred, &DenseArray::vector(num.to_vec()))?;
            heads.numerics += w * tape.scalar(mse);
            terms.push(mse);
        }
        let sum = tape.add_n(&terms)?;
        let total = tape.scale(sum, w);
        Ok(AeLoss { total, heads })
    }
}

//! Visit-context code embeddings and their alignment to the experiment
//! vocabulary.
//!
//! Each instance pairs a visit's codes with the union of codes in the
//! surrounding visits. The visit is embedded as `relu(Σ_i W_m[i])` and a
//! softmax layer predicts the normalized context distribution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use numkit::{derive_seed, seeded_rng, Adadelta, DenseArray, Init, Linear, LossKind, ParamId, ParamStore, Tape};

use crate::ehr::{CodeVocabulary, PatientRecord};
use crate::error::{CoreError, Result};
use crate::train::run_epoch;

pub const TABLE_PARAM: &str = "code2vec.w_m";
const OUTPUT_PREFIX: &str = "code2vec.out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Code2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Visit-level occurrence threshold for the pre-training vocabulary.
    pub min_count: usize,
}

impl Default for Code2VecConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            window: 1,
            epochs: 10,
            batch_size: 100,
            min_count: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowInstance {
    pub codes: Vec<usize>,
    pub context: Vec<usize>,
}

/// One instance per visit whose ±`window` neighbourhood holds any code.
pub fn build_visit_windows(corpus: &[PatientRecord], window: usize) -> Vec<WindowInstance> {
    let mut out = Vec::new();
    for p in corpus {
        let n = p.visits.len();
        for t in 0..n {
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(n - 1);
            let context: BTreeSet<usize> = (lo..=hi)
                .filter(|&s| s != t)
                .flat_map(|s| p.visits[s].code_indices.iter().copied())
                .collect();
            if context.is_empty() || p.visits[t].code_indices.is_empty() {
                continue;
            }
            out.push(WindowInstance {
                codes: p.visits[t].code_indices.clone(),
                context: context.into_iter().collect(),
            });
        }
    }
    out
}

pub struct Code2VecModel {
    pub table: ParamId,
    pub output: Linear,
    pub vocab_size: usize,
}

impl Code2VecModel {
    pub fn register(store: &mut ParamStore, vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let table = store.add_init(TABLE_PARAM, &[vocab_size, dim], Init::Glorot, &mut rng)?;
        let output = Linear::register(store, OUTPUT_PREFIX, dim, vocab_size, true, &mut rng)?;
        Ok(Self {
            table,
            output,
            vocab_size,
        })
    }

    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, inst: &WindowInstance) -> Result<numkit::Var> {
        let mut x = vec![0.0; self.vocab_size];
        for &c in &inst.codes {
            x[c] = 1.0;
        }
        let mut target = vec![0.0; self.vocab_size];
        let w = 1.0 / inst.context.len() as f64;
        for &c in &inst.context {
            target[c] = w;
        }
        let x = tape.constant(DenseArray::vector(x));
        let table = tape.param(store, self.table);
        let summed = tape.matmul(x, table)?;
        let hidden = tape.relu(summed);
        let logits = self.output.forward(tape, store, hidden)?;
        Ok(tape.loss(LossKind::CeSoftmax, logits, &DenseArray::vector(target))?)
    }
}

pub struct Code2VecOutcome {
    pub store: ParamStore,
    /// Mean loss before training, then the mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

pub fn train_code_embeddings(
    instances: &[WindowInstance],
    vocab_size: usize,
    cfg: &Code2VecConfig,
    optimizer: &Adadelta,
    seed: u64,
) -> Result<Code2VecOutcome> {
    if instances.is_empty() {
        return Err(CoreError::Validation("no code-context instances to train on".into()));
    }
    if vocab_size == 0 || cfg.dim == 0 {
        return Err(CoreError::Config("code embedding needs a vocabulary and dim >= 1".into()));
    }
    let mut store = ParamStore::new();
    let model = Code2VecModel::register(&mut store, vocab_size, cfg.dim, derive_seed(seed, 0))?;
    let mut initial = 0.0;
    for inst in instances {
        let mut tape = Tape::new();
        let l = model.loss(&mut tape, &store, inst)?;
        initial += tape.scalar(l);
    }
    let mut loss_curve = vec![initial / instances.len() as f64];
    for epoch in 0..cfg.epochs {
        let mean = run_epoch(
            &mut store,
            optimizer,
            instances.len(),
            cfg.batch_size,
            derive_seed(seed, 1 + epoch as u64),
            |tape, s, i, _| model.loss(tape, s, &instances[i]),
        )?;
        loss_curve.push(mean);
    }
    Ok(Code2VecOutcome { store, loss_curve })
}

/// Experiment code → pre-training row, or `None` when out of vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub entries: Vec<AlignmentEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub code: String,
    pub pretrain_index: Option<usize>,
}

impl AlignmentMap {
    pub fn build(experiment: &CodeVocabulary, pretrain: &CodeVocabulary) -> Self {
        Self {
            entries: experiment
                .codes
                .iter()
                .map(|c| AlignmentEntry {
                    code: c.clone(),
                    pretrain_index: pretrain.get(c),
                })
                .collect(),
        }
    }

    pub fn oov_count(&self) -> usize {
        self.entries.iter().filter(|e| e.pretrain_index.is_none()).count()
    }

    /// Rows of `table` reordered to the experiment vocabulary; OOV rows are zero.
    pub fn materialize(&self, table: &DenseArray) -> Result<DenseArray> {
        let dim = table.cols();
        let mut values = vec![0.0; self.entries.len() * dim];
        for (row, e) in self.entries.iter().enumerate() {
            if let Some(i) = e.pretrain_index {
                if i >= table.rows() {
                    return Err(CoreError::Data(format!(
                        "alignment of `{}` points at row {i} of a {}-row table",
                        e.code,
                        table.rows()
                    )));
                }
                values[row * dim..(row + 1) * dim].copy_from_slice(table.row(i));
            }
        }
        Ok(DenseArray::new(vec![self.entries.len().max(1), dim], values)?)
    }
}

/// `m = W x`: the sum of the rows selected by a multi-hot `x`.
pub fn embed_codes(x: &[f64], table: &DenseArray) -> Result<Vec<f64>> {
    let x = DenseArray::vector(x.to_vec());
    Ok(x.matmul(table)?.into_values())
}

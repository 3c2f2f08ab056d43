//! Training drivers with best-validation selection, and batched inference.

use rayon::prelude::*;
use serde::Serialize;

use numkit::{derive_seed, seeded_rng, Adadelta, DropoutMode, ParamStore, Tape};

use crate::autoencoder::{Autoencoder, HeadLosses};
use crate::dataset::Sample;
use crate::error::{CoreError, Result};
use crate::eval::auprc;
use crate::models::Predictor;
use crate::train::run_epoch;

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Adadelta,
    /// Worker threads for inference; 1 runs inline.
    pub threads: usize,
}

/// Maps `f` over `items` on up to `threads` workers, preserving order.
pub fn par_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CoreError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Eval-mode probabilities, one per sample, in input order.
pub fn predict_probs(model: &dyn Predictor, store: &ParamStore, samples: &[&Sample], threads: usize) -> Result<Vec<f64>> {
    par_map(samples, threads, |s| {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(0);
        let p = model.forward(&mut tape, store, s, DropoutMode::Eval, &mut rng)?;
        Ok(tape.scalar(p.prob))
    })
}

pub fn labels(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auprc: f64,
}

pub struct PredictorOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Minimises mean BCE; keeps the parameters of the epoch with the highest
/// validation AUPRC (earliest on ties).
pub fn train_predictor(
    model: &dyn Predictor,
    store: &mut ParamStore,
    train: &[&Sample],
    valid: &[&Sample],
    settings: &TrainSettings,
) -> Result<PredictorOutcome> {
    if settings.epochs == 0 {
        return Err(CoreError::Config("epochs must be at least 1".into()));
    }
    let valid_labels = labels(valid);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        let train_loss = run_epoch(
            store,
            &settings.optimizer,
            train.len(),
            settings.batch_size,
            derive_seed(settings.seed, epoch as u64),
            |tape, s, i, rng| model.loss(tape, s, train[i], DropoutMode::Train, rng),
        )?;
        let probs = predict_probs(model, store, valid, settings.threads)?;
        let valid_auprc = auprc(&probs, &valid_labels)?;
        log::info!("{} epoch {epoch}: train loss {train_loss:.5}, valid AUPRC {valid_auprc:.4}", model.variant());
        history.push(EpochLog {
            epoch,
            train_loss,
            valid_auprc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| valid_auprc > *b) {
            best = Some((valid_auprc, epoch, store.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(PredictorOutcome {
        best,
        best_epoch,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AeEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub train_codes: f64,
    pub train_observations: f64,
    pub train_demographics: f64,
    pub train_numerics: f64,
}

pub struct AeOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub history: Vec<AeEpochLog>,
}

/// Mean eval-mode reconstruction loss and per-head means.
pub fn ae_loss_on(ae: &Autoencoder, store: &ParamStore, samples: &[&Sample], threads: usize) -> Result<(f64, HeadLosses)> {
    if samples.is_empty() {
        return Err(CoreError::Validation("no samples to evaluate".into()));
    }
    let per = par_map(samples, threads, |s| {
        let mut tape = Tape::new();
        let mut rng = seeded_rng(0);
        let l = ae.loss(&mut tape, store, &s.visits, DropoutMode::Eval, &mut rng)?;
        Ok((tape.scalar(l.total), l.heads))
    })?;
    let w = 1.0 / samples.len() as f64;
    let mut heads = HeadLosses::default();
    let mut total = 0.0;
    for (t, h) in &per {
        total += t;
        heads.add_scaled(h, w);
    }
    Ok((total * w, heads))
}

/// Minimises the reconstruction loss on `train`. Epoch 0 is the initial
/// state; the parameters with the lowest validation loss are kept.
pub fn train_autoencoder(
    ae: &Autoencoder,
    store: &mut ParamStore,
    train: &[&Sample],
    valid: &[&Sample],
    settings: &TrainSettings,
) -> Result<AeOutcome> {
    let (valid0, _) = ae_loss_on(ae, store, valid, settings.threads)?;
    let (train0, heads0) = ae_loss_on(ae, store, train, settings.threads)?;
    let mut history = vec![AeEpochLog {
        epoch: 0,
        train_loss: train0,
        valid_loss: valid0,
        train_codes: heads0.codes,
        train_observations: heads0.observations,
        train_demographics: heads0.demographics,
        train_numerics: heads0.numerics,
    }];
    let mut best = (valid0, 0, store.clone());
    for epoch in 1..=settings.epochs {
        let mut heads = HeadLosses::default();
        let w = 1.0 / train.len().max(1) as f64;
        let train_loss = run_epoch(
            store,
            &settings.optimizer,
            train.len(),
            settings.batch_size,
            derive_seed(settings.seed, epoch as u64),
            |tape, s, i, rng| {
                let l = ae.loss(tape, s, &train[i].visits, DropoutMode::Train, rng)?;
                heads.add_scaled(&l.heads, w);
                Ok(l.total)
            },
        )?;
        let (valid_loss, _) = ae_loss_on(ae, store, valid, settings.threads)?;
        log::info!("autoencoder epoch {epoch}: train {train_loss:.5}, valid {valid_loss:.5}");
        history.push(AeEpochLog {
            epoch,
            train_loss,
            valid_loss,
            train_codes: heads.codes,
            train_observations: heads.observations,
            train_demographics: heads.demographics,
            train_numerics: heads.numerics,
        });
        if valid_loss < best.0 {
            best = (valid_loss, epoch, store.clone());
        }
    }
    Ok(AeOutcome {
        best: best.2,
        best_epoch: best.1,
        history,
    })
}

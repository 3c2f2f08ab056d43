//! Mini-batch optimisation shared by every model.

use rand::seq::SliceRandom;

use numkit::{derive_seed, seeded_rng, Adadelta, NumError, ParamStore, SeededRng, Tape, Var};

use crate::error::{CoreError, Result};

/// One pass over `n_items` in a seeded random order.
///
/// Each item gets its own tape and a generator derived from `epoch_seed` and
/// its position, so dropout masks do not depend on batch composition. The
/// loss of each item is scaled by 1/B before the backward pass. Returns the
/// mean unscaled item loss.
pub fn run_epoch<F>(
    store: &mut ParamStore,
    optimizer: &Adadelta,
    n_items: usize,
    batch_size: usize,
    epoch_seed: u64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore, usize, &mut SeededRng) -> Result<Var>,
{
    if n_items == 0 {
        return Err(CoreError::Validation("no training items".into()));
    }
    if batch_size == 0 {
        return Err(CoreError::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut seeded_rng(epoch_seed));
    let mut total = 0.0;
    for (b, batch) in order.chunks(batch_size).enumerate() {
        let scale = 1.0 / batch.len() as f64;
        for (j, &item) in batch.iter().enumerate() {
            let mut rng = seeded_rng(derive_seed(epoch_seed, (b * batch_size + j) as u64));
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, store, item, &mut rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                let origin = tape
                    .first_non_finite()
                    .map(|(v, op)| format!("first non-finite tensor: node {} ({op})", v.index()))
                    .unwrap_or_else(|| "no non-finite intermediate".into());
                return Err(CoreError::Diverged(format!("loss {value} on item {item}; {origin}")));
            }
            total += value;
            let scaled = tape.scale(loss, scale);
            tape.backward(scaled, store)?;
        }
        optimizer.step(store).map_err(|e| match e {
            NumError::NonFinite(m) => CoreError::Diverged(m),
            other => other.into(),
        })?;
    }
    Ok(total / n_items as f64)
}

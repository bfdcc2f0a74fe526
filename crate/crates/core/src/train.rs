//! Mini-batch SGD over a labeled dataset with any objective.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, ParameterSet, Sgd, SgdConfig};
use crate::objective::{objective_gradients, ObjectiveSpec};
use crate::rng::{self, tags};

/// One optimizer step. `epoch` and `batch` count from 0.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub ce_term: f64,
    pub consistency_term: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub log: Vec<LogRow>,
}

/// Batch order for one epoch: a permutation drawn from `(seed, epoch)`,
/// cut into `batch_size` pieces with the short remainder kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tags::SHUFFLE, epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains `params` in place of a fresh copy and returns it with the log.
/// All randomness (shuffling, attacks, augmentation) derives from `seed`.
pub fn train(
    model: &Model,
    mut params: ParameterSet,
    sgd: &SgdConfig,
    objective: &ObjectiveSpec,
    data: &LabeledDataset,
    seed: u64,
) -> Result<TrainOutcome> {
    sgd.validate()?;
    objective.validate()?;
    model.check_params(&params)?;
    if data.is_empty() && sgd.epochs > 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut opt = Sgd::new(sgd.clone());
    let mut log = Vec::new();
    for epoch in 0..sgd.epochs {
        let mut scheduled = objective.clone();
        if let Some(a) = scheduled.attack.as_mut() {
            a.epsilon *= sgd.epsilon_scale(epoch);
        }
        let objective = &scheduled;
        for (b, idx) in epoch_batches(data.len(), sgd.batch_size, seed, epoch).into_iter().enumerate() {
            let (x, y) = data.batch(&idx)?;
            let batch_seed = rng::derive_seed(seed, &[tags::BATCH, epoch as u64, b as u64]);
            let (loss, grads) = objective_gradients(objective, model, &params, &x, &y, batch_seed).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "{} seed {seed} epoch {epoch} batch {b}: {msg}",
                    objective.display_name()
                )),
                other => other,
            })?;
            if grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{} seed {seed} epoch {epoch} batch {b}: non-finite gradient",
                    objective.display_name()
                )));
            }
            opt.step(&mut params, &grads, epoch)?;
            log.push(LogRow {
                epoch,
                batch: b,
                total: loss.total,
                ce_term: loss.ce_term,
                consistency_term: loss.consistency_term,
            });
        }
        if let Some(last) = log.last() {
            log::debug!("{} seed {seed} epoch {epoch}: loss {:.4}", objective.display_name(), last.total);
        }
    }
    Ok(TrainOutcome { params, log })
}

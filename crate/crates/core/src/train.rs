//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::augment;
use crate::data::manifest::LoadedSplit;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{batch_loss, forward_batch, predictions, Model};
use crate::optim::{sgd_step, OptimState};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the first step of the epoch.
    pub lr: f64,
    pub loss_s: f64,
    pub loss_con: f64,
    /// Training accuracy of the final head on the augmented views.
    pub acc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,loss_s,loss_con,acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.17e},{:.17e},{:.4}",
            self.epoch, self.lr, self.loss_s, self.loss_con, self.acc
        )
    }
}

/// Stream used for shuffling and augmenting `epoch` (0-based).
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
    rng.set_stream(epoch as u64);
    rng
}

/// One optimizer step on a batch; returns `(loss_s, loss_con, correct)`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    optim: &mut OptimState,
    images: &[Tensor],
    labels: &[usize],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, usize)> {
    let (grads, updates, ls, lcon, correct) = {
        let mut s = Session::new(store, true);
        let fwd = forward_batch(&mut s, model, images, None)?;
        let bl = batch_loss(&mut s, model, &fwd, labels, loss_cfg)?;
        if !s.value(bl.loss).item().is_finite() {
            let (node, op) = s.tape.first_non_finite().unwrap_or((bl.loss.index(), "loss"));
            return Err(Error::NonFinite { op, node });
        }
        let correct = fwd
            .samples
            .iter()
            .zip(labels)
            .filter(|(o, &y)| predictions(&s, o).final_class == y)
            .count();
        let g = s.tape.backward(bl.loss)?;
        let grads = s.param_grads(&g);
        if grads.iter().flatten().any(|t| t.data().iter().any(|x| !x.is_finite())) {
            let (node, op) = s.tape.first_non_finite().unwrap_or((0, "backward"));
            return Err(Error::NonFinite { op, node });
        }
        (grads, s.take_buffer_updates(), bl.ls, bl.lcon, correct)
    };
    sgd_step(store, &grads, optim)?;
    for (id, value) in updates {
        store.set(id, value)?;
    }
    Ok((ls, lcon, correct))
}

/// Train for one epoch (0-based `epoch`).
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore,
    optim: &mut OptimState,
    data: &LoadedSplit,
    epoch: usize,
    seed: u64,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<EpochLog> {
    if data.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let lr = optim.current_lr();
    let (mut ls_sum, mut lcon_sum, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
    for chunk in order.chunks(cfg.batch_size) {
        let images = chunk
            .iter()
            .map(|&i| augment(&data.images[i], true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.entries[i].label).collect();
        let (ls, lcon, c) = train_step(model, store, optim, &images, &labels, loss_cfg)?;
        ls_sum += ls;
        lcon_sum += lcon;
        correct += c;
        batches += 1;
    }
    Ok(EpochLog {
        epoch: epoch + 1,
        lr,
        loss_s: ls_sum / batches as f64,
        loss_con: lcon_sum / batches as f64,
        acc: correct as f64 / data.len() as f64,
    })
}

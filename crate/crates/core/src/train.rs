//! Mini-batch training with Adam or SGD and early stopping.
//!
//! Determinism is preserved at every parallelism level: instances within a
//! batch are processed in chunks, each chunk's per-instance gradients are
//! computed independently (optionally on worker threads) and then folded
//! into the accumulator sequentially in instance order. Floating-point
//! reduction order therefore never depends on thread scheduling, and a run
//! with eight workers matches a run with one bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use nirec_tensor::{backward, Grad, Tape, Tensor, TensorError};

use crate::config::{HyperParams, Optimizer};
use crate::eval::{evaluate, EvalError};
use crate::ingest::{Dataset, Instance};
use crate::model::{InstancePaths, Model, ModelError};
use crate::sampler::{
    anchor_sets, mix_seed_indexed, prepare_samples, SampleError, SampleStore,
};

/// Errors from the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("no training instances")]
    NoTrainInstances,
    #[error("no validation instances")]
    NoValidInstances,
}

/// One epoch's summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub valid_acc: f64,
    pub seconds: f64,
}

/// The full training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch (1-based) whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_auc: f64,
    pub stopped_early: bool,
}

enum OptState {
    Sgd,
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: u64,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(optimizer: Optimizer, sizes: &[usize]) -> Self {
        match optimizer {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam {
                m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                t: 0,
            },
        }
    }

    /// Applies one update. `grads[i]` is the mean gradient of parameter `i`.
    fn step(
        &mut self,
        model: &mut Model,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<(), TensorError> {
        match self {
            OptState::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    let old = model.params().value(i);
                    let shape = old.shape().to_vec();
                    let data: Vec<f64> = old
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&w, &gi)| w - lr * gi)
                        .collect();
                    model.params_mut().set_value(i, Tensor::new(&shape, data)?);
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let t_f = *t as f64;
                let bias1 = 1.0 - ADAM_BETA1.powf(t_f);
                let bias2 = 1.0 - ADAM_BETA2.powf(t_f);
                for (i, g) in grads.iter().enumerate() {
                    let old = model.params().value(i);
                    let shape = old.shape().to_vec();
                    let mi = &mut m[i];
                    let vi = &mut v[i];
                    let data: Vec<f64> = old
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &w)| {
                            let gj = g[j];
                            mi[j] = ADAM_BETA1 * mi[j] + (1.0 - ADAM_BETA1) * gj;
                            vi[j] = ADAM_BETA2 * vi[j] + (1.0 - ADAM_BETA2) * gj * gj;
                            let m_hat = mi[j] / bias1;
                            let v_hat = vi[j] / bias2;
                            w - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
                        })
                        .collect();
                    model.params_mut().set_value(i, Tensor::new(&shape, data)?);
                }
            }
        }
        Ok(())
    }
}

/// Loss and per-parameter gradients for one instance.
pub(crate) fn instance_grads(
    model: &Model,
    store: &SampleStore,
    inst: &Instance,
) -> Result<(f64, Vec<(usize, Grad)>), TrainError> {
    let paths = InstancePaths::from_store(store, inst.user, inst.item).map_err(ModelError::from)?;
    let tape = Tape::new();
    let (trace, loss) = model.loss(&tape, &paths, inst.label)?;
    let mut grads = backward(&loss).map_err(ModelError::from)?;
    let mut out = Vec::new();
    for (i, leaf) in trace.leaves.iter().enumerate() {
        if let Some(g) = grads.take(leaf) {
            out.push((i, g));
        }
    }
    let value = loss.value().item().map_err(ModelError::from)?;
    Ok((value, out))
}

pub(crate) fn add_grad(buffer: &mut [f64], grad: &Grad, cols: usize) {
    match grad {
        Grad::Dense(t) => {
            for (slot, &g) in buffer.iter_mut().zip(t.data()) {
                *slot += g;
            }
        }
        Grad::Rows(rows) => {
            for (&row, values) in rows {
                let offset = row * cols;
                for (slot, &g) in buffer[offset..offset + cols].iter_mut().zip(values) {
                    *slot += g;
                }
            }
        }
    }
}

/// Trains `model` in place. On return the model holds the parameters of the
/// best validation-AUC epoch; the report records the whole trajectory.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    store: &SampleStore,
    hyper: &HyperParams,
) -> Result<TrainReport, TrainError> {
    if dataset.split.train.is_empty() {
        return Err(TrainError::NoTrainInstances);
    }
    if dataset.split.valid.is_empty() {
        return Err(TrainError::NoValidInstances);
    }
    let workers = if hyper.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        hyper.workers
    };
    let pool = (workers > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool")
        });

    let sizes: Vec<usize> = model
        .params()
        .entries()
        .iter()
        .map(|e| e.value.len())
        .collect();
    let cols: Vec<usize> = model
        .params()
        .entries()
        .iter()
        .map(|e| e.value.shape().last().copied().unwrap_or(1))
        .collect();
    let mut opt = OptState::new(hyper.optimizer, &sizes);
    let mut buffers: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();

    let train_instances = &dataset.split.train;
    let (train_users, train_items) = anchor_sets(&[train_instances]);

    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params().clone();
    let mut epochs_without_improvement = 0usize;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=hyper.epochs {
        let started = std::time::Instant::now();

        // Optionally redraw this epoch's training walks; evaluation always
        // uses the prepared base store.
        let resampled: Option<SampleStore> = if hyper.resample_walks {
            Some(prepare_samples(
                &dataset.graph,
                &store.metapaths,
                dataset.user_type,
                dataset.item_type,
                &train_users,
                &train_items,
                hyper.walks,
                mix_seed_indexed(hyper.seed, "resample", epoch as u64),
            )?)
        } else {
            None
        };
        let epoch_store = resampled.as_ref().unwrap_or(store);

        let mut order: Vec<usize> = (0..train_instances.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed_indexed(hyper.seed, "batch", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(hyper.batch_size).enumerate() {
            for buffer in buffers.iter_mut() {
                buffer.iter_mut().for_each(|b| *b = 0.0);
            }
            let mut batch_loss = 0.0;
            let fold = |buffers: &mut Vec<Vec<f64>>,
                        batch_loss: &mut f64,
                        results: Vec<(f64, Vec<(usize, Grad)>)>| {
                for (loss, grads) in results {
                    *batch_loss += loss;
                    for (i, g) in grads {
                        add_grad(&mut buffers[i], &g, cols[i]);
                    }
                }
            };
            match &pool {
                Some(pool) => {
                    // Chunked: parallel inside a chunk, chunks folded in
                    // instance order.
                    for chunk in batch.chunks(workers * 2) {
                        let results: Result<Vec<_>, TrainError> = pool.install(|| {
                            chunk
                                .par_iter()
                                .map(|&i| instance_grads(model, epoch_store, &train_instances[i]))
                                .collect()
                        });
                        fold(&mut buffers, &mut batch_loss, results?);
                    }
                }
                None => {
                    for &i in batch {
                        let result = instance_grads(model, epoch_store, &train_instances[i])?;
                        fold(&mut buffers, &mut batch_loss, vec![result]);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("batch loss is {batch_loss}"),
                });
            }
            for buffer in buffers.iter_mut() {
                buffer.iter_mut().for_each(|b| *b *= scale);
            }
            opt.step(model, &buffers, hyper.learning_rate)
                .map_err(|e| TrainError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: format!("parameter update produced {e}"),
                })?;
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_instances.len() as f64;

        let (valid_report, _) = evaluate(model, &dataset.split.valid, store, workers)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            valid_auc: valid_report.auc,
            valid_acc: valid_report.acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: train_loss {:.6} valid_auc {:.4} valid_acc {:.4} ({:.1}s)",
            stats.epoch,
            stats.train_loss,
            stats.valid_auc,
            stats.valid_acc,
            stats.seconds
        );
        history.push(stats);

        if valid_report.auc > best_auc {
            best_auc = valid_report.auc;
            best_epoch = epoch;
            best_params = model.params().clone();
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= hyper.patience {
                stopped_early = true;
                log::info!(
                    "early stop at epoch {epoch}: no improvement for {} epochs",
                    epochs_without_improvement
                );
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(TrainReport {
        history,
        best_epoch,
        best_auc,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::planted_tags;

    fn small_hyper() -> HyperParams {
        HyperParams {
            embed_dim: 8,
            raw_dim: None,
            walks: 4,
            heads: 2,
            mlp_hidden: vec![8],
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 2,
            patience: 5,
            seed: 7,
            workers: 1,
            ..HyperParams::default()
        }
    }

    #[test]
    fn same_seed_same_first_epoch_loss() {
        let hyper = small_hyper();
        let bundle = planted_tags(12, 12, 3, 40, &hyper).unwrap();
        let run = |hyper: &HyperParams| {
            let mut model = Model::init(bundle.model_config(hyper), hyper.seed).unwrap();
            let report = train(&mut model, &bundle.dataset, &bundle.store, hyper).unwrap();
            (report, model)
        };
        let (a, model_a) = run(&hyper);
        let (b, model_b) = run(&hyper);
        assert_eq!(
            a.history[0].train_loss.to_bits(),
            b.history[0].train_loss.to_bits()
        );
        assert_eq!(model_a.params(), model_b.params());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let hyper = small_hyper();
        let bundle = planted_tags(12, 12, 3, 40, &hyper).unwrap();
        let mut sequential = Model::init(bundle.model_config(&hyper), hyper.seed).unwrap();
        let report_seq = train(&mut sequential, &bundle.dataset, &bundle.store, &hyper).unwrap();

        let hyper_par = HyperParams {
            workers: 4,
            ..hyper.clone()
        };
        let mut parallel = Model::init(bundle.model_config(&hyper_par), hyper_par.seed).unwrap();
        let report_par = train(&mut parallel, &bundle.dataset, &bundle.store, &hyper_par).unwrap();

        for (a, b) in report_seq.history.iter().zip(&report_par.history) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.valid_auc.to_bits(), b.valid_auc.to_bits());
        }
        assert_eq!(sequential.params(), parallel.params());
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let hyper = HyperParams {
            epochs: 5,
            ..small_hyper()
        };
        let bundle = planted_tags(16, 16, 4, 80, &hyper).unwrap();
        let mut model = Model::init(bundle.model_config(&hyper), hyper.seed).unwrap();
        let report = train(&mut model, &bundle.dataset, &bundle.store, &hyper).unwrap();
        let first = report.history.first().unwrap().train_loss;
        let last = report.history.last().unwrap().train_loss;
        assert!(
            last < first,
            "training loss should fall: first {first}, last {last}"
        );
    }

    #[test]
    fn sgd_also_trains() {
        // Plain SGD moves much more slowly than Adam through the attention
        // stack, so run it full-batch (no minibatch noise) with a stronger
        // step, more epochs, and early stopping defused.
        let hyper = HyperParams {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.5,
            batch_size: 64,
            epochs: 12,
            patience: 50,
            ..small_hyper()
        };
        let bundle = planted_tags(12, 12, 3, 40, &hyper).unwrap();
        let mut model = Model::init(bundle.model_config(&hyper), hyper.seed).unwrap();
        let report = train(&mut model, &bundle.dataset, &bundle.store, &hyper).unwrap();
        let first = report.history.first().unwrap().train_loss;
        let last = report.history.last().unwrap().train_loss;
        let losses: Vec<f64> = report.history.iter().map(|e| e.train_loss).collect();
        assert!(last < first, "losses {losses:?}");
    }

    #[test]
    fn resampling_walks_changes_training_but_still_runs() {
        let hyper = HyperParams {
            resample_walks: true,
            epochs: 2,
            ..small_hyper()
        };
        let bundle = planted_tags(12, 12, 3, 40, &hyper).unwrap();
        let mut model = Model::init(bundle.model_config(&hyper), hyper.seed).unwrap();
        let report = train(&mut model, &bundle.dataset, &bundle.store, &hyper).unwrap();
        assert_eq!(report.history.len(), 2);

        let hyper_base = HyperParams {
            resample_walks: false,
            ..hyper.clone()
        };
        let mut base = Model::init(bundle.model_config(&hyper_base), hyper_base.seed).unwrap();
        let report_base = train(&mut base, &bundle.dataset, &bundle.store, &hyper_base).unwrap();
        // Different walks feed the batches, so the trajectories differ.
        assert_ne!(
            report.history[0].train_loss.to_bits(),
            report_base.history[0].train_loss.to_bits()
        );
    }

    #[test]
    fn early_stopping_restores_best_parameters() {
        // Tiny data, many epochs: validation AUC will plateau quickly.
        let hyper = HyperParams {
            epochs: 30,
            patience: 2,
            ..small_hyper()
        };
        let bundle = planted_tags(8, 8, 2, 24, &hyper).unwrap();
        let mut model = Model::init(bundle.model_config(&hyper), hyper.seed).unwrap();
        let report = train(&mut model, &bundle.dataset, &bundle.store, &hyper).unwrap();
        if report.stopped_early {
            assert!(report.history.len() < 30);
        }
        let best = report
            .history
            .iter()
            .map(|e| e.valid_auc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, report.best_auc);
        // The reported best epoch saw that AUC.
        assert_eq!(
            report.history[report.best_epoch - 1].valid_auc,
            report.best_auc
        );
    }
}

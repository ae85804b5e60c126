//! Optimization and evaluation: AdamW with decoupled weight decay, a
//! cosine annealing schedule with warm restarts, the training loop,
//! classification metrics, and leave-one-actor-out cross-validation.
//!
//! Everything here is deterministic given the seed in [`TrainOptions`]:
//! shuffles, dropout masks, and fold/worker scheduling all derive from
//! labeled forks of that seed, so results do not depend on thread timing.

use serde::Serialize;

use crate::data::{make_batch, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{build_model, cross_entropy_loss, predict, HamletModel, ModelConfig};
use crate::numerics::rng::Rng;
use crate::numerics::tape::Tape;
use crate::params::{ParamStore, Session};

// ── AdamW ───────────────────────────────────────────────────────────

/// Decoupled weight decay Adam. Update per element:
/// `m <- b1 m + (1-b1) g`; `v <- b2 v + (1-b2) g^2`; bias-corrected
/// `m^`, `v^`; `p <- p - lr (m^ / (sqrt(v^) + eps) + wd p)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn with_defaults(weight_decay: f64) -> Self {
        AdamW::new(0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients accumulated in the store.
    /// Parameters without gradients are treated as having gradient zero
    /// (weight decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.first_moment.len() < store.len() {
            for (_, p) in store.iter() {
                if self.first_moment.len() < store.len() {
                    self.first_moment.push(vec![0.0; p.value.numel()]);
                    self.second_moment.push(vec![0.0; p.value.numel()]);
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (_, p)) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = p.value.grad() {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NanGradient(p.name.clone()));
                }
            }
            let m = &mut self.first_moment[idx];
            let v = &mut self.second_moment[idx];
            let numel = p.value.numel();
            for ei in 0..numel {
                let g = p.value.grad().map(|g| g[ei]).unwrap_or(0.0);
                m[ei] = self.beta1 * m[ei] + (1.0 - self.beta1) * g;
                v[ei] = self.beta2 * v[ei] + (1.0 - self.beta2) * g * g;
                let m_hat = m[ei] / bc1;
                let v_hat = v[ei] / bc2;
                let p_val = p.value.data()[ei];
                p.value.data_mut()[ei] =
                    p_val - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p_val);
            }
        }
        Ok(())
    }
}

// ── Learning-rate schedule ──────────────────────────────────────────

/// Cosine annealing with warm restarts. Within period `i` of length
/// `T_i`: `lr = eta_min + (eta_max - eta_min) (1 + cos(pi t/T_i)) / 2`;
/// each restart resets `t` to 0 (so the rate is exactly `eta_max`), and
/// periods grow by `t_mult`.
#[derive(Debug, Clone, Copy)]
pub struct CosineWarmRestartSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: u64,
    pub t_mult: u64,
}

impl CosineWarmRestartSchedule {
    pub fn new(eta_max: f64, eta_min: f64, t0: u64, t_mult: u64) -> Result<Self> {
        if t0 == 0 {
            return Err(Error::Config("schedule period t0 must be >= 1".into()));
        }
        if t_mult == 0 {
            return Err(Error::Config("schedule t_mult must be >= 1".into()));
        }
        Ok(CosineWarmRestartSchedule {
            eta_max,
            eta_min,
            t0,
            t_mult,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let mut period = self.t0;
        let mut start = 0u64;
        while step >= start + period {
            start += period;
            period *= self.t_mult;
        }
        let t_cur = (step - start) as f64;
        self.eta_min
            + 0.5 * (self.eta_max - self.eta_min)
                * (1.0 + (std::f64::consts::PI * t_cur / period as f64).cos())
    }
}

// ── Metrics ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// trace(confusion) / total, in [0, 1]
    pub top1_accuracy: f64,
    pub macro_f1: f64,
    pub macro_f1_percent: f64,
    pub per_class: Vec<ClassMetrics>,
    /// rows = true class, columns = predicted class
    pub confusion: Vec<Vec<u64>>,
    pub total: u64,
}

/// Derives every metric from a confusion matrix. Classes with no
/// predictions and no samples score zero precision/recall/F1.
#[allow(clippy::needless_range_loop)]
pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> MetricsReport {
    let c = confusion.len();
    let total: u64 = confusion.iter().map(|row| row.iter().sum::<u64>()).sum();
    let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(c);
    let mut f1_sum = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let fn_: f64 = confusion[k].iter().sum::<u64>() as f64 - tp;
        let fp: f64 = (0..c).map(|i| confusion[i][k]).sum::<u64>() as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        f1_sum += f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
        });
    }
    let macro_f1 = if c > 0 { f1_sum / c as f64 } else { 0.0 };
    MetricsReport {
        top1_accuracy: if total > 0 { trace as f64 / total as f64 } else { 0.0 },
        macro_f1,
        macro_f1_percent: macro_f1 * 100.0,
        per_class,
        confusion,
        total,
    }
}

/// Runs the model in eval mode over `indices` and scores predictions.
pub fn evaluate(
    model: &HamletModel,
    store: &mut ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    segments: usize,
) -> Result<MetricsReport> {
    let c = dataset.class_count();
    let mut confusion = vec![vec![0u64; c]; c];
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch(dataset, chunk, segments)?;
        let tape = Tape::new();
        let mut sess = Session::new(&tape, store, false, Rng::new(0));
        let (logits, _) = model.forward(&mut sess, &batch.modalities)?;
        let preds = predict(&logits.to_tensor());
        for (&label, &pred) in batch.labels.iter().zip(&preds) {
            confusion[label][pred] += 1;
        }
    }
    Ok(metrics_from_confusion(confusion))
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First schedule period, in epochs.
    pub t0_epochs: usize,
    pub t_mult: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Advance the schedule once per epoch instead of once per step.
    pub schedule_per_epoch: bool,
    pub check_finite: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 3e-4,
            epochs: 50,
            batch_size: 16,
            t0_epochs: 10,
            t_mult: 2,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            schedule_per_epoch: false,
            check_finite: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Optimizer steps completed by the end of this epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Learning rate used at every optimizer step, for schedule audits.
    pub step_lrs: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let val = e.val_acc.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.step, e.lr, e.train_loss, e.train_acc, val
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Epoch loop: seeded shuffle, minibatch forward/backward, AdamW step,
/// schedule advance. Aborts with [`Error::Diverged`] if the loss leaves
/// the finite range.
pub fn train(
    model: &HamletModel,
    store: &mut ParamStore,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    segments: usize,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    if train_idx.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(opts.batch_size.max(1)) as u64;
    let t0 = if opts.schedule_per_epoch {
        opts.t0_epochs.max(1) as u64
    } else {
        (opts.t0_epochs.max(1) as u64) * steps_per_epoch
    };
    let schedule = CosineWarmRestartSchedule::new(opts.lr, 0.0, t0, opts.t_mult)?;
    let mut optimizer = AdamW::new(opts.beta1, opts.beta2, opts.adam_eps, opts.weight_decay);
    let root = Rng::new(opts.seed);
    let mut shuffle_rng = root.fork("train/shuffle");
    let mask_root = root.fork("train/masks");
    let mut history = TrainHistory::default();
    let mut global_step = 0u64;

    for epoch in 0..opts.epochs {
        let mut order = train_idx.to_vec();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut last_lr = schedule.lr_at(if opts.schedule_per_epoch {
            epoch as u64
        } else {
            global_step
        });
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch = make_batch(dataset, chunk, segments)?;
            let tape = Tape::new();
            tape.set_check_finite(opts.check_finite);
            let mask_rng = mask_root.fork(&format!("step/{global_step}"));
            let mut sess = Session::new(&tape, store, true, mask_rng);
            let (logits, _) = model.forward(&mut sess, &batch.modalities)?;
            let loss = cross_entropy_loss(logits, &batch.labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step as usize,
                });
            }
            if let Some(op) = tape.finite_violation() {
                return Err(Error::NonFinite(op));
            }
            let preds = predict(&logits.to_tensor());
            correct += preds
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += loss_val * chunk.len() as f64;
            sess.backward(loss)?;
            let lr = schedule.lr_at(if opts.schedule_per_epoch {
                epoch as u64
            } else {
                global_step
            });
            history.step_lrs.push(lr);
            last_lr = lr;
            optimizer.step(store, lr)?;
            store.zero_grads();
            global_step += 1;
        }
        let val_acc = match val_idx {
            Some(idx) if !idx.is_empty() => Some(
                evaluate(model, store, dataset, idx, opts.batch_size, segments)?.top1_accuracy,
            ),
            _ => None,
        };
        history.epochs.push(EpochStats {
            epoch,
            step: global_step,
            lr: last_lr,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            val_acc,
        });
    }
    Ok(history)
}

// ── Cross-validation ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Fold {
    pub test_actor: String,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Leave-one-actor-out plan: each actor is the test split exactly once.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub actors: Vec<String>,
    pub folds: Vec<Fold>,
}

pub fn fold_plan(dataset: &Dataset) -> Result<FoldPlan> {
    let actors = dataset.actors();
    if actors.len() < 2 {
        return Err(Error::Contract(format!(
            "leave-one-actor-out needs >= 2 actors, found {}",
            actors.len()
        )));
    }
    let folds = actors
        .iter()
        .map(|actor| {
            let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| &dataset.samples[i].actor == actor);
            Fold {
                test_actor: actor.clone(),
                train_idx,
                test_idx,
            }
        })
        .collect();
    Ok(FoldPlan {
        actors,
        folds,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldReport {
    pub test_actor: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean_top1: f64,
    pub mean_macro_f1: f64,
}

/// Leave-one-actor-out cross-validation. Every fold standardizes with
/// its own train statistics, builds a fresh model from a fold-specific
/// fork of the seed, trains, and scores the held-out actor. Folds run on
/// up to `workers` threads; results are identical regardless of the
/// worker count.
pub fn loaocv(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    segments: usize,
    opts: &TrainOptions,
    workers: usize,
) -> Result<CvReport> {
    let plan = fold_plan(dataset)?;
    let n = plan.folds.len();
    let workers = workers.clamp(1, n);
    let mut results: Vec<Option<Result<FoldReport>>> = (0..n).map(|_| None).collect();

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (wi, chunk_indices) in chunk_round_robin(n, workers).into_iter().enumerate() {
            let plan = &plan;
            let _ = wi;
            handles.push(scope.spawn(move || {
                chunk_indices
                    .into_iter()
                    .map(|fi| (fi, run_fold(dataset, model_cfg, segments, opts, &plan.folds[fi], fi)))
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (fi, res) in handle.join().expect("fold worker panicked") {
                results[fi] = Some(res);
            }
        }
    });

    let mut folds = Vec::with_capacity(n);
    for res in results.into_iter() {
        folds.push(res.expect("every fold ran")?);
    }
    let mean_top1 = folds.iter().map(|f| f.metrics.top1_accuracy).sum::<f64>() / n as f64;
    let mean_macro_f1 = folds.iter().map(|f| f.metrics.macro_f1).sum::<f64>() / n as f64;
    Ok(CvReport {
        folds,
        mean_top1,
        mean_macro_f1,
    })
}

fn chunk_round_robin(n: usize, workers: usize) -> Vec<Vec<usize>> {
    let mut chunks = vec![Vec::new(); workers];
    for i in 0..n {
        chunks[i % workers].push(i);
    }
    chunks
}

fn run_fold(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    segments: usize,
    opts: &TrainOptions,
    fold: &Fold,
    fold_index: usize,
) -> Result<FoldReport> {
    let standardizer = Standardizer::fit(dataset, &fold.train_idx)?;
    let std_data = standardizer.apply(dataset);
    let fold_rng = Rng::new(opts.seed).fork(&format!("fold/{fold_index}"));
    let fold_seed = fold_rng.seed();
    let mut store = ParamStore::new();
    let model = build_model(model_cfg, &mut store, fold_seed)?;
    let mut fold_opts = opts.clone();
    fold_opts.seed = fold_seed;
    train(
        &model,
        &mut store,
        &std_data,
        &fold.train_idx,
        None,
        segments,
        &fold_opts,
    )?;
    let metrics = evaluate(
        &model,
        &mut store,
        &std_data,
        &fold.test_idx,
        opts.batch_size,
        segments,
    )?;
    Ok(FoldReport {
        test_actor: fold.test_actor.clone(),
        metrics,
    })
}

//! The 3-stage procedure: warm-up training of the operation parameters over
//! uniformly sampled sub-graphs, alternating bi-level architecture search,
//! and retraining of the derived model from scratch; plus the optimizer and
//! learning-rate schedules the stages share.

use rand_chacha::ChaCha8Rng;

use crate::data::{batch_ranges, make_minibatch, Dataset, Minibatch, SplitData};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorKind};
use crate::loss::{self, CtcBatch};
use crate::nn::{ParamGroup, ParamStore, Phase};
use crate::rng::{shuffled_indices, StreamRole, StreamSeed};
use crate::scalar::Scalar;
use crate::supernet::{ArchMode, SampledArchitecture, SuperNetwork};
use crate::tape::{Gradients, Tape};

pub const STAGE_WARMUP: u64 = 0;
pub const STAGE_SEARCH: u64 = 1;
pub const STAGE_RETRAIN: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    Warmup,
    Search,
    Retrain,
}

impl StageKind {
    pub fn tag(self) -> u64 {
        match self {
            StageKind::Warmup => STAGE_WARMUP,
            StageKind::Search => STAGE_SEARCH,
            StageKind::Retrain => STAGE_RETRAIN,
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment stores plus per-parameter step counters (a parameter's
/// bias correction advances only when it receives a gradient).
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, e)| vec![T::ZERO; e.values.len()]).collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            steps: vec![0; m.len()],
            m,
        }
    }

    pub fn reset(&mut self) {
        for b in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in b.iter_mut() {
                *x = T::ZERO;
            }
        }
        for s in self.steps.iter_mut() {
            *s = 0;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.steps.iter().all(|&s| s == 0)
            && self
                .m
                .iter()
                .chain(self.v.iter())
                .all(|b| b.iter().all(|&x| x == T::ZERO))
    }

    pub fn moments_f64(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<u64>) {
        let conv = |src: &Vec<Vec<T>>| src.iter().map(|b| b.iter().map(|v| v.to_f64()).collect()).collect();
        (conv(&self.m), conv(&self.v), self.steps.clone())
    }

    pub fn restore_f64(&mut self, m: &[Vec<f64>], v: &[Vec<f64>], steps: &[u64]) {
        for (dst, src) in self.m.iter_mut().zip(m) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(s);
            }
        }
        for (dst, src) in self.v.iter_mut().zip(v) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(s);
            }
        }
        self.steps.copy_from_slice(steps);
    }
}

/// One Adam update over every parameter present in `grads`, with bias
/// correction and moment parameters (0.9, 0.999), epsilon 1e-8 by default.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamParams,
) {
    let (b1, b2, eps) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2), T::from_f64(hp.epsilon));
    let lr = T::from_f64(lr);
    for (pid, g) in grads.iter() {
        let i = pid.0;
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let bc1 = T::ONE - T::from_f64(hp.beta1).powi(t);
        let bc2 = T::ONE - T::from_f64(hp.beta2).powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let params = store.values_mut(pid);
        debug_assert_eq!(params.len(), g.len());
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (T::ONE - b1) * g[j];
            v[j] = b2 * v[j] + (T::ONE - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

// ── stage configuration and stopping rules ───────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub minibatch: usize,
    pub lr_init: f64,
    /// Stop once the decayed learning rate falls below this (ignored by
    /// warm-up, which runs at a fixed rate until patience is exhausted).
    pub lr_floor: f64,
    pub decay: f64,
    pub patience: usize,
    /// Hard cap so no stage can loop unboundedly on a slowly improving loss.
    pub max_epochs: usize,
    #[serde(default)]
    pub adam: AdamParams,
}

impl StageConfig {
    pub fn warmup_default() -> Self {
        StageConfig {
            minibatch: 128,
            lr_init: 1e-3,
            lr_floor: 1e-3,
            decay: 0.1,
            patience: 3,
            max_epochs: 200,
            adam: AdamParams::default(),
        }
    }

    pub fn search_default() -> Self {
        StageConfig {
            minibatch: 64,
            lr_init: 1e-3,
            lr_floor: 1e-4,
            decay: 0.1,
            patience: 3,
            max_epochs: 200,
            adam: AdamParams::default(),
        }
    }

    pub fn retrain_default() -> Self {
        StageConfig {
            minibatch: 128,
            lr_init: 1e-3,
            lr_floor: 1e-5,
            decay: 0.1,
            patience: 1,
            max_epochs: 400,
            adam: AdamParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 {
            return Err(Error::Config("stage minibatch must be >= 1".into()));
        }
        if !(0.0 < self.decay && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} not in (0, 1)", self.decay)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.lr_floor > self.lr_init {
            return Err(Error::Config("final learning rate must not exceed the initial one".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageDecision {
    Improved,
    Stale,
    Decayed,
    Stop,
}

/// Patience/decay bookkeeping shared by the stages:
/// warm-up stops outright once the validation loss has not improved for
/// `patience` epochs; search and retraining instead decay the rate by
/// `decay` and stop when it falls below the floor.
#[derive(Debug, Clone)]
pub struct ScheduleController {
    kind: StageKind,
    lr: f64,
    lr_floor: f64,
    decay: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl ScheduleController {
    pub fn new(kind: StageKind, cfg: &StageConfig) -> Self {
        ScheduleController {
            kind,
            lr: cfg.lr_init,
            lr_floor: cfg.lr_floor,
            decay: cfg.decay,
            patience: cfg.patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> StageDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return StageDecision::Improved;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return StageDecision::Stale;
        }
        self.stale = 0;
        match self.kind {
            StageKind::Warmup => StageDecision::Stop,
            StageKind::Search | StageKind::Retrain => {
                self.lr *= self.decay;
                if self.lr < self.lr_floor {
                    StageDecision::Stop
                } else {
                    StageDecision::Decayed
                }
            }
        }
    }
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum MetricsRecord {
    Epoch {
        stage: StageKind,
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        lr: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        pi: Option<Vec<Vec<f64>>>,
    },
    StageEnd {
        stage: StageKind,
        epochs: usize,
        best_val: f64,
    },
    Final {
        val_loss: f64,
        test_loss: f64,
        metric_name: String,
        metric: f64,
    },
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricsRecord);
}

#[derive(Debug, Default)]
pub struct VecSink(pub Vec<MetricsRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, rec: &MetricsRecord) {
        self.0.push(rec.clone());
    }
}

#[derive(Debug, Default)]
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _rec: &MetricsRecord) {}
}

// ── pipeline ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    FrameCrossEntropy,
    Ctc,
}

#[derive(Debug, Clone, Copy)]
pub struct StageOutcome {
    pub epochs_run: usize,
    pub best_val: f64,
    pub final_val: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub loss: f64,
    pub metric_name: &'static str,
    pub metric: f64,
}

/// Per-epoch loop state of the search stage. The validation cursor persists
/// across epochs so minibatches are drawn cyclically from the validation set.
#[derive(Debug, Clone, Default)]
pub struct SearchLoopState {
    pub epoch: usize,
    pub val_cursor: usize,
    /// Validation minibatch index used by each alpha update, for inspection.
    pub val_batches_used: Vec<usize>,
}

pub struct Pipeline<T: Scalar> {
    pub net: SuperNetwork,
    pub store: ParamStore<T>,
    pub seed: StreamSeed,
    pub loss: LossKind,
}

impl<T: Scalar> Pipeline<T> {
    pub fn new(net: SuperNetwork, store: ParamStore<T>, seed: u64, loss: LossKind) -> Self {
        Pipeline {
            net,
            store,
            seed: StreamSeed::new(seed),
            loss,
        }
    }

    fn loss_on_batch(
        &self,
        tape: &mut Tape<T>,
        mb: &Minibatch<T>,
        mode: ArchMode<'_>,
        phase: Phase,
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::tape::TensorId> {
        let x = tape.leaf(mb.features.clone(), &[mb.batch, mb.max_t, mb.feat_dim], false);
        let (logits, _) = self.net.forward(&self.store, tape, x, mode, phase, rng)?;
        match self.loss {
            LossKind::FrameCrossEntropy => {
                let targets = mb
                    .frame_targets
                    .as_ref()
                    .ok_or_else(|| Error::contract("loss", "frame task without frame targets"))?;
                if self.net.spec.total_stride() != 1 {
                    return Err(Error::Config(
                        "frame-level losses need a stride-1 topology".into(),
                    ));
                }
                loss::cross_entropy(tape, logits, targets)
            }
            LossKind::Ctc => {
                let labels = mb
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::contract("loss", "ctc task without label sequences"))?;
                let stride = self.net.spec.total_stride();
                let out_lens: Vec<usize> = mb.input_lens.iter().map(|&l| l.div_ceil(stride)).collect();
                let log_probs = tape.log_softmax(logits)?;
                loss::ctc_loss(
                    tape,
                    log_probs,
                    &CtcBatch {
                        labels: labels.clone(),
                        input_lens: out_lens,
                    },
                )
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn train_minibatch(
        &mut self,
        mb: &Minibatch<T>,
        mode: ArchMode<'_>,
        phase: Phase,
        rng: &mut ChaCha8Rng,
        adam: &mut AdamState<T>,
        lr: f64,
        hp: &AdamParams,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss_id = self.loss_on_batch(&mut tape, mb, mode, phase, rng)?;
        let loss_val = tape.scalar_value(loss_id).to_f64();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {}", loss_val)));
        }
        let report = tape.backward(loss_id)?;
        adam_step(&mut self.store, &report.grads, adam, lr, hp);
        Ok(loss_val)
    }

    /// Mean sampled-sub-graph loss over the whole validation set: for each
    /// validation minibatch draw one sub-graph and evaluate it, a Monte Carlo
    /// estimate of the expected super-network performance.
    pub fn validate_expected(&self, val: &Dataset<T>, minibatch: usize, stage: u64, epoch: usize) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::EmptyDataset("validation set".into()));
        }
        let ranges = batch_ranges(val.len(), minibatch);
        let mut total = 0.0;
        for (bi, (lo, hi)) in ranges.iter().enumerate() {
            let idx: Vec<usize> = (*lo..*hi).collect();
            let mb = make_minibatch(val, &idx);
            let mut zrng = self.seed.stream(StreamRole::Validation, &[stage, epoch as u64, bi as u64]);
            let z = self.net.sample_subgraph(&self.store, &mut zrng);
            let mut tape = Tape::new();
            let mut drng = zrng.clone(); // unused in eval phase
            let loss_id = self.loss_on_batch(&mut tape, &mb, ArchMode::Fixed { z: &z }, Phase::Eval, &mut drng)?;
            let v = tape.scalar_value(loss_id).to_f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite validation loss {}", v)));
            }
            total += v;
        }
        Ok(total / ranges.len() as f64)
    }

    /// Stage 1: train operation parameters over uniformly sampled sub-graphs;
    /// architecture weights stay untouched.
    pub fn warmup(&mut self, data: &SplitData<T>, cfg: &StageConfig, sink: &mut dyn MetricsSink) -> Result<StageOutcome> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::EmptyDataset("warmup training set".into()));
        }
        self.store.set_group_trainable(ParamGroup::Arch, false);
        self.store.set_group_trainable(ParamGroup::Op, true);
        let mut adam = AdamState::new(&self.store);
        let mut sched = ScheduleController::new(StageKind::Warmup, cfg);
        let mut epochs_run = 0;
        let mut final_val = f64::INFINITY;
        for epoch in 0..cfg.max_epochs {
            let mut order_rng = self.seed.stream(StreamRole::Shuffle, &[STAGE_WARMUP, epoch as u64]);
            let order = shuffled_indices(&mut order_rng, data.train.len());
            let mut loss_acc = 0.0;
            let ranges = batch_ranges(order.len(), cfg.minibatch);
            for (step, (lo, hi)) in ranges.iter().enumerate() {
                let mb = make_minibatch(&data.train, &order[*lo..*hi]);
                let mut zrng = self.seed.stream(StreamRole::SampleArch, &[STAGE_WARMUP, epoch as u64, step as u64]);
                let z = self.net.sample_uniform(&mut zrng);
                let mut drng = self.seed.stream(StreamRole::Dropout, &[STAGE_WARMUP, epoch as u64, step as u64]);
                loss_acc += self.train_minibatch(
                    &mb,
                    ArchMode::Fixed { z: &z },
                    Phase::Train,
                    &mut drng,
                    &mut adam,
                    sched.lr(),
                    &cfg.adam,
                )?;
            }
            let train_loss = loss_acc / ranges.len() as f64;
            let val_loss = self.validate_expected(&data.val, cfg.minibatch, STAGE_WARMUP, epoch)?;
            epochs_run = epoch + 1;
            final_val = val_loss;
            sink.record(&MetricsRecord::Epoch {
                stage: StageKind::Warmup,
                epoch,
                train_loss,
                val_loss,
                lr: sched.lr(),
                pi: None,
            });
            if sched.observe(val_loss) == StageDecision::Stop {
                break;
            }
        }
        sink.record(&MetricsRecord::StageEnd {
            stage: StageKind::Warmup,
            epochs: epochs_run,
            best_val: sched.best(),
        });
        Ok(StageOutcome {
            epochs_run,
            best_val: sched.best(),
            final_val,
        })
    }

    /// One alternating pass over the training minibatches: each step first
    /// updates the architecture weights on a cyclically drawn validation
    /// minibatch (operation parameters frozen), then updates the operation
    /// parameters on the training minibatch (architecture weights frozen).
    #[allow(clippy::too_many_arguments)]
    pub fn search_epoch(
        &mut self,
        train: &Dataset<T>,
        val: &Dataset<T>,
        cfg: &StageConfig,
        est: &EstimatorConfig,
        adam: &mut AdamState<T>,
        state: &mut SearchLoopState,
        lr_alpha: f64,
        lr_theta: f64,
    ) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::EmptyDataset("search validation set".into()));
        }
        let epoch = state.epoch as u64;
        let tau = est.temperature.at_epoch(state.epoch);
        let mut order_rng = self.seed.stream(StreamRole::Shuffle, &[STAGE_SEARCH, epoch]);
        let order = shuffled_indices(&mut order_rng, train.len());
        let ranges = batch_ranges(order.len(), cfg.minibatch);
        let val_ranges = batch_ranges(val.len(), cfg.minibatch);
        let mut loss_acc = 0.0;
        for (step, (lo, hi)) in ranges.iter().enumerate() {
            // Step 1: freeze theta, draw a validation minibatch, update alpha.
            let vb = state.val_cursor % val_ranges.len();
            state.val_cursor += 1;
            state.val_batches_used.push(vb);
            let (vlo, vhi) = val_ranges[vb];
            let vidx: Vec<usize> = (vlo..vhi).collect();
            let vmb = make_minibatch(val, &vidx);
            self.store.set_group_trainable(ParamGroup::Op, false);
            self.store.set_group_trainable(ParamGroup::Arch, true);
            let mut grng = self.seed.stream(StreamRole::Gumbel, &[STAGE_SEARCH, epoch, step as u64, 0]);
            match est.kind {
                EstimatorKind::St => {
                    let mut zrng = self.seed.stream(StreamRole::SampleArch, &[STAGE_SEARCH, epoch, step as u64, 0]);
                    let z = self.net.sample_subgraph(&self.store, &mut zrng);
                    self.train_minibatch(&vmb, ArchMode::St { z: &z }, Phase::Eval, &mut grng, adam, lr_alpha, &cfg.adam)?;
                }
                EstimatorKind::Darts => {
                    self.train_minibatch(&vmb, ArchMode::Darts, Phase::Eval, &mut grng, adam, lr_alpha, &cfg.adam)?;
                }
                EstimatorKind::Snas => {
                    self.train_minibatch(&vmb, ArchMode::Snas { tau }, Phase::Eval, &mut grng, adam, lr_alpha, &cfg.adam)?;
                }
            }

            // Step 2: freeze alpha, sample a sub-graph, update theta.
            self.store.set_group_trainable(ParamGroup::Op, true);
            self.store.set_group_trainable(ParamGroup::Arch, false);
            let mb = make_minibatch(train, &order[*lo..*hi]);
            let mut drng = self.seed.stream(StreamRole::Dropout, &[STAGE_SEARCH, epoch, step as u64]);
            let step_loss = match est.kind {
                EstimatorKind::St => {
                    let mut zrng = self.seed.stream(StreamRole::SampleArch, &[STAGE_SEARCH, epoch, step as u64, 1]);
                    let z = self.net.sample_subgraph(&self.store, &mut zrng);
                    self.train_minibatch(&mb, ArchMode::Fixed { z: &z }, Phase::Train, &mut drng, adam, lr_theta, &cfg.adam)?
                }
                EstimatorKind::Darts => {
                    self.train_minibatch(&mb, ArchMode::Darts, Phase::Train, &mut drng, adam, lr_theta, &cfg.adam)?
                }
                EstimatorKind::Snas => {
                    let mut grng2 = self.seed.stream(StreamRole::Gumbel, &[STAGE_SEARCH, epoch, step as u64, 1]);
                    self.train_minibatch(&mb, ArchMode::Snas { tau }, Phase::Train, &mut grng2, adam, lr_theta, &cfg.adam)?
                }
            };
            loss_acc += step_loss;
        }
        state.epoch += 1;
        Ok(loss_acc / ranges.len() as f64)
    }

    /// Stage 2: alternating bi-level search. The optimizer is reset on entry.
    pub fn search(
        &mut self,
        data: &SplitData<T>,
        cfg: &StageConfig,
        est: &EstimatorConfig,
        sink: &mut dyn MetricsSink,
    ) -> Result<StageOutcome> {
        cfg.validate()?;
        est.validate()?;
        if data.train.is_empty() {
            return Err(Error::EmptyDataset("search training set".into()));
        }
        let mut adam = AdamState::new(&self.store);
        debug_assert!(adam.is_zero());
        let mut sched = ScheduleController::new(StageKind::Search, cfg);
        let mut state = SearchLoopState::default();
        let mut epochs_run = 0;
        let mut final_val = f64::INFINITY;
        for epoch in 0..cfg.max_epochs {
            let lr = sched.lr();
            let train_loss = self.search_epoch(&data.train, &data.val, cfg, est, &mut adam, &mut state, lr, lr)?;
            let val_loss = self.validate_expected(&data.val, cfg.minibatch, STAGE_SEARCH, epoch)?;
            epochs_run = epoch + 1;
            final_val = val_loss;
            sink.record(&MetricsRecord::Epoch {
                stage: StageKind::Search,
                epoch,
                train_loss,
                val_loss,
                lr,
                pi: Some(self.net.pi_snapshot(&self.store)),
            });
            if sched.observe(val_loss) == StageDecision::Stop {
                break;
            }
        }
        sink.record(&MetricsRecord::StageEnd {
            stage: StageKind::Search,
            epochs: epochs_run,
            best_val: sched.best(),
        });
        Ok(StageOutcome {
            epochs_run,
            best_val: sched.best(),
            final_val,
        })
    }

    /// Stage 3: train the derived model (every block pruned to one candidate)
    /// from its fresh initialization.
    pub fn retrain(&mut self, data: &SplitData<T>, cfg: &StageConfig, sink: &mut dyn MetricsSink) -> Result<StageOutcome> {
        cfg.validate()?;
        if data.train.is_empty() {
            return Err(Error::EmptyDataset("retrain training set".into()));
        }
        debug_assert!(
            self.net.blocks.iter().all(|b| b.k() == 1),
            "retrain expects a derived (K = 1) topology"
        );
        self.store.set_group_trainable(ParamGroup::Arch, false);
        self.store.set_group_trainable(ParamGroup::Op, true);
        let z = SampledArchitecture {
            selections: vec![0; self.net.blocks.len()],
        };
        let mut adam = AdamState::new(&self.store);
        let mut sched = ScheduleController::new(StageKind::Retrain, cfg);
        let mut epochs_run = 0;
        let mut final_val = f64::INFINITY;
        for epoch in 0..cfg.max_epochs {
            let mut order_rng = self.seed.stream(StreamRole::Shuffle, &[STAGE_RETRAIN, epoch as u64]);
            let order = shuffled_indices(&mut order_rng, data.train.len());
            let ranges = batch_ranges(order.len(), cfg.minibatch);
            let mut loss_acc = 0.0;
            for (step, (lo, hi)) in ranges.iter().enumerate() {
                let mb = make_minibatch(&data.train, &order[*lo..*hi]);
                let mut drng = self.seed.stream(StreamRole::Dropout, &[STAGE_RETRAIN, epoch as u64, step as u64]);
                loss_acc += self.train_minibatch(
                    &mb,
                    ArchMode::Fixed { z: &z },
                    Phase::Train,
                    &mut drng,
                    &mut adam,
                    sched.lr(),
                    &cfg.adam,
                )?;
            }
            let train_loss = loss_acc / ranges.len() as f64;
            let val_loss = self.validate_expected(&data.val, cfg.minibatch, STAGE_RETRAIN, epoch)?;
            epochs_run = epoch + 1;
            final_val = val_loss;
            sink.record(&MetricsRecord::Epoch {
                stage: StageKind::Retrain,
                epoch,
                train_loss,
                val_loss,
                lr: sched.lr(),
                pi: None,
            });
            if sched.observe(val_loss) == StageDecision::Stop {
                break;
            }
        }
        sink.record(&MetricsRecord::StageEnd {
            stage: StageKind::Retrain,
            epochs: epochs_run,
            best_val: sched.best(),
        });
        Ok(StageOutcome {
            epochs_run,
            best_val: sched.best(),
            final_val,
        })
    }

    /// Loss plus task metric on a dataset under the fixed all-zeros selection
    /// (derived models) or a given selection.
    pub fn evaluate(&self, data: &Dataset<T>, minibatch: usize, z: &SampledArchitecture) -> Result<EvalOutcome> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("evaluation set".into()));
        }
        let ranges = batch_ranges(data.len(), minibatch);
        let mut loss_acc = 0.0;
        let (mut correct, mut total) = (0usize, 0usize);
        let (mut edits, mut ref_len) = (0usize, 0usize);
        for (lo, hi) in ranges.iter() {
            let idx: Vec<usize> = (*lo..*hi).collect();
            let mb = make_minibatch(data, &idx);
            let mut tape = Tape::new();
            let mut rng = self.seed.stream(StreamRole::Validation, &[u64::MAX]);
            let x = tape.leaf(mb.features.clone(), &[mb.batch, mb.max_t, mb.feat_dim], false);
            let (logits, _) = self.net.forward(&self.store, &mut tape, x, ArchMode::Fixed { z }, Phase::Eval, &mut rng)?;
            let vocab = *tape.shape(logits).last().unwrap();
            let t_out = tape.shape(logits)[1];
            let logits_vals = tape.value(logits).to_vec();
            match self.loss {
                LossKind::FrameCrossEntropy => {
                    let targets = mb.frame_targets.as_ref().unwrap();
                    let loss_id = loss::cross_entropy(&mut tape, logits, targets)?;
                    loss_acc += tape.scalar_value(loss_id).to_f64();
                    for (row, &t) in targets.iter().enumerate() {
                        if t == u32::MAX {
                            continue;
                        }
                        let frame = &logits_vals[row * vocab..(row + 1) * vocab];
                        let mut best = 0;
                        for v in 1..vocab {
                            if frame[v] > frame[best] {
                                best = v;
                            }
                        }
                        correct += usize::from(best as u32 == t);
                        total += 1;
                    }
                }
                LossKind::Ctc => {
                    let labels = mb.labels.as_ref().unwrap();
                    let stride = self.net.spec.total_stride();
                    let out_lens: Vec<usize> = mb.input_lens.iter().map(|&l| l.div_ceil(stride)).collect();
                    let log_probs = tape.log_softmax(logits)?;
                    let lp_vals = tape.value(log_probs).to_vec();
                    let loss_id = loss::ctc_loss(
                        &mut tape,
                        log_probs,
                        &CtcBatch {
                            labels: labels.clone(),
                            input_lens: out_lens.clone(),
                        },
                    )?;
                    loss_acc += tape.scalar_value(loss_id).to_f64();
                    for (b, label) in labels.iter().enumerate() {
                        let item = &lp_vals[b * t_out * vocab..(b + 1) * t_out * vocab];
                        let hyp = loss::greedy_decode(item, vocab, out_lens[b]);
                        edits += loss::edit_distance(&hyp, label);
                        ref_len += label.len();
                    }
                }
            }
        }
        let loss = loss_acc / ranges.len() as f64;
        Ok(match self.loss {
            LossKind::FrameCrossEntropy => EvalOutcome {
                loss,
                metric_name: "frame_accuracy",
                metric: correct as f64 / total.max(1) as f64,
            },
            LossKind::Ctc => EvalOutcome {
                loss,
                metric_name: "token_error_rate",
                metric: edits as f64 / ref_len.max(1) as f64,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ParamId;

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let pid = store.add("p", vec![3], vec![1.0, -2.0, 0.5], ParamGroup::Op);
        let before = store.values(pid).to_vec();
        let mut state = AdamState::new(&store);
        let grads = {
            let mut tape = Tape::<f64>::new();
            let p = store.bind(&mut tape, pid);
            let d = tape.detach(p).unwrap();
            let s = tape.sum_all(d).unwrap();
            tape.backward(s).unwrap().grads
        };
        assert_eq!(grads.get(pid).unwrap(), &[0.0, 0.0, 0.0]);
        adam_step(&mut store, &grads, &mut state, 1e-3, &AdamParams::default());
        assert_eq!(store.values(pid), &before[..]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        let pid = store.add("p", vec![2], vec![0.0, 0.0], ParamGroup::Op);
        let mut state = AdamState::new(&store);
        let grads = {
            let mut tape = Tape::<f64>::new();
            let p = store.bind(&mut tape, pid);
            let v = tape.leaf(vec![3.0, -0.2], &[2], false);
            let prod = tape.mul(p, v).unwrap();
            let s = tape.sum_all(prod).unwrap();
            tape.backward(s).unwrap().grads
        };
        let lr = 1e-3;
        adam_step(&mut store, &grads, &mut state, lr, &AdamParams::default());
        let p = store.values(pid);
        assert!((p[0] + lr).abs() < 1e-6, "step for +grad: {}", p[0]);
        assert!((p[1] - lr).abs() < 1e-6, "step for -grad: {}", p[1]);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic_bowl() {
        // Reference: an independent scalar transcription of the update rule.
        let (b1, b2, eps, lr) = (0.9f64, 0.999, 1e-8, 0.05);
        let mut ref_x: f64 = 3.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);

        let mut store = ParamStore::<f64>::new();
        let pid = store.add("x", vec![1], vec![3.0], ParamGroup::Op);
        let mut state = AdamState::new(&store);
        let hp = AdamParams::default();

        for t in 1..=100 {
            // grad of 0.5 x^2 is x
            let g_ref = ref_x;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            ref_x -= lr * m_hat / (v_hat.sqrt() + eps);

            let grads = {
                let mut tape = Tape::<f64>::new();
                let p = store.bind(&mut tape, pid);
                let sq = tape.mul(p, p).unwrap();
                let half = tape.scale(sq, 0.5).unwrap();
                let s = tape.sum_all(half).unwrap();
                tape.backward(s).unwrap().grads
            };
            adam_step(&mut store, &grads, &mut state, lr, &hp);
        }
        let diff = (store.values(pid)[0] - ref_x).abs();
        assert!(diff <= 1e-12, "divergence from scalar reference: {}", diff);
    }

    #[test]
    fn warmup_schedule_stops_after_exactly_patience_stale_epochs() {
        let cfg = StageConfig::warmup_default();
        let mut s = ScheduleController::new(StageKind::Warmup, &cfg);
        assert_eq!(s.observe(1.0), StageDecision::Improved);
        assert_eq!(s.observe(1.1), StageDecision::Stale);
        assert_eq!(s.observe(1.2), StageDecision::Stale);
        assert_eq!(s.observe(1.05), StageDecision::Stop);
        assert!((s.lr() - 1e-3).abs() < 1e-15, "warmup lr stays fixed");
    }

    #[test]
    fn search_schedule_decays_once_then_stops_below_1e4() {
        let cfg = StageConfig::search_default();
        let mut s = ScheduleController::new(StageKind::Search, &cfg);
        assert_eq!(s.observe(1.0), StageDecision::Improved);
        for _ in 0..2 {
            assert_eq!(s.observe(2.0), StageDecision::Stale);
        }
        assert_eq!(s.observe(2.0), StageDecision::Decayed);
        assert!((s.lr() - 1e-4).abs() < 1e-12);
        for _ in 0..2 {
            assert_eq!(s.observe(2.0), StageDecision::Stale);
        }
        assert_eq!(s.observe(2.0), StageDecision::Stop);
    }

    #[test]
    fn retrain_schedule_walks_1e3_to_1e5_with_patience_one() {
        let cfg = StageConfig::retrain_default();
        let mut s = ScheduleController::new(StageKind::Retrain, &cfg);
        assert_eq!(s.observe(1.0), StageDecision::Improved);
        assert_eq!(s.observe(1.5), StageDecision::Decayed); // -> 1e-4
        assert!((s.lr() - 1e-4).abs() < 1e-12);
        assert_eq!(s.observe(1.5), StageDecision::Decayed); // -> 1e-5
        assert!((s.lr() - 1e-5).abs() < 1e-12);
        assert_eq!(s.observe(1.5), StageDecision::Stop); // below the floor
    }

    #[test]
    fn an_improvement_resets_the_patience_counter() {
        let cfg = StageConfig::search_default();
        let mut s = ScheduleController::new(StageKind::Search, &cfg);
        s.observe(1.0);
        s.observe(1.5);
        s.observe(1.5);
        assert_eq!(s.observe(0.9), StageDecision::Improved);
        assert_eq!(s.observe(1.5), StageDecision::Stale);
        assert!((s.lr() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn stage_config_validation() {
        let mut cfg = StageConfig::search_default();
        cfg.decay = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = StageConfig::search_default();
        cfg.patience = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = StageConfig::search_default();
        cfg.lr_floor = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metrics_records_roundtrip_as_json_lines() {
        let rec = MetricsRecord::Epoch {
            stage: StageKind::Search,
            epoch: 3,
            train_loss: 0.5,
            val_loss: 0.7,
            lr: 1e-3,
            pi: Some(vec![vec![0.25; 4]]),
        };
        let line = serde_json::to_string(&rec).unwrap();
        let back: MetricsRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(rec, back);
        let _ = ParamId(0);
    }
}

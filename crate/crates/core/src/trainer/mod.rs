//! Two-phase transfer learning: a head-only phase, then whole-network
//! fine-tuning with per-group learning rates, evaluated fold by fold.

mod lr_find;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{oversample_indices, Augmenter, DataError, FoldPlan, SampleSource};
use crate::eval::{cross_validate_report, EvalError, FoldResult, MetricsReport, DEFAULT_THRESHOLD};
use crate::resnet::{FreezePolicy, Mode, Network, ResnetError, GROUP_COUNT};
use crate::tensor::{Element, OptimizerState, Tensor, TensorError, DEFAULT_MOMENTUM};

pub use lr_find::{lr_find, LrCurve, LrFindConfig, QuadraticSurrogate, SweepModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{phase}: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("no training samples")]
    EmptyData,
    #[error("batch {0} is empty")]
    EmptyBatch(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] ResnetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Learning rate(s) for a phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSpec {
    /// The same rate for every group.
    Single(f64),
    /// Geometric spread from `lo` (first group) to `hi` (head).
    Range { lo: f64, hi: f64 },
    /// Resolved by a learning-rate sweep before training.
    Find,
}

impl LrSpec {
    pub fn group_rates(&self, groups: usize) -> Result<Vec<f64>> {
        match *self {
            LrSpec::Single(lr) if lr >= 0.0 && lr.is_finite() => Ok(vec![lr; groups]),
            LrSpec::Single(lr) => Err(TrainError::InvalidConfig(format!("learning rate {lr} is invalid"))),
            LrSpec::Range { lo, hi } => discriminative_lrs(lo, hi, groups),
            LrSpec::Find => Err(TrainError::InvalidConfig(
                "learning rate must be resolved by a sweep before training".into(),
            )),
        }
    }
}

/// Geometric interpolation `lo·(hi/lo)^(g/(G−1))` over `groups` groups;
/// one group gets `hi`.
pub fn discriminative_lrs(lo: f64, hi: f64, groups: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "learning-rate range needs 0 < lo ≤ hi, got [{lo}, {hi}]"
        )));
    }
    if groups == 0 {
        return Err(TrainError::InvalidConfig(
            "at least one learning-rate group is needed".into(),
        ));
    }
    if groups == 1 {
        return Ok(vec![hi]);
    }
    let last = (groups - 1) as f64;
    Ok((0..groups)
        .map(|g| match g {
            0 => lo,
            g if g + 1 == groups => hi,
            g => lo * (hi / lo).powf(g as f64 / last),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze: FreezePolicy,
    pub lr: LrSpec,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub oversample: bool,
    pub augment: bool,
}

impl PhaseConfig {
    /// Head-only training: 8 epochs of batch 64.
    pub fn head(lr: LrSpec, seed: u64) -> Self {
        PhaseConfig {
            epochs: 8,
            batch_size: 64,
            freeze: FreezePolicy::HeadOnly,
            lr,
            seed,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 0.0,
            oversample: false,
            augment: false,
        }
    }

    /// Whole-network fine-tuning: 3 epochs with rates spread over [1e-6, 1e-4].
    pub fn finetune(seed: u64) -> Self {
        PhaseConfig {
            epochs: 3,
            freeze: FreezePolicy::All,
            lr: LrSpec::Range { lo: 1e-6, hi: 1e-4 },
            ..PhaseConfig::head(LrSpec::Find, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(
                "momentum must lie in [0, 1) and weight decay must be nonnegative".into(),
            ));
        }
        if let LrSpec::Range { lo, hi } = self.lr {
            discriminative_lrs(lo, hi, 1)?;
        }
        Ok(())
    }
}

/// Mixes a base seed with indices into an independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Stacks samples into an N×C×H×W batch and collects their targets.
/// Augmentation draws from a stream derived from `(seed, position)` so the
/// batch does not depend on decoding order.
pub fn make_batch<T: Element>(
    source: &dyn SampleSource,
    ids: &[usize],
    augment: Option<(&Augmenter, u64)>,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if ids.is_empty() {
        return Err(TrainError::EmptyBatch(0));
    }
    let images = crate::parallel::try_map_range(ids.len(), |k| -> Result<Tensor<f32>> {
        let t = source.load(ids[k])?;
        Ok(match augment {
            Some((aug, seed)) => aug.apply(&t, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[k as u64]))),
            None => t,
        })
    })?;
    let sample_shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in &images {
        if img.shape() != sample_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "make_batch",
                left: sample_shape.clone(),
                right: img.shape().to_vec(),
            }
            .into());
        }
        data.extend(img.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    let mut shape = vec![ids.len()];
    shape.extend(sample_shape);
    let targets = ids.iter().map(|&i| source.target(i)).collect();
    Ok((Tensor::new(shape, data)?, targets))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub fold: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

/// Renders records as CSV lines with a header.
pub fn log_to_csv(records: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from("epoch,phase,fold,mean_loss,sensitivity,specificity,accuracy,auc\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{},{},{}",
            r.epoch,
            r.phase,
            r.fold,
            r.mean_loss,
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.accuracy),
            opt(r.auc)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOutcome {
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Where a phase reads its data from.
#[derive(Clone, Copy)]
pub struct PhaseData<'a> {
    pub source: &'a dyn SampleSource,
    pub train: &'a [usize],
    /// Scored after every epoch when present.
    pub validation: Option<&'a [usize]>,
    pub phase: &'a str,
    pub fold: usize,
}

/// Trains for `config.epochs` full epochs over `data.train`.
///
/// Applies the freeze policy first, rebinding `state` to the trainable set.
/// Each epoch visits the training ids in a permutation seeded by
/// `(config.seed, epoch)`; the last partial batch is kept.
pub fn train_phase<T: Element>(
    net: &mut Network<T>,
    data: PhaseData<'_>,
    config: &PhaseConfig,
    state: &mut OptimizerState<T>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    net.set_trainable(config.freeze);
    state.rebind(net.params());
    let rates = config.lr.group_rates(GROUP_COUNT)?;
    let train: Vec<usize> = if config.oversample {
        oversample_indices(data.train, &data.source.labels())?.indices
    } else {
        data.train.to_vec()
    };
    let augmenter = Augmenter::default();
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[epoch as u64],
        )));
        let mut loss_sum = 0.0;
        for (batch, ids) in order.chunks(config.batch_size).enumerate() {
            let augment = config
                .augment
                .then(|| (&augmenter, derive_seed(config.seed, &[epoch as u64, batch as u64, 1])));
            let (x, targets) = make_batch::<T>(data.source, ids, augment)?;
            let loss =
                train_step(net, state, &x, &targets, &rates).map_err(|e| with_position(e, data.phase, epoch, batch))?;
            loss_sum += loss * ids.len() as f64;
            steps += 1;
        }
        let mean_loss = loss_sum / order.len() as f64;
        let mut record = EpochRecord {
            phase: data.phase.to_string(),
            fold: data.fold,
            epoch: epoch + 1,
            mean_loss,
            sensitivity: None,
            specificity: None,
            accuracy: None,
            auc: None,
        };
        if let Some(val) = data.validation {
            let scored = evaluate(net, data.source, val, config.batch_size)?;
            if let Ok(r) = scored.fold_result(DEFAULT_THRESHOLD) {
                record.sensitivity = Some(r.metrics.sensitivity);
                record.specificity = Some(r.metrics.specificity);
                record.accuracy = Some(r.metrics.accuracy);
                record.auc = r.auc;
            }
        }
        log::info!(
            "{} fold {} epoch {}/{}: loss {:.4}{}",
            data.phase,
            data.fold,
            epoch + 1,
            config.epochs,
            mean_loss,
            record.auc.map(|a| format!(", auc {a:.4}")).unwrap_or_default()
        );
        log.push(record);
    }
    Ok(PhaseOutcome { log, steps })
}

fn with_position(e: TrainError, phase: &str, epoch: usize, batch: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss { loss, .. } => TrainError::NonFiniteLoss {
            phase: phase.to_string(),
            epoch: epoch + 1,
            batch,
            loss,
        },
        other => other,
    }
}

/// Forward, backward and one optimizer step on a single batch. Returns the
/// mean cross-entropy before the update.
pub fn train_step<T: Element>(
    net: &mut Network<T>,
    state: &mut OptimizerState<T>,
    x: &Tensor<T>,
    targets: &[usize],
    group_rates: &[f64],
) -> Result<f64> {
    let pass = net.forward(x, Mode::Train)?;
    let (loss, _) = pass.logits.softmax_cross_entropy(targets)?;
    let value = loss.value().data()[0].as_f64();
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            phase: String::new(),
            epoch: 0,
            batch: 0,
            loss: value,
        });
    }
    let grads = loss.backward()?;
    net.finish_pass(pass, Some(&grads))?;
    state.step(net.params_mut(), group_rates)?;
    Ok(value)
}

/// Positive-class scores for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Scored {
    pub fn fold_result(&self, threshold: f64) -> Result<FoldResult> {
        Ok(FoldResult::from_scores(&self.scores, &self.labels, threshold)?)
    }
}

/// Eval-mode forward over `ids` in batches; the score is the softmax
/// probability of class 1.
pub fn evaluate<T: Element>(
    net: &Network<T>,
    source: &dyn SampleSource,
    ids: &[usize],
    batch_size: usize,
) -> Result<Scored> {
    if ids.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut scores = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, _) = make_batch::<T>(source, chunk, None)?;
        let probs = net.predict_proba(&x)?;
        let k = probs.shape()[1];
        scores.extend(probs.data().chunks(k).map(|row| row[1].as_f64().clamp(0.0, 1.0)));
    }
    Ok(Scored {
        ids: ids.to_vec(),
        scores,
        labels: ids.iter().map(|&i| source.target(i) == 1).collect(),
    })
}

/// Sweep adapter: each step trains one batch at the same rate for every group.
pub struct NetworkSweep<'a, T: Element> {
    pub net: &'a mut Network<T>,
    pub state: &'a mut OptimizerState<T>,
    pub source: &'a dyn SampleSource,
    order: Vec<usize>,
    batch_size: usize,
}

impl<'a, T: Element> NetworkSweep<'a, T> {
    /// Applies `freeze` and shuffles `ids` once with `seed`; batches cycle
    /// through that order.
    pub fn new(
        net: &'a mut Network<T>,
        state: &'a mut OptimizerState<T>,
        source: &'a dyn SampleSource,
        ids: &[usize],
        batch_size: usize,
        freeze: FreezePolicy,
        seed: u64,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(TrainError::EmptyData);
        }
        if batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        net.set_trainable(freeze);
        state.rebind(net.params());
        let mut order = ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(NetworkSweep {
            net,
            state,
            source,
            order,
            batch_size,
        })
    }
}

impl<T: Element> SweepModel for NetworkSweep<'_, T> {
    type Snapshot = (Network<T>, OptimizerState<T>);

    fn snapshot(&self) -> Self::Snapshot {
        (self.net.clone(), self.state.clone())
    }

    fn restore(&mut self, (net, state): Self::Snapshot) {
        *self.net = net;
        *self.state = state;
    }

    fn step(&mut self, iteration: usize, lr: f64) -> Result<f64> {
        let n = self.order.len();
        let start = (iteration * self.batch_size) % n;
        let ids: Vec<usize> = (0..self.batch_size.min(n))
            .map(|k| self.order[(start + k) % n])
            .collect();
        let (x, targets) = make_batch::<T>(self.source, &ids, None)?;
        match train_step(self.net, self.state, &x, &targets, &[lr; GROUP_COUNT]) {
            Err(TrainError::NonFiniteLoss { loss, .. }) => Ok(loss),
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub phase1: PhaseConfig,
    /// Zero epochs skips fine-tuning; phase-2 results then repeat phase 1.
    pub phase2: PhaseConfig,
    pub lr_find: LrFindConfig,
    pub threshold: f64,
}

impl ProtocolConfig {
    pub fn new(seed: u64) -> Self {
        ProtocolConfig {
            phase1: PhaseConfig::head(LrSpec::Find, seed),
            phase2: PhaseConfig::finetune(seed),
            lr_find: LrFindConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Everything produced by [`fit_protocol`].
#[derive(Clone, Debug)]
pub struct ProtocolOutcome<T: Element> {
    pub phase1: MetricsReport,
    pub phase2: MetricsReport,
    pub log: Vec<EpochRecord>,
    /// Validation AUC after each fine-tuning epoch, per fold.
    pub auc_trajectory: Vec<Vec<f64>>,
    /// Phase-1 rate actually used (after any sweep).
    pub phase1_lr: LrSpec,
    pub lr_curve: Option<LrCurve>,
    /// Network of the last fold.
    pub final_network: Network<T>,
}

impl<T: Element> ProtocolOutcome<T> {
    /// Fold-averaged AUC per fine-tuning epoch; epochs missing an AUC in any
    /// fold are skipped.
    pub fn mean_auc_trajectory(&self) -> Vec<f64> {
        let epochs = self.auc_trajectory.iter().map(Vec::len).min().unwrap_or(0);
        (0..epochs)
            .map(|e| self.auc_trajectory.iter().map(|f| f[e]).sum::<f64>() / self.auc_trajectory.len() as f64)
            .collect()
    }
}

/// Runs both phases on every fold of `plan`, starting each fold from a copy
/// of `initial`. `on_fold` sees each fold's final network.
pub fn fit_protocol<T: Element>(
    initial: &Network<T>,
    source: &dyn SampleSource,
    plan: &FoldPlan,
    config: &ProtocolConfig,
    mut on_fold: impl FnMut(usize, &Network<T>) -> Result<()>,
) -> Result<ProtocolOutcome<T>> {
    if source.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if plan.sample_count() != source.len() {
        return Err(TrainError::InvalidConfig(format!(
            "fold plan covers {} samples but the data set has {}",
            plan.sample_count(),
            source.len()
        )));
    }
    let mut phase1 = config.phase1;
    let mut lr_curve = None;
    if phase1.lr == LrSpec::Find {
        let mut net = initial.clone();
        let mut state = OptimizerState::new(net.params(), phase1.momentum, phase1.weight_decay);
        let train = plan.training(0);
        let mut sweep = NetworkSweep::new(
            &mut net,
            &mut state,
            source,
            &train,
            phase1.batch_size,
            phase1.freeze,
            derive_seed(phase1.seed, &[u64::MAX]),
        )?;
        let curve = lr_find(&mut sweep, &config.lr_find)?;
        log::info!("learning-rate sweep suggests {:e}", curve.suggested);
        phase1.lr = LrSpec::Single(curve.suggested);
        lr_curve = Some(curve);
    }

    let mut results1 = Vec::with_capacity(plan.k);
    let mut results2 = Vec::with_capacity(plan.k);
    let mut log = Vec::new();
    let mut auc_trajectory = Vec::with_capacity(plan.k);
    let mut final_network = None;
    for fold in 0..plan.k {
        let train = plan.training(fold);
        let val = plan.validation(fold);
        let mut net = initial.clone();

        let mut state = OptimizerState::new(net.params(), phase1.momentum, phase1.weight_decay);
        let p1 = PhaseConfig {
            seed: derive_seed(phase1.seed, &[fold as u64, 1]),
            ..phase1
        };
        let data = PhaseData {
            source,
            train: &train,
            validation: Some(val),
            phase: "phase1",
            fold: fold + 1,
        };
        log.extend(train_phase(&mut net, data, &p1, &mut state)?.log);
        let r1 = evaluate(&net, source, val, phase1.batch_size)?.fold_result(config.threshold)?;
        results1.push(r1);

        if config.phase2.epochs == 0 {
            results2.push(r1);
            auc_trajectory.push(Vec::new());
        } else {
            let p2 = PhaseConfig {
                seed: derive_seed(config.phase2.seed, &[fold as u64, 2]),
                ..config.phase2
            };
            let mut state = OptimizerState::new(net.params(), p2.momentum, p2.weight_decay);
            let data = PhaseData {
                phase: "phase2",
                ..data
            };
            let outcome = train_phase(&mut net, data, &p2, &mut state)?;
            auc_trajectory.push(outcome.log.iter().filter_map(|r| r.auc).collect());
            log.extend(outcome.log);
            results2.push(evaluate(&net, source, val, p2.batch_size)?.fold_result(config.threshold)?);
        }
        on_fold(fold, &net)?;
        final_network = Some(net);
    }
    Ok(ProtocolOutcome {
        phase1: cross_validate_report(&results1, "phase1")?,
        phase2: cross_validate_report(&results2, "phase2")?,
        log,
        auc_trajectory,
        phase1_lr: phase1.lr,
        lr_curve,
        final_network: final_network.expect("k ≥ 2 folds"),
    })
}

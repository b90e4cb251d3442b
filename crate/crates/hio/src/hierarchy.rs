//! Hierarchical model composition and training.
//!
//! A composed persuasion model runs three sub-networks over the same fused
//! feature vector: a passion classifier, a credibility classifier, and an
//! intermediate persuasion trunk (a pretrained persuasion network with its
//! last layer popped). Their outputs are concatenated and fed to a fusion
//! head. Training backpropagates the persuasion loss end-to-end, and after
//! each update an *imaginary forward pass* re-evaluates each intermediate
//! network's own subtask loss on held-out data; updates that push that loss
//! above `epsilon * reference` are reverted atomically for that network.
//!
//! Setting the acceptable error rate to infinity disables the gate and
//! recovers plain end-to-end training, which is how the stacking variant is
//! realized. A separate frozen mode keeps the intermediates bit-unchanged
//! for classical stacking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::N_CLASSES;
use crate::nn::{cross_entropy_loss, Activation, Gradients, Mlp, NnError, Snapshot, TrainConfig};

#[derive(Error, Debug)]
pub enum HierarchyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid composition: {0}")]
    InvalidComposition(String),
    #[error("gate data is empty")]
    EmptyGateData,
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HierarchyError>;

/// Deterministic seed derivation (splitmix64 over base xor tag).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The two gated intermediate subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntermediateTask {
    Passion,
    Credibility,
}

/// Acceptable Error Rate: the gate tolerance. Infinity accepts every update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcceptableErrorRate {
    Finite(f64),
    Infinite,
}

impl AcceptableErrorRate {
    pub fn accepts(&self, candidate_loss: f64, reference_loss: f64) -> bool {
        match *self {
            AcceptableErrorRate::Infinite => true,
            AcceptableErrorRate::Finite(eps) => candidate_loss <= eps * reference_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AcceptableErrorRate::Finite(e) = *self {
            if !(e >= 0.0) || !e.is_finite() {
                return Err(HierarchyError::Config(
                    "acceptable error rate must be nonnegative or infinite".into(),
                ));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for AcceptableErrorRate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AcceptableErrorRate::Infinite => write!(f, "inf"),
            AcceptableErrorRate::Finite(e) => write!(f, "{e}"),
        }
    }
}

impl std::str::FromStr for AcceptableErrorRate {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Ok(AcceptableErrorRate::Infinite),
            other => other
                .parse::<f64>()
                .map_err(|e| format!("bad acceptable error rate {other:?}: {e}"))
                .and_then(|v| {
                    if v.is_infinite() {
                        Ok(AcceptableErrorRate::Infinite)
                    } else if v >= 0.0 {
                        Ok(AcceptableErrorRate::Finite(v))
                    } else {
                        Err(format!("acceptable error rate must be nonnegative, got {v}"))
                    }
                }),
        }
    }
}

// JSON has no infinity literal, so serialize as a number or the string "inf".
impl Serialize for AcceptableErrorRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            AcceptableErrorRate::Finite(e) => s.serialize_f64(e),
            AcceptableErrorRate::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for AcceptableErrorRate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> serde::de::Visitor<'de> for V {
            type Value = AcceptableErrorRate;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                write!(f, "a nonnegative number or \"inf\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Self::Value, E> {
                Ok(AcceptableErrorRate::Finite(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Self::Value, E> {
                Ok(AcceptableErrorRate::Finite(v as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Self::Value, E> {
                Ok(AcceptableErrorRate::Finite(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Self::Value, E> {
                v.parse().map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// How the gate's reference loss evolves across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ReferenceMode {
    /// Fixed at the pretraining loss for the whole run.
    PretrainedFixed,
    /// Reference follows the last accepted candidate loss.
    #[default]
    LastAccepted,
    /// Reference is the minimum over all accepted candidate losses.
    RunningBest,
}

/// Which data the imaginary forward pass evaluates the subtask loss on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GateData {
    #[default]
    Validation,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub epsilon: AcceptableErrorRate,
    pub reference_mode: ReferenceMode,
    pub gate_interval_steps: u32,
    pub gate_data: GateData,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            epsilon: AcceptableErrorRate::Finite(1.0),
            reference_mode: ReferenceMode::LastAccepted,
            gate_interval_steps: 1,
            gate_data: GateData::Validation,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        if self.gate_interval_steps == 0 {
            return Err(HierarchyError::Config(
                "gate_interval_steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One accept/revert audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub step: u64,
    pub network: IntermediateTask,
    pub reference_loss: f64,
    pub candidate_loss: f64,
    pub epsilon: AcceptableErrorRate,
    pub accepted: bool,
}

/// Samples with per-sample fused features and all three trait labels.
#[derive(Debug, Clone, Default)]
pub struct TraitSet {
    pub xs: Vec<Vec<f64>>,
    pub passion: Vec<usize>,
    pub credibility: Vec<usize>,
    pub persuasion: Vec<usize>,
}

impl TraitSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn labels(&self, task: IntermediateTask) -> &[usize] {
        match task {
            IntermediateTask::Passion => &self.passion,
            IntermediateTask::Credibility => &self.credibility,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> TraitSet {
        TraitSet {
            xs: indices.iter().map(|&i| self.xs[i].clone()).collect(),
            passion: indices.iter().map(|&i| self.passion[i]).collect(),
            credibility: indices.iter().map(|&i| self.credibility[i]).collect(),
            persuasion: indices.iter().map(|&i| self.persuasion[i]).collect(),
        }
    }
}

/// The composed persuasion model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierModel {
    pub passion_net: Mlp,
    pub credibility_net: Mlp,
    pub trunk: Mlp,
    pub head: Mlp,
}

/// Parameter gradients for every component of a [`HierModel`].
pub struct HierGradients {
    pub passion: Gradients,
    pub credibility: Gradients,
    pub trunk: Gradients,
    pub head: Gradients,
}

impl HierModel {
    pub fn input_dim(&self) -> usize {
        self.passion_net.input_dim()
    }

    pub fn concat_dim(&self) -> usize {
        self.passion_net.output_dim() + self.credibility_net.output_dim() + self.trunk.output_dim()
    }

    /// Persuasion class probabilities for one fused feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.passion_net.forward(x)?;
        let c = self.credibility_net.forward(x)?;
        let t = self.trunk.forward(x)?;
        let concat: Vec<f64> = p.into_iter().chain(c).chain(t).collect();
        Ok(self.head.forward(&concat)?)
    }

    pub fn loss_on(&self, xs: &[Vec<f64>], persuasion: &[usize]) -> Result<f64> {
        let mut probs = Vec::with_capacity(xs.len());
        for x in xs {
            probs.push(self.forward(x)?);
        }
        Ok(cross_entropy_loss(&probs, persuasion)?)
    }

    pub fn accuracy_on(&self, xs: &[Vec<f64>], persuasion: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch.into());
        }
        let mut hits = 0usize;
        for (x, &y) in xs.iter().zip(persuasion) {
            if crate::nn::argmax(&self.forward(x)?) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / xs.len() as f64)
    }

    /// Exact analytic gradients of the summed persuasion cross-entropy with
    /// respect to every parameter of every component.
    pub fn backward(&self, xs: &[Vec<f64>], persuasion: &[usize]) -> Result<HierGradients> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch.into());
        }
        let mut grads = HierGradients {
            passion: Gradients::zeros_like(&self.passion_net),
            credibility: Gradients::zeros_like(&self.credibility_net),
            trunk: Gradients::zeros_like(&self.trunk),
            head: Gradients::zeros_like(&self.head),
        };
        let p_dim = self.passion_net.output_dim();
        let c_dim = self.credibility_net.output_dim();
        for (x, &y) in xs.iter().zip(persuasion) {
            let p_trace = self.passion_net.forward_trace(x)?;
            let c_trace = self.credibility_net.forward_trace(x)?;
            let t_trace = self.trunk.forward_trace(x)?;
            let concat: Vec<f64> = p_trace
                .output()
                .iter()
                .chain(c_trace.output())
                .chain(t_trace.output())
                .copied()
                .collect();
            let h_trace = self.head.forward_trace(&concat)?;
            let probs = h_trace.output();
            if y >= probs.len() {
                return Err(NnError::LabelOutOfRange {
                    label: y,
                    classes: probs.len(),
                }
                .into());
            }
            let mut d_out = vec![0.0; probs.len()];
            d_out[y] = -1.0 / probs[y].max(crate::nn::LOG_CLAMP);
            let d_concat = self
                .head
                .backward_from_output(&h_trace, &d_out, &mut grads.head)?;
            self.passion_net
                .backward_from_output(&p_trace, &d_concat[..p_dim], &mut grads.passion)?;
            self.credibility_net.backward_from_output(
                &c_trace,
                &d_concat[p_dim..p_dim + c_dim],
                &mut grads.credibility,
            )?;
            self.trunk.backward_from_output(
                &t_trace,
                &d_concat[p_dim + c_dim..],
                &mut grads.trunk,
            )?;
        }
        Ok(grads)
    }

    /// Applies one SGD step to every component. With `freeze_intermediates`
    /// the passion and credibility networks are left untouched.
    pub fn sgd_step(
        &mut self,
        grads: &HierGradients,
        learning_rate: f64,
        freeze_intermediates: bool,
    ) -> Result<()> {
        if !freeze_intermediates {
            self.passion_net.sgd_step(&grads.passion, learning_rate)?;
            self.credibility_net
                .sgd_step(&grads.credibility, learning_rate)?;
        }
        self.trunk.sgd_step(&grads.trunk, learning_rate)?;
        self.head.sgd_step(&grads.head, learning_rate)?;
        Ok(())
    }
}

/// One plain end-to-end SGD step on the composed model: backprop the
/// persuasion loss through head, trunk, passion, and credibility networks and
/// update everything.
pub fn end_to_end_step(
    model: &mut HierModel,
    xs: &[Vec<f64>],
    persuasion: &[usize],
    learning_rate: f64,
    freeze_intermediates: bool,
) -> Result<()> {
    let grads = model.backward(xs, persuasion)?;
    model.sgd_step(&grads, learning_rate, freeze_intermediates)
}

/// Builds the composed model: pops the last layer of the pretrained
/// intermediate persuasion network and attaches a freshly initialized fusion
/// head over the concatenated sub-network outputs. Pretrained parameters of
/// the passion, credibility, and trunk networks are carried over unchanged.
pub fn compose(
    passion_net: Mlp,
    credibility_net: Mlp,
    intermediate_net: &Mlp,
    head_sizes: &[usize],
    seed: u64,
) -> Result<HierModel> {
    let trunk = intermediate_net.pop_last_layer()?;
    if head_sizes.len() < 3 {
        return Err(HierarchyError::InvalidComposition(format!(
            "fusion head needs 2 or more layers, got sizes {head_sizes:?}"
        )));
    }
    let concat =
        passion_net.output_dim() + credibility_net.output_dim() + trunk.output_dim();
    if head_sizes[0] != concat {
        return Err(HierarchyError::InvalidComposition(format!(
            "head input width {} does not match concatenated width {concat}",
            head_sizes[0]
        )));
    }
    let head = Mlp::init(head_sizes, Activation::ReLU, Activation::Softmax, seed)?;
    Ok(HierModel {
        passion_net,
        credibility_net,
        trunk,
        head,
    })
}

/// Mutable per-run trainer bookkeeping: step counter, gate reference losses,
/// and the decision log.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub step: u64,
    pub passion_reference: f64,
    pub credibility_reference: f64,
    pub decisions: Vec<GateDecision>,
    window_start: Option<(Snapshot, Snapshot)>,
}

impl TrainerState {
    pub fn new(passion_reference: f64, credibility_reference: f64) -> TrainerState {
        TrainerState {
            step: 0,
            passion_reference,
            credibility_reference,
            decisions: Vec::new(),
            window_start: None,
        }
    }

    fn reference(&self, task: IntermediateTask) -> f64 {
        match task {
            IntermediateTask::Passion => self.passion_reference,
            IntermediateTask::Credibility => self.credibility_reference,
        }
    }

    fn set_reference(&mut self, task: IntermediateTask, value: f64) {
        match task {
            IntermediateTask::Passion => self.passion_reference = value,
            IntermediateTask::Credibility => self.credibility_reference = value,
        }
    }
}

/// One gated training step.
///
/// 1. At the start of a gate window, snapshot the passion and credibility
///    networks.
/// 2. Backpropagate the persuasion loss end-to-end and update all parameters.
/// 3. At the end of the window, run the imaginary forward pass: evaluate each
///    intermediate network's own subtask loss on the gate data.
/// 4. Per network independently, keep the new weights if the candidate loss
///    is within `epsilon * reference`, else restore the window snapshot.
/// 5. Update the reference per the configured mode and log the decision.
///
/// The imaginary forward pass consumes no RNG state and mutates nothing, so
/// with an infinite acceptable error rate the parameter trajectory is
/// bit-identical to [`end_to_end_step`].
pub fn hio_step(
    model: &mut HierModel,
    batch_xs: &[Vec<f64>],
    batch_persuasion: &[usize],
    gate_set: &TraitSet,
    gate_cfg: &GateConfig,
    train_cfg: &TrainConfig,
    state: &mut TrainerState,
) -> Result<Vec<GateDecision>> {
    if gate_set.is_empty() {
        return Err(HierarchyError::EmptyGateData);
    }
    let interval = gate_cfg.gate_interval_steps as u64;
    if state.step % interval == 0 {
        state.window_start = Some((
            model.passion_net.snapshot(state.step),
            model.credibility_net.snapshot(state.step),
        ));
    }

    end_to_end_step(model, batch_xs, batch_persuasion, train_cfg.learning_rate, false)?;

    let mut decisions = Vec::new();
    if (state.step + 1) % interval == 0 {
        let (p_snap, c_snap) = state
            .window_start
            .take()
            .expect("window snapshot taken at window start");
        for (task, snap) in [
            (IntermediateTask::Passion, p_snap),
            (IntermediateTask::Credibility, c_snap),
        ] {
            let net = match task {
                IntermediateTask::Passion => &model.passion_net,
                IntermediateTask::Credibility => &model.credibility_net,
            };
            let candidate = net.loss_on(&gate_set.xs, gate_set.labels(task))?;
            let reference = state.reference(task);
            let accepted = gate_cfg.epsilon.accepts(candidate, reference);
            if accepted {
                match gate_cfg.reference_mode {
                    ReferenceMode::PretrainedFixed => {}
                    ReferenceMode::LastAccepted => state.set_reference(task, candidate),
                    ReferenceMode::RunningBest => {
                        state.set_reference(task, reference.min(candidate))
                    }
                }
            } else {
                match task {
                    IntermediateTask::Passion => model.passion_net.restore(&snap)?,
                    IntermediateTask::Credibility => model.credibility_net.restore(&snap)?,
                }
            }
            decisions.push(GateDecision {
                step: state.step,
                network: task,
                reference_loss: reference,
                candidate_loss: candidate,
                epsilon: gate_cfg.epsilon,
                accepted,
            });
        }
    }
    state.step += 1;
    state.decisions.extend(decisions.iter().cloned());
    Ok(decisions)
}

/// Sub-network layer layouts for the composed model; hidden widths only, the
/// input width comes from the data and every classifier ends in 3 classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierArchitecture {
    pub intermediate_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
}

impl Default for HierArchitecture {
    fn default() -> Self {
        // Passion/credibility: 5 layers of 5 ReLU units before the 3-class
        // head; intermediate persuasion net one layer shallower so the
        // popped trunk exposes a 5-wide representation; fusion head of 3
        // layers with 5 hidden units each.
        HierArchitecture {
            intermediate_hidden: vec![5, 5, 5, 5],
            trunk_hidden: vec![5, 5, 5],
            head_hidden: vec![5, 5],
        }
    }
}

impl HierArchitecture {
    pub fn subtask_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.intermediate_hidden);
        s.push(N_CLASSES);
        s
    }

    pub fn intermediate_persuasion_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = vec![input_dim];
        s.extend(&self.trunk_hidden);
        s.push(N_CLASSES);
        s
    }

    pub fn head_sizes(&self, concat_dim: usize) -> Vec<usize> {
        let mut s = vec![concat_dim];
        s.extend(&self.head_hidden);
        s.push(N_CLASSES);
        s
    }
}

/// Trains one network on one subtask by summed-cross-entropy SGD, keeping the
/// best validation-loss checkpoint at every checkpoint interval. Returns the
/// validation loss of the returned (best) parameters, later usable as the
/// fixed gate reference.
pub fn pretrain_subtask(
    net: &mut Mlp,
    train_xs: &[Vec<f64>],
    train_labels: &[usize],
    val_xs: &[Vec<f64>],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    if train_xs.is_empty() || val_xs.is_empty() {
        return Err(NnError::EmptyBatch.into());
    }
    let mut best_loss = net.loss_on(val_xs, val_labels)?;
    let mut best = net.snapshot(0);
    for epoch in 0..cfg.epochs {
        for batch in batch_indices(train_xs.len(), cfg.batch_size, cfg.rng_seed, epoch) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train_xs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let grads = net.backward(&xs, &ys)?;
            net.sgd_step(&grads, cfg.learning_rate)?;
        }
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.checkpoint_interval_epochs == 0 || last {
            let loss = net.loss_on(val_xs, val_labels)?;
            if loss < best_loss {
                best_loss = loss;
                best = net.snapshot((epoch + 1) as u64);
            }
        }
    }
    net.restore(&best)?;
    Ok(best_loss)
}

/// Deterministic batch schedule. Full-batch mode consumes no RNG state.
fn batch_indices(n: usize, batch_size: Option<usize>, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    match batch_size {
        None => vec![(0..n).collect()],
        Some(b) => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
            idx.shuffle(&mut rng);
            idx.chunks(b).map(|c| c.to_vec()).collect()
        }
    }
}

/// Everything a full hierarchical training run needs.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub arch: HierArchitecture,
    pub gate: GateConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    /// Classical stacking: the intermediates receive no gradient in phase 3.
    pub frozen_intermediates: bool,
    pub seed: u64,
}

/// Outcome of a hierarchical training run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: HierModel,
    pub decisions: Vec<GateDecision>,
    /// Summed persuasion training loss after each epoch.
    pub train_loss_per_epoch: Vec<f64>,
    /// (epoch, validation persuasion accuracy) at each checkpoint.
    pub val_accuracy_checkpoints: Vec<(u32, f64)>,
    pub best_epoch: u32,
    pub pretrain_passion_val_loss: f64,
    pub pretrain_credibility_val_loss: f64,
}

/// The full gated training algorithm: pretrain the subtask networks and the
/// intermediate persuasion network, compose, then train end-to-end with the
/// per-step gated update. Early stopping keeps the checkpoint with the best
/// validation persuasion accuracy.
///
/// `pretrain_set` may be a reduced subset of the training folds (the
/// semi-supervised regime); phase 3 always trains on `train_set`.
pub fn train_hio(
    pretrain_set: &TraitSet,
    train_set: &TraitSet,
    val_set: &TraitSet,
    opts: &TrainOptions,
) -> Result<FitResult> {
    opts.gate.validate()?;
    opts.train.validate()?;
    opts.pretrain.validate()?;
    if train_set.is_empty() || val_set.is_empty() || pretrain_set.is_empty() {
        return Err(NnError::EmptyBatch.into());
    }
    let d = train_set.xs[0].len();

    // Phase 1: subtask networks.
    let mut passion = Mlp::init(
        &opts.arch.subtask_sizes(d),
        Activation::ReLU,
        Activation::Softmax,
        derive_seed(opts.seed, 1),
    )?;
    let passion_val_loss = pretrain_subtask(
        &mut passion,
        &pretrain_set.xs,
        &pretrain_set.passion,
        &val_set.xs,
        &val_set.passion,
        &opts.pretrain,
    )?;
    let mut credibility = Mlp::init(
        &opts.arch.subtask_sizes(d),
        Activation::ReLU,
        Activation::Softmax,
        derive_seed(opts.seed, 2),
    )?;
    let credibility_val_loss = pretrain_subtask(
        &mut credibility,
        &pretrain_set.xs,
        &pretrain_set.credibility,
        &val_set.xs,
        &val_set.credibility,
        &opts.pretrain,
    )?;

    // Phase 2: intermediate persuasion network, trained on the full training
    // set, last layer popped during composition.
    let mut intermediate = Mlp::init(
        &opts.arch.intermediate_persuasion_sizes(d),
        Activation::ReLU,
        Activation::Softmax,
        derive_seed(opts.seed, 3),
    )?;
    pretrain_subtask(
        &mut intermediate,
        &train_set.xs,
        &train_set.persuasion,
        &val_set.xs,
        &val_set.persuasion,
        &opts.pretrain,
    )?;

    // Phase 3: compose and train end-to-end with the gate.
    let concat = 2 * N_CLASSES + opts.arch.trunk_hidden.last().copied().unwrap_or(d);
    let mut model = compose(
        passion,
        credibility,
        &intermediate,
        &opts.arch.head_sizes(concat),
        derive_seed(opts.seed, 4),
    )?;

    let gate_set = match opts.gate.gate_data {
        GateData::Validation => val_set,
        GateData::Training => train_set,
    };
    let mut state = TrainerState::new(
        model.passion_net.loss_on(&gate_set.xs, &gate_set.passion)?,
        model
            .credibility_net
            .loss_on(&gate_set.xs, &gate_set.credibility)?,
    );

    let mut train_loss_per_epoch = Vec::with_capacity(opts.train.epochs as usize);
    let mut val_accuracy_checkpoints = Vec::new();
    let mut best_acc = model.accuracy_on(&val_set.xs, &val_set.persuasion)?;
    let mut best_epoch = 0u32;
    let mut best_model = model.clone();

    for epoch in 0..opts.train.epochs {
        for batch in batch_indices(
            train_set.len(),
            opts.train.batch_size,
            opts.train.rng_seed,
            epoch,
        ) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train_set.xs[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.persuasion[i]).collect();
            if opts.frozen_intermediates {
                end_to_end_step(&mut model, &xs, &ys, opts.train.learning_rate, true)?;
            } else {
                hio_step(
                    &mut model,
                    &xs,
                    &ys,
                    gate_set,
                    &opts.gate,
                    &opts.train,
                    &mut state,
                )?;
            }
        }
        train_loss_per_epoch.push(model.loss_on(&train_set.xs, &train_set.persuasion)?);
        let last = epoch + 1 == opts.train.epochs;
        if (epoch + 1) % opts.train.checkpoint_interval_epochs == 0 || last {
            let acc = model.accuracy_on(&val_set.xs, &val_set.persuasion)?;
            val_accuracy_checkpoints.push((epoch + 1, acc));
            if acc > best_acc {
                best_acc = acc;
                best_epoch = epoch + 1;
                best_model = model.clone();
            }
        }
    }

    Ok(FitResult {
        model: best_model,
        decisions: state.decisions,
        train_loss_per_epoch,
        val_accuracy_checkpoints,
        best_epoch,
        pretrain_passion_val_loss: passion_val_loss,
        pretrain_credibility_val_loss: credibility_val_loss,
    })
}

/// Stacking: the same three-phase pipeline with the gate disabled
/// (acceptable error rate infinity), or with the intermediates frozen
/// entirely in the classical variant.
pub fn train_stacking(
    pretrain_set: &TraitSet,
    train_set: &TraitSet,
    val_set: &TraitSet,
    opts: &TrainOptions,
    frozen_intermediates: bool,
) -> Result<FitResult> {
    let opts = TrainOptions {
        gate: GateConfig {
            epsilon: AcceptableErrorRate::Infinite,
            ..opts.gate.clone()
        },
        frozen_intermediates,
        ..opts.clone()
    };
    train_hio(pretrain_set, train_set, val_set, &opts)
}

/// Per-modality classifiers fused by a final classifier over their
/// concatenated class outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LateFusionModel {
    pub modality_nets: Vec<Mlp>,
    pub fusion: Mlp,
    pub modality_dims: Vec<usize>,
}

impl LateFusionModel {
    /// Splits a fused feature vector back into per-modality slices, runs
    /// each modality classifier, and fuses the class outputs.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut fused = Vec::with_capacity(self.modality_nets.len() * N_CLASSES);
        let mut offset = 0;
        for (net, &dim) in self.modality_nets.iter().zip(&self.modality_dims) {
            if offset + dim > x.len() {
                return Err(NnError::ShapeMismatch {
                    context: "late fusion input",
                    expected: self.modality_dims.iter().sum(),
                    actual: x.len(),
                }
                .into());
            }
            fused.extend(net.forward(&x[offset..offset + dim])?);
            offset += dim;
        }
        Ok(self.fusion.forward(&fused)?)
    }

    pub fn accuracy_on(&self, xs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Err(NnError::EmptyBatch.into());
        }
        let mut hits = 0usize;
        for (x, &y) in xs.iter().zip(labels) {
            if crate::nn::argmax(&self.forward(x)?) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / xs.len() as f64)
    }
}

/// Builds the late-fusion model: one classifier per modality, each emitting 3
/// class values, fused by a classifier whose input width is 3 x modalities.
pub fn build_late_fusion(modality_dims: &[usize], seed: u64) -> Result<LateFusionModel> {
    if modality_dims.is_empty() {
        return Err(HierarchyError::Config("need at least one modality".into()));
    }
    let mut modality_nets = Vec::with_capacity(modality_dims.len());
    for (i, &dim) in modality_dims.iter().enumerate() {
        modality_nets.push(Mlp::init(
            &[dim, 5, 5, N_CLASSES],
            Activation::ReLU,
            Activation::Softmax,
            derive_seed(seed, 10 + i as u64),
        )?);
    }
    let fusion = Mlp::init(
        &[N_CLASSES * modality_dims.len(), 5, N_CLASSES],
        Activation::ReLU,
        Activation::Softmax,
        derive_seed(seed, 9),
    )?;
    Ok(LateFusionModel {
        modality_nets,
        fusion,
        modality_dims: modality_dims.to_vec(),
    })
}

/// Trains the late-fusion baseline: each modality classifier is trained on
/// the persuasion objective over its own slice, then frozen; the fusion
/// classifier is trained on the concatenated class outputs with early
/// stopping on validation accuracy.
pub fn train_late_fusion(
    model: &mut LateFusionModel,
    train_xs: &[Vec<f64>],
    train_labels: &[usize],
    val_xs: &[Vec<f64>],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let slices = |xs: &[Vec<f64>], offset: usize, dim: usize| -> Vec<Vec<f64>> {
        xs.iter().map(|x| x[offset..offset + dim].to_vec()).collect()
    };
    let mut offset = 0;
    for (net, &dim) in model.modality_nets.iter_mut().zip(&model.modality_dims) {
        pretrain_subtask(
            net,
            &slices(train_xs, offset, dim),
            train_labels,
            &slices(val_xs, offset, dim),
            val_labels,
            cfg,
        )?;
        offset += dim;
    }

    let fused = |model: &LateFusionModel, xs: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut f = Vec::with_capacity(model.modality_nets.len() * N_CLASSES);
            let mut o = 0;
            for (net, &dim) in model.modality_nets.iter().zip(&model.modality_dims) {
                f.extend(net.forward(&x[o..o + dim])?);
                o += dim;
            }
            out.push(f);
        }
        Ok(out)
    };
    let train_fused = fused(model, train_xs)?;
    let val_fused = fused(model, val_xs)?;
    // Early stop the fusion net on validation accuracy.
    let mut best_acc = model.fusion.accuracy_on(&val_fused, val_labels)?;
    let mut best = model.fusion.snapshot(0);
    for epoch in 0..cfg.epochs {
        for batch in batch_indices(train_fused.len(), cfg.batch_size, cfg.rng_seed, epoch) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| train_fused[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let grads = model.fusion.backward(&xs, &ys)?;
            model.fusion.sgd_step(&grads, cfg.learning_rate)?;
        }
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.checkpoint_interval_epochs == 0 || last {
            let acc = model.fusion.accuracy_on(&val_fused, val_labels)?;
            if acc > best_acc {
                best_acc = acc;
                best = model.fusion.snapshot((epoch + 1) as u64);
            }
        }
    }
    model.fusion.restore(&best)?;
    Ok(())
}

//! End-to-end acoustic dialect classifier: a stack of valid 1-d
//! convolutions, global average pooling over time, fully connected
//! ReLU layers and a softmax output.

use std::collections::{BTreeMap, HashSet, VecDeque};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureKind, FeatureMatrix};
use crate::augment::random_segment;
use crate::error::{Error, Result};
use crate::manifest::{ManifestEntry, Split};
use crate::nn::{
    global_average_pool, global_average_pool_backward, relu_backward, relu_inplace, sgd_step,
    softmax, softmax_cross_entropy, Conv1d, Dense, ParamView, Parameterized, SgdConfig,
};
use crate::scalar::Real;
use crate::{seeded_rng, Rng64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub width: usize,
    pub stride: usize,
}

/// Layer sizes of an [`E2eModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct E2eTopology {
    pub input_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// 1 for full width; otherwise every filter and hidden width was divided by this.
    pub scale_divisor: usize,
}

const FULL_CONVS: [(usize, usize, usize); 4] = [(500, 5, 1), (500, 7, 2), (500, 1, 1), (3000, 1, 1)];
const FULL_HIDDEN: [usize; 2] = [1500, 600];

impl E2eTopology {
    /// 500-500-500-3000 filters of widths 5-7-1-1 and strides 1-2-1-1,
    /// then 1500-600 dense layers.
    pub fn full(kind: FeatureKind, num_classes: usize) -> Result<Self> {
        Self::scaled(kind, num_classes, 1)
    }

    /// The full topology with every filter count and hidden width divided by `divisor`.
    pub fn scaled(kind: FeatureKind, num_classes: usize, divisor: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 dialects, got {num_classes}"
            )));
        }
        if divisor == 0 {
            return Err(Error::InvalidArgument("scale divisor must be positive".into()));
        }
        let shrink = |n: usize| (n / divisor).max(1);
        Ok(Self {
            input_dim: kind.dim(),
            convs: FULL_CONVS
                .iter()
                .map(|&(out, width, stride)| ConvSpec {
                    out_channels: shrink(out),
                    width,
                    stride,
                })
                .collect(),
            hidden: FULL_HIDDEN.iter().map(|&n| shrink(n)).collect(),
            num_classes,
            scale_divisor: divisor,
        })
    }

    /// Receptive field of the convolution stack in input frames.
    pub fn min_input_frames(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for c in &self.convs {
            field += (c.width - 1) * jump;
            jump *= c.stride;
        }
        field
    }

    pub fn pooled_dim(&self) -> usize {
        self.convs.last().map_or(self.input_dim, |c| c.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct E2eModel<T> {
    topology: E2eTopology,
    convs: Vec<Conv1d<T>>,
    /// Hidden layers followed by the linear output layer.
    dense: Vec<Dense<T>>,
}

/// Per-example activations kept for the backward pass.
struct ConvTrace<T> {
    /// Post-ReLU output of every convolution.
    outputs: Vec<Array2<T>>,
}

impl<T: Real> E2eModel<T> {
    pub fn new(topology: E2eTopology, rng: &mut Rng64) -> Result<Self> {
        if topology.convs.is_empty() {
            return Err(Error::InvalidArgument("topology needs at least one convolution".into()));
        }
        let mut convs = Vec::with_capacity(topology.convs.len());
        let mut channels = topology.input_dim;
        for (i, c) in topology.convs.iter().enumerate() {
            convs.push(Conv1d::new(format!("conv{}", i + 1), channels, c.out_channels, c.width, c.stride, rng));
            channels = c.out_channels;
        }
        let mut dense = Vec::with_capacity(topology.hidden.len() + 1);
        for (i, &h) in topology.hidden.iter().enumerate() {
            dense.push(Dense::new_relu(format!("fc{}", i + 1), channels, h, rng));
            channels = h;
        }
        dense.push(Dense::new_linear("output", channels, topology.num_classes, rng));
        Ok(Self { topology, convs, dense })
    }

    /// All-zero parameters with the given topology.
    pub fn zeros(topology: E2eTopology) -> Result<Self> {
        let mut m = Self::new(topology, &mut seeded_rng(0))?;
        m = m.zeros_like();
        Ok(m)
    }

    pub fn topology(&self) -> &E2eTopology {
        &self.topology
    }

    pub fn convs(&self) -> &[Conv1d<T>] {
        &self.convs
    }

    pub fn dense_layers(&self) -> &[Dense<T>] {
        &self.dense
    }

    pub fn output_layer_mut(&mut self) -> &mut Dense<T> {
        self.dense.last_mut().expect("output layer")
    }

    pub fn num_classes(&self) -> usize {
        self.topology.num_classes
    }

    fn check_input(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.topology.input_dim {
            return Err(Error::Shape(format!(
                "model expects {}-dimensional frames, got {}",
                self.topology.input_dim,
                x.ncols()
            )));
        }
        let min = self.topology.min_input_frames();
        if x.nrows() < min {
            return Err(Error::InputTooShort { got: x.nrows(), min });
        }
        Ok(())
    }

    fn conv_forward(&self, x: ArrayView2<'_, T>) -> Result<ConvTrace<T>> {
        let mut outputs: Vec<Array2<T>> = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if i == 0 { x } else { outputs[i - 1].view() };
            let mut y = conv.forward(input)?;
            relu_inplace(&mut y);
            outputs.push(y);
        }
        Ok(ConvTrace { outputs })
    }

    /// Pooled utterance-level vector.
    pub fn pooled(&self, x: ArrayView2<'_, T>) -> Result<Array1<T>> {
        self.check_input(&x)?;
        let trace = self.conv_forward(x)?;
        global_average_pool(trace.outputs.last().expect("conv output").view())
    }

    /// Batch of pooled vectors → list of dense activations (post-ReLU for
    /// hidden layers, raw logits last).
    fn dense_forward(&self, pooled: ArrayView2<'_, T>) -> Result<Vec<Array2<T>>> {
        let mut acts: Vec<Array2<T>> = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            let input = if i == 0 { pooled } else { acts[i - 1].view() };
            let mut y = layer.forward(input)?;
            if i < last {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        Ok(acts)
    }

    pub fn logits(&self, x: ArrayView2<'_, T>) -> Result<Array1<T>> {
        let pooled = self.pooled(x)?.insert_axis(Axis(0));
        let acts = self.dense_forward(pooled.view())?;
        Ok(acts.last().expect("logits").row(0).to_owned())
    }

    /// Softmax dialect probabilities for a full-length utterance.
    pub fn score(&self, features: &FeatureMatrix<T>) -> Result<Array1<T>> {
        Ok(softmax(self.logits(features.frames().view())?.view()))
    }

    /// Log-probabilities (log-softmax) for a full-length utterance.
    pub fn log_scores(&self, features: &FeatureMatrix<T>) -> Result<Array1<T>> {
        let logits = self.logits(features.frames().view())?;
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        Ok(logits.mapv(|v| v - lse))
    }

    /// Mean cross-entropy over `batch` and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &[(ArrayView2<'_, T>, usize)]) -> Result<(T, Self)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let b = batch.len();
        let pooled_dim = self.topology.pooled_dim();
        let mut traces = Vec::with_capacity(b);
        let mut pooled = Array2::zeros((b, pooled_dim));
        for (i, (x, label)) in batch.iter().enumerate() {
            if *label >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: *label,
                    classes: self.num_classes(),
                });
            }
            self.check_input(x)?;
            let trace = self.conv_forward(x.view())?;
            pooled
                .row_mut(i)
                .assign(&global_average_pool(trace.outputs.last().expect("conv output").view())?);
            traces.push(trace);
        }
        let acts = self.dense_forward(pooled.view())?;
        let logits = acts.last().expect("logits");

        let inv_b = T::one() / T::from_usize_lossy(b);
        let mut loss = T::zero();
        let mut grad_act = Array2::zeros(logits.raw_dim());
        for (i, (_, label)) in batch.iter().enumerate() {
            let (l, p) = softmax_cross_entropy(logits.row(i), *label)?;
            loss += l;
            let mut g = p;
            g[*label] -= T::one();
            grad_act.row_mut(i).assign(&(g * inv_b));
        }
        loss *= inv_b;

        let mut grads = self.zeros_like();
        for i in (0..self.dense.len()).rev() {
            if i < self.dense.len() - 1 {
                relu_backward(acts[i].view(), &mut grad_act);
            }
            let input = if i == 0 { pooled.view() } else { acts[i - 1].view() };
            grad_act = self.dense[i].backward(input, grad_act.view(), &mut grads.dense[i]);
        }

        for ((x, _), (trace, g_pooled)) in batch.iter().zip(traces.iter().zip(grad_act.axis_iter(Axis(0)))) {
            let last = trace.outputs.last().expect("conv output");
            let mut g = global_average_pool_backward(g_pooled, last.nrows());
            for j in (0..self.convs.len()).rev() {
                relu_backward(trace.outputs[j].view(), &mut g);
                let input = if j == 0 { x.view() } else { trace.outputs[j - 1].view() };
                g = self.convs[j].backward(input, g.view(), &mut grads.convs[j])?;
            }
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, batch: &[(ArrayView2<'_, T>, usize)]) -> Result<T> {
        let mut total = T::zero();
        for (x, label) in batch {
            let (l, _) = softmax_cross_entropy(self.logits(x.view())?.view(), *label)?;
            total += l;
        }
        Ok(total / T::from_usize_lossy(batch.len()))
    }
}

impl<T: Real> Parameterized<T> for E2eModel<T> {
    fn params(&self) -> Vec<ParamView<'_, T>> {
        self.convs
            .iter()
            .flat_map(|c| c.params())
            .chain(self.dense.iter().flat_map(|d| d.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.params_mut());
        }
        for d in &mut self.dense {
            out.extend(d.params_mut());
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            topology: self.topology.clone(),
            convs: self.convs.iter().map(|c| c.zeros_like()).collect(),
            dense: self.dense.iter().map(|d| d.zeros_like()).collect(),
        }
    }
}

/// A normalized feature matrix with its dialect index.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub label: usize,
    pub features: FeatureMatrix<T>,
}

/// Split manifest rows into training and validation rows.
///
/// Validation takes, per dialect, the last `fraction` (at least one) of
/// the original DEV rows in utterance-id order. Every other TRAIN or DEV
/// row is training data, except augmented copies of validation rows.
pub fn validation_split<'a>(
    entries: &'a [ManifestEntry],
    fraction: f64,
) -> (Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>) {
    let mut dev_by_label: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        if e.split == Split::Dev && e.provenance.is_original() {
            dev_by_label.entry(e.label.as_str()).or_default().push(e);
        }
    }
    let mut held_out: HashSet<&str> = HashSet::new();
    let mut validation = Vec::new();
    for rows in dev_by_label.values_mut() {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = ((rows.len() as f64 * fraction).round() as usize).clamp(1, rows.len());
        for e in &rows[rows.len() - n..] {
            held_out.insert(e.id.as_str());
        }
    }
    let mut train = Vec::new();
    for e in entries {
        if !matches!(e.split, Split::Train | Split::Dev) {
            continue;
        }
        if held_out.contains(e.id.as_str()) && e.provenance.is_original() {
            validation.push(e);
        } else if !held_out.contains(e.source_id()) {
            train.push(e);
        }
    }
    validation.sort_by(|a, b| a.id.cmp(&b.id));
    (train, validation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Best validation accuracy.
    Maximum,
    /// First point where the windowed mini-batch loss fell under the threshold.
    Converged,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Maximum => "maximum",
            Selection::Converged => "converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eTrainConfig {
    pub feature_kind: FeatureKind,
    pub random_segment: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub convergence_threshold: f64,
    pub convergence_window: usize,
    /// Stop once validation accuracy reaches this value.
    pub stop_at_validation_accuracy: Option<f64>,
    /// 1 = full width; larger values shrink every layer by that factor.
    pub scale_divisor: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for E2eTrainConfig {
    fn default() -> Self {
        Self {
            feature_kind: FeatureKind::Fbank,
            random_segment: true,
            batch_size: 32,
            max_epochs: 30,
            validation_fraction: 0.1,
            convergence_threshold: 1e-5,
            convergence_window: 100,
            stop_at_validation_accuracy: None,
            scale_divisor: 1,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl E2eTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.convergence_window == 0 {
            return Err(Error::Config("batch size, epochs and convergence window must be positive".into()));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::Config("convergence threshold must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must be in (0, 1)".into()));
        }
        if self.scale_divisor == 0 {
            return Err(Error::Config("scale divisor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: u64,
    pub mean_loss: f64,
    pub validation_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// `(epoch, batch counter)` where the convergence criterion first held.
    pub converged_at: Option<(usize, u64)>,
    pub diverged_at: Option<(usize, u64)>,
}

impl TrainingLog {
    /// Tab-separated, fully deterministic rendering.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# seed\t{}\n", self.seed);
        match self.converged_at {
            Some((e, b)) => s.push_str(&format!("# converged\tepoch={e}\tbatch={b}\n")),
            None => s.push_str("# converged\tnone (max epochs reached)\n"),
        }
        if let Some((e, b)) = self.diverged_at {
            s.push_str(&format!("# diverged\tepoch={e}\tbatch={b}\n"));
        }
        s.push_str("epoch\tbatches\tmean_loss\tvalidation_accuracy\tlearning_rate\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{:.12e}\t{:.6}\t{:e}\n",
                r.epoch, r.batches, r.mean_loss, r.validation_accuracy, r.learning_rate
            ));
        }
        s
    }
}

/// A selected model with the bookkeeping that produced it.
#[derive(Debug, Clone)]
pub struct Snapshot<T> {
    pub model: E2eModel<T>,
    pub selection: Selection,
    pub epoch: usize,
    pub batch_counter: u64,
    pub validation_accuracy: f64,
    /// Mean cross-entropy on the validation set; breaks accuracy ties.
    pub validation_loss: f64,
    /// False for a CONVERGED snapshot that fell back to the last model.
    pub criterion_met: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub maximum: Snapshot<T>,
    pub converged: Snapshot<T>,
    pub log: TrainingLog,
}

pub fn accuracy_on<T: Real>(model: &E2eModel<T>, examples: &[Example<T>]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in examples {
        let s = model.score(&ex.features)?;
        if argmax(s.view()) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Accuracy and mean cross-entropy over full-length utterances.
pub fn validation_metrics<T: Real>(model: &E2eModel<T>, examples: &[Example<T>]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut correct, mut loss) = (0usize, 0.0);
    for ex in examples {
        let lp = model.log_scores(&ex.features)?;
        if argmax(lp.view()) == ex.label {
            correct += 1;
        }
        loss -= lp[ex.label].as_f64();
    }
    let n = examples.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn snapshot<T: Real>(
    model: &E2eModel<T>,
    selection: Selection,
    epoch: usize,
    batch_counter: u64,
    validation: &[Example<T>],
    criterion_met: bool,
) -> Result<Snapshot<T>> {
    let mut m = model.clone();
    m.round_to_storage();
    let (validation_accuracy, validation_loss) = validation_metrics(&m, validation)?;
    Ok(Snapshot {
        model: m,
        selection,
        epoch,
        batch_counter,
        validation_accuracy,
        validation_loss,
        criterion_met,
    })
}

/// Train a classifier with shuffled mini-batches, tracking MAXIMUM and
/// CONVERGED snapshots. Snapshots are rounded to checkpoint precision.
pub fn train<T: Real>(
    train_set: &[Example<T>],
    validation: &[Example<T>],
    num_classes: usize,
    cfg: &E2eTrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus("no training examples".into()));
    }
    for c in 0..num_classes {
        if !train_set.iter().any(|e| e.label == c) {
            return Err(Error::EmptyDialect(format!("class {c}")));
        }
    }
    let mut rng = seeded_rng(cfg.seed);
    let topology = E2eTopology::scaled(cfg.feature_kind, num_classes, cfg.scale_divisor)?;
    let min_frames = topology.min_input_frames();
    for e in train_set.iter().chain(validation) {
        if e.features.kind() != cfg.feature_kind {
            return Err(Error::Shape(format!(
                "utterance `{}` has {} features, run expects {}",
                e.id,
                e.features.kind(),
                cfg.feature_kind
            )));
        }
        if e.features.num_frames() < min_frames {
            return Err(Error::InputTooShort {
                got: e.features.num_frames(),
                min: min_frames,
            });
        }
    }
    let mut model = E2eModel::<T>::new(topology, &mut rng)?;

    let mut log = TrainingLog {
        seed: cfg.seed,
        epochs: Vec::new(),
        converged_at: None,
        diverged_at: None,
    };
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.convergence_window);
    let mut counter: u64 = 0;
    let mut maximum: Option<Snapshot<T>> = None;
    let mut converged: Option<Snapshot<T>> = None;
    let mut last_good = snapshot(&model, Selection::Maximum, 0, 0, validation, true)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let consider_max = |maximum: &mut Option<Snapshot<T>>, s: &Snapshot<T>| {
        let better = maximum.as_ref().is_none_or(|m| {
            s.validation_accuracy > m.validation_accuracy
                || (s.validation_accuracy == m.validation_accuracy && s.validation_loss < m.validation_loss)
        });
        if better {
            let mut s = s.clone();
            s.selection = Selection::Maximum;
            *maximum = Some(s);
        }
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let segments: Vec<FeatureMatrix<T>> = chunk
                .iter()
                .map(|&i| {
                    let f = &train_set[i].features;
                    if cfg.random_segment {
                        random_segment(f, &mut rng)
                    } else {
                        f.clone()
                    }
                })
                .collect();
            let batch: Vec<(ArrayView2<'_, T>, usize)> = segments
                .iter()
                .zip(chunk)
                .map(|(f, &i)| (f.frames().view(), train_set[i].label))
                .collect();
            let (loss, grads) = model.loss_and_gradient(&batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                log.diverged_at = Some((epoch, counter));
                break 'epochs;
            }
            if let Err(e) = sgd_step(&mut model, &grads, &cfg.sgd, counter) {
                if matches!(e, Error::NonFiniteGradient(_)) {
                    log.diverged_at = Some((epoch, counter));
                    break 'epochs;
                }
                return Err(e);
            }
            counter += 1;
            epoch_loss += loss;
            epoch_batches += 1;

            if window.len() == cfg.convergence_window {
                window.pop_front();
            }
            window.push_back(loss);
            if converged.is_none()
                && window.len() == cfg.convergence_window
                && window.iter().sum::<f64>() / (window.len() as f64) < cfg.convergence_threshold
            {
                let s = snapshot(&model, Selection::Converged, epoch, counter, validation, true)?;
                consider_max(&mut maximum, &s);
                log.converged_at = Some((epoch, counter));
                converged = Some(s);
            }
        }
        let s = snapshot(&model, Selection::Maximum, epoch, counter, validation, true)?;
        log.epochs.push(EpochRecord {
            epoch,
            batches: counter,
            mean_loss: epoch_loss / epoch_batches.max(1) as f64,
            validation_accuracy: s.validation_accuracy,
            learning_rate: cfg.sgd.effective_lr(counter),
        });
        consider_max(&mut maximum, &s);
        last_good = s;
        if converged.is_some() {
            break;
        }
        if let Some(target) = cfg.stop_at_validation_accuracy {
            if last_good.validation_accuracy >= target {
                break;
            }
        }
    }

    let converged = match converged {
        Some(c) => c,
        None => {
            let mut s = last_good.clone();
            s.selection = Selection::Converged;
            s.criterion_met = false;
            s
        }
    };
    let maximum = maximum.unwrap_or(last_good);
    Ok(TrainOutcome {
        maximum,
        converged,
        log,
    })
}

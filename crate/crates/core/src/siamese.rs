//! Siamese language-embedding network over n-gram count vectors.
//!
//! One stack of ReLU layers is applied to both members of a pair (a
//! dialect representative vector and an utterance vector). Training pushes
//! the cosine of the two embeddings toward +1 for same-dialect pairs and
//! toward -1 for different-dialect pairs under a squared-error loss.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Split;
use crate::nn::{cosine, cosine_backward, he_uniform, sgd_step, Dense, ParamView, Parameterized, SgdConfig};
use crate::scalar::Real;
use crate::vsm::{RepresentativeVector, SparseVector};
use crate::{seeded_rng, Rng64};

/// Sparse real-valued input: `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInput<T> {
    dim: usize,
    entries: Vec<(usize, T)>,
}

impl<T: Real> SparseInput<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, T)] {
        &self.entries
    }
}

impl<T: Real> From<&SparseVector> for SparseInput<T> {
    fn from(v: &SparseVector) -> Self {
        Self {
            dim: v.dim(),
            entries: v.entries().iter().map(|&(i, c)| (i, T::lit(c as f64))).collect(),
        }
    }
}

impl<T: Real> From<&Array1<T>> for SparseInput<T> {
    fn from(v: &Array1<T>) -> Self {
        Self {
            dim: v.len(),
            entries: v
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != T::zero())
                .map(|(i, &x)| (i, x))
                .collect(),
        }
    }
}

impl<T: Real> From<&RepresentativeVector<T>> for SparseInput<T> {
    fn from(r: &RepresentativeVector<T>) -> Self {
        Self::from(&r.mean)
    }
}

/// First layer stored input-major (`in × out`) so a sparse input touches
/// only the rows of its non-zero indices.
#[derive(Debug, Clone, PartialEq)]
struct SparseLinear<T> {
    weight: Array2<T>,
    bias: Array1<T>,
}

impl<T: Real> SparseLinear<T> {
    fn forward(&self, x: &SparseInput<T>) -> Array1<T> {
        let mut z = self.bias.clone();
        for &(i, v) in &x.entries {
            z.scaled_add(v, &self.weight.row(i));
        }
        z
    }

    fn backward(&self, x: &SparseInput<T>, grad_z: ArrayView1<'_, T>, grad: &mut SparseLinear<T>) {
        for &(i, v) in &x.entries {
            grad.weight.row_mut(i).scaled_add(v, &grad_z);
        }
        grad.bias += &grad_z;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiameseTopology {
    pub input_dim: usize,
    /// Widths of every layer; the last is the embedding size.
    pub layers: Vec<usize>,
}

impl SiameseTopology {
    /// 1500-600-200.
    pub fn full(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: vec![1500, 600, 200],
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layers.last().expect("at least one layer")
    }
}

/// The shared branch. Both members of a pair run through this one set of
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel<T> {
    topology: SiameseTopology,
    first: SparseLinear<T>,
    rest: Vec<Dense<T>>,
}

/// Activations of a stack of inputs run through the branch together.
struct BranchTrace<T> {
    /// Post-ReLU output of every layer, one row per input; the last entry
    /// holds the embeddings.
    acts: Vec<Array2<T>>,
}

/// Similarity of a pair plus both embeddings.
#[derive(Debug, Clone)]
pub struct PairOutput<T> {
    pub rep_embedding: Array1<T>,
    pub utt_embedding: Array1<T>,
    pub similarity: T,
}

fn relu2<T: Real>(mut v: Array2<T>) -> Array2<T> {
    v.mapv_inplace(|x| if x > T::zero() { x } else { T::zero() });
    v
}

impl<T: Real> SiameseModel<T> {
    pub fn new(topology: SiameseTopology, rng: &mut Rng64) -> Result<Self> {
        if topology.input_dim == 0 || topology.layers.is_empty() || topology.layers.contains(&0) {
            return Err(Error::InvalidArgument("Siamese topology needs positive widths".into()));
        }
        let d = topology.input_dim;
        let h1 = topology.layers[0];
        let mut weight = Array2::zeros((d, h1));
        weight.mapv_inplace(|_: T| he_uniform(rng, d));
        let first = SparseLinear {
            weight,
            bias: Array1::zeros(h1),
        };
        let rest = topology
            .layers
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new_relu(format!("fc{}", i + 2), w[0], w[1], rng))
            .collect();
        Ok(Self { topology, first, rest })
    }

    /// All-zero parameters with the given topology.
    pub fn zeros(topology: SiameseTopology) -> Result<Self> {
        Ok(Self::new(topology, &mut seeded_rng(0))?.zeros_like())
    }

    pub fn topology(&self) -> &SiameseTopology {
        &self.topology
    }

    pub fn embedding_dim(&self) -> usize {
        self.topology.embedding_dim()
    }

    fn check(&self, x: &SparseInput<T>) -> Result<()> {
        if x.dim != self.topology.input_dim {
            return Err(Error::Shape(format!(
                "input dimension {} does not match model dimension {}",
                x.dim, self.topology.input_dim
            )));
        }
        Ok(())
    }

    fn branch(&self, xs: &[&SparseInput<T>]) -> BranchTrace<T> {
        let mut z = Array2::zeros((xs.len(), self.first.bias.len()));
        for (mut row, x) in z.axis_iter_mut(Axis(0)).zip(xs) {
            row.assign(&self.first.forward(x));
        }
        let mut acts = Vec::with_capacity(self.rest.len() + 1);
        acts.push(relu2(z));
        for layer in &self.rest {
            let prev = acts.last().expect("previous activation").view();
            let z = layer.forward(prev).expect("shapes checked at construction");
            acts.push(relu2(z));
        }
        BranchTrace { acts }
    }

    fn branch_backward(&self, xs: &[&SparseInput<T>], trace: &BranchTrace<T>, grad_emb: Array2<T>, grads: &mut Self) {
        let mut g = grad_emb;
        for i in (0..trace.acts.len()).rev() {
            ndarray::Zip::from(&mut g).and(&trace.acts[i]).for_each(|gv, &a| {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            });
            if i == 0 {
                for (x, row) in xs.iter().zip(g.axis_iter(Axis(0))) {
                    self.first.backward(x, row, &mut grads.first);
                }
            } else {
                g = self.rest[i - 1].backward(trace.acts[i - 1].view(), g.view(), &mut grads.rest[i - 1]);
            }
        }
    }

    /// Last-layer activations for one input.
    pub fn embed(&self, x: &SparseInput<T>) -> Result<Array1<T>> {
        self.check(x)?;
        let emb = self.branch(&[x]).acts.pop().expect("embedding");
        Ok(emb.index_axis_move(Axis(0), 0))
    }

    /// Embeddings of many inputs, one row each.
    pub fn embed_batch(&self, xs: &[SparseInput<T>]) -> Result<Array2<T>> {
        for x in xs {
            self.check(x)?;
        }
        let refs: Vec<&SparseInput<T>> = xs.iter().collect();
        Ok(self.branch(&refs).acts.pop().expect("embedding"))
    }

    pub fn forward_pair(&self, rep: &SparseInput<T>, utt: &SparseInput<T>) -> Result<PairOutput<T>> {
        let rep_embedding = self.embed(rep)?;
        let utt_embedding = self.embed(utt)?;
        let similarity = cosine(rep_embedding.view(), utt_embedding.view());
        Ok(PairOutput {
            rep_embedding,
            utt_embedding,
            similarity,
        })
    }

    /// Mean pair loss over a batch and its exact gradient, summed over both
    /// applications of the shared weights. `pairs` index into `reps` and
    /// `utterances`.
    pub fn loss_and_gradient(
        &self,
        reps: &[SparseInput<T>],
        utterances: &[SparseInput<T>],
        pairs: &[Pair],
    ) -> Result<(T, Self)> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty pair batch".into()));
        }
        for r in reps {
            self.check(r)?;
        }
        // Every distinct representative and utterance of the batch becomes
        // one row of a single stacked pass through the shared branch.
        let mut rows: BTreeMap<(bool, usize), usize> = BTreeMap::new();
        for p in pairs {
            if p.dialect >= reps.len() {
                return Err(Error::LabelOutOfRange {
                    label: p.dialect,
                    classes: reps.len(),
                });
            }
            let utt = utterances
                .get(p.utterance)
                .ok_or_else(|| Error::InvalidArgument(format!("pair utterance {} out of range", p.utterance)))?;
            self.check(utt)?;
            rows.entry((false, p.dialect)).or_insert(0);
            rows.entry((true, p.utterance)).or_insert(0);
        }
        let mut inputs = Vec::with_capacity(rows.len());
        for (i, (&(is_utt, k), slot)) in rows.iter_mut().enumerate() {
            *slot = i;
            inputs.push(if is_utt { &utterances[k] } else { &reps[k] });
        }
        let trace = self.branch(&inputs);
        let emb = trace.acts.last().expect("embedding");
        let mut grad_emb = Array2::zeros(emb.raw_dim());
        let inv_n = T::one() / T::from_usize_lossy(pairs.len());
        let mut loss = T::zero();
        for p in pairs {
            let r = rows[&(false, p.dialect)];
            let u = rows[&(true, p.utterance)];
            let (e_rep, e_utt) = (emb.row(r), emb.row(u));
            let sim = cosine(e_rep, e_utt);
            let y = T::lit(p.target as f64);
            loss += siamese_loss(sim, y);
            let d_sim = T::lit(-2.0) * (y - sim) * inv_n;
            let (g_rep, g_utt) = cosine_backward(e_rep, e_utt);
            grad_emb.row_mut(r).scaled_add(d_sim, &g_rep);
            grad_emb.row_mut(u).scaled_add(d_sim, &g_utt);
        }
        let mut grads = self.zeros_like();
        self.branch_backward(&inputs, &trace, grad_emb, &mut grads);
        Ok((loss * inv_n, grads))
    }

    pub fn loss(&self, reps: &[SparseInput<T>], utterances: &[SparseInput<T>], pairs: &[Pair]) -> Result<T> {
        let mut total = T::zero();
        for p in pairs {
            let out = self.forward_pair(&reps[p.dialect], &utterances[p.utterance])?;
            total += siamese_loss(out.similarity, T::lit(p.target as f64));
        }
        Ok(total / T::from_usize_lossy(pairs.len()))
    }
}

impl<T: Real> Parameterized<T> for SiameseModel<T> {
    fn params(&self) -> Vec<ParamView<'_, T>> {
        let mut out = vec![
            ParamView {
                name: "fc1.weight_in_major".into(),
                shape: vec![self.topology.input_dim, self.topology.layers[0]],
                data: self.first.weight.as_slice().expect("contiguous"),
            },
            ParamView {
                name: "fc1.bias".into(),
                shape: vec![self.topology.layers[0]],
                data: self.first.bias.as_slice().expect("contiguous"),
            },
        ];
        for d in &self.rest {
            out.extend(d.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![
            ("fc1.weight_in_major".to_string(), self.first.weight.as_slice_mut().expect("contiguous")),
            ("fc1.bias".to_string(), self.first.bias.as_slice_mut().expect("contiguous")),
        ];
        for d in &mut self.rest {
            out.extend(d.params_mut());
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            topology: self.topology.clone(),
            first: SparseLinear {
                weight: Array2::zeros(self.first.weight.raw_dim()),
                bias: Array1::zeros(self.first.bias.len()),
            },
            rest: self.rest.iter().map(|d| d.zeros_like()).collect(),
        }
    }
}

/// `(Y − D_W)²`.
pub fn siamese_loss<T: Real>(similarity: T, target: T) -> T {
    let d = target - similarity;
    d * d
}

/// Squared-error pair loss with the label given as ±1.
pub fn pair_loss<T: Real>(similarity: T, same_dialect: bool) -> T {
    siamese_loss(similarity, if same_dialect { T::one() } else { -T::one() })
}

/// One training pair: representative of `dialect` against utterance
/// `utterance` of the sampling pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub dialect: usize,
    pub utterance: usize,
    /// +1 same dialect, −1 different.
    pub target: i8,
    pub source: Split,
}

/// Utterance vector with its dialect and split.
#[derive(Debug, Clone)]
pub struct LabeledVector {
    pub id: String,
    pub dialect: usize,
    pub split: Split,
    pub vector: SparseVector,
}

/// Draws balanced pair batches. DEV utterances are drawn with weight
/// `dev_weight`, TRAIN utterances with weight 1.
#[derive(Debug, Clone)]
pub struct PairSampler {
    num_dialects: usize,
    dialects: Vec<usize>,
    splits: Vec<Split>,
    weights: WeightedIndex<f64>,
}

impl PairSampler {
    pub fn new(pool: &[LabeledVector], num_dialects: usize, dev_weight: f64) -> Result<Self> {
        if num_dialects < 2 {
            return Err(Error::InvalidArgument("pair sampling needs at least 2 dialects".into()));
        }
        if !(dev_weight > 0.0 && dev_weight.is_finite()) {
            return Err(Error::Config("dev weight must be positive".into()));
        }
        for d in 0..num_dialects {
            if !pool.iter().any(|v| v.dialect == d) {
                return Err(Error::EmptyDialect(format!("dialect {d} has no utterances")));
            }
        }
        let mut weights = Vec::with_capacity(pool.len());
        for v in pool {
            if v.dialect >= num_dialects {
                return Err(Error::LabelOutOfRange {
                    label: v.dialect,
                    classes: num_dialects,
                });
            }
            weights.push(match v.split {
                Split::Dev => dev_weight,
                Split::Train => 1.0,
                Split::Test => {
                    return Err(Error::InvalidArgument(format!("test utterance `{}` in training pool", v.id)))
                }
            });
        }
        Ok(Self {
            num_dialects,
            dialects: pool.iter().map(|v| v.dialect).collect(),
            splits: pool.iter().map(|v| v.split).collect(),
            weights: WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        })
    }

    fn draw_utterance(&self, rng: &mut Rng64) -> usize {
        self.weights.sample(rng)
    }

    /// `batch_size / 2` true pairs followed by the remaining false pairs.
    pub fn batch(&self, batch_size: usize, rng: &mut Rng64) -> Vec<Pair> {
        let n_true = batch_size / 2;
        (0..batch_size)
            .map(|k| {
                let u = self.draw_utterance(rng);
                let own = self.dialects[u];
                if k < n_true {
                    Pair {
                        dialect: own,
                        utterance: u,
                        target: 1,
                        source: self.splits[u],
                    }
                } else {
                    let mut other = rng.random_range(0..self.num_dialects - 1);
                    if other >= own {
                        other += 1;
                    }
                    Pair {
                        dialect: other,
                        utterance: u,
                        target: -1,
                        source: self.splits[u],
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiameseTrainConfig {
    pub layers: Vec<usize>,
    pub batch_size: usize,
    pub num_batches: u64,
    /// Loss is averaged and logged every this many batches.
    pub log_interval: u64,
    pub dev_weight: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for SiameseTrainConfig {
    fn default() -> Self {
        Self {
            layers: vec![1500, 600, 200],
            batch_size: 32,
            num_batches: 1000,
            log_interval: 100,
            dev_weight: 5.0,
            sgd: SgdConfig {
                learning_rate: 0.05,
                ..SgdConfig::default()
            },
            seed: 0,
        }
    }
}

impl SiameseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size < 2 || self.num_batches == 0 || self.log_interval == 0 {
            return Err(Error::Config(
                "batch size must be at least 2; batch count and log interval positive".into(),
            ));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseLogRecord {
    pub batches: u64,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiameseLog {
    pub seed: u64,
    pub records: Vec<SiameseLogRecord>,
}

impl SiameseLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# seed\t{}\nbatches\tmean_loss\tlearning_rate\n", self.seed);
        for r in &self.records {
            s.push_str(&format!("{}\t{:.12e}\t{:e}\n", r.batches, r.mean_loss, r.learning_rate));
        }
        s
    }
}

/// SGD on the pair loss. `representatives[d]` is dialect `d`'s mean vector.
/// The returned model is rounded to checkpoint precision.
pub fn train_siamese<T: Real>(
    pool: &[LabeledVector],
    representatives: &[RepresentativeVector<T>],
    cfg: &SiameseTrainConfig,
) -> Result<(SiameseModel<T>, SiameseLog)> {
    cfg.validate()?;
    let num_dialects = representatives.len();
    let sampler = PairSampler::new(pool, num_dialects, cfg.dev_weight)?;
    let dim = representatives[0].mean.len();
    let reps: Vec<SparseInput<T>> = representatives.iter().map(SparseInput::from).collect();
    let utts: Vec<SparseInput<T>> = pool.iter().map(|v| SparseInput::from(&v.vector)).collect();
    let mut rng = seeded_rng(cfg.seed);
    let topology = SiameseTopology {
        input_dim: dim,
        layers: cfg.layers.clone(),
    };
    let mut model = SiameseModel::<T>::new(topology, &mut rng)?;
    let mut log = SiameseLog {
        seed: cfg.seed,
        records: Vec::new(),
    };
    let mut acc = 0.0;
    let mut acc_n = 0u64;
    for counter in 0..cfg.num_batches {
        let pairs = sampler.batch(cfg.batch_size, &mut rng);
        let (loss, grads) = model.loss_and_gradient(&reps, &utts, &pairs)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                batch: counter as usize,
            });
        }
        sgd_step(&mut model, &grads, &cfg.sgd, counter)?;
        acc += loss;
        acc_n += 1;
        if (counter + 1) % cfg.log_interval == 0 || counter + 1 == cfg.num_batches {
            log.records.push(SiameseLogRecord {
                batches: counter + 1,
                mean_loss: acc / acc_n as f64,
                learning_rate: cfg.sgd.effective_lr(counter),
            });
            acc = 0.0;
            acc_n = 0;
        }
    }
    model.round_to_storage();
    Ok((model, log))
}

/// Embeddings of every representative, computed once for scoring.
pub fn representative_embeddings<T: Real>(
    model: &SiameseModel<T>,
    representatives: &[RepresentativeVector<T>],
) -> Result<Vec<Array1<T>>> {
    representatives.iter().map(|r| model.embed(&SparseInput::from(r))).collect()
}

/// Cosine of an utterance embedding to each representative embedding.
pub fn score_embedding<T: Real>(utterance: ArrayView1<'_, T>, rep_embeddings: &[Array1<T>]) -> Array1<T> {
    rep_embeddings.iter().map(|r| cosine(utterance, r.view())).collect()
}

/// `cosine(embed(u), embed(ū_d))` for every dialect `d`.
pub fn score_embeddings<T: Real>(
    model: &SiameseModel<T>,
    utterance: &SparseVector,
    representatives: &[RepresentativeVector<T>],
) -> Result<Array1<T>> {
    let reps = representative_embeddings(model, representatives)?;
    let e = model.embed(&SparseInput::from(utterance))?;
    Ok(score_embedding(e.view(), &reps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vsm::representative_vectors;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny(seed: u64) -> SiameseModel<f64> {
        let topo = SiameseTopology {
            input_dim: 10,
            layers: vec![8, 6, 4],
        };
        SiameseModel::new(topo, &mut seeded_rng(seed)).unwrap()
    }

    fn rand_input(rng: &mut Rng64, dim: usize) -> SparseInput<f64> {
        let v: Array1<f64> = (0..dim)
            .map(|_| if rng.random_bool(0.6) { rng.random_range(0.0..3.0) } else { 0.0 })
            .collect();
        SparseInput::from(&v)
    }

    #[test]
    fn loss_examples() {
        assert_eq!(siamese_loss(1.0, 1.0), 0.0);
        assert_eq!(siamese_loss(0.0, -1.0), 1.0);
        assert_eq!(siamese_loss(1.0, -1.0), 4.0);
        assert_eq!(pair_loss(1.0, false), 4.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = tiny(3);
        let mut rng = seeded_rng(11);
        let reps: Vec<_> = (0..3).map(|_| rand_input(&mut rng, 10)).collect();
        let utts: Vec<_> = (0..4).map(|_| rand_input(&mut rng, 10)).collect();
        let pairs = vec![
            Pair { dialect: 0, utterance: 0, target: 1, source: Split::Train },
            Pair { dialect: 1, utterance: 1, target: 1, source: Split::Dev },
            Pair { dialect: 2, utterance: 2, target: -1, source: Split::Train },
            Pair { dialect: 0, utterance: 3, target: -1, source: Split::Train },
        ];
        let (_, grads) = model.loss_and_gradient(&reps, &utts, &pairs).unwrap();
        let h = 1e-5;
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|p| p.data.to_vec()).collect();
        let n_tensors = analytic.len();
        let mut checked = 0;
        for t in 0..n_tensors {
            for i in 0..analytic[t].len() {
                let mut plus = model.clone();
                plus.params_mut()[t].1[i] += h;
                let mut minus = model.clone();
                minus.params_mut()[t].1[i] -= h;
                let fd = (plus.loss(&reps, &utts, &pairs).unwrap() - minus.loss(&reps, &utts, &pairs).unwrap())
                    / (2.0 * h);
                let a = analytic[t][i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "tensor {t} index {i}: analytic {a} fd {fd}");
                checked += 1;
            }
        }
        assert_eq!(checked, model.num_params());
    }

    #[test]
    fn embedding_dimension_is_last_layer() {
        for dim in [5, 37, 1000] {
            let m = SiameseModel::<f64>::new(SiameseTopology::full(dim), &mut seeded_rng(0)).unwrap();
            let v = SparseVector::from_sorted(dim, vec![(0, 2), (dim - 1, 1)]).unwrap();
            assert_eq!(m.embed(&SparseInput::from(&v)).unwrap().len(), 200);
        }
    }

    #[test]
    fn identical_inputs_score_one() {
        let m = tiny(1);
        let mut rng = seeded_rng(2);
        for _ in 0..20 {
            let x = rand_input(&mut rng, 10);
            let out = m.forward_pair(&x, &x).unwrap();
            if out.utt_embedding.iter().any(|&v| v != 0.0) {
                assert!((out.similarity - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(out.similarity, 0.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = tiny(0);
        let x = SparseInput::<f64>::from(&Array1::from(vec![1.0; 9]));
        assert!(matches!(m.embed(&x), Err(Error::Shape(_))));
    }

    fn pool(per_split: usize, dialects: usize) -> Vec<LabeledVector> {
        let mut out = Vec::new();
        for d in 0..dialects {
            for split in [Split::Train, Split::Dev] {
                for k in 0..per_split {
                    out.push(LabeledVector {
                        id: format!("{d}-{split}-{k}"),
                        dialect: d,
                        split,
                        vector: SparseVector::from_sorted(4, vec![(d, 1)]).unwrap(),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn batch_is_balanced() {
        let s = PairSampler::new(&pool(5, 3), 3, 5.0).unwrap();
        let mut rng = seeded_rng(0);
        let b = s.batch(32, &mut rng);
        assert_eq!(b.iter().filter(|p| p.target == 1).count(), 16);
        assert_eq!(b.iter().filter(|p| p.target == -1).count(), 16);
    }

    #[test]
    fn dev_exposed_five_times_more() {
        let s = PairSampler::new(&pool(20, 3), 3, 5.0).unwrap();
        let mut rng = seeded_rng(7);
        let mut dev = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            for p in s.batch(32, &mut rng) {
                total += 1;
                dev += (p.source == Split::Dev) as usize;
            }
        }
        let frac = dev as f64 / total as f64;
        assert!((frac - 5.0 / 6.0).abs() < 0.02, "{frac}");
    }

    #[test]
    fn two_dialect_false_pairs_use_other_representative() {
        let p = pool(5, 2);
        let s = PairSampler::new(&p, 2, 5.0).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..50 {
            for pair in s.batch(8, &mut rng) {
                let own = p[pair.utterance].dialect;
                assert_eq!(pair.dialect == own, pair.target == 1);
            }
        }
    }

    #[test]
    fn false_pairs_uniform_over_wrong_dialects() {
        let p = pool(10, 4);
        let s = PairSampler::new(&p, 4, 5.0).unwrap();
        let mut rng = seeded_rng(4);
        let mut counts = [[0usize; 4]; 4];
        for _ in 0..2000 {
            for pair in s.batch(16, &mut rng).into_iter().filter(|q| q.target == -1) {
                counts[p[pair.utterance].dialect][pair.dialect] += 1;
            }
        }
        for (own, row) in counts.iter().enumerate() {
            assert_eq!(row[own], 0);
            let n: usize = row.iter().sum();
            for (d, &c) in row.iter().enumerate() {
                if d != own {
                    assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.03);
                }
            }
        }
    }

    #[test]
    fn empty_dialect_rejected() {
        let p = pool(3, 2);
        assert!(matches!(PairSampler::new(&p, 3, 5.0), Err(Error::EmptyDialect(_))));
        assert!(PairSampler::new(&p[..3], 1, 5.0).is_err());
    }

    #[test]
    fn separable_corpus_gives_margin() {
        // Disjoint vocabularies: dialect d uses indices 10d..10d+10.
        let dialects = 3;
        let dim = 30;
        let mut rng = seeded_rng(5);
        let mut pool = Vec::new();
        for d in 0..dialects {
            for (k, split) in [Split::Train, Split::Dev].into_iter().cycle().take(40).enumerate() {
                let mut counts = [0u32; 10];
                for _ in 0..12 {
                    counts[rng.random_range(0..10)] += 1;
                }
                let entries = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(i, &c)| (10 * d + i, c))
                    .collect();
                pool.push(LabeledVector {
                    id: format!("{d}-{k}"),
                    dialect: d,
                    split,
                    vector: SparseVector::from_sorted(dim, entries).unwrap(),
                });
            }
        }
        let groups: Vec<Vec<&SparseVector>> = (0..dialects)
            .map(|d| pool.iter().filter(|v| v.dialect == d).map(|v| &v.vector).collect())
            .collect();
        let reps = representative_vectors::<f64>(&groups).unwrap();
        let cfg = SiameseTrainConfig {
            layers: vec![32, 16, 8],
            num_batches: 400,
            ..Default::default()
        };
        let (model, log) = train_siamese(&pool, &reps, &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.mean_loss >= 0.0));
        let rep_e = representative_embeddings(&model, &reps).unwrap();
        let (mut t, mut nt, mut f, mut nf) = (0.0, 0, 0.0, 0);
        for v in &pool {
            let s = score_embedding(model.embed(&SparseInput::from(&v.vector)).unwrap().view(), &rep_e);
            for (d, &x) in s.iter().enumerate() {
                if d == v.dialect {
                    t += x;
                    nt += 1;
                } else {
                    f += x;
                    nf += 1;
                }
            }
        }
        let margin = t / nt as f64 - f / nf as f64;
        assert!(margin >= 0.3, "margin {margin}");
    }

    #[test]
    fn shared_parameters_have_unique_names() {
        let m = tiny(0);
        let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert_eq!(names.len(), 6);
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_bounded(seed in 0u64..500) {
            let m = tiny(seed % 7);
            let mut rng = seeded_rng(seed);
            let a = rand_input(&mut rng, 10);
            let b = rand_input(&mut rng, 10);
            let ab = m.forward_pair(&a, &b).unwrap().similarity;
            let ba = m.forward_pair(&b, &a).unwrap().similarity;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            let l = siamese_loss(ab, -1.0);
            prop_assert!((0.0..=4.0).contains(&l));
        }

        #[test]
        fn scoring_argmax_scale_invariant(seed in 0u64..200, alpha in 0.01f64..100.0) {
            let mut rng = seeded_rng(seed);
            let e: Array1<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let reps: Vec<Array1<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let s1 = score_embedding(e.view(), &reps);
            let s2 = score_embedding((&e * alpha).view(), &reps);
            for (x, y) in s1.iter().zip(&s2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

//! Prototype-based few-shot classifier: feature projection, per-class
//! prototypes (mean of projected shots), cosine or negative-distance logit
//! heads, and argmax prediction.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::episodes::EpisodeTask;
use crate::error::{Error, Result};
use crate::numeric::{
    net::{Activation, DenseNet, Layer, Matrix},
    softmax, vector, Prng,
};

/// Temperature applied to cosine logits inside the softmax. Raw cosines in
/// [-1, 1] give a near-flat softmax, so cross-entropy needs the scaling to
/// train; maximum-logit scoring always sees the raw cosine.
pub const COSINE_TEMPERATURE: f64 = 10.0;

/// Which similarity the logit head computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Bounded logits in [-1, 1]: cosine similarity to each prototype.
    Cosine,
    /// Unbounded logits <= 0: negative euclidean distance to each prototype.
    NegDistance,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Cosine => "cosine",
            HeadKind::NegDistance => "neg-distance",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(HeadKind::Cosine),
            "neg-distance" | "neg_distance" => Ok(HeadKind::NegDistance),
            other => Err(Error::Config(format!(
                "unknown head {other:?}; expected cosine or neg-distance"
            ))),
        }
    }
}

/// Trainable feature projection: a single linear layer mapping raw
/// embeddings (d_in) into the feature space (d_feat).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureHead {
    net: DenseNet,
}

impl FeatureHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        let layer = Layer::new(weights, bias, Activation::Identity)?;
        Ok(FeatureHead {
            net: DenseNet::new(vec![layer])?,
        })
    }

    /// Square identity projection (features = raw embeddings).
    pub fn identity(dim: usize) -> Self {
        FeatureHead::new(Matrix::identity(dim), vec![0.0; dim]).unwrap()
    }

    /// Random init: weights N(0, 1/d_in), zero bias.
    pub fn random_init(d_in: usize, d_feat: usize, rng: &mut Prng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights = Matrix::from_fn(d_feat, d_in, |_, _| rng.next_normal() * scale);
        FeatureHead::new(weights, vec![0.0; d_feat]).unwrap()
    }

    pub fn d_in(&self) -> usize {
        self.net.input_dim()
    }

    pub fn d_feat(&self) -> usize {
        self.net.output_dim()
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    /// Project a raw vector into feature space.
    pub fn embed(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.d_in() {
            return Err(Error::ShapeMismatch {
                context: "embed input".into(),
                expected: self.d_in(),
                got: input.len(),
            });
        }
        let layer = &self.net.layers()[0];
        let mut out = layer.bias.clone();
        let mut pre = vec![0.0; layer.output_dim()];
        layer.weights.matvec(input, &mut pre);
        for (o, p) in out.iter_mut().zip(&pre) {
            *o += p;
        }
        Ok(out)
    }
}

/// Class prototypes for one episode, plus the head that scores against
/// them. With a garbage entry the set is (K+1)-way and the last prototype
/// is the learned garbage vector.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub prototypes: Vec<Vec<f64>>,
    pub head_kind: HeadKind,
    pub temperature: f64,
    pub has_garbage: bool,
}

impl PrototypeSet {
    /// Number of known classes (excludes the garbage entry).
    pub fn known_classes(&self) -> usize {
        self.prototypes.len() - usize::from(self.has_garbage)
    }
}

/// Episode logits: one entry per prototype, in prototype order.
#[derive(Debug, Clone)]
pub struct LogitVector {
    pub values: Vec<f64>,
    pub head_kind: HeadKind,
    pub temperature: f64,
}

impl LogitVector {
    /// True when raw logits live in a bounded range ([-1, 1] for cosine).
    pub fn is_bounded(&self) -> bool {
        self.head_kind == HeadKind::Cosine
    }

    /// The predictive distribution: softmax of the temperature-scaled
    /// logits (cosine) or of the raw logits (neg-distance).
    pub fn probs(&self) -> Result<Vec<f64>> {
        match self.head_kind {
            HeadKind::Cosine => {
                let scaled: Vec<f64> = self.values.iter().map(|&v| v * self.temperature).collect();
                softmax(&scaled)
            }
            HeadKind::NegDistance => softmax(&self.values),
        }
    }
}

/// Prototype of each support class: the projection of the class's mean raw
/// input. For the linear head this equals the mean of the projected shots
/// exactly (up to rounding), and it saves K·(N-1) projections per episode.
pub fn compute_prototypes(
    head: &FeatureHead,
    ds: &Dataset,
    task: &EpisodeTask,
    head_kind: HeadKind,
) -> Result<PrototypeSet> {
    Ok(compute_prototypes_with_means(head, ds, task, head_kind)?.0)
}

/// Same as [`compute_prototypes`] but also returns the per-class mean raw
/// inputs, which the training loop reuses when backpropagating prototype
/// gradients through the linear projection.
pub fn compute_prototypes_with_means(
    head: &FeatureHead,
    ds: &Dataset,
    task: &EpisodeTask,
    head_kind: HeadKind,
) -> Result<(PrototypeSet, Vec<Vec<f64>>)> {
    let mut prototypes = Vec::with_capacity(task.k_way());
    let mut means = Vec::with_capacity(task.k_way());
    for shots in &task.support {
        let mean = class_mean_input(ds, shots, head.d_in());
        prototypes.push(head.embed(&mean)?);
        means.push(mean);
    }
    let protos = PrototypeSet {
        prototypes,
        head_kind,
        temperature: COSINE_TEMPERATURE,
        has_garbage: false,
    };
    Ok((protos, means))
}

/// Mean of the raw input vectors of a set of dataset items. Items are
/// summed in index order so the result is exactly invariant to shot
/// permutation, not just up to rounding.
pub fn class_mean_input(ds: &Dataset, items: &[usize], dim: usize) -> Vec<f64> {
    let mut ordered = items.to_vec();
    ordered.sort_unstable();
    let mut mean = vec![0.0; dim];
    for &i in &ordered {
        vector::add_scaled(&mut mean, &ds.get(i).vector, 1.0);
    }
    let inv = 1.0 / items.len() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    mean
}

/// Score a query feature against every prototype.
pub fn compute_logits(protos: &PrototypeSet, query_feat: &[f64]) -> Result<LogitVector> {
    let mut values = Vec::with_capacity(protos.prototypes.len());
    match protos.head_kind {
        HeadKind::Cosine => {
            for p in &protos.prototypes {
                values.push(vector::cosine_similarity(query_feat, p)?);
            }
        }
        HeadKind::NegDistance => {
            for p in &protos.prototypes {
                values.push(-vector::norm(&vector::sub(query_feat, p)));
            }
        }
    }
    Ok(LogitVector {
        values,
        head_kind: protos.head_kind,
        temperature: protos.temperature,
    })
}

/// Argmax class; ties break toward the lowest index.
pub fn classify(logits: &LogitVector) -> usize {
    argmax(&logits.values)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Episode cross-entropy: CE of the predictive distribution at the target
/// class. The gradient path to the projection lives in the training loop,
/// which differentiates this exact composition.
pub fn ce_training_loss(protos: &PrototypeSet, query_feat: &[f64], target: usize) -> Result<f64> {
    let logits = compute_logits(protos, query_feat)?;
    let probs = logits.probs()?;
    crate::numeric::cross_entropy(&probs, target)
}

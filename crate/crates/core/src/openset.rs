//! Open-set techniques: implicit scoring (maximum logit / maximum softmax),
//! the entropic loss term, the learnable garbage class, and the
//! feature-residual discriminator.
//!
//! Every technique reduces to a known/unknown score u in [0, 1] (higher =
//! more likely known) plus, where applicable, a training-loss contribution.

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, PrototypeSet};
use crate::error::{Error, Result};
use crate::numeric::{
    bce, eos_loss,
    net::{Activation, DenseNet, Layer, Matrix, NetGrads},
    vector, Prng, PROB_FLOOR,
};

/// The five selectable open-set techniques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Technique {
    SoftmaxMls,
    SoftmaxMss,
    Eos,
    GarbageClass,
    FrDisc,
}

impl Technique {
    pub fn as_str(&self) -> &'static str {
        match self {
            Technique::SoftmaxMls => "softmax-mls",
            Technique::SoftmaxMss => "softmax-mss",
            Technique::Eos => "eos",
            Technique::GarbageClass => "gc",
            Technique::FrDisc => "fr-disc",
        }
    }

    pub fn requires_garbage(&self) -> bool {
        matches!(self, Technique::GarbageClass)
    }

    pub fn requires_discriminator(&self) -> bool {
        matches!(self, Technique::FrDisc)
    }

    /// Whether acceptance is "normalized score > tau". The garbage class
    /// instead rejects when the garbage probability is the maximum.
    pub fn uses_threshold_accept(&self) -> bool {
        !matches!(self, Technique::GarbageClass)
    }

    pub fn all() -> [Technique; 5] {
        [
            Technique::SoftmaxMls,
            Technique::SoftmaxMss,
            Technique::Eos,
            Technique::GarbageClass,
            Technique::FrDisc,
        ]
    }
}

impl std::fmt::Display for Technique {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-mls" => Ok(Technique::SoftmaxMls),
            "softmax-mss" => Ok(Technique::SoftmaxMss),
            "eos" => Ok(Technique::Eos),
            "gc" => Ok(Technique::GarbageClass),
            "fr-disc" => Ok(Technique::FrDisc),
            other => Err(Error::Config(format!(
                "unknown technique {other:?}; expected one of softmax-mls, softmax-mss, eos, gc, fr-disc"
            ))),
        }
    }
}

/// Known/unknown score: `raw` on the technique's native scale, `normalized`
/// in [0, 1] for thresholding. Both increase with confidence that the
/// query is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetScore {
    pub raw: f64,
    pub normalized: f64,
    pub technique: Technique,
}

/// Loss weights for the auxiliary open-set terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_eos: f64,
    pub alpha_disc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_eos: 0.5,
            alpha_disc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_eos >= 0.0) || !self.alpha_eos.is_finite() {
            return Err(Error::Config(format!(
                "alpha_eos must be nonnegative, got {}",
                self.alpha_eos
            )));
        }
        if !(self.alpha_disc >= 0.0) || !self.alpha_disc.is_finite() {
            return Err(Error::Config(format!(
                "alpha_disc must be nonnegative, got {}",
                self.alpha_disc
            )));
        }
        Ok(())
    }
}

/// The learnable garbage prototype, shared across episodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarbageState {
    pub prototype: Vec<f64>,
}

impl GarbageState {
    /// Small Gaussian init (sigma 0.02) keeps the early (K+1)-way softmax
    /// near-uniform on the garbage entry.
    pub fn init(d_feat: usize, rng: &mut Prng) -> Self {
        GarbageState {
            prototype: (0..d_feat).map(|_| rng.next_normal() * 0.02).collect(),
        }
    }
}

/// The feature-residual discriminator: one hidden relu layer of d_feat/2
/// units into a single sigmoid output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorState {
    pub net: DenseNet,
}

impl DiscriminatorState {
    /// Hidden weights are random; the output layer starts at zero so an
    /// untrained discriminator emits exactly sigmoid(0) = 0.5 for every
    /// input. The first update moves the output layer (its gradient is
    /// nonzero through the random hidden activations), after which the
    /// hidden layer trains normally.
    pub fn init(d_feat: usize, rng: &mut Prng) -> Self {
        let hidden = (d_feat / 2).max(1);
        let scale = 1.0 / (d_feat as f64).sqrt();
        let w0 = Matrix::from_fn(hidden, d_feat, |_, _| rng.next_normal() * scale);
        let l0 = Layer::new(w0, vec![0.0; hidden], Activation::Relu).unwrap();
        let l1 = Layer::new(Matrix::zeros(1, hidden), vec![0.0], Activation::Sigmoid).unwrap();
        DiscriminatorState {
            net: DenseNet::new(vec![l0, l1]).unwrap(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}

/// Maximum Logit Score. Only defined for bounded (cosine) logits, where
/// (raw + 1)/2 maps the native [-1, 1] range onto [0, 1] for thresholding.
pub fn score_mls(logits: &crate::classifier::LogitVector, technique: Technique) -> Result<OpenSetScore> {
    if !logits.is_bounded() {
        return Err(Error::UnboundedLogitsForMls);
    }
    if logits.values.is_empty() {
        return Err(Error::EmptyInput("score_mls"));
    }
    let raw = logits.values[argmax(&logits.values)];
    Ok(OpenSetScore {
        raw,
        normalized: ((raw + 1.0) / 2.0).clamp(0.0, 1.0),
        technique,
    })
}

/// Maximum Softmax Score over the K known-class probabilities.
pub fn score_mss(probs: &[f64], technique: Technique) -> Result<OpenSetScore> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("score_mss"));
    }
    let raw = probs[argmax(probs)];
    Ok(OpenSetScore {
        raw,
        normalized: raw,
        technique,
    })
}

/// Entropy-boosting contribution for one query: alpha_eos * eos_loss on
/// unknown-task queries, zero on known ones (those carry the CE loss).
pub fn eos_term(probs: &[f64], known: bool, weights: &LossWeights) -> Result<f64> {
    if known {
        return Ok(0.0);
    }
    Ok(weights.alpha_eos * eos_loss(probs)?)
}

/// Append the garbage prototype, turning a K-way prototype set into the
/// (K+1)-way set used by the garbage-class technique.
pub fn gc_augment(protos: &PrototypeSet, garbage: &GarbageState) -> Result<PrototypeSet> {
    if protos.has_garbage {
        return Err(Error::DoubleGarbageAugment);
    }
    if let Some(first) = protos.prototypes.first() {
        if first.len() != garbage.prototype.len() {
            return Err(Error::ShapeMismatch {
                context: "garbage prototype".into(),
                expected: first.len(),
                got: garbage.prototype.len(),
            });
        }
    }
    let mut out = protos.clone();
    out.prototypes.push(garbage.prototype.clone());
    out.has_garbage = true;
    Ok(out)
}

/// Garbage-class decision from the (K+1)-way distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcDecision {
    pub accept: bool,
    pub score: OpenSetScore,
    /// Argmax over the K known entries (ties toward the lowest index).
    pub predicted: usize,
}

/// Reject when the garbage entry holds the maximum probability; the score
/// is 1 - p_garbage. Ties break toward the lowest index, so a uniform
/// distribution is accepted.
pub fn gc_decision(probs: &[f64]) -> Result<GcDecision> {
    if probs.len() < 2 {
        return Err(Error::EmptyInput("gc_decision needs K+1 probabilities"));
    }
    let garbage_idx = probs.len() - 1;
    let accept = argmax(probs) != garbage_idx;
    let u = 1.0 - probs[garbage_idx];
    Ok(GcDecision {
        accept,
        score: OpenSetScore {
            raw: u,
            normalized: u.clamp(0.0, 1.0),
            technique: Technique::GarbageClass,
        },
        predicted: argmax(&probs[..garbage_idx]),
    })
}

/// Feature residual: query feature minus the prototype of the
/// argmax-probability class.
pub fn frdisc_residual(
    query_feat: &[f64],
    protos: &PrototypeSet,
    probs: &[f64],
) -> Result<Vec<f64>> {
    let k = protos.known_classes();
    if probs.len() != k {
        return Err(Error::ShapeMismatch {
            context: "frdisc_residual probs".into(),
            expected: k,
            got: probs.len(),
        });
    }
    let predicted = argmax(probs);
    Ok(vector::sub(query_feat, &protos.prototypes[predicted]))
}

/// Discriminator confidence for one residual.
pub fn frdisc_score(disc: &DiscriminatorState, residual: &[f64]) -> Result<OpenSetScore> {
    let (out, _) = disc.net.forward(residual)?;
    let u = out[0];
    Ok(OpenSetScore {
        raw: u,
        normalized: u,
        technique: Technique::FrDisc,
    })
}

/// Pick the balanced discriminator batch: all correctly-classified known
/// queries as positives, and an equal number of unknown tasks drawn
/// uniformly without replacement. No positives means no update this batch.
pub fn frdisc_select(
    positive_tasks: &[usize],
    unknown_tasks: &[usize],
    rng: &mut Prng,
) -> (Vec<usize>, Vec<usize>) {
    if positive_tasks.is_empty() || unknown_tasks.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let n = positive_tasks.len().min(unknown_tasks.len());
    let positives = positive_tasks[..n].to_vec();
    let negatives = rng
        .sample_distinct(unknown_tasks.len(), n)
        .into_iter()
        .map(|i| unknown_tasks[i])
        .collect();
    (positives, negatives)
}

/// Discriminator loss over prepared (residual, target) samples, averaged
/// and scaled by alpha_disc, with gradients for both the discriminator
/// parameters and each input residual.
#[derive(Debug)]
pub struct DiscBatchLoss {
    pub loss: f64,
    pub disc_grads: NetGrads,
    pub residual_grads: Vec<Vec<f64>>,
}

pub fn frdisc_batch_loss(
    disc: &DiscriminatorState,
    samples: &[(Vec<f64>, f64)],
    alpha_disc: f64,
) -> Result<DiscBatchLoss> {
    let mut disc_grads = disc.net.zero_grads();
    let mut residual_grads = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return Ok(DiscBatchLoss {
            loss: 0.0,
            disc_grads,
            residual_grads,
        });
    }
    let scale = alpha_disc / samples.len() as f64;
    let mut loss_sum = 0.0;
    for (residual, target) in samples {
        let (out, tape) = disc.net.forward(residual)?;
        let u = out[0];
        loss_sum += bce(u, *target)?;
        // dBCE/du with the same clamp bce applies; the sigmoid backward
        // multiplies by u(1-u), yielding (u - t) up to the clamp.
        let uc = u.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let du = (-target / uc + (1.0 - target) / (1.0 - uc)) * scale;
        let (g, input_grad) = disc.net.backward(&tape, &[du])?;
        disc_grads.add(&g);
        residual_grads.push(input_grad);
    }
    Ok(DiscBatchLoss {
        loss: loss_sum * scale,
        disc_grads,
        residual_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{HeadKind, LogitVector, COSINE_TEMPERATURE};

    fn logits(values: Vec<f64>, head_kind: HeadKind) -> LogitVector {
        LogitVector {
            values,
            head_kind,
            temperature: COSINE_TEMPERATURE,
        }
    }

    #[test]
    fn mls_maps_cosine_range_to_unit_interval() {
        let s = score_mls(&logits(vec![0.9, 0.2], HeadKind::Cosine), Technique::SoftmaxMls)
            .unwrap();
        assert!((s.raw - 0.9).abs() < 1e-12);
        assert!((s.normalized - 0.95).abs() < 1e-12);

        let s = score_mls(&logits(vec![-1.0, -1.0], HeadKind::Cosine), Technique::SoftmaxMls)
            .unwrap();
        assert_eq!(s.normalized, 0.0);
    }

    #[test]
    fn mls_refuses_unbounded_logits() {
        let err = score_mls(
            &logits(vec![-0.5, -2.0], HeadKind::NegDistance),
            Technique::SoftmaxMls,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnboundedLogitsForMls));
    }

    #[test]
    fn mss_examples() {
        let s = score_mss(&[0.2; 5], Technique::SoftmaxMss).unwrap();
        assert!((s.raw - 0.2).abs() < 1e-12);
        let s = score_mss(&[0.0, 1.0, 0.0], Technique::SoftmaxMss).unwrap();
        assert!((s.raw - 1.0).abs() < 1e-12);
        let s = score_mss(&[0.6, 0.3, 0.1], Technique::SoftmaxMss).unwrap();
        assert!((s.normalized - 0.6).abs() < 1e-12);
    }

    #[test]
    fn eos_term_applies_only_to_unknown_queries() {
        let w = LossWeights {
            alpha_eos: 0.5,
            alpha_disc: 0.0,
        };
        assert_eq!(eos_term(&[0.2; 5], true, &w).unwrap(), 0.0);
        let t = eos_term(&[0.2; 5], false, &w).unwrap();
        assert!((t - 0.5 * 5.0_f64.ln()).abs() < 1e-12);
        let w0 = LossWeights {
            alpha_eos: 0.0,
            alpha_disc: 0.0,
        };
        assert_eq!(eos_term(&[0.2; 5], false, &w0).unwrap(), 0.0);
    }

    fn plain_protos(k: usize, d: usize) -> PrototypeSet {
        PrototypeSet {
            prototypes: (0..k)
                .map(|i| {
                    let mut v = vec![0.0; d];
                    v[i % d] = 1.0;
                    v
                })
                .collect(),
            head_kind: HeadKind::NegDistance,
            temperature: COSINE_TEMPERATURE,
            has_garbage: false,
        }
    }

    #[test]
    fn gc_augment_appends_the_garbage_prototype() {
        let protos = plain_protos(5, 8);
        let garbage = GarbageState {
            prototype: vec![0.5; 8],
        };
        let aug = gc_augment(&protos, &garbage).unwrap();
        assert_eq!(aug.prototypes.len(), 6);
        assert_eq!(aug.prototypes[5], garbage.prototype);
        assert!(aug.has_garbage);
        assert_eq!(aug.known_classes(), 5);

        let err = gc_augment(&aug, &garbage).unwrap_err();
        assert!(matches!(err, Error::DoubleGarbageAugment));
    }

    #[test]
    fn faraway_garbage_prototype_never_wins_under_neg_distance() {
        use crate::classifier::compute_logits;
        let protos = plain_protos(5, 8);
        let garbage = GarbageState {
            prototype: vec![1e3; 8],
        };
        let aug = gc_augment(&protos, &garbage).unwrap();
        // queries near the known prototypes
        for i in 0..5 {
            let mut q = vec![0.01; 8];
            q[i] = 0.99;
            let lv = compute_logits(&aug, &q).unwrap();
            let probs = lv.probs().unwrap();
            assert!(probs[5] < 1e-12, "garbage probability {}", probs[5]);
        }
    }

    #[test]
    fn gc_decision_examples() {
        let d = gc_decision(&[0.1, 0.1, 0.1, 0.1, 0.1, 0.5]).unwrap();
        assert!(!d.accept);
        assert!((d.score.normalized - 0.5).abs() < 1e-12);

        let d = gc_decision(&[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]).unwrap();
        assert!(d.accept);
        assert!((d.score.normalized - 0.9).abs() < 1e-12);
        assert_eq!(d.predicted, 0);

        // uniform: argmax tie breaks to index 0, which is not the garbage slot
        let u = 1.0 / 6.0;
        let d = gc_decision(&[u; 6]).unwrap();
        assert!(d.accept);
        assert!((d.score.normalized - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn gc_accept_iff_garbage_not_unique_max() {
        let mut rng = Prng::new(8);
        for _ in 0..500 {
            let k = 2 + rng.gen_range(6);
            let raw: Vec<f64> = (0..=k).map(|_| rng.next_f64() + 1e-9).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let d = gc_decision(&probs).unwrap();
            let pg = probs[k];
            let unique_max = probs[..k].iter().all(|&p| pg > p);
            assert_eq!(d.accept, !unique_max);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_is_difference_to_predicted_prototype() {
        let protos = PrototypeSet {
            prototypes: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            head_kind: HeadKind::NegDistance,
            temperature: COSINE_TEMPERATURE,
            has_garbage: false,
        };
        let r = frdisc_residual(&[1.0, 0.0], &protos, &[0.9, 0.1]).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-12));

        let r = frdisc_residual(&[1.0, 1.0], &protos, &[0.8, 0.2]).unwrap();
        assert_eq!(r, vec![0.0, 1.0]);
    }

    #[test]
    fn residual_argmax_matches_brute_force() {
        let mut rng = Prng::new(33);
        let protos = plain_protos(6, 6);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let q: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
            let r = frdisc_residual(&q, &protos, &probs).unwrap();

            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            let expect = vector::sub(&q, &protos.prototypes[best]);
            assert_eq!(r, expect);
        }
    }

    #[test]
    fn zero_output_layer_scores_exactly_half() {
        let mut rng = Prng::new(4);
        let disc = DiscriminatorState::init(8, &mut rng);
        for _ in 0..100 {
            let r: Vec<f64> = (0..8).map(|_| rng.next_normal() * 3.0).collect();
            let s = frdisc_score(&disc, &r).unwrap();
            assert_eq!(s.normalized, 0.5);
        }
    }

    #[test]
    fn disc_scores_stay_in_open_unit_interval() {
        let mut rng = Prng::new(6);
        let mut disc = DiscriminatorState::init(8, &mut rng);
        // make the output layer nonzero
        for layer in disc.net.layers_mut() {
            for w in layer.weights.as_mut_slice() {
                *w += rng.next_normal();
            }
        }
        for _ in 0..200 {
            let r: Vec<f64> = (0..8).map(|_| rng.next_normal() * 5.0).collect();
            let s = frdisc_score(&disc, &r).unwrap();
            assert!(s.normalized > 0.0 && s.normalized < 1.0);
        }
    }

    #[test]
    fn disc_rejects_wrong_residual_dim() {
        let mut rng = Prng::new(4);
        let disc = DiscriminatorState::init(8, &mut rng);
        assert!(frdisc_score(&disc, &[0.0; 5]).is_err());
    }

    #[test]
    fn selection_balances_positives_and_negatives() {
        let mut rng = Prng::new(10);
        let (pos, neg) = frdisc_select(&[0, 2, 4], &[1, 3, 5, 7, 9], &mut rng);
        assert_eq!(pos, vec![0, 2, 4]);
        assert_eq!(neg.len(), 3);
        let mut sorted = neg.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
        assert!(neg.iter().all(|t| [1, 3, 5, 7, 9].contains(t)));

        let (pos, neg) = frdisc_select(&[], &[1, 3], &mut rng);
        assert!(pos.is_empty() && neg.is_empty());
    }

    #[test]
    fn empty_disc_batch_contributes_nothing() {
        let mut rng = Prng::new(4);
        let disc = DiscriminatorState::init(4, &mut rng);
        let out = frdisc_batch_loss(&disc, &[], 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.residual_grads.is_empty());
    }

    #[test]
    fn confident_correct_disc_has_near_zero_loss() {
        // Build a discriminator that maps coordinate 0 strongly through the
        // hidden layer; feed residuals it classifies almost perfectly.
        let l0 = Layer::new(
            Matrix::from_fn(2, 2, |r, c| if r == c { 40.0 } else { 0.0 }),
            vec![0.0; 2],
            Activation::Relu,
        )
        .unwrap();
        let l1 = Layer::new(
            Matrix::from_fn(1, 2, |_, c| if c == 0 { 1.0 } else { -1.0 }),
            vec![0.0],
            Activation::Sigmoid,
        )
        .unwrap();
        let disc = DiscriminatorState {
            net: DenseNet::new(vec![l0, l1]).unwrap(),
        };
        let samples = vec![
            (vec![1.0, 0.0], 1.0), // u = sigmoid(40) ≈ 1
            (vec![0.0, 1.0], 0.0), // u = sigmoid(-40) ≈ 0
        ];
        let out = frdisc_batch_loss(&disc, &samples, 1.0).unwrap();
        assert!(out.loss < 1e-12, "loss {}", out.loss);
    }
}

//! Trainable model state and the differentiable per-batch losses.
//!
//! The projection is linear, so prototype gradients flow back through the
//! per-class mean inputs: d(proto_c)/dW applied to a gradient g contributes
//! g ⊗ mean_input_c, exactly as if every shot had been projected
//! separately. Argmax selections (predicted classes, discriminator sample
//! choices) are treated as constants of the step, which is what makes the
//! losses piecewise-smooth and finite-difference checkable.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    argmax, compute_logits, compute_prototypes_with_means, FeatureHead, HeadKind, LogitVector,
    PrototypeSet,
};
use crate::data::Dataset;
use crate::episodes::EpisodeTask;
use crate::error::{Error, Result};
use crate::numeric::{
    cross_entropy, eos_loss,
    net::{Layer, Matrix, NetGrads},
    vector, Adam, ParamUpdate, Prng,
};
use crate::openset::{
    frdisc_batch_loss, frdisc_select, DiscriminatorState, GarbageState, LossWeights, Technique,
};
use crate::runner::config::ExperimentConfig;

const DISC_PARAM_NAMES: [(&str, &str); 2] = [
    ("disc.0.weights", "disc.0.bias"),
    ("disc.1.weights", "disc.1.bias"),
];

/// All trainable state for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelState {
    pub head: FeatureHead,
    pub head_kind: HeadKind,
    pub garbage: Option<GarbageState>,
    pub disc: Option<DiscriminatorState>,
    pub optimizer: Adam,
    pub iteration: u64,
    pub disc_backprop_phi: bool,
}

impl ModelState {
    /// Initialize for a config. Draw order is fixed: projection weights
    /// first, then the technique's extra parameters, so techniques without
    /// extras see identical projection initializations under one seed.
    pub fn init(cfg: &ExperimentConfig, d_in: usize, rng: &mut Prng) -> Self {
        let head = FeatureHead::random_init(d_in, cfg.d_feat, rng);
        let garbage = cfg
            .technique
            .requires_garbage()
            .then(|| GarbageState::init(cfg.d_feat, rng));
        let disc = cfg
            .technique
            .requires_discriminator()
            .then(|| DiscriminatorState::init(cfg.d_feat, rng));

        let mut optimizer = Adam::new(cfg.learning_rate);
        optimizer.register("phi.weights", cfg.d_feat * d_in);
        optimizer.register("phi.bias", cfg.d_feat);
        if let Some(g) = &garbage {
            optimizer.register("garbage.prototype", g.prototype.len());
        }
        if let Some(d) = &disc {
            for (li, layer) in d.net.layers().iter().enumerate() {
                let (wname, bname) = DISC_PARAM_NAMES[li];
                optimizer.register(wname, layer.weights.as_slice().len());
                optimizer.register(bname, layer.bias.len());
            }
        }

        ModelState {
            head,
            head_kind: cfg.head_kind,
            garbage,
            disc,
            optimizer,
            iteration: 0,
            disc_backprop_phi: cfg.disc_backprop_phi,
        }
    }

    /// One optimizer step over every registered parameter group.
    pub fn apply_grads(&mut self, grads: &ModelGrads) -> Result<()> {
        let ModelState {
            head,
            garbage,
            disc,
            optimizer,
            iteration,
            ..
        } = self;
        let mut updates: Vec<ParamUpdate<'_>> = Vec::with_capacity(7);
        let Layer { weights, bias, .. } = &mut head.net_mut().layers_mut()[0];
        updates.push(ParamUpdate {
            name: "phi.weights",
            params: weights.as_mut_slice(),
            grads: grads.phi_weights.as_slice(),
        });
        updates.push(ParamUpdate {
            name: "phi.bias",
            params: bias,
            grads: &grads.phi_bias,
        });
        if let Some(g) = garbage {
            updates.push(ParamUpdate {
                name: "garbage.prototype",
                params: &mut g.prototype,
                grads: grads
                    .garbage
                    .as_deref()
                    .expect("garbage grads missing"),
            });
        }
        if let Some(d) = disc {
            let dg = grads.disc.as_ref().expect("disc grads missing");
            for (li, layer) in d.net.layers_mut().iter_mut().enumerate() {
                let (wname, bname) = DISC_PARAM_NAMES[li];
                let Layer { weights, bias, .. } = layer;
                updates.push(ParamUpdate {
                    name: wname,
                    params: weights.as_mut_slice(),
                    grads: dg.layers[li].0.as_slice(),
                });
                updates.push(ParamUpdate {
                    name: bname,
                    params: bias,
                    grads: &dg.layers[li].1,
                });
            }
        }
        optimizer.step(&mut updates)?;
        *iteration += 1;
        Ok(())
    }
}

/// Gradients for every trainable, mirroring [`ModelState`] shapes.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub phi_weights: Matrix,
    pub phi_bias: Vec<f64>,
    pub garbage: Option<Vec<f64>>,
    pub disc: Option<NetGrads>,
}

impl ModelGrads {
    pub fn zeros(model: &ModelState) -> Self {
        ModelGrads {
            phi_weights: Matrix::zeros(model.head.d_feat(), model.head.d_in()),
            phi_bias: vec![0.0; model.head.d_feat()],
            garbage: model
                .garbage
                .as_ref()
                .map(|g| vec![0.0; g.prototype.len()]),
            disc: model.disc.as_ref().map(|d| d.net.zero_grads()),
        }
    }

    /// phi gradient from a feature-space gradient at a given raw input:
    /// dW += g ⊗ x, db += g.
    fn add_phi(&mut self, feat_grad: &[f64], input: &[f64]) {
        self.phi_weights.add_outer(feat_grad, input, 1.0);
        for (b, g) in self.phi_bias.iter_mut().zip(feat_grad) {
            *b += g;
        }
    }

    /// Same, scaled (used for the negative prototype side of residuals).
    fn add_phi_scaled(&mut self, feat_grad: &[f64], input: &[f64], scale: f64) {
        self.phi_weights.add_outer(feat_grad, input, scale);
        for (b, g) in self.phi_bias.iter_mut().zip(feat_grad) {
            *b += scale * g;
        }
    }
}

/// Cached forward pass of one episode.
pub struct TaskForward {
    pub protos: PrototypeSet,
    /// Per-class mean raw inputs (known classes only).
    pub mean_inputs: Vec<Vec<f64>>,
    pub query_feat: Vec<f64>,
    pub logits: LogitVector,
    pub probs: Vec<f64>,
    /// Argmax over the known-class probabilities.
    pub predicted: usize,
}

/// Forward one task, optionally with the garbage prototype appended.
pub fn forward_task(
    model: &ModelState,
    ds: &Dataset,
    task: &EpisodeTask,
    augment_garbage: bool,
) -> Result<TaskForward> {
    let (mut protos, mean_inputs) =
        compute_prototypes_with_means(&model.head, ds, task, model.head_kind)?;
    if augment_garbage {
        let garbage = model
            .garbage
            .as_ref()
            .expect("garbage technique without garbage state");
        protos = crate::openset::gc_augment(&protos, garbage)?;
    }
    let query_feat = model.head.embed(&ds.get(task.query).vector)?;
    let logits = compute_logits(&protos, &query_feat)?;
    let probs = logits.probs()?;
    let k = protos.known_classes();
    let predicted = argmax(&probs[..k]);
    Ok(TaskForward {
        protos,
        mean_inputs,
        query_feat,
        logits,
        probs,
        predicted,
    })
}

/// Gradient of the softmax cross-entropy at `target` w.r.t. the raw logits,
/// scaled by `weight`: weight · gamma · (p_j - [j == target]).
fn ce_logit_grads(tf: &TaskForward, gamma: f64, target: usize, weight: f64) -> Vec<f64> {
    tf.probs
        .iter()
        .enumerate()
        .map(|(j, &p)| weight * gamma * (p - f64::from(j == target)))
        .collect()
}

/// Backpropagate a raw-logit gradient through the head into the projection
/// (and the garbage prototype, when present).
fn backprop_logits(
    model: &ModelState,
    ds: &Dataset,
    task: &EpisodeTask,
    tf: &TaskForward,
    dlogits: &[f64],
    grads: &mut ModelGrads,
) {
    let d_feat = tf.query_feat.len();
    let mut dquery = vec![0.0; d_feat];
    let query_input = &ds.get(task.query).vector;
    let q = &tf.query_feat;

    match model.head_kind {
        HeadKind::Cosine => {
            let nq = vector::norm(q).max(vector::NORM_FLOOR);
            for (j, proto) in tf.protos.prototypes.iter().enumerate() {
                let dl = dlogits[j];
                if dl == 0.0 {
                    continue;
                }
                let np = vector::norm(proto).max(vector::NORM_FLOOR);
                let cos = tf.logits.values[j];
                let inv = 1.0 / (nq * np);
                // d cos / d q = p/(|q||p|) - cos·q/|q|²
                for i in 0..d_feat {
                    dquery[i] += dl * (proto[i] * inv - cos * q[i] / (nq * nq));
                }
                // d cos / d p = q/(|q||p|) - cos·p/|p|²
                let mut dproto = vec![0.0; d_feat];
                for i in 0..d_feat {
                    dproto[i] = dl * (q[i] * inv - cos * proto[i] / (np * np));
                }
                route_proto_grad(model, tf, j, &dproto, grads);
            }
        }
        HeadKind::NegDistance => {
            for (j, proto) in tf.protos.prototypes.iter().enumerate() {
                let dl = dlogits[j];
                if dl == 0.0 {
                    continue;
                }
                let diff = vector::sub(q, proto);
                let dist = vector::norm(&diff).max(vector::NORM_FLOOR);
                // s = -|q - p|: ds/dq = -(q-p)/d, ds/dp = (q-p)/d
                let mut dproto = vec![0.0; d_feat];
                for i in 0..d_feat {
                    dquery[i] += dl * (-diff[i] / dist);
                    dproto[i] = dl * (diff[i] / dist);
                }
                route_proto_grad(model, tf, j, &dproto, grads);
            }
        }
    }
    grads.add_phi(&dquery, query_input);
}

/// Send a prototype gradient to its owner: the projection (through the
/// class mean input) for known classes, the garbage vector otherwise.
fn route_proto_grad(
    model: &ModelState,
    tf: &TaskForward,
    proto_idx: usize,
    dproto: &[f64],
    grads: &mut ModelGrads,
) {
    let _ = model;
    if tf.protos.has_garbage && proto_idx == tf.protos.known_classes() {
        let g = grads
            .garbage
            .as_mut()
            .expect("garbage grads missing for garbage prototype");
        for (a, b) in g.iter_mut().zip(dproto) {
            *a += b;
        }
    } else {
        grads.add_phi(dproto, &tf.mean_inputs[proto_idx]);
    }
}

/// Frozen discriminator batch selection: which tasks contribute BCE terms,
/// with the predicted class pinned at selection time.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscSelection {
    pub samples: Vec<DiscSampleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscSampleSpec {
    pub task_index: usize,
    pub predicted: usize,
    /// 1.0 for correctly-classified known queries, 0.0 for unknown ones.
    pub target: f64,
}

/// How the discriminator batch is chosen: drawn fresh from the stream, or
/// replayed (finite-difference checks perturb parameters around a fixed
/// selection).
pub enum SelectionMode<'a> {
    Draw(&'a mut Prng),
    Frozen(&'a DiscSelection),
}

/// Per-batch bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub disc_positives: usize,
    pub disc_negatives: usize,
    /// True when a discriminator technique had no positives this batch.
    pub disc_skipped: bool,
}

/// Compute the technique's joint loss over one batch of tasks, with
/// gradients for every trainable. Known tasks carry the cross-entropy term;
/// the auxiliary term depends on the technique.
pub fn batch_loss_and_grads(
    model: &ModelState,
    ds: &Dataset,
    tasks: &[EpisodeTask],
    technique: Technique,
    weights: &LossWeights,
    mode: SelectionMode<'_>,
) -> Result<(BatchStats, ModelGrads, DiscSelection)> {
    let known_idx: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].is_known()).collect();
    let unknown_idx: Vec<usize> = (0..tasks.len()).filter(|&i| !tasks[i].is_known()).collect();
    if known_idx.is_empty() {
        return Err(Error::EmptyInput("training batch has no known tasks"));
    }
    let gamma = match model.head_kind {
        HeadKind::Cosine => crate::classifier::COSINE_TEMPERATURE,
        HeadKind::NegDistance => 1.0,
    };
    let use_garbage = technique == Technique::GarbageClass;
    let need_unknown_forward = match technique {
        Technique::SoftmaxMls | Technique::SoftmaxMss => false,
        Technique::Eos => weights.alpha_eos > 0.0,
        Technique::GarbageClass => true,
        Technique::FrDisc => weights.alpha_disc > 0.0,
    };

    let mut forwards: Vec<Option<TaskForward>> = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.is_known() || need_unknown_forward {
            forwards.push(Some(forward_task(model, ds, task, use_garbage)?));
        } else {
            forwards.push(None);
        }
    }

    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;
    let mut stats = BatchStats {
        loss: 0.0,
        disc_positives: 0,
        disc_negatives: 0,
        disc_skipped: false,
    };
    let mut selection = DiscSelection {
        samples: Vec::new(),
    };

    if use_garbage {
        // (K+1)-way cross-entropy over every task; unknown queries carry
        // the garbage label.
        let n = tasks.len() as f64;
        for (i, task) in tasks.iter().enumerate() {
            let tf = forwards[i].as_ref().unwrap();
            let garbage_slot = tf.protos.known_classes();
            let target = task.query_target.unwrap_or(garbage_slot);
            loss += cross_entropy(&tf.probs, target)? / n;
            let dlogits = ce_logit_grads(tf, gamma, target, 1.0 / n);
            backprop_logits(model, ds, task, tf, &dlogits, &mut grads);
        }
    } else {
        let n_known = known_idx.len() as f64;
        for &i in &known_idx {
            let tf = forwards[i].as_ref().unwrap();
            let target = tasks[i].query_target.unwrap();
            loss += cross_entropy(&tf.probs, target)? / n_known;
            let dlogits = ce_logit_grads(tf, gamma, target, 1.0 / n_known);
            backprop_logits(model, ds, &tasks[i], tf, &dlogits, &mut grads);
        }
    }

    match technique {
        Technique::Eos if weights.alpha_eos > 0.0 && !unknown_idx.is_empty() => {
            let n_unknown = unknown_idx.len() as f64;
            let w = weights.alpha_eos / n_unknown;
            for &i in &unknown_idx {
                let tf = forwards[i].as_ref().unwrap();
                loss += w * eos_loss(&tf.probs)?;
                // d eos / d logit_j = gamma · (p_j - 1/K)
                let k = tf.probs.len() as f64;
                let dlogits: Vec<f64> = tf
                    .probs
                    .iter()
                    .map(|&p| w * gamma * (p - 1.0 / k))
                    .collect();
                backprop_logits(model, ds, &tasks[i], tf, &dlogits, &mut grads);
            }
        }
        Technique::FrDisc if weights.alpha_disc > 0.0 => {
            let disc = model
                .disc
                .as_ref()
                .expect("fr-disc technique without discriminator");
            selection = match mode {
                SelectionMode::Frozen(sel) => sel.clone(),
                SelectionMode::Draw(rng) => {
                    let positives: Vec<usize> = known_idx
                        .iter()
                        .copied()
                        .filter(|&i| {
                            let tf = forwards[i].as_ref().unwrap();
                            Some(tf.predicted) == tasks[i].query_target
                        })
                        .collect();
                    let (pos, neg) = frdisc_select(&positives, &unknown_idx, rng);
                    let mut samples = Vec::with_capacity(pos.len() + neg.len());
                    for &i in &pos {
                        samples.push(DiscSampleSpec {
                            task_index: i,
                            predicted: forwards[i].as_ref().unwrap().predicted,
                            target: 1.0,
                        });
                    }
                    for &i in &neg {
                        samples.push(DiscSampleSpec {
                            task_index: i,
                            predicted: forwards[i].as_ref().unwrap().predicted,
                            target: 0.0,
                        });
                    }
                    DiscSelection { samples }
                }
            };
            stats.disc_positives = selection.samples.iter().filter(|s| s.target == 1.0).count();
            stats.disc_negatives = selection.samples.len() - stats.disc_positives;
            if selection.samples.is_empty() {
                stats.disc_skipped = true;
            } else {
                debug_assert_eq!(stats.disc_positives, stats.disc_negatives);
                let batch: Vec<(Vec<f64>, f64)> = selection
                    .samples
                    .iter()
                    .map(|s| {
                        let tf = forwards[s.task_index].as_ref().unwrap();
                        (
                            vector::sub(&tf.query_feat, &tf.protos.prototypes[s.predicted]),
                            s.target,
                        )
                    })
                    .collect();
                let out = frdisc_batch_loss(disc, &batch, weights.alpha_disc)?;
                loss += out.loss;
                grads
                    .disc
                    .as_mut()
                    .expect("disc grads missing")
                    .add(&out.disc_grads);
                if model.disc_backprop_phi {
                    for (spec, rg) in selection.samples.iter().zip(&out.residual_grads) {
                        let tf = forwards[spec.task_index].as_ref().unwrap();
                        // residual = phi(query) - phi(mean input of predicted)
                        grads.add_phi(rg, &ds.get(tasks[spec.task_index].query).vector);
                        grads.add_phi_scaled(rg, &tf.mean_inputs[spec.predicted], -1.0);
                    }
                }
            }
        }
        _ => {}
    }

    stats.loss = loss;
    Ok((stats, grads, selection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, LabelSplit, SplitSide, SyntheticConfig};
    use crate::episodes::{sample_known_task, sample_unknown_task, EpisodeSpec};

    fn toy_config(technique: Technique, head_kind: HeadKind) -> ExperimentConfig {
        ExperimentConfig {
            dataset: crate::runner::config::DatasetSource::Synthetic {
                num_classes: 8,
                items_per_class: 6,
                d_in: 6,
                inter_class_scale: 2.0,
                intra_class_sigma: 0.8,
            },
            k_way: 3,
            n_shot: 2,
            d_feat: 4,
            technique,
            head_kind,
            ..Default::default()
        }
    }

    fn toy_world(seed: u64) -> (Dataset, LabelSplit, EpisodeSpec) {
        let ds = generate_synthetic(&SyntheticConfig {
            num_classes: 8,
            items_per_class: 6,
            dim: 6,
            inter_class_scale: 2.0,
            intra_class_sigma: 0.8,
            seed,
        })
        .unwrap();
        let split = LabelSplit {
            train_labels: ds.label_set().to_vec(),
            test_labels: vec![],
        };
        let spec = EpisodeSpec {
            k_way: 3,
            n_shot: 2,
            split_side: SplitSide::Train,
        };
        (ds, split, spec)
    }

    fn batch(ds: &Dataset, split: &LabelSplit, spec: &EpisodeSpec, rng: &mut Prng) -> Vec<EpisodeTask> {
        let mut tasks = Vec::new();
        for _ in 0..2 {
            tasks.push(sample_known_task(ds, split, spec, rng).unwrap());
            tasks.push(sample_unknown_task(ds, split, spec, rng).unwrap());
        }
        tasks
    }

    /// Randomize every trainable so finite differences probe generic points
    /// (the zero-initialized discriminator output layer is made nonzero).
    fn randomize(model: &mut ModelState, rng: &mut Prng) {
        for layer in model.head.net_mut().layers_mut() {
            for w in layer.weights.as_mut_slice() {
                *w = rng.next_normal() * 0.6;
            }
            for b in &mut layer.bias {
                *b = rng.next_normal() * 0.1;
            }
        }
        if let Some(g) = &mut model.garbage {
            for v in &mut g.prototype {
                *v = rng.next_normal() * 0.5;
            }
        }
        if let Some(d) = &mut model.disc {
            for layer in d.net.layers_mut() {
                for w in layer.weights.as_mut_slice() {
                    *w = rng.next_normal() * 0.6;
                }
                for b in &mut layer.bias {
                    *b = rng.next_normal() * 0.1;
                }
            }
        }
    }

    fn loss_at(
        model: &ModelState,
        ds: &Dataset,
        tasks: &[EpisodeTask],
        technique: Technique,
        weights: &LossWeights,
        sel: &DiscSelection,
    ) -> f64 {
        batch_loss_and_grads(model, ds, tasks, technique, weights, SelectionMode::Frozen(sel))
            .unwrap()
            .0
            .loss
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Central finite differences over every parameter of every group for
    /// one (model, batch) instance.
    fn check_all_params(
        model: &ModelState,
        ds: &Dataset,
        tasks: &[EpisodeTask],
        technique: Technique,
        weights: &LossWeights,
        rng: &mut Prng,
    ) {
        let (_, grads, sel) = batch_loss_and_grads(
            model,
            ds,
            tasks,
            technique,
            weights,
            SelectionMode::Draw(rng),
        )
        .unwrap();
        let h = 1e-5;

        let n_w = model.head.net().layers()[0].weights.as_slice().len();
        for idx in 0..n_w {
            let mut plus = model.clone();
            plus.head.net_mut().layers_mut()[0].weights.as_mut_slice()[idx] += h;
            let mut minus = model.clone();
            minus.head.net_mut().layers_mut()[0].weights.as_mut_slice()[idx] -= h;
            let fd = (loss_at(&plus, ds, tasks, technique, weights, &sel)
                - loss_at(&minus, ds, tasks, technique, weights, &sel))
                / (2.0 * h);
            let an = grads.phi_weights.as_slice()[idx];
            assert!(rel_err(fd, an) < 1e-4, "phi weight {idx}: fd={fd} an={an}");
        }
        for idx in 0..model.head.d_feat() {
            let mut plus = model.clone();
            plus.head.net_mut().layers_mut()[0].bias[idx] += h;
            let mut minus = model.clone();
            minus.head.net_mut().layers_mut()[0].bias[idx] -= h;
            let fd = (loss_at(&plus, ds, tasks, technique, weights, &sel)
                - loss_at(&minus, ds, tasks, technique, weights, &sel))
                / (2.0 * h);
            let an = grads.phi_bias[idx];
            assert!(rel_err(fd, an) < 1e-4, "phi bias {idx}: fd={fd} an={an}");
        }
        if model.garbage.is_some() {
            let len = model.garbage.as_ref().unwrap().prototype.len();
            for idx in 0..len {
                let mut plus = model.clone();
                plus.garbage.as_mut().unwrap().prototype[idx] += h;
                let mut minus = model.clone();
                minus.garbage.as_mut().unwrap().prototype[idx] -= h;
                let fd = (loss_at(&plus, ds, tasks, technique, weights, &sel)
                    - loss_at(&minus, ds, tasks, technique, weights, &sel))
                    / (2.0 * h);
                let an = grads.garbage.as_ref().unwrap()[idx];
                assert!(rel_err(fd, an) < 1e-4, "garbage {idx}: fd={fd} an={an}");
            }
        }
        if model.disc.is_some() {
            for li in 0..2 {
                let n = model.disc.as_ref().unwrap().net.layers()[li]
                    .weights
                    .as_slice()
                    .len();
                for idx in 0..n {
                    let mut plus = model.clone();
                    plus.disc.as_mut().unwrap().net.layers_mut()[li]
                        .weights
                        .as_mut_slice()[idx] += h;
                    let mut minus = model.clone();
                    minus.disc.as_mut().unwrap().net.layers_mut()[li]
                        .weights
                        .as_mut_slice()[idx] -= h;
                    let fd = (loss_at(&plus, ds, tasks, technique, weights, &sel)
                        - loss_at(&minus, ds, tasks, technique, weights, &sel))
                        / (2.0 * h);
                    let an = grads.disc.as_ref().unwrap().layers[li].0.as_slice()[idx];
                    assert!(
                        rel_err(fd, an) < 1e-4,
                        "disc layer {li} weight {idx}: fd={fd} an={an}"
                    );
                }
                let nb = model.disc.as_ref().unwrap().net.layers()[li].bias.len();
                for idx in 0..nb {
                    let mut plus = model.clone();
                    plus.disc.as_mut().unwrap().net.layers_mut()[li].bias[idx] += h;
                    let mut minus = model.clone();
                    minus.disc.as_mut().unwrap().net.layers_mut()[li].bias[idx] -= h;
                    let fd = (loss_at(&plus, ds, tasks, technique, weights, &sel)
                        - loss_at(&minus, ds, tasks, technique, weights, &sel))
                        / (2.0 * h);
                    let an = grads.disc.as_ref().unwrap().layers[li].1[idx];
                    assert!(
                        rel_err(fd, an) < 1e-4,
                        "disc layer {li} bias {idx}: fd={fd} an={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_techniques() {
        let weights = LossWeights {
            alpha_eos: 0.5,
            alpha_disc: 1.0,
        };
        let mut rng = Prng::new(314);
        let mut cases = 0;
        for round in 0..24 {
            let (ds, split, spec) = toy_world(100 + round);
            for technique in [
                Technique::SoftmaxMss,
                Technique::Eos,
                Technique::GarbageClass,
                Technique::FrDisc,
            ] {
                for head_kind in [HeadKind::Cosine, HeadKind::NegDistance] {
                    let cfg = toy_config(technique, head_kind);
                    let mut model = ModelState::init(&cfg, ds.dim(), &mut rng);
                    randomize(&mut model, &mut rng);
                    let tasks = batch(&ds, &split, &spec, &mut rng);
                    check_all_params(&model, &ds, &tasks, technique, &weights, &mut rng);
                    cases += 1;
                }
            }
        }
        assert!(cases >= 100, "only {cases} randomized cases");
    }

    #[test]
    fn apply_grads_steps_every_group() {
        let mut rng = Prng::new(9);
        let (ds, split, spec) = toy_world(7);
        let cfg = toy_config(Technique::FrDisc, HeadKind::Cosine);
        let mut model = ModelState::init(&cfg, ds.dim(), &mut rng);
        randomize(&mut model, &mut rng);
        let tasks = batch(&ds, &split, &spec, &mut rng);
        let weights = LossWeights::default();
        let before = model.head.net().layers()[0].weights.as_slice().to_vec();
        let (_, grads, _) = batch_loss_and_grads(
            &model,
            &ds,
            &tasks,
            Technique::FrDisc,
            &weights,
            SelectionMode::Draw(&mut rng),
        )
        .unwrap();
        model.apply_grads(&grads).unwrap();
        assert_eq!(model.iteration, 1);
        let after = model.head.net().layers()[0].weights.as_slice();
        assert!(before.iter().zip(after).any(|(a, b)| a != b));
    }

    #[test]
    fn disc_selection_is_balanced_or_skipped() {
        let mut rng = Prng::new(41);
        let (ds, split, spec) = toy_world(21);
        let cfg = toy_config(Technique::FrDisc, HeadKind::Cosine);
        let model = ModelState::init(&cfg, ds.dim(), &mut rng);
        let weights = LossWeights::default();
        for _ in 0..50 {
            let tasks = batch(&ds, &split, &spec, &mut rng);
            let (stats, _, _) = batch_loss_and_grads(
                &model,
                &ds,
                &tasks,
                Technique::FrDisc,
                &weights,
                SelectionMode::Draw(&mut rng),
            )
            .unwrap();
            if stats.disc_skipped {
                assert_eq!(stats.disc_positives, 0);
            } else {
                assert_eq!(stats.disc_positives, stats.disc_negatives);
                assert!(stats.disc_positives > 0);
            }
        }
    }

    #[test]
    fn zero_auxiliary_weights_reduce_to_plain_cross_entropy() {
        let mut rng = Prng::new(5);
        let (ds, split, spec) = toy_world(3);
        let zero = LossWeights {
            alpha_eos: 0.0,
            alpha_disc: 0.0,
        };
        let tasks = batch(&ds, &split, &spec, &mut Prng::new(11));

        let cfg = toy_config(Technique::SoftmaxMss, HeadKind::Cosine);
        let base_model = ModelState::init(&cfg, ds.dim(), &mut Prng::new(200));
        let (base_stats, base_grads, _) = batch_loss_and_grads(
            &base_model,
            &ds,
            &tasks,
            Technique::SoftmaxMss,
            &zero,
            SelectionMode::Draw(&mut rng),
        )
        .unwrap();

        let cfg = toy_config(Technique::Eos, HeadKind::Cosine);
        let eos_model = ModelState::init(&cfg, ds.dim(), &mut Prng::new(200));
        let (eos_stats, eos_grads, _) = batch_loss_and_grads(
            &eos_model,
            &ds,
            &tasks,
            Technique::Eos,
            &zero,
            SelectionMode::Draw(&mut rng),
        )
        .unwrap();

        assert_eq!(base_stats.loss, eos_stats.loss);
        assert_eq!(
            base_grads.phi_weights.as_slice(),
            eos_grads.phi_weights.as_slice()
        );
        assert_eq!(base_grads.phi_bias, eos_grads.phi_bias);
    }
}

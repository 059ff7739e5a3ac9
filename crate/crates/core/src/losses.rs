//! Training objectives: the point-to-subspace triplet loss with in-batch
//! hard negatives, the shared classification loss and the modality
//! adversarial loss, combined as `α·triplet + β·classification − adversarial`.
//!
//! All losses go through one engine, [`evaluate`]. It runs the forward pass
//! once for the whole batch, seeds the upstream gradient of every loss with
//! its coefficient and back-propagates once, so the gradient of any linear
//! combination is produced by the same code path as the combination itself.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, ProposalBag};
use crate::error::{Error, Result};
use crate::geometry::{self, Subspace, TruncatedBag};
use crate::model::{self, AttentionTrace, ModelState, Parameters, Weighting};
use crate::numerics::{self, Matrix};

/// `ln(1e-12)`: log-probabilities are clamped below at this value.
pub const LOG_FLOOR: f64 = -27.631021115928547;

fn log_ceiling() -> f64 {
    (-1e-12f64).ln_1p()
}

/// Ablation switches. `wo_gmil` takes precedence over `wo_graph`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Drop the triplet term from the objective.
    pub wo_tl: bool,
    /// Drop the adversarial term and all discriminator updates.
    pub wo_al: bool,
    /// Drop the classification term.
    pub wo_cl: bool,
    /// Use `‖u − Z‖²` instead of the point-to-subspace distance.
    pub wo_ga: bool,
    /// Uniform proposal weights and intact bags.
    pub wo_gmil: bool,
    /// Plain attention without graph smoothing.
    pub wo_graph: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = ["wo_tl", "wo_al", "wo_cl", "wo_ga", "wo_gmil", "wo_graph"];

    pub fn weighting(&self) -> Weighting {
        if self.wo_gmil {
            Weighting::Uniform
        } else if self.wo_graph {
            Weighting::Plain
        } else {
            Weighting::Graph
        }
    }

    /// Enables the switch called `name` (one of [`Ablations::NAMES`]).
    pub fn set(&mut self, name: &str) -> Result<()> {
        let flag = match name.trim_start_matches("--").replace('-', "_").as_str() {
            "wo_tl" => &mut self.wo_tl,
            "wo_al" => &mut self.wo_al,
            "wo_cl" => &mut self.wo_cl,
            "wo_ga" => &mut self.wo_ga,
            "wo_gmil" => &mut self.wo_gmil,
            "wo_graph" => &mut self.wo_graph,
            _ => return Err(Error::InvalidConfig(format!("unknown ablation {name:?}"))),
        };
        *flag = true;
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [self.wo_tl, self.wo_al, self.wo_cl, self.wo_ga, self.wo_gmil, self.wo_graph];
        Self::NAMES.iter().zip(flags).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

/// Everything the losses need besides the batch and the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    /// Proposals kept in a truncated bag.
    pub truncation: usize,
    /// Ridge added to the Gram matrix of a truncated bag.
    pub ridge: f64,
    pub ablations: Ablations,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: 0.1,
            beta: 10.0,
            margin: 0.1,
            truncation: 5,
            ridge: 1e-6,
            ablations: Ablations::default(),
        }
    }
}

impl LossSettings {
    pub fn effective_alpha(&self) -> f64 {
        if self.ablations.wo_tl {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablations.wo_cl {
            0.0
        } else {
            self.beta
        }
    }

    pub fn adversarial_active(&self) -> bool {
        !self.ablations.wo_al
    }

    /// Truncated bag size for a bag of `k` proposals.
    pub fn bag_size(&self, k: usize) -> usize {
        if self.ablations.wo_gmil {
            k
        } else {
            self.truncation
        }
    }

    /// Seeds for the total objective.
    pub fn total_coefficients(&self) -> Coefficients {
        Coefficients {
            triplet: self.effective_alpha(),
            classification: self.effective_beta(),
            adversarial: if self.adversarial_active() { -1.0 } else { 0.0 },
        }
    }

    pub fn report(&self, c: &Components) -> LossReport {
        let adversarial = if self.adversarial_active() { c.adversarial } else { 0.0 };
        LossReport {
            triplet: c.triplet,
            classification: c.classification,
            adversarial,
            total: self.effective_alpha() * c.triplet + self.effective_beta() * c.classification - adversarial,
        }
    }
}

/// Loss values as logged. `total = α·triplet + β·classification −
/// adversarial` with the ablation-adjusted coefficients; a disabled
/// adversarial term is reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub triplet: f64,
    pub classification: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossReport {
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.triplet += r.triplet;
            m.classification += r.classification;
            m.adversarial += r.adversarial;
            m.total += r.total;
        }
        LossReport {
            triplet: m.triplet / n,
            classification: m.classification / n,
            adversarial: m.adversarial / n,
            total: m.total / n,
        }
    }
}

/// Raw loss values, before any coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub triplet: f64,
    pub classification: f64,
    pub adversarial: f64,
}

/// Weights of each loss in the scalar being differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub triplet: f64,
    pub classification: f64,
    pub adversarial: f64,
}

impl Coefficients {
    pub const TRIPLET: Coefficients = Coefficients {
        triplet: 1.0,
        classification: 0.0,
        adversarial: 0.0,
    };
    pub const CLASSIFICATION: Coefficients = Coefficients {
        triplet: 0.0,
        classification: 1.0,
        adversarial: 0.0,
    };
    pub const ADVERSARIAL: Coefficients = Coefficients {
        triplet: 0.0,
        classification: 0.0,
        adversarial: 1.0,
    };
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub bag: &'a ProposalBag,
    pub image: &'a [f64],
    pub label: usize,
}

/// A mini-batch of labelled video/image pairs borrowed from a dataset.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    items: Vec<BatchItem<'a>>,
    categories: usize,
}

impl<'a> Batch<'a> {
    pub fn new(items: Vec<BatchItem<'a>>, categories: usize) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::InvalidConfig(format!("a batch needs at least two pairs, got {}", items.len())));
        }
        let mut seen = vec![false; categories];
        for item in &items {
            if item.label >= categories {
                return Err(Error::LabelOutOfRange {
                    label: item.label,
                    categories,
                });
            }
            seen[item.label] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::InvalidConfig("a batch needs at least two distinct labels".into()));
        }
        let (d1, d2) = (items[0].bag.features().cols(), items[0].image.len());
        for item in &items {
            if item.bag.features().cols() != d1 {
                return Err(Error::dims("batch video features", d1, item.bag.features().cols()));
            }
            if item.image.len() != d2 {
                return Err(Error::dims("batch image features", d2, item.image.len()));
            }
        }
        Ok(Batch { items, categories })
    }

    pub fn from_dataset(dataset: &'a PairedDataset, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                let p = &dataset.pairs[i];
                BatchItem {
                    bag: &p.video,
                    image: &p.image,
                    label: p.label,
                }
            })
            .collect();
        Batch::new(items, dataset.categories)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[BatchItem<'a>] {
        &self.items
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }
}

/// Index of the differently-labelled candidate closest to `anchor` in
/// point-to-subspace distance. Ties go to the lowest index.
pub fn hardest_negative(
    anchor: &[f64],
    anchor_label: usize,
    candidates: &[TruncatedBag],
    labels: &[usize],
    ridge: f64,
) -> Result<usize> {
    if candidates.len() != labels.len() {
        return Err(Error::dims("hardest_negative labels", candidates.len(), labels.len()));
    }
    let mut distances = Vec::with_capacity(candidates.len());
    for (bag, &label) in candidates.iter().zip(labels) {
        distances.push(if label == anchor_label {
            f64::INFINITY
        } else {
            geometry::point_to_subspace_distance(anchor, bag, ridge)?
        });
    }
    nearest_negative(&distances, labels, anchor_label).ok_or(Error::NoNegativeAvailable { anchor: 0 })
}

fn nearest_negative(distances: &[f64], labels: &[usize], anchor_label: usize) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..distances.len() {
        if labels[j] != anchor_label && best.is_none_or(|b| distances[j] < distances[b]) {
            best = Some(j);
        }
    }
    best
}

/// Per-item forward state.
struct ItemForward {
    /// Row range of this bag in the stacked proposal matrix.
    start: usize,
    projected: Matrix,
    attention: Option<AttentionTrace>,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

/// Output of [`evaluate`].
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub components: Components,
    /// Gradient of `Σ coefficient · loss`. Generator groups are left at zero
    /// when generator gradients were not requested.
    pub grads: Parameters,
    /// Fraction of the `2n` embeddings the discriminator assigns to the
    /// right modality.
    pub discriminator_accuracy: f64,
    /// Proposal weights of each bag in the batch.
    pub weights: Vec<Vec<f64>>,
    /// Hard negative chosen for each anchor, when the triplet loss ran.
    pub negatives: Option<Vec<usize>>,
}

/// Which parts of [`evaluate`] to run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Request {
    pub coefficients: Coefficients,
    /// Back-propagate into the projection, attention and classifier groups.
    pub generator_grads: bool,
    /// Compute the triplet loss even when its coefficient is zero.
    pub report_triplet: bool,
}

/// Forward pass over the whole batch, then one backward pass seeded with
/// `request.coefficients`.
pub fn evaluate(batch: &Batch, model: &ModelState, settings: &LossSettings, request: Request) -> Result<Evaluation> {
    let params = &model.params;
    let coef = request.coefficients;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let categories = params.classifier.categories();
    if batch.categories() > categories {
        return Err(Error::dims("batch categories", categories, batch.categories()));
    }

    // Projection: all proposals of all bags go through the video network as
    // one matrix.
    let total_rows: usize = batch.items().iter().map(|it| it.bag.len()).sum();
    let d1 = batch.items()[0].bag.features().cols();
    let mut stacked = Vec::with_capacity(total_rows * d1);
    for item in batch.items() {
        stacked.extend_from_slice(item.bag.features().as_slice());
    }
    let stacked = Matrix::new(total_rows, d1, stacked)?;
    let (projected_all, video_trace) = params.projection.video.forward_traced(&stacked)?;
    let d2 = batch.items()[0].image.len();
    let images = Matrix::new(n, d2, batch.items().iter().flat_map(|it| it.image.iter().copied()).collect())?;
    let (u_all, image_trace) = params.projection.image.forward_traced(&images)?;
    let r = u_all.cols();

    let mut items = Vec::with_capacity(n);
    let mut start = 0;
    for item in batch.items() {
        let k = item.bag.len();
        let projected = projected_all.select_rows(&(start..start + k).collect::<Vec<_>>());
        let attention = match model.weighting {
            Weighting::Graph => Some(model::attention_forward(&projected, Some(item.bag.adjacency()), &params.attention)?),
            Weighting::Plain => Some(model::attention_forward(&projected, None, &params.attention)?),
            Weighting::Uniform => None,
        };
        let weights = match &attention {
            Some(t) => t.weights.clone(),
            None => model::uniform_weights(k),
        };
        let pooled = model::aggregate(&projected, &weights)?;
        items.push(ItemForward {
            start,
            projected,
            attention,
            weights,
            pooled,
        });
        start += k;
    }

    let mut grads = params.zeros_like();
    let mut g_pooled = vec![vec![0.0; r]; n];
    let mut g_image = Matrix::zeros(n, r);
    let mut g_projected: Vec<Matrix> = items.iter().map(|f| Matrix::zeros(f.projected.rows(), r)).collect();

    // Classification, shared classifier on Z and ū.
    let mut classification = 0.0;
    for (i, (item, fwd)) in batch.items().iter().zip(&items).enumerate() {
        for video in [true, false] {
            let x = if video { fwd.pooled.as_slice() } else { u_all.row(i) };
            let logits = model::classifier_logits(x, &params.classifier)?;
            let lp = numerics::log_softmax(&logits);
            let target = lp[item.label];
            if target > LOG_FLOOR {
                classification -= target;
                if coef.classification != 0.0 && request.generator_grads {
                    let mut g: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                    g[item.label] -= 1.0;
                    g.iter_mut().for_each(|v| *v *= coef.classification * inv_n);
                    let g_x = model::classifier_backward(x, &params.classifier, &g, &mut grads.classifier);
                    let dst = if video { g_pooled[i].as_mut_slice() } else { g_image.row_mut(i) };
                    numerics::axpy(1.0, &g_x, dst);
                }
            } else {
                classification -= LOG_FLOOR;
            }
        }
    }
    classification *= inv_n;

    // Adversarial: the discriminator sees Z₁..Zₙ then ū₁..ūₙ.
    let mut disc_rows = Vec::with_capacity(2 * n * r);
    for fwd in &items {
        disc_rows.extend_from_slice(&fwd.pooled);
    }
    disc_rows.extend_from_slice(u_all.as_slice());
    let disc_in = Matrix::new(2 * n, r, disc_rows)?;
    let (logits, disc_trace) = params.discriminator.mlp.forward_traced(&disc_in)?;
    let ceiling = log_ceiling();
    let mut adversarial = 0.0;
    let mut correct = 0usize;
    let mut g_logits = Matrix::zeros(2 * n, 1);
    for s in 0..2 * n {
        let x = logits.get(s, 0);
        let video = s < n;
        if (video && x > 0.0) || (!video && x < 0.0) {
            correct += 1;
        }
        // log δ for videos, log(1 − δ) = log σ(−x) for images.
        let lp = if video { numerics::log_sigmoid(x) } else { numerics::log_sigmoid(-x) };
        if lp <= LOG_FLOOR {
            adversarial -= LOG_FLOOR;
        } else if lp >= ceiling {
            adversarial -= ceiling;
        } else {
            adversarial -= lp;
            let g = if video { numerics::sigmoid(x) - 1.0 } else { numerics::sigmoid(x) };
            g_logits.set(s, 0, coef.adversarial * g * inv_n);
        }
    }
    adversarial *= inv_n;
    if coef.adversarial != 0.0 {
        let g_in = params
            .discriminator
            .mlp
            .backward(&disc_trace, &g_logits, &mut grads.discriminator.mlp, request.generator_grads);
        if let Some(g_in) = g_in {
            for i in 0..n {
                numerics::axpy(1.0, g_in.row(i), &mut g_pooled[i]);
                numerics::axpy(1.0, g_in.row(n + i), g_image.row_mut(i));
            }
        }
    }

    // Triplet with per-anchor hardest negative.
    let mut triplet = 0.0;
    let mut negatives = None;
    if coef.triplet != 0.0 || request.report_triplet {
        let labels = batch.labels();
        let want_grad = coef.triplet != 0.0 && request.generator_grads;
        let anchors: Vec<Anchor> = if settings.ablations.wo_ga {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let u = u_all.row(i);
                    let d: Vec<f64> = items.iter().map(|f| numerics::squared_distance(u, &f.pooled)).collect();
                    Anchor::pick(i, &d, &labels, settings.margin)
                })
                .collect::<Result<_>>()?
        } else {
            let subspaces: Vec<(Subspace, Vec<usize>)> = items
                .iter()
                .map(|f| {
                    let bag = geometry::truncate_bag(&f.projected, &f.weights, settings.bag_size(f.projected.rows()))?;
                    Ok((Subspace::new(bag.basis, settings.ridge)?, bag.indices))
                })
                .collect::<Result<_>>()?;
            // by_bag[j][i]: distance from anchor i to bag j.
            let by_bag: Vec<Vec<f64>> = subspaces
                .par_iter()
                .map(|(s, _)| s.distances(&u_all))
                .collect::<Result<_>>()?;
            let anchors: Vec<Anchor> = (0..n)
                .map(|i| {
                    let d: Vec<f64> = by_bag.iter().map(|row| row[i]).collect();
                    Anchor::pick(i, &d, &labels, settings.margin)
                })
                .collect::<Result<_>>()?;
            if want_grad {
                for a in anchors.iter().filter(|a| a.hinge > 0.0) {
                    let u = u_all.row(a.index);
                    for (j, sign) in [(a.index, 1.0), (a.negative, -1.0)] {
                        let (subspace, kept) = &subspaces[j];
                        let g = subspace.distance_gradient(u)?;
                        numerics::axpy(sign * coef.triplet, &g.wrt_point, g_image.row_mut(a.index));
                        for (row, &p) in kept.iter().enumerate() {
                            numerics::axpy(sign * coef.triplet, g.wrt_basis.row(row), g_projected[j].row_mut(p));
                        }
                    }
                }
            }
            anchors
        };
        if want_grad && settings.ablations.wo_ga {
            for a in anchors.iter().filter(|a| a.hinge > 0.0) {
                for (j, sign) in [(a.index, 1.0), (a.negative, -1.0)] {
                    // ∂‖u − Z‖²/∂u = 2(u − Z) = −∂/∂Z
                    let diff: Vec<f64> = u_all.row(a.index).iter().zip(&items[j].pooled).map(|(u, z)| u - z).collect();
                    let s = 2.0 * sign * coef.triplet;
                    numerics::axpy(s, &diff, g_image.row_mut(a.index));
                    numerics::axpy(-s, &diff, &mut g_pooled[j]);
                }
            }
        }
        triplet = anchors.iter().map(|a| a.hinge).sum();
        negatives = Some(anchors.iter().map(|a| a.negative).collect());
    }

    let components = Components {
        triplet,
        classification,
        adversarial,
    };
    if !(triplet.is_finite() && classification.is_finite() && adversarial.is_finite()) {
        return Err(Error::NonFiniteLoss(format!(
            "triplet = {triplet}, classification = {classification}, adversarial = {adversarial}"
        )));
    }

    if request.generator_grads {
        for (i, fwd) in items.iter().enumerate() {
            let g_w = model::aggregate_backward(&fwd.projected, &fwd.weights, &g_pooled[i], &mut g_projected[i]);
            if let Some(trace) = &fwd.attention {
                let g_v = model::attention_backward(trace, &fwd.projected, &params.attention, &g_w, &mut grads.attention);
                g_projected[i].add_scaled(1.0, &g_v);
            }
        }
        let mut g_all = Matrix::zeros(total_rows, r);
        for (fwd, g) in items.iter().zip(&g_projected) {
            let len = g.as_slice().len();
            g_all.as_mut_slice()[fwd.start * r..fwd.start * r + len].copy_from_slice(g.as_slice());
        }
        params
            .projection
            .video
            .backward(&video_trace, &g_all, &mut grads.projection.video, false);
        params
            .projection
            .image
            .backward(&image_trace, &g_image, &mut grads.projection.image, false);
    }

    Ok(Evaluation {
        components,
        grads,
        discriminator_accuracy: correct as f64 / (2 * n) as f64,
        weights: items.into_iter().map(|f| f.weights).collect(),
        negatives,
    })
}

struct Anchor {
    index: usize,
    negative: usize,
    hinge: f64,
}

impl Anchor {
    fn pick(index: usize, distances: &[f64], labels: &[usize], margin: f64) -> Result<Anchor> {
        let negative =
            nearest_negative(distances, labels, labels[index]).ok_or(Error::NoNegativeAvailable { anchor: index })?;
        let hinge = (distances[index] - distances[negative] + margin).max(0.0);
        Ok(Anchor { index, negative, hinge })
    }
}

fn single(batch: &Batch, model: &ModelState, settings: &LossSettings, coefficients: Coefficients) -> Result<Evaluation> {
    evaluate(
        batch,
        model,
        settings,
        Request {
            coefficients,
            generator_grads: true,
            report_triplet: false,
        },
    )
}

/// `Σᵢ [d(ūᵢ, V̄ᵢ′) − d(ūᵢ, V̄ⱼ′) + m]₊` with `j` the hardest negative of
/// anchor `i`, and its gradient.
pub fn triplet_loss(batch: &Batch, model: &ModelState, settings: &LossSettings) -> Result<(f64, Parameters)> {
    let e = single(batch, model, settings, Coefficients::TRIPLET)?;
    Ok((e.components.triplet, e.grads))
}

/// `−(1/n) Σᵢ [log p_yᵢ(Zᵢ) + log p_yᵢ(ūᵢ)]` and its gradient.
pub fn classification_loss(batch: &Batch, model: &ModelState) -> Result<(f64, Parameters)> {
    let e = single(batch, model, &LossSettings::default(), Coefficients::CLASSIFICATION)?;
    Ok((e.components.classification, e.grads))
}

/// `−(1/n) Σᵢ [log δ(Zᵢ) + log(1 − δ(ūᵢ))]` and its gradient.
pub fn adversarial_loss(batch: &Batch, model: &ModelState) -> Result<(f64, Parameters)> {
    let e = single(batch, model, &LossSettings::default(), Coefficients::ADVERSARIAL)?;
    Ok((e.components.adversarial, e.grads))
}

/// The combined objective and its gradient for every parameter group.
pub fn total_loss(batch: &Batch, model: &ModelState, settings: &LossSettings) -> Result<(LossReport, Parameters)> {
    let e = evaluate(
        batch,
        model,
        settings,
        Request {
            coefficients: settings.total_coefficients(),
            generator_grads: true,
            report_triplet: true,
        },
    )?;
    Ok((settings.report(&e.components), e.grads))
}

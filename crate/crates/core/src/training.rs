//! Alternating minimax optimisation: `t` generator steps descending the
//! total objective over θg = {projection, attention, classifier}, then one
//! discriminator step descending the adversarial loss over θd. Plain SGD
//! with a constant learning rate; no optimizer state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, ProposalBag, Split};
use crate::error::{Error, Result};
use crate::losses::{self, Ablations, Batch, Coefficients, LossReport, LossSettings, Request};
use crate::model::{self, Activation, ModelDims, ModelState, ParamGroup};
use crate::numerics;

/// Named (α, β) pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossPreset {
    /// α = 0.1, β = 10.
    #[default]
    Main,
    /// α = 10, β = 0.01.
    Supplementary,
}

impl LossPreset {
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            LossPreset::Main => (0.1, 10.0),
            LossPreset::Supplementary => (10.0, 0.01),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "main" => Ok(LossPreset::Main),
            "supplementary" => Ok(LossPreset::Supplementary),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss preset {other:?} (expected \"main\" or \"supplementary\")"
            ))),
        }
    }
}

/// Stop once the mean total loss has not improved by `min_delta` for
/// `patience` consecutive outer iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Which (α, β) pair `alpha`/`beta` were taken from; informational.
    pub preset: LossPreset,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    /// `b`, proposals kept per truncated bag.
    pub truncation: usize,
    pub ridge: f64,
    pub r: usize,
    pub r_prime: usize,
    pub video_hidden: [usize; 2],
    pub image_hidden: [usize; 2],
    pub discriminator_hidden: usize,
    pub activation: Activation,
    /// `n`; clipped to the number of training pairs.
    pub batch_size: usize,
    /// `t`, generator steps per outer iteration.
    pub generator_steps: usize,
    pub learning_rate: f64,
    pub outer_iterations: usize,
    pub seed: u64,
    pub ablations: Ablations,
    /// Run the discriminator step on the last generator batch instead of a
    /// fresh one.
    pub reuse_discriminator_batch: bool,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = ModelDims::new(1, 1, 64, 2);
        TrainConfig {
            preset: LossPreset::Main,
            alpha: 0.1,
            beta: 10.0,
            margin: 0.1,
            truncation: 5,
            ridge: 1e-6,
            r: dims.r,
            r_prime: dims.r_prime,
            video_hidden: dims.video_hidden,
            image_hidden: dims.image_hidden,
            discriminator_hidden: dims.discriminator_hidden,
            activation: dims.activation,
            batch_size: 64,
            generator_steps: 50,
            learning_rate: 1e-4,
            outer_iterations: 200,
            seed: 0,
            ablations: Ablations::default(),
            reuse_discriminator_batch: false,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn with_preset(preset: LossPreset) -> Self {
        let (alpha, beta) = preset.coefficients();
        TrainConfig {
            preset,
            alpha,
            beta,
            ..TrainConfig::default()
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            truncation: self.truncation,
            ridge: self.ridge,
            ablations: self.ablations,
        }
    }

    pub fn model_dims(&self, dataset: &PairedDataset) -> ModelDims {
        ModelDims {
            d1: dataset.d1,
            d2: dataset.d2,
            r: self.r,
            r_prime: self.r_prime,
            categories: dataset.categories,
            video_hidden: self.video_hidden,
            image_hidden: self.image_hidden,
            discriminator_hidden: self.discriminator_hidden,
            activation: self.activation,
        }
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("margin", self.margin), ("ridge", self.ridge)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be finite and > 0, got {}", self.learning_rate));
        }
        if self.truncation == 0 {
            return bad("truncation (b) must be >= 1".into());
        }
        if self.generator_steps == 0 {
            return bad("generator_steps (t) must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size (n) must be >= 2, got {}", self.batch_size));
        }
        if let Some(es) = self.early_stop {
            if es.patience == 0 || !(es.min_delta.is_finite() && es.min_delta >= 0.0) {
                return bad(format!("early_stop needs patience >= 1 and min_delta >= 0, got {es:?}"));
            }
        }
        let widths = [
            self.r,
            self.r_prime,
            self.discriminator_hidden,
            self.video_hidden[0],
            self.video_hidden[1],
            self.image_hidden[0],
            self.image_hidden[1],
        ];
        if widths.contains(&0) {
            return bad("all layer widths must be positive".into());
        }
        Ok(())
    }

    /// Checks the config against the data it will be trained on.
    pub fn validate_for(&self, dataset: &PairedDataset) -> Result<()> {
        self.validate()?;
        self.model_dims(dataset).validate()?;
        if !self.ablations.wo_gmil && self.truncation > dataset.k {
            return Err(Error::BadTruncation {
                b: self.truncation,
                k: dataset.k,
            });
        }
        let train = dataset.indices(Split::Train);
        if train.len() < 2 || dataset.distinct_labels(&train) < 2 {
            return Err(Error::InsufficientDiversity { retries: 0 });
        }
        Ok(())
    }
}

/// Draws batches of pair indices without replacement within an epoch. The
/// pool is reshuffled whenever fewer than `n` unused pairs remain.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    labels: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub const MAX_RETRIES: usize = 100;

    /// `labels[i]` is the label of `pool[i]`; `batch_size` is clipped to
    /// the pool size.
    pub fn new(pool: Vec<usize>, labels: Vec<usize>, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if pool.len() != labels.len() {
            return Err(Error::dims("BatchSampler labels", pool.len(), labels.len()));
        }
        let batch_size = batch_size.min(pool.len());
        if batch_size < 2 {
            return Err(Error::InvalidConfig(format!("need at least two pairs to sample from, got {}", pool.len())));
        }
        let order = (0..pool.len()).collect();
        Ok(BatchSampler {
            pool,
            labels,
            order,
            cursor: usize::MAX,
            batch_size,
            rng,
        })
    }

    pub fn for_split(dataset: &PairedDataset, split: Split, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        let pool = dataset.indices(split);
        let labels = pool.iter().map(|&i| dataset.pairs[i].label).collect();
        BatchSampler::new(pool, labels, batch_size, rng)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Positions (into the dataset) of the next batch, which always holds at
    /// least two distinct labels.
    pub fn next_indices(&mut self) -> Result<Vec<usize>> {
        for _ in 0..=Self::MAX_RETRIES {
            if self.cursor > self.order.len() || self.order.len() - self.cursor < self.batch_size {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let picked = &self.order[self.cursor..self.cursor + self.batch_size];
            self.cursor += self.batch_size;
            let first = self.labels[picked[0]];
            if picked.iter().any(|&p| self.labels[p] != first) {
                return Ok(picked.iter().map(|&p| self.pool[p]).collect());
            }
        }
        Err(Error::InsufficientDiversity {
            retries: Self::MAX_RETRIES,
        })
    }
}

/// Draws the next batch from `sampler`.
pub fn sample_batch<'a>(dataset: &'a PairedDataset, sampler: &mut BatchSampler) -> Result<Batch<'a>> {
    Batch::from_dataset(dataset, &sampler.next_indices()?)
}

/// Per-step result of [`generator_step`].
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub report: LossReport,
    /// Proposal weights of each bag, before the update.
    pub weights: Vec<Vec<f64>>,
}

/// A non-finite intermediate during a step means the parameters diverged.
fn diverged(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFiniteLoss(format!("non-finite value in {what} during the forward pass")),
        other => other,
    }
}

/// `θg ← θg − λ ∇θg total`. θd is left untouched.
pub fn generator_step(
    model: &mut ModelState,
    batch: &Batch,
    settings: &LossSettings,
    learning_rate: f64,
) -> Result<GeneratorStep> {
    let e = losses::evaluate(
        batch,
        model,
        settings,
        Request {
            coefficients: settings.total_coefficients(),
            generator_grads: true,
            report_triplet: true,
        },
    )
    .map_err(diverged)?;
    let report = settings.report(&e.components);
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("total loss {report:?}")));
    }
    for group in ParamGroup::GENERATOR {
        model.params.add_scaled(group, -learning_rate, &e.grads);
    }
    if !model.params.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "generator parameters became non-finite after a step with loss {report:?}"
        )));
    }
    Ok(GeneratorStep {
        report,
        weights: e.weights,
    })
}

/// `θd ← θd − λ ∇θd L_adv`; returns the discriminator accuracy measured
/// before the update. θg is left untouched.
pub fn discriminator_step(model: &mut ModelState, batch: &Batch, learning_rate: f64) -> Result<f64> {
    let e = losses::evaluate(
        batch,
        model,
        &LossSettings::default(),
        Request {
            coefficients: Coefficients::ADVERSARIAL,
            generator_grads: false,
            report_triplet: false,
        },
    )
    .map_err(diverged)?;
    model
        .params
        .add_scaled(ParamGroup::Discriminator, -learning_rate, &e.grads);
    if !model.params.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "discriminator parameters became non-finite (adversarial loss {})",
            e.components.adversarial
        )));
    }
    Ok(e.discriminator_accuracy)
}

/// Mean attention weight on clean vs noisy proposals, for bags that carry
/// clean flags and contain both kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub bags: usize,
    /// Mean over bags of the bag's mean clean-proposal weight.
    pub clean_mean: f64,
    pub noisy_mean: f64,
    /// Fraction of bags whose mean clean weight exceeds the mean noisy
    /// weight.
    pub clean_above_noisy: f64,
}

pub fn weight_stats<'a>(bags: impl IntoIterator<Item = (&'a ProposalBag, &'a [f64])>) -> Option<WeightStats> {
    let (mut count, mut clean_sum, mut noisy_sum, mut wins) = (0usize, 0.0, 0.0, 0usize);
    for (bag, weights) in bags {
        let Some(flags) = bag.clean_flags() else { continue };
        let clean: Vec<f64> = weights.iter().zip(flags).filter(|(_, &c)| c).map(|(&w, _)| w).collect();
        let noisy: Vec<f64> = weights.iter().zip(flags).filter(|(_, &c)| !c).map(|(&w, _)| w).collect();
        if clean.is_empty() || noisy.is_empty() {
            continue;
        }
        let c = clean.iter().sum::<f64>() / clean.len() as f64;
        let n = noisy.iter().sum::<f64>() / noisy.len() as f64;
        count += 1;
        clean_sum += c;
        noisy_sum += n;
        if c > n {
            wins += 1;
        }
    }
    (count > 0).then(|| WeightStats {
        bags: count,
        clean_mean: clean_sum / count as f64,
        noisy_mean: noisy_sum / count as f64,
        clean_above_noisy: wins as f64 / count as f64,
    })
}

/// Attention statistics of `model` over the bags of `split`.
pub fn attention_stats(model: &ModelState, dataset: &PairedDataset, split: Split) -> Result<Option<WeightStats>> {
    let mut weights = Vec::new();
    let mut bags = Vec::new();
    for i in dataset.indices(split) {
        let bag = &dataset.pairs[i].video;
        let projected = model::project_video(bag.features(), &model.params.projection)?;
        weights.push(model.proposal_weights(&projected, bag.adjacency())?);
        bags.push(bag);
    }
    Ok(weight_stats(bags.into_iter().zip(weights.iter().map(|w| w.as_slice()))))
}

/// One line of the training log. Field order is the serialisation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// Mean over the iteration's generator steps.
    pub loss: LossReport,
    /// Discriminator accuracy on its batch before the update; absent when
    /// the adversarial term is disabled.
    pub discriminator_accuracy: Option<f64>,
    /// Attention on the last generator batch, when bags carry clean flags.
    pub weights: Option<WeightStats>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: TrainLog,
    /// Wall-clock seconds per outer iteration. Kept apart from the log so
    /// that logs of identical runs compare equal.
    pub seconds: Vec<f64>,
    pub stopped_early: bool,
}

/// A failed run, with everything completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} outer iterations: {error}", log.records.len())]
pub struct TrainAbort {
    #[source]
    pub error: Error,
    pub log: TrainLog,
    /// Parameters at the start of the failing outer iteration, if the model
    /// had been built.
    pub model: Option<ModelState>,
}

impl From<TrainAbort> for Error {
    fn from(abort: TrainAbort) -> Self {
        abort.error
    }
}

pub fn train(dataset: &PairedDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainAbort> {
    train_with(dataset, config, |_| {})
}

/// [`train`] that reports each record as soon as it is complete.
pub fn train_with(
    dataset: &PairedDataset,
    config: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome, TrainAbort> {
    let early = |error: Error| TrainAbort {
        error,
        log: TrainLog::default(),
        model: None,
    };
    config.validate_for(dataset).map_err(early)?;
    let model = model::init_params(&config.model_dims(dataset), config.ablations.weighting(), config.seed).map_err(early)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let sampler = BatchSampler::for_split(dataset, Split::Train, config.batch_size, rng).map_err(early)?;

    let mut run = Run {
        dataset,
        config,
        settings: config.loss_settings(),
        model,
        sampler,
        log: TrainLog::default(),
        seconds: Vec::new(),
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    for iteration in 1..=config.outer_iterations {
        let snapshot = run.model.clone();
        let start = Instant::now();
        match run.outer_iteration(iteration) {
            Ok(record) => {
                run.seconds.push(start.elapsed().as_secs_f64());
                on_record(&record);
                let total = record.loss.total;
                run.log.records.push(record);
                if let Some(es) = config.early_stop {
                    if total < best - es.min_delta {
                        best = total;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= es.patience {
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
            Err(error) => {
                return Err(TrainAbort {
                    error,
                    log: run.log,
                    model: Some(snapshot),
                })
            }
        }
    }
    Ok(TrainOutcome {
        model: run.model,
        log: run.log,
        seconds: run.seconds,
        stopped_early,
    })
}

struct Run<'a> {
    dataset: &'a PairedDataset,
    config: &'a TrainConfig,
    settings: LossSettings,
    model: ModelState,
    sampler: BatchSampler,
    log: TrainLog,
    seconds: Vec<f64>,
}

impl Run<'_> {
    fn outer_iteration(&mut self, iteration: usize) -> Result<TrainRecord> {
        let lr = self.config.learning_rate;
        let mut reports = Vec::with_capacity(self.config.generator_steps);
        let mut last = Vec::new();
        let mut last_weights = Vec::new();
        for _ in 0..self.config.generator_steps {
            let indices = self.sampler.next_indices()?;
            let batch = Batch::from_dataset(self.dataset, &indices)?;
            let step = generator_step(&mut self.model, &batch, &self.settings, lr)?;
            reports.push(step.report);
            last = indices;
            last_weights = step.weights;
        }
        let discriminator_accuracy = if self.settings.adversarial_active() {
            let indices = if self.config.reuse_discriminator_batch {
                last.clone()
            } else {
                self.sampler.next_indices()?
            };
            let batch = Batch::from_dataset(self.dataset, &indices)?;
            Some(discriminator_step(&mut self.model, &batch, lr)?)
        } else {
            None
        };
        let weights = weight_stats(
            last.iter()
                .map(|&i| &self.dataset.pairs[i].video)
                .zip(last_weights.iter().map(|w| w.as_slice())),
        );
        Ok(TrainRecord {
            iteration,
            loss: LossReport::mean(&reports),
            discriminator_accuracy,
            weights,
        })
    }
}

/// Which scalar a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Classification,
    Adversarial,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Triplet,
        LossKind::Classification,
        LossKind::Adversarial,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Classification => "classification",
            LossKind::Adversarial => "adversarial",
            LossKind::Total => "total",
        }
    }

    fn coefficients(self, settings: &LossSettings) -> Coefficients {
        match self {
            LossKind::Triplet => Coefficients::TRIPLET,
            LossKind::Classification => Coefficients::CLASSIFICATION,
            LossKind::Adversarial => Coefficients::ADVERSARIAL,
            LossKind::Total => settings.total_coefficients(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub loss: LossKind,
    pub group: ParamGroup,
    /// The loss cannot depend on this group; the analytic gradient was
    /// checked to be exactly zero instead of probed.
    pub structural_zero: bool,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(move |e| !(e.max_relative_error <= self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per (loss, group); 0 probes every coordinate.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            coordinates: 48,
            seed: 0,
        }
    }
}

fn structurally_zero(loss: LossKind, group: ParamGroup, model: &ModelState) -> bool {
    let disc_only_adv = group == ParamGroup::Discriminator && matches!(loss, LossKind::Triplet | LossKind::Classification);
    let no_attention = group == ParamGroup::Attention && model.weighting == model::Weighting::Uniform;
    disc_only_adv || no_attention
}

/// Finite-difference check of every (loss, parameter group) pair at the
/// given model and batch.
pub fn grad_check_all(
    model: &ModelState,
    batch: &Batch,
    settings: &LossSettings,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_with(model, batch, settings, options, |_, _| {})
}

/// [`grad_check_all`] with a hook that may alter each analytic gradient
/// before comparison, for testing the checker itself.
pub fn grad_check_with(
    model: &ModelState,
    batch: &Batch,
    settings: &LossSettings,
    options: &GradCheckOptions,
    mut gradient_hook: impl FnMut(LossKind, &mut model::Parameters),
) -> Result<GradCheckReport> {
    if !(options.step > 0.0) || !(options.tolerance > 0.0) {
        return Err(Error::InvalidConfig(format!("bad gradient-check options {options:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut entries = Vec::new();
    for loss in LossKind::ALL {
        let coefficients = loss.coefficients(settings);
        let scalar = |m: &ModelState| -> Result<f64> {
            let e = losses::evaluate(
                batch,
                m,
                settings,
                Request {
                    coefficients,
                    generator_grads: false,
                    report_triplet: coefficients.triplet != 0.0,
                },
            )?;
            let c = e.components;
            Ok(coefficients.triplet * c.triplet + coefficients.classification * c.classification + coefficients.adversarial * c.adversarial)
        };
        let mut grads = losses::evaluate(
            batch,
            model,
            settings,
            Request {
                coefficients,
                generator_grads: true,
                report_triplet: false,
            },
        )?
        .grads;
        gradient_hook(loss, &mut grads);
        for group in ParamGroup::ALL {
            let analytic = grads.flatten(group);
            if structurally_zero(loss, group, model) {
                let max = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                entries.push(GradCheckEntry {
                    loss,
                    group,
                    structural_zero: true,
                    coordinates: analytic.len(),
                    max_relative_error: max,
                });
                continue;
            }
            let x0 = model.params.flatten(group);
            let coords: Vec<usize> = if options.coordinates == 0 || options.coordinates >= x0.len() {
                (0..x0.len()).collect()
            } else {
                let mut c: Vec<usize> = rand::seq::index::sample(&mut rng, x0.len(), options.coordinates).into_vec();
                c.sort_unstable();
                c
            };
            let mut probe = model.clone();
            let mut worst = 0.0f64;
            let mut x = x0.clone();
            for &c in &coords {
                let mut eval = |v: f64| -> Result<f64> {
                    x[c] = v;
                    probe.params.assign(group, &x);
                    scalar(&probe)
                };
                let plus = eval(x0[c] + options.step)?;
                let minus = eval(x0[c] - options.step)?;
                x[c] = x0[c];
                let numeric = (plus - minus) / (2.0 * options.step);
                worst = worst.max(numerics::relative_error(numeric, analytic[c]));
            }
            entries.push(GradCheckEntry {
                loss,
                group,
                structural_zero: false,
                coordinates: coords.len(),
                max_relative_error: worst,
            });
        }
    }
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        entries,
    })
}

/// Small deterministic batch for gradient checks: `n` pairs drawn from the
/// training split, cycling through labels so that several are present.
pub fn grad_check_batch(dataset: &PairedDataset, n: usize, seed: u64) -> Result<Batch<'_>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.categories];
    for i in dataset.indices(Split::Train) {
        by_label[dataset.pairs[i].label].push(i);
    }
    by_label.retain(|v| !v.is_empty());
    for v in &mut by_label {
        v.shuffle(&mut rng);
    }
    let offset = rng.random_range(0..by_label.len().max(1));
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        let mut added = false;
        for l in 0..by_label.len() {
            let pool = &by_label[(l + offset) % by_label.len()];
            if let Some(&i) = pool.get(round) {
                if picked.len() < n {
                    picked.push(i);
                    added = true;
                }
            }
        }
        if !added {
            break;
        }
        round += 1;
    }
    Batch::from_dataset(dataset, &picked)
}

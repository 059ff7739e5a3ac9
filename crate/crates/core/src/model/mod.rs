//! Trainable components: the two projection networks, proposal attention,
//! bag pooling, the shared semantic classifier and the modality
//! discriminator.
//!
//! Projected bags are stored one proposal per row (`k × r`), matching the
//! raw `k × d1` bag layout. Every forward pass has a matching backward pass
//! that accumulates into a [`Parameters`] value used as the gradient.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    fn apply_in_place(self, xs: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Tanh => numerics::tanh_in_place(xs),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// How proposal weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Attention with two graph-convolution smoothing steps over the bag's
    /// normalised similarity graph.
    Graph,
    /// Plain attention, `softmax(tanh(V̄ L1) L2)`.
    Plain,
    /// `1/k` for every proposal; no attention parameters are used.
    Uniform,
}

/// Fully connected layer computing `x · weight + bias` for row inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
        Dense {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::new(x.rows(), self.fan_out(), self.bias.repeat(x.rows())).expect("bias rows");
        numerics::gemm(1.0, x, false, &self.weight, false, 1.0, &mut out);
        out
    }
}

/// `sqrt(6 / (fan_in + fan_out))`
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Stack of dense layers; the hidden activation follows every layer but the
/// last, which is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden_activation: Activation,
}

/// Inputs seen by each layer during a forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    inputs: Vec<Matrix>,
}

impl Mlp {
    pub fn glorot(widths: &[usize], hidden_activation: Activation, rng: &mut impl Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Mlp {
            layers,
            hidden_activation,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect(),
            hidden_activation: self.hidden_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").fan_out()
    }

    /// Maps every row of `x` independently.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<(Matrix, MlpTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("Mlp::forward", self.input_dim(), x.cols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h);
            if l < last {
                self.hidden_activation.apply_in_place(out.as_mut_slice());
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        Ok((h, MlpTrace { inputs }))
    }

    /// Accumulates parameter gradients into `grads` and, when requested,
    /// returns the gradient with respect to the input rows.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &Matrix, grads: &mut Mlp, want_input: bool) -> Option<Matrix> {
        let mut owned: Option<Matrix> = None;
        for l in (0..self.layers.len()).rev() {
            let g = owned.as_ref().unwrap_or(grad_out);
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let gl = &mut grads.layers[l];
            numerics::gemm(1.0, input, true, g, false, 1.0, &mut gl.weight);
            for i in 0..g.rows() {
                numerics::axpy(1.0, g.row(i), &mut gl.bias);
            }
            if l == 0 && !want_input {
                return None;
            }
            let mut g_in = Matrix::zeros(g.rows(), layer.fan_in());
            numerics::gemm(1.0, g, false, &layer.weight, true, 0.0, &mut g_in);
            if l > 0 && self.hidden_activation != Activation::Linear {
                let act = self.hidden_activation;
                for (gv, &y) in g_in.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *gv *= act.derivative_at_output(y);
                }
            }
            owned = Some(g_in);
        }
        Some(owned.unwrap_or_else(|| grad_out.clone()))
    }

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Video and image projection networks (θp).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub video: Mlp,
    pub image: Mlp,
}

impl ProjectionParams {
    pub fn common_dim(&self) -> usize {
        self.video.output_dim()
    }
}

/// Proposal attention (θm): `L1` is `r × r′`, `L2` has length `r′`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub l1: Matrix,
    pub l2: Vec<f64>,
}

/// Softmax classifier shared by both modalities (θc). `weight` is `r × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierParams {
    pub fn categories(&self) -> usize {
        self.bias.len()
    }
}

/// Modality discriminator (θd): an MLP ending in a single logit.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Projection,
    Attention,
    Classifier,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Projection,
        ParamGroup::Attention,
        ParamGroup::Classifier,
        ParamGroup::Discriminator,
    ];

    /// θg: everything updated by the representation (generator) step.
    pub const GENERATOR: [ParamGroup; 3] = [ParamGroup::Projection, ParamGroup::Attention, ParamGroup::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Projection => "projection",
            ParamGroup::Attention => "attention",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

/// All trainable tensors. Also used as the container for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub projection: ProjectionParams,
    pub attention: AttentionParams,
    pub classifier: ClassifierParams,
    pub discriminator: DiscriminatorParams,
}

impl Parameters {
    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            projection: ProjectionParams {
                video: self.projection.video.zeros_like(),
                image: self.projection.image.zeros_like(),
            },
            attention: AttentionParams {
                l1: Matrix::zeros(self.attention.l1.rows(), self.attention.l1.cols()),
                l2: vec![0.0; self.attention.l2.len()],
            },
            classifier: ClassifierParams {
                weight: Matrix::zeros(self.classifier.weight.rows(), self.classifier.weight.cols()),
                bias: vec![0.0; self.classifier.bias.len()],
            },
            discriminator: DiscriminatorParams {
                mlp: self.discriminator.mlp.zeros_like(),
            },
        }
    }

    pub fn tensors(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::Projection => {
                let mut t = self.projection.video.tensors();
                t.extend(self.projection.image.tensors());
                t
            }
            ParamGroup::Attention => vec![self.attention.l1.as_slice(), &self.attention.l2],
            ParamGroup::Classifier => vec![self.classifier.weight.as_slice(), &self.classifier.bias],
            ParamGroup::Discriminator => self.discriminator.mlp.tensors(),
        }
    }

    pub fn tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::Projection => {
                let mut t = self.projection.video.tensors_mut();
                t.extend(self.projection.image.tensors_mut());
                t
            }
            ParamGroup::Attention => vec![self.attention.l1.as_mut_slice(), &mut self.attention.l2],
            ParamGroup::Classifier => vec![self.classifier.weight.as_mut_slice(), &mut self.classifier.bias],
            ParamGroup::Discriminator => self.discriminator.mlp.tensors_mut(),
        }
    }

    /// Every tensor in the fixed order `projection, attention, classifier,
    /// discriminator` used by checkpoints.
    pub fn all_tensors(&self) -> Vec<&[f64]> {
        ParamGroup::ALL.iter().flat_map(|&g| self.tensors(g)).collect()
    }

    pub fn group_len(&self, group: ParamGroup) -> usize {
        self.tensors(group).iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self, group: ParamGroup) -> Vec<f64> {
        self.tensors(group).concat()
    }

    pub fn assign(&mut self, group: ParamGroup, values: &[f64]) {
        assert_eq!(values.len(), self.group_len(group), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut(group) {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    /// `self[group] += alpha · other[group]`
    pub fn add_scaled(&mut self, group: ParamGroup, alpha: f64, other: &Parameters) {
        for (dst, src) in self.tensors_mut(group).into_iter().zip(other.tensors(group)) {
            numerics::axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in ParamGroup::ALL {
            for t in self.tensors_mut(g) {
                t.iter_mut().for_each(|v| *v *= alpha);
            }
        }
    }

    pub fn max_abs(&self, group: ParamGroup) -> f64 {
        self.tensors(group)
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.tensors(g).iter().all(|t| t.iter().all(|v| v.is_finite())))
    }
}

/// Architecture description; everything [`init_params`] needs besides a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d1: usize,
    pub d2: usize,
    pub r: usize,
    pub r_prime: usize,
    pub categories: usize,
    pub video_hidden: [usize; 2],
    pub image_hidden: [usize; 2],
    pub discriminator_hidden: usize,
    pub activation: Activation,
}

impl ModelDims {
    /// Default widths: video `d1→500→200→r`, image `d2→100→80→r`,
    /// attention width 32, discriminator `r→32→1`.
    pub fn new(d1: usize, d2: usize, r: usize, categories: usize) -> Self {
        ModelDims {
            d1,
            d2,
            r,
            r_prime: 32,
            categories,
            video_hidden: [500, 200],
            image_hidden: [100, 80],
            discriminator_hidden: 32,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.d1, self.d2, self.r, self.r_prime, self.discriminator_hidden];
        if widths.contains(&0) || self.video_hidden.contains(&0) || self.image_hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!("all layer widths must be positive: {self:?}")));
        }
        if self.categories < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two categories, got {}",
                self.categories
            )));
        }
        Ok(())
    }
}

/// Everything a trained model consists of.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Parameters,
    pub weighting: Weighting,
    pub seed: u64,
}

/// Deterministic initialisation used for training: Glorot-uniform weights
/// and zero biases, except that the discriminator's output layer starts at
/// zero, so `δ ≡ 1/2` until the first discriminator step.
pub fn init_params(dims: &ModelDims, weighting: Weighting, seed: u64) -> Result<ModelState> {
    let mut model = init_params_glorot(dims, weighting, seed)?;
    let out = model.params.discriminator.mlp.layers.last_mut().expect("discriminator has layers");
    *out = Dense::zeros(out.fan_in(), out.fan_out());
    Ok(model)
}

/// Glorot-uniform weights in every layer, zero biases. Draws the same
/// values as [`init_params`] for everything but the discriminator output.
pub fn init_params_glorot(dims: &ModelDims, weighting: Weighting, seed: u64) -> Result<ModelState> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let video = Mlp::glorot(
        &[dims.d1, dims.video_hidden[0], dims.video_hidden[1], dims.r],
        dims.activation,
        &mut rng,
    );
    let image = Mlp::glorot(
        &[dims.d2, dims.image_hidden[0], dims.image_hidden[1], dims.r],
        dims.activation,
        &mut rng,
    );
    let l1 = Dense::glorot(dims.r, dims.r_prime, &mut rng).weight;
    let l2 = Dense::glorot(dims.r_prime, 1, &mut rng).weight.into_vec();
    let classifier = Dense::glorot(dims.r, dims.categories, &mut rng);
    let disc = Mlp::glorot(&[dims.r, dims.discriminator_hidden, 1], Activation::Tanh, &mut rng);
    Ok(ModelState {
        params: Parameters {
            projection: ProjectionParams { video, image },
            attention: AttentionParams { l1, l2 },
            classifier: ClassifierParams {
                weight: classifier.weight,
                bias: classifier.bias,
            },
            discriminator: DiscriminatorParams { mlp: disc },
        },
        weighting,
        seed,
    })
}

impl ModelState {
    pub fn dims(&self) -> ModelDims {
        let p = &self.params;
        let v = &p.projection.video.layers;
        let i = &p.projection.image.layers;
        ModelDims {
            d1: v[0].fan_in(),
            d2: i[0].fan_in(),
            r: p.projection.common_dim(),
            r_prime: p.attention.l1.cols(),
            categories: p.classifier.categories(),
            video_hidden: [v[0].fan_out(), v[1].fan_out()],
            image_hidden: [i[0].fan_out(), i[1].fan_out()],
            discriminator_hidden: p.discriminator.mlp.layers[0].fan_out(),
            activation: p.projection.video.hidden_activation,
        }
    }

    /// Proposal weights for an already projected bag.
    pub fn proposal_weights(&self, projected: &Matrix, adjacency: &Matrix) -> Result<Vec<f64>> {
        match self.weighting {
            Weighting::Graph => gmil_weights(projected, adjacency, &self.params.attention),
            Weighting::Plain => mil_weights(projected, &self.params.attention),
            Weighting::Uniform => Ok(uniform_weights(projected.rows())),
        }
    }

    /// Bag-level embedding `Z(V̄)` of a raw `k × d1` bag, using the full bag.
    pub fn embed_bag(&self, features: &Matrix, adjacency: &Matrix) -> Result<BagEmbedding> {
        let projected = project_video(features, &self.params.projection)?;
        let weights = self.proposal_weights(&projected, adjacency)?;
        let pooled = aggregate(&projected, &weights)?;
        Ok(BagEmbedding {
            projected,
            weights,
            pooled,
        })
    }

    pub fn embed_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        project_image(image, &self.params.projection)
    }
}

#[derive(Clone, Debug)]
pub struct BagEmbedding {
    /// `k × r`
    pub projected: Matrix,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Projects every proposal (row) of a `k × d1` bag into the common space,
/// giving `k × r`.
pub fn project_video(features: &Matrix, params: &ProjectionParams) -> Result<Matrix> {
    params.video.forward(features)
}

pub fn project_image(image: &[f64], params: &ProjectionParams) -> Result<Vec<f64>> {
    let x = Matrix::new(1, image.len(), image.to_vec())?;
    Ok(params.image.forward(&x)?.into_vec())
}

pub fn uniform_weights(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Intermediate values of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// `tanh(·)` output, `k × r′`
    activations: Matrix,
    adjacency: Option<Matrix>,
    pub weights: Vec<f64>,
}

/// `softmax(tanh(V̄ L1) L2)`
pub fn mil_weights(projected: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    Ok(attention_forward(projected, None, params)?.weights)
}

/// `softmax(S̄ tanh(S̄ V̄ L1) L2)`
pub fn gmil_weights(projected: &Matrix, adjacency: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    Ok(attention_forward(projected, Some(adjacency), params)?.weights)
}

/// Shared forward pass for plain (`adjacency = None`) and graph attention.
pub fn attention_forward(projected: &Matrix, adjacency: Option<&Matrix>, params: &AttentionParams) -> Result<AttentionTrace> {
    let (k, r) = projected.shape();
    if params.l1.rows() != r {
        return Err(Error::dims("attention", format!("{r} rows in L1"), params.l1.rows()));
    }
    if params.l2.len() != params.l1.cols() {
        return Err(Error::dims("attention", format!("L2 of length {}", params.l1.cols()), params.l2.len()));
    }
    if let Some(a) = adjacency {
        if a.shape() != (k, k) {
            return Err(Error::dims("attention adjacency", format!("{k}x{k}"), format!("{}x{}", a.rows(), a.cols())));
        }
    }
    let mut hidden = projected.matmul(&params.l1);
    if let Some(a) = adjacency {
        hidden = a.matmul(&hidden);
    }
    numerics::tanh_in_place(hidden.as_mut_slice());
    let mut scores = hidden.mat_vec(&params.l2);
    if let Some(a) = adjacency {
        scores = a.mat_vec(&scores);
    }
    let weights = numerics::stable_softmax(&scores)?;
    Ok(AttentionTrace {
        activations: hidden,
        adjacency: adjacency.cloned(),
        weights,
    })
}

/// Back-propagates `∂L/∂weights` through attention. Accumulates into
/// `grads` and returns `∂L/∂V̄` (`k × r`).
pub fn attention_backward(
    trace: &AttentionTrace,
    projected: &Matrix,
    params: &AttentionParams,
    grad_weights: &[f64],
    grads: &mut AttentionParams,
) -> Matrix {
    let g_scores = numerics::softmax_backward(&trace.weights, grad_weights);
    let g_q = match &trace.adjacency {
        Some(a) => a.t_mat_vec(&g_scores),
        None => g_scores,
    };
    let t = &trace.activations;
    numerics::axpy(1.0, &t.t_mat_vec(&g_q), &mut grads.l2);
    // ∂/∂(pre-activation) = (g_q l2ᵀ) ⊙ (1 − T²)
    let mut g_pre = Matrix::zeros(t.rows(), t.cols());
    g_pre.add_outer(1.0, &g_q, &params.l2);
    for (g, &y) in g_pre.as_mut_slice().iter_mut().zip(t.as_slice()) {
        *g *= 1.0 - y * y;
    }
    if let Some(a) = &trace.adjacency {
        g_pre = a.t_matmul(&g_pre);
    }
    numerics::gemm(1.0, projected, true, &g_pre, false, 1.0, &mut grads.l1);
    g_pre.matmul_t(&params.l1)
}

/// Weighted average of the projected proposals, `Σ_j w_j v̄_j`.
pub fn aggregate(projected: &Matrix, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != projected.rows() {
        return Err(Error::dims("aggregate", projected.rows(), weights.len()));
    }
    Ok(projected.t_mat_vec(weights))
}

/// Given `∂L/∂Z`, accumulates `∂L/∂V̄` and returns `∂L/∂w`.
pub fn aggregate_backward(projected: &Matrix, weights: &[f64], grad_pooled: &[f64], grad_projected: &mut Matrix) -> Vec<f64> {
    grad_projected.add_outer(1.0, weights, grad_pooled);
    projected.mat_vec(grad_pooled)
}

pub fn classifier_logits(x: &[f64], params: &ClassifierParams) -> Result<Vec<f64>> {
    if x.len() != params.weight.rows() {
        return Err(Error::dims("classifier", params.weight.rows(), x.len()));
    }
    let mut logits = params.weight.t_mat_vec(x);
    numerics::axpy(1.0, &params.bias, &mut logits);
    Ok(logits)
}

/// Class probabilities for an embedded sample.
pub fn classify(x: &[f64], params: &ClassifierParams) -> Result<Vec<f64>> {
    numerics::stable_softmax(&classifier_logits(x, params)?)
}

/// Given `∂L/∂logits`, accumulates parameter gradients and returns `∂L/∂x`.
pub fn classifier_backward(x: &[f64], params: &ClassifierParams, grad_logits: &[f64], grads: &mut ClassifierParams) -> Vec<f64> {
    grads.weight.add_outer(1.0, x, grad_logits);
    numerics::axpy(1.0, grad_logits, &mut grads.bias);
    params.weight.mat_vec(grad_logits)
}

pub fn discriminator_logit(x: &[f64], params: &DiscriminatorParams) -> Result<f64> {
    let m = Matrix::new(1, x.len(), x.to_vec())?;
    Ok(params.mlp.forward(&m)?.get(0, 0))
}

/// Probability that `x` is a video embedding.
pub fn discriminate(x: &[f64], params: &DiscriminatorParams) -> Result<f64> {
    Ok(numerics::sigmoid(discriminator_logit(x, params)?))
}

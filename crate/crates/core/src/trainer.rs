//! Local training: a fully-connected classifier with hand-rolled backprop,
//! plain SGD, and deterministic evaluation. Parameters live in f32 inside
//! the model; all arithmetic here runs in f64 and rounds once on the way
//! back out.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decompose, BlockedModel, DecompositionRules, Layer, LayerKind, ParameterTensor};

// ---------------------------------------------------------------------------
// Datasets

/// A labeled classification dataset. Features are dense rows of equal width;
/// labels index `0..num_classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Vec<f32>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::invalid("dataset needs at least 2 classes"));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::invalid("feature rows are empty"));
        }
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!(
                    "sample {i} has {} features, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {i} has a non-finite feature")));
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|&(_, &l)| l >= num_classes) {
            return Err(Error::invalid(format!(
                "sample {i} has label {l}, valid range is 0..{num_classes}"
            )));
        }
        Ok(Self { features, labels, num_classes })
    }

    pub fn sample_count(&self) -> usize {
        self.features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Vec<f32>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Parse `features..., label` rows from delimited text (commas and/or
    /// whitespace). Blank lines and lines starting with `#` are skipped.
    /// The class count is one past the highest label seen, at least 2.
    pub fn from_delimited(text: &str) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            if fields.len() < 2 {
                return Err(Error::invalid(format!(
                    "line {}: need at least one feature and a label",
                    lineno + 1
                )));
            }
            let (label_field, feature_fields) = fields.split_last().unwrap();
            let row = feature_fields
                .iter()
                .map(|f| {
                    f.parse::<f32>().map_err(|_| {
                        Error::invalid(format!("line {}: bad feature {f:?}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f32>>>()?;
            let label = label_field.parse::<usize>().map_err(|_| {
                Error::invalid(format!("line {}: bad label {label_field:?}", lineno + 1))
            })?;
            features.push(row);
            labels.push(label);
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
        Self::new(features, labels, num_classes)
    }

    pub fn from_delimited_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("reading {}: {e}", path.display())))?;
        Self::from_delimited(&text)
    }
}

/// A synthetic k-class Gaussian-blob task: fixed class centers shared by
/// everyone who samples from it, isotropic noise around them.
#[derive(Debug, Clone)]
pub struct BlobTask {
    centers: Vec<Vec<f64>>,
    noise: f64,
}

impl BlobTask {
    /// Draw class centers uniformly from `[-2.5, 2.5]^dim`, re-drawing until
    /// all pairs are at least 3.0 apart so the classes stay separable.
    pub fn new(classes: usize, dim: usize, noise: f64, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::invalid("blob task needs >= 2 classes and dim >= 1"));
        }
        if !(noise.is_finite() && noise > 0.0) {
            return Err(Error::invalid(format!("blob noise must be positive, got {noise}")));
        }
        const MIN_SEPARATION: f64 = 3.0;
        for _ in 0..1000 {
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect())
                .collect();
            let mut ok = true;
            'pairs: for i in 0..classes {
                for j in i + 1..classes {
                    let d2: f64 = centers[i]
                        .iter()
                        .zip(&centers[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2.sqrt() < MIN_SEPARATION {
                        ok = false;
                        break 'pairs;
                    }
                }
            }
            if ok {
                return Ok(Self { centers, noise });
            }
        }
        Err(Error::invalid(
            "could not place separated blob centers; lower the class count or dimension",
        ))
    }

    pub fn classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Draw `n` i.i.d. samples: a uniform class label, then the class center
    /// plus isotropic Gaussian noise.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Dataset> {
        let normal = Normal::new(0.0, self.noise).expect("noise validated at construction");
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..self.centers.len());
            let row: Vec<f32> = self.centers[label]
                .iter()
                .map(|&c| (c + normal.sample(rng)) as f32)
                .collect();
            features.push(row);
            labels.push(label);
        }
        Dataset::new(features, labels, self.centers.len())
    }
}

// ---------------------------------------------------------------------------
// Model construction

/// The only nonlinearity the trainer knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Widths of every layer, input and output included, plus the init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(Self { layer_widths, activation: Activation::Relu, seed })
    }
}

/// Rules that pair every hidden linear layer with its activation.
pub fn mlp_rules() -> DecompositionRules {
    DecompositionRules::new(vec![vec![LayerKind::new("linear"), LayerKind::new("activation")]])
        .expect("static rule set is valid")
}

/// Build the initial blocked model: weights uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from the seed in `spec`, biases zero.
/// Each hidden ⟨linear, activation⟩ pair forms one block; the output layer
/// is a singleton block.
pub fn init_model(spec: &MlpSpec) -> Result<BlockedModel> {
    init_model_with_rules(spec, &mlp_rules())
}

/// Same as [`init_model`] with caller-supplied grouping rules.
pub fn init_model_with_rules(spec: &MlpSpec, rules: &DecompositionRules) -> Result<BlockedModel> {
    let mut rng = crate::rng::derive_rng(spec.seed, &["mlp-init"]);
    let widths = &spec.layer_widths;
    let mut layers = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f32> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        layers.push(Layer::new(
            "linear",
            vec![
                ParameterTensor::new("weight", vec![fan_out, fan_in], weight)?,
                ParameterTensor::new("bias", vec![fan_out], vec![0.0; fan_out])?,
            ],
        ));
        if l < widths.len() - 2 {
            layers.push(Layer::new("activation", vec![]));
        }
    }
    decompose(&layers, rules)
}

// ---------------------------------------------------------------------------
// The network itself

/// f64 working copy of an MLP's parameters. `weights[l]` is row-major
/// `[widths[l+1] x widths[l]]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient holder.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Extract the network from a blocked model. Tensors must alternate
    /// 2-D weight / 1-D bias in block order, with matching widths.
    pub fn from_model(model: &BlockedModel) -> Result<Self> {
        let tensors: Vec<&ParameterTensor> =
            model.blocks().iter().flat_map(|b| b.tensors()).collect();
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(Error::incompatible(format!(
                "expected weight/bias tensor pairs, found {} tensors",
                tensors.len()
            )));
        }
        let mut widths = Vec::new();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks(2) {
            let (w, b) = (pair[0], pair[1]);
            let &[out, inp] = w.shape() else {
                return Err(Error::incompatible(format!(
                    "tensor {:?} is not a 2-D weight",
                    w.name()
                )));
            };
            if b.shape() != [out] {
                return Err(Error::incompatible(format!(
                    "bias {:?} has shape {:?}, expected [{out}]",
                    b.name(),
                    b.shape()
                )));
            }
            match widths.last() {
                None => {
                    widths.push(inp);
                    widths.push(out);
                }
                Some(&prev) if prev == inp => widths.push(out),
                Some(&prev) => {
                    return Err(Error::incompatible(format!(
                        "layer input width {inp} does not chain with previous output {prev}"
                    )))
                }
            }
            weights.push(w.values().iter().map(|&v| v as f64).collect());
            biases.push(b.values().iter().map(|&v| v as f64).collect());
        }
        Ok(Self { widths, weights, biases })
    }

    /// Write the parameters back into the structure of `template`.
    pub fn to_model(&self, template: &BlockedModel, round: u32) -> Result<BlockedModel> {
        let mut flat: Vec<f32> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend(w.iter().map(|&v| v as f32));
            flat.extend(b.iter().map(|&v| v as f32));
        }
        let mut cursor = 0;
        let blocks = template
            .blocks()
            .iter()
            .map(|block| {
                let tensors = block
                    .tensors()
                    .iter()
                    .map(|t| {
                        let values = flat[cursor..cursor + t.len()].to_vec();
                        cursor += t.len();
                        ParameterTensor::new(t.name(), t.shape().to_vec(), values)
                    })
                    .collect::<Result<Vec<_>>>()?;
                crate::model::Block::new(block.id().clone(), block.layer_kinds().to_vec(), tensors)
            })
            .collect::<Result<Vec<_>>>()?;
        if cursor != flat.len() {
            return Err(Error::incompatible(
                "template parameter count does not match the network",
            ));
        }
        BlockedModel::new(blocks, round)
    }

    fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Activations of every layer for one input; `acts[0]` is the input,
    /// `acts[L]` the raw logits (no activation on the output layer).
    fn forward(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count() + 1);
        acts.push(x.iter().map(|&v| v as f64).collect());
        for l in 0..self.layer_count() {
            let inp = self.widths[l];
            let prev = &acts[l];
            let w = &self.weights[l];
            let mut z = self.biases[l].clone();
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * inp..(i + 1) * inp];
                *zi += row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
            }
            if l != self.layer_count() - 1 {
                for zi in &mut z {
                    *zi = zi.max(0.0); // rectifier
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        self.forward(x).pop().unwrap()
    }

    /// Mean softmax cross-entropy over a batch.
    pub fn loss(&self, xs: &[&[f32]], ys: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let logits = self.logits(x);
            total += cross_entropy(&logits, y);
        }
        total / xs.len() as f64
    }

    /// Mean loss and its gradient over a batch.
    pub fn loss_and_gradient(&self, xs: &[&[f32]], ys: &[usize]) -> (f64, Gradient) {
        let mut grad = Gradient {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut total_loss = 0.0;
        let scale = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let acts = self.forward(x);
            let logits = acts.last().unwrap();
            total_loss += cross_entropy(logits, y);

            // dL/dz at the output: softmax - onehot.
            let mut delta = softmax(logits);
            delta[y] -= 1.0;

            for l in (0..self.layer_count()).rev() {
                let inp = self.widths[l];
                let prev = &acts[l];
                let gw = &mut grad.weights[l];
                for (i, &d) in delta.iter().enumerate() {
                    grad.biases[l][i] += scale * d;
                    let row = &mut gw[i * inp..(i + 1) * inp];
                    for (g, &p) in row.iter_mut().zip(prev) {
                        *g += scale * d * p;
                    }
                }
                if l > 0 {
                    // Push through the weights, then gate by the rectifier
                    // (prev > 0 exactly where the forward pass kept it).
                    let w = &self.weights[l];
                    let mut next = vec![0.0f64; inp];
                    for (i, &d) in delta.iter().enumerate() {
                        let row = &w[i * inp..(i + 1) * inp];
                        for (n, &wv) in next.iter_mut().zip(row) {
                            *n += d * wv;
                        }
                    }
                    for (n, &p) in next.iter_mut().zip(prev) {
                        if p <= 0.0 {
                            *n = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        (total_loss * scale, grad)
    }

    fn sgd_step(&mut self, grad: &Gradient, lr: f64) {
        for (w, gw) in self.weights.iter_mut().zip(&grad.weights) {
            for (v, g) in w.iter_mut().zip(gw) {
                *v -= lr * g;
            }
        }
        for (b, gb) in self.biases.iter_mut().zip(&grad.biases) {
            for (v, g) in b.iter_mut().zip(gb) {
                *v -= lr * g;
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    // Subtract the max first so exp never overflows.
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    -(logits[label] - max - log_sum)
}

// ---------------------------------------------------------------------------
// Training and evaluation

/// Run `epochs` of mini-batch SGD and return the updated model. The input
/// model is untouched; sample order reshuffles from `rng` every epoch.
pub fn local_train(
    model: &BlockedModel,
    data: &Dataset,
    epochs: u32,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<BlockedModel> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = Mlp::from_model(model)?;
    check_io(&net, data)?;

    let mut order: Vec<usize> = (0..data.sample_count()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let xs: Vec<&[f32]> = batch.iter().map(|&i| data.features()[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (_, grad) = net.loss_and_gradient(&xs, &ys);
            net.sgd_step(&grad, lr);
        }
    }
    net.to_model(model, model.round())
}

/// Aggregate quality metrics on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Mean loss, accuracy, and macro-averaged F1. Prediction is the first
/// maximal logit; classes that never appear score an F1 of zero.
pub fn evaluate(model: &BlockedModel, data: &Dataset) -> Result<Metrics> {
    let net = Mlp::from_model(model)?;
    check_io(&net, data)?;
    let k = data.num_classes();
    let mut confusion = vec![0usize; k * k]; // [true][pred]
    let mut total_loss = 0.0;
    for (x, &y) in data.features().iter().zip(data.labels()) {
        let logits = net.logits(x);
        total_loss += cross_entropy(&logits, y);
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        confusion[y * k + pred] += 1;
    }
    let n = data.sample_count();
    let correct: usize = (0..k).map(|c| confusion[c * k + c]).sum();

    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c * k + c];
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t * k + c]).sum();
        let fn_: usize = (0..k).filter(|&p| p != c).map(|p| confusion[c * k + p]).sum();
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
        // else: class absent from truth and predictions — scores zero.
    }

    Ok(Metrics {
        loss: total_loss / n as f64,
        accuracy: correct as f64 / n as f64,
        macro_f1: f1_sum / k as f64,
    })
}

fn check_io(net: &Mlp, data: &Dataset) -> Result<()> {
    if net.widths[0] != data.feature_dim() {
        return Err(Error::incompatible(format!(
            "model expects {} input features, dataset has {}",
            net.widths[0],
            data.feature_dim()
        )));
    }
    if *net.widths.last().unwrap() != data.num_classes() {
        return Err(Error::incompatible(format!(
            "model has {} outputs, dataset has {} classes",
            net.widths.last().unwrap(),
            data.num_classes()
        )));
    }
    Ok(())
}

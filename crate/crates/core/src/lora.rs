//! LoRA-adapted multilayer perceptron with hand-written backpropagation.
//!
//! Each hidden layer computes `h = W0·x + bias + B·(A·x)` where `W0` and
//! `bias` are frozen and only the low-rank pair `(A, B)` trains. ReLU sits
//! between consecutive LoRA layers; a dense head maps the last width to
//! class logits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{softmax_cross_entropy, Matrix, RngStream, StreamTag};

const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    /// Frozen base weight, `d × k`.
    pub w0: Matrix,
    /// Frozen base bias, length `d`.
    pub bias: Vec<f64>,
    /// Trainable down-projection, `r × k`.
    pub a: Matrix,
    /// Trainable up-projection, `d × r`.
    pub b: Matrix,
    /// Whether this layer's `B` takes part in client-distance computation.
    pub psi: bool,
}

impl LoraLinear {
    pub fn new(w0: Matrix, bias: Vec<f64>, a: Matrix, b: Matrix, psi: bool) -> Result<Self> {
        let (d, k) = w0.shape();
        let r = a.rows();
        if bias.len() != d {
            return Err(Error::shape(format!("bias length {} for d = {d}", bias.len())));
        }
        if a.cols() != k || b.shape() != (d, r) {
            return Err(Error::shape(format!(
                "A {:?} and B {:?} incompatible with W0 {d}x{k}",
                a.shape(),
                b.shape()
            )));
        }
        if r == 0 || r > d.min(k) {
            return Err(Error::config(
                "model.rank",
                format!("rank {r} must lie in 1..={}", d.min(k)),
            ));
        }
        Ok(Self { w0, bias, a, b, psi })
    }

    pub fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Trainable element count `r·(d + k)`.
    pub fn adapter_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Element count of the dense matrix the adapter stands in for, `d·k`.
    pub fn full_params(&self) -> usize {
        self.w0.len()
    }

    /// Returns `(h, A·x)`.
    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut h = self.w0.matvec(x)?;
        let u = self.a.matvec(x)?;
        let bu = self.b.matvec(&u)?;
        for ((hi, bi), di) in h.iter_mut().zip(&self.bias).zip(bu) {
            *hi += bi + di;
        }
        Ok((h, u))
    }
}

/// `h = W0·x + bias + B·(A·x)`.
pub fn lora_forward(layer: &LoraLinear, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward_cached(x).map(|(h, _)| h)
}

/// Layer widths plus the class count; layer `ℓ` maps `widths[ℓ]` to `widths[ℓ+1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub classes: usize,
    pub rank: usize,
}

impl Architecture {
    pub fn layer_count(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config(
                "model.widths",
                "need an input width and at least one layer width",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        let max_rank = self
            .widths
            .windows(2)
            .map(|w| w[0].min(w[1]))
            .min()
            .unwrap_or(0);
        if self.rank == 0 || self.rank > max_rank {
            return Err(Error::config(
                "model.rank",
                format!("rank {} must lie in 1..={max_rank}", self.rank),
            ));
        }
        Ok(())
    }
}

/// Frozen base weights of every layer, produced by pretraining or loaded
/// from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraMlp {
    pub layers: Vec<LoraLinear>,
    /// `C × width` head weight; trainable.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Per-tensor gradient (or any tensor set shaped like the trainable
/// parameters: snapshots, control variates, deltas).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<AdapterPair>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
}

pub type ControlVariate = Gradients;

impl Gradients {
    pub fn zeros_like(model: &LoraMlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| AdapterPair {
                    a: Matrix::zeros(l.a.rows(), l.a.cols()),
                    b: Matrix::zeros(l.b.rows(), l.b.cols()),
                })
                .collect(),
            head_w: Matrix::zeros(model.head_w.rows(), model.head_w.cols()),
            head_b: vec![0.0; model.head_b.len()],
        }
    }

    /// Snapshot of a model's trainable tensors.
    pub fn of_model(model: &LoraMlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| AdapterPair {
                    a: l.a.clone(),
                    b: l.b.clone(),
                })
                .collect(),
            head_w: model.head_w.clone(),
            head_b: model.head_b.clone(),
        }
    }

    pub fn check_matches(&self, model: &LoraMlp) -> Result<()> {
        let ok = self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.a.shape() == l.a.shape() && g.b.shape() == l.b.shape()
            })
            && self.head_w.shape() == model.head_w.shape()
            && self.head_b.len() == model.head_b.len();
        if ok {
            Ok(())
        } else {
            Err(Error::shape("tensor set does not mirror the model's trainable parameters"))
        }
    }

    fn check_same(&self, other: &Gradients) -> Result<()> {
        let ok = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(x, y)| {
                x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape()
            })
            && self.head_w.shape() == other.head_w.shape()
            && self.head_b.len() == other.head_b.len();
        if ok {
            Ok(())
        } else {
            Err(Error::shape("tensor sets have different shapes"))
        }
    }

    /// Tensors in a fixed order: per layer A then B, then head weight, head bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.a.as_slice());
            out.push(l.b.as_slice());
        }
        out.push(self.head_w.as_slice());
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.a.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
        out
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        self.check_same(other)?;
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn sub(&self, other: &Gradients) -> Result<Gradients> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Optional FedProx term `μ/2·‖θ − θ_ref‖²` added to the loss.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub reference: &'a Gradients,
}

/// SCAFFOLD correction: the step uses `g + c − c_i`.
#[derive(Debug, Clone, Copy)]
pub struct ControlCorrection<'a> {
    pub server: &'a ControlVariate,
    pub client: &'a ControlVariate,
}

struct LayerCache {
    input: Vec<f64>,
    u: Vec<f64>,
    pre: Vec<f64>,
}

impl LoraMlp {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.head_w.rows()
    }

    pub fn psi(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.psi).collect()
    }

    pub fn set_psi(&mut self, psi: &[bool]) -> Result<()> {
        if psi.len() != self.layers.len() {
            return Err(Error::config(
                "model.psi",
                format!("{} flags for {} layers", psi.len(), self.layers.len()),
            ));
        }
        for (l, &p) in self.layers.iter_mut().zip(psi) {
            l.psi = p;
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(LoraLinear::out_dim));
        Architecture {
            widths,
            classes: self.classes(),
            rank: self.layers[0].rank(),
        }
    }

    pub fn same_shape(&self, other: &LoraMlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(x, y)| {
                x.w0.shape() == y.w0.shape() && x.a.shape() == y.a.shape() && x.psi == y.psi
            })
            && self.head_w.shape() == other.head_w.shape()
    }

    pub fn base_weights(&self) -> BaseWeights {
        BaseWeights {
            layers: self
                .layers
                .iter()
                .map(|l| (l.w0.clone(), l.bias.clone()))
                .collect(),
        }
    }

    pub fn set_base(&mut self, base: &BaseWeights) -> Result<()> {
        if base.layers.len() != self.layers.len() {
            return Err(Error::shape("base weights layer count differs from model"));
        }
        for (l, (w0, bias)) in self.layers.iter_mut().zip(&base.layers) {
            if w0.shape() != l.w0.shape() || bias.len() != l.bias.len() {
                return Err(Error::shape("base weight shape differs from model"));
            }
            l.w0 = w0.clone();
            l.bias = bias.clone();
        }
        Ok(())
    }

    /// Overwrites the trainable tensors.
    pub fn set_trainable(&mut self, params: &Gradients) -> Result<()> {
        params.check_matches(self)?;
        for (l, p) in self.layers.iter_mut().zip(&params.layers) {
            l.a = p.a.clone();
            l.b = p.b.clone();
        }
        self.head_w = params.head_w.clone();
        self.head_b = params.head_b.clone();
        Ok(())
    }

    fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.a.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
        out
    }

    /// Trainable element count: adapters plus head.
    pub fn trainable_params(&self) -> usize {
        self.layers.iter().map(LoraLinear::adapter_params).sum::<usize>()
            + self.head_w.len()
            + self.head_b.len()
    }

    fn forward_cached(&self, x: &[f64]) -> Result<(Vec<LayerCache>, Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} for model expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (pre, u) = layer.forward_cached(&act)?;
            let next = if i < last {
                pre.iter().map(|v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            caches.push(LayerCache { input: act, u, pre });
            act = next;
        }
        let mut logits = self.head_w.matvec(&act)?;
        for (z, b) in logits.iter_mut().zip(&self.head_b) {
            *z += b;
        }
        Ok((caches, act, logits))
    }
}

/// Logits of the composed network.
pub fn model_forward(model: &LoraMlp, x: &[f64]) -> Result<Vec<f64>> {
    model.forward_cached(x).map(|(_, _, logits)| logits)
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// trainable tensor. With `prox`, `μ/2·‖θ − θ_ref‖²` joins the loss and
/// `μ·(θ − θ_ref)` the gradient.
pub fn backward(
    model: &LoraMlp,
    features: &[&[f64]],
    labels: &[usize],
    prox: Option<Prox<'_>>,
) -> Result<(f64, Gradients)> {
    if features.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if features.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows with {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    let last = model.layers.len() - 1;
    for (x, &y) in features.iter().zip(labels) {
        let (caches, top, logits) = model.forward_cached(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
        total += loss;
        grads.head_w.add_outer(1.0, &dlogits, &top)?;
        for (g, d) in grads.head_b.iter_mut().zip(&dlogits) {
            *g += d;
        }
        let mut delta = model.head_w.matvec_t(&dlogits)?;
        for (i, (layer, cache)) in model.layers.iter().zip(&caches).enumerate().rev() {
            if i < last {
                for (d, p) in delta.iter_mut().zip(&cache.pre) {
                    if *p <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let g = &mut grads.layers[i];
            g.b.add_outer(1.0, &delta, &cache.u)?;
            let du = layer.b.matvec_t(&delta)?;
            g.a.add_outer(1.0, &du, &cache.input)?;
            if i > 0 {
                let mut dx = layer.w0.matvec_t(&delta)?;
                for (d, v) in dx.iter_mut().zip(layer.a.matvec_t(&du)?) {
                    *d += v;
                }
                delta = dx;
            }
        }
    }
    let n = features.len() as f64;
    grads.scale(1.0 / n);
    let mut loss = total / n;
    if let Some(p) = prox {
        p.reference.check_matches(model)?;
        let current = Gradients::of_model(model);
        let diff = current.sub(p.reference)?;
        loss += 0.5 * p.mu * diff.norm().powi(2);
        grads.axpy(p.mu, &diff)?;
    }
    Ok((loss, grads))
}

/// `p ← p − lr·(g + c − c_i)` on every trainable tensor.
pub fn sgd_step(
    model: &mut LoraMlp,
    grads: &Gradients,
    lr: f64,
    correction: Option<ControlCorrection<'_>>,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("training.lr", format!("learning rate {lr} must be ≥ 0")));
    }
    grads.check_matches(model)?;
    let step = match correction {
        Some(cv) => {
            cv.server.check_matches(model)?;
            cv.client.check_matches(model)?;
            let mut g = grads.clone();
            g.axpy(1.0, cv.server)?;
            g.axpy(-1.0, cv.client)?;
            std::borrow::Cow::Owned(g)
        }
        None => std::borrow::Cow::Borrowed(grads),
    };
    for (dst, g) in model.trainable_mut().into_iter().zip(step.tensors()) {
        for (p, gi) in dst.iter_mut().zip(g) {
            *p -= lr * gi;
        }
    }
    Ok(())
}

/// Fresh model: random frozen base (He-scaled Gaussian, zero bias),
/// `A ~ N(0, 0.02²)`, `B = 0`, Gaussian head.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<LoraMlp> {
    arch.validate()?;
    let mut rng = RngStream::named(seed, StreamTag::Init, 0, 0);
    let mut layers = Vec::with_capacity(arch.layer_count());
    for w in arch.widths.windows(2) {
        let (k, d) = (w[0], w[1]);
        let w0 = Matrix::gaussian(d, k, (2.0 / k as f64).sqrt(), &mut rng);
        let a = Matrix::gaussian(arch.rank, k, A_INIT_STD, &mut rng);
        let b = Matrix::zeros(d, arch.rank);
        layers.push(LoraLinear::new(w0, vec![0.0; d], a, b, true)?);
    }
    let top = *arch.widths.last().unwrap();
    let head_w = Matrix::gaussian(arch.classes, top, (1.0 / top as f64).sqrt(), &mut rng);
    Ok(LoraMlp {
        layers,
        head_w,
        head_b: vec![0.0; arch.classes],
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    psi: Vec<u8>,
    tensors: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "fedlora-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn tensor(name: String, m: &Matrix) -> NamedTensor {
    NamedTensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn vector(name: String, v: &[f64]) -> NamedTensor {
    NamedTensor {
        name,
        shape: vec![v.len()],
        data: v.to_vec(),
    }
}

/// Serializes a model as JSON: named tensors with explicit shapes.
pub fn checkpoint_to_json(model: &LoraMlp) -> String {
    let mut tensors = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        tensors.push(tensor(format!("layers.{i}.w0"), &l.w0));
        tensors.push(vector(format!("layers.{i}.bias"), &l.bias));
        tensors.push(tensor(format!("layers.{i}.a"), &l.a));
        tensors.push(tensor(format!("layers.{i}.b"), &l.b));
    }
    tensors.push(tensor("head.weight".into(), &model.head_w));
    tensors.push(vector("head.bias".into(), &model.head_b));
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        psi: model.layers.iter().map(|l| l.psi as u8).collect(),
        tensors,
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serializes")
}

pub fn checkpoint_from_json(text: &str) -> Result<LoraMlp> {
    let file: CheckpointFile = serde_json::from_str(text)
        .map_err(|e| Error::input(format!("malformed checkpoint: {e}")))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(Error::input(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut map: std::collections::HashMap<String, NamedTensor> =
        file.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    let mut layers = Vec::with_capacity(file.psi.len());
    for (i, &psi) in file.psi.iter().enumerate() {
        let w0 = take_matrix(&mut map, &format!("layers.{i}.w0"))?;
        let bias = take_vector(&mut map, &format!("layers.{i}.bias"))?;
        let a = take_matrix(&mut map, &format!("layers.{i}.a"))?;
        let b = take_matrix(&mut map, &format!("layers.{i}.b"))?;
        layers.push(LoraLinear::new(w0, bias, a, b, psi != 0)?);
    }
    let head_w = take_matrix(&mut map, "head.weight")?;
    let head_b = take_vector(&mut map, "head.bias")?;
    if layers.is_empty() {
        return Err(Error::input("checkpoint has no layers"));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::input(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    let model = LoraMlp {
        layers,
        head_w,
        head_b,
    };
    validate_model(&model)?;
    Ok(model)
}

fn take_matrix(
    map: &mut std::collections::HashMap<String, NamedTensor>,
    name: &str,
) -> Result<Matrix> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::input(format!("checkpoint lacks tensor `{name}`")))?;
    match t.shape[..] {
        [r, c] => Matrix::new(r, c, t.data),
        _ => Err(Error::input(format!("tensor `{name}` is not 2-D"))),
    }
}

fn take_vector(
    map: &mut std::collections::HashMap<String, NamedTensor>,
    name: &str,
) -> Result<Vec<f64>> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::input(format!("checkpoint lacks tensor `{name}`")))?;
    if t.shape.len() != 1 || t.shape[0] != t.data.len() {
        return Err(Error::input(format!("tensor `{name}` is not a vector")));
    }
    if t.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::input(format!("tensor `{name}` has non-finite entries")));
    }
    Ok(t.data)
}

fn validate_model(model: &LoraMlp) -> Result<()> {
    for w in model.layers.windows(2) {
        if w[0].out_dim() != w[1].in_dim() {
            return Err(Error::shape("adjacent layer widths do not match"));
        }
    }
    let top = model.layers.last().map_or(0, LoraLinear::out_dim);
    if model.head_w.cols() != top || model.head_b.len() != model.head_w.rows() {
        return Err(Error::shape("head does not match last layer width"));
    }
    Ok(())
}

pub fn save_checkpoint(model: &LoraMlp, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoraMlp> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
}

//! Client-side optimisation: base pretraining and local mini-batch SGD.

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{backward, sgd_step, BaseWeights, ControlCorrection, Gradients, LoraMlp, Prox};
use crate::math::{softmax_cross_entropy, Matrix, RngStream, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl LocalTraining {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("training.lr", format!("{} must be ≥ 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Extra terms or state a strategy mixes into local SGD.
#[derive(Debug, Clone, Copy)]
pub enum LocalObjective<'a> {
    Plain,
    Prox(Prox<'a>),
    Control(ControlCorrection<'a>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    /// Mean of the per-batch losses seen before each step.
    pub mean_loss: f64,
    pub steps: usize,
    /// Full training-split loss after every step, when requested.
    pub objective_trace: Option<Vec<f64>>,
}

fn batches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_refs<'d>(data: &'d Dataset, idx: &[usize]) -> (Vec<&'d [f64]>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.sample(i)).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

/// Mean cross-entropy of `model` over a whole dataset.
pub fn dataset_loss(model: &LoraMlp, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (xs, ys) = batch_refs(data, &idx);
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(&ys) {
        let logits = crate::lora::model_forward(model, x)?;
        total += softmax_cross_entropy(&logits, y)?.0;
    }
    Ok(total / data.len().max(1) as f64)
}

/// `local_epochs` shuffled passes of mini-batch SGD over `train`.
pub fn train_model(
    model: &mut LoraMlp,
    train: &Dataset,
    hp: &LocalTraining,
    objective: LocalObjective<'_>,
    rng: &mut RngStream,
    record_trace: bool,
) -> Result<LocalOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::input("empty training split"));
    }
    let mut losses = Vec::new();
    let mut trace = record_trace.then(Vec::new);
    for _ in 0..hp.local_epochs {
        for idx in batches(train.len(), hp.batch_size, rng) {
            let (xs, ys) = batch_refs(train, &idx);
            let prox = match objective {
                LocalObjective::Prox(p) => Some(p),
                _ => None,
            };
            let (loss, grads) = backward(model, &xs, &ys, prox)?;
            let correction = match objective {
                LocalObjective::Control(c) => Some(c),
                _ => None,
            };
            sgd_step(model, &grads, hp.lr, correction)?;
            losses.push(loss);
            if let Some(t) = trace.as_mut() {
                t.push(dataset_loss(model, train)?);
            }
        }
    }
    Ok(LocalOutcome {
        mean_loss: mean(&losses),
        steps: losses.len(),
        objective_trace: trace,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Convex combination `α·local + (1 − α)·shared` of the trainable tensors;
/// frozen tensors come from `shared`.
pub fn mix_models(local: &LoraMlp, shared: &LoraMlp, alpha: f64) -> Result<LoraMlp> {
    let mut mixed = Gradients::of_model(shared);
    mixed.scale(1.0 - alpha);
    mixed.axpy(alpha, &Gradients::of_model(local))?;
    let mut out = shared.clone();
    out.set_trainable(&mixed)?;
    Ok(out)
}

/// APFL local phase: each batch steps the shared model on its own loss and
/// the local model on the loss of the mixture `α·v + (1 − α)·w`, whose
/// gradient with respect to `v` is `α·∇`.
pub fn train_apfl(
    shared: &mut LoraMlp,
    local: &mut LoraMlp,
    alpha: f64,
    train: &Dataset,
    hp: &LocalTraining,
    rng: &mut RngStream,
) -> Result<LocalOutcome> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::input("empty training split"));
    }
    let mut losses = Vec::new();
    for _ in 0..hp.local_epochs {
        for idx in batches(train.len(), hp.batch_size, rng) {
            let (xs, ys) = batch_refs(train, &idx);
            let (_, g_shared) = backward(shared, &xs, &ys, None)?;
            let mixed = mix_models(local, shared, alpha)?;
            let (loss, mut g_mix) = backward(&mixed, &xs, &ys, None)?;
            g_mix.scale(alpha);
            sgd_step(shared, &g_shared, hp.lr, None)?;
            sgd_step(local, &g_mix, hp.lr, None)?;
            losses.push(loss);
        }
    }
    Ok(LocalOutcome {
        mean_loss: mean(&losses),
        steps: losses.len(),
        objective_trace: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Full-parameter MLP with the same topology as the LoRA model, used only
/// to produce frozen base weights.
struct DenseMlp {
    layers: Vec<(Matrix, Vec<f64>)>,
    head_w: Matrix,
    head_b: Vec<f64>,
}

impl DenseMlp {
    fn accumulate(&self, x: &[f64], y: usize, grads: &mut DenseMlp) -> Result<f64> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.matvec(&act)?;
            pre.iter_mut().zip(b).for_each(|(p, bi)| *p += bi);
            let next = if i < last {
                pre.iter().map(|v| v.max(0.0)).collect()
            } else {
                pre.clone()
            };
            inputs.push(act);
            pres.push(pre);
            act = next;
        }
        let mut logits = self.head_w.matvec(&act)?;
        logits.iter_mut().zip(&self.head_b).for_each(|(z, b)| *z += b);
        let (loss, dlogits) = softmax_cross_entropy(&logits, y)?;
        grads.head_w.add_outer(1.0, &dlogits, &act)?;
        grads.head_b.iter_mut().zip(&dlogits).for_each(|(g, d)| *g += d);
        let mut delta = self.head_w.matvec_t(&dlogits)?;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                delta.iter_mut().zip(&pres[i]).for_each(|(d, p)| {
                    if *p <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            grads.layers[i].0.add_outer(1.0, &delta, &inputs[i])?;
            grads.layers[i].1.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            if i > 0 {
                delta = self.layers[i].0.matvec_t(&delta)?;
            }
        }
        Ok(loss)
    }

    fn zeros_like(&self) -> DenseMlp {
        DenseMlp {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (Matrix::zeros(w.rows(), w.cols()), vec![0.0; b.len()]))
                .collect(),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: vec![0.0; self.head_b.len()],
        }
    }

    fn step(&mut self, g: &DenseMlp, scale: f64) -> Result<()> {
        for ((w, b), (gw, gb)) in self.layers.iter_mut().zip(&g.layers) {
            w.axpy(-scale, gw)?;
            b.iter_mut().zip(gb).for_each(|(v, d)| *v -= scale * d);
        }
        self.head_w.axpy(-scale, &g.head_w)?;
        self.head_b.iter_mut().zip(&g.head_b).for_each(|(v, d)| *v -= scale * d);
        Ok(())
    }
}

/// Trains `W0`, bias and head of `init` on pooled data with plain SGD and
/// returns the resulting base weights. Zero epochs returns `init`'s base.
pub fn pretrain_base(
    init: &LoraMlp,
    pooled: &Dataset,
    opts: PretrainOptions,
    seed: u64,
) -> Result<BaseWeights> {
    if pooled.is_empty() {
        return Err(Error::input("pretraining needs a non-empty pooled dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("model.pretrain_batch_size", "must be ≥ 1"));
    }
    let mut net = DenseMlp {
        layers: init.base_weights().layers,
        head_w: init.head_w.clone(),
        head_b: init.head_b.clone(),
    };
    for epoch in 0..opts.epochs {
        let mut rng = RngStream::named(seed, StreamTag::Pretrain, 0, epoch as u64);
        for idx in batches(pooled.len(), opts.batch_size, &mut rng) {
            let mut g = net.zeros_like();
            for &i in &idx {
                net.accumulate(pooled.sample(i), pooled.labels[i], &mut g)?;
            }
            net.step(&g, opts.lr / idx.len() as f64)?;
        }
    }
    Ok(BaseWeights { layers: net.layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::lora::{init_model, Architecture};

    fn separable() -> Dataset {
        generate_synthetic(
            &SyntheticSpec {
                classes: 3,
                dim: 6,
                samples_per_class: 40,
                separation: 6.0,
                noise_std: 0.5,
                ..SyntheticSpec::default()
            },
            4,
        )
        .unwrap()
    }

    fn model() -> LoraMlp {
        init_model(
            &Architecture {
                widths: vec![6, 8, 8],
                classes: 3,
                rank: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let data = separable();
        let mut m = model();
        let before = m.clone();
        let hp = LocalTraining {
            lr: 0.0,
            local_epochs: 2,
            batch_size: 8,
        };
        let mut rng = RngStream::named(0, StreamTag::LocalTrain, 0, 0);
        train_model(&mut m, &data, &hp, LocalObjective::Plain, &mut rng, false).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_objective_mostly_decreases() {
        let data = separable();
        let mut m = model();
        let hp = LocalTraining {
            lr: 0.01,
            local_epochs: 1,
            batch_size: 8,
        };
        let mut rng = RngStream::named(0, StreamTag::LocalTrain, 0, 0);
        let out = train_model(&mut m, &data, &hp, LocalObjective::Plain, &mut rng, true).unwrap();
        let trace = out.objective_trace.unwrap();
        let down = trace.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down as f64 >= 0.8 * (trace.len() - 1) as f64, "{down}/{}", trace.len() - 1);
    }

    #[test]
    fn prox_anchored_at_start_matches_plain_single_step() {
        let data = separable();
        let hp = LocalTraining {
            lr: 0.05,
            local_epochs: 1,
            batch_size: data.len(),
        };
        let mut plain = model();
        let mut prox = model();
        let anchor = Gradients::of_model(&prox);
        let mut r1 = RngStream::named(0, StreamTag::LocalTrain, 0, 0);
        let mut r2 = r1.clone();
        train_model(&mut plain, &data, &hp, LocalObjective::Plain, &mut r1, false).unwrap();
        train_model(
            &mut prox,
            &data,
            &hp,
            LocalObjective::Prox(Prox {
                mu: 3.0,
                reference: &anchor,
            }),
            &mut r2,
            false,
        )
        .unwrap();
        assert_eq!(plain, prox);
    }

    #[test]
    fn apfl_mixture_endpoints() {
        let a = model();
        let mut b = model();
        b.head_w.scale(2.0);
        assert_eq!(mix_models(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mix_models(&a, &b, 1.0).unwrap().head_w, a.head_w);
    }

    #[test]
    fn pretraining_helps_and_zero_epochs_is_identity() {
        let data = separable();
        let m = model();
        let none = pretrain_base(
            &m,
            &data,
            PretrainOptions {
                epochs: 0,
                lr: 0.1,
                batch_size: 16,
            },
            0,
        )
        .unwrap();
        assert_eq!(none, m.base_weights());
        let base = pretrain_base(
            &m,
            &data,
            PretrainOptions {
                epochs: 5,
                lr: 0.1,
                batch_size: 16,
            },
            0,
        )
        .unwrap();
        assert_ne!(base, m.base_weights());
    }
}

//! Server-side aggregation: B-distance similarity weights, personalized A
//! aggregation and size-weighted averaging.
//!
//! Every weighted sum here drops zero-weight terms and adds the remaining
//! products in ascending order, which makes results independent of client
//! numbering and keeps an identity weight row bit-exact.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lora::{Gradients, LoraMlp};
use crate::math::{frob_distance, Matrix};

/// Sum of `weights[j]·values[j]` over non-zero weights, in a canonical order.
fn canonical_weighted_sum(weights: &[f64], values: impl Fn(usize) -> f64) -> f64 {
    let mut terms: Vec<f64> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(j, &w)| w * values(j))
        .collect();
    terms.sort_by(f64::total_cmp);
    let mut it = terms.into_iter();
    match it.next() {
        Some(first) => it.fold(first, |acc, t| acc + t),
        None => 0.0,
    }
}

fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut it = values.iter().copied();
    match it.next() {
        Some(first) => it.fold(first, |acc, t| acc + t),
        None => 0.0,
    }
}

/// Mean over the `ψ`-selected layers of the Frobenius distance between two
/// clients' `B` matrices, for every client pair.
pub fn pairwise_b_distance(models: &[&LoraMlp], psi: &[bool]) -> Result<Matrix> {
    let selected = psi.iter().filter(|&&p| p).count();
    if selected == 0 {
        return Err(Error::config("model.psi", "at least one layer must take part in distances"));
    }
    let n = models.len();
    let layers = psi.len();
    for m in models {
        if m.layers.len() != layers {
            return Err(Error::shape(format!(
                "ψ has {layers} flags, model has {} layers",
                m.layers.len()
            )));
        }
    }
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let mut total = 0.0;
            for (l, _) in psi.iter().enumerate().filter(|(_, &p)| p) {
                total += frob_distance(&models[i].layers[l].b, &models[j].layers[l].b)?;
            }
            let v = total / selected as f64;
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// Row-stochastic aggregation weights: `λ` on the diagonal, `(1 − λ)` spread
/// over the other clients in proportion to `1/(d + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub lambda: f64,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.s.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.s.row(i)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.size()).map(|i| self.row(i).to_vec()).collect()
    }
}

pub fn similarity_weights(distances: &Matrix, lambda: f64, epsilon: f64) -> Result<SimilarityMatrix> {
    let n = distances.rows();
    if distances.cols() != n {
        return Err(Error::shape("distance matrix must be square"));
    }
    if n < 2 {
        return Err(Error::config("partition.clients", "similarity weights need at least 2 clients"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("strategy.lambda", format!("{lambda} outside [0, 1]")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config("strategy.epsilon", format!("{epsilon} must be > 0")));
    }
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        let row = distances.row(i);
        if row.iter().enumerate().any(|(j, &v)| j != i && v < 0.0) {
            return Err(Error::input("distances must be non-negative"));
        }
        let all_zero = row.iter().enumerate().all(|(j, &v)| j == i || v == 0.0);
        let inv: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| if j == i { 0.0 } else { 1.0 / (v + epsilon) })
            .collect();
        let mut off: Vec<f64> = inv.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v).collect();
        let denom = canonical_sum(&mut off);
        for j in 0..n {
            let w = if j == i {
                lambda
            } else if all_zero {
                (1.0 - lambda) / (n - 1) as f64
            } else {
                (1.0 - lambda) * (inv[j] / denom)
            };
            s.set(i, j, w);
        }
    }
    Ok(SimilarityMatrix { s, lambda })
}

/// `A_i ← Σ_j s_ij·A_j` for every layer, read from a snapshot taken before
/// any client is updated. `B` and heads are not touched.
pub fn aggregate_epfl(weights: &SimilarityMatrix, models: &mut [&mut LoraMlp]) -> Result<()> {
    let n = models.len();
    if weights.size() != n {
        return Err(Error::shape(format!(
            "{}x{} weights for {n} clients",
            weights.size(),
            weights.size()
        )));
    }
    if n == 0 {
        return Ok(());
    }
    let layers = models[0].layers.len();
    let snapshot: Vec<Vec<Matrix>> = models
        .iter()
        .map(|m| m.layers.iter().map(|l| l.a.clone()).collect())
        .collect();
    for s in &snapshot {
        if s.len() != layers
            || s.iter().zip(&snapshot[0]).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("clients disagree on A shapes"));
        }
    }
    for (i, model) in models.iter_mut().enumerate() {
        let w = weights.row(i);
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let out = layer.a.as_mut_slice();
            for (e, slot) in out.iter_mut().enumerate() {
                *slot = canonical_weighted_sum(w, |j| snapshot[j][l].as_slice()[e]);
            }
        }
    }
    Ok(())
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n || n == 0 {
        return Err(Error::config(
            "aggregation.weights",
            format!("{} weights for {n} clients", weights.len()),
        ));
    }
    if weights.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::config("aggregation.weights", "weights must be finite and ≥ 0"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("aggregation.weights", format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ_i p_i·x_i` over every trainable tensor.
pub fn aggregate_fedavg(params: &[&Gradients], weights: &[f64]) -> Result<Gradients> {
    check_weights(weights, params.len())?;
    let mut out = params[0].clone();
    for p in &params[1..] {
        if p.tensors().iter().map(|t| t.len()).ne(out.tensors().iter().map(|t| t.len())) {
            return Err(Error::shape("clients disagree on trainable tensor shapes"));
        }
    }
    let views: Vec<Vec<&[f64]>> = params.iter().map(|p| p.tensors()).collect();
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for (e, slot) in dst.iter_mut().enumerate() {
            *slot = canonical_weighted_sum(weights, |j| views[j][t][e]);
        }
    }
    Ok(out)
}

/// Weights proportional to client sample counts.
pub fn size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Replaces every client's `A` with the `weights`-average of all clients' `A`.
pub fn average_a_matrices(models: &mut [&mut LoraMlp], weights: &[f64]) -> Result<()> {
    check_weights(weights, models.len())?;
    let n = models.len();
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for (j, &w) in weights.iter().enumerate() {
            s.set(i, j, w);
        }
    }
    aggregate_epfl(&SimilarityMatrix { s, lambda: f64::NAN }, models)
}

/// Replaces every client's head with the `weights`-average head.
pub fn average_heads(models: &mut [&mut LoraMlp], weights: &[f64]) -> Result<()> {
    check_weights(weights, models.len())?;
    let mut w_sum = models[0].head_w.clone();
    let mut b_sum = models[0].head_b.clone();
    for (e, slot) in w_sum.as_mut_slice().iter_mut().enumerate() {
        *slot = canonical_weighted_sum(weights, |j| models[j].head_w.as_slice()[e]);
    }
    for (e, slot) in b_sum.iter_mut().enumerate() {
        *slot = canonical_weighted_sum(weights, |j| models[j].head_b[e]);
    }
    for m in models.iter_mut() {
        m.head_w = w_sum.clone();
        m.head_b = b_sum.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_model, Architecture};

    fn two_layer(seed: u64) -> LoraMlp {
        init_model(
            &Architecture {
                widths: vec![2, 2, 2],
                classes: 2,
                rank: 2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identical_b_gives_zero_distance() {
        let m = two_layer(1);
        let d = pairwise_b_distance(&[&m, &m, &m], &[true, true]).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_selects_layers() {
        let a = two_layer(1);
        let mut b = a.clone();
        // layer-0 difference with Frobenius norm 5, layer 1 identical
        b.layers[0].b.set(0, 0, 3.0);
        b.layers[0].b.set(1, 1, 4.0);
        let d = |psi: &[bool]| pairwise_b_distance(&[&a, &b], psi).unwrap().get(0, 1);
        assert_eq!(d(&[true, true]), 2.5);
        assert_eq!(d(&[true, false]), 5.0);
        assert_eq!(d(&[false, true]), 0.0);
        assert!(matches!(
            pairwise_b_distance(&[&a, &b], &[false, false]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn perturbing_unselected_layer_is_invisible() {
        let a = two_layer(1);
        let mut b = two_layer(2);
        b.layers[1].b.set(0, 0, 0.75);
        let before = pairwise_b_distance(&[&a, &b], &[true, false]).unwrap();
        b.layers[1].b.set(1, 0, -9.0);
        let after = pairwise_b_distance(&[&a, &b], &[true, false]).unwrap();
        assert_eq!(before, after);
    }

    fn dist3(d12: f64, d13: f64, d23: f64) -> Matrix {
        Matrix::from_rows(&[
            vec![0.0, d12, d13],
            vec![d12, 0.0, d23],
            vec![d13, d23, 0.0],
        ])
        .unwrap()
    }

    #[test]
    fn symmetric_distances_split_evenly() {
        let s = similarity_weights(&dist3(1.0, 1.0, 2.0), 0.0, 1e-12).unwrap();
        assert!((s.s.get(0, 1) - 0.5).abs() < 1e-12);
        assert!((s.s.get(0, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_row() {
        let s = similarity_weights(&dist3(1.0, 3.0, 2.0), 0.2, 1e-15).unwrap();
        let row = s.row(0);
        assert_eq!(row[0], 0.2);
        assert!((row[1] - 0.6).abs() < 1e-12, "{row:?}");
        assert!((row[2] - 0.2).abs() < 1e-12, "{row:?}");
    }

    #[test]
    fn zero_distances_fall_back_to_uniform() {
        let s = similarity_weights(&Matrix::zeros(4, 4), 0.4, 1e-8).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 0.4 } else { 0.6 / 3.0 };
                assert_eq!(s.s.get(i, j), expect);
            }
        }
    }

    #[test]
    fn similarity_preconditions() {
        assert!(similarity_weights(&Matrix::zeros(1, 1), 0.5, 1e-8).is_err());
        assert!(similarity_weights(&Matrix::zeros(3, 3), 1.5, 1e-8).is_err());
        assert!(similarity_weights(&Matrix::zeros(3, 3), 0.5, 0.0).is_err());
    }

    #[test]
    fn identical_a_is_a_fixed_point() {
        let base = two_layer(3);
        let mut models = vec![base.clone(), base.clone(), base.clone()];
        let s = similarity_weights(&dist3(1.0, 2.0, 3.0), 0.3, 1e-8).unwrap();
        let mut refs: Vec<&mut LoraMlp> = models.iter_mut().collect();
        aggregate_epfl(&s, &mut refs).unwrap();
        for m in &models {
            for (l, b) in m.layers.iter().zip(&base.layers) {
                for (x, y) in l.a.as_slice().iter().zip(b.a.as_slice()) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn two_clients_half_lambda_average() {
        let a = two_layer(4);
        let b = two_layer(5);
        let mut models = [a.clone(), b.clone()];
        let s = similarity_weights(&Matrix::from_rows(&[vec![0.0, 0.7], vec![0.7, 0.0]]).unwrap(), 0.5, 1e-8)
            .unwrap();
        let mut refs: Vec<&mut LoraMlp> = models.iter_mut().collect();
        aggregate_epfl(&s, &mut refs).unwrap();
        for l in 0..2 {
            for e in 0..4 {
                let want = 0.5 * a.layers[l].a.as_slice()[e] + 0.5 * b.layers[l].a.as_slice()[e];
                assert!((models[0].layers[l].a.as_slice()[e] - want).abs() < 1e-15);
                assert!((models[1].layers[l].a.as_slice()[e] - want).abs() < 1e-15);
            }
        }
        assert_eq!(models[0].layers[0].b, a.layers[0].b);
        assert_eq!(models[1].head_w, b.head_w);
    }

    #[test]
    fn unit_lambda_is_identity() {
        let originals: Vec<LoraMlp> = (0..3).map(two_layer).collect();
        let mut models = originals.clone();
        let s = similarity_weights(&dist3(0.3, 0.1, 0.9), 1.0, 1e-8).unwrap();
        let mut refs: Vec<&mut LoraMlp> = models.iter_mut().collect();
        aggregate_epfl(&s, &mut refs).unwrap();
        assert_eq!(models, originals);
    }

    fn scalar_params(v: f64) -> Gradients {
        let mut m = init_model(
            &Architecture {
                widths: vec![1, 1],
                classes: 2,
                rank: 1,
            },
            0,
        )
        .unwrap();
        m.layers[0].a.set(0, 0, v);
        Gradients::of_model(&m)
    }

    #[test]
    fn fedavg_examples() {
        let (x, y) = (scalar_params(1.0), scalar_params(3.0));
        let g = aggregate_fedavg(&[&x, &y], &[0.5, 0.5]).unwrap();
        assert_eq!(g.layers[0].a.get(0, 0), 2.0);

        let (x, y) = (scalar_params(0.0), scalar_params(1.0));
        let p = size_weights(&[40, 60]);
        let g = aggregate_fedavg(&[&x, &y], &p).unwrap();
        assert!((g.layers[0].a.get(0, 0) - 0.6).abs() < 1e-15);

        let g = aggregate_fedavg(&[&x], &[1.0]).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn fedavg_rejects_bad_weights() {
        let x = scalar_params(1.0);
        assert!(matches!(aggregate_fedavg(&[&x, &x], &[0.7, 0.7]), Err(Error::Config { .. })));
        assert!(aggregate_fedavg(&[&x, &x], &[1.5, -0.5]).is_err());
        assert!(aggregate_fedavg(&[&x], &[0.5, 0.5]).is_err());
    }
}

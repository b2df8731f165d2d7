//! Evaluation, parameter accounting and report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{Strategy, StrategyConfig};
use crate::lora::{model_forward, LoraMlp};
use crate::math::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn evaluate_accuracy(model: &LoraMlp, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::input("cannot evaluate accuracy on an empty set"));
    }
    if features.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows with {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if argmax(&model_forward(model, features.row(i))?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub val_accuracy: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
    pub mean_accuracy: f64,
}

impl RoundMetrics {
    pub fn new(round: usize, clients: Vec<ClientRoundMetrics>) -> Self {
        let accs: Vec<f64> = clients.iter().map(|c| c.val_accuracy).collect();
        Self {
            round,
            mean_accuracy: mean(&accs),
            clients,
        }
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Element counts per client per round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub clients: usize,
    pub trainable_per_client: usize,
    pub communicated_up: usize,
    pub communicated_down: usize,
    /// `clients × (trainable + up + down)`.
    pub total_per_round: usize,
}

impl ParamReport {
    fn new(clients: usize, trainable: usize, up: usize, down: usize) -> Self {
        Self {
            clients,
            trainable_per_client: trainable,
            communicated_up: up,
            communicated_down: down,
            total_per_round: clients * (trainable + up + down),
        }
    }

    pub fn communicated(&self) -> usize {
        self.communicated_up + self.communicated_down
    }
}

/// Trainable and communicated element counts of `model` under `strategy`.
pub fn param_counts(model: &LoraMlp, strategy: &StrategyConfig, clients: usize) -> ParamReport {
    let a: usize = model.layers.iter().map(|l| l.a.len()).sum();
    let b: usize = model.layers.iter().map(|l| l.b.len()).sum();
    let head = model.head_w.len() + model.head_b.len();
    let trainable = a + b + head;
    let shared_head = if strategy.share_head { head } else { 0 };
    let (trainable, up, down) = match strategy.strategy {
        Strategy::Epfl { .. } => (trainable, a + b + shared_head, a + shared_head),
        Strategy::SimpleAvgA => (trainable, a + shared_head, a + shared_head),
        Strategy::FedAvg | Strategy::FedProx { .. } => (trainable, trainable, trainable),
        // model plus control variate in both directions
        Strategy::Scaffold => (trainable, 2 * trainable, 2 * trainable),
        // personalized and shared copies train, only the shared one moves
        Strategy::Apfl { .. } => (2 * trainable, trainable, trainable),
        Strategy::LocalOnly => (trainable, 0, 0),
    };
    ParamReport::new(clients, trainable, up, down)
}

/// FedAvg over full fine-tuning of the same network: every weight, bias and
/// the head train and travel both ways.
pub fn full_finetune_counts(model: &LoraMlp, clients: usize) -> ParamReport {
    let trainable = model
        .layers
        .iter()
        .map(|l| l.full_params() + l.bias.len())
        .sum::<usize>()
        + model.head_w.len()
        + model.head_b.len();
    ParamReport::new(clients, trainable, trainable, trainable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub seed: u64,
    pub strategy: String,
    pub rounds: Vec<RoundMetrics>,
    pub final_test_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub params: ParamReport,
    /// Last similarity matrix (epfl only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_similarity: Option<Vec<Vec<f64>>>,
    /// Generating cluster per client, when the data carries one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_clusters: Option<Vec<usize>>,
    /// Kept out of `report.json` so that file is reproducible; written to `timing.json`.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

pub fn trace_csv(report: &Report) -> String {
    let mut out = String::from("round,client,val_accuracy,train_loss\n");
    for r in &report.rounds {
        for (c, m) in r.clients.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", r.round, c, m.val_accuracy, m.train_loss));
        }
    }
    out
}

fn weights_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::from("client");
    for j in 0..rows.len() {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `trace.csv`, `report.json`, `timing.json` and, for epfl,
/// `weights_final.csv`. Each file is replaced atomically.
pub fn write_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![
        write_atomic(out_dir, "trace.csv", trace_csv(report).as_bytes())?,
        write_atomic(out_dir, "report.json", report_json(report).as_bytes())?,
        write_atomic(
            out_dir,
            "timing.json",
            format!("{{\"wall_clock_seconds\": {}}}\n", report.wall_clock_seconds).as_bytes(),
        )?,
    ];
    let weights = out_dir.join("weights_final.csv");
    match &report.final_similarity {
        Some(rows) => written.push(write_atomic(out_dir, "weights_final.csv", weights_csv(rows).as_bytes())?),
        None if weights.exists() => fs::remove_file(&weights).map_err(|e| Error::io(&weights, e))?,
        None => {}
    }
    Ok(written)
}

/// Parses a `trace.csv` back into per-round metrics.
pub fn read_trace(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("round,client,val_accuracy,train_loss") {
        return Err(Error::input(format!("{}: unexpected header", path.display())));
    }
    let mut rounds: Vec<(usize, Vec<ClientRoundMetrics>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::input(format!("{}: row {}: malformed", path.display(), i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let round: usize = f[0].parse().map_err(|_| bad())?;
        let client: usize = f[1].parse().map_err(|_| bad())?;
        let m = ClientRoundMetrics {
            val_accuracy: f[2].parse().map_err(|_| bad())?,
            train_loss: f[3].parse().map_err(|_| bad())?,
        };
        if rounds.last().map(|r| r.0) != Some(round) {
            rounds.push((round, Vec::new()));
        }
        let current = &mut rounds.last_mut().unwrap().1;
        if current.len() != client {
            return Err(bad());
        }
        current.push(m);
    }
    Ok(rounds.into_iter().map(|(r, c)| RoundMetrics::new(r, c)).collect())
}

/// A ViT-Base sized stack (twelve 768×768 layers) for parameter accounting.
pub fn reference_architecture(rank: usize, classes: usize) -> crate::lora::Architecture {
    crate::lora::Architecture {
        widths: vec![768; 13],
        classes,
        rank,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::StrategySection;
    use crate::lora::{init_model, Architecture, LoraLinear};

    fn strategy(name: &str) -> StrategyConfig {
        StrategySection::named(name).resolve().unwrap()
    }

    fn one_hot_model() -> LoraMlp {
        LoraMlp {
            layers: vec![LoraLinear::new(
                Matrix::identity(3),
                vec![0.0; 3],
                Matrix::zeros(1, 3),
                Matrix::zeros(3, 1),
                true,
            )
            .unwrap()],
            head_w: Matrix::identity(3),
            head_b: vec![0.0; 3],
        }
    }

    #[test]
    fn perfect_and_wrong_predictions() {
        let m = one_hot_model();
        let x = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &x, &[0, 2]).unwrap(), 1.0);
        let one = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &one, &[2]).unwrap(), 0.0);
        assert!(evaluate_accuracy(&m, &Matrix::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn constant_logits_tie_to_class_zero() {
        let mut m = init_model(
            &Architecture {
                widths: vec![2, 2],
                classes: 2,
                rank: 1,
            },
            0,
        )
        .unwrap();
        m.head_w.scale(0.0);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![-2.0, 0.0]]).unwrap();
        assert_eq!(evaluate_accuracy(&m, &x, &[0, 1, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn adapter_counts_for_single_layer() {
        let m = init_model(
            &Architecture {
                widths: vec![8, 16],
                classes: 2,
                rank: 2,
            },
            0,
        )
        .unwrap();
        let p = param_counts(&m, &strategy("epfl"), 1);
        assert_eq!(p.trainable_per_client, 48 + 2 * 16 + 2);
        assert_eq!(p.communicated_up, 48);
        assert_eq!(p.communicated_down, 16);
        assert_eq!(m.layers[0].full_params(), 128);
    }

    #[test]
    fn local_only_communicates_nothing() {
        let m = init_model(
            &Architecture {
                widths: vec![4, 4],
                classes: 2,
                rank: 2,
            },
            0,
        )
        .unwrap();
        let p = param_counts(&m, &strategy("local-only"), 5);
        assert_eq!((p.communicated_up, p.communicated_down), (0, 0));
        let e = param_counts(&m, &strategy("epfl"), 5);
        assert!(e.communicated_down < e.communicated_up);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    fn report(with_weights: bool) -> Report {
        let rounds = (1..=3)
            .map(|r| {
                RoundMetrics::new(
                    r,
                    (0..2)
                        .map(|c| ClientRoundMetrics {
                            val_accuracy: 0.1 * (r + c) as f64,
                            train_loss: 1.0 / (r as f64 + 0.3),
                        })
                        .collect(),
                )
            })
            .collect();
        Report {
            schema_version: SCHEMA_VERSION,
            config: serde_json::json!({"seed": 1}),
            seed: 1,
            strategy: "epfl".into(),
            rounds,
            final_test_accuracies: vec![0.5, 0.75],
            mean_final_accuracy: 0.625,
            params: ParamReport::new(2, 10, 4, 2),
            final_similarity: with_weights.then(|| vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
            client_clusters: None,
            wall_clock_seconds: 1.5,
        }
    }

    #[test]
    fn report_files_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(true);
        write_report(&r, dir.path()).unwrap();
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 3 * 2 + 1);
        let first = fs::read(dir.path().join("report.json")).unwrap();
        write_report(&r, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("report.json")).unwrap());
        assert!(dir.path().join("weights_final.csv").exists());
        assert_eq!(read_trace(&dir.path().join("trace.csv")).unwrap(), r.rounds);

        write_report(&report(false), dir.path()).unwrap();
        assert!(!dir.path().join("weights_final.csv").exists());
    }

    #[test]
    fn round_mean_matches_entries() {
        let r = report(false);
        for round in &r.rounds {
            let m: f64 = round.clients.iter().map(|c| c.val_accuracy).sum::<f64>() / 2.0;
            assert!((round.mean_accuracy - m).abs() < 1e-12);
        }
    }
}

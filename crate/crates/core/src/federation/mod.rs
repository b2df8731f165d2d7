//! Round-based client/server simulation.

pub mod aggregate;
mod experiment;
pub mod strategy;
pub mod train;

use rayon::prelude::*;

pub use aggregate::{
    aggregate_epfl, aggregate_fedavg, average_a_matrices, average_heads, pairwise_b_distance,
    similarity_weights, size_weights, SimilarityMatrix,
};
pub use experiment::{
    build_clients, build_experiment, load_dataset, partition_dataset, prepare_base, run_experiment,
    run_experiment_with, Experiment,
};
pub use strategy::{
    Availability, RegistryEntry, Strategy, StrategyConfig, StrategySection, REGISTRY,
};
pub use train::{
    dataset_loss, mix_models, pretrain_base, train_apfl, train_model, LocalObjective, LocalOutcome,
    LocalTraining, PretrainOptions,
};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::lora::{ControlCorrection, ControlVariate, Gradients, LoraMlp, Prox};
use crate::math::{RngStream, StreamTag};
use crate::metrics::{evaluate_accuracy, ClientRoundMetrics, RoundMetrics};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// For global-model strategies this is the client's copy of the shared model.
    pub model: LoraMlp,
    /// Indices into the full dataset.
    pub splits: Splits,
    pub data: ClientData,
    pub scaffold_c: Option<ControlVariate>,
    /// Personalized model `v` (apfl only).
    pub apfl_local: Option<LoraMlp>,
    pub rng: RngStream,
}

impl ClientState {
    /// The model this client is scored with.
    pub fn eval_model(&self, strategy: &Strategy) -> Result<LoraMlp> {
        match (strategy, &self.apfl_local) {
            (Strategy::Apfl { alpha }, Some(local)) => mix_models(local, &self.model, *alpha),
            _ => Ok(self.model.clone()),
        }
    }

    pub fn accuracy(&self, strategy: &Strategy, data: &Dataset) -> Result<f64> {
        evaluate_accuracy(&self.eval_model(strategy)?, &data.features, &data.labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub local: LocalTraining,
    /// Train clients on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub clients: Vec<ClientState>,
    /// Completed rounds.
    pub round: usize,
    pub total_rounds: usize,
    pub strategy: StrategyConfig,
    pub training: TrainingConfig,
    pub global: Option<LoraMlp>,
    pub scaffold_c: Option<ControlVariate>,
    /// Weights for global averaging, proportional to train-split size.
    pub fedavg_weights: Vec<f64>,
    pub last_similarity: Option<SimilarityMatrix>,
}

impl ServerState {
    /// Wires clients that already hold the common initial model.
    pub fn new(
        mut clients: Vec<ClientState>,
        strategy: StrategyConfig,
        training: TrainingConfig,
    ) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| Error::config("partition.clients", "need at least one client"))?;
        if clients.iter().any(|c| !c.model.same_shape(&first.model)) {
            return Err(Error::shape("clients hold differently shaped models"));
        }
        if matches!(strategy.strategy, Strategy::Epfl { .. } | Strategy::SimpleAvgA) && clients.len() < 2 {
            return Err(Error::config(
                "partition.clients",
                format!("`{}` needs at least two clients", strategy.strategy.name()),
            ));
        }
        let global = strategy.strategy.uses_global_model().then(|| first.model.clone());
        let scaffold_c = matches!(strategy.strategy, Strategy::Scaffold)
            .then(|| Gradients::zeros_like(&first.model));
        for c in &mut clients {
            c.scaffold_c = scaffold_c.clone();
            c.apfl_local = match strategy.strategy {
                Strategy::Apfl { .. } => Some(c.model.clone()),
                _ => None,
            };
        }
        let sizes: Vec<usize> = clients.iter().map(|c| c.data.train.len()).collect();
        Ok(Self {
            fedavg_weights: size_weights(&sizes),
            clients,
            round: 0,
            total_rounds: training.rounds,
            strategy,
            training,
            global,
            scaffold_c,
            last_similarity: None,
        })
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    /// Local phase of the current round; returns each client's mean batch loss.
    pub fn train_clients(&mut self) -> Result<Vec<f64>> {
        let round = self.round as u64;
        let hp = self.training.local;
        let strategy = self.strategy.strategy;
        let server_c = self.scaffold_c.as_ref();
        let work = |c: &mut ClientState| local_train(c, round, &hp, &strategy, server_c);
        let results: Vec<Result<f64>> = if self.training.parallel {
            self.clients.par_iter_mut().map(work).collect()
        } else {
            self.clients.iter_mut().map(work).collect()
        };
        results.into_iter().collect()
    }

    /// Server phase of the current round, reading a snapshot of every client.
    pub fn aggregate(&mut self) -> Result<()> {
        let n = self.clients.len();
        match self.strategy.strategy {
            Strategy::Epfl { lambda, epsilon } => {
                let psi = self.clients[0].model.psi();
                let d = {
                    let models: Vec<&LoraMlp> = self.clients.iter().map(|c| &c.model).collect();
                    pairwise_b_distance(&models, &psi)?
                };
                let s = similarity_weights(&d, lambda, epsilon)?;
                let mut models: Vec<&mut LoraMlp> = self.clients.iter_mut().map(|c| &mut c.model).collect();
                aggregate_epfl(&s, &mut models)?;
                if self.strategy.share_head {
                    average_heads(&mut models, &vec![1.0 / n as f64; n])?;
                }
                self.last_similarity = Some(s);
            }
            Strategy::SimpleAvgA => {
                let uniform = vec![1.0 / n as f64; n];
                let mut models: Vec<&mut LoraMlp> = self.clients.iter_mut().map(|c| &mut c.model).collect();
                average_a_matrices(&mut models, &uniform)?;
                if self.strategy.share_head {
                    average_heads(&mut models, &uniform)?;
                }
            }
            Strategy::FedAvg | Strategy::FedProx { .. } | Strategy::Apfl { .. } => {
                self.average_into_global()?;
            }
            Strategy::Scaffold => {
                // With every client participating, c + mean(Δc_i) = mean(c_i⁺).
                let mut mean_c = Gradients::zeros_like(&self.clients[0].model);
                for c in &self.clients {
                    mean_c.axpy(1.0 / n as f64, c.scaffold_c.as_ref().expect("client control variate"))?;
                }
                self.scaffold_c = Some(mean_c);
                self.average_into_global()?;
            }
            Strategy::LocalOnly => {}
        }
        Ok(())
    }

    fn average_into_global(&mut self) -> Result<()> {
        let global = {
            let params: Vec<Gradients> = self.clients.iter().map(|c| Gradients::of_model(&c.model)).collect();
            let refs: Vec<&Gradients> = params.iter().collect();
            aggregate_fedavg(&refs, &self.fedavg_weights)?
        };
        let g = self.global.as_mut().expect("global model");
        g.set_trainable(&global)?;
        for c in &mut self.clients {
            c.model.set_trainable(&global)?;
        }
        Ok(())
    }

    /// Validation accuracy of every client.
    pub fn evaluate_val(&self) -> Result<Vec<f64>> {
        let s = self.strategy.strategy;
        self.clients.iter().map(|c| c.accuracy(&s, &c.data.val)).collect()
    }

    /// Test accuracy of every client.
    pub fn evaluate_test(&self) -> Result<Vec<f64>> {
        let s = self.strategy.strategy;
        self.clients.iter().map(|c| c.accuracy(&s, &c.data.test)).collect()
    }

    /// One full round: local training, aggregation, validation.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.round >= self.total_rounds {
            return Err(Error::config(
                "training.rounds",
                format!("all {} rounds already run", self.total_rounds),
            ));
        }
        let losses = self.train_clients()?;
        self.aggregate()?;
        let accs = self.evaluate_val()?;
        self.round += 1;
        Ok(RoundMetrics::new(
            self.round,
            accs.into_iter()
                .zip(losses)
                .map(|(val_accuracy, train_loss)| ClientRoundMetrics {
                    val_accuracy,
                    train_loss,
                })
                .collect(),
        ))
    }
}

/// Local phase for one client under `strategy`. For scaffold the client's
/// control variate is updated in place (option II).
pub fn local_train(
    client: &mut ClientState,
    round: u64,
    hp: &LocalTraining,
    strategy: &Strategy,
    server_c: Option<&ControlVariate>,
) -> Result<f64> {
    let mut rng = client.rng.derive(StreamTag::LocalTrain, client.id as u64, round);
    let train = &client.data.train;
    let outcome = match strategy {
        Strategy::FedProx { mu } => {
            let reference = Gradients::of_model(&client.model);
            let prox = Prox { mu: *mu, reference: &reference };
            train_model(&mut client.model, train, hp, LocalObjective::Prox(prox), &mut rng, false)?
        }
        Strategy::Scaffold => {
            let server = server_c.ok_or_else(|| Error::input("scaffold round without server control variate"))?;
            let client_c = client.scaffold_c.take().expect("client control variate");
            let start = Gradients::of_model(&client.model);
            let correction = ControlCorrection {
                server,
                client: &client_c,
            };
            let out = train_model(
                &mut client.model,
                train,
                hp,
                LocalObjective::Control(correction),
                &mut rng,
                false,
            )?;
            let denom = out.steps as f64 * hp.lr;
            if denom == 0.0 {
                return Err(Error::config(
                    "training.lr",
                    "scaffold needs local steps × learning rate > 0",
                ));
            }
            // c_i⁺ = c_i − c + (x − y_i)/(K·lr)
            let mut next = start.sub(&Gradients::of_model(&client.model))?;
            next.scale(1.0 / denom);
            next.axpy(1.0, &client_c)?;
            next.axpy(-1.0, server)?;
            client.scaffold_c = Some(next);
            out
        }
        Strategy::Apfl { alpha } => {
            let local = client.apfl_local.as_mut().expect("apfl local model");
            train_apfl(&mut client.model, local, *alpha, train, hp, &mut rng)?
        }
        _ => train_model(&mut client.model, train, hp, LocalObjective::Plain, &mut rng, false)?,
    };
    Ok(outcome.mean_loss)
}

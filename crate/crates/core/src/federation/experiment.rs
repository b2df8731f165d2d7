use std::time::Instant;

use crate::config::{DataSource, DatasetSection, ExperimentConfig};
use crate::data::{
    dirichlet_partition, generate_synthetic, load_csv, natural_partition, split_4_3_3, Dataset,
    DirichletOptions, PartitionKind, PartitionSpec,
};
use crate::error::{Error, Result};
use crate::lora::{init_model, load_checkpoint, LoraMlp};
use crate::math::{RngStream, StreamTag};
use crate::metrics::{self, param_counts, Report, RoundMetrics, SCHEMA_VERSION};

use super::{pretrain_base, ClientData, ClientState, ServerState};

pub fn load_dataset(section: &DatasetSection, seed: u64) -> Result<Dataset> {
    let full = match &section.source {
        DataSource::Synthetic(spec) => generate_synthetic(spec, seed),
        DataSource::Csv(path) => load_csv(path),
    }
    .map_err(|e| e.context("dataset.source"))?;
    full.subsample(section.subsample_fraction, seed)
        .map_err(|e| e.context("dataset.subsample_fraction"))
}

pub fn partition_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<PartitionSpec> {
    let p = &config.partition;
    let spec = match p.kind {
        PartitionKind::Dirichlet => dirichlet_partition(
            &dataset.labels,
            DirichletOptions {
                clients: p.clients,
                alpha: p.effective_alpha(),
                min_per_client: p.min_per_client,
                max_retries: p.max_retries,
            },
            config.seed,
        ),
        PartitionKind::Natural => natural_partition(dataset, p.clients),
    }
    .map_err(|e| e.context("partition"))?;
    spec.validate(dataset.len())?;
    Ok(spec)
}

/// One client per partition entry, each split 4:3:3 and holding a clone of `model`.
pub fn build_clients(
    dataset: &Dataset,
    partition: &PartitionSpec,
    model: &LoraMlp,
    seed: u64,
) -> Result<Vec<ClientState>> {
    partition
        .clients
        .iter()
        .enumerate()
        .map(|(id, indices)| {
            let mut rng = RngStream::named(seed, StreamTag::Split, id as u64, 0);
            let splits = split_4_3_3(indices, &mut rng).map_err(|e| e.context(format!("client {id}")))?;
            let data = ClientData {
                train: dataset.select(&splits.train),
                test: dataset.select(&splits.test),
                val: dataset.select(&splits.val),
            };
            Ok(ClientState {
                id,
                model: model.clone(),
                splits,
                data,
                scaffold_c: None,
                apfl_local: None,
                rng: RngStream::named(seed, StreamTag::LocalTrain, id as u64, 0),
            })
        })
        .collect()
}

/// Initial model shared by every client: fresh adapters over a base that is
/// either loaded from a checkpoint or pretrained on the pooled train splits.
pub fn prepare_base(config: &ExperimentConfig, dataset: &Dataset, partition: &PartitionSpec) -> Result<LoraMlp> {
    let arch = config.model.architecture(dataset.dim(), dataset.classes);
    let mut model = init_model(&arch, config.seed).map_err(|e| e.context("model"))?;
    model.set_psi(&config.model.psi.resolve(arch.layer_count())?)?;
    let base = match &config.model.base_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| e.context("model.base_checkpoint"))?;
            if ckpt.architecture().widths != arch.widths || ckpt.classes() != arch.classes {
                return Err(Error::config(
                    "model.base_checkpoint",
                    format!(
                        "checkpoint widths {:?} / {} classes do not match {:?} / {}",
                        ckpt.architecture().widths,
                        ckpt.classes(),
                        arch.widths,
                        arch.classes
                    ),
                ));
            }
            ckpt.base_weights()
        }
        None => {
            // Pool only the training splits so no client's test data leaks.
            let mut pooled: Vec<usize> = Vec::new();
            for (id, indices) in partition.clients.iter().enumerate() {
                let mut rng = RngStream::named(config.seed, StreamTag::Split, id as u64, 0);
                pooled.extend(split_4_3_3(indices, &mut rng)?.train);
            }
            pooled.sort_unstable();
            pretrain_base(&model, &dataset.select(&pooled), config.model.pretrain_options(), config.seed)
                .map_err(|e| e.context("model.pretrain"))?
        }
    };
    model.set_base(&base)?;
    Ok(model)
}

/// Everything `run_experiment` builds before the first round.
pub struct Experiment {
    pub dataset: Dataset,
    pub partition: PartitionSpec,
    pub server: ServerState,
}

pub fn build_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset, config.seed)?;
    let partition = partition_dataset(config, &dataset)?;
    let model = prepare_base(config, &dataset, &partition)?;
    let clients = build_clients(&dataset, &partition, &model, config.seed)?;
    let server = ServerState::new(clients, config.strategy_config()?, config.training.to_training())?;
    Ok(Experiment {
        dataset,
        partition,
        server,
    })
}

fn majority_cluster(dataset: &Dataset, partition: &PartitionSpec) -> Option<Vec<usize>> {
    let ids = dataset.cluster_ids.as_ref()?;
    let k = ids.iter().copied().max()? + 1;
    Some(
        partition
            .clients
            .iter()
            .map(|members| {
                let mut counts = vec![0usize; k];
                for &i in members {
                    counts[ids[i]] += 1;
                }
                // most frequent, lowest id on ties
                (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best })
            })
            .collect(),
    )
}

/// Runs every round, calling `on_round` after each, and assembles the report.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    mut on_round: impl FnMut(&ServerState, &RoundMetrics),
) -> Result<Report> {
    let start = Instant::now();
    let Experiment {
        dataset,
        partition,
        mut server,
    } = build_experiment(config)?;
    let mut rounds = Vec::with_capacity(server.total_rounds);
    while server.round < server.total_rounds {
        let m = server
            .run_round()
            .map_err(|e| e.context(format!("round {}", server.round + 1)))?;
        on_round(&server, &m);
        rounds.push(m);
    }
    let final_test_accuracies = server.evaluate_test()?;
    let strategy = server.strategy;
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        config: config.to_json(),
        seed: config.seed,
        strategy: strategy.strategy.name().to_string(),
        rounds,
        mean_final_accuracy: metrics::mean(&final_test_accuracies),
        final_test_accuracies,
        params: param_counts(&server.clients[0].model, &strategy, server.client_count()),
        final_similarity: server.last_similarity.as_ref().map(|s| s.to_rows()),
        client_clusters: majority_cluster(&dataset, &partition),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    run_experiment_with(config, |_, _| {})
}

use fedlora::config::config_from_value;
use fedlora::federation::{build_experiment, mix_models};
use fedlora::lora::{save_checkpoint, init_model};
use fedlora::metrics::{read_trace, trace_csv};
use fedlora::{run_experiment, write_report, ErrorKind, ExperimentConfig, Gradients};
use serde_json::{json, Value};

fn doc(strategy: Value) -> Value {
    json!({
        "dataset": {"source": {"synthetic": {"classes": 4, "dim": 6, "samples_per_class": 30}}},
        "partition": {"clients": 4, "alpha": 1.0},
        "model": {"hidden": [6, 6], "rank": 2, "pretrain_epochs": 1},
        "training": {"rounds": 3, "batch_size": 8},
        "strategy": strategy,
        "seed": 21
    })
}

fn cfg(strategy: Value) -> ExperimentConfig {
    config_from_value(doc(strategy), &[]).unwrap()
}

fn trainable(m: &fedlora::LoraMlp) -> Vec<u64> {
    Gradients::of_model(m).tensors().into_iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn scaffold_first_round_matches_fedavg() {
    let mut scaffold = build_experiment(&cfg(json!({"name": "scaffold"}))).unwrap().server;
    let mut fedavg = build_experiment(&cfg(json!({"name": "fedavg"}))).unwrap().server;
    scaffold.run_round().unwrap();
    fedavg.run_round().unwrap();
    for (s, f) in scaffold.clients.iter().zip(&fedavg.clients) {
        assert_eq!(trainable(&s.model), trainable(&f.model));
    }
    // control variates are non-zero after one round, so the paths split
    scaffold.run_round().unwrap();
    fedavg.run_round().unwrap();
    assert_ne!(trainable(&scaffold.clients[0].model), trainable(&fedavg.clients[0].model));
}

#[test]
fn fedavg_clients_share_one_model() {
    let mut server = build_experiment(&cfg(json!({"name": "fedprox", "mu": 0.1}))).unwrap().server;
    server.run_round().unwrap();
    let global = trainable(server.global.as_ref().unwrap());
    assert!(server.clients.iter().all(|c| trainable(&c.model) == global));
}

#[test]
fn apfl_mixture_at_zero_alpha_scores_the_shared_model() {
    let mut server = build_experiment(&cfg(json!({"name": "apfl", "apfl_alpha": 0.0}))).unwrap().server;
    server.run_round().unwrap();
    let c = &server.clients[1];
    let mixed = mix_models(c.apfl_local.as_ref().unwrap(), &c.model, 0.0).unwrap();
    assert_eq!(trainable(&mixed), trainable(&c.model));
    let one = mix_models(c.apfl_local.as_ref().unwrap(), &c.model, 1.0).unwrap();
    assert_eq!(trainable(&one), trainable(c.apfl_local.as_ref().unwrap()));
}

#[test]
fn simple_avg_a_gives_every_client_the_same_a() {
    let mut server = build_experiment(&cfg(json!({"name": "simple-avg-a"}))).unwrap().server;
    server.run_round().unwrap();
    let first: Vec<u64> = server.clients[0].model.layers.iter().flat_map(|l| l.a.as_slice().to_vec()).map(f64::to_bits).collect();
    for c in &server.clients[1..] {
        let a: Vec<u64> = c.model.layers.iter().flat_map(|l| l.a.as_slice().to_vec()).map(f64::to_bits).collect();
        assert_eq!(a, first);
    }
    // B stays personal
    assert_ne!(server.clients[0].model.layers[0].b, server.clients[1].model.layers[0].b);
}

#[test]
fn zero_rounds_reports_the_initial_model() {
    let mut c = cfg(json!({"name": "epfl"}));
    c.training.rounds = 0;
    let report = run_experiment(&c).unwrap();
    assert!(report.rounds.is_empty());
    assert_eq!(report.final_test_accuracies.len(), 4);
    assert!(report.final_similarity.is_none());
    assert_eq!(trace_csv(&report).lines().count(), 1);
}

#[test]
fn zero_local_epochs_is_a_config_error() {
    let mut d = doc(json!({"name": "fedavg"}));
    d["training"]["local_epochs"] = json!(0);
    let err = config_from_value(d, &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(err.to_string().contains("training.local_epochs"));
}

#[test]
fn trace_has_one_row_per_client_round() {
    let report = run_experiment(&cfg(json!({"name": "epfl", "lambda": 0.7}))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_report(&report, dir.path()).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in ["trace.csv", "report.json", "weights_final.csv"] {
        assert!(names.iter().any(|n| n == expected), "{names:?}");
    }
    let trace = read_trace(&dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.len(), 3);
    assert!(trace.iter().all(|r| r.clients.len() == 4));
    assert_eq!(trace, report.rounds);
    let s = report.final_similarity.unwrap();
    assert!(s.iter().enumerate().all(|(i, row)| row[i] == 0.7));
}

#[test]
fn different_seeds_give_different_runs() {
    let a = run_experiment(&cfg(json!({"name": "fedavg"}))).unwrap();
    let mut c = cfg(json!({"name": "fedavg"}));
    c.seed = 22;
    let b = run_experiment(&c).unwrap();
    assert_ne!(trace_csv(&a), trace_csv(&b));
}

#[test]
fn base_checkpoint_replaces_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = fedlora::federation::load_dataset(&cfg(json!({"name": "epfl"})).dataset, 21).unwrap();
    let arch = cfg(json!({"name": "epfl"})).model.architecture(dataset.dim(), dataset.classes);
    let ckpt = init_model(&arch, 99).unwrap();
    let path = dir.path().join("base.json");
    save_checkpoint(&ckpt, &path).unwrap();

    let mut d = doc(json!({"name": "epfl"}));
    d["model"]["base_checkpoint"] = json!(path);
    let experiment = build_experiment(&config_from_value(d.clone(), &[]).unwrap()).unwrap();
    assert_eq!(experiment.server.clients[0].model.layers[0].w0, ckpt.layers[0].w0);

    d["model"]["hidden"] = json!([5, 6]);
    let err = build_experiment(&config_from_value(d, &[]).unwrap()).err().unwrap();
    assert!(err.to_string().contains("model.base_checkpoint"), "{err}");
}

#[test]
fn share_head_averages_heads_under_epfl() {
    let mut server = build_experiment(&cfg(json!({"name": "epfl", "share_head": true}))).unwrap().server;
    server.run_round().unwrap();
    let h0 = &server.clients[0].model.head_w;
    assert!(server.clients.iter().all(|c| &c.model.head_w == h0));
}

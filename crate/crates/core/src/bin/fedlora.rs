use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fedlora::config::{config_from_value, merge_patch, parse_override, read_json};
use fedlora::data::entropy;
use fedlora::federation::{
    load_dataset, partition_dataset, run_experiment_with, Availability, REGISTRY,
};
use fedlora::{write_report, Error, ErrorKind, ExperimentConfig, Result};

/// Federated LoRA simulator.
///
/// Configuration is a JSON document (see README). Flags override file fields;
/// `--set key.path=value` overrides any field, value parsed as JSON.
/// Exit codes: 0 ok, 1 usage, 2 configuration, 3 data, 4 runtime.
#[derive(Parser)]
#[command(name = "fedlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, report.json (and weights_final.csv for epfl).
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Suppress per-round progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print the partition and per-client class histograms as JSON.
    PartitionInspect {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the strategy registry.
    ListStrategies {
        #[arg(long)]
        json: bool,
    },
    /// Run a grid of configurations, one report directory per cell.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep file: {"base": {...}, "cells": [{"name": ..., "overrides": {...}}]}.
        #[arg(long)]
        sweep: Option<PathBuf>,
        /// Add cells for psi = first-half, second-half, all.
        #[arg(long)]
        psi_halves: bool,
        /// Cartesian grid axis, `key.path=[v1, v2, ...]`. Repeatable.
        #[arg(long, value_name = "KEY=JSON_ARRAY")]
        grid: Vec<String>,
        #[arg(long, short)]
        quiet: bool,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Strategy name (see list-strategies).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Override any field: `key.path=value`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(("seed".to_string(), json!(s)));
        }
        if let Some(d) = &self.out_dir {
            o.push(("out_dir".to_string(), json!(d)));
        }
        if let Some(s) = &self.strategy {
            o.push(("strategy".to_string(), json!({ "name": s })));
        }
        if let Some(r) = self.rounds {
            o.push(("training.rounds".to_string(), json!(r)));
        }
        if let Some(c) = self.clients {
            o.push(("partition.clients".to_string(), json!(c)));
        }
        for s in &self.set {
            o.push(parse_override(s)?);
        }
        Ok(o)
    }

    fn document(&self) -> Result<Value> {
        match &self.config {
            Some(p) => read_json(p),
            None => Ok(json!({})),
        }
    }

    fn load(&self) -> Result<ExperimentConfig> {
        config_from_value(self.document()?, &self.overrides()?)
    }
}

fn run_one(config: &ExperimentConfig, out_dir: &Path, quiet: bool) -> Result<f64> {
    let total = config.training.rounds;
    let report = run_experiment_with(config, |_, m| {
        if !quiet {
            eprintln!("round {}/{}  mean val accuracy {:.4}", m.round, total, m.mean_accuracy);
        }
    })?;
    write_report(&report, out_dir)?;
    if !quiet {
        eprintln!(
            "{}: mean final test accuracy {:.4} -> {}",
            report.strategy,
            report.mean_final_accuracy,
            out_dir.display()
        );
    }
    Ok(report.mean_final_accuracy)
}

fn partition_inspect(config: &ExperimentConfig) -> Result<Value> {
    let dataset = load_dataset(&config.dataset, config.seed)?;
    let partition = partition_dataset(config, &dataset)?;
    let histograms: Vec<Vec<usize>> = partition
        .clients
        .iter()
        .map(|c| dataset.class_histogram(c))
        .collect();
    let entropies: Vec<f64> = histograms.iter().map(|h| entropy(h)).collect();
    Ok(json!({
        "samples": dataset.len(),
        "classes": dataset.classes,
        "partition": partition,
        "histograms": histograms,
        "label_entropy": entropies,
    }))
}

fn list_strategies(as_json: bool) {
    if as_json {
        let rows: Vec<Value> = REGISTRY
            .iter()
            .map(|e| {
                json!({
                    "name": e.name,
                    "implemented": e.availability == Availability::Implemented,
                    "parameters": e.parameters,
                    "summary": e.summary,
                })
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows).unwrap());
        return;
    }
    for e in REGISTRY {
        let params = if e.parameters.is_empty() {
            "-".to_string()
        } else {
            e.parameters.join(", ")
        };
        let status = match e.availability {
            Availability::Implemented => "",
            Availability::ExtensionPoint => " [extension point]",
        };
        println!("{:<14} params: {:<28} {}{}", e.name, params, e.summary, status);
    }
}

struct Cell {
    name: String,
    patch: Value,
}

fn grid_cells(axes: &[String]) -> Result<Vec<Cell>> {
    let mut cells = vec![Cell {
        name: String::new(),
        patch: json!({}),
    }];
    for axis in axes {
        let (key, values) = parse_override(axis)?;
        let values = values
            .as_array()
            .cloned()
            .ok_or_else(|| Error::config(key.clone(), "grid values must be a JSON array"))?;
        let mut next = Vec::new();
        for cell in &cells {
            for v in &values {
                let mut patch = cell.patch.clone();
                fedlora::config::set_path(&mut patch, &key, v.clone())?;
                let label = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let part = format!("{key}={label}");
                next.push(Cell {
                    name: if cell.name.is_empty() { part } else { format!("{}_{part}", cell.name) },
                    patch,
                });
            }
        }
        cells = next;
    }
    Ok(cells)
}

fn safe_dir_name(name: &str) -> Result<String> {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect();
    if cleaned.is_empty() || cleaned == "." || cleaned == ".." {
        return Err(Error::config("cells.name", format!("`{name}` is not a usable directory name")));
    }
    Ok(cleaned)
}

fn sweep(common: &CommonArgs, file: Option<&Path>, psi_halves: bool, grid: &[String], quiet: bool) -> Result<()> {
    let (mut base, mut cells) = match file {
        Some(path) => {
            let doc = read_json(path)?;
            let base = doc.get("base").cloned().unwrap_or_else(|| json!({}));
            let mut cells = Vec::new();
            for (i, c) in doc
                .get("cells")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::config("cells", "sweep file needs a `cells` array"))?
                .iter()
                .enumerate()
            {
                let name = c
                    .get("name")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("cell{i}"));
                cells.push(Cell {
                    name,
                    patch: c.get("overrides").cloned().unwrap_or_else(|| json!({})),
                });
            }
            (base, cells)
        }
        None => (common.document()?, Vec::new()),
    };
    if file.is_some() && common.config.is_some() {
        merge_patch(&mut base, &common.document()?);
    }
    if psi_halves {
        for psi in ["first-half", "second-half", "all"] {
            cells.push(Cell {
                name: format!("psi={psi}"),
                patch: json!({ "model": { "psi": psi } }),
            });
        }
    }
    if !grid.is_empty() {
        let axes = grid_cells(grid)?;
        cells = if cells.is_empty() {
            axes
        } else {
            let mut product = Vec::new();
            for c in &cells {
                for a in &axes {
                    let mut patch = c.patch.clone();
                    merge_patch(&mut patch, &a.patch);
                    product.push(Cell {
                        name: format!("{}_{}", c.name, a.name),
                        patch,
                    });
                }
            }
            product
        };
    }
    if cells.is_empty() {
        return Err(Error::config("cells", "sweep has no cells (use --sweep, --psi-halves or --grid)"));
    }

    let overrides = common.overrides()?;
    let mut configs = Vec::new();
    for cell in &cells {
        let mut doc = base.clone();
        merge_patch(&mut doc, &cell.patch);
        let config = config_from_value(doc, &overrides).map_err(|e| e.context(format!("cell `{}`", cell.name)))?;
        configs.push((safe_dir_name(&cell.name)?, config));
    }
    let mut names: Vec<&str> = configs.iter().map(|(n, _)| n.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("cells.name", "cell names must be unique"));
    }

    let root = configs[0].1.out_dir.clone();
    let mut summary = Vec::new();
    for (name, config) in &configs {
        let dir = root.join(name);
        if !quiet {
            eprintln!("== cell {name}");
        }
        let acc = run_one(config, &dir, quiet).map_err(|e| e.context(format!("cell `{name}`")))?;
        summary.push(json!({
            "name": name,
            "strategy": config.strategy.name,
            "dir": name,
            "mean_final_accuracy": acc,
        }));
    }
    let text = serde_json::to_string_pretty(&summary).unwrap() + "\n";
    std::fs::write(root.join("sweep.json"), text).map_err(|e| Error::io(root.join("sweep.json"), e))?;
    print!("{}", serde_json::to_string_pretty(&summary).unwrap());
    println!();
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { common, quiet } => common.load().and_then(|c| run_one(&c, &c.out_dir, quiet).map(|_| ())),
        Command::PartitionInspect { common } => common.load().and_then(|c| {
            let v = partition_inspect(&c)?;
            println!("{}", serde_json::to_string_pretty(&v).unwrap());
            Ok(())
        }),
        Command::ListStrategies { json } => {
            list_strategies(json);
            Ok(())
        }
        Command::Sweep {
            common,
            sweep: file,
            psi_halves,
            grid,
            quiet,
        } => sweep(&common, file.as_deref(), psi_halves, &grid, quiet),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use semifed_core::data::{self, ClientDataset, Dataset, Example};
use semifed_core::harness::{self, ExperimentConfig, RawConfig};
use semifed_core::Result;

#[derive(Parser)]
#[command(name = "semifed", version, about = "Semi-supervised federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// CIFAR-10 binary batches.
    Cifar10,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an external dataset to SFDS.
    Convert {
        #[arg(long, value_enum, default_value = "cifar10")]
        format: InputFormat,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write one SFDS file per client plus a distribution summary.
    Partition {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config overrides such as --partition.alpha=0.1.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run one experiment.
    Run {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run one experiment per value of a knob and print final accuracies.
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// lambda_u, l2, lr, gamma, u or cap.
        #[arg(long)]
        knob: String,
        /// Values to try; repeat the flag for values that contain commas.
        #[arg(long = "value", required = true)]
        values: Vec<String>,
        /// Seeds shared by every value; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Export per-round server metrics as a tidy CSV.
    Report {
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn load_raw(config: Option<&Path>, overrides: &[String]) -> Result<RawConfig> {
    let mut raw = match config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    raw.apply_overrides(overrides)?;
    Ok(raw)
}

#[derive(Serialize)]
struct ClientSummary {
    client_id: usize,
    file: String,
    labeled: usize,
    unlabeled: usize,
    labeled_per_class: Vec<usize>,
    unlabeled_per_class: Vec<usize>,
}

#[derive(Serialize)]
struct PartitionSummary {
    num_classes: usize,
    clients: Vec<ClientSummary>,
    warnings: Vec<String>,
}

fn client_dataset(c: &ClientDataset, template: &Dataset) -> Dataset {
    let labeled = c.labeled.iter().map(|e| Example {
        id: e.id,
        features: e.features.clone(),
        label: Some(e.label),
    });
    let unlabeled = c.unlabeled.iter().map(|e| Example {
        id: e.id,
        features: e.features.clone(),
        label: None,
    });
    Dataset {
        sample_shape: template.sample_shape.clone(),
        num_classes: template.num_classes,
        examples: labeled.chain(unlabeled).collect(),
    }
}

fn partition(raw: &RawConfig, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::resolve(raw)?;
    let loaded = harness::load_data(&cfg)?;
    if loaded
        .train
        .examples
        .iter()
        .any(|e| e.features.iter().any(|v| !(0.0..=1.0).contains(v)))
    {
        log::warn!("features outside [0, 1] are clamped when written as SFDS pixels");
    }
    let parts = data::partition(&loaded.train, &cfg.partition)?;
    fs::create_dir_all(out_dir)?;
    let c = loaded.train.num_classes;
    let mut clients = Vec::new();
    for client in &parts.clients {
        let file = format!("client_{:03}.sfds", client.client_id);
        data::save_dataset(out_dir.join(&file), &client_dataset(client, &loaded.train))?;
        let mut hidden = vec![0; c];
        for e in &client.unlabeled {
            if let Some(y) = parts.truth.label_of(e.id) {
                hidden[y] += 1;
            }
        }
        clients.push(ClientSummary {
            client_id: client.client_id,
            file,
            labeled: client.labeled.len(),
            unlabeled: client.unlabeled.len(),
            labeled_per_class: client.labeled_class_counts(c),
            unlabeled_per_class: hidden,
        });
    }
    let summary = PartitionSummary {
        num_classes: c,
        clients,
        warnings: parts.warnings,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(std::io::Error::from)?;
    fs::write(out_dir.join("summary.json"), json + "\n")?;
    println!("wrote {} client files to {}", summary.clients.len(), out_dir.display());
    Ok(())
}

fn run(raw: &RawConfig) -> Result<()> {
    let cfg = ExperimentConfig::resolve(raw)?;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), raw.render())?;
    }
    let result = harness::run_experiment(&cfg)?;
    println!("final accuracy {:.4}", result.final_accuracy);
    if let Some(p) = &result.metrics_path {
        println!("metrics written to {}", p.display());
    }
    Ok(())
}

fn report(metrics: &[PathBuf], output: Option<&Path>) -> Result<()> {
    // Several logs are told apart by their directory (or file) name.
    let label = |p: &Path| -> String {
        let named = p.file_name().is_some_and(|n| n == "metrics.jsonl");
        let source = if named {
            p.parent().and_then(Path::file_name)
        } else {
            p.file_stem()
        };
        source.map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    };
    let inputs: Vec<(String, &Path)> = metrics
        .iter()
        .map(|p| {
            let l = if metrics.len() > 1 { label(p) } else { String::new() };
            (l, p.as_path())
        })
        .collect();
    match output {
        Some(path) => {
            let rows = harness::export_plot_data(&inputs, fs::File::create(path)?)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        None => {
            harness::export_plot_data(&inputs, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert {
            format: InputFormat::Cifar10,
            output,
            inputs,
        } => {
            let n = data::convert_cifar10(&inputs, &output)?;
            println!("wrote {n} samples to {}", output.display());
            Ok(())
        }
        Command::Partition {
            config,
            out_dir,
            overrides,
        } => partition(&load_raw(config.as_deref(), &overrides)?, &out_dir),
        Command::Run { config, overrides } => run(&load_raw(config.as_deref(), &overrides)?),
        Command::Sweep {
            config,
            knob,
            values,
            seeds,
            overrides,
        } => {
            let raw = load_raw(config.as_deref(), &overrides)?;
            let table = harness::sweep(&raw, &knob, &values, &seeds)?;
            print!("{table}");
            Ok(())
        }
        Command::Report { output, metrics } => report(&metrics, output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

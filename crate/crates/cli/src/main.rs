mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use kss_core::bench::{apply_perturbations, evaluate, run_suite, Perturbation, SuiteOptions, DEFAULT_NOISE_K};
use kss_core::parallel::with_threads;
use kss_core::simplify::{simplify, SimplifyParams};
use kss_core::{load_cloud, register, register_partial, save_cloud, CloudFormat, Similarity};
use serde_json::{json, Value};

use config::{Config, ConfigArgs, ConfigError};

#[derive(Debug, Parser)]
#[command(
    name = "kss",
    about = "Point cloud registration by rotation search in pre-shape space",
    disable_version_flag = true
)]
struct Cli {
    /// Print the version and the digest of the resolved config
    #[arg(short = 'V', long)]
    version: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Transform report (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Also write the source mapped onto the target
        #[arg(long)]
        aligned: Option<PathBuf>,
        /// The source is an incomplete scan; search candidate centres too
        #[arg(long)]
        partial: bool,
    },
    /// Reduce a cloud to a fixed number of evenly spread points
    Simplify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Points to keep; defaults to the config's `k`
        #[arg(long)]
        count: Option<usize>,
    },
    /// Apply seeded benchmark perturbations to a cloud
    ///
    /// Without --perturbations the flags apply in the order defect, density,
    /// similarity, gaussian noise, nonzero-mean noise.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth: the output points mapped back by the inverse
        /// similarity, index-aligned with --out
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Applied similarity and its inverse (JSON)
        #[arg(long)]
        transform: Option<PathBuf>,
        /// JSON array of perturbations, as in a suite manifest
        #[arg(long, conflicts_with_all = ["similarity", "gaussian", "nonzero_mean", "density", "defect"])]
        perturbations: Option<String>,
        /// Random scale in [0.8, 1.2], rotations over 30 degrees, translation
        #[arg(long)]
        similarity: bool,
        /// Zero-mean noise along normals, range r
        #[arg(long, value_name = "R")]
        gaussian: Option<f64>,
        /// One-sided noise along normals, range r
        #[arg(long, value_name = "R")]
        nonzero_mean: Option<f64>,
        /// Spatially varying dropout, largest drop probability
        #[arg(long, value_name = "P")]
        density: Option<f64>,
        /// Remove this fraction of points beyond a plane
        #[arg(long, value_name = "F")]
        defect: Option<f64>,
    },
    /// Score a registered cloud against index-aligned ground truth
    Evaluate {
        /// Cloud to score
        #[arg(long)]
        registered: PathBuf,
        /// Apply the similarity from this transform report first
        #[arg(long)]
        transform: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every pair of a JSONL manifest and collect a CSV
    Suite {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leave timing columns empty so reruns give identical CSVs
        #[arg(long)]
        no_timings: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Core(kss_core::Error),
    Config(ConfigError),
    Usage(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::Config(e) => e.fmt(f),
            Failure::Usage(m) => f.write_str(m),
        }
    }
}

impl From<kss_core::Error> for Failure {
    fn from(e: kss_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn write_json(path: &Path, value: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    std::fs::write(path, text + "\n").map_err(|e| kss_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn read_json(path: &Path) -> Outcome<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| kss_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| kss_core::Error::Format(format!("{}: {e}", path.display())).into())
}

fn similarity_field(report: &Value, path: &Path) -> Outcome<Similarity> {
    let values: Vec<f64> = report
        .get("similarity")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_f64).collect())
        .unwrap_or_default();
    if values.len() != 16 {
        return Err(kss_core::Error::Format(format!(
            "{}: `similarity` must hold 16 numbers",
            path.display()
        ))
        .into());
    }
    Ok(Similarity::from_matrix(&nalgebra::Matrix4::from_row_slice(&values)))
}

fn config_json(config: &Config) -> Value {
    let fields: serde_json::Map<String, Value> = config::KEYS
        .iter()
        .map(|k| (k.to_string(), Value::String(config.value(k))))
        .collect();
    json!({ "values": fields, "digest": config.digest() })
}

fn perturbation_list(
    perturbations: Option<String>,
    similarity: bool,
    gaussian: Option<f64>,
    nonzero_mean: Option<f64>,
    density: Option<f64>,
    defect: Option<f64>,
) -> Outcome<Vec<Perturbation>> {
    if let Some(text) = perturbations {
        return serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("--perturbations: {e}")));
    }
    let mut list = Vec::new();
    list.extend(defect.map(|fraction| Perturbation::Defect { fraction }));
    list.extend(density.map(|max_drop| Perturbation::Density { max_drop }));
    if similarity {
        list.push(Perturbation::similarity());
    }
    list.extend(gaussian.map(|range| Perturbation::GaussianNoise { range, k: DEFAULT_NOISE_K }));
    list.extend(nonzero_mean.map(|range| Perturbation::NonzeroMeanNoise { range, k: DEFAULT_NOISE_K }));
    Ok(list)
}

fn run(command: Command, config: &Config) -> Outcome {
    let register_config = config.register_config();
    match command {
        Command::Register {
            source,
            target,
            out,
            aligned,
            partial,
        } => {
            let src = load_cloud(&source, CloudFormat::Auto)?;
            let tgt = load_cloud(&target, CloudFormat::Auto)?;
            let result = if partial {
                register_partial(&src, &tgt, &register_config)?
            } else {
                register(&src, &tgt, &register_config)?
            };
            let mut report = result.to_json();
            report["config"] = config_json(config);
            write_json(&out, &report)?;
            if let Some(path) = aligned {
                save_cloud(&src.transformed(&result.similarity), path, CloudFormat::Auto)?;
            }
            log::info!("E_d {:e}, additional process {}", result.energy, result.used_additional_process);
        }
        Command::Simplify { input, out, count } => {
            let cloud = load_cloud(&input, CloudFormat::Auto)?;
            let params = SimplifyParams::new(count.unwrap_or(config.k));
            let simplified = with_threads(register_config.threads, || simplify(&cloud, &params))?;
            save_cloud(&simplified, out, CloudFormat::Auto)?;
        }
        Command::Perturb {
            input,
            out,
            truth,
            transform,
            perturbations,
            similarity,
            gaussian,
            nonzero_mean,
            density,
            defect,
        } => {
            let list = perturbation_list(perturbations, similarity, gaussian, nonzero_mean, density, defect)?;
            let cloud = load_cloud(&input, CloudFormat::Auto)?;
            let pair = apply_perturbations(&cloud, &list, config.seed)?;
            save_cloud(&pair.source, out, CloudFormat::Auto)?;
            if let Some(path) = truth {
                save_cloud(&pair.ground_truth, path, CloudFormat::Auto)?;
            }
            if let Some(path) = transform {
                let report = json!({
                    "seed": config.seed,
                    "perturbations": list,
                    "applied": pair.transform.row_major(),
                    "similarity": pair.transform.inverse().row_major(),
                    "kept": pair.kept,
                });
                write_json(&path, &report)?;
            }
        }
        Command::Evaluate {
            registered,
            transform,
            truth,
            out,
        } => {
            let mut cloud = load_cloud(&registered, CloudFormat::Auto)?;
            if let Some(path) = transform {
                cloud = cloud.transformed(&similarity_field(&read_json(&path)?, &path)?);
            }
            let truth = load_cloud(&truth, CloudFormat::Auto)?;
            let report = serde_json::to_value(evaluate(&cloud, &truth)?).expect("reports serialize");
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize")),
            }
        }
        Command::Suite {
            manifest,
            out,
            no_timings,
        } => {
            let options = SuiteOptions { timings: !no_timings };
            let summary = run_suite(&manifest, &out, &register_config, options)?;
            println!(
                "{} pairs ({} computed, {} already done) -> {}",
                summary.pairs,
                summary.computed,
                summary.skipped,
                summary.csv.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let config = match cli.config.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("kss: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.version {
        println!("kss {} (config sha256 {})", env!("CARGO_PKG_VERSION"), config.digest());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("{}", Cli::command().render_usage());
        eprintln!("kss: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    match run(command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("kss: {m}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("kss: {e}");
            ExitCode::from(1)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptraj::checkpoint::{load_model, save_model};
use adaptraj::data::{
    chronological_split, generate_synthetic_domain, parse_raw_tracks, resample_and_normalize, DomainCorpus,
    DomainProfile, DomainStats, ProfileSet, Split, UnitSpec,
};
use adaptraj::eval::evaluate;
use adaptraj::experiment::{
    gate_ablation, gate_generalization, gate_source_trend, run_generalization_experiment, run_source_count_sweep,
    ExperimentConfig, GateCheck,
};
use adaptraj::model::Method;
use adaptraj::training::run_training;
use adaptraj::{DomainTag, HyperParams};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaptraj", version, about = "Multi-source domain generalization for trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic domain corpus from a profile file.
    Generate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-domain statistics of one or more corpora.
    Stats {
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Resample raw tracks to 0.4 s frames and cut 20-frame scenes.
    Ingest {
        #[arg(long)]
        raw: PathBuf,
        /// `m` or `px:<meters per pixel>`.
        #[arg(long, default_value = "m")]
        units: UnitSpec,
        #[arg(long)]
        out: PathBuf,
        /// Domain id; defaults to the raw file's stem.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Train on source corpora and write the best checkpoint and metrics log.
    Train {
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "adaptraj")]
        method: Method,
    },
    /// Evaluate a checkpoint on a target corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate every scene instead of the chronological test split.
        #[arg(long)]
        all: bool,
    },
    /// Leave-one-domain-out comparison of methods over seeds.
    Experiment {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        target_index: usize,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,adaptraj,w/o-specific,w/o-invariant")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Directory for `report.txt` and `report.ndjson`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit nonzero when a directional check fails.
        #[arg(long)]
        gate: bool,
    },
    /// Target error as a function of the number of source domains.
    Sweep {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        target_index: usize,
        #[arg(long)]
        max_sources: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        gate: bool,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_hyper(path: Option<&Path>) -> Result<HyperParams> {
    match path {
        Some(p) => Ok(HyperParams::from_toml(&read(p)?).with_context(|| format!("config {}", p.display()))?),
        None => Ok(HyperParams::default()),
    }
}

fn write_reports(out: Option<&Path>, text: &str, ndjson: &str) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), text)?;
        std::fs::write(dir.join("report.ndjson"), ndjson)?;
    }
    Ok(())
}

fn report_gates(checks: &[GateCheck]) -> bool {
    for c in checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { profile, seed, out } => {
            let p = DomainProfile::from_toml(&read(&profile)?)?;
            let corpus = generate_synthetic_domain(&p, seed)?;
            corpus.save(&out)?;
            println!("{} scenes of `{}` written to {}", corpus.scenes.len(), corpus.domain_id, out.display());
        }
        Command::Stats { input } => {
            println!("{}", DomainStats::HEADER);
            for dir in input {
                let corpus = DomainCorpus::load(&dir)?;
                println!("{}", corpus.stats()?.table_row(&corpus.domain_id));
            }
        }
        Command::Ingest { raw, units, out, domain } => {
            let domain = domain.unwrap_or_else(|| {
                raw.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "ingested".into())
            });
            let samples = parse_raw_tracks(&read(&raw)?)?;
            let (scenes, report) = resample_and_normalize(&samples, units, &DomainTag::named(domain.clone()))?;
            if scenes.is_empty() {
                bail!("no 20-frame scenes could be cut from {}", raw.display());
            }
            DomainCorpus::new(domain, scenes).save(&out)?;
            println!(
                "{} agents, {} skipped as too short, {} scenes written to {}",
                report.agents,
                report.skipped_short,
                report.scenes,
                out.display()
            );
        }
        Command::Train {
            sources,
            config,
            out,
            method,
        } => {
            let mut hp = load_hyper(config.as_deref())?;
            if method.is_staged() && hp.n_domains != sources.len() {
                log::warn!("n_domains {} replaced by the {} given sources", hp.n_domains, sources.len());
                hp.n_domains = sources.len();
            }
            let corpora = sources
                .iter()
                .map(|d| Ok(chronological_split(DomainCorpus::load(d)?)?))
                .collect::<Result<Vec<_>>>()?;
            let outcome = run_training(method, &corpora, &hp)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.ndjson"), outcome.log_ndjson()?)?;
            std::fs::write(out.join("config.toml"), hp.to_toml())?;
            save_model(&outcome.model, outcome.best_epoch, &out.join("best.json"))?;
            let best = &outcome.log[outcome.best_epoch];
            println!(
                "{method}: best epoch {} (val ADE {:.4}, FDE {:.4}); checkpoint {}",
                outcome.best_epoch,
                best.val_ade,
                best.val_fde,
                out.join("best.json").display()
            );
        }
        Command::Eval {
            ckpt,
            target,
            k,
            seed,
            all,
        } => {
            let model = load_model(&ckpt)?;
            let corpus = DomainCorpus::load(&target)?;
            let report = if all {
                evaluate(&model, &corpus.domain_id, &corpus.scenes, k, seed)?
            } else {
                let split = chronological_split(corpus)?;
                evaluate(&model, &split.domain_id, split.split(Split::Test), k, seed)?
            };
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Experiment {
            profiles,
            target_index,
            methods,
            seeds,
            config,
            k,
            out,
            gate,
        } => {
            let profiles = ProfileSet::from_toml(&read(&profiles)?)?;
            let cfg = ExperimentConfig {
                hp: load_hyper(config.as_deref())?,
                k,
            };
            let table = run_generalization_experiment(&profiles, target_index, &methods, &seeds, &cfg)?;
            let text = table.render();
            print!("{text}");
            write_reports(out.as_deref(), &text, &table.to_ndjson()?)?;
            if gate {
                let checks: Vec<GateCheck> =
                    [gate_generalization(&table), gate_ablation(&table)].into_iter().flatten().collect();
                return Ok(report_gates(&checks));
            }
        }
        Command::Sweep {
            profiles,
            target_index,
            max_sources,
            seeds,
            config,
            k,
            out,
            gate,
        } => {
            let profiles = ProfileSet::from_toml(&read(&profiles)?)?;
            let cfg = ExperimentConfig {
                hp: load_hyper(config.as_deref())?,
                k,
            };
            let table = run_source_count_sweep(&profiles, target_index, max_sources, &seeds, &cfg)?;
            let text = table.render();
            print!("{text}");
            write_reports(out.as_deref(), &text, &table.to_ndjson()?)?;
            if gate {
                let checks: Vec<GateCheck> = gate_source_trend(&table).into_iter().collect();
                return Ok(report_gates(&checks));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Leave-one-domain-out comparisons and source-count sweeps over synthetic
//! domains, with text tables and newline-delimited JSON records.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{chronological_split, generate_synthetic_domain, DomainCorpus, ProfileSet, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::Method;
use crate::training::{run_training, EpochRecord};
use crate::types::HyperParams;

/// Settings shared by every (method, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hp: HyperParams,
    /// Samples per test scene; 1 evaluates the deterministic `z = 0` path.
    pub k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            k: 1,
        }
    }
}

/// Data seed of domain `index` for experiment seed `seed`.
pub fn domain_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generates and chronologically splits every domain for one seed.
pub fn build_corpora(profiles: &ProfileSet, seed: u64) -> Result<Vec<DomainCorpus>> {
    profiles
        .domains
        .iter()
        .enumerate()
        .map(|(i, p)| chronological_split(generate_synthetic_domain(p, domain_seed(seed, i))?))
        .collect()
}

/// Outcome of training one method with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub seed: u64,
    pub sources: Vec<String>,
    pub target: String,
    pub ade: f64,
    pub fde: f64,
    pub n_scenes: usize,
    pub k: usize,
    pub best_epoch: usize,
    #[serde(skip)]
    pub log: Vec<EpochRecord>,
}

/// Mean and spread over seeds. `std` is the sample standard deviation
/// (zero for a single seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub ade: Summary,
    pub fde: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub target: String,
    pub sources: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<MethodRow>,
    pub cells: Vec<CellResult>,
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Target ADE of `method` per seed, in seed order.
    pub fn ade_by_seed(&self, method: Method) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| self.cells.iter().find(|c| c.method == method && c.seed == *s).map(|c| c.ade))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "target: {}", self.target);
        let _ = writeln!(out, "sources: {}", self.sources.join(", "));
        let _ = writeln!(out, "seeds: {}", seeds.join(", "));
        let _ = writeln!(out, "{:<16}{:>20}{:>20}", "method", "ADE", "FDE");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16}{:>20}{:>20}",
                r.method.label(),
                format!("{:.4} ± {:.4}", r.ade.mean, r.ade.std),
                format!("{:.4} ± {:.4}", r.fde.mean, r.fde.std)
            );
        }
        out
    }

    /// One `cell` record per (method, seed) followed by one `summary` record
    /// per method.
    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(&Tagged { record: "cell", body: c })?);
            out.push('\n');
        }
        for r in &self.rows {
            out.push_str(&serde_json::to_string(&Tagged {
                record: "summary",
                body: &SummaryRecord {
                    target: &self.target,
                    sources: &self.sources,
                    n_seeds: self.seeds.len(),
                    row: r,
                },
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    record: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    target: &'a str,
    sources: &'a [String],
    n_seeds: usize,
    #[serde(flatten)]
    row: &'a MethodRow,
}

fn train_and_evaluate(
    method: Method,
    seed: u64,
    sources: &[DomainCorpus],
    target: &DomainCorpus,
    config: &ExperimentConfig,
) -> Result<CellResult> {
    let hp = HyperParams {
        seed,
        n_domains: sources.len(),
        ..config.hp.clone()
    };
    let outcome = run_training(method, sources, &hp)?;
    let report = evaluate(&outcome.model, &target.domain_id, target.split(Split::Test), config.k, seed)?;
    log::info!(
        "{method} seed {seed} sources {} → {}: ADE {:.4} FDE {:.4}",
        sources.len(),
        target.domain_id,
        report.ade,
        report.fde
    );
    Ok(CellResult {
        method,
        seed,
        sources: sources.iter().map(|c| c.domain_id.clone()).collect(),
        target: target.domain_id.clone(),
        ade: report.ade,
        fde: report.fde,
        n_scenes: report.n_scenes,
        k: report.k,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

fn check_request(profiles: &ProfileSet, target_index: usize, methods: &[Method], seeds: &[u64]) -> Result<()> {
    if profiles.domains.len() < 2 {
        return Err(Error::Config("at least two domains are required".into()));
    }
    if target_index >= profiles.domains.len() {
        return Err(Error::Config(format!(
            "target index {target_index} out of range for {} domains",
            profiles.domains.len()
        )));
    }
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("at least one method and one seed are required".into()));
    }
    Ok(())
}

fn summarize(methods: &[Method], cells: &[CellResult]) -> Vec<MethodRow> {
    methods
        .iter()
        .map(|&m| {
            let ade: Vec<f64> = cells.iter().filter(|c| c.method == m).map(|c| c.ade).collect();
            let fde: Vec<f64> = cells.iter().filter(|c| c.method == m).map(|c| c.fde).collect();
            MethodRow {
                method: m,
                ade: Summary::of(&ade),
                fde: Summary::of(&fde),
            }
        })
        .collect()
}

/// Trains every method on all non-target domains and evaluates on the
/// target's test split, once per seed. Cells run in parallel.
pub fn run_generalization_experiment(
    profiles: &ProfileSet,
    target_index: usize,
    methods: &[Method],
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<ComparisonTable> {
    check_request(profiles, target_index, methods, seeds)?;
    let corpora: Vec<Vec<DomainCorpus>> = seeds
        .par_iter()
        .map(|&s| build_corpora(profiles, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |si| (m, si)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(m, si)| {
            let all = &corpora[si];
            let sources: Vec<DomainCorpus> = all
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != target_index)
                .map(|(_, c)| c.clone())
                .collect();
            train_and_evaluate(m, seeds[si], &sources, &all[target_index], config)
        })
        .collect::<Result<_>>()?;
    let sources = profiles
        .domains
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, p)| p.domain_id.clone())
        .collect();
    Ok(ComparisonTable {
        target: profiles.domains[target_index].domain_id.clone(),
        sources,
        seeds: seeds.to_vec(),
        rows: summarize(methods, &cells),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_sources: usize,
    pub sources: Vec<String>,
    pub method: Method,
    pub ade: Summary,
    pub fde: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub target: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
}

impl SweepTable {
    pub fn row(&self, method: Method, n_sources: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.method == method && r.n_sources == n_sources)
    }

    /// Mean target ADE of `method` for `n = 1..=max`.
    pub fn trend(&self, method: Method) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.n_sources, r.ade.mean))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "target: {}", self.target);
        let _ = writeln!(out, "seeds: {}", seeds.join(", "));
        let _ = writeln!(out, "{:<10}{:<16}{:>20}{:>20}  sources", "n", "method", "ADE", "FDE");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10}{:<16}{:>20}{:>20}  {}",
                r.n_sources,
                r.method.label(),
                format!("{:.4} ± {:.4}", r.ade.mean, r.ade.std),
                format!("{:.4} ± {:.4}", r.fde.mean, r.fde.std),
                r.sources.join(",")
            );
        }
        for m in [Method::Vanilla, Method::AdapTraj] {
            let t = self.trend(m);
            if let (Some(first), Some(last)) = (t.first(), t.last()) {
                let dir = if last.1 < first.1 {
                    "improves"
                } else if last.1 > first.1 {
                    "degrades"
                } else {
                    "is flat"
                };
                let _ = writeln!(
                    out,
                    "{}: target ADE {dir} from {} to {} sources ({:.4} → {:.4})",
                    m.label(),
                    first.0,
                    last.0,
                    first.1,
                    last.1
                );
            }
        }
        out
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(&Tagged { record: "cell", body: c })?);
            out.push('\n');
        }
        for r in &self.rows {
            out.push_str(&serde_json::to_string(&Tagged {
                record: "trend",
                body: r,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// For `n = 1..=max_sources`, trains the fused vanilla predictor and the
/// full model on the first `n` non-target domains and evaluates on the target.
pub fn run_source_count_sweep(
    profiles: &ProfileSet,
    target_index: usize,
    max_sources: usize,
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<SweepTable> {
    let methods = [Method::Vanilla, Method::AdapTraj];
    check_request(profiles, target_index, &methods, seeds)?;
    let candidates: Vec<usize> = (0..profiles.domains.len()).filter(|&i| i != target_index).collect();
    if max_sources == 0 || max_sources > candidates.len() {
        return Err(Error::Config(format!(
            "max_sources must lie in 1..={}, got {max_sources}",
            candidates.len()
        )));
    }
    let corpora: Vec<Vec<DomainCorpus>> = seeds
        .par_iter()
        .map(|&s| build_corpora(profiles, s))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for n in 1..=max_sources {
        for m in methods {
            for si in 0..seeds.len() {
                jobs.push((n, m, si));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(n, m, si)| {
            let sources: Vec<DomainCorpus> = candidates[..n].iter().map(|&i| corpora[si][i].clone()).collect();
            train_and_evaluate(m, seeds[si], &sources, &corpora[si][target_index], config)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for n in 1..=max_sources {
        for m in methods {
            let sel: Vec<&CellResult> = cells.iter().filter(|c| c.method == m && c.sources.len() == n).collect();
            let ade: Vec<f64> = sel.iter().map(|c| c.ade).collect();
            let fde: Vec<f64> = sel.iter().map(|c| c.fde).collect();
            rows.push(SweepRow {
                n_sources: n,
                sources: candidates[..n].iter().map(|&i| profiles.domains[i].domain_id.clone()).collect(),
                method: m,
                ade: Summary::of(&ade),
                fde: Summary::of(&fde),
            });
        }
    }
    Ok(SweepTable {
        target: profiles.domains[target_index].domain_id.clone(),
        seeds: seeds.to_vec(),
        rows,
        cells,
    })
}

/// Outcome of one directional check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Full model beats the fused vanilla predictor on mean target ADE and
/// strictly in at least two thirds of the seeds.
pub fn gate_generalization(table: &ComparisonTable) -> Option<GateCheck> {
    let ours = table.ade_by_seed(Method::AdapTraj);
    let base = table.ade_by_seed(Method::Vanilla);
    if ours.is_empty() || ours.len() != base.len() {
        return None;
    }
    let (m_ours, m_base) = (Summary::of(&ours).mean, Summary::of(&base).mean);
    let wins = ours.iter().zip(&base).filter(|(a, b)| a < b).count();
    let passed = m_ours < m_base && 3 * wins >= 2 * ours.len();
    Some(GateCheck {
        name: "generalization".into(),
        passed,
        detail: format!(
            "mean target ADE adaptraj {m_ours:.4} vs vanilla {m_base:.4}; strict wins {wins}/{}",
            ours.len()
        ),
    })
}

/// Full model no worse than each ablation, ties allowed within one pooled
/// standard deviation.
pub fn gate_ablation(table: &ComparisonTable) -> Option<GateCheck> {
    let ours = table.row(Method::AdapTraj)?;
    let mut parts = Vec::new();
    let mut passed = true;
    let mut any = false;
    for m in [Method::WithoutSpecific, Method::WithoutInvariant] {
        let Some(r) = table.row(m) else { continue };
        any = true;
        let pooled = ((ours.ade.std.powi(2) + r.ade.std.powi(2)) / 2.0).sqrt();
        let ok = ours.ade.mean <= r.ade.mean + pooled;
        passed &= ok;
        parts.push(format!(
            "{} {:.4} (adaptraj {:.4}, pooled std {pooled:.4})",
            m.label(),
            r.ade.mean,
            ours.ade.mean
        ));
    }
    any.then(|| GateCheck {
        name: "ablation".into(),
        passed,
        detail: parts.join("; "),
    })
}

/// Full model's mean target ADE with the most sources is no worse than with
/// one source.
pub fn gate_source_trend(table: &SweepTable) -> Option<GateCheck> {
    let t = table.trend(Method::AdapTraj);
    let (first, last) = (t.first()?, t.last()?);
    if first.0 == last.0 {
        return None;
    }
    Some(GateCheck {
        name: "source-count".into(),
        passed: last.1 <= first.1,
        detail: format!(
            "adaptraj target ADE {:.4} with {} source(s) vs {:.4} with {}",
            last.1, last.0, first.1, first.0
        ),
    })
}

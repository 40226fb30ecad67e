//! Seed sweeps comparing corpus-wide topic descriptors (TM) with image-guided
//! descriptors (ITM) across minimum cluster/topic sizes.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{synth_bundle, Bundle, BundleError, SynthSpec};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use crate::topics::TopicScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TM")]
    Tm,
    #[serde(rename = "ITM")]
    Itm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Tm => "TM",
            Method::Itm => "ITM",
        })
    }
}

impl Method {
    /// Config for one run: `size` is t_min for TM and c_min for ITM.
    pub fn configure(self, base: &PipelineConfig, size: usize, seed: u64) -> PipelineConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self {
            Method::Tm => {
                cfg.topics.scope = TopicScope::Global;
                cfg.topics.min_topic_size = size;
            }
            Method::Itm => {
                cfg.topics.scope = TopicScope::PerCluster;
                cfg.cluster.min_cluster_size = size;
            }
        }
        cfg
    }
}

/// Where each run's bundle comes from. A synthetic source draws a fresh
/// bundle per seed.
#[derive(Debug, Clone)]
pub enum BundleSource {
    Fixed(Box<Bundle>),
    Synth(SynthSpec),
}

impl BundleSource {
    fn bundle(&self, seed: u64) -> Result<std::borrow::Cow<'_, Bundle>, BundleError> {
        match self {
            BundleSource::Fixed(b) => Ok(std::borrow::Cow::Borrowed(b.as_ref())),
            BundleSource::Synth(spec) => synth_bundle(spec, seed).map(std::borrow::Cow::Owned),
        }
    }
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("an ablation needs at least two seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("no methods or sizes requested")]
    EmptyGrid,
    #[error("{method} size {size} seed {seed}: {source}")]
    Run {
        method: Method,
        size: usize,
        seed: u64,
        #[source]
        source: PipelineError,
    },
    #[error("seed {seed}: {source}")]
    Bundle {
        seed: u64,
        #[source]
        source: BundleError,
    },
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub f1_public: f64,
    pub f1_private: f64,
    pub u_ba: f64,
    pub u_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub size: usize,
    pub runs: Vec<RunScores>,
    pub f1_public: Stat,
    pub f1_private: Stat,
    pub u_ba: Stat,
    pub u_f1: Stat,
}

impl AblationRow {
    pub fn from_runs(method: Method, size: usize, runs: Vec<RunScores>) -> Self {
        let stat = |f: fn(&RunScores) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        AblationRow {
            method,
            size,
            f1_public: stat(|r| r.f1_public),
            f1_private: stat(|r| r.f1_private),
            u_ba: stat(|r| r.u_ba),
            u_f1: stat(|r| r.u_f1),
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub std_convention: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

const STD_NOTE: &str = "mean (population std) across seeds";

impl AblationReport {
    pub fn row(&self, method: Method, size: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method && r.size == size)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,size,runs,f1_public_mean,f1_public_pop_std,f1_private_mean,f1_private_pop_std,u_ba_mean,u_ba_pop_std,u_f1_mean,u_f1_pop_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.size,
                r.runs.len(),
                r.f1_public.mean,
                r.f1_public.std,
                r.f1_private.mean,
                r.f1_private.std,
                r.u_ba.mean,
                r.u_ba.std,
                r.u_f1.mean,
                r.u_f1.std
            );
        }
        out
    }

    /// Aligned text table, one line per (method, size).
    pub fn to_table(&self) -> String {
        let cell = |s: &Stat| format!("{:.2} ({:.2})", s.mean, s.std);
        let mut out = format!("# {STD_NOTE}, {} seeds\n", self.seeds.len());
        let _ = writeln!(
            out,
            "{:<7} {:>4}  {:<15} {:<15} {:<15} {:<15}",
            "Method", "Size", "F1-Public", "F1-Private", "U-BA", "U-F1"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<7} {:>4}  {:<15} {:<15} {:<15} {:<15}",
                r.method.to_string(),
                r.size,
                cell(&r.f1_public),
                cell(&r.f1_private),
                cell(&r.u_ba),
                cell(&r.u_f1)
            );
        }
        out
    }
}

/// Runs every (method, size, seed) combination in parallel and aggregates per
/// (method, size). Rows follow the order of `methods`, then `sizes`.
pub fn run_ablation(
    source: &BundleSource,
    base: &PipelineConfig,
    methods: &[Method],
    sizes: &[usize],
    seeds: &[u64],
) -> Result<AblationReport, AblationError> {
    if seeds.len() < 2 {
        return Err(AblationError::TooFewSeeds(seeds.len()));
    }
    if methods.is_empty() || sizes.is_empty() {
        return Err(AblationError::EmptyGrid);
    }
    let grid: Vec<(Method, usize, u64)> = methods
        .iter()
        .flat_map(|&m| sizes.iter().flat_map(move |&s| seeds.iter().map(move |&seed| (m, s, seed))))
        .collect();
    let scores: Vec<RunScores> = grid
        .par_iter()
        .map(|&(method, size, seed)| {
            let bundle = source.bundle(seed).map_err(|source| AblationError::Bundle { seed, source })?;
            let cfg = method.configure(base, size, seed);
            let out = run_pipeline(&bundle, &cfg, None).map_err(|source| AblationError::Run {
                method,
                size,
                seed,
                source,
            })?;
            let m = &out.metrics.metrics;
            let f1 = |name: &str| m.class(name).map_or(0.0, |c| c.f1);
            Ok(RunScores {
                f1_public: f1("public"),
                f1_private: f1("private"),
                u_ba: m.u_ba,
                u_f1: m.u_f1,
            })
        })
        .collect::<Result<_, AblationError>>()?;
    let rows = grid
        .chunks(seeds.len())
        .zip(scores.chunks(seeds.len()))
        .map(|(cells, runs)| AblationRow::from_runs(cells[0].0, cells[0].1, runs.to_vec()))
        .collect();
    Ok(AblationReport {
        std_convention: "population".to_string(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let s = mean_std(&[80.0, 82.0, 84.0]);
        assert_eq!(s.mean, 82.0);
        assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[5.0, 5.0]).std, 0.0);
    }

    #[test]
    fn method_configuration() {
        let base = PipelineConfig::default();
        let tm = Method::Tm.configure(&base, 20, 4);
        assert_eq!((tm.topics.scope, tm.topics.min_topic_size, tm.cluster.min_cluster_size), (TopicScope::Global, 20, 30));
        let itm = Method::Itm.configure(&base, 20, 4);
        assert_eq!((itm.topics.scope, itm.cluster.min_cluster_size, itm.seed), (TopicScope::PerCluster, 20, 4));
        assert_eq!(serde_json::to_string(&Method::Itm).unwrap(), "\"ITM\"");
    }
}

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::complexity::{
    interaction_cost, loglog_slope, measure_interaction, mha_greab_crossover, time_adjacency_step,
};
use crate::encoder::{InteractionKind, ModelConfig};
use crate::error::{Error, Result};

/// Benchmark sweep over image sizes and node counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Square image sides.
    pub sizes: Vec<usize>,
    pub nodes: Vec<usize>,
    pub patch: usize,
    pub channels: usize,
    pub repetitions: usize,
    /// Dense attention is only executed up to this many tokens; larger
    /// sizes get closed-form rows only.
    pub max_mha_tokens: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            sizes: vec![16, 32, 64],
            nodes: vec![8, 16, 32, 64],
            patch: 4,
            channels: 32,
            repetitions: 3,
            max_mha_tokens: 4096,
        }
    }
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: SweepSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if s.sizes.is_empty() || s.nodes.is_empty() {
            return Err(Error::Config("sweep needs at least one size and one node count".into()));
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub tokens: u64,
    pub nodes: usize,
    pub greab_state: u64,
    pub greab_state_measured: u64,
    pub greab_flops: u64,
    pub greab_ms: f64,
    pub mha_state: u64,
    pub mha_state_measured: Option<u64>,
    pub mha_flops: u64,
    pub mha_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: SweepSpec,
    pub rows: Vec<BenchRow>,
    /// Seconds per node-mixing product, one entry per swept node count.
    pub adjacency_seconds: Vec<f64>,
    pub adjacency_slope: f64,
    /// Token count from which dense attention costs more than the graph
    /// block, at the sweep's channel width and each node count.
    pub crossover_tokens: Vec<u64>,
}

/// Closed-form and measured interaction costs over the sweep.
pub fn run_bench(spec: &SweepSpec) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for &size in &spec.sizes {
        let base = ModelConfig {
            height: size,
            width: size,
            patch: spec.patch,
            channels: spec.channels,
            layers: 1,
            ..ModelConfig::default()
        };
        let mha_cfg = ModelConfig {
            interaction: InteractionKind::Mha,
            ..base.clone()
        };
        let mha_cost = interaction_cost(&mha_cfg)?;
        let mha_measured = if base.tokens() <= spec.max_mha_tokens {
            Some(measure_interaction(&mha_cfg, spec.repetitions)?)
        } else {
            None
        };
        for &nodes in &spec.nodes {
            let cfg = ModelConfig { nodes, ..base.clone() };
            let cost = interaction_cost(&cfg)?;
            let measured = measure_interaction(&cfg, spec.repetitions)?;
            rows.push(BenchRow {
                size,
                tokens: cfg.tokens() as u64,
                nodes,
                greab_state: cost.state_entries(),
                greab_state_measured: measured.peak_state_entries,
                greab_flops: cost.flops(),
                greab_ms: measured.min_ms,
                mha_state: mha_cost.state_entries(),
                mha_state_measured: mha_measured.as_ref().map(|m| m.peak_state_entries),
                mha_flops: mha_cost.flops(),
                mha_ms: mha_measured.as_ref().map(|m| m.min_ms),
            });
        }
    }
    let adjacency_seconds: Vec<f64> = spec
        .nodes
        .iter()
        .map(|&m| time_adjacency_step(m, spec.channels, spec.repetitions.max(3), Duration::from_millis(20)))
        .collect();
    let xs: Vec<f64> = spec.nodes.iter().map(|&m| m as f64).collect();
    let adjacency_slope = if xs.len() > 1 {
        loglog_slope(&xs, &adjacency_seconds)
    } else {
        f64::NAN
    };
    let crossover_tokens = spec
        .nodes
        .iter()
        .map(|&m| mha_greab_crossover(spec.channels as u64, m as u64, 1))
        .collect();
    Ok(BenchReport {
        spec: spec.clone(),
        rows,
        adjacency_seconds,
        adjacency_slope,
        crossover_tokens,
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        writeln!(
            f,
            "{:>5} {:>6} {:>4} {:>10} {:>10} {:>12} {:>9} {:>12} {:>12} {:>14} {:>9}",
            "size",
            "T",
            "M",
            "greab st",
            "measured",
            "greab MACs",
            "greab ms",
            "mha st",
            "measured",
            "mha MACs",
            "mha ms"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>5} {:>6} {:>4} {:>10} {:>10} {:>12} {:>9.3} {:>12} {:>12} {:>14} {:>9}",
                r.size,
                r.tokens,
                r.nodes,
                r.greab_state,
                r.greab_state_measured,
                r.greab_flops,
                r.greab_ms,
                r.mha_state,
                opt(r.mha_state_measured.map(|v| v.to_string())),
                r.mha_flops,
                opt(r.mha_ms.map(|v| format!("{v:.3}"))),
            )?;
        }
        for (m, s) in self.spec.nodes.iter().zip(&self.adjacency_seconds) {
            writeln!(f, "node mixing M={m:<4} {:.3} us", s * 1e6)?;
        }
        writeln!(f, "node mixing log-log slope in M: {:.3}", self.adjacency_slope)?;
        for (m, t) in self.spec.nodes.iter().zip(&self.crossover_tokens) {
            writeln!(f, "dense attention exceeds graph MACs from T={t} at M={m}")?;
        }
        Ok(())
    }
}

//! Closed-form parameter, multiply-accumulate and interaction-state
//! accounting, plus empirical measurements of the interaction step.
//!
//! All FLOP figures count multiply-accumulates of the mathematical formulas
//! for one forward pass of one encoder layer's interaction block.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, MhaWeights};
use crate::autodiff::Tape;
use crate::encoder::{InteractionKind, ModelConfig};
use crate::error::Result;
use crate::greab::{greab_interaction, GreabWeights};
use crate::kernels::direct_matmul;
use crate::patching::TokenGrid;
use crate::tensor::Tensor;

/// Trainable scalars per submodule, summed over all encoder layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embed: u64,
    pub pos: u64,
    pub norms: u64,
    pub interaction: u64,
    pub mlp: u64,
    pub head: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.embed + self.pos + self.norms + self.interaction + self.mlp + self.head
    }
}

/// Per-layer cost of one interaction block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InteractionCost {
    Greab {
        projection: u64,
        diffusion: u64,
        mapping: u64,
        /// Adjacency entries, `M²`.
        state_entries: u64,
    },
    Mha {
        qkv: u64,
        scores: u64,
        weighted_sum: u64,
        output: u64,
        /// Score-matrix entries, `T²`.
        state_entries: u64,
    },
}

impl InteractionCost {
    pub fn flops(&self) -> u64 {
        match *self {
            InteractionCost::Greab {
                projection,
                diffusion,
                mapping,
                ..
            } => projection + diffusion + mapping,
            InteractionCost::Mha {
                qkv,
                scores,
                weighted_sum,
                output,
                ..
            } => qkv + scores + weighted_sum + output,
        }
    }

    pub fn state_entries(&self) -> u64 {
        match *self {
            InteractionCost::Greab { state_entries, .. } | InteractionCost::Mha { state_entries, .. } => state_entries,
        }
    }
}

/// Interaction-state growth of architectures that are accounted for but not
/// implemented.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticalRow {
    pub architecture: String,
    pub space: String,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    /// `T = N·L²`.
    pub tokens: u64,
    pub params: ParamBreakdown,
    pub param_total: u64,
    pub interaction: InteractionCost,
    /// Interaction cost over all encoder layers.
    pub interaction_flops_total: u64,
    pub analytical: Vec<AnalyticalRow>,
}

/// Exact trainable-scalar counts derived from the weight shapes.
pub fn param_count(config: &ModelConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let c = config.channels as u64;
    let layers = config.layers as u64;
    let t = config.tokens() as u64;
    let per_layer_interaction = match config.interaction {
        InteractionKind::Greab => {
            let m = config.nodes as u64;
            let d = config.head_dim() as u64;
            let depth = config.graph_depth as u64;
            config.heads as u64 * (m * t + depth * (m * m + d * d))
        }
        // H heads of [C', d_h] for Q, K, V sum to 3·C'², plus the output map
        InteractionKind::Mha => 4 * c * c,
    };
    Ok(ParamBreakdown {
        embed: config.in_channels as u64 * c,
        pos: t * c,
        norms: layers * 4 * c,
        interaction: layers * per_layer_interaction,
        mlp: layers * 2 * c * config.mlp_ratio as u64 * c,
        head: c * config.classes as u64,
    })
}

/// Closed-form cost of one interaction block of the configured kind.
pub fn interaction_cost(config: &ModelConfig) -> Result<InteractionCost> {
    config.validate()?;
    let c = config.channels as u64;
    let t = config.tokens() as u64;
    Ok(match config.interaction {
        InteractionKind::Greab => {
            let m = config.nodes as u64;
            let d = config.head_dim() as u64;
            let h = config.heads as u64;
            let depth = config.graph_depth as u64;
            InteractionCost::Greab {
                projection: 2 * m * t * c,
                diffusion: depth * h * (m * m * d + m * d * d),
                mapping: m * t * c,
                state_entries: m * m,
            }
        }
        InteractionKind::Mha => InteractionCost::Mha {
            qkv: 3 * t * c * c,
            scores: t * t * c,
            weighted_sum: t * t * c,
            output: t * c * c,
            state_entries: t * t,
        },
    })
}

/// Symbolic space-complexity rows for architectures that are never run.
pub fn analytical_rows() -> Vec<AnalyticalRow> {
    let row = |architecture: &str, space: &str| AnalyticalRow {
        architecture: architecture.to_string(),
        space: space.to_string(),
        note: "analytical only".to_string(),
    };
    vec![
        row("Spatial Reduction Transformer", "O(H^2 W^2 / r^2), r = reduction rate"),
        row("Sparse Transformer", "O(HW sqrt(HW))"),
        row("Reformer", "O(HW log(HW))"),
        row("Cross-Attention", "O(2 HW)"),
        row("Recurrent Attention", "O(k HW), k = recurrent time"),
        row("Linformer", "O(HW)"),
        row("Performer", "O(HW)"),
        row("LongFormer", "O(HW)"),
        row("Softmax-Free Transformer", "O(HW)"),
    ]
}

pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    let params = param_count(config)?;
    let interaction = interaction_cost(config)?;
    Ok(CostReport {
        config: config.clone(),
        tokens: config.tokens() as u64,
        params,
        param_total: params.total(),
        interaction_flops_total: config.layers as u64 * interaction.flops(),
        interaction,
        analytical: analytical_rows(),
    })
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(f, "tokens T                 {:>14}", self.tokens)?;
        writeln!(f, "params embed             {:>14}", p.embed)?;
        writeln!(f, "params pos               {:>14}", p.pos)?;
        writeln!(f, "params norms             {:>14}", p.norms)?;
        writeln!(f, "params interaction       {:>14}", p.interaction)?;
        writeln!(f, "params mlp               {:>14}", p.mlp)?;
        writeln!(f, "params head              {:>14}", p.head)?;
        writeln!(f, "params total             {:>14}", self.param_total)?;
        match &self.interaction {
            InteractionCost::Greab {
                projection,
                diffusion,
                mapping,
                state_entries,
            } => {
                writeln!(f, "greab projection MACs    {projection:>14}")?;
                writeln!(f, "greab diffusion MACs     {diffusion:>14}")?;
                writeln!(f, "greab mapping MACs       {mapping:>14}")?;
                writeln!(f, "greab state entries      {state_entries:>14}")?;
            }
            InteractionCost::Mha {
                qkv,
                scores,
                weighted_sum,
                output,
                state_entries,
            } => {
                writeln!(f, "mha qkv MACs             {qkv:>14}")?;
                writeln!(f, "mha score MACs           {scores:>14}")?;
                writeln!(f, "mha weighted-sum MACs    {weighted_sum:>14}")?;
                writeln!(f, "mha output MACs          {output:>14}")?;
                writeln!(f, "mha state entries        {state_entries:>14}")?;
            }
        }
        writeln!(f, "interaction MACs, all layers {:>10}", self.interaction_flops_total)?;
        for row in &self.analytical {
            writeln!(f, "{:<28} {:<40} ({})", row.architecture, row.space, row.note)?;
        }
        Ok(())
    }
}

fn greab_flops_at(tokens: u64, channels: u64, nodes: u64, depth: u64) -> u64 {
    3 * nodes * tokens * channels + depth * (nodes * nodes * channels + nodes * channels * channels)
}

fn mha_flops_at(tokens: u64, channels: u64) -> u64 {
    4 * tokens * channels * channels + 2 * tokens * tokens * channels
}

/// Smallest token count at which single-head dense attention costs strictly
/// more multiply-accumulates than a single-head graph block, from the
/// positive root of the quadratic difference.
pub fn mha_greab_crossover(channels: u64, nodes: u64, depth: u64) -> u64 {
    let (c, m, k) = (channels as f64, nodes as f64, depth as f64);
    // 2c·T² + (4c² - 3mc)·T - k(m²c + mc²) > 0
    let a = 2.0 * c;
    let b = 4.0 * c * c - 3.0 * m * c;
    let q = -k * (m * m * c + m * c * c);
    let root = (-b + (b * b - 4.0 * a * q).sqrt()) / (2.0 * a);
    let exceeds = |t: u64| mha_flops_at(t, channels) > greab_flops_at(t, channels, nodes, depth);
    // the root is exact up to rounding; settle the integer boundary
    let mut t = (root.floor().max(0.0) as u64).max(1);
    while t > 1 && exceeds(t - 1) {
        t -= 1;
    }
    while !exceeds(t) {
        t += 1;
    }
    t
}

/// Same crossover by linear scan; the oracle for [`mha_greab_crossover`].
pub fn mha_greab_crossover_scan(channels: u64, nodes: u64, depth: u64, limit: u64) -> Option<u64> {
    (1..=limit).find(|&t| mha_flops_at(t, channels) > greab_flops_at(t, channels, nodes, depth))
}

/// Observed interaction-buffer size and timing of one interaction block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: InteractionKind,
    pub tokens: u64,
    /// Largest buffer marked as interaction state during the forward pass.
    pub peak_state_entries: u64,
    /// Every marked buffer, in tape order.
    pub state_buffers: Vec<u64>,
    /// Fastest of the timed forward passes, in milliseconds.
    pub min_ms: f64,
}

/// Runs the configured interaction block forward on random tokens
/// `repetitions` times and reports the marked state buffers and the fastest
/// wall time.
pub fn measure_interaction(config: &ModelConfig, repetitions: usize) -> Result<Measurement> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shape = [config.patches(), config.positions(), config.channels];
    let x = Tensor::uniform(&shape, 1.0, &mut rng);
    enum Block {
        Greab(Vec<GreabWeights>),
        Mha(MhaWeights),
    }
    let block = match config.interaction {
        InteractionKind::Greab => Block::Greab(
            (0..config.heads)
                .map(|_| {
                    GreabWeights::init(
                        config.nodes,
                        config.patches(),
                        config.positions(),
                        config.head_dim(),
                        config.graph_depth,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?,
        ),
        InteractionKind::Mha => Block::Mha(MhaWeights::init(config.channels, config.heads, &mut rng)?),
    };
    let mut best = Duration::MAX;
    let mut buffers = Vec::new();
    for _ in 0..repetitions.max(1) {
        let mut tape = Tape::new();
        let tokens = tape.constant(x.clone());
        let grid = TokenGrid::new(&tape, tokens, config.height, config.width, config.patch)?;
        let start = Instant::now();
        match &block {
            Block::Greab(heads) => {
                let bound: Vec<_> = heads
                    .iter()
                    .map(|w| w.map("", &mut |_, t| tape.constant(t.clone())))
                    .collect();
                greab_interaction(&mut tape, &grid, &bound)?;
            }
            Block::Mha(w) => {
                let bound = w.map("", &mut |_, t| tape.constant(t.clone()));
                mha_forward(&mut tape, &grid, &bound)?;
            }
        }
        best = best.min(start.elapsed());
        buffers = tape.state_entries().into_iter().map(|n| n as u64).collect();
    }
    Ok(Measurement {
        kind: config.interaction,
        tokens: config.tokens() as u64,
        peak_state_entries: buffers.iter().copied().max().unwrap_or(0),
        state_buffers: buffers,
        min_ms: best.as_secs_f64() * 1e3,
    })
}

/// Fastest time, in seconds, of the node-mixing product `(I - A)·G` (the
/// kernel [`crate::greab::diffuse`] runs) for `M` nodes and `channels` channels. Each sample runs the product enough times
/// to take roughly `target` so that per-call overhead does not dominate.
pub fn time_adjacency_step(nodes: usize, channels: usize, samples: usize, target: Duration) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(nodes as u64);
    let a = Tensor::uniform(&[nodes, nodes], 1.0 / nodes as f64, &mut rng);
    let laplacian = Tensor::eye(nodes)
        .zip_map(&a, |i, a| i - a)
        .expect("square shapes match");
    let g = Tensor::uniform(&[nodes, channels], 1.0, &mut rng);
    let run = |iters: usize| {
        let start = Instant::now();
        for _ in 0..iters {
            std::hint::black_box(direct_matmul(
                nodes,
                nodes,
                channels,
                std::hint::black_box(laplacian.data()),
                g.data(),
            ));
        }
        start.elapsed()
    };
    let mut iters = 1usize;
    while run(iters) < target / 4 && iters < 1 << 24 {
        iters *= 2;
    }
    let best = (0..samples.max(1)).map(|_| run(iters)).min().unwrap_or_default();
    best.as_secs_f64() / iters as f64
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

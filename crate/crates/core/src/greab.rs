//! Graph reasoning block.
//!
//! Tokens are pooled onto `M` latent graph nodes with static learnable
//! projection weights, mixed across nodes by one or more graph convolutions
//! `F = ((I - A) G) W_u`, then scattered back with the transposed projection
//! and added to the input.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::join;
use crate::patching::TokenGrid;
use crate::tensor::Tensor;

/// One graph convolution: adjacency `A` (`M×M`) and state update `W_u`
/// (`C×C`).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayer<P = Tensor> {
    pub adjacency: P,
    pub update: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreabWeights<P = Tensor> {
    /// `[M, N, L²]`; entry `[m, n, :]` is the projection row of patch `n`
    /// onto node `m`.
    pub w_proj: P,
    /// One entry per stacked graph convolution; never empty.
    pub layers: Vec<GraphLayer<P>>,
}

/// Node features, `[M, C]`.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    pub nodes: Var,
}

impl GreabWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        nodes: usize,
        patches: usize,
        positions: usize,
        channels: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if nodes == 0 || depth == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "graph needs positive node count, depth and channels (got M={nodes}, depth={depth}, C={channels})"
            )));
        }
        let w_proj = Tensor::uniform(
            &[nodes, patches, positions],
            1.0 / ((patches * positions) as f64).sqrt(),
            rng,
        );
        let layers = (0..depth)
            .map(|_| GraphLayer {
                adjacency: Tensor::uniform(&[nodes, nodes], 1.0 / nodes as f64, rng),
                update: Tensor::uniform(&[channels, channels], 1.0 / (channels as f64).sqrt(), rng),
            })
            .collect();
        Ok(Self { w_proj, layers })
    }

    pub fn node_count(&self) -> usize {
        self.w_proj.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w_proj.numel()
            + self
                .layers
                .iter()
                .map(|l| l.adjacency.numel() + l.update.numel())
                .sum::<usize>()
    }
}

impl<P> GreabWeights<P> {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> GreabWeights<Q> {
        GreabWeights {
            w_proj: f(&join(prefix, "w_proj"), &self.w_proj),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = join(prefix, &format!("graph{i}"));
                    GraphLayer {
                        adjacency: f(&join(&p, "adjacency"), &l.adjacency),
                        update: f(&join(&p, "update"), &l.update),
                    }
                })
                .collect(),
        }
    }
}

fn projection_rows(tape: &mut Tape, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<(Var, usize)> {
    let s = tape.shape(w.w_proj).to_vec();
    if s.len() != 3 {
        return Err(Error::InvalidTensor(format!("w_proj must be [M, N, L^2], got {s:?}")));
    }
    if s[1] != x.patches() {
        return Err(Error::Extent {
            what: "patch count N",
            expected: x.patches(),
            found: s[1],
        });
    }
    if s[2] != x.positions() {
        return Err(Error::Extent {
            what: "positions per patch L^2",
            expected: x.positions(),
            found: s[2],
        });
    }
    if w.layers.is_empty() {
        return Err(Error::Config("graph depth must be at least 1".into()));
    }
    let m = s[0];
    Ok((tape.reshape(w.w_proj, &[m, x.token_count()])?, m))
}

/// `G_m = Σ_n W_mn X_n`.
pub fn patch_project(tape: &mut Tape, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<GraphState> {
    let (proj, _) = projection_rows(tape, x, w)?;
    let rows = x.as_rows(tape)?;
    // reordering patches must not change G, bit for bit
    let nodes = tape.matmul_order_invariant(proj, rows)?;
    Ok(GraphState { nodes })
}

/// `F = ((I - A) G) W_u`.
pub fn diffuse(tape: &mut Tape, g: GraphState, layer: &GraphLayer<Var>) -> Result<GraphState> {
    let gs = tape.shape(g.nodes).to_vec();
    let a = tape.shape(layer.adjacency).to_vec();
    let u = tape.shape(layer.update).to_vec();
    if a.len() != 2 || a[0] != a[1] {
        return Err(Error::InvalidTensor(format!("adjacency must be square, got {a:?}")));
    }
    if a[0] != gs[0] {
        return Err(Error::Extent {
            what: "node count M",
            expected: gs[0],
            found: a[0],
        });
    }
    if u.len() != 2 || u[0] != u[1] {
        return Err(Error::InvalidTensor(format!("state update must be square, got {u:?}")));
    }
    if u[0] != gs[1] {
        return Err(Error::Extent {
            what: "channel count",
            expected: gs[1],
            found: u[0],
        });
    }
    let identity = tape.constant(Tensor::eye(a[0]));
    let laplacian = tape.sub(identity, layer.adjacency)?;
    tape.mark_state(laplacian);
    // M×M by M×C is tiny; the packed GEMM's fixed setup would dominate it
    let smoothed = tape.matmul_direct(laplacian, g.nodes)?;
    let nodes = tape.matmul(smoothed, layer.update)?;
    Ok(GraphState { nodes })
}

/// Applies every graph layer in order, with nothing in between.
pub fn diffuse_stack(tape: &mut Tape, g: GraphState, w: &GreabWeights<Var>) -> Result<GraphState> {
    if w.layers.is_empty() {
        return Err(Error::Config("graph depth must be at least 1".into()));
    }
    w.layers.iter().try_fold(g, |state, layer| diffuse(tape, state, layer))
}

/// `Σ_m W_mnᵀ F_m`, laid out like `x`, without the residual.
fn scatter(tape: &mut Tape, f: GraphState, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<Var> {
    let (proj, m) = projection_rows(tape, x, w)?;
    let fs = tape.shape(f.nodes).to_vec();
    if fs[0] != m {
        return Err(Error::Extent {
            what: "node count M",
            expected: m,
            found: fs[0],
        });
    }
    let back = tape.transpose(proj)?;
    let mapped = tape.matmul(back, f.nodes)?;
    tape.reshape(mapped, &[x.patches(), x.positions(), fs[1]])
}

/// `O_n = Σ_m W_mnᵀ F_m + X_n`.
pub fn node_map(tape: &mut Tape, f: GraphState, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<TokenGrid> {
    let fc = tape.shape(f.nodes)[1];
    if fc != x.channels {
        return Err(Error::Extent {
            what: "channel count",
            expected: x.channels,
            found: fc,
        });
    }
    let mapped = scatter(tape, f, x, w)?;
    let out = tape.add(mapped, x.tokens)?;
    Ok(x.with_tokens(out))
}

fn interaction(tape: &mut Tape, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<Var> {
    let g = patch_project(tape, x, w)?;
    let f = diffuse_stack(tape, g, w)?;
    scatter(tape, f, x, w)
}

/// Projection, diffusion and node mapping with the residual.
pub fn greab_forward(tape: &mut Tape, x: &TokenGrid, w: &GreabWeights<Var>) -> Result<TokenGrid> {
    let g = patch_project(tape, x, w)?;
    let f = diffuse_stack(tape, g, w)?;
    node_map(tape, f, x, w)
}

/// Residual-free multi-head interaction: channels split into contiguous
/// per-head slices, one block per slice, outputs concatenated.
pub fn greab_interaction(tape: &mut Tape, x: &TokenGrid, heads: &[GreabWeights<Var>]) -> Result<Var> {
    match heads {
        [] => Err(Error::Config("at least one head is required".into())),
        [single] => interaction(tape, x, single),
        _ => {
            let h = heads.len();
            if !x.channels.is_multiple_of(h) {
                return Err(Error::Config(format!(
                    "{} channels cannot be split across {h} heads",
                    x.channels
                )));
            }
            let d = x.channels / h;
            let mut outs = Vec::with_capacity(h);
            for (i, w) in heads.iter().enumerate() {
                let slice = tape.slice_last(x.tokens, i * d, d)?;
                let xs = TokenGrid {
                    tokens: slice,
                    channels: d,
                    ..*x
                };
                outs.push(interaction(tape, &xs, w)?);
            }
            tape.concat_last(&outs)
        }
    }
}

/// [`greab_interaction`] plus a single residual.
pub fn multi_head_greab(tape: &mut Tape, x: &TokenGrid, heads: &[GreabWeights<Var>]) -> Result<TokenGrid> {
    let mixed = greab_interaction(tape, x, heads)?;
    let out = tape.add(mixed, x.tokens)?;
    Ok(x.with_tokens(out))
}

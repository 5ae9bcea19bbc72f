//! Analytic-versus-finite-difference gradient comparison for every weight
//! group of the full model and of standalone graph and attention blocks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, MhaWeights};
use crate::autodiff::{finite_diff_terms, relative_error, Fault, Tape, Var};
use crate::encoder::{targets_in_token_order, GreatModel, ModelConfig};
use crate::error::Result;
use crate::greab::{greab_forward, GreabWeights};
use crate::patching::TokenGrid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Entries compared per group; smaller groups are checked in full.
    pub samples: usize,
    pub tolerance: f64,
    /// Corrupts one backward rule on the analytic side only.
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 24,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.name.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "seed {} eps {:e} tolerance {:e}",
            self.seed, self.eps, self.tolerance
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<5} {:<36} {:>6} entries  max rel err {:.3e}",
                if g.passed { "ok" } else { "FAIL" },
                g.name,
                g.checked,
                g.max_rel_error
            )?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

/// A scalar loss split into the terms it sums.
enum Terms {
    /// Mean cross-entropy of `[T, K]` logits rows against `targets`.
    CrossEntropy { logits: Var, targets: Vec<usize> },
    /// `Σ out ∘ r`.
    Weighted { out: Var, r: Tensor },
}

impl Terms {
    fn loss(&self, tape: &mut Tape) -> Result<Var> {
        match self {
            Terms::CrossEntropy { logits, targets } => tape.cross_entropy(*logits, targets),
            Terms::Weighted { out, r } => {
                let r = tape.constant(r.clone());
                let prod = tape.mul(*out, r)?;
                tape.sum(prod)
            }
        }
    }

    fn values(&self, tape: &Tape) -> Vec<f64> {
        match self {
            Terms::CrossEntropy { logits, targets } => {
                let z = tape.value(*logits);
                let k = z.shape()[1];
                let n = targets.len() as f64;
                z.data()
                    .chunks_exact(k)
                    .zip(targets)
                    .map(|(row, &t)| {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        (lse - row[t]) / n
                    })
                    .collect()
            }
            Terms::Weighted { out, r } => tape
                .value(*out)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .collect(),
        }
    }
}

type Forward<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Terms> + 'a;

/// Scalar loss over named leaves, all of which are checked.
struct Problem<'a> {
    leaves: Vec<(String, Tensor)>,
    forward: Box<Forward<'a>>,
}

fn terms_at(p: &Problem, which: usize, probe: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = p
        .leaves
        .iter()
        .enumerate()
        .map(|(i, (_, t))| tape.constant(if i == which { probe.clone() } else { t.clone() }))
        .collect();
    Ok((p.forward)(&mut tape, &vars)?.values(&tape))
}

fn check(p: &Problem, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GroupCheck>> {
    let mut tape = Tape::new();
    tape.set_fault(opts.fault);
    let vars: Vec<Var> = p.leaves.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = (p.forward)(&mut tape, &vars)?.loss(&mut tape)?;
    tape.backward(loss)?;
    let mut out = Vec::with_capacity(p.leaves.len());
    for (i, (name, value)) in p.leaves.iter().enumerate() {
        let n = value.numel();
        let indices: Vec<usize> = if n <= opts.samples {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(rng, n, opts.samples).into_vec();
            idx.sort_unstable();
            idx
        };
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = finite_diff_terms(|probe| terms_at(p, i, probe), value, opts.eps, &indices)?;
        let max_rel_error = indices
            .iter()
            .zip(&numeric)
            .map(|(&j, &fd)| relative_error(analytic.data()[j], fd))
            .fold(0.0, f64::max);
        out.push(GroupCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error,
            passed: max_rel_error < opts.tolerance,
        });
    }
    Ok(out)
}

fn named<P: Clone>(prefix: &str, w: impl FnOnce(&mut dyn FnMut(&str, &P))) -> Vec<(String, P)> {
    let mut out = Vec::new();
    w(&mut |name, t| out.push((format!("{prefix}{name}"), t.clone())));
    out
}

/// Binds leaves `1..` back into a weight structure of the same shape.
fn rebind<T, W>(template: &T, vars: &[Var], map: impl FnOnce(&T, &mut dyn FnMut(&str, &Tensor) -> Var) -> W) -> W {
    let mut it = vars.iter().copied();
    map(template, &mut |_, _| it.next().expect("one var per leaf"))
}

fn model_problem<'a>(config: &'a ModelConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<Problem<'a>> {
    let cfg = ModelConfig { seed, ..config.clone() };
    let model = GreatModel::init(&cfg)?;
    let image = Tensor::uniform(&[cfg.height, cfg.width, cfg.in_channels], 1.0, rng);
    let mask = Tensor::from_fn(&[cfg.height, cfg.width], |_| rng.random_range(0..cfg.classes) as f64);
    let leaves = named("model.", |f| {
        model.map(&mut |n, t| f(n, t));
    });
    let targets = targets_in_token_order(&mask, cfg.patch)?;
    Ok(Problem {
        leaves,
        forward: Box::new(move |tape, vars| {
            let w = rebind(&model, vars, |m, f| m.map(f));
            Ok(Terms::CrossEntropy {
                logits: w.forward(tape, &cfg, &image)?.token_logits,
                targets: targets.clone(),
            })
        }),
    })
}

fn greab_problem<'a>(config: &'a ModelConfig, rng: &mut ChaCha8Rng) -> Result<Problem<'a>> {
    let shape = [config.patches(), config.positions(), config.channels];
    let x = Tensor::uniform(&shape, 1.0, rng);
    let r = Tensor::uniform(&shape, 1.0, rng);
    let w = GreabWeights::init(
        config.nodes,
        config.patches(),
        config.positions(),
        config.channels,
        config.graph_depth,
        rng,
    )?;
    let mut leaves = vec![("greab.input".to_string(), x)];
    leaves.extend(named("", |f| {
        w.map("greab", &mut |n, t| f(n, t));
    }));
    Ok(Problem {
        leaves,
        // a fixed random weighting makes every output entry matter
        forward: Box::new(move |tape, vars| {
            let grid = TokenGrid::new(tape, vars[0], config.height, config.width, config.patch)?;
            let wv = rebind(&w, &vars[1..], |w, f| w.map("", f));
            let out = greab_forward(tape, &grid, &wv)?;
            Ok(Terms::Weighted {
                out: out.tokens,
                r: r.clone(),
            })
        }),
    })
}

fn mha_problem<'a>(config: &'a ModelConfig, rng: &mut ChaCha8Rng) -> Result<Problem<'a>> {
    let shape = [config.patches(), config.positions(), config.channels];
    let x = Tensor::uniform(&shape, 1.0, rng);
    let r = Tensor::uniform(&shape, 1.0, rng);
    let w = MhaWeights::init(config.channels, config.heads, rng)?;
    let mut leaves = vec![("mha.input".to_string(), x)];
    leaves.extend(named("", |f| {
        w.map("mha", &mut |n, t| f(n, t));
    }));
    Ok(Problem {
        leaves,
        forward: Box::new(move |tape, vars| {
            let grid = TokenGrid::new(tape, vars[0], config.height, config.width, config.patch)?;
            let wv = rebind(&w, &vars[1..], |w, f| w.map("", f));
            let out = mha_forward(tape, &grid, &wv)?;
            Ok(Terms::Weighted {
                out: out.tokens,
                r: r.clone(),
            })
        }),
    })
}

/// Checks the full model (with `seed` replacing the config seed), a
/// standalone graph block and a standalone attention block built from the
/// same geometry.
pub fn run_gradcheck_with(config: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    for problem in [
        model_problem(config, seed, &mut rng)?,
        greab_problem(config, &mut rng)?,
        mha_problem(config, &mut rng)?,
    ] {
        groups.extend(check(&problem, opts, &mut rng)?);
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        seed,
        eps: opts.eps,
        tolerance: opts.tolerance,
        groups,
        passed,
    })
}

pub fn run_gradcheck(config: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    run_gradcheck_with(config, seed, &GradcheckOptions::default())
}

/// The same check at several step sizes.
pub fn eps_sweep(config: &ModelConfig, seed: u64, eps: &[f64]) -> Result<Vec<GradcheckReport>> {
    eps.iter()
        .map(|&e| {
            run_gradcheck_with(
                config,
                seed,
                &GradcheckOptions {
                    eps: e,
                    ..GradcheckOptions::default()
                },
            )
        })
        .collect()
}

/// Geometry the gradient suite is specified on: a 16×16 image, 4×4 patches,
/// 16 channels, 8 nodes, two layers.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        patch: 4,
        channels: 16,
        nodes: 8,
        layers: 2,
        ..ModelConfig::default()
    }
}

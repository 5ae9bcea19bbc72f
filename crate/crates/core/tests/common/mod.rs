//! Fixtures and independent oracles shared by the integration tests.

#![allow(dead_code)]

use great_core::greab::{greab_interaction, GreabWeights};
use great_core::patching::TokenGrid;
use great_core::{GreatModel, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

/// A random token grid plus one graph block's weights.
#[derive(Clone, Debug)]
pub struct Instance {
    pub size: usize,
    pub patch: usize,
    /// `[N, L², C]`
    pub x: Tensor,
    pub weights: GreabWeights,
}

impl Instance {
    pub fn new<R: Rng>(rng: &mut R, size: usize, patch: usize, channels: usize, nodes: usize, depth: usize) -> Self {
        let n = size * size / (patch * patch);
        let x = Tensor::uniform(&[n, patch * patch, channels], 1.0, rng);
        let weights = GreabWeights::init(nodes, n, patch * patch, channels, depth, rng).unwrap();
        Self {
            size,
            patch,
            x,
            weights,
        }
    }

    pub fn bind(&self, tape: &mut Tape, w: &GreabWeights, x: &Tensor) -> (TokenGrid, GreabWeights<Var>) {
        let tokens = tape.leaf(x.clone(), true);
        let grid = TokenGrid::new(tape, tokens, self.size, self.size, self.patch).unwrap();
        (grid, w.map("", &mut |_, t| tape.param(t.clone())))
    }

    pub fn forward_with(
        &self,
        w: &GreabWeights,
        x: &Tensor,
        f: impl Fn(&mut Tape, &TokenGrid, &GreabWeights<Var>) -> Result<TokenGrid>,
    ) -> Tensor {
        let mut tape = Tape::new();
        let (grid, wv) = self.bind(&mut tape, w, x);
        let out = f(&mut tape, &grid, &wv).unwrap();
        tape.value(out.tokens).clone()
    }

    /// Block output without the residual.
    pub fn interaction(&self, w: &GreabWeights, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (grid, wv) = self.bind(&mut tape, w, x);
        let out = greab_interaction(&mut tape, &grid, std::slice::from_ref(&wv)).unwrap();
        tape.value(out).clone()
    }
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let size = [8, 16][rng.random_range(0..2)];
    let patch = [1, 2, 4][rng.random_range(0..3)];
    let channels = rng.random_range(1..7);
    let nodes = rng.random_range(1..17);
    let depth = rng.random_range(1..4);
    Instance::new(rng, size, patch, channels, nodes, depth)
}

/// Shuffles the patches of `x` and the patch axis of the projection with the
/// same permutation; row `n` of the result is row `perm[n]` of the original.
pub fn permute_patches<R: Rng>(inst: &Instance, rng: &mut R) -> (Tensor, GreabWeights, Vec<usize>) {
    let n = inst.x.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let row = inst.x.numel() / n;
    let x: Vec<f64> = perm
        .iter()
        .flat_map(|&p| inst.x.data()[p * row..(p + 1) * row].iter().copied())
        .collect();
    let s = inst.weights.w_proj.shape().to_vec();
    let (m, l2) = (s[0], s[2]);
    let src = inst.weights.w_proj.data();
    let mut proj = Vec::with_capacity(src.len());
    for node in 0..m {
        for &p in &perm {
            let at = (node * n + p) * l2;
            proj.extend_from_slice(&src[at..at + l2]);
        }
    }
    let mut w = inst.weights.clone();
    w.w_proj = Tensor::new(&s, proj).unwrap();
    (Tensor::new(inst.x.shape(), x).unwrap(), w, perm)
}

/// Trainable scalars the model actually puts on a tape.
pub fn registered_scalars(model: &GreatModel) -> u64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut n = 0u64;
    bound.map(&mut |_, v| {
        if tape.requires_grad(*v) {
            n += tape.value(*v).numel() as u64;
        }
    });
    n
}

/// mIoU and pixel accuracy from a full confusion matrix.
pub fn brute_force_metrics(pred: &[Tensor], gt: &[Tensor], classes: usize) -> (f64, f64) {
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.data().iter().zip(g.data()) {
            confusion[b as usize][a as usize] += 1;
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
    let mut ious = Vec::new();
    for k in 0..classes {
        let in_gt: u64 = confusion[k].iter().sum();
        let in_pred: u64 = confusion.iter().map(|row| row[k]).sum();
        let union = in_gt + in_pred - confusion[k][k];
        if union > 0 {
            ious.push(confusion[k][k] as f64 / union as f64);
        }
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    (miou, correct as f64 / total as f64)
}

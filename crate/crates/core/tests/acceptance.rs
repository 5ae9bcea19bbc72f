//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use great_core::complexity::{interaction_cost, measure_interaction, param_count};
use great_core::greab::{greab_forward, node_map, GraphState};
use great_core::harness::gradcheck::{run_gradcheck, small_config};
use great_core::harness::train::window_mean;
use great_core::harness::{
    evaluate, gen_synthetic, load_checkpoint, save_checkpoint, train, MetricsRecord, SyntheticDataset, TrainConfig,
    TrainOutcome,
};
use great_core::{GreatModel, InteractionKind, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_metrics, permute_patches, random_instance, registered_scalars, Instance};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let config = small_config();
    let mut worst = 0.0f64;
    let mut groups = 0;
    for seed in 0..20 {
        let report = run_gradcheck(&config, seed).map_err(|e| e.to_string())?;
        ensure(report.passed, || {
            format!(
                "seed {seed}: groups {:?} exceed {:e}",
                report.failed_groups(),
                report.tolerance
            )
        })?;
        for prefix in ["model.", "greab.", "mha."] {
            ensure(report.groups.iter().any(|g| g.name.starts_with(prefix)), || {
                format!("seed {seed}: no {prefix}* groups were checked")
            })?;
        }
        worst = worst.max(report.max_rel_error());
        groups = report.groups.len();
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 seeds x {groups} groups, worst relative error {worst:.2e}, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    for nodes in [8, 16, 32, 64] {
        for patch in [4, 8, 16] {
            for depth in [1, 2] {
                let inst = Instance::new(&mut rng, 32, patch, 8, nodes, depth);
                let label = format!("M={nodes} L={patch} depth={depth}");

                let mut zero_update = inst.weights.clone();
                zero_update
                    .layers
                    .iter_mut()
                    .for_each(|l| l.update = Tensor::zeros(l.update.shape()));
                let out = inst.forward_with(&zero_update, &inst.x, greab_forward);
                ensure(out.bit_eq(&inst.x), || format!("{label}: W_u = 0 changed the input"))?;

                let mut eye_adjacency = inst.weights.clone();
                eye_adjacency
                    .layers
                    .iter_mut()
                    .for_each(|l| l.adjacency = Tensor::eye(nodes));
                let out = inst.forward_with(&eye_adjacency, &inst.x, greab_forward);
                ensure(out.bit_eq(&inst.x), || format!("{label}: A = I changed the input"))?;

                let mut tape = Tape::new();
                let (grid, w) = inst.bind(&mut tape, &inst.weights, &inst.x);
                let zero = tape.constant(Tensor::zeros(&[nodes, 8]));
                let out = node_map(&mut tape, GraphState { nodes: zero }, &grid, &w).map_err(|e| e.to_string())?;
                ensure(tape.value(out.tokens).bit_eq(&inst.x), || {
                    format!("{label}: node_map with F = 0 is not the residual")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} configurations, three identities each, bit-exact"))
}

fn criterion_linearity_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let inst = random_instance(&mut rng);
        let x2 = Tensor::uniform(inst.x.shape(), 1.0, &mut rng);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed = inst.x.zip_map(&x2, |p, q| a * p + b * q).unwrap();
        let g = |x: &Tensor| inst.interaction(&inst.weights, x);
        let lhs = g(&mixed);
        let rhs = g(&inst.x).zip_map(&g(&x2), |p, q| a * p + b * q).unwrap();
        let err = lhs.max_abs_diff(&rhs);
        ensure(err <= 1e-10, || format!("instance {i}: linearity error {err:e}"))?;
        worst = worst.max(err);

        let (px, pw, perm) = permute_patches(&inst, &mut rng);
        let expected = permute_rows(&g(&inst.x), &perm);
        ensure(inst.interaction(&pw, &px).bit_eq(&expected), || {
            format!("instance {i}: residual-free output not permuted bit-exactly")
        })?;
        let full = inst.forward_with(&inst.weights, &inst.x, greab_forward);
        ensure(
            inst.forward_with(&pw, &px, greab_forward)
                .bit_eq(&permute_rows(&full, &perm)),
            || format!("instance {i}: block output not permuted bit-exactly"),
        )?;
    }
    Ok(format!(
        "50 instances, worst linearity error {worst:.2e}, equivariance bit-exact"
    ))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let row = t.numel() / t.shape()[0];
    let data = perm
        .iter()
        .flat_map(|&p| t.data()[p * row..(p + 1) * row].iter().copied())
        .collect();
    Tensor::new(t.shape(), data).unwrap()
}

fn criterion_complexity() -> Outcome {
    let err = |e: great_core::Error| e.to_string();
    let base = |size: usize, nodes: usize, kind: InteractionKind| ModelConfig {
        height: size,
        width: size,
        patch: 4,
        nodes,
        interaction: kind,
        layers: 1,
        ..ModelConfig::default()
    };
    for nodes in [8, 16, 32] {
        for size in [16, 32, 64] {
            let cfg = base(size, nodes, InteractionKind::Greab);
            let m = measure_interaction(&cfg, 1).map_err(err)?;
            let expect = (nodes * nodes) as u64;
            ensure(m.peak_state_entries == expect, || {
                format!(
                    "M={nodes} at {size}x{size}: measured {} state entries",
                    m.peak_state_entries
                )
            })?;
            ensure(interaction_cost(&cfg).map_err(err)?.state_entries() == expect, || {
                format!("M={nodes} at {size}x{size}: closed form disagrees")
            })?;
        }
    }
    for size in [16, 32, 64] {
        let cfg = base(size, 16, InteractionKind::Mha);
        let t = (size * size) as u64;
        let m = measure_interaction(&cfg, 1).map_err(err)?;
        ensure(m.peak_state_entries == t * t, || {
            format!("dense attention at T={t}: measured {}", m.peak_state_entries)
        })?;
        ensure(interaction_cost(&cfg).map_err(err)?.state_entries() == t * t, || {
            format!("dense attention at T={t}: closed form disagrees")
        })?;
    }
    let mha = interaction_cost(&base(32, 16, InteractionKind::Mha))
        .map_err(err)?
        .state_entries();
    let greab = interaction_cost(&base(32, 16, InteractionKind::Greab))
        .map_err(err)?
        .state_entries();
    ensure(mha == 4096 * greab, || format!("T=1024, M=16 ratio is {mha}/{greab}"))?;

    let mut checked = 0;
    for kind in [InteractionKind::Greab, InteractionKind::Mha] {
        for (nodes, depth, heads, patch) in [(8, 1, 1, 4), (16, 2, 2, 8), (4, 3, 4, 2), (1, 1, 1, 16)] {
            let cfg = ModelConfig {
                nodes,
                graph_depth: depth,
                heads,
                patch,
                interaction: kind,
                ..ModelConfig::default()
            };
            let model = GreatModel::init(&cfg).map_err(err)?;
            let closed = param_count(&cfg).map_err(err)?.total();
            let registered = registered_scalars(&model);
            ensure(closed == registered, || {
                format!("{cfg:?}: param_count {closed} vs {registered} registered scalars")
            })?;
            checked += 1;
        }
    }
    let totals = |f: &dyn Fn(usize) -> ModelConfig, xs: &[usize]| -> Result<Vec<u64>, String> {
        xs.iter()
            .map(|&x| param_count(&f(x)).map(|p| p.total()).map_err(err))
            .collect()
    };
    let by_nodes = totals(
        &|m| ModelConfig {
            nodes: m,
            ..ModelConfig::default()
        },
        &[1, 2, 4, 8, 16, 32, 64],
    )?;
    let by_depth = totals(
        &|d| ModelConfig {
            graph_depth: d,
            ..ModelConfig::default()
        },
        &[1, 2, 3, 4],
    )?;
    for (label, seq) in [("M", &by_nodes), ("depth", &by_depth)] {
        ensure(seq.windows(2).all(|w| w[0] < w[1]), || {
            format!("parameters not strictly increasing in {label}: {seq:?}")
        })?;
    }
    Ok(format!(
        "state M^2 across 16/32/64 px, T^2 for attention, ratio 4096, {checked} count checks, params {by_nodes:?} over M"
    ))
}

fn criterion_metrics() -> Outcome {
    let mask = |v: &[f64]| Tensor::new(&[2, 2], v.to_vec()).unwrap();
    let (miou, acc) =
        evaluate(&[mask(&[0.0, 1.0, 1.0, 1.0])], &[mask(&[0.0, 0.0, 1.0, 1.0])], 2).map_err(|e| e.to_string())?;
    ensure((miou - 7.0 / 12.0).abs() < 1e-15 && acc == 0.75, || {
        format!("worked example gave mIoU {miou}, PixAcc {acc}")
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..50 {
        let classes = rng.random_range(2..7);
        let used = rng.random_range(1..=classes);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let count = rng.random_range(1..4);
        let mut draw = |n: usize| -> Vec<Tensor> {
            (0..n)
                .map(|_| Tensor::from_fn(&[h, w], |_| rng.random_range(0..used) as f64))
                .collect()
        };
        let pred = draw(count);
        let gt = draw(count);
        let got = evaluate(&pred, &gt, classes).map_err(|e| e.to_string())?;
        let want = brute_force_metrics(&pred, &gt, classes);
        ensure(got == want, || {
            format!("pair set {i}: evaluate {got:?}, oracle {want:?}")
        })?;
    }
    Ok("worked example 7/12 and 50 random mask sets match the confusion-matrix oracle".into())
}

struct Trained {
    data: SyntheticDataset,
    config: TrainConfig,
    outcome: TrainOutcome,
}

fn run_training(config: &TrainConfig, data: &SyntheticDataset) -> Result<(TrainOutcome, Duration), String> {
    let start = Instant::now();
    let outcome = train(config, data, &mut |_| Ok(())).map_err(|e| e.to_string())?;
    Ok((outcome, start.elapsed()))
}

fn criterion_learnability(slot: &mut Option<Trained>) -> Outcome {
    let data = gen_synthetic(0, 64, 32, 3).map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    ensure(
        config.steps == 2000 && config.interaction == InteractionKind::Greab,
        || "default config is not a 2000-step graph run".into(),
    )?;
    let (greab, greab_time) = run_training(&config, &data)?;
    let miou = greab.miou.unwrap_or(f64::NAN);
    let window = data.len();
    let first = window_mean(&greab.records, 0, window);
    let last = window_mean(&greab.records, greab.records.len() - window, window);

    let mha_config = TrainConfig {
        interaction: InteractionKind::Mha,
        ..config.clone()
    };
    let (mha, mha_time) = run_training(&mha_config, &data)?;
    let summary = format!(
        "graph mIoU {miou:.3}, loss {first:.3} -> {last:.3} in {:.0} s; attention mIoU {:.3} in {:.0} s",
        greab_time.as_secs_f64(),
        mha.miou.unwrap_or(f64::NAN),
        mha_time.as_secs_f64()
    );
    *slot = Some(Trained {
        data,
        config,
        outcome: greab,
    });
    let greab = &slot.as_ref().unwrap().outcome;
    ensure(miou >= 0.80, || format!("training mIoU {miou} < 0.80; {summary}"))?;
    ensure(last < 0.5 * first, || format!("loss did not halve; {summary}"))?;
    ensure(mha.records.len() == greab.records.len(), || {
        format!("stream lengths {} vs {}", greab.records.len(), mha.records.len())
    })?;
    ensure(
        mha.records.iter().all(|r| r.loss.is_finite()) && mha.miou.is_some() && mha.pixacc.is_some(),
        || format!("attention stream invalid; {summary}"),
    )?;
    ensure(greab_time + mha_time < Duration::from_secs(1800), || {
        format!("too slow; {summary}")
    })?;
    Ok(summary)
}

fn same_stream(a: &[MetricsRecord], b: &[MetricsRecord]) -> bool {
    let bits = |r: &MetricsRecord| {
        (
            r.step,
            r.loss.to_bits(),
            r.miou.map(f64::to_bits),
            r.pixacc.map(f64::to_bits),
        )
    };
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| bits(x) == bits(y) && x.timeless() == y.timeless())
}

fn criterion_determinism(trained: Option<&Trained>) -> Outcome {
    let data = gen_synthetic(7, 8, 16, 3).map_err(|e| e.to_string())?;
    for kind in [InteractionKind::Greab, InteractionKind::Mha] {
        let mut config = TrainConfig::new(
            ModelConfig {
                height: 16,
                width: 16,
                patch: 4,
                interaction: kind,
                seed: 11,
                ..ModelConfig::default()
            },
            1e-2,
            40,
            2,
        );
        let (a, _) = run_training(&config, &data)?;
        let (b, _) = run_training(&config, &data)?;
        ensure(same_stream(&a.records, &b.records), || {
            format!("{kind:?}: streams differ")
        })?;
        config.seed = 12;
        let (c, _) = run_training(&config, &data)?;
        ensure(!same_stream(&a.records, &c.records), || {
            format!("{kind:?}: a different seed reproduced the stream")
        })?;
    }

    let trained = trained.ok_or("no trained model from the learnability run")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.grt");
    save_checkpoint(&path, &trained.config, &trained.outcome.model).map_err(|e| e.to_string())?;
    let (config, model) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(config == trained.config, || {
        "config changed across the round trip".into()
    })?;
    let mc = config.model();
    for (i, image) in trained.data.images.iter().enumerate() {
        let logits = |m: &GreatModel| -> Result<Tensor, String> {
            let mut tape = Tape::new();
            let w = m.bind_frozen(&mut tape);
            Ok(w.forward(&mut tape, &mc, image).map_err(|e| e.to_string())?.logits)
        };
        ensure(logits(&model)?.bit_eq(&logits(&trained.outcome.model)?), || {
            format!("image {i}: reloaded logits differ")
        })?;
    }
    Ok(format!(
        "same-seed streams identical for both interactions; {} reloaded forwards bit-exact",
        trained.data.len()
    ))
}

#[test]
fn acceptance() {
    let mut trained = None;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        // straight to the handle so the line survives output capture
        let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
        results.push((name, outcome));
    };
    run("1 gradient suite", &mut criterion_gradients);
    run("2 identity invariants", &mut criterion_identities);
    run(
        "3 linearity and permutation equivariance",
        &mut criterion_linearity_equivariance,
    );
    run("4 complexity accounting", &mut criterion_complexity);
    run("5 metric oracle", &mut criterion_metrics);
    run("6 learnability", &mut || criterion_learnability(&mut trained));
    run("7 determinism and persistence", &mut || {
        criterion_determinism(trained.as_ref())
    });
    let failed: Vec<_> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

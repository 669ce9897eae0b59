//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use cat_prune_core::clustering::{build_features, kmeans, FeatureMatrix, PositionalEncoding};
use cat_prune_core::config::round_half_up;
use cat_prune_core::denoiser::{sample, Block, LayerCache, RunMode, Sampler};
use cat_prune_core::metrics::{fidelity, row_mse, step_correlation, CostModel};
use cat_prune_core::selector::Selector;
use cat_prune_core::{RunConfig, Strategy as Pruning, TokenGrid, TokenIndexSet};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Bitwise equality of the final latent at alpha = 1 for 5 seeds.
fn degenerate_equivalence() -> Outcome {
    for seed in 0..5 {
        let cfg = RunConfig { alpha: 1.0, ..toy_config(seed) };
        let full = sample(&cfg, RunMode::Full).map_err(fail)?;
        let pruned = sample(&cfg, RunMode::Pruned).map_err(fail)?;
        let same = full
            .final_latent
            .data()
            .iter()
            .zip(pruned.final_latent.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, format!("seed {seed}: final latents differ"))?;
    }
    Ok("5 seeds bitwise identical".into())
}

/// Unselected rows of every cache and of the noise are carried over exactly.
fn exact_reuse() -> Outcome {
    let cfg = RunConfig {
        alpha: 0.3,
        layers: 4,
        ..toy_config(3)
    };
    let n = cfg.image_tokens();
    let w = cfg.model_width;
    let mut sampler = Sampler::new(&cfg, RunMode::Pruned).map_err(fail)?;
    let mut checked = 0;
    let mut min_selected_mse = f64::INFINITY;
    while !sampler.is_done() {
        let before = sampler.model().caches().cloned();
        let rec = sampler.step().map_err(fail)?;
        let Some(sel) = &rec.selection else { continue };
        let before = before.ok_or("transformer has no caches")?;
        let after = sampler.model().caches().ok_or("transformer has no caches")?;
        let unselected = sel.selected.complement(n);
        for (l, (old, new)) in before.layers.iter().zip(&after.layers).enumerate() {
            for t in unselected.iter() {
                let rows = t * w..(t + 1) * w;
                let same = [(&old.keys, &new.keys), (&old.values, &new.values), (&old.output, &new.output)]
                    .iter()
                    .all(|(a, b)| a[rows.clone()].iter().zip(&b[rows.clone()]).all(|(x, y)| x.to_bits() == y.to_bits()));
                check(same, format!("step {} layer {l}: row {t} changed", rec.step))?;
            }
            let mse_u = row_mse(&old.output, &new.output, w, unselected.iter());
            let mse_s = row_mse(&old.output, &new.output, w, sel.selected.iter());
            check(mse_u == 0.0, format!("step {} layer {l}: MSE over T_u = {mse_u}", rec.step))?;
            check(mse_s >= mse_u, format!("step {} layer {l}: MSE over T_s below T_u", rec.step))?;
            min_selected_mse = min_selected_mse.min(mse_s);
        }
        let prev = before.prev_noise.as_ref().ok_or("no previous noise")?;
        for t in unselected.iter() {
            let same = prev.token(t).iter().zip(rec.noise.token(t)).all(|(a, b)| a.to_bits() == b.to_bits());
            check(same, format!("step {}: noise row {t} changed", rec.step))?;
        }
        checked += 1;
    }
    check(checked == cfg.total_steps - cfg.warmup, "missing pruned steps")?;
    Ok(format!("{checked} pruned steps x {} layers, min MSE over T_s {min_selected_mse:.3e}", cfg.layers))
}

/// Every pruned step selects exactly round(alpha h w) image tokens.
fn budget_exactness() -> Outcome {
    let strategy = prop_oneof![
        Just(Pruning::FullCat),
        Just(Pruning::NoiseOnly),
        Just(Pruning::NoiseStaleness),
        Just(Pruning::SequentialRows),
    ];
    let alpha = prop_oneof![Just(0.1), Just(0.3), Just(0.7)];
    let cfg = (2usize..=16, 2usize..=16, 1usize..=4, 4usize..=16, alpha, strategy, any::<u64>()).prop_flat_map(
        |(h, w, half_d, n, alpha, strategy, seed)| {
            (1..n, 1..=(h * w).min(24)).prop_map(move |(t0, k)| RunConfig {
                height: h,
                width: w,
                noise_channels: 2 * half_d,
                total_steps: n,
                warmup: t0,
                alpha,
                cluster_count: k,
                strategy,
                seed,
                ..synthetic_config(seed)
            })
        },
    );
    let mut runner = TestRunner::new(PropConfig {
        cases: 100,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner
        .run(&cfg, |cfg| {
            let trace = sample(&cfg, RunMode::Pruned).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let m = round_half_up(cfg.alpha * cfg.image_tokens() as f64);
            prop_assert_eq!(trace.pruned_steps().count(), cfg.total_steps - cfg.warmup);
            for s in trace.pruned_steps() {
                prop_assert_eq!(s.selection.as_ref().unwrap().selected.len(), m, "step {}", s.step);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("100 random configs".into())
}

/// Analytic MACs ratio and the text-overhead brackets.
fn macs_reproduction() -> Outcome {
    let base = CostModel::from_config(&RunConfig::default());
    let zero = base.macs_total().ratio;
    check((zero - 0.5).abs() <= 1e-9, format!("zero-overhead ratio {zero}"))?;
    let sweep = |steps: usize| -> (f64, f64) {
        (0..=10)
            .map(|i| {
                let m = CostModel { total_steps: steps, ..base };
                m.with_text_overhead(0.10 + 0.005 * i as f64).macs_total().ratio
            })
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
    };
    let (lo28, hi28) = sweep(28);
    let (lo50, hi50) = sweep(50);
    let measured28 = 90.28 / 168.28;
    let measured50 = 136.70 / 300.50;
    check((0.48..=0.58).contains(&lo28) && (0.48..=0.58).contains(&hi28), format!("N=28 sweep [{lo28:.4}, {hi28:.4}]"))?;
    check((0.48..=0.58).contains(&measured28), "N=28 measured ratio outside bracket")?;
    check((0.40..=0.50).contains(&lo50) && (0.40..=0.50).contains(&hi50), format!("N=50 sweep [{lo50:.4}, {hi50:.4}]"))?;
    check((0.40..=0.50).contains(&measured50), "N=50 measured ratio outside bracket")?;
    Ok(format!(
        "zero overhead {zero:.12}; N=28 sweep [{lo28:.4}, {hi28:.4}] vs {measured28:.4}; N=50 sweep [{lo50:.4}, {hi50:.4}] vs {measured50:.4}"
    ))
}

/// Step-to-step Pearson r of relative-noise norms in synthetic-smooth mode.
fn noise_correlation() -> Outcome {
    let mut worst = [1.0f64; 2];
    for seed in 0..5 {
        let cfg = synthetic_config(seed);
        for (i, mode) in [RunMode::Full, RunMode::Pruned].into_iter().enumerate() {
            let trace = sample(&cfg, mode).map_err(fail)?;
            let noises: Vec<TokenGrid> = trace.steps.iter().map(|s| s.noise.clone()).collect();
            let rs = step_correlation(&noises, cfg.warmup).map_err(fail)?;
            check(rs.len() == cfg.total_steps - cfg.warmup - 1, "missing steps")?;
            for c in rs {
                let r = c.r.ok_or(format!("seed {seed} {mode:?} step {}: undefined r", c.step))?;
                check(r >= 0.5, format!("seed {seed} {mode:?} step {}: r = {r:.4}", c.step))?;
                worst[i] = worst[i].min(r);
            }
        }
    }
    Ok(format!("min r full {:.4}, pruned {:.4} over 5 seeds", worst[0], worst[1]))
}

/// Mean final-latent MSE against the full run is non-increasing in alpha.
fn alpha_monotonicity() -> Outcome {
    let alphas = [0.1, 0.2, 0.3, 0.5, 0.8, 1.0];
    let mut mean = [0.0; 6];
    for seed in 0..5 {
        let full = sample(&toy_config(seed), RunMode::Full).map_err(fail)?;
        for (i, &alpha) in alphas.iter().enumerate() {
            let cfg = RunConfig { alpha, ..toy_config(seed) };
            let pruned = sample(&cfg, RunMode::Pruned).map_err(fail)?;
            mean[i] += fidelity(&full.final_latent, &pruned.final_latent).map_err(fail)?.mse / 5.0;
        }
    }
    let mut inversions = 0;
    for i in 1..6 {
        if mean[i] > mean[i - 1] {
            inversions += 1;
            let rel = (mean[i] - mean[i - 1]) / mean[i - 1];
            check(rel <= 0.05, format!("inversion at alpha {} of {:.1}%", alphas[i], rel * 100.0))?;
        }
    }
    let table = alphas
        .iter()
        .zip(mean)
        .map(|(a, m)| format!("{a}:{m:.3e}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(inversions <= 1, format!("{inversions} inversions: {table}"))?;
    Ok(format!("{inversions} inversions; {table}"))
}

fn brute_nearest(f: &FeatureMatrix, centroids: &[f64], k: usize) -> Vec<usize> {
    (0..f.rows)
        .map(|r| {
            let d = |c: usize| -> f64 { f.row(r).iter().zip(&centroids[c * f.dim..(c + 1) * f.dim]).map(|(a, b)| (a - b).powi(2)).sum() };
            (0..k).fold(0, |best, c| if d(c) < d(best) { c } else { best })
        })
        .collect()
}

/// KMeans inertia, positional-encoding closed form and quadrant alignment.
fn clustering_invariants() -> Outcome {
    let mut r = rng(7);
    for case in 0..200 {
        let rows = r.random_range(2..120);
        let dim = r.random_range(1..6);
        let k = r.random_range(1..=rows.min(12));
        let data: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let f = FeatureMatrix::new(rows, dim, data).map_err(fail)?;
        let fit = kmeans(&f, k, &mut rng(case), 50).map_err(fail)?;
        for pair in fit.inertia_history.windows(2) {
            check(pair[1] <= pair[0] * (1.0 + 1e-12), format!("case {case}: inertia rose {} -> {}", pair[0], pair[1]))?;
        }
        if fit.converged {
            check(brute_nearest(&f, &fit.centroids, k) == fit.assignment, format!("case {case}: not a fixed point"))?;
        }
    }

    for h in 1..=64 {
        for w in 1..=64 {
            let pe = PositionalEncoding::new(h, w, 4).map_err(fail)?;
            for i in 0..h {
                for j in 0..w {
                    let want = [i as f64 / h as f64, i as f64 / h as f64, j as f64 / w as f64, j as f64 / w as f64];
                    check(pe.row(i * w + j) == want, format!("encoding mismatch at {h}x{w} ({i},{j})"))?;
                }
            }
        }
    }

    let (h, w) = (16, 16);
    let quadrant = |t: usize| 2 * usize::from(t / w >= h / 2) + usize::from(t % w >= w / 2);
    let level = [0.0, 3.0, 6.0, 9.0];
    let rn = TokenGrid::from_fn(h, w, 4, |t, c| level[quadrant(t)] * (1.0 + 0.1 * c as f64)).map_err(fail)?;
    let pe = PositionalEncoding::new(h, w, 4).map_err(fail)?;
    let features = build_features(&rn, &pe, 1.0).map_err(fail)?;
    let fit = kmeans(&features, 4, &mut rng(1), 50).map_err(fail)?;
    let mut label = [usize::MAX; 4];
    for t in 0..h * w {
        let q = quadrant(t);
        if label[q] == usize::MAX {
            label[q] = fit.assignment[t];
        }
        check(fit.assignment[t] == label[q], format!("token {t} splits quadrant {q}"))?;
    }
    let mut distinct = label.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    check(distinct.len() == 4, "quadrants share a cluster")?;
    Ok("200 KMeans instances, 4096 grid sizes, quadrant clusters".into())
}

/// Selector-only loop: a hot quadrant drifts, every other token stays put.
/// Unselected tokens keep their previous noise.
fn coverage_run(stale_fraction: f64) -> Result<usize, String> {
    let cfg = RunConfig {
        height: 16,
        width: 16,
        alpha: 0.3,
        total_steps: 28,
        warmup: 8,
        stale_fraction,
        ..synthetic_config(0)
    };
    let n = cfg.image_tokens();
    let mut r = rng(21);
    let base = TokenGrid::from_fn(16, 16, cfg.noise_channels, |_, _| { let z: f64 = StandardNormal.sample(&mut r); 0.01 * z })
        .map_err(fail)?;
    let hot = |t: usize| t / 16 < 8 && t % 16 < 8;
    let field = |step: usize| {
        TokenGrid::from_fn(16, 16, cfg.noise_channels, |t, c| {
            base.token(t)[c] + if hot(t) { step as f64 } else { 0.0 }
        })
    };
    let mut history: Vec<TokenGrid> = (1..=cfg.warmup).map(field).collect::<Result<_, _>>().map_err(fail)?;
    let mut selector = Selector::new(&cfg).map_err(fail)?;
    let mut seen = vec![false; n];
    for step in cfg.warmup + 1..=cfg.total_steps {
        let t0 = cfg.warmup;
        let (current, reference) = if step == t0 + 1 {
            (&history[t0 - 1], &history[t0 - 2])
        } else {
            (&history[step - 2], &history[t0 - 1])
        };
        let sel = selector.select(step, current, reference).map_err(fail)?;
        check(sel.selected.len() == cfg.budget(), "budget violated")?;
        let fresh = field(step).map_err(fail)?;
        let prev = history.last().unwrap();
        let next = TokenGrid::from_fn(16, 16, cfg.noise_channels, |t, c| {
            if sel.selected.contains(t) {
                fresh.token(t)[c]
            } else {
                prev.token(t)[c]
            }
        })
        .map_err(fail)?;
        for t in sel.selected.iter() {
            seen[t] = true;
        }
        history.push(next);
    }
    Ok(seen.iter().filter(|s| !**s).count())
}

/// With a stale quota every token is refreshed; without one some starve.
fn staleness_coverage() -> Outcome {
    let with = coverage_run(0.25)?;
    let without = coverage_run(0.0)?;
    check(with == 0, format!("{with} tokens never selected with stale quota"))?;
    check(without > 0, "every token selected without stale quota")?;

    let cfg = RunConfig {
        alpha: 0.3,
        stale_fraction: 0.25,
        ..synthetic_config(0)
    };
    let trace = sample(&cfg, RunMode::Pruned).map_err(fail)?;
    let missed = cat_prune_core::denoiser::never_selected(&trace).len();
    check(missed == 0, format!("{missed} tokens never selected in the sampler run"))?;
    Ok(format!("never selected: {with} with stale quota, {without} without"))
}

/// Pruned layer forward against dense-forward-then-row-overwrite.
fn oracle_equivalence() -> Outcome {
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let heads = r.random_range(1..=4);
        let width = heads * r.random_range(1..=4) * 2;
        let tokens = r.random_range(2..=24);
        let block = Block::random(width, heads, r.random_range(1..=4), &mut r);
        let x0 = random_matrix(tokens, width, &mut r);
        let mut cache = LayerCache::new(tokens, width);
        block.forward_rows(&x0, &(0..tokens).collect::<Vec<_>>(), &mut cache).map_err(fail)?;
        let h_prev = cache.output.clone();

        let m = r.random_range(0..=tokens);
        let sel = TokenIndexSet::from_indices(index::sample(&mut r, tokens, m).into_vec(), tokens).map_err(fail)?;
        let mut x1 = x0.clone();
        let mut mask = vec![false; tokens];
        for t in sel.iter() {
            mask[t] = true;
            for v in &mut x1[t * width..(t + 1) * width] {
                *v += r.random_range(-1.0..1.0);
            }
        }
        block.forward_rows(&x1, sel.as_slice(), &mut cache).map_err(fail)?;
        let want = overwrite_rows(&dense_block(&block, &x1), &h_prev, width, &mask);
        let err = max_abs_diff(&cache.output, &want);
        check(err <= 1e-12, format!("case {case}: max-abs {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("100 layers, worst max-abs {worst:.3e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("1 degenerate equivalence", degenerate_equivalence, Duration::from_secs(10)),
        ("2 exact reuse", exact_reuse, Duration::from_secs(30)),
        ("3 budget exactness", budget_exactness, Duration::from_secs(30)),
        ("4 MACs reproduction", macs_reproduction, Duration::from_secs(1)),
        ("5 noise correlation", noise_correlation, Duration::from_secs(60)),
        ("6 alpha monotonicity", alpha_monotonicity, Duration::from_secs(180)),
        ("7 clustering invariants", clustering_invariants, Duration::from_secs(60)),
        ("8 staleness coverage", staleness_coverage, Duration::from_secs(30)),
        ("9 oracle equivalence", oracle_equivalence, Duration::from_secs(30)),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({elapsed:.2?}) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({elapsed:.2?}) {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

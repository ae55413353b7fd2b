//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! nonzero if any failed.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use pgfedsplit::config::ExperimentConfig;
use pgfedsplit::experiment::{
    ablation_specs, fixed_alpha_sweep, labelwise_comparison, metrics_path, run_comparison, run_strategy,
    SweepCurve,
};
use pgfedsplit::metrics::RoundLog;
use pgfedsplit::personalization::{
    optimize_alpha, sample_global_embeddings, AlphaObjective, MixedDataset, MixedEntry, Origin,
};
use pgfedsplit::prototypes::{
    aggregate_global_prototypes, compute_local_prototypes, estimate_gaussian_stats, ClientUploads,
    GaussianClassStats, LocalClassStats,
};
use pgfedsplit::scheduler::{ApaState, HeadSync};
use pgfedsplit::split::RepresentationLoss;
use pgfedsplit::strategy::StrategySpec;
use pgfedsplit::tensor::{Activation, Linear, Mlp};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, outcome: Outcome) -> Outcome {
    let outcome = outcome?;
    if elapsed > Duration::from_secs(limit_s) {
        return Err(format!("{outcome}; took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()));
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let case = random_grad_case(10_000 + seed);
        let weights = RepresentationLoss { ce_weight: 1.0, lambda: case.lambda };
        worst = worst.max(representation_grad_error(&case, weights));
    }
    check(worst < 1e-4, format!("100 instances, max relative error {worst:.2e} (< 1e-4)"))
}

// ---------------------------------------------------------------- 2

fn oracle_log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Independent evaluation of the mixing objective from raw logits.
struct OracleObjective {
    local: Vec<Vec<f64>>,
    global: Vec<Vec<f64>>,
    labels: Vec<usize>,
    kl: f64,
    penalty: f64,
}

impl OracleObjective {
    fn new(phi_l: &Linear, phi_g: &Linear, mixed: &MixedDataset, delta: u64, beta: f64, t: f64) -> Self {
        let logits = |phi: &Linear, z: &[f64]| -> Vec<f64> {
            let (w, b) = (phi.weight().values(), phi.bias().values());
            (0..phi.out_dim())
                .map(|o| b[o] + (0..z.len()).map(|i| w[o * z.len() + i] * z[i]).sum::<f64>())
                .collect()
        };
        let mut me = Self { local: vec![], global: vec![], labels: vec![], kl: 0.0, penalty: beta * delta as f64 };
        for e in &mixed.entries {
            let l = logits(phi_l, &e.z);
            let g = logits(phi_g, &e.z);
            let lp = oracle_log_softmax(&l.iter().map(|v| v / t).collect::<Vec<_>>());
            let lq = oracle_log_softmax(&g.iter().map(|v| v / t).collect::<Vec<_>>());
            me.kl += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            me.local.push(l);
            me.global.push(g);
            me.labels.push(e.label);
        }
        me.kl /= mixed.len() as f64;
        me
    }

    fn value(&self, a: f64) -> f64 {
        let n = self.labels.len() as f64;
        let ce: f64 = self
            .local
            .iter()
            .zip(&self.global)
            .zip(&self.labels)
            .map(|((l, g), &y)| {
                let m: Vec<f64> = l.iter().zip(g).map(|(x, z)| a * x + (1.0 - a) * z).collect();
                -oracle_log_softmax(&m)[y]
            })
            .sum();
        ce / n + self.penalty * a * a * self.kl
    }
}

fn random_alpha_instance(seed: u64) -> (Linear, Linear, MixedDataset, u64, f64, f64) {
    let mut r = rng(20_000 + seed);
    let d = r.random_range(2..8);
    let c = r.random_range(2..8);
    let gain = r.random_range(0.5..4.0);
    let phi_l = Linear::random(d, c, gain, &mut r);
    let phi_g = Linear::random(d, c, gain, &mut r);
    let n = r.random_range(1..40);
    let entries = (0..n)
        .map(|i| MixedEntry {
            z: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
            label: r.random_range(0..c),
            origin: if i % 3 == 0 { Origin::Synthetic } else { Origin::Local },
        })
        .collect();
    let delta = r.random_range(1..30);
    let beta = [0.0, 0.01, 0.1, 1.0][r.random_range(0..4)];
    let t = [0.5, 1.0, 2.0, 4.0][r.random_range(0..4)];
    (phi_l, phi_g, MixedDataset { entries }, delta, beta, t)
}

fn alpha_oracle() -> Outcome {
    let mut worst_dist: f64 = 0.0;
    let mut worst_value: f64 = 0.0;
    let mut worst_impl: f64 = 0.0;
    for seed in 0..50 {
        let (phi_l, phi_g, mixed, delta, beta, t) = random_alpha_instance(seed);
        let got = optimize_alpha(&phi_l, &phi_g, &mixed, delta, beta, t).map_err(|e| e.to_string())?;
        let oracle = OracleObjective::new(&phi_l, &phi_g, &mixed, delta, beta, t);
        let objective = AlphaObjective::new(&phi_l, &phi_g, &mixed, delta, beta, t).map_err(|e| e.to_string())?;
        let (mut fine, mut fine_v) = (1.0, oracle.value(1.0));
        for k in (0..10_000).rev() {
            let a = k as f64 / 10_000.0;
            let v = oracle.value(a);
            if v < fine_v {
                fine = a;
                fine_v = v;
            }
        }
        worst_dist = worst_dist.max((got - fine).abs());
        worst_impl = worst_impl.max((objective.value(fine) - fine_v).abs());
        // best coarse-grid value the oracle finds in the neighborhood of its own argmin
        let neighborhood = (0..=100)
            .map(|k| k as f64 / 100.0)
            .filter(|a| (a - fine).abs() <= 0.01 + 1e-12)
            .map(|a| oracle.value(a))
            .fold(f64::INFINITY, f64::min);
        worst_value = worst_value.max(objective.value(got) - neighborhood);
    }
    check(
        worst_dist <= 0.01 + 1e-12 && worst_value <= 1e-6 && worst_impl <= 1e-6,
        format!(
            "50 instances, max |alpha - oracle| {worst_dist:.4} (<= 0.01), objective excess {worst_value:.1e}, \
             implementation vs oracle {worst_impl:.1e} (<= 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Six scenarios (head stashed in round 0 or not, times mean alpha below,
/// equal to, or above the previous mean in round 1), three rounds each.
/// Expected rows are `(tau, s, head stashed)` after each round.
fn apa_table() -> std::result::Result<usize, String> {
    type Row = (u32, u32, bool);
    let table: [(bool, f64, [Row; 3]); 6] = [
        (true, 0.4, [(3, 0, true), (4, 1, false), (4, 2, false)]),
        (true, 0.5, [(3, 0, true), (3, 1, false), (3, 2, false)]),
        (true, 0.6, [(3, 0, true), (2, 1, false), (2, 0, true)]),
        (false, 0.4, [(3, 1, false), (3, 2, false), (3, 0, true)]),
        (false, 0.5, [(3, 1, false), (3, 2, false), (3, 0, true)]),
        (false, 0.6, [(3, 1, false), (3, 2, false), (3, 0, true)]),
    ];
    let mut matched = 0;
    for (trigger_first, round1_mean, rows) in table {
        let mut st = ApaState::new(HeadSync::Adaptive, 3, 1, 50).map_err(|e| e.to_string())?;
        st.alpha_prev = 0.5;
        st.s = if trigger_first { 2 } else { 0 };
        let means = [0.5, round1_mean, round1_mean];
        for (round, (&mean, expected)) in means.iter().zip(rows).enumerate() {
            let delivered = st.release_for_broadcast().is_some();
            let outcome = st.end_of_round(delivered, Some(mean));
            if outcome.trigger {
                st.stash(Linear::zeros(1, 1)).map_err(|e| e.to_string())?;
            }
            let got = (st.tau, st.s, st.tmp_head.is_some());
            if got != expected {
                return Err(format!(
                    "case (trigger {trigger_first}, mean {round1_mean}) round {round}: got {got:?}, expected {expected:?}"
                ));
            }
            matched += 1;
        }
    }
    Ok(matched)
}

fn audit_schedule(logs: &[RoundLog], tau_min: u32, tau_max: u32) -> Result<(), String> {
    for w in logs.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.tau.abs_diff(b.tau) > 1 {
            return Err(format!("tau jumped {} -> {} at round {}", a.tau, b.tau, b.round));
        }
        if b.head_delivered != a.head_aggregated {
            return Err(format!("head aggregated before round {} was not delivered exactly then", b.round));
        }
    }
    for l in logs {
        if !(tau_min..=tau_max).contains(&l.tau) {
            return Err(format!("tau {} out of bounds at round {}", l.tau, l.round));
        }
        if l.interval_updated && !l.head_delivered {
            return Err(format!("interval moved without a delivered head at round {}", l.round));
        }
    }
    Ok(())
}

fn apa_state_machine() -> Outcome {
    let rows = apa_table()?;
    let mut cfg = ExperimentConfig::desk();
    cfg.rounds = 40;
    cfg.clients = 6;
    cfg.train.local_epochs = 1;
    cfg.schedule.tau0 = 3;
    cfg.schedule.tau_max = 6;
    let mut events = 0;
    for (spec, participation) in [
        (StrategySpec::pgfedsplit(), 1.0),
        (StrategySpec::pgfedsplit(), 0.5),
        (StrategySpec::by_name("wo_apa").unwrap(), 1.0),
    ] {
        cfg.participation = participation;
        let run = run_strategy(&cfg, &spec, 0).map_err(|e| e.to_string())?;
        audit_schedule(&run.logs, cfg.schedule.tau_min, cfg.schedule.tau_max)?;
        events += run.logs.iter().filter(|l| l.head_delivered).count();
    }
    check(
        rows == 18,
        format!("{rows}/18 table rows matched; 3 runs audited, {events} head deliveries each exactly once"),
    )
}

// ---------------------------------------------------------------- 4

fn gaussian_sampler() -> Outcome {
    let d = 5;
    let mut r = rng(40_000);
    let mut stats = BTreeMap::new();
    for class in [0usize, 1, 3] {
        stats.insert(
            class,
            GaussianClassStats {
                class,
                mu: (0..d).map(|_| r.random_range(-3.0..3.0)).collect(),
                sigma_diag: (0..d).map(|_| r.random_range(0.05..4.0)).collect(),
            },
        );
    }
    let gamma = [0.3, 1.0, 0.7, 0.9];
    let n = 10_000;
    let mut worst_mean_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for (&class, g) in &stats {
        let mut dist = vec![0.0; 4];
        dist[class] = 1.0;
        let mut srng = rng(41_000 + class as u64);
        let draw = sample_global_embeddings(&stats, &dist, &gamma, n, 0.5, &mut srng).map_err(|e| e.to_string())?;
        if draw.samples.len() != n {
            return Err(format!("class {class}: {} draws, wanted {n}", draw.samples.len()));
        }
        for k in 0..d {
            let xs: Vec<f64> = draw.samples.iter().map(|(z, _)| z[k]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let target_var = gamma[class] * gamma[class] * g.sigma_diag[k];
            let se = target_var.sqrt() / (n as f64).sqrt();
            worst_mean_z = worst_mean_z.max((mean - g.mu[k]).abs() / se);
            worst_var = worst_var.max((var / target_var - 1.0).abs());
        }
    }
    // label frequencies; class 2 has mass but no statistics and is redrawn
    let dist = [0.4, 0.25, 0.15, 0.2];
    let mut srng = rng(42_000);
    let draw = sample_global_embeddings(&stats, &dist, &gamma, n, 0.5, &mut srng).map_err(|e| e.to_string())?;
    let reachable: f64 = [0, 1, 3].iter().map(|&c| dist[c]).sum();
    let mut counts = [0usize; 4];
    for (_, l) in &draw.samples {
        counts[*l] += 1;
    }
    let chi2: f64 = [0usize, 1, 3]
        .iter()
        .map(|&c| {
            let e = n as f64 * dist[c] / reachable;
            (counts[c] as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(2.0).map_err(|e| e.to_string())?.cdf(chi2);
    check(
        worst_mean_z < 4.0 && worst_var < 0.10 && p > 0.001 && counts[2] == 0,
        format!(
            "max mean deviation {worst_mean_z:.2} se (< 4), max variance error {:.1}% (< 10%), \
             label chi2 p = {p:.3} (> 0.001)",
            worst_var * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5

fn prototype_oracles() -> Outcome {
    let mut r = rng(50_000);
    let (clients, classes, input, emb) = (5, 6, 4, 3);
    let theta = Mlp::random(&[input, 8, emb], Activation::Relu, &mut r).map_err(|e| e.to_string())?;
    let shards: Vec<_> = (0..clients)
        .map(|_| {
            let n = r.random_range(5..40);
            let mut s = random_samples(&mut r, n, input, classes);
            // knock out a random class so clients differ in coverage
            let drop = r.random_range(0..classes);
            s.retain(|x| x.label != drop);
            s
        })
        .collect();
    let stats: Vec<Vec<LocalClassStats>> = shards
        .iter()
        .map(|s| compute_local_prototypes(&theta, s))
        .collect::<pgfedsplit::Result<_>>()
        .map_err(|e| e.to_string())?;
    let uploads: ClientUploads = stats.iter().enumerate().map(|(i, s)| (i, s.as_slice())).collect();
    let global = aggregate_global_prototypes(&uploads).map_err(|e| e.to_string())?;
    let gauss = estimate_gaussian_stats(&uploads, &global).map_err(|e| e.to_string())?;

    // brute force from raw embeddings
    let embed: Vec<Vec<(Vec<f64>, usize)>> = shards
        .iter()
        .map(|s| s.iter().map(|x| (theta.predict(&x.features).unwrap(), x.label)).collect())
        .collect();
    let mut err_local: f64 = 0.0;
    let mut err_global: f64 = 0.0;
    let mut err_var: f64 = 0.0;
    for (ci, client) in embed.iter().enumerate() {
        for st in &stats[ci] {
            let zs: Vec<&Vec<f64>> = client.iter().filter(|(_, l)| *l == st.class).map(|(z, _)| z).collect();
            for k in 0..emb {
                let m = zs.iter().map(|z| z[k]).sum::<f64>() / zs.len() as f64;
                err_local = err_local.max((st.prototype()[k] - m).abs());
            }
        }
    }
    for gp in &global {
        let mut protos = vec![];
        let mut all = vec![];
        for client in &embed {
            let zs: Vec<&Vec<f64>> = client.iter().filter(|(_, l)| *l == gp.class).map(|(z, _)| z).collect();
            if !zs.is_empty() {
                protos.push((0..emb).map(|k| zs.iter().map(|z| z[k]).sum::<f64>() / zs.len() as f64).collect::<Vec<_>>());
                all.extend(zs);
            }
        }
        if protos.len() != gp.contributing_clients {
            return Err(format!("class {} contributor count mismatch", gp.class));
        }
        let g = gauss.iter().find(|g| g.class == gp.class).ok_or("missing Gaussian stats")?;
        for k in 0..emb {
            let p = protos.iter().map(|v| v[k]).sum::<f64>() / protos.len() as f64;
            err_global = err_global.max((gp.prototype[k] - p).abs()).max((g.mu[k] - p).abs());
            let m = all.iter().map(|z| z[k]).sum::<f64>() / all.len() as f64;
            let v = all.iter().map(|z| (z[k] - m).powi(2)).sum::<f64>() / all.len() as f64;
            err_var = err_var.max((g.sigma_diag[k] - v).abs());
        }
    }
    // one client holding everything must pool to the same variances
    let merged: Vec<_> = shards.concat();
    let merged_stats = compute_local_prototypes(&theta, &merged).map_err(|e| e.to_string())?;
    let merged_uploads: ClientUploads = [(0usize, merged_stats.as_slice())].into_iter().collect();
    let merged_global = aggregate_global_prototypes(&merged_uploads).map_err(|e| e.to_string())?;
    let merged_gauss = estimate_gaussian_stats(&merged_uploads, &merged_global).map_err(|e| e.to_string())?;
    let mut err_split: f64 = 0.0;
    for (a, b) in gauss.iter().zip(&merged_gauss) {
        if a.class != b.class {
            return Err("split and merged class sets differ".into());
        }
        for (x, y) in a.sigma_diag.iter().zip(&b.sigma_diag) {
            err_split = err_split.max((x - y).abs());
        }
    }
    check(
        err_local <= 1e-10 && err_global <= 1e-10 && err_var <= 1e-10 && err_split <= 1e-9,
        format!(
            "local {err_local:.1e}, global {err_global:.1e}, pooled variance {err_var:.1e} (<= 1e-10); \
             split vs merged {err_split:.1e} (<= 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- 6-9

fn desk(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.seeds = vec![0, 1, 2];
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn finals(curves: &[SweepCurve], alpha: f64) -> Vec<f64> {
    curves
        .iter()
        .filter(|c| c.alpha == alpha)
        .map(|c| c.logs.last().unwrap().mean_accuracy)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Seed noise of a difference between two configurations: the pooled
/// sample standard deviation of their per-seed final accuracies.
fn seed_noise(a: &[f64], b: &[f64]) -> f64 {
    ((sample_var(a) + sample_var(b)) / 2.0).sqrt()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn overwrite_effect() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let curves = fixed_alpha_sweep(&desk(dir.path()), &[0.0, 1.0], HeadSync::EveryRound).map_err(|e| e.to_string())?;
    let (zero, one) = (finals(&curves, 0.0), finals(&curves, 1.0));
    let noise = seed_noise(&zero, &one);
    let margin = mean(&one) - mean(&zero);
    check(
        margin > 2.0 * noise,
        format!(
            "alpha=1 [{}] vs alpha=0 [{}]: margin {margin:.4} > 2 x seed noise {noise:.4}",
            fmt(&one),
            fmt(&zero)
        ),
    )
}

fn moderate_alpha() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let alphas = [0.0, 0.25, 0.5, 0.75];
    let curves =
        fixed_alpha_sweep(&desk(dir.path()), &alphas, HeadSync::FixedInterval(20)).map_err(|e| e.to_string())?;
    let zero = mean(&finals(&curves, 0.0));
    let (best_alpha, best) = alphas[1..]
        .iter()
        .map(|&a| (a, mean(&finals(&curves, a))))
        .fold((0.0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let (mut events, mut drops) = (0, 0);
    for c in curves.iter().filter(|c| c.alpha == 0.0) {
        for w in c.logs.windows(2) {
            if w[1].head_aggregated {
                events += 1;
                if w[1].mean_accuracy < w[0].mean_accuracy {
                    drops += 1;
                }
            }
        }
    }
    check(
        best >= zero && events > 0 && 2 * drops >= events,
        format!(
            "best moderate alpha {best_alpha} at {best:.4} >= alpha=0 at {zero:.4}; \
             alpha=0 drops at {drops}/{events} aggregation events"
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (_, runs) = run_comparison(&desk(dir.path()), &ablation_specs()).map_err(|e| e.to_string())?;
    let by = |name: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| r.strategy == name)
            .map(|r| r.logs.last().unwrap().mean_accuracy)
            .collect()
    };
    let (pg, apa, gau, both) = (by("pgfedsplit"), by("wo_apa"), by("wo_gau"), by("wo_apa_gau"));
    let noise = seed_noise(&pg, &both);
    let gap = mean(&pg) - mean(&both);
    check(
        mean(&pg) >= mean(&apa) && mean(&pg) >= mean(&gau) && gap > 0.0 && gap > noise,
        format!(
            "pgfedsplit {:.4} [{}], wo_apa {:.4} [{}], wo_gau {:.4} [{}], wo_apa_gau {:.4} [{}]; \
             last gap {gap:.4} vs seed noise {noise:.4}",
            mean(&pg),
            fmt(&pg),
            mean(&apa),
            fmt(&apa),
            mean(&gau),
            fmt(&gau),
            mean(&both),
            fmt(&both)
        ),
    )
}

fn labelwise_generalization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = desk(dir.path());
    let (mut with, mut without, mut pairs) = (vec![], vec![], 0);
    for &seed in &cfg.seeds {
        let rows = labelwise_comparison(&cfg, seed, 200).map_err(|e| e.to_string())?;
        let (mut a, mut b, mut n) = (0.0, 0.0, 0);
        for c in rows.iter().filter(|c| !c.missing.is_empty()) {
            for &l in &c.missing {
                a += c.with_head_sync[l].ok_or("no test samples for a missing label")?;
                b += c.without_head_sync[l].ok_or("no test samples for a missing label")?;
                n += 1;
            }
        }
        if n == 0 {
            return Err(format!("seed {seed}: no client misses a class"));
        }
        pairs += n;
        with.push(a / n as f64);
        without.push(b / n as f64);
    }
    let (a, b) = (mean(&with), mean(&without));
    check(
        a > b,
        format!("missing-class accuracy with head sync {a:.4} vs never {b:.4} ({pairs} client-label pairs over 3 seeds)"),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let mut bytes = vec![];
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::desk();
        cfg.seeds = vec![0];
        cfg.output_dir = dir.path().to_path_buf();
        let spec = StrategySpec::pgfedsplit();
        run_comparison(&cfg, std::slice::from_ref(&spec)).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(metrics_path(dir.path(), &spec.name, 0)).map_err(|e| e.to_string())?);
    }
    check(
        bytes[0] == bytes[1] && !bytes[0].is_empty(),
        format!("two runs wrote {} and {} identical JSONL bytes", bytes[0].len(), bytes[1].len()),
    )
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("gradient correctness", 30, gradient_correctness),
        ("alpha optimizer oracle", 60, alpha_oracle),
        ("APA state machine", 10, apa_state_machine),
        ("Gaussian sampler statistics", 30, gaussian_sampler),
        ("prototype aggregation oracles", 10, prototype_oracles),
        ("every-round overwrite at alpha=0", 600, overwrite_effect),
        ("moderate alpha at tau=20", 600, moderate_alpha),
        ("ablation ordering", 1200, ablation_ordering),
        ("missing-label generalization", 600, labelwise_generalization),
        ("byte-identical reruns", 120, determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {:>2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| p.parse() == Ok(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = within(elapsed, *limit, outcome);
        match outcome {
            Ok(d) => println!("{id} PASS  {name}: {d} [{:.1}s]", elapsed.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("{id} FAIL  {name}: {d} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

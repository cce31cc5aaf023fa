//! Acceptance criteria, one check per criterion. Runs as a plain binary
//! (`harness = false`) so every criterion prints a PASS/FAIL line; the
//! process exits non-zero if any criterion fails.
//!
//!     cargo test -p rankfuse --test acceptance

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rankfuse::data::{CountyObservation, Direction, Group, GroupMap, OutcomeSpec, PanelDataset};
use rankfuse::descriptives::{correlation_matrix, standardized_differences, CorrelationMethod};
use rankfuse::harness::{
    run_robustness, summarize_replicates, RobustnessConfig, RobustnessRun, StateCounts,
};
use rankfuse::oracles::{
    brute_force_midranks, calibration_run, ks_distance_uniform, permutation_test, simulate_panel,
    SimScenario,
};
use rankfuse::preprocess::{
    align_outcomes, apply_subsample, impute_state_median, plan_subsample, AlignedMatrix,
};
use rankfuse::rank::{midranks, rank_table, test_matrix, Sidedness};
use rankfuse::seed;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn calibration_scenario(shift: f64, seed: u64) -> SimScenario {
    SimScenario::uniform_shift(20, 20, 50, 5, 0.3, 0.4, shift, seed).unwrap()
}

/// Pearson correlation of mid-ranks (Spearman's rho).
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (midranks(x).unwrap(), midranks(y).unwrap());
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn matrix_to_panel(m: &AlignedMatrix) -> PanelDataset {
    PanelDataset::new(
        m.outcomes().to_vec(),
        m.rows()
            .iter()
            .map(|r| CountyObservation {
                county_id: r.county_id.clone(),
                state_id: r.state_id.clone(),
                values: r.values.iter().map(|v| Some(*v)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

// 1
fn midrank_oracle() -> Check {
    let mut rng = seed::rng(101);
    let mut tied_vectors = 0;
    for trial in 0..10_000 {
        let n = rng.random_range(1..=200);
        // rounding to a coarse grid makes ties common
        let grid = [1.0, 0.5, 0.1][trial % 3];
        let values: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(-5.0..5.0f64) / grid).round() * grid)
            .collect();
        let fast = midranks(&values).map_err(|e| e.to_string())?;
        let slow = brute_force_midranks(&values);
        ensure(fast == slow, || format!("trial {trial}: mismatch on {values:?}"))?;
        let sum: f64 = fast.iter().sum();
        let nn = n as f64;
        ensure(sum == nn * (nn + 1.0) / 2.0, || format!("trial {trial}: rank sum {sum}"))?;
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            tied_vectors += 1;
        }
    }
    Ok(format!("10000 vectors equal to oracle, {tied_vectors} with ties"))
}

/// States come in mirrored pairs holding the same county vectors in a
/// different row order; one member of each pair is in each group.
fn mirrored_panel(rng: &mut impl Rng, pairs: usize, k: usize) -> (PanelDataset, GroupMap) {
    let outcomes: Vec<OutcomeSpec> = (0..k)
        .map(|j| {
            let dir = if j % 2 == 0 { Direction::HigherIsWorse } else { Direction::HigherIsBetter };
            OutcomeSpec::new(format!("y{j}"), dir)
        })
        .collect();
    let mut obs = Vec::new();
    let mut groups = GroupMap::default();
    for p in 0..pairs {
        let n = rng.random_range(2..12);
        // separated offsets keep the pair aggregates distinct, so the
        // variance is never degenerate
        let offset = 3.0 * p as f64;
        let vectors: Vec<Vec<Option<f64>>> = (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        // raw sign follows the outcome direction so burdens
                        // line up after alignment
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        if i == 0 && rng.random_bool(0.3) {
                            None
                        } else {
                            Some(sign * ((offset + rng.random_range(-1.0..1.0f64)) * 4.0).round() / 4.0)
                        }
                    })
                    .collect()
            })
            .collect();
        for (g, tag) in [(Group::Treatment, "a"), (Group::Comparison, "b")] {
            let state = format!("P{p:02}{tag}");
            groups.assignment.insert(state.clone(), g);
            let mut order: Vec<usize> = (0..n).collect();
            if g == Group::Comparison {
                order.reverse();
            }
            for i in order {
                obs.push(CountyObservation {
                    county_id: format!("{state}-{i}"),
                    state_id: state.clone(),
                    values: vectors[i].clone(),
                });
            }
        }
    }
    (PanelDataset::new(outcomes, obs).unwrap(), groups)
}

// 2
fn symmetry_null() -> Check {
    let mut rng = seed::rng(202);
    for trial in 0..50 {
        let (pairs, k) = (rng.random_range(2..8), rng.random_range(1..6));
        let (panel, groups) = mirrored_panel(&mut rng, pairs, k);
        let matrix = impute_state_median(&align_outcomes(&panel)).map_err(|e| e.to_string())?;
        let (res, _) = test_matrix(&matrix, &groups, Sidedness::TwoSided).map_err(|e| e.to_string())?;
        ensure(res.t == 0.0, || format!("trial {trial}: T = {}", res.t))?;
        ensure(res.p_two_sided == 1.0, || format!("trial {trial}: p = {}", res.p_two_sided))?;
        ensure(res.rbar_treat == res.rbar_ctrl, || format!("trial {trial}: means differ"))?;
    }
    Ok("50 mirrored panels: T = 0, p_two_sided = 1".into())
}

// 3
fn normal_calibration() -> Check {
    let rep = single_threaded(|| calibration_run(&calibration_scenario(0.0, 303), 2000, &[0.05, 0.10]))
        .map_err(|e| e.to_string())?;
    let r05 = rep.rate(0.05).unwrap();
    let r10 = rep.rate(0.10).unwrap();
    let ks = ks_distance_uniform(&rep.p_values);
    let msg = format!(
        "valid {}/{}, rate@0.05 = {r05:.4}, rate@0.10 = {r10:.4}, KS = {ks:.4}, mean T = {:.3}, sd T = {:.3}",
        rep.n_valid,
        rep.replicates,
        rep.mean_t.unwrap_or(f64::NAN),
        rep.sd_t.unwrap_or(f64::NAN)
    );
    ensure(rep.n_valid == 2000, || msg.clone())?;
    ensure((0.035..=0.065).contains(&r05), || msg.clone())?;
    ensure((0.078..=0.122).contains(&r10), || msg.clone())?;
    ensure(ks < 0.05, || msg.clone())?;
    Ok(msg)
}

// 4
fn permutation_agreement() -> Check {
    let shifts = [0.0, 0.3, 0.6];
    let mut asym = Vec::new();
    let mut perm = Vec::new();
    let mut agree = 0;
    for i in 0..200 {
        let sc = SimScenario::uniform_shift(6, 6, 50, 5, 0.3, 0.4, shifts[i % 3], seed::mix(404, i as u64))
            .unwrap();
        let (m, g) = simulate_panel(&sc).map_err(|e| e.to_string())?;
        let (res, summaries) = test_matrix(&m, &g, Sidedness::GreaterTreat).map_err(|e| e.to_string())?;
        let p = permutation_test(&summaries, &g, 924, 0).map_err(|e| e.to_string())?;
        ensure(p.exhaustive && p.n_permutations == 924, || "enumeration not exhaustive".into())?;
        if (res.p_one_sided_greater < 0.10) == (p.p_value < 0.10) {
            agree += 1;
        }
        asym.push(res.p_one_sided_greater);
        perm.push(p.p_value);
    }
    let share = agree as f64 / 200.0;
    let rho = spearman(&asym, &perm);
    let msg = format!("decision agreement {share:.3}, Spearman {rho:.4}");
    ensure(share >= 0.85 && rho >= 0.95, || msg.clone())?;
    Ok(msg)
}

// 5
fn monotone_invariance() -> Check {
    let mut rng = seed::rng(505);
    for trial in 0..1000 {
        let k = rng.random_range(1..5);
        let sc = SimScenario::uniform_shift(
            rng.random_range(2..5),
            rng.random_range(2..5),
            rng.random_range(2..15),
            k,
            rng.random_range(0.0..0.9),
            rng.random_range(0.0..0.9),
            rng.random_range(-0.5..0.5),
            rng.random(),
        )
        .unwrap();
        let (m, g) = simulate_panel(&sc).unwrap();
        let col = rng.random_range(0..k);
        let t = if trial % 2 == 0 {
            m.map_column(col, f64::exp)
        } else {
            m.map_column(col, |x| x * x * x + x)
        }
        .map_err(|e| e.to_string())?;

        let (ta, tb) = (rank_table(&m).unwrap(), rank_table(&t).unwrap());
        ensure(ta == tb, || format!("trial {trial}: rank table changed"))?;
        let (ra, rb) = (
            test_matrix(&m, &g, Sidedness::GreaterTreat),
            test_matrix(&t, &g, Sidedness::GreaterTreat),
        );
        match (ra, rb) {
            (Ok((a, sa)), Ok((b, sb))) => {
                ensure(
                    a.t.to_bits() == b.t.to_bits()
                        && a.p_one_sided_greater.to_bits() == b.p_one_sided_greater.to_bits()
                        && a.p_two_sided.to_bits() == b.p_two_sided.to_bits()
                        && sa == sb,
                    || format!("trial {trial}: statistic changed"),
                )?;
            }
            (Err(a), Err(b)) => ensure(a == b, || format!("trial {trial}: errors differ"))?,
            _ => return Err(format!("trial {trial}: outcome kind changed")),
        }
        if m.n_rows() >= 2 {
            let ca = correlation_matrix(&m, CorrelationMethod::Spearman).unwrap().0;
            let cb = correlation_matrix(&t, CorrelationMethod::Spearman).unwrap().0;
            let bits = |c: &rankfuse::descriptives::CorrelationMatrix| -> Vec<Option<u64>> {
                c.values.iter().flatten().map(|v| v.map(f64::to_bits)).collect()
            };
            ensure(bits(&ca) == bits(&cb), || format!("trial {trial}: Spearman changed"))?;
        }
    }
    Ok("1000 trials bit-identical under exp and x^3 + x".into())
}

// 6
fn power_monotonicity() -> Check {
    let shifts = [0.0, 0.1, 0.2, 0.4];
    let mut rates = Vec::new();
    for (i, &s) in shifts.iter().enumerate() {
        let rep = calibration_run(&calibration_scenario(s, 600 + i as u64), 1000, &[0.05])
            .map_err(|e| e.to_string())?;
        rates.push(rep.rate(0.05).unwrap());
    }
    let msg = format!(
        "rates {}",
        shifts
            .iter()
            .zip(&rates)
            .map(|(s, r)| format!("{s}:{r:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || msg.clone())?;
    ensure(rates[3] >= 0.9, || msg.clone())?;
    Ok(msg)
}

/// 24 states with between 50 and 120 counties each.
fn robustness_panel() -> (PanelDataset, GroupMap) {
    let sc = SimScenario::uniform_shift(12, 12, 120, 5, 0.3, 0.4, 0.2, 707).unwrap();
    let (m, g) = simulate_panel(&sc).unwrap();
    let mut rng = seed::rng(708);
    let sizes: BTreeMap<String, usize> = sc
        .state_ids()
        .into_iter()
        .map(|s| (s, rng.random_range(50..=120)))
        .collect();
    let mut kept = BTreeMap::new();
    let rows: Vec<_> = m
        .rows()
        .iter()
        .filter(|r| {
            let n = kept.entry(r.state_id.clone()).or_insert(0usize);
            *n += 1;
            *n <= sizes[&r.state_id]
        })
        .cloned()
        .collect();
    let m = AlignedMatrix::new(m.outcomes().to_vec(), rows).unwrap();
    (matrix_to_panel(&m), g)
}

fn robustness_cfg(replicates: usize) -> RobustnessConfig {
    RobustnessConfig {
        c_values: vec![30, 40, 50],
        replicates,
        alpha_levels: vec![0.05, 0.10],
        master_seed: 7,
        sidedness: Sidedness::GreaterTreat,
    }
}

// 7
fn robustness_determinism(panel: &PanelDataset, groups: &GroupMap) -> Result<(String, RobustnessRun), String> {
    let cfg = robustness_cfg(200);
    let a = run_robustness(panel, groups, &cfg).map_err(|e| e.to_string())?;
    let b = run_robustness(panel, groups, &cfg).map_err(|e| e.to_string())?;
    ensure(a.summary.to_json() == b.summary.to_json(), || "repeat run differs".into())?;
    let c = single_threaded(|| run_robustness(panel, groups, &cfg)).map_err(|e| e.to_string())?;
    ensure(a.summary.to_json() == c.summary.to_json(), || "thread count changed the summary".into())?;

    let half = run_robustness(panel, groups, &robustness_cfg(100)).map_err(|e| e.to_string())?;
    let mut prefix = a.summary.clone();
    for (cv, s) in prefix.per_c.iter_mut() {
        *s = summarize_replicates(&a.replicates[cv][..100], &cfg.alpha_levels, s.retained_state_counts);
    }
    ensure(half.summary.to_json() == prefix.to_json(), || "prefix property violated".into())?;
    ensure(half.replicates.values().zip(a.replicates.values()).all(|(h, f)| h[..] == f[..100]), || {
        "prefix replicate records differ".into()
    })?;
    for (cv, s) in &a.summary.per_c {
        ensure(s.n_valid + s.n_degenerate == 200, || format!("C={cv}: counts do not add up"))?;
        ensure(s.retained_state_counts == StateCounts { m1: 12, m0: 12 }, || format!("C={cv}: retained states"))?;
    }
    let mean_t: Vec<String> = a
        .summary
        .per_c
        .iter()
        .map(|(cv, s)| format!("C={cv}: mean T {:.2}", s.mean_t.unwrap_or(f64::NAN)))
        .collect();
    Ok((format!("byte-identical reruns and 100-replicate prefix; {}", mean_t.join(", ")), a))
}

// 8
fn subsampling_balance(panel: &PanelDataset, run: &RobustnessRun) -> Check {
    let matrix = impute_state_median(&align_outcomes(panel)).map_err(|e| e.to_string())?;
    let counts = matrix.state_counts();
    let by_county: BTreeMap<&str, (&str, &[f64])> = matrix
        .rows()
        .iter()
        .map(|r| (r.county_id.as_str(), (r.state_id.as_str(), r.values.as_slice())))
        .collect();
    let mut checked = 0;
    for (&c, records) in &run.replicates {
        let expected: Vec<&String> = counts.iter().filter(|(_, &n)| n >= c).map(|(s, _)| s).collect();
        for rec in records {
            let plan = plan_subsample(&matrix, c, rec.seed).map_err(|e| e.to_string())?;
            ensure(plan.retained_states.iter().collect::<Vec<_>>() == expected, || {
                format!("C={c} r={}: retained states differ", rec.replicate)
            })?;
            for (state, sel) in &plan.selection {
                let mut uniq = sel.clone();
                uniq.sort();
                uniq.dedup();
                ensure(sel.len() == c && uniq.len() == c, || {
                    format!("C={c} r={}: state {state} selects {} ({} distinct)", rec.replicate, sel.len(), uniq.len())
                })?;
                ensure(sel.iter().all(|cid| by_county.get(cid.as_str()).map(|x| x.0) == Some(state.as_str())), || {
                    format!("C={c} r={}: foreign county in {state}", rec.replicate)
                })?;
            }
            let sub = apply_subsample(&matrix, &plan).map_err(|e| e.to_string())?;
            ensure(sub.n_rows() == c * plan.retained_states.len(), || "row count".into())?;
            for row in sub.rows() {
                ensure(by_county[row.county_id.as_str()].1 == row.values.as_slice(), || {
                    format!("C={c}: row of {} was not copied whole", row.county_id)
                })?;
            }
            for (state, n) in sub.state_counts() {
                ensure(n == c, || format!("C={c}: state {state} contributes {n} rows"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} replicate plans balanced, whole-row, without replacement"))
}

fn random_groups_matrix(rng: &mut impl Rng, trial: usize) -> (AlignedMatrix, GroupMap) {
    let k = rng.random_range(1..6);
    let sc = SimScenario::uniform_shift(
        rng.random_range(2..6),
        rng.random_range(2..6),
        rng.random_range(3..30),
        k,
        rng.random_range(0.0..0.8),
        rng.random_range(0.0..0.8),
        rng.random_range(-1.0..1.0),
        seed::mix(trial as u64, 9),
    )
    .unwrap();
    simulate_panel(&sc).unwrap()
}

// 9
fn descriptives_contracts() -> Check {
    let mut rng = seed::rng(909);
    for trial in 0..300 {
        let (m, g) = random_groups_matrix(&mut rng, trial);
        for method in [CorrelationMethod::Pearson, CorrelationMethod::Spearman] {
            let c = correlation_matrix(&m, method).map_err(|e| e.to_string())?.0;
            let k = c.values.len();
            for i in 0..k {
                ensure(c.values[i][i] == Some(1.0), || format!("trial {trial}: diagonal"))?;
                for j in 0..k {
                    ensure(c.values[i][j].map(f64::to_bits) == c.values[j][i].map(f64::to_bits), || {
                        format!("trial {trial}: not symmetric")
                    })?;
                    let v = c.values[i][j].unwrap();
                    ensure((-1.0..=1.0).contains(&v), || format!("trial {trial}: {v} out of range"))?;
                }
            }
        }

        let (base, _) = standardized_differences(&m, &g).map_err(|e| e.to_string())?;
        for col in 0..m.n_outcomes() {
            let lambda = rng.random_range(0.1..10.0);
            let shift = rng.random_range(-10.0..10.0);
            let t = m.map_column(col, |x| lambda * x + shift).map_err(|e| e.to_string())?;
            let (d, _) = standardized_differences(&t, &g).map_err(|e| e.to_string())?;
            let (a, b) = (base[col].diff_mad_units.unwrap(), d[col].diff_mad_units.unwrap());
            ensure((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0), || {
                format!("trial {trial}: affine map changed d from {a} to {b}")
            })?;
        }
    }

    let mut rng = seed::rng(910);
    for trial in 0..100 {
        let (pairs, k) = (rng.random_range(1..6), rng.random_range(1..5));
        let (panel, groups) = mirrored_panel(&mut rng, pairs, k);
        let m = impute_state_median(&align_outcomes(&panel)).map_err(|e| e.to_string())?;
        let (d, _) = standardized_differences(&m, &groups).map_err(|e| e.to_string())?;
        for s in d {
            if let Some(v) = s.diff_mad_units {
                ensure(v.abs() <= 1e-12, || format!("trial {trial}: {} = {v}", s.outcome))?;
            }
        }
    }
    Ok("300 random panels + 100 group-identical panels".into())
}

// 10
fn label_antisymmetry() -> Check {
    let mut rng = seed::rng(1010);
    let mut compared = 0;
    for trial in 0..500 {
        let (m, g) = random_groups_matrix(&mut rng, trial + 5000);
        let swapped = g.swapped();
        match (
            test_matrix(&m, &g, Sidedness::TwoSided),
            test_matrix(&m, &swapped, Sidedness::TwoSided),
        ) {
            (Ok((a, _)), Ok((b, _))) => {
                ensure(b.t.to_bits() == (-a.t).to_bits(), || format!("trial {trial}: {} vs {}", a.t, b.t))?;
                ensure(a.p_two_sided.to_bits() == b.p_two_sided.to_bits(), || {
                    format!("trial {trial}: p_two_sided changed")
                })?;
                compared += 1;
            }
            (Err(_), Err(_)) => {}
            _ => return Err(format!("trial {trial}: one labeling failed")),
        }
    }
    ensure(compared >= 490, || format!("only {compared} non-degenerate datasets"))?;
    Ok(format!("{compared} datasets: T negated exactly, p_two_sided preserved"))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, budget: Duration, started: Instant, outcome: Check| {
        let elapsed = started.elapsed();
        let outcome = outcome.and_then(|m| {
            if elapsed <= budget {
                Ok(m)
            } else {
                Err(format!("{m}; took {elapsed:.1?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(m) => println!("[PASS] criterion {id:>2}: {name} ({elapsed:.2?}) {m}"),
            Err(m) => {
                failures += 1;
                println!("[FAIL] criterion {id:>2}: {name} ({elapsed:.2?}) {m}");
            }
        }
    };

    let t = Instant::now();
    report(1, "mid-rank oracle equivalence", Duration::from_secs(10), t, midrank_oracle());
    let t = Instant::now();
    report(2, "symmetry null", Duration::from_secs(1), t, symmetry_null());
    let t = Instant::now();
    report(3, "normal calibration", Duration::from_secs(300), t, normal_calibration());
    let t = Instant::now();
    report(4, "permutation-oracle agreement", Duration::from_secs(120), t, permutation_agreement());
    let t = Instant::now();
    report(5, "monotone invariance", Duration::from_secs(30), t, monotone_invariance());
    let t = Instant::now();
    report(6, "power monotonicity", Duration::from_secs(600), t, power_monotonicity());

    let (panel, groups) = robustness_panel();
    let t = Instant::now();
    let run = match robustness_determinism(&panel, &groups) {
        Ok((msg, run)) => {
            report(7, "robustness determinism and prefix property", Duration::from_secs(120), t, Ok(msg));
            Some(run)
        }
        Err(e) => {
            report(7, "robustness determinism and prefix property", Duration::from_secs(120), t, Err(e));
            None
        }
    };
    let t = Instant::now();
    let balance = match &run {
        Some(run) => subsampling_balance(&panel, run),
        None => Err("criterion 7 did not produce a run".into()),
    };
    report(8, "subsampling balance", Duration::from_secs(120), t, balance);
    let t = Instant::now();
    report(9, "descriptives contracts", Duration::from_secs(10), t, descriptives_contracts());
    let t = Instant::now();
    report(10, "label antisymmetry", Duration::from_secs(30), t, label_antisymmetry());

    if failures > 0 {
        println!("{failures} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}

//! Acceptance checks, one PASS/FAIL line each.
//!
//! `OWCL_ACCEPT_ONLY=1,2,9` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use owcl_core::driver::{load_checkpoint, save_checkpoint, Experiment, ExperimentConfig, RunSummary};
use owcl_core::verify::{base_tensors, changed_tensors, run_suite, VerifyOptions};
use owcl_validation::{owcl_binary, trend_variants, TREND_SEEDS};

type Outcome = Result<String, String>;

fn property(name: &str, limit: Option<Duration>) -> Outcome {
    let start = Instant::now();
    let results = run_suite(Some(name), &VerifyOptions::default()).map_err(|e| e.to_string())?;
    let r = results.iter().find(|r| r.name == name).ok_or(format!("{name} missing"))?;
    let elapsed = start.elapsed();
    if !r.passed {
        return Err(r.detail.clone());
    }
    if let Some(limit) = limit {
        if elapsed > limit {
            return Err(format!("took {elapsed:.1?}, limit {limit:?}"));
        }
    }
    Ok(format!("{} [{elapsed:.1?}]", r.detail))
}

fn freeze_and_resume() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    let enc = base_tensors(&exp.bundle, "encoder.");
    let base = base_tensors(&exp.bundle, "backbone.");
    let mut mid = None;
    while !exp.is_finished() {
        exp.run_next_stage().map_err(|e| e.to_string())?;
        if exp.completed_stages() == exp.num_stages() / 2 {
            mid = Some(save_checkpoint(&exp.checkpoint().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
        }
    }
    let mut changed = changed_tensors(&enc, &base_tensors(&exp.bundle, "encoder."));
    changed.extend(changed_tensors(&base, &base_tensors(&exp.bundle, "backbone.")));
    if !changed.is_empty() {
        return Err(format!("frozen tensors changed: {}", changed.join(", ")));
    }
    let mut cross = 0;
    for access in exp.access_log() {
        let own = exp.schedule.classes(access.stage).map_err(|e| e.to_string())?;
        cross += access.classes.iter().filter(|c| !own.contains(c)).count();
    }
    if cross > 0 || exp.access_log().len() != exp.num_stages() {
        return Err(format!("{cross} cross-stage class reads over {} logged stages", exp.access_log().len()));
    }
    let record = load_checkpoint(&mid.ok_or("no mid-run checkpoint")?).map_err(|e| e.to_string())?;
    let mut resumed = Experiment::resume(&record).map_err(|e| e.to_string())?;
    resumed.run_to_end().map_err(|e| e.to_string())?;
    let same_recalls = resumed
        .recalls()
        .iter()
        .zip(exp.recalls())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let bytes = |e: &Experiment| save_checkpoint(&e.checkpoint().unwrap()).unwrap();
    if !same_recalls || bytes(&resumed) != bytes(&exp) {
        return Err("resumed run diverges from the uninterrupted run".into());
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(30 * 60) {
        return Err(format!("took {elapsed:.0?}, limit 30 min"));
    }
    Ok(format!(
        "{} encoder + {} base tensors bitwise unchanged; 0 cross-stage reads; resume from stage {} bitwise identical [{elapsed:.0?}]",
        enc.len(),
        base.len(),
        exp.num_stages() / 2
    ))
}

#[derive(Default, Clone, Copy)]
struct Mean {
    r_n: f64,
    f_n: f64,
    gap: f64,
}

fn trend_runs() -> Result<(BTreeMap<&'static str, Mean>, Duration), String> {
    let start = Instant::now();
    let mut sums: BTreeMap<&'static str, Mean> = BTreeMap::new();
    for seed in TREND_SEEDS {
        for (name, cfg) in trend_variants(seed) {
            let t = Instant::now();
            let mut exp = Experiment::new(cfg).map_err(|e| format!("{name}: {e}"))?;
            exp.run_to_end().map_err(|e| format!("{name}: {e}"))?;
            let s: RunSummary = exp.summary().map_err(|e| format!("{name}: {e}"))?;
            println!(
                "  seed {seed} {name:<12} R_N {:.4} F_N {:.4} gap {:.3} [{:.0?}]",
                s.r_n,
                s.f_n,
                s.histogram_gap,
                t.elapsed()
            );
            let m = sums.entry(name).or_default();
            m.r_n += s.r_n / TREND_SEEDS.len() as f64;
            m.f_n += s.f_n / TREND_SEEDS.len() as f64;
            m.gap += s.histogram_gap / TREND_SEEDS.len() as f64;
        }
    }
    Ok((sums, start.elapsed()))
}

fn trend_checks(m: &BTreeMap<&'static str, Mean>, elapsed: Duration) -> Vec<(&'static str, Outcome)> {
    let r = |k: &str| m[k].r_n;
    let verdict = |ok: bool, detail: String| if ok { Ok(detail) } else { Err(detail) };
    let (dparl, dpg, pool) = (r("dparl"), r("dpg_frozen"), r("static_pool"));
    let orders = [r("dparl"), r("filo"), r("random")];
    let spread = orders.iter().cloned().fold(f64::MIN, f64::max) - orders.iter().cloned().fold(f64::MAX, f64::min);
    let best_low = [r("rank_4"), r("dparl"), r("rank_16")].into_iter().fold(f64::MIN, f64::max);
    let budget = Duration::from_secs(4 * 3600);
    vec![
        (
            "9a ordering DPaRL > DPG frozen > static pool, margin >= 1pt",
            verdict(
                dparl > dpg && dpg > pool && dparl - pool >= 0.01,
                format!("R_N {dparl:.4} > {dpg:.4} > {pool:.4}; margin {:.2}pt", 100.0 * (dparl - pool)),
            ),
        ),
        (
            "9b F_N(full FT) > 5 x F_N(DPaRL)",
            verdict(
                m["full_ft"].f_n > 5.0 * m["dparl"].f_n,
                format!(
                    "F_N {:.4} vs {:.4} (ratio {:.2})",
                    m["full_ft"].f_n,
                    m["dparl"].f_n,
                    m["full_ft"].f_n / m["dparl"].f_n
                ),
            ),
        ),
        (
            "9c stage tokens: FIFO >= none; FIFO/FILO/RANDOM within 1pt",
            verdict(
                r("dparl") >= r("no_tokens") && spread <= 0.01,
                format!(
                    "FIFO {:.4} vs none {:.4}; FILO {:.4}, RANDOM {:.4}, spread {:.2}pt",
                    r("dparl"),
                    r("no_tokens"),
                    r("filo"),
                    r("random"),
                    100.0 * spread
                ),
            ),
        ),
        (
            "9d full-rank mapping below best restricted rank",
            verdict(
                r("rank_full") < best_low,
                format!(
                    "full {:.4} vs R=4 {:.4}, R=8 {:.4}, R=16 {:.4}",
                    r("rank_full"),
                    r("rank_4"),
                    r("dparl"),
                    r("rank_16")
                ),
            ),
        ),
        (
            "9e histogram gap DPaRL > static pool",
            verdict(
                m["dparl"].gap > m["static_pool"].gap,
                format!("gap {:.3} vs {:.3}", m["dparl"].gap, m["static_pool"].gap),
            ),
        ),
        (
            "9 runtime under 4 h",
            verdict(elapsed < budget, format!("{elapsed:.0?}")),
        ),
    ]
}

fn verify_command() -> Outcome {
    let bin = owcl_binary().map_err(|e| e.to_string())?;
    let clean = Command::new(&bin).arg("verify").output().map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&clean.stdout);
    let wanted = [
        "gradcheck",
        "prefix_oracle",
        "mapping_fidelity",
        "rank_svd",
        "param_counts",
        "queue_semantics",
        "metric_oracles",
    ];
    let missing: Vec<&str> = wanted
        .iter()
        .copied()
        .filter(|n| !text.contains(&format!("PASS {n}:")))
        .collect();
    if !clean.status.success() || !missing.is_empty() {
        return Err(format!("clean verify exit {:?}; not passing: {missing:?}", clean.status.code()));
    }
    let mutated = Command::new(&bin)
        .args(["verify", "--mutate", "lora_nonzero_init"])
        .output()
        .map_err(|e| e.to_string())?;
    let mtext = String::from_utf8_lossy(&mutated.stdout);
    if mutated.status.success() || !mtext.contains("FAIL zero_init") {
        return Err("mutated build was not reported as a named failure".into());
    }
    let filtered = Command::new(&bin)
        .args(["verify", "--only", "gradcheck"])
        .output()
        .map_err(|e| e.to_string())?;
    let ftext = String::from_utf8_lossy(&filtered.stdout);
    let lines = ftext.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count();
    if !filtered.status.success() || lines != 1 {
        return Err(format!("--only gradcheck printed {lines} property lines"));
    }
    Ok("clean suite exits 0 with every property PASS; mutation fails as zero_init; --only filters".into())
}

fn selected() -> Option<Vec<u32>> {
    std::env::var("OWCL_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut report = |label: String, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS {label}: {d}"),
            Err(d) => println!("FAIL {label}: {d}"),
        }
        lines.push((label, outcome));
    };
    let props = [
        (1, "gradient correctness", "gradcheck", Some(Duration::from_secs(60))),
        (2, "prefix-attention oracle", "prefix_oracle", None),
        (3, "mapping fidelity", "mapping_fidelity", None),
        (4, "rank constraint", "rank_svd", None),
        (5, "parameter accounting", "param_counts", None),
        (6, "queue semantics", "queue_semantics", None),
        (7, "metric oracles", "metric_oracles", None),
    ];
    for (n, label, name, limit) in props {
        if want(n) {
            report(format!("{n} {label}"), property(name, limit));
        }
    }
    if want(8) {
        report("8 freeze, rehearsal-free access, resume".into(), freeze_and_resume());
    }
    if want(9) {
        match trend_runs() {
            Ok((means, elapsed)) => {
                for (name, m) in &means {
                    println!("  mean {name:<12} R_N {:.4} F_N {:.4} gap {:.3}", m.r_n, m.f_n, m.gap);
                }
                for (label, outcome) in trend_checks(&means, elapsed) {
                    report(label.into(), outcome);
                }
            }
            Err(e) => report("9 trend runs".into(), Err(e)),
        }
    }
    if want(10) {
        report("10 verify command".into(), verify_command());
    }
    let failed = lines.iter().filter(|(_, o)| o.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

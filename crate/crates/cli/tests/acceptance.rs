//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any blocking criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualfocal::experiment::{run_comparison, CompareSpec};
use dualfocal::gradcheck::{run_gradcheck, GradcheckConfig};
use dualfocal::io::{read_logits, write_logits};
use dualfocal::loss::{entropy_and_kl, loss_value, softmax, DualVariant, LossSpec};
use dualfocal::metrics::{ada_ece, classwise_ece, ece, error_rate, mce};
use dualfocal::posthoc::{apply_temperature, default_grid, fit_temperature};
use dualfocal::theory::{
    eta_from_qstar, find_vm, phi, phi_curve, region_analysis, same_rank_order, slope_factor, PhiContext,
};
use dualfocal::trainer::SyntheticSpec;
use dualfocal::LabeledBatch;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_logits(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(-scale..scale)).collect()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let z = random_logits(&mut rng, k, 8.0);
        let gt = rng.random_range(0..k);
        let ce = loss_value(&LossSpec::cross_entropy(), &z, gt).map_err(|e| e.to_string())?;
        for spec in [LossSpec::focal(0.0), LossSpec::dual_focal(0.0)] {
            let v = loss_value(&spec, &z, gt).map_err(|e| e.to_string())?;
            worst = worst.max((v - ce).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max |diff| = {worst:e}"))?;
    Ok(format!("max |diff| = {worst:e}"))
}

fn gradient_suite() -> Outcome {
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for &k in &[2usize, 3, 10] {
        let mut specs = vec![
            LossSpec::cross_entropy(),
            LossSpec::flsd53(),
            LossSpec::brier(),
            LossSpec::label_smoothing(0.05),
        ];
        for &g in &[0.0, 1.0, 2.0, 3.0, 5.0] {
            specs.push(LossSpec::focal(g));
            specs.push(LossSpec::dual_focal(g));
            for variant in [
                DualVariant::KthLargestBelowGt(2),
                DualVariant::MeanTopMBelowGt(2),
                DualVariant::MeanAllBelowGt,
            ] {
                specs.push(LossSpec::dual_focal_variant(g, variant));
            }
        }
        for (i, spec) in specs.into_iter().enumerate() {
            let config = GradcheckConfig {
                seed: 1000 * k as u64 + i as u64,
                ..GradcheckConfig::new(spec, k, 200)
            };
            let summary = run_gradcheck(&config).map_err(|e| e.to_string())?;
            ensure(summary.passed(), || {
                format!("{spec:?}, K={k}: {} failures, worst {:e}", summary.failures, summary.worst_rel_err)
            })?;
            worst = worst.max(summary.worst_rel_err);
            checked += summary.checked;
            skipped += summary.skipped;
        }
    }
    Ok(format!("{checked} points checked ({skipped} near ties skipped), worst rel. err {worst:e}"))
}

/// Straightforward re-derivation of the binned metrics, sharing no code
/// with the library.
mod oracle {
    pub fn probs(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn top(z: &[f64], label: usize) -> (f64, bool) {
        let p = probs(z);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        (p[best], best == label)
    }

    fn bin_of(c: f64, m: usize) -> usize {
        let b = (c * m as f64).floor() as usize;
        if b >= m {
            m - 1
        } else {
            b
        }
    }

    /// Returns (weighted gap sum / n, max gap over nonempty bins).
    fn equal_width(scores: &[(f64, f64)], m: usize) -> (f64, f64) {
        let n = scores.len() as f64;
        let mut total = 0.0;
        let mut worst = 0.0f64;
        for b in 0..m {
            let mut count = 0.0;
            let mut hit = 0.0;
            let mut conf = 0.0;
            for &(c, y) in scores {
                if bin_of(c, m) == b {
                    count += 1.0;
                    hit += y;
                    conf += c;
                }
            }
            if count > 0.0 {
                let gap = (hit / count - conf / count).abs();
                total += count / n * gap;
                worst = worst.max(gap);
            }
        }
        (total, worst)
    }

    pub fn metrics(rows: &[Vec<f64>], labels: &[usize], m: usize) -> [f64; 4] {
        let n = rows.len();
        let k = rows[0].len();
        let tops: Vec<(f64, f64)> = rows
            .iter()
            .zip(labels)
            .map(|(z, &l)| {
                let (c, ok) = top(z, l);
                (c, if ok { 1.0 } else { 0.0 })
            })
            .collect();
        let (ece, mce) = equal_width(&tops, m);

        let mut idx: Vec<usize> = (0..n).collect();
        // insertion sort on (confidence, index)
        for i in 1..n {
            let mut j = i;
            while j > 0 && (tops[idx[j]].0 < tops[idx[j - 1]].0) {
                idx.swap(j, j - 1);
                j -= 1;
            }
        }
        let mut ada = 0.0;
        let mut start = 0;
        for b in 0..m {
            let size = n / m + if b < n % m { 1 } else { 0 };
            if size > 0 {
                let members = &idx[start..start + size];
                let acc: f64 = members.iter().map(|&i| tops[i].1).sum::<f64>() / size as f64;
                let conf: f64 = members.iter().map(|&i| tops[i].0).sum::<f64>() / size as f64;
                ada += size as f64 / n as f64 * (acc - conf).abs();
            }
            start += size;
        }

        let mut cw = 0.0;
        for j in 0..k {
            let scores: Vec<(f64, f64)> = rows
                .iter()
                .zip(labels)
                .map(|(z, &l)| (probs(z)[j], if l == j { 1.0 } else { 0.0 }))
                .collect();
            cw += equal_width(&scores, m).0;
        }
        [ece, ada, cw / k as f64, mce]
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=10);
        let k = rng.random_range(2..=5);
        let coarse = trial % 4 == 0;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = random_logits(&mut rng, k, 3.0);
                if coarse {
                    z.iter().map(|v| v.round()).collect()
                } else {
                    z
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let batch = LabeledBatch::from_rows(&rows, labels.clone()).map_err(|e| e.to_string())?;
        let expected = oracle::metrics(&rows, &labels, m);
        let got = [
            ece(&batch, m).map_err(|e| e.to_string())?,
            ada_ece(&batch, m).map_err(|e| e.to_string())?,
            classwise_ece(&batch, m).map_err(|e| e.to_string())?,
            mce(&batch, m).map_err(|e| e.to_string())?,
        ];
        for (name, (g, e)) in ["ece", "ada_ece", "classwise_ece", "mce"].iter().zip(got.iter().zip(expected)) {
            let d = (g - e).abs();
            worst = worst.max(d);
            ensure(d <= 1e-12, || format!("trial {trial} {name}: {g} vs {e}"))?;
        }
    }
    Ok(format!("max |diff| = {worst:e}"))
}

/// Two-class batch whose confidence levels are matched exactly by accuracy.
fn calibrated_batch() -> LabeledBatch {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, correct) in [(0.6f64, 6), (0.7, 7), (0.8, 8), (0.9, 9)] {
        for i in 0..10 {
            rows.push(vec![(c / (1.0 - c)).ln(), 0.0]);
            labels.push(if i < correct { 0 } else { 1 });
        }
    }
    LabeledBatch::from_rows(&rows, labels).expect("valid batch")
}

fn temperature_recovery() -> Outcome {
    let base = calibrated_batch();
    let base_ece = ece(&base, 15).map_err(|e| e.to_string())?;
    ensure(base_ece < 1e-12, || format!("base batch ECE {base_ece}"))?;
    let mut found = Vec::new();
    for s in [0.5, 2.0, 3.0] {
        let scaled = base.map_logits(|z| z * s).map_err(|e| e.to_string())?;
        let t = fit_temperature(&scaled, &default_grid(), 15).map_err(|e| e.to_string())?.temperature;
        ensure((t - s).abs() <= 0.1 + 1e-12, || format!("s = {s}: fitted T = {t}"))?;
        let after = apply_temperature(&scaled, t).map_err(|e| e.to_string())?;
        ensure(error_rate(&after) == error_rate(&scaled), || format!("s = {s}: accuracy changed"))?;
        found.push(format!("{s}->{t}"));
    }
    Ok(found.join(", "))
}

fn phi_numerics() -> Outcome {
    let mut worst_s = 0.0f64;
    for g in [1.0, 2.0, 3.0, 5.0] {
        for ci in 1..=9 {
            let c = ci as f64 / 10.0;
            let ctx = PhiContext::off_diagonal(g, c).map_err(|e| e.to_string())?;
            let at0 = phi(0.0, &ctx).map_err(|e| e.to_string())?;
            let at1 = phi(1.0, &ctx).map_err(|e| e.to_string())?;
            ensure(at0 == (1.0 + c).powf(g), || format!("phi(0) = {at0} at g={g}, C={c}"))?;
            ensure(at1 == c.powf(g), || format!("phi(1) = {at1} at g={g}, C={c}"))?;
            let vm = find_vm(&ctx).map_err(|e| e.to_string())?;
            ensure(vm > 0.0 && vm < 1.0, || format!("v_m = {vm} at g={g}, C={c}"))?;
            let s = slope_factor(vm, g, c).abs();
            worst_s = worst_s.max(s);
            ensure(s <= 1e-8, || format!("|s(v_m)| = {s:e} at g={g}, C={c}"))?;
            let mut prev = (0.0, at0);
            for i in 1..=10_000 {
                let v = i as f64 / 10_000.0;
                let cur = phi(v, &ctx).map_err(|e| e.to_string())?;
                let ok = if v <= vm {
                    cur > prev.1
                } else if prev.0 >= vm {
                    cur < prev.1
                } else {
                    true
                };
                ensure(ok, || format!("phi not strictly monotone at v={v}, g={g}, C={c}"))?;
                prev = (v, cur);
            }
        }
    }
    Ok(format!("36 cases, max |s(v_m)| = {worst_s:e}"))
}

fn region_reduction() -> Outcome {
    let mut smallest = f64::INFINITY;
    for g in [1.0, 2.0, 3.0, 5.0] {
        for ci in 1..=9 {
            let c = ci as f64 / 10.0;
            let r = region_analysis(&PhiContext::off_diagonal(g, c).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            ensure(r.v_uc > r.v_prime && r.reduction > 0.0, || format!("{r:?}"))?;
            smallest = smallest.min(r.reduction);
        }
    }
    let curve = phi_curve(&PhiContext::off_diagonal(1.0, 0.3).map_err(|e| e.to_string())?, 100)
        .map_err(|e| e.to_string())?;
    let e = &curve.endpoints;
    ensure((e.dfl_at_0 - 1.3).abs() < 1e-12 && (e.fl_at_0 - 1.0).abs() < 1e-12, || format!("{e:?}"))?;
    ensure(curve.rows[..10].iter().all(|r| r.dfl > r.fl), || "DFL curve not above FL near 0".into())?;
    Ok(format!("min reduction {smallest:.6}; endpoints at 0: DFL {} vs FL {}", e.dfl_at_0, e.fl_at_0))
}

fn order_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for k in [3usize, 10] {
        for g in [1.0, 2.0, 5.0] {
            for _ in 0..1000 {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let q: Vec<f64> = raw.iter().map(|x| x / total).collect();
                let map = eta_from_qstar(&q, g).map_err(|e| e.to_string())?;
                ensure(same_rank_order(&map.q_star, &map.eta), || format!("order broken for {q:?}, g={g}"))?;
                checked += 1;
            }
            let uniform = vec![1.0 / k as f64; k];
            let eta = eta_from_qstar(&uniform, g).map_err(|e| e.to_string())?.eta;
            ensure(eta.iter().all(|e| (e - 1.0 / k as f64).abs() <= 1e-12), || format!("{eta:?}"))?;
        }
    }
    Ok(format!("{checked} vectors order-preserved"))
}

fn entropy_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut slack = f64::INFINITY;
    for g in [1.0, 2.0, 3.0] {
        for _ in 0..1000 {
            let k = rng.random_range(2..=10);
            let z = random_logits(&mut rng, k, 6.0);
            let gt = rng.random_range(0..k);
            let p = softmax(&z).map_err(|e| e.to_string())?;
            let (h, kl) = entropy_and_kl(&p, gt).map_err(|e| e.to_string())?;
            let fl = loss_value(&LossSpec::focal(g), &z, gt).map_err(|e| e.to_string())?;
            let gap = fl - (kl - g * h);
            ensure(gap >= -1e-12, || format!("bound violated by {gap:e}"))?;
            slack = slack.min(gap);
        }
    }
    Ok(format!("min slack {slack:e}"))
}

fn comparison_spec() -> CompareSpec {
    CompareSpec {
        losses: vec![LossSpec::cross_entropy(), LossSpec::dual_focal(5.0), LossSpec::focal(3.0)],
        seeds: vec![1, 2, 3, 4, 5],
        dataset: SyntheticSpec {
            n_train: 300,
            dim: 20,
            ..SyntheticSpec::default()
        },
        epochs: 70,
        hidden: vec![64, 64],
        batch_size: 128,
        bins: 15,
    }
}

struct Desk {
    cells: Vec<dualfocal::experiment::CellResult>,
    elapsed: Duration,
}

fn median_of(d: &Desk, loss: &LossSpec, f: impl Fn(&dualfocal::experiment::CellResult) -> f64) -> f64 {
    let v: Vec<f64> = d.cells.iter().filter(|c| c.loss == *loss).map(f).collect();
    dualfocal::experiment::lower_median(&v)
}

fn desk_calibration(d: &Desk) -> Outcome {
    let (ce, dfl) = (LossSpec::cross_entropy(), LossSpec::dual_focal(5.0));
    let ce_err = median_of(d, &ce, |c| c.pre.error_rate);
    ensure((0.10..=0.20).contains(&ce_err), || format!("CE test error {ce_err} outside 10-20%"))?;
    let (ece_ce, ece_dfl) = (median_of(d, &ce, |c| c.pre.ece), median_of(d, &dfl, |c| c.pre.ece));
    let (t_ce, t_dfl) = (median_of(d, &ce, |c| c.temperature), median_of(d, &dfl, |c| c.temperature));
    let detail = format!("CE err {ce_err:.3}; ECE CE {ece_ce:.4} vs DFL {ece_dfl:.4}; T CE {t_ce} vs DFL {t_dfl}");
    ensure(ece_dfl < ece_ce, || detail.clone())?;
    ensure((t_dfl - 1.0).abs() < (t_ce - 1.0).abs(), || detail.clone())?;
    Ok(detail)
}

/// Returns the outcome and whether a failure should block.
fn desk_logit_range(d: &Desk) -> (Outcome, bool) {
    let (ce, dfl, fl) = (LossSpec::cross_entropy(), LossSpec::dual_focal(5.0), LossSpec::focal(3.0));
    let range = |l: &LossSpec| median_of(d, l, |c| c.logit_stats.max_logit_range);
    let (r_ce, r_dfl, r_fl) = (range(&ce), range(&dfl), range(&fl));
    let per_seed = d
        .cells
        .iter()
        .filter(|c| c.loss == ce)
        .filter(|c| {
            let of = |l: &LossSpec| {
                d.cells
                    .iter()
                    .find(|x| x.loss == *l && x.seed == c.seed)
                    .map_or(f64::NAN, |x| x.logit_stats.max_logit_range)
            };
            of(&ce) > of(&dfl) && of(&dfl) > of(&fl)
        })
        .count();
    let seeds = d.cells.iter().filter(|c| c.loss == ce).count();
    let detail = format!(
        "median max-logit range CE {r_ce:.2} > DFL {r_dfl:.2} > FL {r_fl:.2}; ordered in {per_seed}/{seeds} seeds"
    );
    if r_ce > r_dfl && r_dfl > r_fl {
        (Ok(detail), true)
    } else {
        // Non-blocking when one more agreeing seed would give a majority.
        let blocking = per_seed + 1 < seeds.div_ceil(2);
        (Err(detail), blocking)
    }
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dualfocal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cli_roundtrips(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| random_logits(&mut rng, 4, 50.0)).collect();
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
    let batch = LabeledBatch::from_rows(&rows, labels).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_logits(&batch, &mut buf).map_err(|e| e.to_string())?;
    let back = read_logits(buf.as_slice()).map_err(|e| e.to_string())?;
    let worst = batch
        .logits()
        .iter()
        .zip(back.logits())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-9 && back.labels() == batch.labels(), || format!("round trip drift {worst:e}"))?;

    let file = dir.join("logits.csv");
    std::fs::write(&file, &buf).map_err(|e| e.to_string())?;
    let f = file.to_str().unwrap();
    let svg = dir.join("diagram.svg");
    let s = svg.to_str().unwrap();
    let invocations: Vec<Vec<&str>> = vec![
        vec!["eval", f, "--fit-temperature", "--val", f],
        vec!["diagram", f, "--svg", s],
        vec!["theory", "--gamma", "1", "--C", "0.3"],
        vec!["gradcheck", "--loss", "dfl", "--gamma", "2", "--trials", "50"],
    ];
    for args in &invocations {
        let a = run_cli(args);
        let svg_a = std::fs::read(&svg).unwrap_or_default();
        let b = run_cli(args);
        let svg_b = std::fs::read(&svg).unwrap_or_default();
        ensure(a.status.success() && b.status.success(), || {
            format!("{args:?} failed: {}", String::from_utf8_lossy(&a.stderr))
        })?;
        ensure(a.stdout == b.stdout && svg_a == svg_b, || format!("{args:?} not byte-identical"))?;
    }

    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "label,logit_0,logit_1\n0,1.0,2.0\n1,oops,0\n").map_err(|e| e.to_string())?;
    let out = run_cli(&["eval", bad.to_str().unwrap()]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure(out.status.code() == Some(2) && stderr.contains("line 3"), || {
        format!("malformed file: code {:?}, stderr {stderr:?}", out.status.code())
    })?;
    Ok(format!("round trip max drift {worst:e}; {} commands repeat byte-identically", invocations.len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
}

fn report(c: &Criterion, outcome: Outcome, elapsed: Duration, blocking: bool) -> bool {
    let in_time = elapsed <= c.budget;
    let passed = outcome.is_ok() && in_time;
    let status = match (passed, blocking) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (non-blocking)",
    };
    let detail = match &outcome {
        Ok(d) | Err(d) => d.clone(),
    };
    let timing = if in_time {
        format!("{:.2}s", elapsed.as_secs_f64())
    } else {
        format!("{:.2}s exceeds {:.0}s budget", elapsed.as_secs_f64(), c.budget.as_secs_f64())
    };
    println!("{status} [{:>2}] {}: {detail} ({timing})", c.id, c.name);
    passed || !blocking
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    let simple: Vec<(Criterion, fn() -> Outcome)> = vec![
        (Criterion { id: 1, name: "loss identities at gamma = 0", budget: secs(1) }, loss_identities),
        (Criterion { id: 2, name: "gradient suite", budget: secs(10) }, gradient_suite),
        (Criterion { id: 3, name: "metric oracle equivalence", budget: secs(5) }, metric_oracle),
        (Criterion { id: 4, name: "temperature recovery", budget: secs(10) }, temperature_recovery),
        (Criterion { id: 5, name: "phi boundary values and interior maximum", budget: secs(30) }, phi_numerics),
        (Criterion { id: 6, name: "under-confidence region reduction", budget: secs(10) }, region_reduction),
        (Criterion { id: 7, name: "order preservation of the risk minimizer", budget: secs(5) }, order_preservation),
        (Criterion { id: 8, name: "focal loss entropy bound", budget: secs(1) }, entropy_bound),
    ];
    for (c, f) in simple {
        let (out, t) = timed(f);
        ok &= report(&c, out, t, true);
    }

    let start = Instant::now();
    let desk = run_comparison(&comparison_spec()).map(|cells| Desk {
        cells,
        elapsed: start.elapsed(),
    });
    let c9 = Criterion { id: 9, name: "desk-scale calibration (stochastic, directional)", budget: secs(300) };
    let c10 = Criterion { id: 10, name: "max-logit range ordering (stochastic, directional)", budget: secs(300) };
    match &desk {
        Ok(d) => {
            ok &= report(&c9, desk_calibration(d), d.elapsed, true);
            let (out, blocking) = desk_logit_range(d);
            ok &= report(&c10, out, d.elapsed, blocking);
        }
        Err(e) => {
            ok &= report(&c9, Err(e.to_string()), start.elapsed(), true);
            ok &= report(&c10, Err(e.to_string()), start.elapsed(), true);
        }
    }

    let dir = std::env::temp_dir().join(format!("dualfocal-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let (out, t) = timed(|| cli_roundtrips(&dir));
    ok &= report(&Criterion { id: 11, name: "CLI round trips", budget: secs(5) }, out, t, true);
    let _ = std::fs::remove_dir_all(&dir);

    if !ok {
        std::process::exit(1);
    }
}

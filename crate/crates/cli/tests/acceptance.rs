//! Acceptance suite. Prints one PASS/FAIL line per criterion and a tally.
//!
//! Runs as a plain binary so the verdict lines always reach stdout. A failing
//! criterion is reported, not raised; set `ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a nonzero exit. Panics are reserved for broken plumbing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use legato_cli::{cmd_sweep, completion_proxy, RunConfig, RunOptions};
use legato_core::executor::{run_episode_seeded, ExecConfig, ExecutionTrace, OverlapSegment, Strategy};
use legato_core::flowmath::{fm_path, guide, guided_step, legato_path, target_velocity, DenoiseState};
use legato_core::metrics::{
    evaluate_trace, nldlj, nsparc, overlap_rmse, CommandStream, MetricConfig, MetricReport, SparcParams,
};
use legato_core::policy::{masked_mse, train, Activation, Family, Mlp, Policy, TrainConfig};
use legato_core::schedule::{GuidanceSchedule, ScheduleParams};
use legato_core::tasks::{ReachParams, TaskSpec};
use legato_core::Chunk;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const HORIZON: usize = 60;
const N_STEPS: usize = 5;
const MAX_STEPS: usize = 300;
const SEEDS: u64 = 30;
const N_DEMOS: usize = 10_000;
const TRAIN_STEPS: usize = 10_000;

struct Verdict {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: u8, title: &'static str, passed: bool, detail: String) -> Verdict {
    Verdict { id, title, passed, detail }
}

// ---------------------------------------------------------------- helpers

fn normal_chunk(rng: &mut ChaCha8Rng, h: usize, dim: usize) -> Chunk {
    Chunk::from_vec(h, dim, (0..h * dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn max_rel(got: &Chunk, want: &Chunk) -> f64 {
    got.max_abs_diff(want) / want.max_abs().max(f64::MIN_POSITIVE)
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `n` fair coin flips.
fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    for k in wins..=n {
        let mut c = 1.0f64;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        total += c;
    }
    total / 2f64.powi(n as i32)
}

/// Wins and non-tied count for paired values where `better(a, b)` means `a`
/// beats `b`.
fn paired(a: &[f64], b: &[f64], better: impl Fn(f64, f64) -> bool) -> (usize, usize) {
    let wins = a.iter().zip(b).filter(|(x, y)| better(**x, **y)).count();
    let ties = a.iter().zip(b).filter(|(x, y)| x == y).count();
    (wins, a.len() - ties)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let h = rng.random_range(1..=60);
        let dim = rng.random_range(1..=14);
        let eps = normal_chunk(&mut rng, h, dim);
        let a = normal_chunk(&mut rng, h, dim);
        let omega: Vec<f64> = (0..h)
            .map(|_| if rng.random_bool(0.3) { 1.0 } else { rng.random_range(0.0..=1.0) })
            .collect();
        let s = GuidanceSchedule::from_omega(omega, n).unwrap();
        let mut state = DenoiseState::new(eps.clone(), guide(&eps, &a, &s).unwrap());
        while state.k < n {
            let v = target_velocity(&a, &eps, &s, state.t).unwrap();
            state = guided_step(&state, &v, &a, &s).unwrap();
        }
        worst = worst.max(max_rel(&state.y, &a));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "exact consistency oracle",
        worst <= 1e-10 && secs < 5.0,
        format!("1000 tuples, max rel err {worst:.2e} (<= 1e-10), {secs:.2}s (< 5s)"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let sizes = [60 * 3 + 2 + 9, 32, 120];
    let net = Mlp::new(&sizes, Activation::Tanh, &mut rng).unwrap();
    let (mut path_err, mut target_err, mut loss_err, mut full_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let eps = normal_chunk(&mut rng, 60, 2);
        let a = normal_chunk(&mut rng, 60, 2);
        let t: f64 = rng.random();
        let zero = GuidanceSchedule::zeros(60, N_STEPS).unwrap();
        // Plain flow matching written out directly.
        let fm_y = Chunk::from_array(eps.as_array() * (1.0 - t) + a.as_array() * t);
        let fm_v = Chunk::from_array(a.as_array() - eps.as_array());
        let y = legato_path(&eps, &a, &zero, t).unwrap();
        let v = target_velocity(&a, &eps, &zero, t).unwrap();
        path_err = path_err.max(y.max_abs_diff(&fm_y)).max(y.max_abs_diff(&fm_path(&eps, &a, t).unwrap()));
        target_err = target_err.max(v.max_abs_diff(&fm_v));

        let features = |y: &Chunk| -> Array2<f64> {
            let mut row = y.to_vec();
            row.extend(std::iter::repeat_n(0.0, 60));
            row.extend((0..11).map(|i| (t * (i + 1) as f64).sin()));
            Array2::from_shape_vec((1, row.len()), row).unwrap()
        };
        let ones = Array2::ones((1, 120));
        let pred_l = net.forward_batch(features(&y).view()).unwrap();
        let pred_f = net.forward_batch(features(&fm_y).view()).unwrap();
        let target_l = Array2::from_shape_vec((1, 120), v.to_vec()).unwrap();
        let target_f = Array2::from_shape_vec((1, 120), fm_v.to_vec()).unwrap();
        let (l, _) = masked_mse(&pred_l, &target_l, &ones);
        let (f, _) = masked_mse(&pred_f, &target_f, &ones);
        loss_err = loss_err.max((l - f).abs());

        let full = GuidanceSchedule::from_omega(vec![1.0; 60], N_STEPS).unwrap();
        for tt in [0.0, t, 0.5, 1.0] {
            full_err = full_err.max(legato_path(&eps, &a, &full, tt).unwrap().max_abs_diff(&a));
        }
    }
    let tol = 4.0 * f64::EPSILON * 8.0;
    let passed = path_err <= tol && target_err <= tol && loss_err <= tol && full_err <= tol;
    verdict(
        2,
        "reductions",
        passed,
        format!(
            "omega=0: path {path_err:.1e}, target {target_err:.1e}, loss {loss_err:.1e}; omega=1: path vs A {full_err:.1e} (tol {tol:.1e})"
        ),
    )
}

// ---------------------------------------------------------------- 3-5

struct Nets {
    vanilla: Policy,
    legato: Policy,
}

fn task() -> TaskSpec {
    TaskSpec::BimodalReach(ReachParams::default())
}

fn train_nets() -> (Nets, f64) {
    let start = Instant::now();
    let demos = task().generate(&mut ChaCha8Rng::seed_from_u64(7), N_DEMOS, HORIZON).unwrap();
    let cfg = |family| TrainConfig { family, steps: TRAIN_STEPS, seed: 1, ..TrainConfig::default() };
    let vanilla = train(&demos, &cfg(Family::Vanilla)).unwrap().policy;
    let legato = train(&demos, &cfg(Family::Legato)).unwrap().policy;
    (Nets { vanilla, legato }, start.elapsed().as_secs_f64())
}

fn rollouts(policy: &Policy, strategy: Strategy, d: usize, s: usize) -> Vec<(ExecutionTrace, MetricReport)> {
    let params = ScheduleParams::rtc(d, s, HORIZON).unwrap();
    (0..SEEDS)
        .map(|seed| {
            let cfg = ExecConfig::new(strategy, params.clone(), N_STEPS, MAX_STEPS.div_ceil(s), seed);
            let trace = run_episode_seeded(policy, &task(), &cfg).unwrap();
            let report = evaluate_trace(&trace, &MetricConfig::default()).unwrap();
            (trace, report)
        })
        .collect()
}

fn guided_drift(runs: &[(ExecutionTrace, MetricReport)]) -> Vec<Vec<f64>> {
    runs.iter()
        .map(|(t, _)| t.cycles.iter().filter(|c| c.index >= 1).flat_map(|c| c.drift.clone()).collect())
        .collect()
}

fn criterion_3(nets: &Nets, legato: &[(ExecutionTrace, MetricReport)]) -> Verdict {
    let oneshot = rollouts(&nets.vanilla, Strategy::Oneshot, 8, 30);
    // Per seed: mean over guided cycles of (final-step drift - step-0 drift).
    let growth: Vec<f64> = oneshot
        .iter()
        .map(|(t, _)| {
            let deltas: Vec<f64> = t
                .cycles
                .iter()
                .filter(|c| c.index >= 1)
                .map(|c| c.drift[N_STEPS] - c.drift[0])
                .collect();
            mean(&deltas)
        })
        .collect();
    let (wins, n) = paired(&growth, &vec![0.0; growth.len()], |a, b| a > b);
    let p = sign_test(wins, n);
    let m = mean(&growth);
    let sd = (growth.iter().map(|g| (g - m).powi(2)).sum::<f64>() / (growth.len() - 1) as f64).sqrt();
    let t_stat = m / (sd / (growth.len() as f64).sqrt());
    let legato_rows = guided_drift(legato);
    let exact = legato_rows.iter().flatten().all(|&x| x == 0.0);
    let count: usize = legato_rows.iter().map(|r| r.len()).sum();
    verdict(
        3,
        "one-shot drift",
        m > 0.0 && p < 0.05 && exact && count > 0,
        format!(
            "oneshot drift growth {m:.4} (t = {t_stat:.1}), {wins}/{n} seeds grow, sign p = {p:.1e}; legato prefix exact at {count} steps: {exact}"
        ),
    )
}

fn criterion_4(legato: &[(ExecutionTrace, MetricReport)], soft: &[(ExecutionTrace, MetricReport)]) -> Verdict {
    let rmse = |runs: &[(ExecutionTrace, MetricReport)]| -> Vec<f64> {
        runs.iter().map(|(_, r)| r.overlap_rmse.expect("guided cycles")).collect()
    };
    let switches = |runs: &[(ExecutionTrace, MetricReport)]| -> Vec<f64> {
        runs.iter().map(|(_, r)| r.mode_switches as f64).collect()
    };
    let proxy = |runs: &[(ExecutionTrace, MetricReport)]| -> Vec<f64> {
        runs.iter().map(|(t, r)| completion_proxy(t, r) as f64).collect()
    };
    let (rl, rs) = (rmse(legato), rmse(soft));
    let reduction = 1.0 - mean(&rl) / mean(&rs);
    let (rw, rn) = paired(&rl, &rs, |a, b| a < b);
    let rp = sign_test(rw, rn);
    let a_ok = reduction >= 0.20 && rp < 0.05;

    let (sl, ss) = (switches(legato), switches(soft));
    let (sw, sn) = paired(&sl, &ss, |a, b| a < b);
    let sp = sign_test(sw, sn);
    let b_ok = 3 * sw >= 2 * sl.len() && sp < 0.05;

    let (cl, cs) = (proxy(legato), proxy(soft));
    let c_ok = mean(&cl) <= mean(&cs);
    let (cw, cn) = paired(&cl, &cs, |a, b| a < b);

    verdict(
        4,
        "directional comparison at (8, 30, 22)",
        a_ok && b_ok && c_ok,
        format!(
            "(a) {}: RMSE x1e3 legato {:.3} vs rtc_soft {:.3}, {:.0}% lower, {rw}/{rn} seeds, p = {rp:.1e}; \
             (b) {}: switches legato {:.2} vs rtc_soft {:.2}, fewer in {sw}/{} seeds (ties {}), p = {sp:.2}; \
             (c) {}: completion proxy legato {:.1} vs rtc_soft {:.1} steps, legato faster in {cw}/{cn} seeds",
            pass(a_ok),
            1e3 * mean(&rl),
            1e3 * mean(&rs),
            100.0 * reduction,
            pass(b_ok),
            mean(&sl),
            mean(&ss),
            sl.len(),
            sl.len() - sn,
            pass(c_ok),
            mean(&cl),
            mean(&cs),
        ),
    )
}

fn criterion_5(by_stride: &[(usize, Vec<(ExecutionTrace, MetricReport)>)]) -> Verdict {
    let means: Vec<(usize, f64)> = by_stride
        .iter()
        .map(|(s, runs)| (*s, mean(&runs.iter().map(|(_, r)| r.overlap_rmse.unwrap()).collect::<Vec<_>>())))
        .collect();
    let monotone = means.windows(2).all(|w| w[1].1 <= w[0].1);
    let text: Vec<String> = means
        .iter()
        .map(|(s, m)| format!("s={s} r={} {:.3}", HORIZON - 8 - s, 1e3 * m))
        .collect();
    verdict(
        5,
        "schedule ablation trend",
        monotone && means.len() >= 3,
        format!("legato RMSE x1e3 at d=8: {}", text.join(", ")),
    )
}

// ---------------------------------------------------------------- 6

/// Independent overlap RMSE: plain loops, no shared helpers.
fn brute_rmse(segments: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) -> f64 {
    let mut total = 0.0;
    for (a, b) in segments {
        let mut sq = 0.0;
        for i in 0..a.len() {
            for j in 0..a[i].len() {
                sq += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
            }
        }
        total += (sq / a.len() as f64).sqrt();
    }
    total / segments.len() as f64
}

fn smooth_stream(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let amp: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|i| {
            let tau = i as f64 / (n - 1) as f64;
            let base = 10.0 * tau.powi(3) - 15.0 * tau.powi(4) + 6.0 * tau.powi(5);
            base + 0.05 * (amp[0] * (3.0 * tau).sin() + amp[1] * (7.0 * tau).sin() + amp[2] * tau * tau)
        })
        .collect()
}

fn stream(cols: &[Vec<f64>]) -> CommandStream {
    let n = cols[0].len();
    let flat: Vec<f64> = (0..n).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    CommandStream::from_positions(Chunk::from_vec(n, cols.len(), flat).unwrap(), 1.0 / 30.0).unwrap()
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut rmse_err: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let mut segs = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..k {
            let (rows, dim) = (rng.random_range(1..=12), rng.random_range(1..=4));
            let a: Vec<Vec<f64>> = (0..rows).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..rows).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            segs.push(OverlapSegment {
                reference: Chunk::from_rows(&a).unwrap(),
                generated: Chunk::from_rows(&b).unwrap(),
            });
            raw.push((a, b));
        }
        let got = overlap_rmse(&segs).unwrap().unwrap();
        rmse_err = rmse_err.max((got - brute_rmse(&raw)).abs());
    }

    let params = SparcParams::default();
    let (mut scale_err, mut rev_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(60..240);
        let cols = vec![smooth_stream(&mut rng, n), smooth_stream(&mut rng, n)];
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<Vec<f64>> = cols.iter().map(|col| col.iter().map(|x| c * x).collect()).collect();
        scale_err = scale_err.max(rel(nsparc(&stream(&cols), &params).unwrap(), nsparc(&stream(&scaled), &params).unwrap()));
        let reversed: Vec<Vec<f64>> = cols.iter().map(|col| col.iter().rev().copied().collect()).collect();
        rev_err = rev_err.max(rel(nldlj(&stream(&cols), &[]).unwrap(), nldlj(&stream(&reversed), &[]).unwrap()));
    }

    let base = smooth_stream(&mut rng, 150);
    let mut bumped = base.clone();
    for (i, x) in bumped.iter_mut().enumerate().skip(70).take(5) {
        *x += 0.02 * ((i - 70) as f64 * std::f64::consts::PI / 4.0).sin();
    }
    let (smooth, pulsed) = (nldlj(&stream(&[base]), &[]).unwrap(), nldlj(&stream(&[bumped]), &[]).unwrap());

    let passed = rmse_err <= 1e-12 && scale_err <= 1e-9 && rev_err <= 1e-9 && pulsed > smooth;
    verdict(
        6,
        "metric oracles",
        passed,
        format!(
            "RMSE vs brute force {rmse_err:.1e}; NSPARC scale {scale_err:.1e}; NLDLJ reversal {rev_err:.1e}; jerk pulse {smooth:.3} -> {pulsed:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let sizes = TrainConfig::default().architecture(HORIZON, 2, 2).layer_sizes();
    let mut net = Mlp::new(&sizes, Activation::Tanh, &mut rng).unwrap();
    let base = net.params_flat();
    let indices: Vec<usize> = (0..50).map(|_| rng.random_range(0..base.len())).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Array2::from_shape_fn((1, sizes[0]), |_| rng.sample(StandardNormal));
        let y = Array2::from_shape_fn((1, *sizes.last().unwrap()), |_| rng.sample(StandardNormal));
        // Loss computed here: mean squared error over outputs.
        let loss = |net: &Mlp| -> f64 {
            let p = net.forward_batch(x.view()).unwrap();
            p.iter().zip(y.iter()).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / y.len() as f64
        };
        net.set_params_flat(&base).unwrap();
        let cache = net.forward_cached(x.view()).unwrap();
        let (_, d_out) = masked_mse(cache.prediction(), &y, &Array2::ones(y.raw_dim()));
        let analytic = net.backward(&cache, &d_out).to_flat();
        for &i in &indices {
            let mut p = base.clone();
            p[i] = base[i] + h;
            net.set_params_flat(&p).unwrap();
            let plus = loss(&net);
            p[i] = base[i] - h;
            net.set_params_flat(&p).unwrap();
            let minus = loss(&net);
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    verdict(
        7,
        "gradient check",
        worst < 1e-4,
        format!("50 params x 10 inputs, h = 1e-5, max rel err {worst:.2e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------- 8

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: RunConfig = toml::from_str(
        r#"
        seeds = [0, 1, 2, 3]
        [data]
        n_demos = 500
        [train]
        steps = 100
        [rollout]
        schedules = [{ d = 8, s = 30 }, { d = 8, s = 10 }]
        "#,
    )
    .unwrap();
    cfg.out = dir.path().to_path_buf();
    cmd_sweep(&cfg, RunOptions { force: false, workers: Some(1) }).unwrap();
    let first = snapshot(dir.path());
    cmd_sweep(&cfg, RunOptions { force: true, workers: Some(4) }).unwrap();
    let second = snapshot(dir.path());
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let kinds = |ext: &str| first.keys().filter(|k| k.extension().is_some_and(|e| e == ext)).count();
    verdict(
        8,
        "determinism",
        differing.is_empty() && !first.is_empty(),
        format!(
            "{} files ({} json, {} csv) byte-identical across reruns with 1 and 4 workers; differing: {:?}",
            first.len(),
            kinds("json"),
            kinds("csv"),
            differing
        ),
    )
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() {
    let start = Instant::now();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_6(), criterion_7(), criterion_8()];

    let (nets, train_secs) = train_nets();
    let legato: Vec<_> = [30usize, 20, 10].iter().map(|&s| (s, rollouts(&nets.legato, Strategy::Legato, 8, s))).collect();
    let soft = rollouts(&nets.vanilla, Strategy::RtcSoft, 8, 30);
    verdicts.push(criterion_3(&nets, &legato[0].1));
    verdicts.push(criterion_4(&legato[0].1, &soft));
    verdicts.push(criterion_5(&legato));

    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!("{} {}. {}: {}", pass(v.passed), v.id, v.title, v.detail);
    }
    let passed = verdicts.iter().filter(|v| v.passed).count();
    println!(
        "acceptance: {passed}/{} criteria passed (training {train_secs:.0}s, total {:.0}s)",
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if passed < verdicts.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

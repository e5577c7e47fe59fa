//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero on any unexpected result.

use std::collections::BTreeMap;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use madmm_core::admm::{conventional_admm_run, run, InitialPrimal, Mechanism, PenaltySchedule, RunOptions};
use madmm_core::analysis::{
    attack_reconstruct, contraction_certificate, delta_lower_bound, hidden_sample_term, AttackerKnowledge, RateInputs,
};
use madmm_core::data::{partition, preprocess, synthetic, write_dataset, PartitionMode, RawTable, ReferenceComparison, Schema};
use madmm_core::graph::Network;
use madmm_core::model::{centralized_solve, ErmConfig};
use madmm_core::privacy::{privacy_bound, sample_penalty_noise, NoiseSchedule};
use madmm_core::rng::{stream, Purpose};
use madmm_core::solver::SolverSettings;
use madmm_core::{DVector, Error};
use madmm_harness::{average_loss, run_experiment, ExperimentConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn tight() -> SolverSettings {
    SolverSettings { tol: 1e-12, ..Default::default() }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (e < limit, format!("{:.2}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn admm_equivalence() -> Outcome {
    let start = Instant::now();
    let net = Network::erdos_renyi(4, 0.5, 21).unwrap();
    let data = synthetic(4, 3, &[20; 4], 21, 1.0).unwrap();
    let cfg = ErmConfig::logistic(1.0, 0.5, 4);
    let conv = conventional_admm_run(&net, &data, &cfg, 0.5, 50, &InitialPrimal::StandardNormal, 21, &tight()).unwrap();
    let mut opts = RunOptions::non_private(50, 21);
    opts.solver = tight();
    let simple = run(&net, &data, &cfg, &PenaltySchedule::constant(4, 0.5), &opts).unwrap();
    let mut worst = 0.0f64;
    for t in 0..=50 {
        for i in 0..4 {
            worst = worst.max((conv.trace.primal(t, i) - simple.primal(t, i)).amax());
        }
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    outcome(worst <= 1e-10 && fast, format!("max |diff| = {worst:.3e}, {time}"))
}

fn growing_penalty_convergence() -> Outcome {
    let start = Instant::now();
    let net = Network::ring_with_chord(5).unwrap();
    let all = synthetic(1, 5, &[500], 11, 1.0).unwrap().remove(0);
    let data = partition(&all, 5, PartitionMode::Even, 11).unwrap();
    let cfg = ErmConfig::logistic(1.0, 1.0, 5);
    let schedule =
        PenaltySchedule::new(vec![0.55, 0.65, 0.6, 0.55, 0.6], vec![1.01, 1.03, 1.1, 1.2, 1.02], 0.5).unwrap();
    let trace = run(&net, &data, &cfg, &schedule, &RunOptions::non_private(500, 11)).unwrap();
    let fc = centralized_solve(&data, &cfg, 1e-10).unwrap();
    let residual = trace.consensus_residual(500);
    let dist = (0..5).map(|i| (trace.primal(500, i) - &fc).norm()).fold(0.0, f64::max);
    let (fast, time) = within(Duration::from_secs(60), start);
    outcome(
        residual <= 1e-4 && dist <= 1e-3 && fast,
        format!("consensus residual {residual:.3e}, max ||f_i - f_c*|| = {dist:.3e}, {time}"),
    )
}

fn slower_with_growing_penalty() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=4u64 {
        let net = Network::ring_with_chord(5).unwrap();
        let all = synthetic(1, 5, &[500], seed, 1.0).unwrap().remove(0);
        let data = partition(&all, 5, PartitionMode::Even, seed).unwrap();
        let rho = if seed <= 2 { 1.0 } else { 0.1 };
        let cfg = ErmConfig::logistic(1.0, rho, 5);
        let fc = centralized_solve(&data, &cfg, 1e-10).unwrap();
        let at_fc = RunOptions { init: InitialPrimal::Given(vec![fc.clone(); 5]), ..RunOptions::non_private(0, seed) };
        let fc_trace = run(&net, &data, &cfg, &PenaltySchedule::constant(5, 0.5), &at_fc).unwrap();
        let target = average_loss(&fc_trace, 0, &data).unwrap() + 0.01;
        let mut hits = Vec::new();
        for q in [1.0, 1.05, 1.1] {
            let trace = run(&net, &data, &cfg, &PenaltySchedule::shared(5, 0.5, q, 0.5), &RunOptions::non_private(500, seed)).unwrap();
            let hit = (0..=500).find(|&t| average_loss(&trace, t, &data).unwrap() <= target);
            hits.push(hit.unwrap_or(usize::MAX));
        }
        pass &= hits[0] != usize::MAX && hits.windows(2).all(|w| w[0] <= w[1]);
        let shown: Vec<String> =
            hits.iter().map(|&h| if h == usize::MAX { "never".into() } else { h.to_string() }).collect();
        lines.push(format!("seed {seed}: [{}]", shown.join(", ")));
    }
    outcome(pass, format!("iterations for q1 = 1.0/1.05/1.1 within T=500: {}", lines.join("; ")))
}

/// `max_i sum_t C (1.4 c1 + alpha_i(t)) / (eta_i(t) V_i B_i)`, term by term.
fn accountant_reference(
    eta: impl Fn(usize, usize) -> f64,
    alpha: impl Fn(usize, usize) -> f64,
    degrees: &[usize],
    sizes: &[usize],
    c: f64,
    horizon: usize,
) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..degrees.len() {
        let mut s = 0.0;
        for t in 1..=horizon {
            s += c * (1.4 * 0.25 + alpha(i, t)) / (eta(i, t) * (degrees[i] * sizes[i]) as f64);
        }
        best = best.max(s);
    }
    best
}

fn accountant_exactness() -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |got: f64, expect: f64| worst = worst.max((got - expect).abs());

    let net = Network::path(2).unwrap();
    let g = privacy_bound(&PenaltySchedule::constant(2, 1.0), &NoiseSchedule::shared(2, 1.0, 1.0), &ErmConfig::logistic(1.0, 0.1, 2), &net, &[1, 1], 1).unwrap();
    check(g.beta, 1.35);
    let single = g.beta;

    // Node 0: 3 * 2.35 / (0.5 * 1 * 10) = 1.41.
    let net = Network::path(3).unwrap();
    let g = privacy_bound(&PenaltySchedule::constant(3, 0.5), &NoiseSchedule::shared(3, 2.0, 1.0), &ErmConfig::logistic(1.0, 0.1, 3), &net, &[10, 20, 10], 3).unwrap();
    check(g.beta, 1.41);

    // 2 * 1.35 * (1 + 1/2 + 1/4 + 1/8) = 5.0625.
    let net = Network::path(2).unwrap();
    let g = privacy_bound(&PenaltySchedule::shared(2, 1.0, 2.0, 1.0), &NoiseSchedule::shared(2, 1.0, 1.0), &ErmConfig::logistic(2.0, 0.1, 2), &net, &[1, 1], 4).unwrap();
    check(g.beta, 5.0625);

    // Node 0 of K3: (3 * 0.35 + 3 (1 + 1.5 + 2.25)) / 2 = 7.65.
    let net = Network::complete(3).unwrap();
    let g = privacy_bound(&PenaltySchedule::constant(3, 1.0), &NoiseSchedule::shared(3, 3.0, 1.5), &ErmConfig::logistic(1.0, 0.1, 3), &net, &[1, 2, 4], 3).unwrap();
    check(g.beta, 7.65);

    let net = Network::ring_with_chord(5).unwrap();
    let eta1 = [0.55, 0.65, 0.6, 0.55, 0.6];
    let q = [1.01, 1.03, 1.1, 1.2, 1.02];
    let alpha1 = [3.0, 4.0, 3.0, 5.0, 2.0];
    let qa = [1.1, 1.0, 1.05, 1.2, 1.0];
    let sizes = [120, 80, 100, 60, 140];
    let g = privacy_bound(
        &PenaltySchedule::new(eta1.to_vec(), q.to_vec(), 0.5).unwrap(),
        &NoiseSchedule::new(alpha1.to_vec(), qa.to_vec()).unwrap(),
        &ErmConfig::logistic(2.0, 0.1, 5),
        &net,
        &sizes,
        30,
    )
    .unwrap();
    let expect = accountant_reference(
        |i, t| eta1[i] * f64::powi(q[i], t as i32 - 1),
        |i, t| alpha1[i] * f64::powi(qa[i], t as i32 - 1),
        &net.degrees(),
        &sizes,
        2.0,
        30,
    );
    check(g.beta, expect);
    outcome(worst <= 1e-12, format!("5 configs, max |error| = {worst:.3e}, single-term case = {single}"))
}

fn pp_dvp_equivalence() -> Outcome {
    let net = Network::ring_with_chord(5).unwrap();
    let data = synthetic(5, 3, &[30; 5], 6, 1.0).unwrap();
    let cfg = ErmConfig::logistic(1.0, 0.5, 5);
    let schedule = PenaltySchedule::constant(5, 0.5);
    let noise = NoiseSchedule::shared(5, 3.0, 1.0);
    let go = |m| {
        let mut opts = RunOptions::private(m, noise.clone(), 100, 6);
        opts.solver = tight();
        run(&net, &data, &cfg, &schedule, &opts).unwrap()
    };
    let (pp, dvp) = (go(Mechanism::Pp), go(Mechanism::Dvp));
    let mut worst = 0.0f64;
    let mut same_noise = true;
    for t in 0..=100 {
        for i in 0..5 {
            worst = worst.max((pp.primal(t, i) - dvp.primal(t, i)).amax());
            same_noise &= pp.snapshots[t].noise[i] == dvp.snapshots[t].noise[i];
        }
    }
    outcome(worst <= 1e-10 && same_noise, format!("max |diff| = {worst:.3e} over 100 iterations, identical draws: {same_noise}"))
}

fn privacy_ordering() -> Outcome {
    let net = Network::ring_with_chord(5).unwrap();
    let cfg = ErmConfig::logistic(1.0, 0.1, 5);
    let sizes = [100; 5];
    let mut pass = true;
    let mut tightest = f64::INFINITY;
    for q2 in [1.0, 1.03] {
        let noise = NoiseSchedule::shared(5, 3.0, q2);
        let dvp = privacy_bound(&PenaltySchedule::constant(5, 0.5), &noise, &cfg, &net, &sizes, 100).unwrap();
        for q1 in [1.01, 1.05, 1.1] {
            let pp = privacy_bound(&PenaltySchedule::shared(5, 0.5, q1, 0.5), &noise, &cfg, &net, &sizes, 100).unwrap();
            for t in 2..=100 {
                pass &= pp.prefix(t) < dvp.prefix(t);
                tightest = tightest.min(dvp.prefix(t) - pp.prefix(t));
            }
        }
    }
    outcome(pass, format!("6 schedule pairs, t = 2..100, smallest gap {tightest:.3e}"))
}

fn noise_law() -> Outcome {
    let start = Instant::now();
    let (d, alpha, n) = (5, 3.0, 100_000);
    let mut rng = stream(2024, Purpose::Noise, 0, 0);
    let mut norm_sum = 0.0;
    let mut direction = DVector::<f64>::zeros(d);
    for _ in 0..n {
        let e = sample_penalty_noise(alpha, d, &mut rng).unwrap();
        let r = e.norm();
        norm_sum += r;
        direction += e / r;
    }
    let mean_norm = norm_sum / n as f64;
    let rel = (mean_norm - d as f64 / alpha).abs() / (d as f64 / alpha);
    let dir = (direction / n as f64).norm();
    let (fast, time) = within(Duration::from_secs(10), start);
    outcome(
        rel <= 0.02 && dir <= 0.02 && fast,
        format!("mean norm {mean_norm:.5} (rel. error {rel:.2e}), mean direction norm {dir:.2e}, {time}"),
    )
}

fn contraction_certificate_holds() -> Outcome {
    let k2 = delta_lower_bound(&RateInputs::new(&Network::complete(2).unwrap(), 0.5, vec![0.5, 0.5], 0.1, 0.35, 2.0)).unwrap();

    let net = Network::complete(3).unwrap();
    let data = synthetic(3, 3, &[30; 3], 5, 1.0).unwrap();
    let cfg = ErmConfig::logistic(1.0, 0.03, 3);
    let fstar = centralized_solve(&data, &cfg, 1e-13).unwrap();
    let schedule = PenaltySchedule::constant(3, 0.5);
    let mut opts = RunOptions::non_private(200, 3);
    opts.solver = tight();
    let trace = run(&net, &data, &cfg, &schedule, &opts).unwrap();
    let rows = contraction_certificate(&trace, &fstar, &net, &data, &cfg, &schedule, 2.0).unwrap();
    let held = rows.iter().filter(|r| r.holds).count();
    let worst = rows.iter().map(|r| r.lhs / r.rhs).fold(0.0, f64::max);
    outcome(
        held == 200 && rows.len() == 200 && (k2 - 0.1342).abs() <= 1e-4 && (k2 - 0.2 / 1.49).abs() <= 1e-6,
        format!("{held}/200 steps hold (worst lhs/rhs {worst:.4}), K2 delta = {k2:.6}"),
    )
}

fn attack_demo() -> Outcome {
    let net = Network::path(2).unwrap();
    let data = synthetic(2, 5, &[2, 20], 9, 1.0).unwrap();
    let cfg = ErmConfig::logistic(1.0, 0.1, 2);
    let eta = 0.2;
    let schedule = PenaltySchedule::constant(2, eta);
    let (x1, y1) = data[0].sample(0);
    let knowledge = |t: usize, reveal: bool| AttackerKnowledge {
        known: data[0].select(&[1]),
        theta: eta,
        penalties: reveal.then(|| vec![eta; t]),
    };
    let go = |alpha: f64, t: usize| {
        let mut opts = RunOptions::private(Mechanism::Pp, NoiseSchedule::shared(2, alpha, 1.0), t, 4);
        opts.solver = tight();
        run(&net, &data, &cfg, &schedule, &opts).unwrap()
    };

    let clean = go(f64::INFINITY, 200);
    let report = attack_reconstruct(&clean, 0, &knowledge(200, true), &net, &cfg).unwrap();
    let identity = report
        .terms
        .iter()
        .map(|term| (&term.rhs - hidden_sample_term(clean.primal(term.t, 0), &x1, y1, eta, 1, 2, &cfg)).amax())
        .fold(0.0, f64::max);

    let noisy = go(3.0, 2000);
    let cos = attack_reconstruct(&noisy, 0, &knowledge(2000, true), &net, &cfg).unwrap().abs_cosine(&(&x1 * y1));
    let blocked = matches!(attack_reconstruct(&noisy, 0, &knowledge(2000, false), &net, &cfg), Err(Error::UnknownSchedule));
    outcome(
        identity <= 1e-8 && cos >= 0.95 && blocked,
        format!("zero-noise identity error {identity:.2e}, noisy |cos| = {cos:.4}, withheld schedule -> UnknownSchedule: {blocked}"),
    )
}

fn pipeline() -> Outcome {
    let dir = fixtures();
    let schema = Schema::from_json(&std::fs::read_to_string(dir.join("toy_schema.json")).unwrap()).unwrap();
    let toy = preprocess(&RawTable::from_path(schema, &dir.join("toy_adult.csv")).unwrap()).unwrap();
    let x = toy.dataset.features();
    let col_ok = x.column_iter().all(|c| c.max() <= 1.0 + 1e-12);
    let row_ok = x.row_iter().all(|r| r.norm() <= 1.0 + 1e-12);
    let labels_ok = toy.dataset.labels().iter().all(|&y| y == 1.0 || y == -1.0);

    let schema = Schema::from_json(&std::fs::read_to_string(dir.join("hand_schema.json")).unwrap()).unwrap();
    let hand = preprocess(&RawTable::from_path(schema, &dir.join("hand_rows.csv")).unwrap()).unwrap();
    let mut buf = Vec::new();
    write_dataset(&hand.dataset, &mut buf).unwrap();
    let exact = buf == std::fs::read(dir.join("hand_expected.csv")).unwrap();

    let mut detail = format!(
        "toy table {} rows ({} dropped), d = {}, bounds ok: {}, hand fixture exact: {exact}",
        toy.dataset.len(),
        toy.dropped_rows,
        toy.dataset.dim(),
        col_ok && row_ok && labels_ok
    );
    if let Some(adult) = adult_file() {
        let schema = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/adult_schema.json");
        let schema = Schema::from_json(&std::fs::read_to_string(schema).unwrap()).unwrap();
        match RawTable::from_path(schema, &adult).and_then(|raw| preprocess(&raw)) {
            Ok(out) => {
                let cmp = ReferenceComparison::new(&out);
                let dev = cmp.deviations();
                detail += &format!("; Adult: {} x {} ({})", cmp.samples, cmp.dim, if dev.is_empty() { "matches reference".into() } else { dev.join("; ") });
            }
            Err(e) => detail += &format!("; Adult file unreadable: {e}"),
        }
    }
    outcome(col_ok && row_ok && labels_ok && exact, detail)
}

fn adult_file() -> Option<PathBuf> {
    let path = std::env::var_os("MADMM_ADULT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/adult.csv"));
    path.exists().then_some(path)
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let text = r#"{
        "network": {"kind": "ring_with_chord", "nodes": 5},
        "data": {"source": "synthetic", "dim": 4, "samples": 200, "separation": 1.0, "partition": "uneven"},
        "erm": {"c": 1.0, "rho": 0.5},
        "penalty": {"eta1": [0.55, 0.65, 0.6, 0.55, 0.6], "q": [1.01, 1.03, 1.1, 1.2, 1.02], "theta": 0.5},
        "noise": {"alpha1": 3.0, "q": 1.02},
        "mechanism": "pp",
        "horizon": 40,
        "n_runs": 6,
        "seed": 17
    }"#;
    let mut dirs = Vec::new();
    let mut trees = Vec::new();
    for threads in [1, 4, 4] {
        let mut cfg = ExperimentConfig::from_json(text, Path::new(".")).unwrap();
        cfg.threads = Some(threads);
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&cfg, dir.path()).unwrap();
        trees.push(read_tree(dir.path()));
        dirs.push(dir);
    }
    let csvs = trees[0].keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let identical = trees.windows(2).all(|w| w[0] == w[1]);
    outcome(identical && csvs >= 15, format!("{} files ({csvs} CSV) identical across 1, 4, 4 threads: {identical}", trees[0].len()))
}

type Criterion = (u32, &'static str, fn() -> Outcome, Option<&'static str>);

const CRITERIA: [Criterion; 11] = [
    (1, "ADMM equivalence", admm_equivalence, None),
    (2, "convergence under growing penalties", growing_penalty_convergence, Some(
        "known limitation: iterates reach consensus but stop at a biased point because sum_t 1/eta_i(t) is finite for q > 1",
    )),
    (3, "increasing penalty slows convergence", slower_with_growing_penalty, None),
    (4, "accountant exactness", accountant_exactness, None),
    (5, "PP reduces to DVP at eta = theta", pp_dvp_equivalence, None),
    (6, "privacy ordering PP < DVP", privacy_ordering, None),
    (7, "noise law", noise_law, None),
    (8, "contraction certificate", contraction_certificate_holds, None),
    (9, "reconstruction attack", attack_demo, None),
    (10, "preprocessing pipeline", pipeline, None),
    (11, "determinism", determinism, None),
];

fn main() -> ExitCode {
    let mut unexpected = 0;
    for (id, name, check, known) in CRITERIA {
        let result = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = if result.pass { "PASS" } else { "FAIL" };
        match (result.pass, known) {
            (false, Some(why)) => println!("{status} criterion {id:>2} ({name}): {} [expected, {why}]", result.detail),
            (true, Some(_)) => {
                unexpected += 1;
                println!("{status} criterion {id:>2} ({name}): {} [unexpected pass of a known failure]", result.detail);
            }
            (pass, None) => {
                unexpected += usize::from(!pass);
                println!("{status} criterion {id:>2} ({name}): {}", result.detail);
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{unexpected} unexpected result(s)");
        ExitCode::FAILURE
    }
}

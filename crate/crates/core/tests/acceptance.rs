//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use natmo::harness::{
    load_traces, run_matrix, summarize, ExperimentConfig, Overrides, RunStatus, RunTrace, PARTIAL_EXT,
};
use natmo::oracles::{self, regularizer_limit_gaps, random_gram_pair};

const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
const MAX_ITERS: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn matrix(problem: &str, methods: &[&str]) -> Vec<RunTrace> {
    let cfg = ExperimentConfig {
        problem: problem.into(),
        methods: methods.iter().map(|m| m.to_string()).collect(),
        seeds: SEEDS.to_vec(),
        overrides: Overrides {
            max_iters: Some(MAX_ITERS),
            ..Overrides::default()
        },
        data_seed: 0,
    };
    run_matrix(&cfg, None).expect("matrix runs")
}

fn median_iters(traces: &[RunTrace], method: &str) -> f64 {
    summarize(traces, MAX_ITERS)
        .get(method)
        .unwrap_or_else(|| panic!("no runs for {method}"))
        .median_iterations()
}

fn converged<'a>(traces: &'a [RunTrace], method: &'a str) -> impl Iterator<Item = &'a RunTrace> + 'a {
    traces
        .iter()
        .filter(move |t| t.method == method && t.status == Some(RunStatus::Converged))
}

/// Median over converged seeds only.
fn median_converged(traces: &[RunTrace], method: &str) -> f64 {
    let v: Vec<f64> = converged(traces, method).map(|t| t.last().unwrap().iter as f64).collect();
    natmo::harness::median(&v)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let reports = oracles::run_all().expect("oracles run");
    let elapsed = start.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    for r in &reports {
        println!("    {r}");
    }
    outcome(
        failed.is_empty() && elapsed <= Duration::from_secs(60),
        format!("{} oracles, failed {:?}, {:.2}s (limit 60s)", reports.len(), failed, elapsed.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let t = matrix("mackey_glass", &["NGD", "NHB", "NHB-FD", "QNHB"]);
    let ngd = median_iters(&t, "NGD");
    let r = |m: &str| median_iters(&t, m) / ngd;
    let (nhb, fd, q) = (r("NHB"), r("NHB-FD"), r("QNHB"));
    outcome(
        nhb <= 0.7 && fd <= 0.9 && q <= 0.9,
        format!("median NGD {ngd}; NHB/NGD {nhb:.3} (<= 0.7), NHB-FD/NGD {fd:.3} (<= 0.9), QNHB/NGD {q:.3} (<= 0.9)"),
    )
}

fn criterion_3() -> Outcome {
    let r = oracles::one_step_linear_check().expect("oracle runs");
    let worst = r.checks.iter().map(|c| c.value).fold(0.0, f64::max);
    outcome(r.pass, format!("max function-space error {worst:.3e} (<= 1e-8)"))
}

/// Shared structure of the two PDE criteria.
fn pde_criterion(problem: &str, extra: &[&str]) -> (Outcome, Vec<RunTrace>) {
    let mut methods = vec!["NGD", "NHB"];
    methods.extend_from_slice(extra);
    let t = matrix(problem, &methods);
    let ngd_ok = converged(&t, "NGD").count();
    let ratio = median_converged(&t, "NHB") / median_converged(&t, "NGD");
    let test_mse = ["NGD", "NHB"]
        .iter()
        .flat_map(|m| converged(&t, m))
        .map(|t| t.last().unwrap().test_metric)
        .fold(0.0, f64::max);
    let pass = ngd_ok >= 7 && ratio <= 0.8 && test_mse <= 1e-6;
    (
        outcome(
            pass,
            format!("NGD converged {ngd_ok}/10 (>= 7); NHB/NGD median {ratio:.3} (<= 0.8); max test MSE {test_mse:.2e} (<= 1e-6)"),
        ),
        t,
    )
}

fn criterion_4() -> Outcome {
    pde_criterion("advection_diffusion", &[]).0
}

fn criterion_5() -> Outcome {
    let (base, t) = pde_criterion("reaction_diffusion", &["NN-II@0.75"]);
    let alive = t
        .iter()
        .filter(|r| r.method == "NN-II@0.75" && r.status != Some(RunStatus::Diverged))
        .count();
    outcome(
        base.pass && alive >= 8,
        format!("{}; NN-II@0.75 not diverged {alive}/10 (>= 8)", base.detail),
    )
}

fn criterion_6() -> Outcome {
    let t = matrix("xor9", &["NGD", "GN-NGD", "GN-NHB"]);
    let ngd = median_iters(&t, "NGD");
    let gn = median_iters(&t, "GN-NGD");
    let gn_hb = median_iters(&t, "GN-NHB");
    outcome(
        gn <= 0.9 * ngd && gn_hb <= gn,
        format!("median NGD {ngd}, GN-NGD {gn} (ratio {:.3} <= 0.9), GN-NHB {gn_hb} (<= GN-NGD)", gn / ngd),
    )
}

fn write_config(dir: &Path, problem: &str, methods: &[&str], seeds: &[u64]) -> std::path::PathBuf {
    let cfg = ExperimentConfig {
        problem: problem.into(),
        methods: methods.iter().map(|m| m.to_string()).collect(),
        seeds: seeds.to_vec(),
        overrides: Overrides::default(),
        data_seed: 0,
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Starts a matrix in a child process, kills it once at least one run has
/// finished and another is in flight, then checks every file left behind.
fn interrupted_matrix() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let config = write_config(dir.path(), "reaction_diffusion", &["NGD", "NN-II"], &[0, 1, 2, 3, 4, 5]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_natmo"))
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .env("NATMO_WORKERS", "1")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let count = |ext: &str| -> usize {
        fs::read_dir(&out)
            .map(|d| {
                d.filter_map(|e| e.ok())
                    .filter(|e| e.file_name().to_string_lossy().ends_with(ext) && !e.file_name().to_string_lossy().starts_with("summary"))
                    .count()
            })
            .unwrap_or(0)
    };
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        if count(".csv") >= 1 && count(PARTIAL_EXT) >= 1 {
            break;
        }
        if Instant::now() > deadline || child.try_wait().map_err(|e| e.to_string())?.is_some() {
            let _ = child.kill();
            return Err("matrix finished or stalled before it could be interrupted".into());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;

    let complete = load_traces(&out).map_err(|e| format!("complete trace failed to parse: {e}"))?;
    if complete.iter().any(|t| t.status.is_none()) {
        return Err("a complete trace lacks its status".into());
    }
    let mut partial = 0;
    for entry in fs::read_dir(&out).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.to_string_lossy().ends_with(PARTIAL_EXT) {
            let t = RunTrace::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if t.status.is_some() {
                return Err("partial trace carries a status".into());
            }
            partial += 1;
        }
    }
    Ok(format!("after kill: {} complete + {partial} partial traces all parse and validate", complete.len()))
}

fn criterion_7() -> Outcome {
    let cfg = ExperimentConfig {
        problem: "xor9".into(),
        methods: vec!["NHB-FD".into(), "GN-NN-I".into(), "QNN-II@0.5".into()],
        seeds: vec![3, 4],
        overrides: Overrides {
            max_iters: Some(60),
            ..Overrides::default()
        },
        data_seed: 2,
    };
    let a = run_matrix(&cfg, None).unwrap();
    let b = run_matrix(&cfg, None).unwrap();
    let mut reversed = cfg.clone();
    reversed.methods.reverse();
    reversed.seeds.reverse();
    let mut c = run_matrix(&reversed, None).unwrap();
    c.sort_by(|x, y| x.run_id.cmp(&y.run_id));
    let mut a_sorted = a.clone();
    a_sorted.sort_by(|x, y| x.run_id.cmp(&y.run_id));
    let same = a.iter().zip(&b).all(|(x, y)| x.numeric_columns() == y.numeric_columns() && x.status == y.status)
        && a_sorted.iter().zip(&c).all(|(x, y)| x.numeric_columns() == y.numeric_columns());
    let round_trip = a.iter().all(|t| RunTrace::from_csv(&t.to_csv()).is_ok_and(|back| &back == t));
    match interrupted_matrix() {
        Ok(msg) => outcome(
            same && round_trip,
            format!("reruns identical: {same}; CSV round trip: {round_trip}; {msg}"),
        ),
        Err(msg) => outcome(false, format!("reruns identical: {same}; {msg}")),
    }
}

fn criterion_8() -> Outcome {
    let mut far_worst: f64 = 0.0;
    let mut near_worst: f64 = 0.0;
    for seed in 0..5 {
        let (g, grad) = random_gram_pair(seed);
        let (far, near) = regularizer_limit_gaps(&g, &grad).unwrap();
        far_worst = far_worst.max(far);
        near_worst = near_worst.max(near);
    }
    outcome(
        far_worst <= 1e-3 && near_worst <= 1e-6,
        format!("shift at 1e6 lmax vs gradient {far_worst:.2e} (<= 1e-3); shift at 1e-12 lmax vs cutoff {near_worst:.2e} (<= 1e-6)"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle suite", criterion_1),
        ("Mackey-Glass momentum speedup", criterion_2),
        ("one-step linear convergence", criterion_3),
        ("advection-diffusion", criterion_4),
        ("reaction-diffusion", criterion_5),
        ("Gauss-Newton classification", criterion_6),
        ("determinism and trace integrity", criterion_7),
        ("regularizer limits", criterion_8),
    ];
    let mut all = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "{} criterion {} ({name}): {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed.
//!
//!     cargo test -p hsprobe-cli --test acceptance -- --nocapture

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hsprobe::grad::{backward, gradcheck_case};
use hsprobe::head::{forward, forward_sequence, AblationFlags, ForwardTrace, Pooling};
use hsprobe::report::{read_metrics_csv, AnalysisDump};
use hsprobe::toygen::GeneratorSpec;
use hsprobe::{HiddenStates, TaskKind, TrainConfig};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
    elapsed: Duration,
}

fn hsprobe<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_hsprobe")).args(args).output().expect("spawn hsprobe");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: started.elapsed(),
    }
}

fn ok(run: Run, what: &str) -> Run {
    assert_eq!(run.code, 0, "{what} failed\nstdout: {}\nstderr: {}", run.stdout, run.stderr);
    run
}

fn number(run: &Run) -> f64 {
    run.stdout.trim().parse().unwrap_or_else(|_| panic!("not a number: {:?}", run.stdout))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> PathBuf {
    fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

#[derive(Default)]
struct Verdicts {
    failed: Vec<String>,
}

impl Verdicts {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name.to_string());
        }
    }
}

fn gen(dir: &Path, name: &str, spec: &GeneratorSpec) -> PathBuf {
    let spec_path = write_json(&dir.join(format!("{name}.spec.json")), spec);
    let out = dir.join(name);
    ok(hsprobe(["gen".as_ref(), "--spec".as_ref(), spec_path.as_os_str(), "--out".as_ref(), out.as_os_str()]), "gen");
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permute_tokens(states: &HiddenStates, perm: &[usize]) -> HiddenStates {
    HiddenStates::from_fn(states.num_layers(), states.num_tokens(), states.dim(), |l, t, j| {
        states.get(l, perm[t], j) as f32
    })
    .unwrap()
}

fn permute_layers(states: &HiddenStates, perm: &[usize]) -> HiddenStates {
    HiddenStates::from_fn(states.num_layers(), states.num_tokens(), states.dim(), |l, t, j| {
        states.get(perm[l], t, j) as f32
    })
    .unwrap()
}

fn range_violation(trace: &ForwardTrace, flags: &AblationFlags) -> Option<String> {
    let l = trace.layer_weights.len() as f64;
    let s_sum: f64 = trace.layer_weights.iter().sum();
    if flags.use_v1 {
        if (s_sum - 1.0).abs() > 1e-9 || trace.layer_weights.iter().any(|&s| s <= 0.0) {
            return Some(format!("layer weights {:?}", trace.layer_weights));
        }
    } else if trace.layer_weights.iter().any(|&s| s != 1.0 / l) {
        return Some("ablated layer weights not uniform".into());
    }
    if flags.use_v2 {
        if trace.mask.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Some(format!("mask {:?}", trace.mask));
        }
    } else if trace.mask.iter().any(|&m| m != 1.0) {
        return Some("ablated mask not all ones".into());
    }
    let w_sum: f64 = trace.attention.iter().sum();
    if (w_sum - 1.0).abs() > 1e-9 || trace.attention.iter().any(|&w| w <= 0.0) {
        return Some(format!("attention {:?}", trace.attention));
    }
    None
}

/// Checks every invariance on one random instance; returns the first failure.
fn invariance_instance(trial: usize) -> Option<String> {
    let case = gradcheck_case(2024, trial).unwrap();
    let pooled = AblationFlags { pooling: Pooling::Attention, ..case.flags };
    let (states, params, flags) = (&case.states, &case.params, &pooled);
    let base = forward(states, params, flags).unwrap();
    if let Some(v) = range_violation(&base, flags) {
        return Some(format!("trial {trial}: {v}"));
    }

    let mut shifted = params.clone();
    for v in &mut shifted.layer_logits {
        *v += 3.7;
    }
    let s = forward(states, &shifted, flags).unwrap();
    let shift_err = [
        max_diff(&s.layer_weights, &base.layer_weights),
        max_diff(&s.mask, &base.mask),
        max_diff(&s.attention, &base.attention),
        max_diff(&s.pooled, &base.pooled),
        max_diff(&s.logits, &base.logits),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if shift_err > 1e-12 {
        return Some(format!("trial {trial}: v1 shift changed the trace by {shift_err:e}"));
    }

    let t = states.num_tokens();
    let perm: Vec<usize> = (0..t).map(|i| (i * 2 + 1) % t).collect::<Vec<_>>();
    let perm = if is_permutation(&perm) { perm } else { (0..t).rev().collect() };
    let p = forward(&permute_tokens(states, &perm), params, flags).unwrap();
    let w_perm: Vec<f64> = perm.iter().map(|&i| base.attention[i]).collect();
    let tok_err = max_diff(&p.attention, &w_perm).max(max_diff(&p.pooled, &base.pooled)).max(max_diff(&p.logits, &base.logits));
    if tok_err > 1e-12 {
        return Some(format!("trial {trial}: token permutation error {tok_err:e}"));
    }

    let layers = states.num_layers();
    let lperm: Vec<usize> = (0..layers).rev().collect();
    let mut lparams = params.clone();
    lparams.layer_logits = lperm.iter().map(|&i| params.layer_logits[i]).collect();
    let lp = forward(&permute_layers(states, &lperm), &lparams, flags).unwrap();
    let s_perm: Vec<f64> = lperm.iter().map(|&i| base.layer_weights[i]).collect();
    let layer_err = [
        max_diff(&lp.layer_weights, &s_perm),
        max_diff(&lp.mask, &base.mask),
        max_diff(&lp.attention, &base.attention),
        max_diff(&lp.pooled, &base.pooled),
        max_diff(&lp.logits, &base.logits),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if layer_err > 1e-12 {
        return Some(format!("trial {trial}: layer permutation error {layer_err:e}"));
    }

    // the case's own pooling mode matches its label kind
    let with_v1 = AblationFlags { use_v1: true, ..case.flags };
    let (_, g) = backward(states, params, &with_v1, &case.label).unwrap();
    let dot: f64 = g.layer_logits.iter().sum();
    if dot.abs() > 1e-10 {
        return Some(format!("trial {trial}: d_v1 . 1 = {dot:e}"));
    }
    None
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut v = Verdicts::default();

    // gradient correctness
    let run = hsprobe(["gradcheck", "--trials", "20", "--tol", "1e-4"]);
    v.record(
        "gradient check",
        run.code == 0 && run.elapsed < Duration::from_secs(10),
        format!("exit {} in {:.2}s, {}", run.code, run.elapsed.as_secs_f64(), run.stdout.trim()),
    );

    // parameter accounting
    let cases: [(&[&str], &str); 4] = [
        (&["--method", "ours", "--L", "24", "--d", "1024"], "2073"),
        (&["--method", "ours", "--L", "12", "--d", "768"], "1549"),
        (&["--method", "p_tuning", "--L", "12", "--K", "50", "--d", "768"], "38400"),
        (&["--method", "p_tuning_v2", "--L", "12", "--K", "50", "--d", "768"], "499200"),
    ];
    let got: Vec<String> = cases
        .iter()
        .map(|(args, _)| hsprobe(std::iter::once("params").chain(args.iter().copied())).stdout.trim().to_string())
        .collect();
    let want: Vec<&str> = cases.iter().map(|(_, w)| *w).collect();
    v.record("parameter accounting", got == want, format!("{got:?}"));

    // planted-signal recovery
    let spec = GeneratorSpec::default();
    let data = gen(dir, "planted", &spec);
    let config = TrainConfig { epochs: 200, learning_rate: 0.01, batch_size: 60, ..TrainConfig::default() };
    let config_path = write_json(&dir.join("config.json"), &config);
    let train_into = |out: &Path| {
        ok(
            hsprobe([
                "train".as_ref(),
                "--data".as_ref(),
                data.as_os_str(),
                "--config".as_ref(),
                config_path.as_os_str(),
                "--out".as_ref(),
                out.as_os_str(),
            ]),
            "train",
        )
    };
    let model = dir.join("model-a");
    let trained = train_into(&model);
    let eval = |model: &Path, data: &Path| {
        number(&ok(
            hsprobe(["eval".as_ref(), "--data".as_ref(), data.as_os_str(), "--model".as_ref(), model.as_os_str()]),
            "eval",
        ))
    };
    let source_acc = eval(&model, &data);
    let analysis = dir.join("analysis.json");
    ok(
        hsprobe([
            "inspect".as_ref(),
            "--model".as_ref(),
            model.as_os_str(),
            "--top-k".as_ref(),
            "4".as_ref(),
            "--out".as_ref(),
            analysis.as_os_str(),
        ]),
        "inspect",
    );
    let dump = AnalysisDump::from_json(&fs::read(&analysis).unwrap()).unwrap();
    let top_layer = (0..dump.layer_weights.len()).max_by(|&a, &b| dump.layer_weights[a].total_cmp(&dump.layer_weights[b])).unwrap();
    let planted_mask = spec.signal_dims.iter().map(|&j| dump.mask[j]).sum::<f64>() / spec.signal_dims.len() as f64;
    let rest: Vec<f64> = (0..spec.dim).filter(|j| !spec.signal_dims.contains(j)).map(|j| dump.mask[j]).collect();
    let rest_mask = rest.iter().sum::<f64>() / rest.len() as f64;
    v.record(
        "planted recovery",
        source_acc >= 0.95
            && top_layer == spec.signal_layer
            && planted_mask > rest_mask
            && trained.elapsed < Duration::from_secs(120),
        format!(
            "test acc {source_acc:.4}, argmax s = {top_layer} (planted {}), mask {planted_mask:.3} vs {rest_mask:.3}, {:.1}s",
            spec.signal_layer,
            trained.elapsed.as_secs_f64()
        ),
    );

    // ablation grid and the averaging baseline on the same data and config
    let csv = dir.join("grid.csv");
    let grid_run = ok(
        hsprobe([
            "ablate".as_ref(),
            "--data".as_ref(),
            data.as_os_str(),
            "--config".as_ref(),
            config_path.as_os_str(),
            "--out".as_ref(),
            csv.as_os_str(),
        ]),
        "ablate",
    );
    let rows = read_metrics_csv(fs::File::open(&csv).unwrap()).unwrap();
    let acc = |cell: &str| rows.iter().find(|r| r.cell == cell).and_then(|r| r.eval_accuracy).unwrap();
    let avg = acc("avg");
    v.record("baseline separation", avg <= 0.60, format!("avg baseline test acc {avg:.4}"));
    let (a00, a10, a11) = (acc("00"), acc("10"), acc("11"));
    let coverage = spec.signal_dims.len() as f64 / spec.dim as f64;
    v.record(
        "ablation trend",
        a11 >= a00 - 0.01 && coverage <= 0.25 && a11 >= a10 && grid_run.elapsed < Duration::from_secs(300),
        format!(
            "00 {a00:.4}, 01 {:.4}, 10 {a10:.4}, 11 {a11:.4} (planted dims {:.0}% of d), {:.1}s",
            acc("01"),
            coverage * 100.0,
            grid_run.elapsed.as_secs_f64()
        ),
    );

    // invariance suite
    let started = Instant::now();
    let broken: Vec<String> = (0..100).filter_map(invariance_instance).collect();
    let elapsed = started.elapsed();
    v.record(
        "invariance suite",
        broken.is_empty() && elapsed < Duration::from_secs(5),
        format!(
            "100 instances in {:.2}s{}",
            elapsed.as_secs_f64(),
            broken.first().map_or(String::new(), |b| format!(", first failure: {b}"))
        ),
    );

    // determinism
    let model_b = dir.join("model-b");
    train_into(&model_b);
    let mut differing = Vec::new();
    for file in ["model.json", "params.bin", "report.json"] {
        if fs::read(model.join(file)).unwrap() != fs::read(model_b.join(file)).unwrap() {
            differing.push(file);
        }
    }
    v.record(
        "determinism",
        differing.is_empty(),
        if differing.is_empty() { "snapshots and reports byte-identical".into() } else { format!("differ: {differing:?}") },
    );

    // few-shot and transfer
    let few = dir.join("model-few");
    ok(
        hsprobe([
            "fewshot".as_ref(),
            "--data".as_ref(),
            data.as_os_str(),
            "--config".as_ref(),
            config_path.as_os_str(),
            "--k".as_ref(),
            "64".as_ref(),
            "--out".as_ref(),
            few.as_os_str(),
        ]),
        "fewshot",
    );
    let few_acc = eval(&few, &data);
    let matched = gen(dir, "matched", &GeneratorSpec { seed: 99, ..spec.clone() });
    let mismatched = gen(dir, "mismatched", &GeneratorSpec { seed: 99, signal_dims: vec![8, 9, 10, 11], ..spec.clone() });
    let transfer = |target: &Path| {
        number(&ok(
            hsprobe([
                "transfer".as_ref(),
                "--source-model".as_ref(),
                model.as_os_str(),
                "--target".as_ref(),
                target.as_os_str(),
            ]),
            "transfer",
        ))
    };
    let (t_match, t_mismatch) = (transfer(&matched), transfer(&mismatched));
    v.record(
        "few-shot and transfer",
        few_acc >= 0.85 && (t_match - source_acc).abs() <= 0.05 && t_mismatch <= 0.60,
        format!(
            "k=64 acc {few_acc:.4}; transfer matched {t_match:.4} vs source {source_acc:.4}; mismatched dims {t_mismatch:.4}"
        ),
    );

    // sequence variant
    let seq_spec = GeneratorSpec {
        task_name: "planted-tags".into(),
        task_kind: TaskKind::Sequence,
        noise_std: 0.25,
        ..spec.clone()
    };
    let seq_data = gen(dir, "sequence", &seq_spec);
    let seq_config = TrainConfig {
        flags: AblationFlags { pooling: Pooling::None, ..AblationFlags::default() },
        ..config.clone()
    };
    let seq_config_path = write_json(&dir.join("seq-config.json"), &seq_config);
    let seq_model = dir.join("model-seq");
    ok(
        hsprobe([
            "train".as_ref(),
            "--data".as_ref(),
            seq_data.as_os_str(),
            "--config".as_ref(),
            seq_config_path.as_os_str(),
            "--out".as_ref(),
            seq_model.as_os_str(),
        ]),
        "train sequence",
    );
    let token_acc = eval(&seq_model, &seq_data);
    let t1_err = (0..100)
        .map(|trial| {
            let case = gradcheck_case(77, trial).unwrap();
            let one = HiddenStates::from_fn(case.states.num_layers(), 1, case.states.dim(), |l, _, j| {
                case.states.get(l, 0, j) as f32
            })
            .unwrap();
            let pooled = AblationFlags { pooling: Pooling::Attention, ..case.flags };
            let tagger = AblationFlags { pooling: Pooling::None, ..case.flags };
            let a = forward(&one, &case.params, &pooled).unwrap().logits;
            let b = forward_sequence(&one, &case.params, &tagger).unwrap().logits.remove(0);
            max_diff(&a, &b)
        })
        .fold(0.0, f64::max);
    v.record(
        "sequence variant",
        token_acc >= 0.95 && t1_err <= 1e-12,
        format!(
            "token acc {token_acc:.4} at mu/sigma = {}, T=1 max logit gap {t1_err:e}",
            seq_spec.signal_strength / seq_spec.noise_std
        ),
    );

    assert!(v.failed.is_empty(), "failed criteria: {:?}", v.failed);
}

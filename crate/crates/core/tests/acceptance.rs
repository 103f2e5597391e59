//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! desk-scale criteria (7, 8) train every model from scratch and take a
//! while; set `KDMIA_ACCEPTANCE_OUT` to keep the run directories.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{brute_force_calibration, enumerated_tail};
use kdmia::analysis::published::{self, architecture, selection, ABLATION_DIMS};
use kdmia::analysis::{binomial_pmf, relative_reduction, sign_test};
use kdmia::attacks::{
    calibrate_threshold, loss_raw, mink_raw, minkpp_position, recall_raw, score_loss, score_mink, score_minkpp,
    score_recall, score_ref, score_zlib, zlib_len, zlib_raw, AttackConfig, Method,
};
use kdmia::corpus::TokenSeq;
use kdmia::model::{
    ffn_up_weights, forward, load_checkpoint, norm_apply, param_count, save_checkpoint, LanguageModel, ModelConfig,
    ModelError, NormKind,
};
use kdmia::numeric::{grad_check, NumericError, Tape, Tensor, Var};
use kdmia::par::Exec;
use kdmia::pipeline::{run_all, ExperimentConfig, Layout, Summary};
use kdmia::training::{distill_loss_on_tape, TeacherRows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1 ---------------------------------------------------------------------

fn statistics_oracle() -> Outcome {
    let t = Instant::now();
    let pct = |b: &[f64], v: &[f64]| 100.0 * relative_reduction(b, v).unwrap();
    let cases = [
        (75.02, pct(&selection::VULNERABLE_FULL, &selection::VULNERABLE_NONVUL)),
        (35.20, pct(&selection::MEMBER_FULL, &selection::MEMBER_NONVUL)),
        (9.45, pct(&architecture::MEMBER_NONE, &architecture::MEMBER_BOTTLENECK)),
        (4.71, pct(&architecture::MEMBER_NONE, &architecture::MEMBER_NONORM)),
        (4.49, pct(&architecture::MEMBER_NONE, &architecture::MEMBER_ALL)),
        (1.05, pct(&architecture::NONMEMBER_NONE, &architecture::NONMEMBER_BOTTLENECK)),
        (-2.19, pct(&architecture::NONMEMBER_NONE, &architecture::NONMEMBER_NONORM)),
        (-0.46, pct(&architecture::NONMEMBER_NONE, &architecture::NONMEMBER_ALL)),
    ];
    let elapsed = t.elapsed();
    let worst = cases.iter().map(|(e, g)| (e - g).abs()).fold(0.0, f64::max);
    let got: Vec<String> = cases.iter().map(|(_, g)| format!("{g:.2}")).collect();
    outcome(
        worst <= 0.05 && elapsed < Duration::from_secs(1),
        format!("reductions [{}]%, max |diff| {worst:.4} pp, {elapsed:?}", got.join(", ")),
    )
}

// 2 ---------------------------------------------------------------------

fn sign_test_oracle() -> Outcome {
    let p = sign_test(32, 17).unwrap().p_value;
    let mut worst_enum = 0.0f64;
    for n in 1..=16u32 {
        for k in 0..=n {
            worst_enum = worst_enum.max((sign_test(n as u64, k as u64).unwrap().p_value - enumerated_tail(n, k)).abs());
        }
    }
    let worst_pmf = (0..=40u64)
        .map(|n| ((0..=n).map(|k| binomial_pmf(n, k)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        close(p, 0.430, 0.001) && worst_enum < 1e-12 && worst_pmf <= 1e-12,
        format!("p(32, 17) = {p:.4}; enumeration max diff {worst_enum:.1e}; pmf max |sum - 1| {worst_pmf:.1e}"),
    )
}

// 3 ---------------------------------------------------------------------

fn tiny(bottleneck: Option<usize>, norm: NormKind, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden: 8,
        layers: 2,
        heads: 2,
        intermediate: 12,
        bottleneck,
        norm,
        max_seq: 8,
        seed,
    }
}

fn numeric(e: ModelError) -> NumericError {
    match e {
        ModelError::Numeric(n) => n,
        other => NumericError::Invalid {
            op: "forward",
            detail: other.to_string(),
        },
    }
}

fn distill_grad_error(bottleneck: Option<usize>, norm: NormKind) -> f64 {
    let cfg = tiny(bottleneck, norm, 3);
    let teacher = LanguageModel::new(tiny(None, NormKind::LayerNorm, 8)).unwrap();
    let tokens = [1, 5, 2, 9, 4, 11];
    let t = teacher.forward_logprobs(&tokens, 0).unwrap();
    let rows: TeacherRows<f64> = TeacherRows::from_logprobs(&t.rows, t.vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let params: Vec<Tensor<f64>> = LanguageModel::new(cfg.clone())
        .unwrap()
        .cast::<f64>()
        .params()
        .iter()
        .map(|p| {
            let data = p.data().iter().map(|&v| v + rng.random_range(-0.3..0.3)).collect();
            Tensor::new(p.shape().to_vec(), data).unwrap()
        })
        .collect();
    grad_check(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let out = forward(tape, &cfg, vars, &tokens, 0).map_err(numeric)?;
            Ok(distill_loss_on_tape(tape, out.log_probs, &out.targets, Some(&rows), 0.5)?.0)
        },
        &params,
        1e-5,
    )
    .unwrap()
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (b, norm, name) in [
        (None, NormKind::LayerNorm, "layernorm"),
        (None, NormKind::NoNorm, "nonorm"),
        (Some(4), NormKind::LayerNorm, "layernorm+B4"),
        (Some(4), NormKind::NoNorm, "nonorm+B4"),
    ] {
        let e = distill_grad_error(b, norm);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let elapsed = t.elapsed();
    outcome(
        worst <= 1e-4 && elapsed < Duration::from_secs(60),
        format!("max rel err {}; {elapsed:.2?}", parts.join(", ")),
    )
}

// 4 ---------------------------------------------------------------------

fn calibration_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.random_range(2..=64);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-12i32..12) as f64 / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        instances += 1;
        let method = Method::ALL[instances % Method::ALL.len()];
        let (c, m) = calibrate_threshold(AttackConfig::new(method), &scores, &labels).unwrap();
        let b = brute_force_calibration(&scores, &labels, method.canonical_orientation());
        if !(close(m.accuracy, b.accuracy, 1e-12) && c.tau == b.tau && c.orientation == b.orientation) {
            mismatches += 1;
        }
    }
    // the worked examples, including the balance tie-break
    let (c, m) = calibrate_threshold(AttackConfig::new(Method::Loss), &[1.0, 3.0, 2.0], &[true, true, false]).unwrap();
    let example = m.accuracy == 0.75 && c.tau > 2.0 && c.tau < 3.0 && m.tpr == 0.5 && m.tnr == 1.0;
    let (_, flat) = calibrate_threshold(AttackConfig::new(Method::Loss), &[0.4; 6], &[true, false, true, false, true, false]).unwrap();
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && example && flat.accuracy == 0.5 && elapsed < Duration::from_secs(10),
        format!("{mismatches}/200 mismatches vs brute force; worked examples {example}; {elapsed:.2?}"),
    )
}

// 5 ---------------------------------------------------------------------

fn model64(layers: usize, vocab: usize, seed: u64) -> LanguageModel<f64> {
    LanguageModel::new(ModelConfig {
        vocab_size: vocab,
        hidden: 8,
        layers,
        heads: 2,
        intermediate: 16,
        bottleneck: None,
        norm: NormKind::LayerNorm,
        max_seq: 64,
        seed,
    })
    .unwrap()
    .cast::<f64>()
}

fn seq(tokens: &[usize]) -> TokenSeq {
    TokenSeq {
        tokens: tokens.to_vec(),
        source_id: "s".into(),
    }
}

/// A text whose zlib stream is exactly `bytes` long.
fn text_with_zlib_len(bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    (1..200)
        .map(|len| (0..len).map(|_| char::from(rng.random_range(b'!'..=b'~'))).collect::<String>())
        .find(|t| zlib_len(t).unwrap() == bytes)
        .expect("some length hits the target")
}

fn attack_formula_oracles() -> Outcome {
    const TOL: f64 = 1e-9;
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let mut uniform = model64(2, 256, 1);
    uniform.param_mut("head.w").unwrap().data_mut().fill(0.0);
    let s = seq(&[72, 101, 108, 108, 111, 33]);
    check("loss uniform", close(score_loss(&uniform, &s).unwrap().raw, -(256f64).ln(), TOL));
    check("loss [-1,-3]", close(loss_raw(&[-1.0, -3.0]).unwrap(), -2.0, TOL));

    let text = text_with_zlib_len(50);
    check("zlib 100 nats / 50 bytes", close(zlib_raw(&[-1.0; 100], &text).unwrap(), -2.0, TOL));
    let z = score_zlib(&uniform, &s, &text).unwrap().raw;
    check("zlib uniform", close(z, -(256f64).ln() * 5.0 / 50.0, TOL));

    check("mink k=0.5", close(mink_raw(&[-0.1, -2.3, -0.5, -3.0], 0.5).unwrap(), -2.65, TOL));
    check("mink single token", mink_raw(&[-0.7], 0.05).unwrap() == -0.7);
    check("mink uniform", close(score_mink(&uniform, &s, 0.3).unwrap().raw, -(256f64).ln(), TOL));

    let row = [(0.75f64).ln(), (0.25f64).ln()];
    let mu = 0.75 * row[0] + 0.25 * row[1];
    let sigma = (0.75 * (row[0] - mu).powi(2) + 0.25 * (row[1] - mu).powi(2)).sqrt();
    let s_hand = (row[0] - mu) / sigma;
    check("minkpp mu", close(mu, -0.562335, 1e-6));
    check("minkpp two-token row", close(minkpp_position(&row, 0).unwrap(), s_hand, TOL));
    check("minkpp closed form", close(s_hand, (1.0f64 / 3.0).sqrt(), TOL));
    check("minkpp degenerate row", score_minkpp(&uniform, &s, 0.5).unwrap().raw == 0.0);

    check("recall ratio", close(recall_raw(-2.0, -1.0).unwrap(), 0.5, TOL));
    let mut bigram = model64(0, 256, 2);
    bigram.param_mut("pos_emb").unwrap().data_mut().fill(0.0);
    let prefix = [10, 20, 30, 40];
    check("recall context-free", close(score_recall(&bigram, &s, &prefix).unwrap().raw, 1.0, TOL));

    let target = model64(2, 256, 3);
    check("ref identity", score_ref(&target, &target, &s).unwrap().raw == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut mink_equals_loss = true;
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let lps: Vec<f64> = (0..n).map(|_| -rng.random_range(0.0..20.0)).collect();
        mink_equals_loss &= mink_raw(&lps, 1.0).unwrap() == loss_raw(&lps).unwrap();
    }
    let model_k1 = score_mink(&target, &s, 1.0).unwrap().raw == score_loss(&target, &s).unwrap().raw;
    check("mink k=1 is loss on 100 vectors", mink_equals_loss && model_k1);

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "loss, zlib, mink, minkpp, recall, ref fixtures at 1e-9; mink(k=1) == loss on 100 vectors".to_string()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// 6 ---------------------------------------------------------------------

fn nonorm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::from_f64(&[x.len() / gamma.len(), gamma.len()], x).unwrap());
    let g = tape.constant(Tensor::vector(gamma.to_vec()));
    let b = tape.constant(Tensor::vector(beta.to_vec()));
    let y = norm_apply(&mut tape, h, g, b, NormKind::NoNorm).unwrap();
    tape.value(y).data().to_vec()
}

fn architecture_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..24).map(|_| rng.random_range(-4.0..4.0)).collect();
    let identity = nonorm(&x, &[1.0; 6], &[0.0; 6]) == x;

    let gamma: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let beta: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let base = nonorm(&x, &gamma, &beta);
    let mut local = base.iter().enumerate().all(|(k, &y)| y == gamma[k % 6] * x[k] + beta[k % 6]);
    for k in 0..24 {
        let mut moved = x.clone();
        moved[k] += 1.5;
        let after = nonorm(&moved, &gamma, &beta);
        local &= (0..24).filter(|&j| j != k).all(|j| after[j] == base[j]);
    }

    let mut counts_match = 0;
    for _ in 0..20 {
        let heads = rng.random_range(1..=3);
        let intermediate = rng.random_range(1..=40);
        let c = ModelConfig {
            vocab_size: rng.random_range(2..=40),
            hidden: heads * rng.random_range(1..=6),
            layers: rng.random_range(0..=3),
            heads,
            intermediate,
            bottleneck: rng.random_bool(0.5).then(|| rng.random_range(1..=intermediate)),
            norm: if rng.random_bool(0.5) { NormKind::LayerNorm } else { NormKind::NoNorm },
            max_seq: rng.random_range(2..=20),
            seed: rng.random(),
        };
        counts_match += usize::from(param_count(&c) == LanguageModel::new(c).unwrap().trainable_scalars());
    }

    // the published sweep at its own scale and rescaled to the desk model
    let desk = ModelConfig::default();
    let mut sweep_ok = true;
    let mut sweeps = Vec::new();
    for (h, i, dims) in [
        (768, 3072, ABLATION_DIMS.to_vec()),
        (desk.hidden, desk.intermediate, published::rescaled_ablation_dims(desk.hidden)),
    ] {
        let plain = ModelConfig {
            hidden: h,
            intermediate: i,
            heads: 1,
            layers: 1,
            ..ModelConfig::default()
        };
        for b in dims {
            let narrow = ModelConfig {
                bottleneck: Some(b),
                ..plain.clone()
            };
            let saves = param_count(&narrow) < param_count(&plain);
            sweep_ok &= saves == (b * (h + i) < h * i);
            sweeps.push(format!("{b}@{h}:{}", if saves { "saves" } else { "no" }));
        }
    }
    let published_scale = ModelConfig {
        hidden: 768,
        intermediate: 3072,
        heads: 1,
        ..ModelConfig::default()
    };
    let up_path = ffn_up_weights(&published_scale) == 2_359_296
        && ffn_up_weights(&ModelConfig {
            bottleneck: Some(384),
            ..published_scale
        }) == 1_474_560;

    outcome(
        identity && local && counts_match == 20 && sweep_ok && up_path,
        format!(
            "identity {identity}, channel-local {local}, param_count {counts_match}/20, savings iff B < HI/(H+I) {sweep_ok} [{}], up-path arithmetic {up_path}",
            sweeps.join(" ")
        ),
    )
}

// 7, 8 ------------------------------------------------------------------

const SEEDS: [u64; 3] = [1, 2, 3];
const CHECKS: [(&str, &str); 4] = [
    ("teacher-overfit", "7a teacher Loss A >= 0.9"),
    ("data-selection", "7b nonvulnerable below none"),
    ("alignment", "7c vulnerable stratum better aligned"),
    ("architecture", "7d bottleneck, all <= none"),
];

struct DeskRun {
    seed: u64,
    dir: PathBuf,
    elapsed: Duration,
    summary: Result<Summary, String>,
}

fn desk_run(root: &Path, seed: u64, tag: &str, exec: Exec) -> DeskRun {
    let dir = root.join(format!("seed{seed}{tag}"));
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let t = Instant::now();
    let summary = run_all(&cfg, &Layout::new(&dir), exec).map_err(|e| e.to_string());
    DeskRun {
        seed,
        dir,
        elapsed: t.elapsed(),
        summary,
    }
}

fn directional(runs: &[DeskRun]) -> Vec<(String, Outcome)> {
    let budget = Duration::from_secs(30 * 60);
    let mut lines = Vec::new();
    for (id, label) in CHECKS {
        let mut holds = 0;
        let mut parts = Vec::new();
        for r in runs {
            let state = match &r.summary {
                Ok(s) => match s.report.check(id) {
                    Some(c) => {
                        let ok = c.holds && r.elapsed < budget;
                        holds += usize::from(ok);
                        format!("seed {} {} ({})", r.seed, if ok { "holds" } else { "fails" }, c.detail)
                    }
                    None => format!("seed {} missing", r.seed),
                },
                Err(e) => format!("seed {} error: {e}", r.seed),
            };
            parts.push(state);
        }
        lines.push((
            label.to_string(),
            outcome(2 * holds > runs.len(), format!("{holds}/{} seeds; {}", runs.len(), parts.join("; "))),
        ));
    }
    let times: Vec<String> = runs.iter().map(|r| format!("seed {} {:.0?}", r.seed, r.elapsed)).collect();
    lines.push((
        "7 run-all within 30 min".to_string(),
        outcome(runs.iter().all(|r| r.elapsed < budget && r.summary.is_ok()), times.join(", ")),
    ));
    lines
}

fn determinism(first: &DeskRun, root: &Path) -> Outcome {
    let again = desk_run(root, first.seed, "-sequential", Exec::Sequential);
    let same_summary = match (&first.summary, &again.summary) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    let read = |d: &Path| fs::read(d.join("summary.json")).unwrap_or_default();
    let same_bytes = !read(&first.dir).is_empty() && read(&first.dir) == read(&again.dir);

    let ckpt = Layout::new(&first.dir).checkpoint("teacher");
    let roundtrip = (|| -> Result<bool, String> {
        let model = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        let copy = root.join("teacher-copy.ckpt");
        save_checkpoint(&model, &copy).map_err(|e| e.to_string())?;
        let reloaded = load_checkpoint(&copy).map_err(|e| e.to_string())?;
        let probe: Vec<usize> = "the harbor was quiet".bytes().map(usize::from).collect();
        let same_logits = model.forward_logprobs(&probe, 0).map_err(|e| e.to_string())?
            == reloaded.forward_logprobs(&probe, 0).map_err(|e| e.to_string())?;
        let same_files = fs::read(&ckpt).map_err(|e| e.to_string())? == fs::read(&copy).map_err(|e| e.to_string())?;
        Ok(same_logits && same_files)
    })();
    let roundtrip_ok = roundtrip == Ok(true);
    outcome(
        same_summary && same_bytes && roundtrip_ok,
        format!(
            "seed {} parallel vs sequential rerun: summary equal {same_summary}, summary.json identical {same_bytes}; checkpoint round trip {:?}",
            first.seed, roundtrip
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters are meaningless here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name.to_string(), o));
    };
    report("1 statistics oracle", statistics_oracle());
    report("2 sign-test oracle", sign_test_oracle());
    report("3 gradient correctness", gradient_correctness());
    report("4 threshold calibration oracle", calibration_oracle());
    report("5 attack formula oracles", attack_formula_oracles());
    report("6 architecture invariants", architecture_invariants());

    let keep = std::env::var_os("KDMIA_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let runs: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&root, s, "", Exec::default())).collect();
    for (name, o) in directional(&runs) {
        report(&name, o);
    }
    report("8 determinism", determinism(&runs[0], &root));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.as_str()).collect();
    println!(
        "acceptance: {} of {} criteria lines pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}

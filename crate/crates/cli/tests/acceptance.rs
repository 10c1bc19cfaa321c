//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed. Run with `cargo test -p riskqueue-cli --test acceptance`.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskqueue::analysis::{smooth_scores, smoothing_alpha, two_proportion_z, SmoothingVariant};
use riskqueue::han::{attention_pool, grad_check, random_small_config, ModelConfig, ModelParams};
use riskqueue::metrics::{auc, erde};
use riskqueue::screening::take_top_k;
use riskqueue::stream::DetectorState;
use riskqueue::{Decision, EmbeddingVector, ErdeParams, Post, ScoredPost};
use serde_json::Value;

const QUEUE_STREAMS: usize = 1000;
const QUEUE_BUDGET: Duration = Duration::from_secs(10);
const GATING_MAX_FRACTION: f64 = 0.35;
const GRAD_CONFIGS: u64 = 20;
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ATTENTION_TOL: f64 = 1e-6;
const E2E_MIN_F1: f64 = 0.90;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const ERDE_TOL: f64 = 1e-9;
const ZTEST_TOL: f64 = 1e-6;
const SMOOTHING_SERIES: usize = 1000;
const LEXICAL_MAX_P: f64 = 1e-3;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(name);
        }
    }
}

fn scored(i: usize, risk: f64) -> ScoredPost {
    ScoredPost {
        post: Post {
            user_id: "u".into(),
            post_id: format!("p{i:04}"),
            timestamp: i as i64,
            title: None,
            text: String::new(),
        },
        risk,
        bases: Vec::new(),
        embedding: EmbeddingVector::zeros(1),
    }
}

/// Ranks by risk, later posts first among ties, and keeps `k` ids.
fn sort_oracle(risks: &[f64], k: usize) -> BTreeSet<String> {
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| risks[b].partial_cmp(&risks[a]).unwrap().then(b.cmp(&a)));
    order.into_iter().take(k).map(|i| format!("p{i:04}")).collect()
}

struct Replay {
    final_ids: Vec<String>,
    inferences: usize,
    model_calls: usize,
    mutations: usize,
}

fn replay(risks: &[f64], k: usize) -> Replay {
    let calls = Cell::new(0usize);
    let model = |_: &[ScoredPost]| -> riskqueue::Result<f64> {
        calls.set(calls.get() + 1);
        Ok(0.1)
    };
    let mut state = DetectorState::new(k).unwrap();
    let mut mutations = 0;
    for (i, &r) in risks.iter().enumerate() {
        let before: Vec<String> = state.queue.entries().iter().map(|p| p.post.post_id.clone()).collect();
        state.process_post(scored(i, r), &model, 0.5).unwrap();
        let after: Vec<String> = state.queue.entries().iter().map(|p| p.post.post_id.clone()).collect();
        if before != after {
            mutations += 1;
        }
    }
    Replay {
        final_ids: state.queue.entries().iter().map(|p| p.post.post_id.clone()).collect(),
        inferences: state.inferences,
        model_calls: calls.get(),
        mutations,
    }
}

fn random_risks(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Vec<f64> {
    (0..n)
        .map(|_| if ties { f64::from(rng.gen_range(0u8..5)) / 4.0 } else { rng.gen::<f64>() })
        .collect()
}

fn queue_and_gating(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2017);
    let start = Instant::now();
    let (mut mismatches, mut gating_errors) = (0, 0);
    for s in 0..QUEUE_STREAMS {
        let k = [1, 4, 16][s % 3];
        let n = rng.gen_range(0..=200);
        let risks = random_risks(&mut rng, n, s % 2 == 0);
        let r = replay(&risks, k);
        let got: BTreeSet<String> = r.final_ids.iter().cloned().collect();
        let posts: Vec<ScoredPost> = risks.iter().enumerate().map(|(i, &x)| scored(i, x)).collect();
        let library: Vec<String> = take_top_k(posts, k).into_iter().map(|p| p.post.post_id).collect();
        if got != sort_oracle(&risks, k) || r.final_ids != library {
            mismatches += 1;
        }
        if r.inferences != r.mutations || r.model_calls != r.mutations {
            gating_errors += 1;
        }
    }
    let elapsed = start.elapsed();
    suite.record(
        "queue/offline equivalence",
        mismatches == 0 && elapsed < QUEUE_BUDGET,
        format!("{mismatches} mismatches over {QUEUE_STREAMS} streams in {:.2}s", elapsed.as_secs_f64()),
    );

    let (k, n, runs) = (16, 200, 200);
    let (mut inferences, mut fixed_errors) = (0, 0);
    for _ in 0..runs {
        let risks = random_risks(&mut rng, n, false);
        let r = replay(&risks, k);
        inferences += r.inferences;
        if r.inferences != r.mutations {
            fixed_errors += 1;
        }
    }
    let fraction = inferences as f64 / (runs * n) as f64;
    let harmonic = |m: usize| (1..=m).map(|i| 1.0 / i as f64).sum::<f64>();
    let expected = (k as f64 + k as f64 * (harmonic(n) - harmonic(k))) / n as f64;
    suite.record(
        "inference gating",
        gating_errors == 0 && fixed_errors == 0 && fraction < GATING_MAX_FRACTION,
        format!(
            "{} streams with inferences != mutations; K=16 n=200 fraction {fraction:.4} (closed form {expected:.4})",
            gating_errors + fixed_errors
        ),
    );
}

fn gradient_check(suite: &mut Suite) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut errors = Vec::new();
    for seed in 0..GRAD_CONFIGS {
        match grad_check(&random_small_config(seed), GRAD_TOLERANCE) {
            Ok(r) => worst = worst.max(r.max_rel_error),
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    suite.record(
        "gradient check",
        errors.is_empty() && worst <= GRAD_TOLERANCE && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {worst:.3e} over {GRAD_CONFIGS} configs in {:.2}s{}",
            elapsed.as_secs_f64(),
            if errors.is_empty() { String::new() } else { format!("; {}", errors.join("; ")) }
        ),
    );
}

fn attention_invariants(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    for seed in 0..50 {
        let config = ModelConfig {
            embed_dim: 6,
            model_dim: 8,
            ff_dim: 8,
            num_heads: 2,
            num_layers: 1,
            max_posts: 6,
            seed,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config).unwrap();
        let d = config.model_dim;
        let reps: Vec<f64> = (0..config.max_posts * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let live = rng.gen_range(1..=config.max_posts);
        let mask: Vec<bool> = (0..config.max_posts).map(|i| i < live).collect();
        let (_, alpha) = attention_pool(&reps, &mask, &params).unwrap();
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > ATTENTION_TOL {
            problems.push(format!("seed {seed}: weights sum to {total}"));
        }
        if alpha.iter().zip(&mask).any(|(a, m)| !m && *a != 0.0) {
            problems.push(format!("seed {seed}: masked slot has weight"));
        }

        let mut one = vec![false; config.max_posts];
        one[2] = true;
        let (u, alpha) = attention_pool(&reps, &one, &params).unwrap();
        let own = &reps[2 * d..3 * d];
        if alpha[2] != 1.0 || u.iter().zip(own).any(|(a, b)| (a - b).abs() > ATTENTION_TOL) {
            problems.push(format!("seed {seed}: single post is not passed through"));
        }

        let mut twins = reps.clone();
        twins.copy_within(0..d, d);
        let pair: Vec<bool> = (0..config.max_posts).map(|i| i < 2).collect();
        let (_, alpha) = attention_pool(&twins, &pair, &params).unwrap();
        if (alpha[0] - 0.5).abs() > ATTENTION_TOL || (alpha[1] - 0.5).abs() > ATTENTION_TOL {
            problems.push(format!("seed {seed}: twin weights {:?}", &alpha[..2]));
        }
    }
    suite.record(
        "attention invariants",
        problems.is_empty(),
        if problems.is_empty() { "50 random configs".into() } else { problems.join("; ") },
    );
}

fn decision(user: &str, alert_at: Option<usize>, total: usize) -> Decision {
    Decision {
        user_id: user.into(),
        alerted: alert_at.is_some(),
        alert_post_index: alert_at,
        final_probability: if alert_at.is_some() { 0.9 } else { 0.1 },
        posts_seen: alert_at.unwrap_or(total),
        inferences: 1,
    }
}

fn labels(pairs: &[(&str, u8)]) -> BTreeMap<String, u8> {
    pairs.iter().map(|(u, l)| (u.to_string(), *l)).collect()
}

fn erde_cases(suite: &mut Suite) {
    let p5 = ErdeParams::new(5);
    let fixed = |c| ErdeParams { c_fp: Some(c), ..ErdeParams::new(5) };
    let all_tn = erde(
        &[decision("a", None, 30), decision("b", None, 12)],
        &labels(&[("a", 0), ("b", 0)]),
        &p5,
    )
    .unwrap();
    let tp_at_o = erde(&[decision("a", Some(5), 30)], &labels(&[("a", 1)]), &p5).unwrap();
    let fp = erde(&[decision("a", Some(3), 30)], &labels(&[("a", 0)]), &fixed(0.37)).unwrap();
    // User a: true positive at post 7 with o = 5 costs 1/(1+e^-2).
    // User b: false positive, c_fp = share of positives = 1/2.
    let mixed = erde(
        &[decision("a", Some(7), 30), decision("b", Some(2), 30)],
        &labels(&[("a", 1), ("b", 0)]),
        &p5,
    )
    .unwrap();
    let hand = (0.880_797_077_977_882_3 + 0.5) / 2.0 * 100.0;
    let pass = all_tn == 0.0 && tp_at_o == 50.0 && fp == 37.0 && (mixed - hand).abs() < ERDE_TOL;
    suite.record(
        "ERDE unit cases",
        pass,
        format!("all-TN {all_tn}, TP at o {tp_at_o}, FP {fp} (c_fp 0.37), mixed {mixed} vs {hand} (percent)"),
    );
}

fn brute_pairs(scores: &[(f64, u8)]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for p in scores.iter().filter(|s| s.1 == 1) {
        for n in scores.iter().filter(|s| s.1 == 0) {
            pairs += 1;
            twice_wins += match p.0.partial_cmp(&n.0).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

fn auc_cases(suite: &mut Suite) {
    let perfect = auc(&[(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)]).unwrap();
    let tied = auc(&[(0.4, 1), (0.4, 0), (0.4, 1), (0.4, 0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut fixtures = 0;
    while fixtures < 500 {
        let s: Vec<(f64, u8)> = (0..6)
            .map(|_| (f64::from(rng.gen_range(0u8..4)) / 4.0, rng.gen_range(0u8..2)))
            .collect();
        if s.iter().all(|x| x.1 == s[0].1) {
            continue;
        }
        fixtures += 1;
        if auc(&s).unwrap() != brute_pairs(&s) {
            mismatches += 1;
        }
    }
    suite.record(
        "AUC",
        perfect == 1.0 && tied == 0.5 && mismatches == 0,
        format!("perfect {perfect}, all tied {tied}, {mismatches}/{fixtures} six-element fixtures differ from pair counting"),
    );
}

fn ztest_cases(suite: &mut Suite) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ztest_reference.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let (mut cases, mut worst_z, mut worst_p): (usize, f64, f64) = (0, 0.0, 0.0);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).unwrap();
        let n = |k: &str| v[k].as_u64().unwrap();
        let t = two_proportion_z(n("x1"), n("n1"), n("x2"), n("n2")).unwrap();
        worst_z = worst_z.max((t.z - v["z"].as_f64().unwrap()).abs());
        worst_p = worst_p.max((t.p_value - v["p"].as_f64().unwrap()).abs());
        cases += 1;
    }
    let equal = two_proportion_z(30, 100, 60, 200).unwrap();
    suite.record(
        "z-test",
        cases == 100 && worst_z <= ZTEST_TOL && worst_p <= ZTEST_TOL && equal.p_value == 1.0,
        format!("{cases} reference cases, max |dz| {worst_z:.2e}, max |dp| {worst_p:.2e}; equal proportions p = {}", equal.p_value),
    );
}

fn smoothing(suite: &mut Suite) {
    let ends = smoothing_alpha(1.0) == 0.5 && smoothing_alpha(28.0) == 0.0 && smoothing_alpha(90.0) == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let mut violations = 0;
    for i in 0..SMOOTHING_SERIES {
        let variant = if i % 2 == 0 { SmoothingVariant::Previous } else { SmoothingVariant::Current };
        let mut t = 0i64;
        let probs: Vec<(i64, f64)> = (0..rng.gen_range(1..40))
            .map(|_| {
                t += rng.gen_range(1..60 * 86_400);
                (t, rng.gen::<f64>())
            })
            .collect();
        let series = smooth_scores(&probs, variant).unwrap().groups;
        for w in series.windows(2) {
            let input = if variant == SmoothingVariant::Previous { w[0].pr } else { w[1].pr };
            let (lo, hi) = (w[0].s.min(input), w[0].s.max(input));
            if w[1].s < lo - 1e-15 || w[1].s > hi + 1e-15 {
                violations += 1;
            }
        }
    }
    suite.record(
        "smoothing",
        ends && violations == 0,
        format!(
            "alpha(1) {}, alpha(28) {}, {violations} bound violations over {SMOOTHING_SERIES} series",
            smoothing_alpha(1.0),
            smoothing_alpha(28.0)
        ),
    );
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_riskqueue"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("riskqueue {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(dir: &Path, jobs: &str) -> Result<Duration, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let start = Instant::now();
    cli(&["synth", "--seed", "0", "--users", "400", "--posts-per-user", "100", "--out", &p("posts.jsonl"), "--labels", &p("labels.jsonl")])?;
    cli(&["screen", "--set", "full", "--k", "16", "--input", &p("posts.jsonl"), "--out", &p("scored.jsonl"), "--jobs", jobs])?;
    cli(&["train", "--screened", &p("scored.jsonl"), "--epochs", "5", "--out", &p("model.bin")])?;
    cli(&[
        "stream", "--model", &p("model.bin"), "--set", "full", "--k", "16", "--threshold", "0.5",
        "--input", &p("posts.jsonl"), "--split", "test", "--out", &p("decisions.jsonl"), "--jobs", jobs,
    ])?;
    cli(&["evaluate", "--decisions", &p("decisions.jsonl"), "--labels", &p("labels.jsonl"), "--out", &p("report.json")])?;
    Ok(start.elapsed())
}

fn end_to_end(suite: &mut Suite) {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let run = pipeline(first.path(), "1");
    let report: Option<Value> = fs::read_to_string(first.path().join("report.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    match (&run, &report) {
        (Ok(elapsed), Some(r)) => {
            let f1 = r["f1"].as_f64().unwrap_or(f64::NAN);
            suite.record(
                "synthetic end-to-end",
                f1 >= E2E_MIN_F1 && *elapsed < E2E_BUDGET,
                format!("F1 {f1:.4} on {} test users in {:.1}s", r["users"], elapsed.as_secs_f64()),
            );
        }
        (Err(e), _) => suite.record("synthetic end-to-end", false, e.clone()),
        (Ok(_), None) => suite.record("synthetic end-to-end", false, "no report written".into()),
    }

    let scored = first.path().join("scored.jsonl");
    let lex_out = first.path().join("lexical.json");
    let lex = cli(&["lexical", "--scored", &scored.to_string_lossy(), "--categories", "negemo", "--out", &lex_out.to_string_lossy()])
        .and_then(|_| fs::read_to_string(&lex_out).map_err(|e| e.to_string()))
        .and_then(|s| serde_json::from_str::<Value>(&s).map_err(|e| e.to_string()));
    match lex {
        Ok(v) => {
            let c = &v[0];
            let (sel, unsel) = (c["selected"]["proportion"].as_f64().unwrap(), c["unselected"]["proportion"].as_f64().unwrap());
            let p = c["test"]["p_value"].as_f64().unwrap();
            suite.record(
                "lexical negemo",
                sel > unsel && p < LEXICAL_MAX_P,
                format!("selected {sel:.4} vs other {unsel:.4}, p = {p:.3e}"),
            );
        }
        Err(e) => suite.record("lexical negemo", false, e),
    }

    let identical = |name: &str| -> bool {
        match (fs::read(first.path().join(name)), fs::read(second.path().join(name))) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    };
    match pipeline(second.path(), "4") {
        Ok(_) => {
            let files = ["posts.jsonl", "scored.jsonl", "model.bin", "decisions.jsonl"];
            let differing: Vec<&str> = files.iter().copied().filter(|f| !identical(f)).collect();
            suite.record(
                "determinism",
                run.is_ok() && differing.is_empty(),
                if differing.is_empty() {
                    "two runs (--jobs 1, --jobs 4) byte-identical".into()
                } else {
                    format!("differs: {}", differing.join(", "))
                },
            );
        }
        Err(e) => suite.record("determinism", false, e),
    }
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    queue_and_gating(&mut suite);
    gradient_check(&mut suite);
    attention_invariants(&mut suite);
    erde_cases(&mut suite);
    auc_cases(&mut suite);
    ztest_cases(&mut suite);
    smoothing(&mut suite);
    end_to_end(&mut suite);
    if suite.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {}", suite.failed.len(), suite.failed.join(", "));
        std::process::exit(1);
    }
}

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use sceneaug::backends::mock::{placeholder_png, FixtureEncoder, MockChat, MockEncoder, MockImage};
use sceneaug::backends::{sidecar_path, Backends, ImageCapability, RetryPolicy, ABLATION_NO_SUBJECT};
use sceneaug::dataset::{run_action_route, RouteOptions, RunContext};
use sceneaug::eval::{
    bucketize, cosine, evaluate, format_percent, match_action, render_table, significance,
    significance_with, ActionMatcher, BootstrapConfig, EvalOptions, EvalReport, EvalSample,
    PredictionRecord, ReportMeta, Setting, Significance,
};
use sceneaug::parser::{parse_with, ParseRequest};
use sceneaug::prompt::PromptTemplates;
use sceneaug::scenario::{clean_text, normalize_scenario};
use sceneaug::{ActionCatalog, PromptVariant, Route, Scenario};
use serde::Deserialize;
use serde_json::Value;

struct SplitMix64(u64);

impl SplitMix64 {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn sceneaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceneaug"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn reference_image(dir: &Path) -> PathBuf {
    let p = dir.join("reference.png");
    fs::write(&p, placeholder_png("reference room", 1, 32, 32)).unwrap();
    p
}

fn augment(route: &str, out: &Path, extra: &[&str]) -> Output {
    let reference = reference_image(out.parent().unwrap());
    let mut args = vec!["augment", route, "--out", s(out), "--reference-image", s(&reference)];
    args.extend_from_slice(extra);
    let r = sceneaug(&args);
    assert_eq!(r.status.code(), Some(0), "augment {route} failed: {}", String::from_utf8_lossy(&r.stderr));
    r
}

fn counts(out: &Path) -> (u64, u64, u64) {
    let m = read_json(&out.join("manifest.json"));
    let c = &m["counts"];
    (c["place"].as_u64().unwrap(), c["action"].as_u64().unwrap(), c["total"].as_u64().unwrap())
}

fn pipeline_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("both");
    let start = Instant::now();
    augment("both", &out, &[]);
    let elapsed = start.elapsed();
    assert_eq!(counts(&out), (100, 430, 530));
    let train = read_json(&out.join("train.json"));
    assert_eq!(train.as_array().unwrap().len(), 530);
    assert!(elapsed < Duration::from_secs(60), "augment both took {elapsed:?}");

    let all = dir.path().join("all");
    augment("place", &all, &["--variants", "all"]);
    assert_eq!(counts(&all).0, 300);
    assert_eq!(counts(&all).2, 300);
    println!("    augment both: {elapsed:.1?}");
}

fn oracle_argmax(query: &[f64], vectors: &[Vec<f64>]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(query);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, v) in vectors.iter().enumerate() {
        let dot: f64 = query.iter().zip(v).map(|(a, b)| a * b).sum();
        let sim = dot / (qn * norm(v));
        if sim > best_sim {
            best_sim = sim;
            best = i;
        }
    }
    best
}

fn random_vector(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.unit()).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn matcher_oracle() {
    let mut rng = SplitMix64(2024);
    let trials = 1000;
    let mut agree = 0;
    for trial in 0..trials {
        let dim = rng.range(8, 512);
        let size = rng.range(2, 43);
        let texts: Vec<String> = (0..size).map(|i| format!("action {i}")).collect();
        let catalog = ActionCatalog::from_texts(&texts).unwrap();
        let vectors: Vec<Vec<f64>> = (0..size).map(|_| random_vector(&mut rng, dim)).collect();
        let query = random_vector(&mut rng, dim);
        let mut enc = FixtureEncoder::new("fx", dim);
        for (t, v) in texts.iter().zip(&vectors) {
            enc.insert(t.clone(), v.clone());
        }
        enc.insert("query", query.clone());
        let b = Backends::builder().embedder(Arc::new(enc)).build();
        let got = match_action(&b, "query", &catalog, "fx").unwrap().index;
        let want = oracle_argmax(&query, &vectors);
        assert_eq!(got, want, "trial {trial}: dim {dim}, size {size}");
        agree += 1;
    }
    assert_eq!(agree, trials);

    let mut ties = 0;
    for _ in 0..200 {
        let dim = rng.range(8, 64);
        let size = rng.range(2, 43);
        let lo = rng.below(size - 1);
        let hi = rng.range(lo + 1, size - 1);
        let texts: Vec<String> = (0..size).map(|i| format!("action {i}")).collect();
        let catalog = ActionCatalog::from_texts(&texts).unwrap();
        let winner = random_vector(&mut rng, dim);
        let mut enc = FixtureEncoder::new("fx", dim);
        for (i, t) in texts.iter().enumerate() {
            let v = if i == lo || i == hi {
                winner.clone()
            } else {
                winner.iter().map(|x| -x).collect()
            };
            enc.insert(t.clone(), v);
        }
        enc.insert("query", winner.iter().map(|x| x * 3.0).collect::<Vec<_>>());
        let b = Backends::builder().embedder(Arc::new(enc)).build();
        assert_eq!(match_action(&b, "query", &catalog, "fx").unwrap().index, lo);
        ties += 1;
    }
    let mut enc = FixtureEncoder::new("fx", 3);
    let texts: Vec<String> = (0..12).map(|i| format!("action {i}")).collect();
    for (i, t) in texts.iter().enumerate() {
        let v = if i == 3 || i == 9 { vec![1.0, 0.0, 0.0] } else { vec![0.0, 1.0, 0.2] };
        enc.insert(t.clone(), v);
    }
    enc.insert("query", vec![1.0, 0.0, 0.0]);
    let b = Backends::builder().embedder(Arc::new(enc)).build();
    let catalog = ActionCatalog::from_texts(&texts).unwrap();
    assert_eq!(match_action(&b, "query", &catalog, "fx").unwrap().index, 3);
    println!("    {agree}/{trials} random trials agree, {} tie cases", ties + 1);
}

fn cosine_correctness() {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    assert!(close(cosine(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0));
    assert!(close(cosine(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0));
    assert!(close(cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0 / 2f64.sqrt()));
    assert!(close(cosine(&[3.0, -1.0], &[-6.0, 2.0]).unwrap(), -1.0));

    let vec_strategy = |dim: usize| proptest::collection::vec(-1.0f64..1.0, dim);
    let strategy = (2usize..24, 2usize..12).prop_flat_map(move |(dim, size)| {
        (
            proptest::collection::vec(vec_strategy(dim), size),
            vec_strategy(dim),
            proptest::collection::vec(0.01f64..100.0, size),
            0.01f64..100.0,
        )
    });
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    runner
        .run(&strategy, |(vectors, query, scales, qscale)| {
            prop_assume!(vectors.iter().chain([&query]).all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let texts: Vec<String> = (0..vectors.len()).map(|i| format!("action {i}")).collect();
            let catalog = ActionCatalog::from_texts(&texts).unwrap();
            let sims: Vec<f64> = vectors.iter().map(|v| cosine(&query, v).unwrap()).collect();
            let mut sorted = sims.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            let plain = ActionMatcher::from_embeddings("e", &catalog, vectors.clone()).unwrap();
            let scaled_vectors: Vec<Vec<f64>> = vectors
                .iter()
                .zip(&scales)
                .map(|(v, k)| v.iter().map(|x| x * k).collect())
                .collect();
            let scaled = ActionMatcher::from_embeddings("e", &catalog, scaled_vectors).unwrap();
            let q2: Vec<f64> = query.iter().map(|x| x * qscale).collect();
            prop_assert_eq!(
                plain.match_vector(&query).unwrap().index,
                scaled.match_vector(&q2).unwrap().index
            );
            Ok(())
        })
        .unwrap();
}

fn evaluator_arithmetic() {
    let catalog = ActionCatalog::bundled();
    let n_labels = catalog.len();
    let samples: Vec<EvalSample> = (0..400)
        .map(|i| EvalSample {
            id: format!("s{i:03}"),
            utterance: format!("utterance {i}"),
            description: None,
            gold_action_index: (i * 7) % n_labels,
        })
        .collect();
    let mut rng = SplitMix64(17);
    let mut planted = BTreeSet::new();
    while planted.len() < 145 {
        planted.insert(rng.below(400));
    }
    let predictions: Vec<PredictionRecord> = samples
        .iter()
        .enumerate()
        .map(|(i, smp)| {
            let idx = if planted.contains(&i) {
                smp.gold_action_index
            } else {
                (smp.gold_action_index + 1 + rng.below(n_labels - 1)) % n_labels
            };
            PredictionRecord {
                sample_id: smp.id.clone(),
                setting: Setting::UtteranceOnly,
                response_text: catalog.actions()[idx].text.clone(),
                system: Some("fixture".into()),
                group: None,
                line: 0,
            }
        })
        .collect();

    let enc = Arc::new(MockEncoder::new("sbert", 64));
    let b = Backends::builder().embedder(enc).build();
    let matcher = ActionMatcher::build(&b, &catalog, "sbert", None).unwrap();
    let report = evaluate(&samples, &predictions, &matcher, &b, &EvalOptions::default()).unwrap();

    let gold: HashMap<&str, usize> = samples.iter().map(|x| (x.id.as_str(), x.gold_action_index)).collect();
    let mut independent = 0usize;
    let mut by_label = vec![0usize; n_labels];
    for p in &predictions {
        let g = gold[p.sample_id.as_str()];
        if p.response_text == catalog.actions()[g].text {
            independent += 1;
            by_label[g] += 1;
        }
    }
    assert_eq!(independent, 145);
    assert_eq!(report.correct, 145);
    assert_eq!(report.n_samples, 400);
    assert!((report.accuracy - 0.3625).abs() < 1e-12);
    assert_eq!(format_percent(report.correct, report.n_samples), "36.3");
    assert_eq!(report.per_label.values().map(|l| l.correct).sum::<usize>(), 145);
    for (i, stats) in &report.per_label {
        assert_eq!(stats.correct, by_label[*i], "label {i}");
    }
    let table = render_table(&[report]);
    assert!(table.contains("36.3"), "{table}");
}

fn check_partition(acc: &BTreeMap<usize, f64>, n: usize) -> Result<(), String> {
    let buckets = bucketize(acc, n).map_err(|e| e.to_string())?;
    if buckets.len() != 4 {
        return Err(format!("{} buckets", buckets.len()));
    }
    let mut seen: Vec<usize> = buckets.iter().flat_map(|b| b.members.iter().copied()).collect();
    seen.sort_unstable();
    if seen != (0..n).collect::<Vec<_>>() {
        return Err("buckets do not partition the labels".into());
    }
    let sizes: Vec<usize> = buckets.iter().map(|b| b.members.len()).collect();
    if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 || sizes.iter().sum::<usize>() != n {
        return Err(format!("unbalanced sizes {sizes:?}"));
    }
    for w in buckets.windows(2) {
        if w[0].mean_accuracy > w[1].mean_accuracy {
            return Err("bucket means decrease".into());
        }
        let top = w[0].members.iter().map(|i| acc[i]).fold(f64::NEG_INFINITY, f64::max);
        let bottom = w[1].members.iter().map(|i| acc[i]).fold(f64::INFINITY, f64::min);
        if top > bottom {
            return Err("buckets overlap in accuracy".into());
        }
    }
    Ok(())
}

fn bucket_analysis() {
    let mut rng = SplitMix64(43);
    let zeros: BTreeSet<usize> = [0, 4, 7, 12, 18, 22, 29, 33, 38, 42].into_iter().collect();
    let acc: BTreeMap<usize, f64> = (0..43)
        .map(|i| (i, if zeros.contains(&i) { 0.0 } else { 0.05 + 0.9 * (rng.unit() + 1.0) / 2.0 }))
        .collect();
    let buckets = bucketize(&acc, 43).unwrap();
    let first: BTreeSet<usize> = buckets[0].members.iter().copied().collect();
    assert_eq!(first, zeros);
    assert_eq!(buckets.iter().map(|b| b.members.len()).collect::<Vec<_>>(), vec![10, 11, 11, 11]);
    assert_eq!(buckets[0].mean_accuracy, 0.0);
    check_partition(&acc, 43).unwrap();

    let strategy = (4usize..60).prop_flat_map(|n| {
        proptest::collection::vec(prop_oneof![Just(0.0), Just(0.5), Just(1.0), 0.0f64..=1.0], n)
    });
    let mut runner = TestRunner::new(Config { cases: 100, failure_persistence: None, ..Config::default() });
    runner
        .run(&strategy, |values| {
            let acc: BTreeMap<usize, f64> = values.iter().copied().enumerate().collect();
            check_partition(&acc, values.len()).map_err(TestCaseError::fail)
        })
        .unwrap();
}

#[derive(Deserialize)]
struct Expectation {
    file: String,
    route: Route,
    seed: String,
    expected_count: usize,
    scenarios: usize,
    warnings: usize,
}

fn random_utf8(rng: &mut SplitMix64, max_len: usize) -> String {
    const PIECES: &[&str] = &[
        "1.", "2)", "A:", "B:", "Person A:", "Person B:", "Background:", "**", "?", "\n", "\r\n", " ",
        "- ", "\"", "\u{201C}", "é", "漢", "🤖", "\u{200B}", "\t", "(", ")", "10.",
    ];
    let len = rng.below(max_len + 1);
    let mut out = String::new();
    for _ in 0..len {
        match rng.below(3) {
            0 => out.push_str(PIECES[rng.below(PIECES.len())]),
            1 => out.push(char::from_u32(rng.below(0x11_0000) as u32).unwrap_or('\u{FFFD}')),
            _ => out.push((b'a' + rng.below(26) as u8) as char),
        }
    }
    out
}

fn parser_robustness() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/llm_outputs");
    let expectations: Vec<Expectation> =
        serde_json::from_str(&fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    assert!(expectations.len() >= 20, "only {} shapes", expectations.len());
    let mut corpus = Vec::new();
    let mut parsed = Vec::new();
    for e in &expectations {
        let raw = fs::read_to_string(dir.join(&e.file)).unwrap();
        let report = parse_with(&raw, &ParseRequest::new(e.route, &e.seed, e.expected_count))
            .unwrap_or_else(|err| panic!("{}: {err}", e.file));
        assert_eq!(report.scenarios.len(), e.scenarios, "{}", e.file);
        assert_eq!(report.warnings.len(), e.warnings, "{}", e.file);
        parsed.extend(report.scenarios);
        corpus.push(raw);
    }
    for sc in &parsed {
        let once = normalize_scenario(sc);
        assert_eq!(&once, sc);
        assert_eq!(normalize_scenario(&once), once);
    }

    let mut rng = SplitMix64(6);
    let mut cases = 0;
    for i in 0..3000 {
        let raw = if i % 2 == 0 {
            random_utf8(&mut rng, 200)
        } else {
            let base = &corpus[rng.below(corpus.len())];
            let chars: Vec<char> = base.chars().collect();
            let cut = rng.below(chars.len() + 1);
            let mut m: String = chars[..cut].iter().collect();
            m.push_str(&random_utf8(&mut rng, 20));
            m.extend(&chars[cut..]);
            m
        };
        let route = if i % 3 == 0 { Route::Action } else { Route::Place };
        let n = rng.range(1, 12);
        if let Ok(report) = parse_with(&raw, &ParseRequest::new(route, "kitchen", n)) {
            for sc in &report.scenarios {
                assert_eq!(&normalize_scenario(sc), sc);
            }
        }
        let noisy = Scenario {
            id: "x-001".into(),
            route,
            seed_value: "kitchen".into(),
            request: raw.clone(),
            action: random_utf8(&mut rng, 30),
            background: format!("  \"{raw}\"  "),
            variant: PromptVariant::default(),
        };
        let once = normalize_scenario(&noisy);
        assert_eq!(normalize_scenario(&once), once);
        assert_eq!(clean_text(&once.request), once.request);
        cases += 1;
    }
    println!("    {} corpus shapes, {cases} fuzz inputs", expectations.len());
}

fn reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    augment("both", &a, &["--seed", "7"]);
    augment("both", &b, &["--seed", "7"]);
    assert_eq!(fs::read(a.join("train.json")).unwrap(), fs::read(b.join("train.json")).unwrap());
    let da = read_json(&a.join("manifest.json"))["digest"].clone();
    let db = read_json(&b.join("manifest.json"))["digest"].clone();
    assert!(da.is_string());
    assert_eq!(da, db);
    println!("    manifest digest {}", da.as_str().unwrap());
}

fn reference_bootstrap(d: &[i64], resamples: usize, seed: u64) -> f64 {
    let observed: i64 = d.iter().sum();
    let mut rng = SplitMix64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        let s: i64 = (0..d.len()).map(|_| d[rng.below(d.len())]).sum();
        if (s - observed).abs() >= observed.abs() {
            extreme += 1;
        }
    }
    extreme as f64 / resamples as f64
}

fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

fn significance_sanity() {
    let mut rng = SplitMix64(8);
    let v: Vec<bool> = (0..400).map(|_| rng.below(2) == 1).collect();
    let (p, sig) = significance(&v, &v).unwrap();
    assert_eq!(p, 1.0);
    assert!(!sig);

    let (p, sig) = significance(&vec![false; 400], &vec![true; 400]).unwrap();
    assert!(sig, "p = {p}");
    assert!(p < 0.05);

    let baseline: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
    let mut variant = baseline.clone();
    let mut fixed = 0;
    for (i, b) in baseline.iter().enumerate() {
        if !b && fixed < 6 {
            variant[i] = true;
            fixed += 1;
        }
    }
    let d: Vec<i64> = baseline.iter().zip(&variant).map(|(&b, &v)| i64::from(v) - i64::from(b)).collect();
    assert_eq!(d.iter().filter(|x| **x == 1).count(), 6);
    assert_eq!(d.iter().filter(|x| **x == -1).count(), 0);

    let (p, _) = significance(&baseline, &variant).unwrap();
    let reference = reference_bootstrap(&d, 1_000_000, 99);
    let exact = (12..=20).map(|k| binomial_pmf(20, k, 0.3)).sum::<f64>() + binomial_pmf(20, 0, 0.3);
    assert!((p - reference).abs() <= 0.01, "p {p} vs reference {reference}");
    assert!((reference - exact).abs() <= 0.01, "reference {reference} vs exact {exact}");

    let seq = BootstrapConfig { execution: sceneaug::exec::Execution::Sequential, ..BootstrapConfig::default() };
    assert_eq!(significance_with(&baseline, &variant, &seq).unwrap().0, p);
    println!("    n=20: p {p:.4}, 1e6-resample reference {reference:.4}, exact {exact:.4}");
}

const FIXTURE_ROWS: [(&str, [[usize; 4]; 4]); 2] = [
    (
        "LLaVA-13B",
        [[203, 245, 283, 348], [290, 343, 333, 390], [315, 315, 455, 455], [363, 353, 485, 478]],
    ),
    (
        "LLaVA-7B",
        [[195, 225, 278, 363], [303, 361, 360, 423], [323, 325, 418, 415], [340, 338, 488, 475]],
    ),
];

fn table_reports() -> Vec<EvalReport> {
    let systems = ["", "+ place-based augmentation", "+ action-based augmentation", "+ both"];
    let columns = [
        (Setting::UtteranceOnly, "SBERT"),
        (Setting::UtteranceOnly, "GPT3"),
        (Setting::UtterancePlusDescription, "SBERT"),
        (Setting::UtterancePlusDescription, "GPT3"),
    ];
    let mut reports = Vec::new();
    for (group, rows) in FIXTURE_ROWS {
        for (r, counts) in rows.iter().enumerate() {
            let system = if r == 0 { group.to_string() } else { systems[r].to_string() };
            for (c, &(setting, encoder)) in columns.iter().enumerate() {
                let meta = ReportMeta {
                    system: system.clone(),
                    group: group.into(),
                    setting,
                    encoder_id: encoder.into(),
                };
                reports.push(EvalReport {
                    system: meta.system,
                    group: meta.group,
                    setting: meta.setting,
                    encoder_id: meta.encoder_id,
                    n_samples: 1000,
                    correct: counts[c],
                    accuracy: counts[c] as f64 / 1000.0,
                    per_label: BTreeMap::new(),
                    significance: (r > 0).then(|| Significance {
                        baseline: group.into(),
                        p_value: 0.001,
                        significant: true,
                        resamples: 10_000,
                        seed: 0,
                        alpha: 0.05,
                    }),
                    buckets: None,
                    text_normalization: String::new(),
                    outcomes: Vec::new(),
                });
            }
        }
    }
    reports
}

fn table_rendering() {
    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/accuracy_table.golden.txt");
    let rendered = render_table(&table_reports());
    if std::env::var_os("SCENEAUG_BLESS").is_some() {
        fs::write(&golden_path, &rendered).unwrap();
    }
    let golden = fs::read_to_string(&golden_path).expect("golden table exists");
    assert_eq!(rendered, golden, "rendered:\n{rendered}");
    let header = golden.lines().next().unwrap();
    assert!(header.contains("Utterance-Only") && header.contains("Description + Utterance"));
    assert_eq!(golden.lines().nth(1).unwrap().matches("SBERT").count(), 2);
    assert_eq!(golden.lines().nth(1).unwrap().matches("GPT3").count(), 2);
    assert!(golden.contains("36.3†*"));
    assert!(golden.contains("20.3 "));
    assert!(!golden.contains("20.3†"));
}

fn small_image_backends(text: Arc<MockImage>, subject: Arc<MockImage>) -> Backends {
    Backends::builder()
        .chat(Arc::new(MockChat::new("gpt")))
        .image_text(text)
        .image_subject(subject)
        .image_params("sdxl".into(), ImageCapability::TextOnly, Some(16), Some(16))
        .image_params("blip".into(), ImageCapability::SubjectConditioned, Some(16), Some(16))
        .policy(RetryPolicy::new(2, Duration::from_millis(1), 2.0, 8).unwrap())
        .build()
}

fn ablation_wiring() {
    let dir = tempfile::tempdir().unwrap();
    let reference = reference_image(dir.path());
    let catalog = ActionCatalog::bundled();
    let templates = PromptTemplates::bundled();

    let text = Arc::new(MockImage::text_only("sdxl"));
    let subject = Arc::new(MockImage::subject_conditioned("blip"));
    let backends = small_image_backends(text.clone(), subject.clone());
    let out_dir = dir.path().join("ablated");
    let ctx = RunContext { backends: &backends, templates: &templates, out_dir: &out_dir };
    let opts = RouteOptions { ablate_subject_conditioning: true, ..RouteOptions::default() };
    let out = run_action_route(&ctx, &catalog, &reference, &opts).unwrap();
    assert_eq!(out.pairs.len(), 430);
    assert_eq!(subject.calls(), 0);
    assert_eq!(text.calls(), 430);
    for pair in &out.pairs {
        let sidecar = read_json(&sidecar_path(&pair.image.path));
        assert_eq!(sidecar["ablation"], ABLATION_NO_SUBJECT);
        assert_eq!(sidecar["subject_conditioned"], false);
    }

    let text = Arc::new(MockImage::text_only("sdxl"));
    let subject = Arc::new(MockImage::subject_conditioned("blip"));
    let backends = small_image_backends(text.clone(), subject.clone());
    let out_dir = dir.path().join("control");
    let ctx = RunContext { backends: &backends, templates: &templates, out_dir: &out_dir };
    run_action_route(&ctx, &catalog, &reference, &RouteOptions::default()).unwrap();
    assert_eq!(subject.calls(), 430);
    assert_eq!(text.calls(), 0);

    let cli_out = dir.path().join("cli");
    augment("action", &cli_out, &["--ablate-subject-conditioning"]);
    let images = cli_out.join("images");
    let mut sidecars = 0;
    for entry in fs::read_dir(&images).unwrap() {
        let p = entry.unwrap().path();
        if p.to_string_lossy().ends_with(".meta.json") {
            assert_eq!(read_json(&p)["ablation"], ABLATION_NO_SUBJECT, "{}", p.display());
            sidecars += 1;
        }
    }
    assert_eq!(sidecars, 430);
    let audit = fs::read_to_string(cli_out.join("audit.jsonl")).unwrap();
    let image_lines: Vec<Value> = audit
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["operation"] != "chat")
        .collect();
    assert!(!image_lines.is_empty());
    assert!(image_lines.iter().all(|r| !r["backend_id"].as_str().unwrap().contains("blip")));
}

fn main() {
    let criteria: [(&str, fn()); 10] = [
        ("pipeline cardinality", pipeline_cardinality),
        ("matcher-oracle equivalence", matcher_oracle),
        ("cosine correctness", cosine_correctness),
        ("evaluator arithmetic", evaluator_arithmetic),
        ("bucket analysis", bucket_analysis),
        ("parser robustness", parser_robustness),
        ("reproducibility", reproducibility),
        ("significance sanity", significance_sanity),
        ("table rendering", table_rendering),
        ("ablation wiring", ablation_wiring),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {name}: {} ({:.1?})",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

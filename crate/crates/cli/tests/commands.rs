mod common;

use std::path::{Path, PathBuf};

use common::{core_fixture, count_before, golden, golden_config, p, vqarank};
use serde_json::Value;
use vqarank::clients::prompt_hash;
use vqarank::formats::{self, CirScoreRecord, RecordStore};
use vqarank::question_generation::{build_prompt, serialize_question_list};

fn golden_rerank(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf, common::Run) {
    let config = golden_config(dir);
    let rankings = dir.join("rankings.jsonl");
    let traces = dir.join("traces.jsonl");
    let mut args = vec!["--config", p(&config)];
    args.extend_from_slice(extra);
    args.extend(["rerank", "--rankings-out", p(&rankings), "--traces-out", p(&traces)]);
    let run = vqarank(&args);
    (rankings, traces, run)
}

fn ranked_ids(rankings: &Path) -> Vec<String> {
    let all = formats::load_rankings(rankings).unwrap();
    all["q1"].ids().map(String::from).collect()
}

#[test]
fn golden_rerank_reproduces_committed_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (rankings, traces, run) = golden_rerank(dir.path(), &[]);
    let run = run.ok();
    assert_eq!(run.stdout, "1 queries re-ranked, 12 VQA requests, 12 backend calls\n");
    assert_eq!(
        std::fs::read_to_string(rankings).unwrap(),
        std::fs::read_to_string(golden("rankings.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(traces).unwrap(),
        std::fs::read_to_string(golden("traces.jsonl")).unwrap()
    );
}

#[test]
fn zero_lambda_keeps_base_order() {
    let dir = tempfile::tempdir().unwrap();
    let (rankings, _, run) = golden_rerank(dir.path(), &["--lambda-vqa", "0"]);
    run.ok();
    let expected: Vec<String> = formats::load_cir_scores(&golden("cir_scores.jsonl")).unwrap()["q1"]
        .iter()
        .map(|c| c.candidate_id.clone())
        .collect();
    assert_eq!(ranked_ids(&rankings), expected);
}

#[test]
fn request_count_is_linear_in_depth() {
    let dir = tempfile::tempdir().unwrap();
    let scores: Vec<CirScoreRecord> = (0..300)
        .map(|i| CirScoreRecord {
            query_id: "q1".into(),
            candidate_id: format!("img_{i:03}"),
            score: 1.0 - i as f64 / 1000.0,
        })
        .collect();
    let cir = dir.path().join("cir.jsonl");
    formats::write_records(&cir, formats::CIR_SCORES, &scores).unwrap();
    let mut requests = Vec::new();
    for n in ["70", "250"] {
        let run = vqarank([
            "--n",
            n,
            "rerank",
            "--triplets",
            p(&golden("triplets.jsonl")),
            "--questions",
            p(&golden("questions.jsonl")),
            "--cir-scores",
            p(&cir),
            "--rankings-out",
            p(&dir.path().join("r.jsonl")),
            "--traces-out",
            p(&dir.path().join("t.jsonl")),
        ])
        .ok();
        requests.push(count_before(&run.stdout, "VQA requests"));
    }
    assert_eq!(requests, vec![210, 750]);
    assert_eq!(requests[0] * 250, requests[1] * 70);
}

#[test]
fn warm_cache_rerank_is_idempotent_and_offline() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let (rankings, traces, first) = golden_rerank(dir.path(), &["--cache-dir", p(&cache)]);
    assert_eq!(count_before(&first.ok().stdout, "backend calls"), 12);
    let cold = (std::fs::read(&rankings).unwrap(), std::fs::read(&traces).unwrap());

    let (_, _, second) = golden_rerank(dir.path(), &["--cache-dir", p(&cache)]);
    assert_eq!(count_before(&second.ok().stdout, "backend calls"), 0);
    assert_eq!(cold, (std::fs::read(&rankings).unwrap(), std::fs::read(&traces).unwrap()));
}

#[test]
fn changed_parameters_still_hit_cache_for_identical_requests() {
    // Fusion weights do not enter the VQA request, so the cache still applies.
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    golden_rerank(dir.path(), &["--cache-dir", p(&cache)]).2.ok();
    let (_, _, run) = golden_rerank(dir.path(), &["--cache-dir", p(&cache), "--lambda-vqa", "0.5"]);
    assert_eq!(count_before(&run.ok().stdout, "backend calls"), 0);
}

/// Text fixtures answering each dataset triplet's prompt with that triplet's
/// committed questions.
fn text_fixtures(dir: &Path) -> PathBuf {
    let triplets = formats::load_triplets(&core_fixture("dataset/triplets.jsonl")).unwrap();
    let corpus = formats::load_question_corpus(&core_fixture("dataset/questions.jsonl")).unwrap();
    let path = dir.join("text_fixtures.jsonl");
    let store = RecordStore::open_append(&path).unwrap();
    for t in &triplets {
        let prompt = build_prompt(&t.query.modification_text).render();
        let output = serialize_question_list(&corpus[&t.query.query_id]);
        store.insert(&prompt_hash(&prompt), Value::String(output)).unwrap();
    }
    path
}

/// Every image of the query's category, target at rank 3.
fn dataset_cir_scores(dir: &Path) -> PathBuf {
    let triplets = formats::load_triplets(&core_fixture("dataset/triplets.jsonl")).unwrap();
    let index = formats::load_image_index(&core_fixture("dataset/image_index.jsonl")).unwrap();
    let mut records = Vec::new();
    for t in &triplets {
        let mut ids: Vec<&str> = index
            .iter()
            .filter(|r| r.category == t.query.category && r.image_id != t.target_image_id)
            .map(|r| r.image_id.as_str())
            .collect();
        ids.insert(2, &t.target_image_id);
        for (i, id) in ids.iter().enumerate() {
            records.push(CirScoreRecord {
                query_id: t.query.query_id.clone(),
                candidate_id: id.to_string(),
                score: 0.9 - 0.02 * i as f64,
            });
        }
    }
    let path = dir.join("cir.jsonl");
    formats::write_records(&path, formats::CIR_SCORES, &records).unwrap();
    path
}

#[test]
fn questions_rerank_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = text_fixtures(dir.path());
    let config = dir.path().join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "[rerank]\nn = 6\n\n[mock]\ntext_fixtures = {:?}\nstrict = true\n\n[paths]\ntriplets = {:?}\n",
            fixtures,
            core_fixture("dataset/triplets.jsonl")
        ),
    )
    .unwrap();
    let cache = dir.path().join("cache");
    let questions = dir.path().join("questions.jsonl");
    let q = |out: &Path| {
        vqarank(["--config", p(&config), "--cache-dir", p(&cache), "questions", "--out", p(out)]).ok()
    };

    let first = q(&questions);
    assert!(first.stdout.starts_with("9 queries, 20 questions"), "{}", first.stdout);
    assert_eq!(count_before(&first.stdout, "backend calls"), 9);
    assert_eq!(
        std::fs::read_to_string(&questions).unwrap(),
        std::fs::read_to_string(core_fixture("dataset/questions.jsonl")).unwrap()
    );

    let again = dir.path().join("questions-again.jsonl");
    assert_eq!(count_before(&q(&again).stdout, "backend calls"), 0);
    assert_eq!(std::fs::read(&questions).unwrap(), std::fs::read(&again).unwrap());

    let cir = dataset_cir_scores(dir.path());
    let rankings = dir.path().join("rankings.jsonl");
    let traces = dir.path().join("traces.jsonl");
    let rerank = vqarank([
        "--config",
        p(&config),
        "rerank",
        "--cir-scores",
        p(&cir),
        "--questions",
        p(&questions),
        "--rankings-out",
        p(&rankings),
        "--traces-out",
        p(&traces),
    ])
    .ok();
    assert_eq!(count_before(&rerank.stdout, "VQA requests"), 6 * 20);

    let report = dir.path().join("metrics.json");
    let eval = vqarank([
        "--config",
        p(&config),
        "eval",
        "--rankings",
        p(&rankings),
        "--out",
        p(&report),
        "--label",
        "pipeline",
    ])
    .ok();
    let lines: Vec<&str> = eval.stdout.lines().collect();
    let header: Vec<&str> = lines[1].split_whitespace().collect();
    assert_eq!(
        header,
        ["Method", "R@10", "R@50", "R@10", "R@50", "R@10", "R@50", "R@10", "R@50", "Global"]
    );
    assert!(lines[2].starts_with("pipeline"));
    // Each query has 12 candidates, so every target is inside the top 50.
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(metrics["overall"]["num_queries"], 9);
    assert_eq!(metrics["overall"]["r_at_50"], 100.0);
}

#[test]
fn malformed_triplets_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let triplets = dir.path().join("bad.jsonl");
    std::fs::write(
        &triplets,
        concat!(
            "{\"format\":\"vqarank-triplets\",\"version\":1}\n",
            "{\"query_id\":\"a\",\"candidate\":\"r\",\"target\":\"t\",\"captions\":[\"is red\",\"is long\"],\"category\":\"dress\"}\n",
            "{\"query_id\":\"b\",\"candidate\":\"r\",\"captions\":[\"is red\"]\n",
        ),
    )
    .unwrap();
    let run = vqarank(["questions", "--triplets", p(&triplets), "--out", p(&dir.path().join("q.jsonl"))]);
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("bad.jsonl:3:"), "{}", run.stderr);
}

fn build_dataset(dir: &Path, out: &str, image_index: &Path) -> common::Run {
    vqarank([
        "--seed",
        "7",
        "build-dataset",
        "--triplets",
        p(&core_fixture("dataset/triplets.jsonl")),
        "--questions",
        p(&core_fixture("dataset/questions.jsonl")),
        "--image-index",
        p(image_index),
        "--out",
        p(&dir.join(out)),
        "--report",
        p(&dir.join(format!("{out}.report.json"))),
    ])
}

#[test]
fn build_dataset_is_balanced_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let index = core_fixture("dataset/image_index.jsonl");
    let run = build_dataset(dir.path(), "a.jsonl", &index).ok();
    let printed: Value = serde_json::from_str(&run.stdout).unwrap();
    assert_eq!(printed["yes_fraction"], 0.5);
    let written: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.jsonl.report.json")).unwrap())
            .unwrap();
    assert_eq!(printed, written);
    assert!(written["per_category"].as_object().unwrap().len() == 3);

    build_dataset(dir.path(), "b.jsonl", &index).ok();
    assert_eq!(
        std::fs::read(dir.path().join("a.jsonl")).unwrap(),
        std::fs::read(dir.path().join("b.jsonl")).unwrap()
    );
}

#[test]
fn build_dataset_without_image_index_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = build_dataset(dir.path(), "a.jsonl", &dir.path().join("missing.jsonl"));
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("missing.jsonl"), "{}", run.stderr);
}

#[test]
fn trace_reports_each_question() {
    let out = vqarank([
        "trace",
        "--traces",
        p(&golden("traces.jsonl")),
        "--query",
        "q1",
        "--candidate",
        "img_a",
    ])
    .ok()
    .stdout;
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "query q1, candidate img_a (re-ranked)");
    assert_eq!(
        lines[1].split_whitespace().collect::<Vec<_>>(),
        ["question", "expected", "predicted", "p(expected)", "ok"]
    );
    assert!(lines[2].starts_with("Is the garment black?"));
    assert!(lines[2].ends_with("0.050000  no"), "{}", lines[2]);
    assert_eq!(lines[5], "mean p(expected) 0.083333, vqa_score 0.083333");
}

#[test]
fn trace_of_unknown_candidate_is_not_found() {
    let run = vqarank([
        "trace",
        "--traces",
        p(&golden("traces.jsonl")),
        "--query",
        "q1",
        "--candidate",
        "img_e",
    ]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("img_e"), "{}", run.stderr);
}

#[test]
fn eval_of_empty_rankings_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let rankings = dir.path().join("empty.jsonl");
    std::fs::write(&rankings, "{\"format\":\"vqarank-rankings\",\"version\":1}\n").unwrap();
    let run = vqarank(["eval", "--rankings", p(&rankings), "--triplets", p(&golden("triplets.jsonl"))]);
    assert_eq!(run.code, 2, "{}", run.stderr);
}

#[test]
fn sweep_prints_one_row_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let config = golden_config(dir.path());
    let out = dir.path().join("sweep.json");
    let run = vqarank(["--config", p(&config), "sweep", "--ns", "0,2,4", "--out", p(&out)]).ok();
    let rows: Vec<Vec<&str>> = run.stdout.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["0", "2", "4"]);
    assert_eq!(rows.iter().map(|r| r[2]).collect::<Vec<_>>(), ["0", "6", "12"]);
    assert!(out.exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vqarank(["rerank", "--bogus"]).code, 1);
    assert_eq!(vqarank(["--k", "0", "trace", "--query", "q", "--candidate", "c"]).code, 1);
    // No --triplets and no configured path.
    assert_eq!(vqarank(["questions", "--out", "/dev/null"]).code, 1);
    assert_eq!(vqarank(["--help"]).code, 0);
}

#[test]
fn missing_credentials_variable_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("live.toml");
    std::fs::write(
        &config,
        "[backend]\nmode = \"live\"\n\n[backend.vqa]\nbase_url = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\napi_key_env = \"VQARANK_TEST_UNSET_KEY\"\n",
    )
    .unwrap();
    let run = common::vqarank(
        ["--config", p(&config)]
            .into_iter()
            .chain(golden_paths())
            .collect::<Vec<_>>(),
    );
    assert_eq!(run.code, 1, "{}", run.stderr);
    assert!(run.stderr.contains("VQARANK_TEST_UNSET_KEY"));
}

fn golden_paths() -> Vec<&'static str> {
    let leak = |p: PathBuf| -> &'static str { Box::leak(p.into_os_string().into_string().unwrap().into_boxed_str()) };
    vec![
        "rerank",
        "--triplets",
        leak(golden("triplets.jsonl")),
        "--cir-scores",
        leak(golden("cir_scores.jsonl")),
        "--questions",
        leak(golden("questions.jsonl")),
        "--rankings-out",
        "/dev/null",
        "--traces-out",
        "/dev/null",
    ]
}

#[test]
fn unreachable_backend_exits_with_three() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("live.toml");
    std::fs::write(
        &config,
        format!(
            "[backend]\nmode = \"live\"\n\n[backend.vqa]\nbase_url = \"http://127.0.0.1:{port}/v1\"\nmodel = \"m\"\nmax_retries = 0\ntimeout_secs = 5\n"
        ),
    )
    .unwrap();
    let run = common::vqarank(["--config", p(&config)].into_iter().chain(golden_paths()).collect::<Vec<_>>());
    assert_eq!(run.code, 3, "{}", run.stderr);
}

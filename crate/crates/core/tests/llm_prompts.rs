mod common;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use common::*;
use modctx_core::llmclient::*;

const BASE_PROMPT: &str = "Du bist ein Forenmoderator und dafür zuständig, Kommentare unter einem Zeitungsartikel zu moderieren. Mache eine Prediction zur Moderationsentscheidung ob das Kommentar Online bleiben soll \"0\" oder Offline genommen werden soll \"1\". Das Kommentar ist: \"[COMMENT]\". Antworte ausschließlich im Json Format {\"Moderationsentscheidung\": prediction}";

#[test]
fn base_prompt_is_the_fixed_text() {
    let comment = "Völlig daneben, dieser Artikel.";
    let prompt = render_prompt(PromptVariant::Base, &PromptContext::comment(comment)).unwrap();
    assert_eq!(prompt, BASE_PROMPT.replace("[COMMENT]", comment));
}

#[test]
fn prompts_match_committed_goldens() {
    let ctx = golden_prompt_context();
    let dir = golden_dir().join("prompts");
    for variant in PromptVariant::ALL {
        let rendered = render_prompt(variant, &ctx).unwrap();
        let path = dir.join(format!("{}.txt", variant.name()));
        if updating_goldens() {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &rendered).unwrap();
        }
        let golden = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(rendered, golden, "{} drifted from its golden file", variant.name());
        assert!(rendered.starts_with(&BASE_PROMPT[..BASE_PROMPT.find("Mache").unwrap()]));
        assert!(rendered.contains(&ctx.comment));
    }
}

#[test]
fn context_appears_only_in_the_variants_that_use_it() {
    let ctx = golden_prompt_context();
    for variant in PromptVariant::ALL {
        let p = render_prompt(variant, &ctx).unwrap();
        let needs = variant.required_context();
        assert_eq!(
            p.contains(ctx.title.as_deref().unwrap()),
            needs.contains(&ContextField::Title),
            "{variant}"
        );
        assert_eq!(
            p.contains(ctx.path.as_deref().unwrap()),
            needs.contains(&ContextField::Path),
            "{variant}"
        );
        assert_eq!(p.contains("0.62"), needs.contains(&ContextField::Ratio), "{variant}");
        assert_eq!(
            p.contains("Beleidigungen"),
            needs.contains(&ContextField::ForumRules),
            "{variant}"
        );
        assert_eq!(
            p.contains("\"Stärke\": strength"),
            variant.requests_strength(),
            "{variant}"
        );
        assert_eq!(
            p.contains("\"Erklärung\": explanation"),
            variant.requests_explanation(),
            "{variant}"
        );
        assert!(p.ends_with('}'));
    }
}

#[test]
fn response_fixtures_parse_to_their_expected_decisions() {
    let fixtures = response_fixtures();
    assert!(fixtures.len() >= 30);
    for f in &fixtures {
        let v = parse_response(&f.response);
        assert_eq!(v.decision, f.expected, "reply {:?}", f.response);
        assert_eq!(v.raw_response, f.response);
    }
    let v = parse_response("{\"Moderationsentscheidung\": 1, \"Stärke\": \"0.7\", \"Erklärung\": \"Beleidigung\"}");
    assert_eq!((v.strength, v.explanation.as_deref()), (Some(0.7), Some("Beleidigung")));
}

/// Writes a transcript whose replies are drawn from the response fixtures.
fn write_replay_transcript() {
    let rows = replay_rows();
    let fixtures = response_fixtures();
    let pick = |want: Decision, i: usize| {
        let pool: Vec<&ResponseFixture> = fixtures.iter().filter(|f| f.expected == want).collect();
        pool[i % pool.len()].response.clone()
    };
    let records: Vec<TranscriptRecord> = replay_contexts(&rows)
        .iter()
        .zip(&rows)
        .enumerate()
        .map(|(i, (ctx, row))| {
            let correct = if row.label == 1 {
                Decision::Remove
            } else {
                Decision::Keep
            };
            let wrong = if row.label == 1 {
                Decision::Keep
            } else {
                Decision::Remove
            };
            let decision = match i % 10 {
                7 => Decision::Missing,
                2 | 5 => wrong,
                _ => correct,
            };
            TranscriptRecord {
                index: i,
                variant: REPLAY_VARIANT.name().into(),
                prompt: render_prompt(REPLAY_VARIANT, ctx).unwrap(),
                response: Some(pick(decision, i)),
                attempts: 1,
                error: None,
                started_at: "2024-03-01T10:00:00.000Z".into(),
                finished_at: "2024-03-01T10:00:01.000Z".into(),
            }
        })
        .collect();
    write_transcript(&test_data().join("replay/transcript.jsonl"), &records).unwrap();
}

#[test]
fn replayed_run_reproduces_the_committed_report() {
    let golden = golden_dir().join("replay_report.json");
    if updating_goldens() {
        write_replay_transcript();
        let (report, _) = replay_report();
        fs::write(&golden, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    }
    let (report, table) = replay_report();
    assert_eq!(
        serde_json::to_string_pretty(&report).unwrap(),
        fs::read_to_string(&golden).unwrap()
    );
    assert_eq!(report.missing_answers, Some(4));
    assert_eq!(report.n_evaluated, 36);
    assert!(table.contains("GPT_mod_title,"));
    let (again, table_again) = replay_report();
    assert_eq!((again, table_again), (report, table));
}

#[test]
fn stub_transport_is_deterministic_and_seed_dependent() {
    let contexts = replay_contexts(&replay_rows());
    let api = ApiConfig::default();
    let run = |seed| classify_batch(&contexts, PromptVariant::Title, &api, &StubTransport { seed }, None).unwrap();
    let a = run(1);
    let b = run(1);
    let c = run(2);
    let decisions = |r: &BatchRun| r.verdicts.iter().map(|v| v.decision).collect::<Vec<_>>();
    assert_eq!(decisions(&a), decisions(&b));
    assert_ne!(decisions(&a), decisions(&c));
    assert_eq!(a.log.transport, "stub(seed=1)");
    assert_eq!(
        a.log.missing_answers,
        a.verdicts.iter().filter(|v| v.decision == Decision::Missing).count()
    );
}

struct Captured {
    request_lines: Vec<String>,
    bodies: Vec<String>,
}

/// Minimal HTTP/1.1 server answering each connection with the next canned
/// `(status, body)` pair.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Captured>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let captured = Arc::new(Mutex::new(Captured {
        request_lines: Vec::new(),
        bodies: Vec::new(),
    }));
    let sink = captured.clone();
    thread::spawn(move || {
        let mut replies = replies.into_iter();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                headers.push(line.trim_end().to_string());
            }
            let len = headers
                .iter()
                .find_map(|h| {
                    h.to_ascii_lowercase()
                        .strip_prefix("content-length:")
                        .map(|v| v.trim().parse::<usize>().unwrap())
                })
                .unwrap_or(0);
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            {
                let mut c = sink.lock().unwrap();
                c.request_lines.extend(headers);
                c.bodies.push(String::from_utf8(body).unwrap());
            }
            let Some((status, text)) = replies.next() else { return };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    (format!("http://{addr}/v1/chat/completions"), captured)
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn api_for(endpoint: String, key_env: &str) -> ApiConfig {
    ApiConfig {
        endpoint,
        concurrency: 1,
        max_retries: 2,
        backoff_base_ms: 1,
        backoff_max_ms: 5,
        timeout_secs: 5,
        api_key_env: key_env.into(),
        ..ApiConfig::default()
    }
}

#[test]
fn http_transport_retries_rate_limits_and_sends_the_configured_request() {
    std::env::set_var("MODCTX_TEST_KEY_RETRY", "sk-test-123");
    let (endpoint, captured) = mock_server(vec![
        (429, "{\"error\": \"slow down\"}".into()),
        (200, completion("```json\n{\"Moderationsentscheidung\": 1}\n```")),
        (200, completion("Das kann ich nicht beurteilen.")),
    ]);
    let api = api_for(endpoint, "MODCTX_TEST_KEY_RETRY");
    let transport = HttpTransport::new(&api);
    let contexts = [
        PromptContext::comment("Du Idiot."),
        PromptContext::comment("Schöner Artikel."),
    ];
    let run = classify_batch(&contexts, PromptVariant::Base, &api, &transport, None).unwrap();
    assert_eq!(run.verdicts[0].decision, Decision::Remove);
    assert_eq!(run.verdicts[1].decision, Decision::Missing);
    assert_eq!((run.log.retries, run.log.missing_answers), (1, 1));
    assert_eq!(run.transcript[0].attempts, 2);

    let c = captured.lock().unwrap();
    assert!(c
        .request_lines
        .iter()
        .any(|h| h.eq_ignore_ascii_case("authorization: Bearer sk-test-123")));
    let body: serde_json::Value = serde_json::from_str(&c.bodies[0]).unwrap();
    assert_eq!(body["model"], "gpt-3.5-turbo");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(
        body["messages"][0]["content"],
        render_prompt(PromptVariant::Base, &contexts[0]).unwrap()
    );
}

#[test]
fn http_transport_gives_up_after_the_retry_budget() {
    let (endpoint, _) = mock_server(vec![(503, "{}".into()); 3]);
    let api = api_for(endpoint, "MODCTX_TEST_KEY_UNSET");
    let run = classify_batch(
        &[PromptContext::comment("x")],
        PromptVariant::Base,
        &api,
        &HttpTransport::new(&api),
        None,
    )
    .unwrap();
    assert_eq!(run.log.retry_exhausted, vec![0]);
    assert_eq!(run.transcript[0].attempts, 3);
    assert_eq!(run.verdicts[0].decision, Decision::Missing);
}

#[test]
fn http_authentication_failure_aborts_the_batch() {
    let (endpoint, _) = mock_server(vec![(401, "{\"error\": \"invalid key\"}".into()); 4]);
    let api = api_for(endpoint, "MODCTX_TEST_KEY_UNSET");
    let contexts: Vec<PromptContext> = (0..4).map(|i| PromptContext::comment(format!("k{i}"))).collect();
    let err = classify_batch(&contexts, PromptVariant::Base, &api, &HttpTransport::new(&api), None).unwrap_err();
    assert!(matches!(err, LlmError::Auth { status: 401, .. }), "{err}");
}

#[test]
fn live_transcript_is_written_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.jsonl");
    let contexts = replay_contexts(&replay_rows());
    let api = ApiConfig {
        concurrency: 3,
        ..ApiConfig::default()
    };
    let live = classify_batch(
        &contexts,
        PromptVariant::Title,
        &api,
        &StubTransport { seed: 4 },
        Some(&path),
    )
    .unwrap();
    let mut recorded = read_transcript(&path).unwrap();
    recorded.sort_by_key(|r| r.index);
    assert_eq!(recorded, live.transcript);
    let replayed = classify_batch(
        &contexts,
        PromptVariant::Title,
        &api,
        &ReplayTransport::new(recorded),
        None,
    )
    .unwrap();
    assert_eq!(replayed.verdicts, live.verdicts);
    assert!(matches!(
        render_prompt(PromptVariant::TitleRatio, &PromptContext::comment("x")),
        Err(LlmError::MissingContext { .. })
    ));
}

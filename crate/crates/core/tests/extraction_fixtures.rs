//! Extraction against the sample stories, a frozen agent reply and the
//! agent fallbacks.

mod common;

use std::collections::BTreeMap;

use bame_core::backend::mock::prompt_hash;
use bame_core::backend::{Backend, BackendConfig, BackendError, ChatMessage, MockScript};
use bame_core::demographics::{EthnicityCategory, Gender};
use bame_core::extraction::{
    agreement_rate, disagreements, rule_based_extract, write_disagreement_csv, ExtractionMethod, Extractor,
};
use bame_core::templates::PromptTemplates;

const FROZEN_REPLY: &str = include_str!("fixtures/agent_reply_table5.txt");

fn stories() -> Vec<String> {
    common::story_fixtures().into_iter().map(|(s, _, _)| s.to_string()).collect()
}

/// A mock that answers exactly one extraction prompt with `reply`.
fn replay_backend(stories: &[String], reply: &str) -> Backend {
    let prompt = PromptTemplates::default()
        .extraction_agent
        .render(&BTreeMap::from([("stories", Extractor::story_block(stories))]))
        .unwrap();
    let mut script = MockScript::seeded(0);
    script.synthetic = None;
    script.replay.insert(prompt_hash(&[ChatMessage::user(prompt)]), reply.to_string());
    Backend::from_config(&BackendConfig::mock("agent", script)).unwrap()
}

#[test]
fn sample_stories_resolve_to_expected_labels() {
    for (story, g, e) in common::story_fixtures() {
        let r = rule_based_extract(story);
        assert_eq!((r.resolved.gender, r.resolved.ethnicity), (g, e), "{story}");
        assert_eq!(r.method, ExtractionMethod::RuleBased);
    }
}

#[test]
fn origin_text_is_kept_verbatim() {
    let cases = [
        (0, Some("Greek")),
        (5, Some("African American")),
        (6, Some("Mexican-American")),
        (12, Some("Ethiopian-American")),
        (13, Some("White")),
        (7, None),
    ];
    let s = common::story_fixtures();
    for (i, want) in cases {
        assert_eq!(rule_based_extract(s[i].0).origin_text.as_deref(), want, "story {}", i + 1);
    }
}

#[test]
fn frozen_agent_reply_agrees_with_rules() {
    let stories = stories();
    let ex = Extractor::default();
    let batch = ex.extract_labels(&stories, &replay_backend(&stories, FROZEN_REPLY), &PromptTemplates::default().extraction_agent, "t").unwrap();
    assert!(!batch.fallback);
    assert!(batch.extractions.iter().all(|x| x.method == ExtractionMethod::Agent));
    let rules = ex.rule_based_batch(&stories);
    let rate = agreement_rate(&batch.extractions, &rules);
    assert!(rate >= 0.95, "agreement {rate}");

    // the agent reads "French patisserie" as the baker's origin
    let diffs = disagreements("fp-", &batch.extractions, &rules);
    assert_eq!(diffs.len(), 1);
    assert_eq!(diffs[0].story_id, "fp-8");
    assert_eq!(diffs[0].agent_origin, "French");
    let mut csv = Vec::new();
    write_disagreement_csv(&mut csv, &diffs).unwrap();
    assert_eq!(
        String::from_utf8(csv).unwrap(),
        "story_id,agent_gender,rule_gender,agent_origin,rule_origin\nfp-8,female,female,French,\n"
    );
}

#[test]
fn omitted_stories_fall_back_one_by_one() {
    let stories = stories();
    let partial: String = FROZEN_REPLY.lines().filter(|l| !l.starts_with("4 |") && !l.starts_with("13 |")).collect::<Vec<_>>().join("\n");
    let batch = Extractor::default()
        .extract_labels(&stories, &replay_backend(&stories, &partial), &PromptTemplates::default().extraction_agent, "t")
        .unwrap();
    assert!(!batch.fallback);
    for (i, x) in batch.extractions.iter().enumerate() {
        let want = if i == 3 || i == 12 { ExtractionMethod::RuleBased } else { ExtractionMethod::Agent };
        assert_eq!(x.method, want, "story {}", i + 1);
    }
    assert_eq!(batch.extractions[3].resolved.ethnicity, EthnicityCategory::Api);
    assert_eq!(batch.extractions[12].resolved.gender, Gender::Unstated);
}

#[test]
fn failed_agent_call_falls_back_for_the_batch() {
    let stories = stories();
    let mut script = MockScript::seeded(0);
    script.synthetic = None;
    let backend = Backend::from_config(&BackendConfig::mock("agent", script)).unwrap();
    let ex = Extractor::default();
    let batch = ex.extract_labels(&stories, &backend, &PromptTemplates::default().extraction_agent, "t").unwrap();
    assert!(batch.fallback);
    assert!(matches!(batch.error, Some(BackendError::MockMiss(_))));
    assert_eq!(batch.extractions, ex.rule_based_batch(&stories));
    assert!(ex.extract_labels(&[], &backend, &PromptTemplates::default().extraction_agent, "t").is_err());
}

#[test]
fn classification_examples() {
    let table = bame_core::demographics::MappingTable::default_table();
    for (origin, want) in common::classification_fixtures() {
        assert_eq!(bame_core::demographics::classify_origin(origin, &table), want, "{origin}");
    }
}

use std::sync::Arc;

use magicforge_core::backends::{BackendError, Backends, MockNoise, TextGenerator, TextRequest};
use magicforge_core::pipeline::{Pipeline, PipelineConfig, PipelineError, RUN_REPORT_FILE};
use magicforge_core::prompt::ConditionSet;
use magicforge_core::types::rle_decode;
use magicforge_core::{Execution, Manifest, Vocabulary};

fn vocab() -> Vocabulary {
    Vocabulary::new(["cat", "dog", "bus", "kite", "vase", "boot", "apple", "clock", "lamp", "horse"]).unwrap()
}

fn config(target: usize, k: usize, seed: u64) -> PipelineConfig {
    PipelineConfig { samples_target: target, categories_per_sample: k, width: 48, height: 40, seed, ..Default::default() }
}

fn pipeline(cfg: PipelineConfig, noise: MockNoise) -> Pipeline {
    let v = vocab();
    let b = Backends::mock(&v, noise);
    Pipeline::new(v, cfg, ConditionSet::default(), b)
}

#[test]
fn noiseless_masks_match_renderer_truth() {
    let v = vocab();
    let p = pipeline(config(20, 2, 4), MockNoise::default());
    let renderer = magicforge_core::backends::MockBackend::new(v.clone(), MockNoise::default());
    let (m, report) = p.run(Execution::Parallel, |_| Ok(())).unwrap();
    assert_eq!(report.rejected, 0);
    for r in &m.records {
        let scene = renderer.render_scene(&r.text, r.seed, 48, 40);
        for mask in &r.masks {
            assert_eq!(rle_decode(mask).unwrap(), scene.truth_mask(mask.category_id).data, "{}", r.id);
        }
    }
}

#[test]
fn output_depends_only_on_seed() {
    let a = pipeline(config(24, 1, 9), MockNoise::default());
    let b = pipeline(PipelineConfig { wave_size: 5, ..config(24, 1, 9) }, MockNoise::default());
    let (ma, _) = a.run(Execution::Parallel, |_| Ok(())).unwrap();
    let (mb, _) = b.run(Execution::Sequential, |_| Ok(())).unwrap();
    assert_eq!(ma.to_jsonl(), mb.to_jsonl());
    let (mc, _) = pipeline(config(24, 1, 10), MockNoise::default()).run(Execution::Parallel, |_| Ok(())).unwrap();
    assert_ne!(ma.to_jsonl(), mc.to_jsonl());
}

#[test]
fn dropout_rejects_but_target_is_met() {
    let noise = MockNoise { dropout: 0.5, jitter_sigma: 0.0, seed: 1 };
    let (m, report) = pipeline(config(30, 1, 2), noise).run(Execution::Parallel, |_| Ok(())).unwrap();
    assert_eq!(m.records.len(), 30);
    assert_eq!(report.accepted, 30);
    assert!(report.rejected > 0);
    assert_eq!(report.attempts, report.accepted + report.rejected);
    assert_eq!(report.rejected_by_reason.values().sum::<usize>(), report.rejected);
    assert!(m.validate(&vocab(), |_| Some((48, 40))).is_empty());
}

#[test]
fn exhausted_budget_is_an_error() {
    let noise = MockNoise { dropout: 1.0, jitter_sigma: 0.0, seed: 1 };
    let cfg = PipelineConfig { retry_budget: 5, ..config(3, 1, 0) };
    let err = pipeline(cfg, noise).run(Execution::Parallel, |_| Ok(())).unwrap_err();
    assert!(matches!(err, PipelineError::RetryBudgetExhausted { accepted: 0, rejected: 6, .. }), "{err}");
}

/// Never mentions the requested category.
struct Forgetful;

impl TextGenerator for Forgetful {
    fn id(&self) -> String {
        "forgetful".into()
    }
    fn generate_text(&self, _: &TextRequest<'_>) -> Result<String, BackendError> {
        Ok("An empty meadow at noon.".into())
    }
}

#[test]
fn text_without_the_category_is_rejected() {
    let v = vocab();
    let mut b = Backends::mock(&v, MockNoise::default());
    b.text = Arc::new(Forgetful);
    let cfg = PipelineConfig { retry_budget: 3, ..config(2, 1, 0) };
    let p = Pipeline::new(v, cfg, ConditionSet::default(), b);
    let err = p.run(Execution::Sequential, |_| Ok(())).unwrap_err();
    assert!(matches!(err, PipelineError::RetryBudgetExhausted { .. }));
    let (cats, s) = p.attempt_plan(0);
    let r = p.synthesize_sample("x", &cats, s).unwrap_err();
    assert!(r.to_string().contains("category_absent") || r.to_string().contains("absent"), "{r}");
}

#[test]
fn directory_output_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(config(6, 2, 3), MockNoise::default());
    let echo = serde_json::json!({"marker": 42});
    let (m, _) = p.run_to_dir(dir.path(), Execution::Parallel, Some(&echo)).unwrap();
    let (loaded, v) = Manifest::load(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(v, vocab());
    for r in &m.records {
        assert!(dir.path().join(&r.image_ref).is_file());
        assert!(dir.path().join(&r.counterfactual_image_ref).is_file());
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(RUN_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["config"]["marker"], 42);
    assert_eq!(report["accepted"], 6);
}

#[test]
fn bad_config_is_rejected() {
    let err = pipeline(config(0, 1, 0), MockNoise::default()).run(Execution::Sequential, |_| Ok(())).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
    let err = pipeline(config(1, 3, 0), MockNoise::default()).run(Execution::Sequential, |_| Ok(())).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
}

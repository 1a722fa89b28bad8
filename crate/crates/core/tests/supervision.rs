mod common;

use affedit_core::supervision::{
    MllmClient, ResponseCache, StubSupervisor, SupervisorPrompt, collect_responses, collect_responses_many,
    default_prompts,
};
use affedit_core::Result;
use common::test_image;
use image::RgbImage;

struct Silent;

impl MllmClient for Silent {
    fn respond(&self, _image: &RgbImage, _prompt: &SupervisorPrompt) -> Result<String> {
        Ok("   ".into())
    }
}

#[test]
fn cache_serves_repeat_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let img = test_image(16, 1);
    let stub = StubSupervisor::new();
    let first = collect_responses(&img, &default_prompts(), &stub, Some(&cache)).unwrap();
    let second = collect_responses(&img, &default_prompts(), &stub, Some(&cache)).unwrap();
    assert_eq!(first, second);
    assert_eq!(stub.calls(), 4);
    assert_eq!(cache.hits(), 4);
}

#[test]
fn empty_answers_are_flagged_and_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ResponseCache::open(dir.path()).unwrap();
    let img = test_image(16, 2);
    let out = collect_responses(&img, &default_prompts(), &Silent, Some(&cache)).unwrap();
    assert!(out.iter().all(|r| r.flagged));
    let again = collect_responses(&img, &default_prompts(), &StubSupervisor::new(), Some(&cache)).unwrap();
    assert!(again.iter().all(|r| !r.flagged));
}

#[test]
fn parallel_collection_keeps_order() {
    let imgs: Vec<_> = (0..5).map(|i| test_image(16, i)).collect();
    let refs: Vec<_> = imgs.iter().collect();
    let stub = StubSupervisor::new();
    let many = collect_responses_many(&refs, &default_prompts(), &stub, None, 3).unwrap();
    for (img, got) in imgs.iter().zip(&many) {
        assert_eq!(got, &collect_responses(img, &default_prompts(), &stub, None).unwrap());
    }
}

#[test]
fn fixtures_override_generated_answers() {
    let img = test_image(16, 3);
    let stub = StubSupervisor::new().with_fixture(&img, "atmosphere", "a tense night");
    let out = collect_responses(&img, &default_prompts(), &stub, None).unwrap();
    assert_eq!(out[3].text, "a tense night");
}

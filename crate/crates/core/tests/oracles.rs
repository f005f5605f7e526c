mod common;

use common::cases::*;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-9;

fn all_within(label: &str, err: impl Fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let d = err(seed);
        assert!(d <= TOL, "{label} seed {seed}: max abs diff {d:e}");
    }
}

#[test]
fn pwam_matches_oracle() {
    all_within("pwam", pwam_error);
}

#[test]
fn query_update_matches_oracle() {
    all_within("query update", query_update_error);
}

#[test]
fn query_text_alignment_and_linguistic_update_match_oracle() {
    all_within("alignment", alignment_error);
}

#[test]
fn dynamic_feature_select_matches_oracle() {
    all_within("dynamic selection", dynamic_select_error);
}

#[test]
fn channel_attention_matches_oracle_for_one_and_three_positions() {
    all_within("channel attention m=1", |s| channel_attention_error(s, 1));
    all_within("channel attention m=3", |s| channel_attention_error(s, 3));
}

#[test]
fn spatial_attention_matches_oracle_for_three_positions() {
    all_within("spatial attention", |s| spatial_attention_error(s, 3));
}

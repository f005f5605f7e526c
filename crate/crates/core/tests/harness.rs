use sbanet_core::ablation::*;
use sbanet_core::data::{generate_dataset, SceneSpec};
use sbanet_core::gradcheck::{self, GradcheckOptions, MODULES};
use sbanet_core::trainer::TrainOptions;
use sbanet_core::{CoreError, ModelConfig};

#[test]
fn plans_have_the_table_layouts() {
    let base = ModelConfig::default();
    let names = |p: &str| plan(p, &base).unwrap().variants.into_iter().map(|v| v.name).collect::<Vec<_>>();
    assert_eq!(names("table3"), ["LAVT (baseline)", "LAVT + DFS", "LAVT + BAM", "LAVT + TCSA", "SBANet"]);
    assert_eq!(
        names("table4-variants"),
        ["PWAM", "+ self-attention", "+ cross-attention", "+ learnable-token (w/o pe)", "BAM"]
    );
    assert_eq!(names("table4-tokens"), ["BAM-128", "BAM-225", "BAM-256", "BAM-512", "BAM-1024", "BAM-pyramid"]);
    assert_eq!(names("table5"), ["Default", "+ channel", "+ spatial", "TCSA (w/o text)", "TCSA"]);
    for p in PLANS {
        let mut n = names(p);
        let len = n.len();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), len, "{p}");
    }
}

#[test]
fn plan_flags() {
    let base = ModelConfig::default();
    let t3 = plan("table3", &base).unwrap();
    let first = &t3.variants[0].config;
    assert!(!first.use_dfs && !first.use_bam && !first.use_tcsa);
    let last = &t3.variants[4].config;
    assert!(last.use_dfs && last.use_bam && last.use_tcsa && last.tcsa_text);
    let t5 = plan("table5", &base).unwrap();
    assert!(!t5.variants[3].config.tcsa_text && t5.variants[4].config.tcsa_text);
    let tokens = plan("table4-tokens", &base).unwrap();
    assert!(tokens.notes.iter().any(|n| n.starts_with("token mapping:")));
    assert_eq!(tokens.variants[5].config.m_override, Some(vec![2, 5, 9, 18]));
    for p in PLANS {
        for v in plan(p, &base).unwrap().variants {
            assert_eq!(v.config.seed, base.seed);
            assert_eq!(v.config.image_size, base.image_size);
        }
    }
}

#[test]
fn unknown_plan_lists_the_plans() {
    match plan("table9", &ModelConfig::default()) {
        Err(CoreError::Config(msg)) => {
            for p in PLANS {
                assert!(msg.contains(p), "{msg}");
            }
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn ablation_run_emits_one_row_per_variant() {
    let base = ModelConfig { image_size: 32, base_channels: 8, text_dim: 16, guidance_dim: 16, ..ModelConfig::default() };
    let data = generate_dataset(1, 2, &SceneSpec::with_size(32)).unwrap();
    let p = plan("table5", &base).unwrap();
    let opts = TrainOptions { epochs: 1, batch: 2, ..TrainOptions::default() };
    let mut seen = 0;
    let rows = run_plan(&p, &data, &data, &opts, 4, |_| seen += 1).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(seen, 5);
    let csv = ablation_csv(&p, &rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "# plan: table5");
    assert_eq!(lines[1], ABLATION_HEADER);
    assert_eq!(lines.len(), 2 + 5);
    assert!(lines[2].starts_with("Default,4,"));
    assert_eq!(lines[2].split(',').count(), ABLATION_HEADER.split(',').count());
    assert_eq!(rows, run_plan(&p, &data, &data, &opts, 4, |_| {}).unwrap());
}

#[test]
fn every_gradient_check_passes() {
    let results = gradcheck::run("all", &GradcheckOptions::default()).unwrap();
    for m in MODULES {
        assert!(results.iter().any(|r| r.module == m), "{m}");
    }
    for r in &results {
        assert!(r.passed(), "{}", r.line());
        assert!(r.line().starts_with("PASS"));
        assert!(r.line().contains("max_rel_err="));
    }
    let names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
    for n in ["pwam", "bam_forward", "tcsa_forward", "decode", "model_forward_ce_loss", "matmul", "softmax"] {
        assert!(names.contains(&n), "{n}");
    }
}

#[test]
fn injected_sign_flip_is_reported() {
    let opts = GradcheckOptions { sign_flip: Some("softmax"), ..GradcheckOptions::default() };
    let results = gradcheck::run("tensor", &opts).unwrap();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    assert!(failed.contains(&"softmax"), "{failed:?}");
    let bam = gradcheck::run("bam", &opts).unwrap();
    assert!(bam.iter().any(|r| r.name == "attention" && !r.passed()));
}

#[test]
fn unknown_gradcheck_module() {
    match gradcheck::run("decoder", &GradcheckOptions::default()) {
        Err(CoreError::Config(msg)) => assert!(msg.contains("tensor") && msg.contains("model"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

//! Named ablation plans and the train-then-evaluate loop that runs them.

use serde::{Deserialize, Serialize};

use crate::bam::TextUpdate;
use crate::config::ModelConfig;
use crate::data::Sample;
use crate::error::{CoreError, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::trainer::{evaluate, train, TrainOptions};

pub const PLANS: [&str; 4] = ["table3", "table4-variants", "table4-tokens", "table5"];

/// Full-scale learnable-token counts and their toy equivalents, scaled so
/// that the reference count of 225 lands on the default of 4.
pub const TOKEN_MAP: [(&str, [usize; 4]); 6] = [
    ("128", [2; 4]),
    ("225", [4; 4]),
    ("256", [5; 4]),
    ("512", [9; 4]),
    ("1024", [18; 4]),
    ("pyramid", [2, 5, 9, 18]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub name: String,
    pub variants: Vec<Variant>,
    /// Extra provenance lines emitted as CSV comments.
    pub notes: Vec<String>,
}

fn v(name: &str, config: ModelConfig) -> Variant {
    Variant { name: name.to_string(), config }
}

/// Builds plan `name` on top of `base`, whose geometry and seed are kept.
pub fn plan(name: &str, base: &ModelConfig) -> Result<AblationPlan> {
    let plain = ModelConfig { use_dfs: false, use_bam: false, use_tcsa: false, ..base.clone() };
    let full = ModelConfig { use_dfs: true, use_bam: true, use_tcsa: true, ..plain.clone() };
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = plain.clone();
        f(&mut c);
        c
    };
    let mut notes = Vec::new();
    let variants = match name {
        "table3" => vec![
            v("LAVT (baseline)", plain.clone()),
            v("LAVT + DFS", with(&|c| c.use_dfs = true)),
            v("LAVT + BAM", with(&|c| {
                c.use_dfs = true;
                c.use_bam = true;
            })),
            v("LAVT + TCSA", with(&|c| c.use_tcsa = true)),
            v("SBANet", full),
        ],
        "table4-variants" => {
            let update = |u: TextUpdate, dfs: bool| {
                with(&move |c| {
                    c.use_bam = true;
                    c.use_dfs = dfs;
                    c.bam_variant = u;
                })
            };
            vec![
                v("PWAM", plain.clone()),
                v("+ self-attention", update(TextUpdate::SelfAttn, false)),
                v("+ cross-attention", update(TextUpdate::CrossAttn, false)),
                v("+ learnable-token (w/o pe)", update(TextUpdate::LearnableNoPe, true)),
                v("BAM", update(TextUpdate::Learnable, true)),
            ]
        }
        "table4-tokens" => {
            notes.push(format!(
                "token mapping: {}",
                TOKEN_MAP.iter().map(|(k, m)| format!("{k}->{m:?}")).collect::<Vec<_>>().join(" ")
            ));
            TOKEN_MAP
                .iter()
                .map(|(label, m)| {
                    let config = with(&|c| {
                        c.use_bam = true;
                        c.use_dfs = true;
                        c.m_override = Some(m.to_vec());
                    });
                    v(&format!("BAM-{label}"), config)
                })
                .collect()
        }
        "table5" => {
            let tcsa = |channel: bool, spatial: bool, text: bool| {
                with(&move |c| {
                    c.use_tcsa = true;
                    c.tcsa_channel = channel;
                    c.tcsa_spatial = spatial;
                    c.tcsa_text = text;
                })
            };
            vec![
                v("Default", plain.clone()),
                v("+ channel", tcsa(true, false, false)),
                v("+ spatial", tcsa(false, true, false)),
                v("TCSA (w/o text)", tcsa(true, true, false)),
                v("TCSA", tcsa(true, true, true)),
            ]
        }
        other => {
            return Err(CoreError::Config(format!("unknown ablation plan {other:?}; expected one of {}", PLANS.join(", "))))
        }
    };
    for var in &variants {
        var.config.validate().map_err(|e| CoreError::Config(format!("variant {:?}: {e}", var.name)))?;
    }
    Ok(AblationPlan { name: name.to_string(), variants, notes })
}

/// Trains a fresh model for `cfg` and evaluates it on `test`.
pub fn run_variant(cfg: &ModelConfig, train_set: &[Sample], test_set: &[Sample], opts: &TrainOptions) -> Result<MetricsReport> {
    let (model, mut store) = Model::build(cfg)?;
    train(&model, &mut store, train_set, opts)?;
    evaluate(&model, &store, test_set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs every variant with the model and shuffling seeds both set to `seed`.
pub fn run_plan(
    plan: &AblationPlan,
    train_set: &[Sample],
    test_set: &[Sample],
    opts: &TrainOptions,
    seed: u64,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(plan.variants.len());
    for var in &plan.variants {
        let cfg = ModelConfig { seed, ..var.config.clone() };
        let report = run_variant(&cfg, train_set, test_set, &TrainOptions { seed, ..opts.clone() })?;
        let row = AblationRow { variant: var.name.clone(), seed, report };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "method,seed,Pr@0.5,Pr@0.7,Pr@0.9,oIoU,mIoU";

/// Table-shaped CSV: notes as `#` comments, then one row per variant.
pub fn ablation_csv(plan: &AblationPlan, rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("# plan: {}\n", plan.name));
    for n in &plan.notes {
        out.push_str(&format!("# {n}\n"));
    }
    out.push_str(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let pr = |t| r.report.precision_at(t).unwrap_or(f64::NAN);
        let name = if r.variant.contains(',') { format!("\"{}\"", r.variant) } else { r.variant.clone() };
        out.push_str(&format!(
            "{name},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.seed,
            pr(0.5),
            pr(0.7),
            pr(0.9),
            r.report.oiou,
            r.report.miou
        ));
    }
    out
}

//! Model geometry and ablation switches.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bam::{StageSpec, TextUpdate};
use crate::encoders::{channel_plan, STAGES};
use crate::error::{config_err, CoreError, Result};
use crate::tcsa::TcsaSpec;

/// Flat, serializable model description. Unknown keys are rejected when
/// parsing so that a misspelled switch cannot silently fall back to a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_stride: usize,
    pub base_channels: usize,
    pub text_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Learnable query tokens per stage.
    pub num_queries: usize,
    /// Per-stage token counts; replaces `num_queries` when set.
    pub m_override: Option<Vec<usize>>,
    pub pyramid_group: Vec<usize>,
    pub guidance_dim: usize,
    pub tcsa_heads: usize,
    pub pwam_heads: usize,
    /// 1-based stage whose resolution is the aggregator's common grid.
    pub grid_stage: usize,
    pub use_dfs: bool,
    pub use_bam: bool,
    pub bam_variant: TextUpdate,
    pub use_tcsa: bool,
    pub tcsa_channel: bool,
    pub tcsa_spatial: bool,
    pub tcsa_text: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_stride: 4,
            base_channels: 16,
            text_dim: 32,
            max_len: 16,
            vocab_size: crate::data::VOCAB.len(),
            num_queries: 4,
            m_override: None,
            pyramid_group: vec![1, 2, 3, 6],
            guidance_dim: 32,
            tcsa_heads: 4,
            pwam_heads: 1,
            grid_stage: 2,
            use_dfs: true,
            use_bam: true,
            bam_variant: TextUpdate::Learnable,
            use_tcsa: true,
            tcsa_channel: true,
            tcsa_spatial: true,
            tcsa_text: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every alignment and aggregation component switched off.
    pub fn baseline() -> Self {
        Self { use_dfs: false, use_bam: false, use_tcsa: false, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn channels(&self) -> [usize; STAGES] {
        channel_plan(self.base_channels)
    }

    /// Side length of each stage's map.
    pub fn stage_sizes(&self) -> [usize; STAGES] {
        let mut out = [0; STAGES];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.image_size / (self.patch_stride << i);
        }
        out
    }

    pub fn queries(&self, stage: usize) -> usize {
        match &self.m_override {
            Some(m) => m[stage],
            None => self.num_queries,
        }
    }

    /// Pyramid bins that fit a `side×side` map, in configured order.
    pub fn feasible_group(&self, side: usize) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for &g in &self.pyramid_group {
            if g >= 1 && g <= side && !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn stage_spec(&self, stage: usize) -> StageSpec {
        let c = self.channels()[stage];
        let side = self.stage_sizes()[stage];
        StageSpec {
            channels: c,
            text_dim: self.text_dim,
            queries: self.queries(stage),
            pwam_heads: self.pwam_heads,
            text_update: self.use_bam.then_some(self.bam_variant),
            group: self.use_dfs.then(|| self.feasible_group(side)),
        }
    }

    pub fn tcsa_spec(&self) -> Option<TcsaSpec> {
        self.use_tcsa.then(|| {
            let side = self.stage_sizes()[self.grid_stage - 1];
            TcsaSpec {
                channels: self.channels().to_vec(),
                text_dim: self.text_dim,
                guidance: self.guidance_dim,
                heads: self.tcsa_heads,
                grid: (side, side),
                channel: self.tcsa_channel,
                spatial: self.tcsa_spatial,
                text: self.tcsa_text,
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("image_size", self.image_size),
            ("patch_stride", self.patch_stride),
            ("base_channels", self.base_channels),
            ("text_dim", self.text_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("num_queries", self.num_queries),
            ("guidance_dim", self.guidance_dim),
            ("tcsa_heads", self.tcsa_heads),
            ("pwam_heads", self.pwam_heads),
        ];
        if let Some((key, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{key} must be positive"));
        }
        let multiple = self.patch_stride << (STAGES - 1);
        if !self.image_size.is_multiple_of(multiple) {
            return config_err(format!(
                "image_size {} must be divisible by {multiple} (patch_stride · 8)",
                self.image_size
            ));
        }
        if let Some(m) = &self.m_override {
            if m.len() != STAGES || m.contains(&0) {
                return config_err(format!("m_override needs {STAGES} positive entries, got {m:?}"));
            }
        }
        if self.use_dfs && (0..STAGES).any(|i| self.feasible_group(self.stage_sizes()[i]).is_empty()) {
            return config_err(format!("pyramid_group {:?} has no bin that fits every stage", self.pyramid_group));
        }
        for (i, &c) in self.channels().iter().enumerate() {
            if c % self.pwam_heads != 0 {
                return config_err(format!("pwam_heads {} does not divide stage {} width {c}", self.pwam_heads, i + 1));
            }
        }
        if !(1..=STAGES).contains(&self.grid_stage) {
            return config_err(format!("grid_stage must lie in 1..={STAGES}, got {}", self.grid_stage));
        }
        if let Some(spec) = self.tcsa_spec() {
            let cc = spec.concat_width();
            if cc % self.tcsa_heads != 0 || self.channels().iter().any(|c| c % self.tcsa_heads != 0) {
                return config_err(format!(
                    "tcsa_heads {} must divide every stage width and the concatenated width {cc}",
                    self.tcsa_heads
                ));
            }
        }
        Ok(())
    }
}

//! Run configuration: named presets, JSON overlays and `--set` overrides.

use std::path::Path;

use latentmoe::experts::{ExpertBackend, ExpertTiles};
use latentmoe::layer::{ExecConfig, LayerDims, RouterMode};
use latentmoe::router::RouteBlocks;
use latentmoe::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const PRESETS: [&str; 4] = ["default", "toy", "table2-2B", "table2-4B"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub d: usize,
    pub n_heads: usize,
    pub d_h: usize,
    pub n_experts: usize,
    pub k: usize,
    pub d_e: usize,
    pub n_layers: usize,
    pub separate_routing: bool,
}

impl ModelConfig {
    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.d,
            n_heads: self.n_heads,
            d_h: self.d_h,
            n_experts: self.n_experts,
            k: self.k,
            d_e: self.d_e,
            n_layers: self.n_layers,
            separate_routing: self.separate_routing,
        }
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }

    fn validate(&self, section: &str) -> Result<(), CliError> {
        if self.batch == 0 || self.seq_len == 0 {
            return Err(CliError::Config(format!("{section}: batch and seq_len must be positive")));
        }
        self.dims().validate().map_err(|e| match CliError::from(e) {
            CliError::Config(m) => CliError::Config(format!("{section}: {m}")),
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub workers: usize,
    pub skew: f64,
    /// Link bandwidth in words per latency unit.
    pub bandwidth: f64,
    /// Fixed cost per communication round.
    pub alpha: f64,
    pub word_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCommConfig {
    pub k_list: Vec<usize>,
    pub skew_list: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepIoConfig {
    pub tokens: usize,
    pub ne_list: Vec<usize>,
    pub de_list: Vec<usize>,
    pub block_n: usize,
    pub block_m: usize,
    pub sram_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub input_skew: f64,
    pub balance_rate: f64,
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.model.batch,
            seq_len: self.model.seq_len,
            input_skew: self.input_skew,
            balance_rate: self.balance_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub backend: ExpertBackend,
    pub router: RouterMode,
    pub route_block_n: usize,
    pub route_block_m: usize,
    pub expert_row_block: usize,
    pub expert_col_block: usize,
    pub sram_words: usize,
    pub parallel: ParallelConfig,
    pub sweep_comm: SweepCommConfig,
    pub sweep_io: SweepIoConfig,
    pub train: TrainSection,
    pub seed: u64,
    /// Bundle directory; relative paths resolve against the output root.
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                batch: 4,
                seq_len: 256,
                d: 512,
                n_heads: 8,
                d_h: 64,
                n_experts: 64,
                k: 4,
                d_e: 64,
                n_layers: 12,
                separate_routing: false,
            },
            backend: ExpertBackend::BlockSparse,
            router: RouterMode::IoAware,
            route_block_n: 64,
            route_block_m: 64,
            expert_row_block: 32,
            expert_col_block: 32,
            sram_words: latentmoe::memory::DEFAULT_SRAM_WORDS,
            parallel: ParallelConfig { workers: 4, skew: 0.0, bandwidth: 1.0, alpha: 0.0, word_size: 4 },
            sweep_comm: SweepCommConfig { k_list: vec![1, 2, 4, 8], skew_list: vec![0.0, 1.0, 2.0] },
            sweep_io: SweepIoConfig {
                tokens: 2048,
                ne_list: vec![64, 128, 256, 512],
                de_list: vec![32, 64, 128],
                block_n: 512,
                block_m: 32,
                sram_words: 131_072,
            },
            train: TrainSection {
                model: toy_model(),
                steps: 200,
                lr: TrainConfig::default().lr,
                input_skew: TrainConfig::default().input_skew,
                balance_rate: TrainConfig::default().balance_rate,
            },
            seed: 0,
            output_dir: None,
        }
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        batch: 4,
        seq_len: 32,
        d: 32,
        n_heads: 4,
        d_h: 8,
        n_experts: 16,
        k: 2,
        d_e: 16,
        n_layers: 12,
        separate_routing: false,
    }
}

/// Full model shapes of the two table presets; documentation only, far too
/// large for routine runs.
fn table2_model(n_experts: usize) -> ModelConfig {
    ModelConfig {
        batch: 4,
        seq_len: 2048,
        d: 1024,
        n_heads: 8,
        d_h: 128,
        n_experts,
        k: 4,
        d_e: 256,
        n_layers: 12,
        separate_routing: false,
    }
}

pub fn preset(name: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    match name {
        "default" => {}
        "toy" => {
            cfg.model = toy_model();
            cfg.sweep_comm.k_list = vec![1, 2];
            cfg.sweep_io = SweepIoConfig {
                tokens: 256,
                ne_list: vec![64, 128],
                de_list: vec![8, 16],
                block_n: 256,
                block_m: 16,
                sram_words: 16_384,
            };
            cfg.train.steps = 40;
        }
        "table2-2B" => cfg.model = table2_model(384),
        "table2-4B" => cfg.model = table2_model(768),
        other => {
            return Err(CliError::Config(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", "))))
        }
    }
    Ok(cfg)
}

/// Recursively overlays `patch` onto `base`. Keys absent from `base` are
/// rejected so typos fail loudly.
fn overlay(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, pv) in p {
                let sub = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match b.get_mut(key) {
                    Some(bv) if bv.is_object() && pv.is_object() => overlay(bv, pv, &sub)?,
                    Some(bv) => *bv = pv.clone(),
                    None => return Err(CliError::Config(format!("unknown config key `{sub}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Applies one `key.path=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
fn apply_set(base: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *base;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}

/// Resolves preset → optional JSON file → `--set` overrides, then validates.
pub fn resolve(preset_name: &str, file: Option<&Path>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(preset(preset_name)?).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
        }
        overlay(&mut value, &patch, "")?;
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate("model")?;
        self.train.model.validate("train.model")?;
        let positive = [
            ("route_block_n", self.route_block_n),
            ("route_block_m", self.route_block_m),
            ("expert_row_block", self.expert_row_block),
            ("expert_col_block", self.expert_col_block),
            ("sram_words", self.sram_words),
            ("parallel.workers", self.parallel.workers),
            ("parallel.word_size", self.parallel.word_size),
            ("sweep_io.tokens", self.sweep_io.tokens),
            ("sweep_io.block_n", self.sweep_io.block_n),
            ("sweep_io.block_m", self.sweep_io.block_m),
            ("sweep_io.sram_words", self.sweep_io.sram_words),
            ("train.steps", self.train.steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        let p = &self.parallel;
        if !(p.bandwidth > 0.0) || !(p.alpha >= 0.0) || !(p.skew >= 0.0) || !p.alpha.is_finite() {
            return bad("parallel: bandwidth must be > 0, alpha and skew >= 0".into());
        }
        if !self.model.n_experts.is_multiple_of(p.workers) || !self.model.n_heads.is_multiple_of(p.workers) {
            return bad(format!(
                "parallel.workers = {} must divide n_experts = {} and n_heads = {}",
                p.workers, self.model.n_experts, self.model.n_heads
            ));
        }
        for &k in &self.sweep_comm.k_list {
            if k == 0 || k > self.model.n_experts {
                return bad(format!("sweep_comm.k_list entry {k} must be in 1..={}", self.model.n_experts));
            }
        }
        if self.sweep_comm.skew_list.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return bad("sweep_comm.skew_list entries must be finite and >= 0".into());
        }
        for &ne in &self.sweep_io.ne_list {
            if ne < self.model.k {
                return bad(format!("sweep_io.ne_list entry {ne} is below k = {}", self.model.k));
            }
        }
        if self.sweep_io.de_list.contains(&0) {
            return bad("sweep_io.de_list entries must be positive".into());
        }
        let t = &self.train;
        if !(t.lr >= 0.0) || !(t.balance_rate >= 0.0) || !t.input_skew.is_finite() {
            return bad("train: lr and balance_rate must be >= 0, input_skew finite".into());
        }
        Ok(())
    }

    pub fn exec(&self) -> ExecConfig {
        ExecConfig {
            router: self.router,
            route_blocks: RouteBlocks { block_n: self.route_block_n, block_m: self.route_block_m },
            backend: self.backend,
            tiles: ExpertTiles { row_block: self.expert_row_block, col_block: self.expert_col_block },
        }
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of the config
    /// with the output location cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

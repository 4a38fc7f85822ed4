//! Run configuration: one declarative TOML file, dotted-key overrides,
//! an environment seed override, and two presets (`desk` for laptop-scale
//! runs, `paper` for the full-scale schedule).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Aggregation, DecoderCfg, HeadsCfg, RefineOrder};
use crate::encoder::EncoderCfg;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::retrieval::RetrievalMode;

fn cfg_err<T>(field: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { field: field.into(), message: message.into() })
}

// ── Sections ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Sum,
    Max,
    Mean,
    Gated,
}

impl From<AggregationMode> for Aggregation {
    fn from(m: AggregationMode) -> Aggregation {
        match m {
            AggregationMode::Sum => Aggregation::Sum,
            AggregationMode::Max => Aggregation::Max,
            AggregationMode::Mean => Aggregation::Mean,
            AggregationMode::Gated => Aggregation::Gated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    NounFirst,
    VerbFirst,
}

impl From<OrderMode> for RefineOrder {
    fn from(m: OrderMode) -> RefineOrder {
        match m {
            OrderMode::NounFirst => RefineOrder::NounFirst,
            OrderMode::VerbFirst => RefineOrder::VerbFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalModeCfg {
    Intersection,
    StrictVerb,
}

impl From<RetrievalModeCfg> for RetrievalMode {
    fn from(m: RetrievalModeCfg) -> RetrievalMode {
        match m {
            RetrievalModeCfg::Intersection => RetrievalMode::Intersection,
            RetrievalModeCfg::StrictVerb => RetrievalMode::StrictVerb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    /// Layers per encoder attention stack.
    pub encoder_layers: usize,
    /// Refinement iterations T.
    pub decoder_iterations: usize,
    pub ffn_encoder: usize,
    pub ffn_roles: usize,
    pub ffn_decoder: usize,
    /// Hidden width of the verb/noun head MLPs.
    pub head_hidden: usize,
    /// Hidden width of the box regressor.
    pub box_hidden: usize,
    pub role_embed_dim: usize,
    pub patch_stride: usize,
    pub grid_max: usize,
    pub feature_channels: usize,
    pub dropout_encoder: f64,
    pub dropout_roles: f64,
    pub dropout_decoder: f64,
    pub dropout_heads: f64,
    pub aggregation: AggregationMode,
    pub order: OrderMode,
    pub alternate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    /// Support set size K.
    pub k: usize,
    pub mode: RetrievalModeCfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub encoder_epochs: usize,
    pub decoder_epochs: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Mirror every image during training.
    pub flip_augment: bool,
    /// Rescale augmentation (encoder phase only; boxes stay aligned).
    pub scale_augment: bool,
    /// Checkpoint cadence in epochs; 0 = only at phase ends.
    pub checkpoint_every: usize,
    /// Supervise the verb head at every refinement iteration instead of
    /// just the last.
    pub aux_verb_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub verb_smoothing: f64,
    pub noun_smoothing: f64,
    pub weight_verb_ce: f64,
    pub weight_noun_ce: f64,
    pub weight_box_l1: f64,
    pub weight_box_giou: f64,
    pub weight_presence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Re-decode with the final verb's role set when it differs from the
    /// pseudo verb.
    pub re_decode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset directory (lexicon.json, annotations.json, images/).
    pub dataset: String,
    /// Output directory for checkpoints, logs, index, and reports.
    pub run: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub retrieval: RetrievalSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

// ── Presets ─────────────────────────────────────────────────────────────

impl RunConfig {
    /// Laptop-scale preset: small widths, no dropout or smoothing,
    /// minutes-not-days training on the synthetic corpus.
    pub fn desk() -> RunConfig {
        RunConfig {
            seed: 7,
            model: ModelSection {
                d: 64,
                heads: 4,
                encoder_layers: 2,
                decoder_iterations: 2,
                ffn_encoder: 128,
                ffn_roles: 128,
                ffn_decoder: 128,
                head_hidden: 128,
                box_hidden: 128,
                role_embed_dim: 64,
                patch_stride: 8,
                grid_max: 16,
                feature_channels: 64,
                dropout_encoder: 0.0,
                dropout_roles: 0.0,
                dropout_decoder: 0.0,
                dropout_heads: 0.0,
                aggregation: AggregationMode::Gated,
                order: OrderMode::NounFirst,
                alternate: true,
            },
            retrieval: RetrievalSection { k: 5, mode: RetrievalModeCfg::Intersection },
            train: TrainSection {
                // Sum-reduced batch loss with momentum 0.9 makes the step
                // roughly 80x the nominal rate; the stable ceiling for the
                // encoder phase sits just above 0.002. The long decoder
                // phase is what lifts grounded noun accuracy.
                encoder_epochs: 60,
                decoder_epochs: 600,
                lr_encoder: 0.002,
                lr_decoder: 0.0008,
                momentum: 0.9,
                batch: 8,
                flip_augment: true,
                scale_augment: false,
                checkpoint_every: 0,
                aux_verb_loss: false,
            },
            loss: LossSection {
                verb_smoothing: 0.0,
                noun_smoothing: 0.0,
                weight_verb_ce: 1.0,
                weight_noun_ce: 1.0,
                weight_box_l1: 5.0,
                weight_box_giou: 2.0,
                weight_presence: 1.0,
            },
            eval: EvalSection { re_decode: true },
            paths: PathsSection { dataset: "data/synth".into(), run: "runs/desk".into() },
        }
    }

    /// Full-scale schedule.
    pub fn paper() -> RunConfig {
        let mut c = RunConfig::desk();
        c.model = ModelSection {
            d: 512,
            heads: 8,
            encoder_layers: 6,
            decoder_iterations: 5,
            ffn_encoder: 2048,
            ffn_roles: 1024,
            ffn_decoder: 1024,
            head_hidden: 1024,
            box_hidden: 256,
            role_embed_dim: 256,
            patch_stride: 16,
            grid_max: 40,
            feature_channels: 512,
            dropout_encoder: 0.15,
            dropout_roles: 0.3,
            dropout_decoder: 0.3,
            dropout_heads: 0.2,
            aggregation: AggregationMode::Gated,
            order: OrderMode::NounFirst,
            alternate: true,
        };
        c.retrieval.k = 5;
        c.loss.verb_smoothing = 0.3;
        c.loss.noun_smoothing = 0.2;
        c.train.encoder_epochs = 40;
        c.train.decoder_epochs = 40;
        c.train.lr_encoder = 5e-4;
        c.train.lr_decoder = 2e-4;
        c.train.batch = 64;
        c.paths.run = "runs/paper".into();
        c
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            other => cfg_err("preset", format!("unknown preset `{other}` (desk, paper)")),
        }
    }

    // ── Loading and overrides ───────────────────────────────────────────

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config { field: "config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config { field: "config".into(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Applies `key=value` overrides with dotted paths, e.g.
    /// `model.d=128`. Unknown paths fail with the offending field.
    pub fn with_overrides(&self, sets: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = toml::Value::try_from(self)
            .map_err(|e| Error::Config { field: "config".into(), message: e.to_string() })?;
        for set in sets {
            let Some((key, raw)) = set.split_once('=') else {
                return cfg_err("--set", format!("`{set}` is not key=value"));
            };
            apply_override(&mut value, key.trim(), raw.trim())?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config { field: "config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// GSR_SEED, when set, replaces the configured seed.
    pub fn with_env_seed(mut self, env_value: Option<String>) -> Result<RunConfig> {
        if let Some(raw) = env_value {
            self.seed = raw
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config { field: "GSR_SEED".into(), message: format!("`{raw}` is not a u64") })?;
        }
        Ok(self)
    }

    // ── Validation ──────────────────────────────────────────────────────

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d == 0 {
            return cfg_err("model.d", "must be positive");
        }
        if m.heads == 0 || m.d % m.heads != 0 {
            return cfg_err("model.heads", format!("width {} not divisible by {} heads", m.d, m.heads));
        }
        if m.encoder_layers == 0 {
            return cfg_err("model.encoder_layers", "must be positive");
        }
        if m.patch_stride == 0 {
            return cfg_err("model.patch_stride", "must be positive");
        }
        if m.grid_max == 0 {
            return cfg_err("model.grid_max", "must be positive");
        }
        if m.role_embed_dim == 0 {
            return cfg_err("model.role_embed_dim", "must be positive");
        }
        if m.feature_channels == 0 {
            return cfg_err("model.feature_channels", "must be positive");
        }
        for (field, v) in [
            ("model.dropout_encoder", m.dropout_encoder),
            ("model.dropout_roles", m.dropout_roles),
            ("model.dropout_decoder", m.dropout_decoder),
            ("model.dropout_heads", m.dropout_heads),
        ] {
            if !(0.0..1.0).contains(&v) {
                return cfg_err(field, format!("{v} outside [0, 1)"));
            }
        }
        if self.retrieval.k == 0 {
            return cfg_err("retrieval.k", "must be at least 1");
        }
        let t = &self.train;
        if t.batch == 0 {
            return cfg_err("train.batch", "must be at least 1");
        }
        for (field, v) in [("train.lr_encoder", t.lr_encoder), ("train.lr_decoder", t.lr_decoder)] {
            if !(v > 0.0) || !v.is_finite() {
                return cfg_err(field, format!("{v} is not a positive rate"));
            }
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return cfg_err("train.momentum", format!("{} outside [0, 1)", t.momentum));
        }
        let l = &self.loss;
        for (field, v) in [("loss.verb_smoothing", l.verb_smoothing), ("loss.noun_smoothing", l.noun_smoothing)] {
            if !(0.0..1.0).contains(&v) {
                return cfg_err(field, format!("{v} outside [0, 1)"));
            }
        }
        for (field, v) in [
            ("loss.weight_verb_ce", l.weight_verb_ce),
            ("loss.weight_noun_ce", l.weight_noun_ce),
            ("loss.weight_box_l1", l.weight_box_l1),
            ("loss.weight_box_giou", l.weight_box_giou),
            ("loss.weight_presence", l.weight_presence),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return cfg_err(field, format!("{v} is not a non-negative weight"));
            }
        }
        if self.paths.dataset.is_empty() {
            return cfg_err("paths.dataset", "must not be empty");
        }
        if self.paths.run.is_empty() {
            return cfg_err("paths.run", "must not be empty");
        }
        Ok(())
    }

    // ── Mapping into module configs ─────────────────────────────────────

    pub fn encoder_cfg(&self) -> EncoderCfg {
        let m = &self.model;
        EncoderCfg {
            d: m.d,
            heads: m.heads,
            layers: m.encoder_layers,
            ffn_hidden: m.ffn_encoder,
            dropout: m.dropout_encoder,
            ffn_roles: m.ffn_roles,
            dropout_roles: m.dropout_roles,
            patch_stride: m.patch_stride,
            grid_max: m.grid_max,
            feature_channels: m.feature_channels,
            role_embed_dim: m.role_embed_dim,
        }
    }

    pub fn decoder_cfg(&self) -> DecoderCfg {
        let m = &self.model;
        DecoderCfg {
            d: m.d,
            heads: m.heads,
            iterations: m.decoder_iterations,
            ffn_hidden: m.ffn_decoder,
            dropout: m.dropout_decoder,
            aggregation: m.aggregation.into(),
            order: m.order.into(),
            alternate: m.alternate,
            role_embed_dim: m.role_embed_dim,
        }
    }

    pub fn heads_cfg(&self, verb_count: usize, noun_count: usize) -> HeadsCfg {
        let m = &self.model;
        HeadsCfg { d: m.d, hidden: m.head_hidden, box_hidden: m.box_hidden, verb_count, noun_count }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.loss;
        LossWeights {
            verb_ce: l.weight_verb_ce,
            noun_ce: l.weight_noun_ce,
            box_l1: l.weight_box_l1,
            box_giou: l.weight_box_giou,
            presence: l.weight_presence,
        }
    }
}

/// Sets `value` at a dotted path inside an already-complete config tree.
/// Paths must name existing fields; the raw text is parsed as TOML and
/// falls back to a bare string.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    if key.is_empty() {
        return cfg_err("--set", "empty key");
    }
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed assignment has v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config {
                field: parts[..i].join("."),
                message: "not a section".into(),
            })?;
        if !table.contains_key(*part) {
            return cfg_err(&parts[..=i].join("."), "no such field");
        }
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table.get_mut(*part).expect("checked above");
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert!(RunConfig::preset("nope").is_err());
    }

    /// The full-scale preset carries the published hyperparameters.
    #[test]
    fn paper_preset_matches_published_schedule() {
        let c = RunConfig::paper();
        assert_eq!(c.model.d, 512);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.model.encoder_layers, 6);
        assert_eq!(c.model.decoder_iterations, 5);
        assert_eq!(c.retrieval.k, 5);
        assert_eq!(c.loss.verb_smoothing, 0.3);
        assert_eq!(c.loss.noun_smoothing, 0.2);
        assert_eq!(
            [c.model.dropout_encoder, c.model.dropout_roles, c.model.dropout_decoder, c.model.dropout_heads],
            [0.15, 0.3, 0.3, 0.2]
        );
        assert_eq!(
            [c.model.ffn_encoder, c.model.ffn_roles, c.model.ffn_decoder, c.model.head_hidden],
            [2048, 1024, 1024, 1024]
        );
        assert_eq!(c.model.role_embed_dim, 256);
    }

    #[test]
    fn desk_preset_is_small_and_clean() {
        let c = RunConfig::desk();
        assert_eq!(c.model.d, 64);
        assert_eq!(c.model.decoder_iterations, 2);
        assert_eq!(c.loss.verb_smoothing, 0.0);
        assert_eq!(c.model.dropout_encoder, 0.0);
        assert!(c.model.alternate);
        assert_eq!(c.model.aggregation, AggregationMode::Gated);
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn unknown_fields_are_rejected_with_their_name() {
        let mut text = RunConfig::desk().to_toml().unwrap();
        text.push_str("\n[bogus]\nx = 1\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_set_nested_fields() {
        let cfg = RunConfig::desk();
        let out = cfg
            .with_overrides(&[
                "model.d=128".into(),
                "model.aggregation=\"sum\"".into(),
                "train.lr_encoder=0.1".into(),
                "seed=99".into(),
                "paths.run=runs/alt".into(),
            ])
            .unwrap();
        assert_eq!(out.model.d, 128);
        assert_eq!(out.model.aggregation, AggregationMode::Sum);
        assert_eq!(out.train.lr_encoder, 0.1);
        assert_eq!(out.seed, 99);
        assert_eq!(out.paths.run, "runs/alt");
        // untouched fields survive
        assert_eq!(out.model.heads, cfg.model.heads);
    }

    #[test]
    fn override_path_errors_name_the_field() {
        let cfg = RunConfig::desk();
        let err = cfg.with_overrides(&["model.dd=1".into()]).unwrap_err();
        assert!(err.to_string().contains("model.dd"), "{err}");
        let err = cfg.with_overrides(&["nope.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
        let err = cfg.with_overrides(&["model.d.x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("model.d"), "{err}");
        assert!(cfg.with_overrides(&["model.d".into()]).is_err());
        // type errors surface from the final re-parse
        assert!(cfg.with_overrides(&["model.d=\"wide\"".into()]).is_err());
    }

    #[test]
    fn env_seed_overrides_config() {
        let cfg = RunConfig::desk().with_env_seed(Some("123".into())).unwrap();
        assert_eq!(cfg.seed, 123);
        let cfg = RunConfig::desk().with_env_seed(None).unwrap();
        assert_eq!(cfg.seed, RunConfig::desk().seed);
        assert!(RunConfig::desk().with_env_seed(Some("abc".into())).is_err());
    }

    #[test]
    fn validation_reports_field_paths() {
        let mut c = RunConfig::desk();
        c.model.heads = 3;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("model.heads"), "{err}");
        assert!(err.is_usage());

        let mut c = RunConfig::desk();
        c.loss.verb_smoothing = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("verb_smoothing"));

        let mut c = RunConfig::desk();
        c.train.momentum = 1.0;
        assert!(c.validate().unwrap_err().to_string().contains("momentum"));

        let mut c = RunConfig::desk();
        c.retrieval.k = 0;
        assert!(c.validate().unwrap_err().to_string().contains("retrieval.k"));
    }

    #[test]
    fn module_configs_inherit_the_right_fields() {
        let c = RunConfig::paper();
        let e = c.encoder_cfg();
        assert_eq!(e.ffn_hidden, 2048);
        assert_eq!(e.ffn_roles, 1024);
        assert_eq!(e.dropout, 0.15);
        assert_eq!(e.dropout_roles, 0.3);
        let d = c.decoder_cfg();
        assert_eq!(d.iterations, 5);
        assert_eq!(d.dropout, 0.3);
        assert!(matches!(d.aggregation, Aggregation::Gated));
        let h = c.heads_cfg(504, 11539);
        assert_eq!(h.verb_count, 504);
        assert_eq!(h.hidden, 1024);
        let w = c.loss_weights();
        assert_eq!(w.box_l1, 5.0);
    }
}

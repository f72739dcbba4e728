//! Trainable language-identification models.
//!
//! Six architectures share one graph engine, one trainer, and one
//! inference entry point:
//!
//! - `entropy_dnn`: feed-forward scorer over single segment i-vectors,
//!   whose per-segment posteriors drive entropy-based relevance weights.
//! - `i_blstm` / `x_blstm`: two bidirectional LSTM layers over a segment
//!   embedding sequence, attention pooling, fully connected layer,
//!   softmax. The two differ only in where the embeddings come from
//!   (total-variability i-vectors vs. network x-vectors).
//! - `hgru`: hierarchical GRU directly on features, with windowed
//!   accumulation at two time scales, a bidirectional top layer,
//!   attention pooling, and two duration-specific output heads.
//! - `xvector`: five context (TDNN) layers, statistics pooling, and two
//!   fully connected layers; the first post-pooling affine output is the
//!   utterance embedding.
//! - `x_blstm_e2e`: the x-vector trunk and the BLSTM backend merged into
//!   one parameter set and fine-tuned jointly.
//!
//! [`init_params`] and [`batch_loss`] expose the exact graphs the
//! trainers build, so tests can verify any architecture against finite
//! differences, and [`predict`] serves all architectures at inference
//! time. Trained models round-trip through a directory holding a
//! key=value config, an "RNET" checkpoint, and a step,loss CSV log.

mod dnn;
mod e2e;
mod hgru;
mod seq;
mod trainer;
mod xvector;

pub use dnn::train_entropy_dnn;
pub use e2e::train_e2e;
pub use hgru::{layer_counts, train_hgru};
pub use seq::{train_seq_model, SEQ_CROP_ROWS};
pub use xvector::{extract_xvector, segment_xvectors, train_xvector, XVEC_MIN_FRAMES};

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::corpus::FeatureSequence;
use crate::embednet::{bind, Binding, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

/// Which network a [`ModelConfig`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    EntropyDnn,
    IBlstm,
    XBlstm,
    Hgru,
    Xvector,
    XBlstmE2e,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Architecture> {
        Ok(match s {
            "entropy_dnn" => Architecture::EntropyDnn,
            "i_blstm" => Architecture::IBlstm,
            "x_blstm" => Architecture::XBlstm,
            "hgru" => Architecture::Hgru,
            "xvector" => Architecture::Xvector,
            "x_blstm_e2e" => Architecture::XBlstmE2e,
            other => {
                return Err(Error::invalid(
                    "architecture",
                    format!("unknown architecture {other:?}"),
                ))
            }
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::EntropyDnn => "entropy_dnn",
            Architecture::IBlstm => "i_blstm",
            Architecture::XBlstm => "x_blstm",
            Architecture::Hgru => "hgru",
            Architecture::Xvector => "xvector",
            Architecture::XBlstmE2e => "x_blstm_e2e",
        }
    }
}

/// Optimization settings shared by every trainer: Adam at
/// `learning_rate`, `batch_size` crops per step, `epochs` passes over
/// the training set. With `val_fraction > 0` that fraction of the
/// utterances is held out and training stops once the held-out loss has
/// not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            val_fraction: 0.0,
            patience: 5,
        }
    }
}

/// Complete description of a model: architecture, layer sizes, number
/// of target languages, duration routing, and training settings.
///
/// `input_dim` is the per-step input width: the i-vector rank for
/// `entropy_dnn` and `i_blstm`, the embedding width for `x_blstm`, and
/// the feature dimension for `hgru`, `xvector`, and `x_blstm_e2e`.
/// `trunk_hidden_dim` / `trunk_fc_dim` size the embedding trunk inside
/// `x_blstm_e2e` (other architectures ignore them).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub num_languages: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub fc_dim: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub trunk_hidden_dim: usize,
    pub trunk_fc_dim: usize,
    pub hgru_l1: usize,
    pub hgru_l2: usize,
    pub hgru_l3: usize,
    pub hgru_win1: usize,
    pub hgru_hop1: usize,
    pub hgru_win2: usize,
    pub duration_threshold_s: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale sizes: small enough that every architecture trains in
    /// seconds on synthetic corpora while keeping the full structure.
    pub fn desk(architecture: Architecture, num_languages: usize, input_dim: usize) -> ModelConfig {
        let hidden = match architecture {
            Architecture::EntropyDnn => 128,
            _ => 64,
        };
        ModelConfig {
            architecture,
            num_languages,
            input_dim,
            hidden_dim: hidden,
            fc_dim: 128,
            attn_dim: 64,
            embed_dim: 64,
            trunk_hidden_dim: 64,
            trunk_fc_dim: 128,
            hgru_l1: 64,
            hgru_l2: 128,
            hgru_l3: 128,
            hgru_win1: 20,
            hgru_hop1: 10,
            hgru_win2: 10,
            duration_threshold_s: 5.0,
            optimizer: OptimizerConfig::default(),
            seed: 7,
        }
    }

    /// Full-scale sizes matching the published systems: 1024-wide DNN
    /// hidden layers, 256 memory cells per BLSTM direction, 512-wide
    /// fully connected and GRU layers, 512-dimensional embeddings.
    pub fn paper(architecture: Architecture, num_languages: usize, input_dim: usize) -> ModelConfig {
        let hidden = match architecture {
            Architecture::EntropyDnn => 1024,
            Architecture::Xvector => 512,
            _ => 256,
        };
        ModelConfig {
            hidden_dim: hidden,
            fc_dim: 512,
            attn_dim: 256,
            embed_dim: 512,
            trunk_hidden_dim: 512,
            trunk_fc_dim: 512,
            hgru_l1: 256,
            hgru_l2: 512,
            hgru_l3: 512,
            ..ModelConfig::desk(architecture, num_languages, input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 12] = [
            ("num_languages", self.num_languages),
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("fc_dim", self.fc_dim),
            ("attn_dim", self.attn_dim),
            ("embed_dim", self.embed_dim),
            ("trunk_hidden_dim", self.trunk_hidden_dim),
            ("trunk_fc_dim", self.trunk_fc_dim),
            ("hgru_l1", self.hgru_l1),
            ("hgru_l2", self.hgru_l2),
            ("hgru_l3", self.hgru_l3),
            ("batch_size", self.optimizer.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid("model config", format!("{name} must be positive")));
            }
        }
        if self.num_languages < 2 {
            return Err(Error::invalid("model config", "need at least 2 languages"));
        }
        if self.hgru_win1 == 0 || self.hgru_hop1 == 0 || self.hgru_win2 == 0 {
            return Err(Error::invalid("model config", "hgru windows must be positive"));
        }
        if !(self.duration_threshold_s > 0.0) {
            return Err(Error::invalid("model config", "duration threshold must be positive"));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::invalid("model config", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.optimizer.val_fraction) {
            return Err(Error::invalid("model config", "val_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// A trained network: its configuration, parameters, and the training
/// loss recorded at every optimizer step.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub log: Vec<(u64, f64)>,
}

/// Which output head served a prediction (hierarchical GRU only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationHead {
    Short,
    Long,
}

/// One inference result: language posteriors, plus attention weights
/// and the routed duration head where the architecture has them.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub posteriors: Array1<f64>,
    pub attention: Option<Array1<f64>>,
    pub head: Option<DurationHead>,
}

/// Input to [`predict`] and [`batch_loss`]; the variant must match the
/// architecture: `Vector` for `entropy_dnn`, `Embeddings` (one row per
/// segment) for `i_blstm` / `x_blstm`, `Features` for `hgru`,
/// `xvector`, and `x_blstm_e2e`.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Features(&'a FeatureSequence),
    Embeddings(ArrayView2<'a, f64>),
    Vector(ArrayView1<'a, f64>),
}

/// Forward-pass output inside a graph, before softmax.
pub(crate) struct ForwardOut {
    pub logits: NodeId,
    pub attention: Option<NodeId>,
    pub head: Option<DurationHead>,
}

/// Freshly initialized parameters for an architecture, seeded from
/// `cfg.seed`. Output layers start at zero, so every architecture emits
/// uniform posteriors (cross entropy exactly ln L) before training.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.architecture {
        Architecture::EntropyDnn => dnn::init(cfg, &mut rng),
        Architecture::IBlstm | Architecture::XBlstm => seq::init_with_input(cfg, cfg.input_dim, &mut rng),
        Architecture::Hgru => hgru::init(cfg, &mut rng),
        Architecture::Xvector => xvector::init(cfg, cfg.hidden_dim, cfg.fc_dim, &mut rng),
        Architecture::XBlstmE2e => e2e::init(cfg, &mut rng),
    }
}

/// Builds one utterance's forward pass in `g`, routing by architecture.
pub(crate) fn forward_utterance(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    input: &ModelInput<'_>,
) -> Result<ForwardOut> {
    match (cfg.architecture, input) {
        (Architecture::EntropyDnn, ModelInput::Vector(v)) => dnn::forward(g, bd, cfg, *v),
        (Architecture::IBlstm | Architecture::XBlstm, ModelInput::Embeddings(e)) => {
            seq::forward(g, bd, cfg, "", *e)
        }
        (Architecture::Hgru, ModelInput::Features(f)) => hgru::forward(g, bd, cfg, f),
        (Architecture::Xvector, ModelInput::Features(f)) => {
            xvector::forward_classifier(g, bd, cfg, f)
        }
        (Architecture::XBlstmE2e, ModelInput::Features(f)) => e2e::forward(g, bd, cfg, f),
        (arch, input) => Err(Error::invalid(
            "predict",
            format!("{} expects {}, got {}", arch.as_str(), expected_input(arch), input_kind(input)),
        )),
    }
}

fn expected_input(arch: Architecture) -> &'static str {
    match arch {
        Architecture::EntropyDnn => "a single vector",
        Architecture::IBlstm | Architecture::XBlstm => "an embedding sequence",
        Architecture::Hgru | Architecture::Xvector | Architecture::XBlstmE2e => {
            "a feature sequence"
        }
    }
}

fn input_kind(input: &ModelInput<'_>) -> &'static str {
    match input {
        ModelInput::Features(_) => "a feature sequence",
        ModelInput::Embeddings(_) => "an embedding sequence",
        ModelInput::Vector(_) => "a single vector",
    }
}

/// Mean cross entropy of a batch of inputs under the architecture's
/// graph, exactly as the trainers build it. Exposed so tests can drive
/// finite-difference checks through complete architectures.
pub fn batch_loss(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    items: &[(ModelInput<'_>, usize)],
) -> Result<NodeId> {
    if items.is_empty() {
        return Err(Error::invalid("batch_loss", "empty batch"));
    }
    let mut logit_rows = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for (input, label) in items {
        if *label >= cfg.num_languages {
            return Err(Error::invalid(
                "batch_loss",
                format!("label {label} out of range for {} languages", cfg.num_languages),
            ));
        }
        let out = forward_utterance(g, bd, cfg, input)?;
        logit_rows.push(out.logits);
        labels.push(*label);
    }
    let stacked = g.concat_rows(&logit_rows)?;
    g.cross_entropy(stacked, &labels)
}

/// Runs one input through a trained model: softmax posteriors over
/// languages, attention weights for attention-bearing architectures,
/// and the duration head the input was routed to (hierarchical GRU).
pub fn predict(model: &TrainedModel, input: ModelInput<'_>) -> Result<Prediction> {
    let mut g = Graph::new();
    let bd = bind(&mut g, &model.params)?;
    let out = forward_utterance(&mut g, &bd, &model.config, &input)?;
    let probs = g.softmax_rows(out.logits)?;
    let posteriors = g.value(probs).row(0).to_owned();
    let attention = out.attention.map(|a| g.value(a).row(0).to_owned());
    Ok(Prediction { posteriors, attention, head: out.head })
}

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "params.rnet";
const LOG_FILE: &str = "train_log.csv";

/// Serializes a config as sorted key=value lines.
pub fn config_to_string(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "architecture={}", cfg.architecture.as_str());
    let _ = writeln!(s, "attn_dim={}", cfg.attn_dim);
    let _ = writeln!(s, "batch_size={}", cfg.optimizer.batch_size);
    let _ = writeln!(s, "duration_threshold_s={}", cfg.duration_threshold_s);
    let _ = writeln!(s, "embed_dim={}", cfg.embed_dim);
    let _ = writeln!(s, "epochs={}", cfg.optimizer.epochs);
    let _ = writeln!(s, "fc_dim={}", cfg.fc_dim);
    let _ = writeln!(s, "hgru_hop1={}", cfg.hgru_hop1);
    let _ = writeln!(s, "hgru_l1={}", cfg.hgru_l1);
    let _ = writeln!(s, "hgru_l2={}", cfg.hgru_l2);
    let _ = writeln!(s, "hgru_l3={}", cfg.hgru_l3);
    let _ = writeln!(s, "hgru_win1={}", cfg.hgru_win1);
    let _ = writeln!(s, "hgru_win2={}", cfg.hgru_win2);
    let _ = writeln!(s, "hidden_dim={}", cfg.hidden_dim);
    let _ = writeln!(s, "input_dim={}", cfg.input_dim);
    let _ = writeln!(s, "learning_rate={}", cfg.optimizer.learning_rate);
    let _ = writeln!(s, "num_languages={}", cfg.num_languages);
    let _ = writeln!(s, "patience={}", cfg.optimizer.patience);
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "trunk_fc_dim={}", cfg.trunk_fc_dim);
    let _ = writeln!(s, "trunk_hidden_dim={}", cfg.trunk_hidden_dim);
    let _ = writeln!(s, "val_fraction={}", cfg.optimizer.val_fraction);
    s
}

/// Parses a config written by [`config_to_string`]. Every key must be
/// present exactly once; unknown keys are rejected.
pub fn config_from_str(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::desk(Architecture::EntropyDnn, 2, 1);
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid("model config", format!("line {}: expected key=value", lineno + 1))
        })?;
        if !seen.insert(key.to_string()) {
            return Err(Error::invalid("model config", format!("duplicate key {key}")));
        }
        let bad =
            |e: &dyn std::fmt::Display| Error::invalid("model config", format!("{key}: {e}"));
        match key {
            "architecture" => cfg.architecture = Architecture::parse(value)?,
            "attn_dim" => cfg.attn_dim = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => cfg.optimizer.batch_size = value.parse().map_err(|e| bad(&e))?,
            "duration_threshold_s" => {
                cfg.duration_threshold_s = value.parse().map_err(|e| bad(&e))?
            }
            "embed_dim" => cfg.embed_dim = value.parse().map_err(|e| bad(&e))?,
            "epochs" => cfg.optimizer.epochs = value.parse().map_err(|e| bad(&e))?,
            "fc_dim" => cfg.fc_dim = value.parse().map_err(|e| bad(&e))?,
            "hgru_hop1" => cfg.hgru_hop1 = value.parse().map_err(|e| bad(&e))?,
            "hgru_l1" => cfg.hgru_l1 = value.parse().map_err(|e| bad(&e))?,
            "hgru_l2" => cfg.hgru_l2 = value.parse().map_err(|e| bad(&e))?,
            "hgru_l3" => cfg.hgru_l3 = value.parse().map_err(|e| bad(&e))?,
            "hgru_win1" => cfg.hgru_win1 = value.parse().map_err(|e| bad(&e))?,
            "hgru_win2" => cfg.hgru_win2 = value.parse().map_err(|e| bad(&e))?,
            "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|e| bad(&e))?,
            "input_dim" => cfg.input_dim = value.parse().map_err(|e| bad(&e))?,
            "learning_rate" => {
                cfg.optimizer.learning_rate = value.parse().map_err(|e| bad(&e))?
            }
            "num_languages" => cfg.num_languages = value.parse().map_err(|e| bad(&e))?,
            "patience" => cfg.optimizer.patience = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            "trunk_fc_dim" => cfg.trunk_fc_dim = value.parse().map_err(|e| bad(&e))?,
            "trunk_hidden_dim" => {
                cfg.trunk_hidden_dim = value.parse().map_err(|e| bad(&e))?
            }
            "val_fraction" => cfg.optimizer.val_fraction = value.parse().map_err(|e| bad(&e))?,
            other => {
                return Err(Error::invalid("model config", format!("unknown key {other:?}")))
            }
        }
    }
    const KEYS: [&str; 22] = [
        "architecture",
        "attn_dim",
        "batch_size",
        "duration_threshold_s",
        "embed_dim",
        "epochs",
        "fc_dim",
        "hgru_hop1",
        "hgru_l1",
        "hgru_l2",
        "hgru_l3",
        "hgru_win1",
        "hgru_win2",
        "hidden_dim",
        "input_dim",
        "learning_rate",
        "num_languages",
        "patience",
        "seed",
        "trunk_fc_dim",
        "trunk_hidden_dim",
        "val_fraction",
    ];
    for key in KEYS {
        if !seen.contains(key) {
            return Err(Error::invalid("model config", format!("missing key {key}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes a model directory: `config.txt` (key=value), `params.rnet`
/// (checkpoint), `train_log.csv` (step,loss).
pub fn save_model(dir: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config_to_string(&model.config))?;
    crate::embednet::write_checkpoint(&dir.join(CHECKPOINT_FILE), &model.params)?;
    let mut csv = String::from("step,loss\n");
    for &(step, loss) in &model.log {
        let _ = writeln!(csv, "{step},{loss}");
    }
    std::fs::write(dir.join(LOG_FILE), csv)?;
    Ok(())
}

/// Loads a model directory and verifies that the checkpoint's tensor
/// names exactly match what the config's architecture expects.
pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let config_text = std::fs::read_to_string(dir.join(CONFIG_FILE))?;
    let config = config_from_str(&config_text)?;
    let params = crate::embednet::read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let expected = init_params(&config)?;
    let expected_names: Vec<&str> = expected.names().collect();
    let got_names: Vec<&str> = params.names().collect();
    if expected_names != got_names {
        return Err(Error::bad_file(
            dir.join(CHECKPOINT_FILE),
            format!(
                "checkpoint tensors do not match architecture {}: expected [{}], got [{}]",
                config.architecture.as_str(),
                expected_names.join(", "),
                got_names.join(", ")
            ),
        ));
    }
    for (name, tensor) in params.iter() {
        let want = expected.get(name)?.dim();
        if tensor.dim() != want {
            return Err(Error::bad_file(
                dir.join(CHECKPOINT_FILE),
                format!("tensor {name} has shape {:?}, expected {:?}", tensor.dim(), want),
            ));
        }
    }
    let log_text = std::fs::read_to_string(dir.join(LOG_FILE))?;
    let mut log = Vec::new();
    for (i, line) in log_text.lines().enumerate() {
        if i == 0 {
            if line != "step,loss" {
                return Err(Error::bad_file(dir.join(LOG_FILE), "missing step,loss header"));
            }
            continue;
        }
        let (s, l) = line.split_once(',').ok_or_else(|| {
            Error::bad_file(dir.join(LOG_FILE), format!("line {}: expected step,loss", i + 1))
        })?;
        let step: u64 = s
            .parse()
            .map_err(|e| Error::bad_file(dir.join(LOG_FILE), format!("line {}: {e}", i + 1)))?;
        let loss: f64 = l
            .parse()
            .map_err(|e| Error::bad_file(dir.join(LOG_FILE), format!("line {}: {e}", i + 1)))?;
        log.push((step, loss));
    }
    Ok(TrainedModel { config, params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn architecture_names_round_trip() {
        for arch in [
            Architecture::EntropyDnn,
            Architecture::IBlstm,
            Architecture::XBlstm,
            Architecture::Hgru,
            Architecture::Xvector,
            Architecture::XBlstmE2e,
        ] {
            assert_eq!(Architecture::parse(arch.as_str()).unwrap(), arch);
        }
        assert!(Architecture::parse("mlp").is_err());
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = ModelConfig::desk(Architecture::Hgru, 5, 20);
        cfg.optimizer.learning_rate = 0.00025;
        cfg.optimizer.val_fraction = 0.125;
        cfg.duration_threshold_s = 4.5;
        let text = config_to_string(&cfg);
        let back = config_from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // Serialization is stable: a reparse writes the same bytes.
        assert_eq!(config_to_string(&back), text);
    }

    #[test]
    fn config_rejects_unknown_missing_and_duplicate_keys() {
        let cfg = ModelConfig::desk(Architecture::IBlstm, 3, 8);
        let text = config_to_string(&cfg);
        let with_unknown = format!("{text}dropout=0.5\n");
        assert!(config_from_str(&with_unknown).is_err());
        let missing: String =
            text.lines().filter(|l| !l.starts_with("seed=")).map(|l| format!("{l}\n")).collect();
        assert!(config_from_str(&missing).is_err());
        let dup = format!("{text}seed=9\n");
        assert!(config_from_str(&dup).is_err());
    }

    #[test]
    fn validate_rejects_bad_sizes() {
        let mut cfg = ModelConfig::desk(Architecture::IBlstm, 3, 8);
        cfg.hidden_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Architecture::Hgru, 3, 8);
        cfg.duration_threshold_s = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(Architecture::EntropyDnn, 1, 8);
        cfg.num_languages = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn model_directory_round_trips_and_validates_names() {
        let mut cfg = ModelConfig::desk(Architecture::IBlstm, 2, 3);
        cfg.hidden_dim = 2;
        cfg.fc_dim = 2;
        cfg.attn_dim = 2;
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg.clone(),
            log: vec![(1, 0.7), (2, 0.64)],
        };
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("seqmodel");
        save_model(&a, &model).unwrap();
        let back = load_model(&a).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.log, model.log);
        for (name, t) in model.params.iter() {
            // The checkpoint stores f32, so values round to f32 exactly.
            let expected = t.mapv(|v| v as f32 as f64);
            assert_eq!(back.params.get(name).unwrap(), &expected, "{name} changed");
        }

        // A checkpoint whose tensors belong to another architecture is
        // rejected on load.
        let mut dnn_cfg = ModelConfig::desk(Architecture::EntropyDnn, 2, 3);
        dnn_cfg.hidden_dim = 2;
        let wrong = TrainedModel {
            params: init_params(&dnn_cfg).unwrap(),
            config: dnn_cfg,
            log: vec![],
        };
        let b = dir.path().join("mixed");
        save_model(&b, &wrong).unwrap();
        std::fs::write(b.join("config.txt"), config_to_string(&cfg)).unwrap();
        let err = load_model(&b).unwrap_err();
        assert!(err.to_string().contains("do not match architecture"));
    }

    #[test]
    fn mismatched_input_kind_is_rejected() {
        let cfg = ModelConfig::desk(Architecture::EntropyDnn, 2, 4);
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg,
            log: vec![],
        };
        let emb = Array2::zeros((3, 4));
        let err = predict(&model, ModelInput::Embeddings(emb.view())).unwrap_err();
        assert!(err.to_string().contains("expects a single vector"));
    }
}

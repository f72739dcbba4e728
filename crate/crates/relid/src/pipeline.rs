//! Batch experiment pipeline: key=value configs, on-disk stage artifacts,
//! and one entry point per `relid` subcommand.
//!
//! Stages communicate only through files under `paths.work_dir`, so a run
//! can resume anywhere and each stage can be rerun or inspected on its own.
//! Every stage is a pure function of (config, input artifacts): rerunning
//! one with identical inputs rewrites byte-identical outputs, and all
//! randomness flows from seeds named in the config.
//!
//! The relevance-weighted statistics path is deliberately a second pass
//! over the same work dir: train the classical system and the entropy
//! scorer first, then flip `stats.weighted=true` and rerun extract-stats,
//! extract-ivectors, train-backend, and score. The total-variability
//! matrix is reused, only the statistics (and everything downstream of
//! them) change.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::backend::{self, LinearSvm, LinearTransform};
use crate::bwstats::{self, GammaConfig};
use crate::corpus::{self, CorpusConfig, FeatureSequence, NoiseMode, Utterance};
use crate::error::{Error, Result};
use crate::eval::{self, ScoreSet};
use crate::models::{
    self, Architecture, ModelConfig, ModelInput, OptimizerConfig, Prediction, TrainedModel,
};
use crate::tvm::{self, TvModel, SEGMENT_HOP, SEGMENT_WINDOW};
use crate::ubm::{self, DiagonalGmm};

/// Which artifacts the `score` stage turns into trial scores.
///
/// Both systems write flat-prior log-likelihood ratios: the detection
/// cost thresholds scores at ln(beta), which is only meaningful on an
/// LLR-like scale. Model posteriors convert directly; SVM margins pass
/// through a softmax first (a fixed monotone map, no fitted calibration)
/// so the two systems' score files are comparable under every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSystem {
    /// Classical chain: eval i-vectors through WCCN, length norm, LDA,
    /// and the linear SVM.
    Svm,
    /// The trained model's posteriors.
    Model,
}

impl ScoreSystem {
    pub fn parse(s: &str) -> Result<ScoreSystem> {
        match s {
            "svm" => Ok(ScoreSystem::Svm),
            "model" => Ok(ScoreSystem::Model),
            other => Err(Error::invalid(
                "score.system",
                format!("unknown system '{other}' (expected svm or model)"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreSystem::Svm => "svm",
            ScoreSystem::Model => "model",
        }
    }
}

/// Full experiment configuration. One flat struct; the key=value file
/// uses dotted section prefixes (`corpus.seed`, `model.epochs`, ...).
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    // corpus.*
    pub num_languages: usize,
    /// Training utterances per language.
    pub train_utterances: usize,
    /// Held-out evaluation utterances per language.
    pub eval_utterances: usize,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub feature_dim: usize,
    pub source_components: usize,
    pub mean_spread: f64,
    /// Noise mode for the evaluation split. The training split is always
    /// generated clean: corruption is a test condition, not a training one.
    pub noise: NoiseMode,
    pub snr_db: f64,
    pub hop_ms: u16,
    pub corpus_seed: u64,
    // features.*
    pub sad_quantile: f64,
    /// Sliding CMVN window in seconds; 0 means global CMVN.
    pub cmvn_window_s: f64,
    // ubm.*
    pub ubm_components: usize,
    pub ubm_iterations: usize,
    /// Keep every n-th voiced frame when pooling UBM training data.
    pub ubm_stride: usize,
    pub ubm_seed: u64,
    // stats.*
    /// Apply entropy-based relevance weights when accumulating statistics.
    pub stats_weighted: bool,
    // tvm.*
    pub tvm_rank: usize,
    pub tvm_iterations: usize,
    pub tvm_seed: u64,
    // backend.*
    /// LDA output dimension; 0 means num_languages - 1.
    pub lda_dim: usize,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub backend_seed: u64,
    // model.*
    pub model_architecture: Architecture,
    pub model_hidden_dim: usize,
    pub model_fc_dim: usize,
    pub model_attn_dim: usize,
    pub model_embed_dim: usize,
    pub model_trunk_hidden_dim: usize,
    pub model_trunk_fc_dim: usize,
    pub model_hgru_l1: usize,
    pub model_hgru_l2: usize,
    pub model_hgru_l3: usize,
    pub model_hgru_win1: usize,
    pub model_hgru_hop1: usize,
    pub model_hgru_win2: usize,
    pub model_duration_threshold_s: f64,
    pub model_learning_rate: f64,
    pub model_batch_size: usize,
    pub model_epochs: usize,
    pub model_val_fraction: f64,
    pub model_patience: usize,
    pub model_seed: u64,
    // score.*
    pub score_system: ScoreSystem,
    /// Fixed temperature on SVM margins before the softmax that maps them to
    /// posteriors. Margins live on an arbitrary scale set by the hinge loss;
    /// the detection cost thresholds LLRs at ln(beta), so an overly timid
    /// scale reads as misses even when every trial is ranked correctly. This
    /// is a design constant of the margin-to-LLR map, never fitted to data.
    pub score_margin_scale: f64,
    // paths.*
    pub work_dir: PathBuf,
}

impl PipelineConfig {
    /// Desk-scale defaults: a 3-language synthetic corpus and model sizes
    /// that keep every stage interactive on one core.
    pub fn desk() -> PipelineConfig {
        PipelineConfig {
            num_languages: 3,
            train_utterances: 20,
            eval_utterances: 10,
            duration_min_s: 6.0,
            duration_max_s: 12.0,
            feature_dim: 20,
            source_components: 8,
            mean_spread: 2.0,
            noise: NoiseMode::Clean,
            snr_db: 5.0,
            hop_ms: 10,
            corpus_seed: 1,
            sad_quantile: 0.1,
            cmvn_window_s: 3.0,
            // Small UBMs are deliberate at desk scale: with ~1k-frame
            // utterances, a large mixture starves every component of
            // frames and utterance-level sampling noise drowns the
            // language structure the subspace is supposed to find.
            ubm_components: 16,
            ubm_iterations: 8,
            ubm_stride: 1,
            ubm_seed: 5,
            stats_weighted: false,
            tvm_rank: 16,
            tvm_iterations: 5,
            tvm_seed: 11,
            lda_dim: 0,
            svm_c: 0.01,
            svm_epochs: 100,
            backend_seed: 17,
            model_architecture: Architecture::IBlstm,
            model_hidden_dim: 64,
            model_fc_dim: 128,
            model_attn_dim: 64,
            model_embed_dim: 64,
            model_trunk_hidden_dim: 64,
            model_trunk_fc_dim: 128,
            model_hgru_l1: 64,
            model_hgru_l2: 128,
            model_hgru_l3: 128,
            model_hgru_win1: 20,
            model_hgru_hop1: 10,
            model_hgru_win2: 10,
            model_duration_threshold_s: 5.0,
            model_learning_rate: 1e-3,
            model_batch_size: 16,
            model_epochs: 10,
            model_val_fraction: 0.0,
            model_patience: 5,
            model_seed: 7,
            score_system: ScoreSystem::Svm,
            score_margin_scale: 2.0,
            work_dir: PathBuf::from("work"),
        }
    }

    /// Published-scale sizes (2048-component UBM, rank-500 subspace,
    /// 256-unit recurrent layers). The synthetic corpus stays desk-sized;
    /// only the models grow.
    pub fn paper() -> PipelineConfig {
        PipelineConfig {
            ubm_components: 2048,
            ubm_iterations: 10,
            tvm_rank: 500,
            model_hidden_dim: 256,
            model_fc_dim: 512,
            model_attn_dim: 256,
            model_embed_dim: 512,
            model_trunk_hidden_dim: 512,
            model_trunk_fc_dim: 512,
            model_hgru_l1: 256,
            model_hgru_l2: 512,
            model_hgru_l3: 512,
            ..PipelineConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<PipelineConfig> {
        match name {
            "desk" => Ok(PipelineConfig::desk()),
            "paper" => Ok(PipelineConfig::paper()),
            other => Err(Error::invalid(
                "preset",
                format!("unknown preset '{other}' (expected desk or paper)"),
            )),
        }
    }

    /// Applies one `key=value` pair. Unknown keys are an error.
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::invalid("config", format!("bad value '{v}' for key '{key}'"))
            })
        }
        match key {
            "corpus.num_languages" => self.num_languages = num(key, value)?,
            "corpus.train_utterances" => self.train_utterances = num(key, value)?,
            "corpus.eval_utterances" => self.eval_utterances = num(key, value)?,
            "corpus.duration_min_s" => self.duration_min_s = num(key, value)?,
            "corpus.duration_max_s" => self.duration_max_s = num(key, value)?,
            "corpus.feature_dim" => self.feature_dim = num(key, value)?,
            "corpus.source_components" => self.source_components = num(key, value)?,
            "corpus.mean_spread" => self.mean_spread = num(key, value)?,
            "corpus.noise" => self.noise = NoiseMode::parse(value)?,
            "corpus.snr_db" => self.snr_db = num(key, value)?,
            "corpus.hop_ms" => self.hop_ms = num(key, value)?,
            "corpus.seed" => self.corpus_seed = num(key, value)?,
            "features.sad_quantile" => self.sad_quantile = num(key, value)?,
            "features.cmvn_window_s" => self.cmvn_window_s = num(key, value)?,
            "ubm.components" => self.ubm_components = num(key, value)?,
            "ubm.iterations" => self.ubm_iterations = num(key, value)?,
            "ubm.stride" => self.ubm_stride = num(key, value)?,
            "ubm.seed" => self.ubm_seed = num(key, value)?,
            "stats.weighted" => self.stats_weighted = num(key, value)?,
            "tvm.rank" => self.tvm_rank = num(key, value)?,
            "tvm.iterations" => self.tvm_iterations = num(key, value)?,
            "tvm.seed" => self.tvm_seed = num(key, value)?,
            "backend.lda_dim" => self.lda_dim = num(key, value)?,
            "backend.svm_c" => self.svm_c = num(key, value)?,
            "backend.svm_epochs" => self.svm_epochs = num(key, value)?,
            "backend.seed" => self.backend_seed = num(key, value)?,
            "model.architecture" => self.model_architecture = Architecture::parse(value)?,
            "model.hidden_dim" => self.model_hidden_dim = num(key, value)?,
            "model.fc_dim" => self.model_fc_dim = num(key, value)?,
            "model.attn_dim" => self.model_attn_dim = num(key, value)?,
            "model.embed_dim" => self.model_embed_dim = num(key, value)?,
            "model.trunk_hidden_dim" => self.model_trunk_hidden_dim = num(key, value)?,
            "model.trunk_fc_dim" => self.model_trunk_fc_dim = num(key, value)?,
            "model.hgru_l1" => self.model_hgru_l1 = num(key, value)?,
            "model.hgru_l2" => self.model_hgru_l2 = num(key, value)?,
            "model.hgru_l3" => self.model_hgru_l3 = num(key, value)?,
            "model.hgru_win1" => self.model_hgru_win1 = num(key, value)?,
            "model.hgru_hop1" => self.model_hgru_hop1 = num(key, value)?,
            "model.hgru_win2" => self.model_hgru_win2 = num(key, value)?,
            "model.duration_threshold_s" => self.model_duration_threshold_s = num(key, value)?,
            "model.learning_rate" => self.model_learning_rate = num(key, value)?,
            "model.batch_size" => self.model_batch_size = num(key, value)?,
            "model.epochs" => self.model_epochs = num(key, value)?,
            "model.val_fraction" => self.model_val_fraction = num(key, value)?,
            "model.patience" => self.model_patience = num(key, value)?,
            "model.seed" => self.model_seed = num(key, value)?,
            "score.system" => self.score_system = ScoreSystem::parse(value)?,
            "score.margin_scale" => self.score_margin_scale = num(key, value)?,
            "paths.work_dir" => self.work_dir = PathBuf::from(value),
            other => {
                return Err(Error::invalid("config", format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over these defaults. Blank lines and lines
    /// starting with `#` are ignored; unknown and repeated keys are errors.
    pub fn parse_over(mut self, text: &str) -> Result<PipelineConfig> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid("config", format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::invalid("config", format!("duplicate key '{key}'")));
            }
            self.apply(key, value)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_languages < 2 {
            return Err(Error::invalid("config", "corpus.num_languages must be at least 2"));
        }
        if self.train_utterances == 0 || self.eval_utterances == 0 {
            return Err(Error::invalid("config", "utterance counts must be positive"));
        }
        if !(self.duration_min_s > 0.0 && self.duration_max_s >= self.duration_min_s) {
            return Err(Error::invalid(
                "config",
                format!(
                    "duration range [{}, {}]s is not ordered and positive",
                    self.duration_min_s, self.duration_max_s
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.sad_quantile) {
            return Err(Error::invalid("config", "features.sad_quantile must be in [0, 1)"));
        }
        if self.cmvn_window_s < 0.0 {
            return Err(Error::invalid("config", "features.cmvn_window_s must be >= 0"));
        }
        if self.ubm_stride == 0 {
            return Err(Error::invalid("config", "ubm.stride must be positive"));
        }
        if !(self.score_margin_scale > 0.0) {
            return Err(Error::invalid("config", "score.margin_scale must be positive"));
        }
        Ok(())
    }

    /// Serializes every key in sorted order; `parse_over` on the result
    /// reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "backend.lda_dim={}", self.lda_dim);
        let _ = writeln!(s, "backend.seed={}", self.backend_seed);
        let _ = writeln!(s, "backend.svm_c={}", self.svm_c);
        let _ = writeln!(s, "backend.svm_epochs={}", self.svm_epochs);
        let _ = writeln!(s, "corpus.duration_max_s={}", self.duration_max_s);
        let _ = writeln!(s, "corpus.duration_min_s={}", self.duration_min_s);
        let _ = writeln!(s, "corpus.eval_utterances={}", self.eval_utterances);
        let _ = writeln!(s, "corpus.feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "corpus.hop_ms={}", self.hop_ms);
        let _ = writeln!(s, "corpus.mean_spread={}", self.mean_spread);
        let _ = writeln!(s, "corpus.noise={}", self.noise.as_str());
        let _ = writeln!(s, "corpus.num_languages={}", self.num_languages);
        let _ = writeln!(s, "corpus.seed={}", self.corpus_seed);
        let _ = writeln!(s, "corpus.snr_db={}", self.snr_db);
        let _ = writeln!(s, "corpus.source_components={}", self.source_components);
        let _ = writeln!(s, "corpus.train_utterances={}", self.train_utterances);
        let _ = writeln!(s, "features.cmvn_window_s={}", self.cmvn_window_s);
        let _ = writeln!(s, "features.sad_quantile={}", self.sad_quantile);
        let _ = writeln!(s, "model.architecture={}", self.model_architecture.as_str());
        let _ = writeln!(s, "model.attn_dim={}", self.model_attn_dim);
        let _ = writeln!(s, "model.batch_size={}", self.model_batch_size);
        let _ = writeln!(s, "model.duration_threshold_s={}", self.model_duration_threshold_s);
        let _ = writeln!(s, "model.embed_dim={}", self.model_embed_dim);
        let _ = writeln!(s, "model.epochs={}", self.model_epochs);
        let _ = writeln!(s, "model.fc_dim={}", self.model_fc_dim);
        let _ = writeln!(s, "model.hgru_hop1={}", self.model_hgru_hop1);
        let _ = writeln!(s, "model.hgru_l1={}", self.model_hgru_l1);
        let _ = writeln!(s, "model.hgru_l2={}", self.model_hgru_l2);
        let _ = writeln!(s, "model.hgru_l3={}", self.model_hgru_l3);
        let _ = writeln!(s, "model.hgru_win1={}", self.model_hgru_win1);
        let _ = writeln!(s, "model.hgru_win2={}", self.model_hgru_win2);
        let _ = writeln!(s, "model.hidden_dim={}", self.model_hidden_dim);
        let _ = writeln!(s, "model.learning_rate={}", self.model_learning_rate);
        let _ = writeln!(s, "model.patience={}", self.model_patience);
        let _ = writeln!(s, "model.seed={}", self.model_seed);
        let _ = writeln!(s, "model.trunk_fc_dim={}", self.model_trunk_fc_dim);
        let _ = writeln!(s, "model.trunk_hidden_dim={}", self.model_trunk_hidden_dim);
        let _ = writeln!(s, "model.val_fraction={}", self.model_val_fraction);
        let _ = writeln!(s, "paths.work_dir={}", self.work_dir.display());
        let _ = writeln!(s, "score.margin_scale={}", self.score_margin_scale);
        let _ = writeln!(s, "score.system={}", self.score_system.as_str());
        let _ = writeln!(s, "stats.weighted={}", self.stats_weighted);
        let _ = writeln!(s, "tvm.iterations={}", self.tvm_iterations);
        let _ = writeln!(s, "tvm.rank={}", self.tvm_rank);
        let _ = writeln!(s, "tvm.seed={}", self.tvm_seed);
        let _ = writeln!(s, "ubm.components={}", self.ubm_components);
        let _ = writeln!(s, "ubm.iterations={}", self.ubm_iterations);
        let _ = writeln!(s, "ubm.seed={}", self.ubm_seed);
        let _ = writeln!(s, "ubm.stride={}", self.ubm_stride);
        s
    }

    /// Effective LDA output dimension (`backend.lda_dim`, or L-1 when 0).
    pub fn effective_lda_dim(&self) -> usize {
        if self.lda_dim == 0 {
            self.num_languages - 1
        } else {
            self.lda_dim
        }
    }

    /// Model configuration for `model.architecture`, with the input
    /// dimension derived from what that architecture consumes.
    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.model_architecture)
    }

    pub fn model_config_for(&self, architecture: Architecture) -> ModelConfig {
        let input_dim = match architecture {
            // Consume i-vectors.
            Architecture::EntropyDnn | Architecture::IBlstm => self.tvm_rank,
            // Consumes embeddings produced by the trained trunk.
            Architecture::XBlstm => self.model_embed_dim,
            // Consume acoustic frames directly.
            Architecture::Xvector | Architecture::Hgru | Architecture::XBlstmE2e => {
                self.feature_dim
            }
        };
        ModelConfig {
            architecture,
            num_languages: self.num_languages,
            input_dim,
            hidden_dim: self.model_hidden_dim,
            fc_dim: self.model_fc_dim,
            attn_dim: self.model_attn_dim,
            embed_dim: self.model_embed_dim,
            trunk_hidden_dim: self.model_trunk_hidden_dim,
            trunk_fc_dim: self.model_trunk_fc_dim,
            hgru_l1: self.model_hgru_l1,
            hgru_l2: self.model_hgru_l2,
            hgru_l3: self.model_hgru_l3,
            hgru_win1: self.model_hgru_win1,
            hgru_hop1: self.model_hgru_hop1,
            hgru_win2: self.model_hgru_win2,
            duration_threshold_s: self.model_duration_threshold_s,
            optimizer: OptimizerConfig {
                learning_rate: self.model_learning_rate,
                batch_size: self.model_batch_size,
                epochs: self.model_epochs,
                val_fraction: self.model_val_fraction,
                patience: self.model_patience,
            },
            seed: self.model_seed,
        }
    }

    // Artifact layout under the work dir.

    pub fn corpus_dir(&self, split: &str) -> PathBuf {
        self.work_dir.join("corpus").join(split)
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.corpus_dir(split).join("manifest.txt")
    }

    pub fn ubm_path(&self) -> PathBuf {
        self.work_dir.join("ubm.rgmm")
    }

    pub fn stats_dir(&self, split: &str) -> PathBuf {
        self.work_dir.join("stats").join(split)
    }

    pub fn tvm_path(&self) -> PathBuf {
        self.work_dir.join("tvm.rtvm")
    }

    pub fn ivectors_path(&self, split: &str) -> PathBuf {
        self.work_dir.join(format!("ivectors_{split}.rnet"))
    }

    pub fn wccn_path(&self) -> PathBuf {
        self.work_dir.join("backend").join("wccn.rltx")
    }

    pub fn lda_path(&self) -> PathBuf {
        self.work_dir.join("backend").join("lda.rltx")
    }

    pub fn svm_path(&self) -> PathBuf {
        self.work_dir.join("backend").join("svm.rsvm")
    }

    pub fn model_dir(&self, architecture: Architecture) -> PathBuf {
        self.work_dir.join("model").join(architecture.as_str())
    }

    pub fn scores_path(&self) -> PathBuf {
        self.work_dir.join("scores").join("eval_scores.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.work_dir.join("report.txt")
    }

    pub fn language_report_path(&self) -> PathBuf {
        self.work_dir.join("report_languages.csv")
    }

    pub fn det_path(&self) -> PathBuf {
        self.work_dir.join("det.csv")
    }

    pub fn attn_dir(&self) -> PathBuf {
        self.work_dir.join("attn")
    }
}

/// Loads a config: preset defaults (desk unless named), then the file's
/// overrides, then an explicit work-dir override from `--out`.
pub fn load_config(
    config: Option<&Path>,
    preset: Option<&str>,
    out: Option<&Path>,
) -> Result<PipelineConfig> {
    let base = PipelineConfig::preset(preset.unwrap_or("desk"))?;
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::bad_file(path, e.to_string()))?;
            base.parse_over(&text)?
        }
        None => base,
    };
    if let Some(dir) = out {
        cfg.work_dir = dir.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Caps rayon's global pool from `RELID_THREADS` when set. Call once at
/// process start, before any parallel work.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RELID_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            Error::invalid("threads", format!("RELID_THREADS='{v}' is not a positive integer"))
        })?;
        if n == 0 {
            return Err(Error::invalid("threads", "RELID_THREADS must be positive"));
        }
        // A second build_global in the same process is harmless: the pool
        // is already sized, so keep the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Display names for the class columns of score files.
pub fn language_names(num_languages: usize) -> Vec<String> {
    (0..num_languages).map(|l| format!("lang{l:02}")).collect()
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::invalid(
            "pipeline",
            format!("missing artifact {} (run {produced_by} first)", path.display()),
        ));
    }
    Ok(())
}

/// Utterance ids and labels straight from a manifest, without reading
/// feature files.
fn manifest_ids(manifest: &Path) -> Result<Vec<(String, Option<usize>)>> {
    let entries = corpus::read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for (rel, label) in entries {
        let id = rel
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::bad_file(manifest, format!("bad entry {}", rel.display())))?
            .to_string();
        out.push((id, label));
    }
    Ok(out)
}

/// Loads a split and applies the configured front end (SAD, then global
/// or sliding-window CMVN). Stored corpora stay raw; every consuming
/// stage prepares features identically through this one path.
pub fn load_prepared(cfg: &PipelineConfig, split: &str) -> Result<Vec<Utterance>> {
    let manifest = cfg.manifest_path(split);
    require(&manifest, "gen-corpus")?;
    let mut utts = corpus::load_corpus(&manifest)?;
    for utt in &mut utts {
        corpus::apply_sad(&mut utt.features, cfg.sad_quantile)?;
        if cfg.cmvn_window_s > 0.0 {
            corpus::cmvn(&mut utt.features, cfg.cmvn_window_s)?;
        } else {
            corpus::cmvn_global(&mut utt.features)?;
        }
    }
    Ok(utts)
}

fn corpus_config(cfg: &PipelineConfig, noise: NoiseMode) -> CorpusConfig {
    CorpusConfig {
        num_languages: cfg.num_languages,
        // Train and eval must come from the same seed: the language source
        // models depend only on (seed, language), so separate seeds would
        // define unrelated "languages" for the two splits.
        utterances_per_language: cfg.train_utterances + cfg.eval_utterances,
        duration_range_s: (cfg.duration_min_s, cfg.duration_max_s),
        feature_dim: cfg.feature_dim,
        source_components: cfg.source_components,
        mean_spread: cfg.mean_spread,
        noise,
        snr_db: cfg.snr_db,
        hop_ms: cfg.hop_ms,
        seed: cfg.corpus_seed,
    }
}

/// Generates the corpus and writes it as a train and an eval split: per
/// language, the first `corpus.train_utterances` utterance ids go to train
/// and the next `corpus.eval_utterances` to eval.
///
/// `corpus.noise` is a property of the evaluation split only: the training
/// split is always generated clean, so noise robustness is probed as a
/// train/test mismatch (systems never see the corruption during training)
/// rather than baked into every model. Both generation passes share the
/// corpus seed — language source models depend only on (seed, language) and
/// each utterance id owns its own RNG stream — so the training split is
/// bit-identical across noise modes and the splits never share an id.
pub fn gen_corpus(cfg: &PipelineConfig) -> Result<String> {
    let clean = corpus::generate_corpus(&corpus_config(cfg, NoiseMode::Clean))?;
    // generate_corpus orders utterances language-major, index-minor.
    let per = cfg.train_utterances + cfg.eval_utterances;
    let is_train = |i: usize| i % per < cfg.train_utterances;
    let mut train = Vec::with_capacity(cfg.num_languages * cfg.train_utterances);
    let mut eval_split = Vec::with_capacity(cfg.num_languages * cfg.eval_utterances);
    if cfg.noise == NoiseMode::Clean {
        for (i, utt) in clean.into_iter().enumerate() {
            if is_train(i) {
                train.push(utt);
            } else {
                eval_split.push(utt);
            }
        }
    } else {
        train.extend(clean.into_iter().enumerate().filter(|(i, _)| is_train(*i)).map(|(_, u)| u));
        let noisy = corpus::generate_corpus(&corpus_config(cfg, cfg.noise))?;
        eval_split
            .extend(noisy.into_iter().enumerate().filter(|(i, _)| !is_train(*i)).map(|(_, u)| u));
    }
    corpus::write_corpus(&cfg.corpus_dir("train"), &train)?;
    corpus::write_corpus(&cfg.corpus_dir("eval"), &eval_split)?;
    Ok(format!(
        "wrote {} train + {} eval utterances under {}",
        train.len(),
        eval_split.len(),
        cfg.work_dir.join("corpus").display()
    ))
}

/// Trains the universal background model on pooled voiced training frames.
pub fn train_ubm(cfg: &PipelineConfig) -> Result<String> {
    let utts = load_prepared(cfg, "train")?;
    let frames = corpus::pool_voiced_frames(&utts, cfg.ubm_stride)?;
    let (gmm, log) =
        ubm::train_ubm(frames.view(), cfg.ubm_components, cfg.ubm_iterations, cfg.ubm_seed)?;
    let final_ll = log
        .stage_log_likelihoods
        .last()
        .and_then(|v| v.last())
        .copied()
        .unwrap_or(f64::NAN);
    std::fs::create_dir_all(&cfg.work_dir)?;
    ubm::write_gmm(&cfg.ubm_path(), &gmm)?;
    Ok(format!(
        "trained {}-component UBM on {} frames (final avg log-likelihood {:.6}) -> {}",
        gmm.num_components(),
        frames.nrows(),
        final_ll,
        cfg.ubm_path().display()
    ))
}

/// Relevance-weighting context: scores feature blocks through the
/// statistics -> i-vector -> entropy scorer chain.
struct Weighter {
    gmm: DiagonalGmm,
    tvm: TvModel,
    scorer: TrainedModel,
    gamma: GammaConfig,
}

impl Weighter {
    fn load(cfg: &PipelineConfig, gmm: &DiagonalGmm) -> Result<Weighter> {
        require(&cfg.tvm_path(), "train-tvm")?;
        let dnn_dir = cfg.model_dir(Architecture::EntropyDnn);
        require(&dnn_dir.join("config.txt"), "train-model with model.architecture=entropy_dnn")?;
        let tvm = tvm::read_tvm(&cfg.tvm_path(), gmm.clone())?;
        let scorer = models::load_model(&dnn_dir)?;
        Ok(Weighter {
            gmm: gmm.clone(),
            tvm,
            scorer,
            gamma: GammaConfig::for_languages(cfg.num_languages)?,
        })
    }

    fn weights(&self, feats: &FeatureSequence) -> Result<Vec<f64>> {
        let mut score_block = |block: &FeatureSequence| -> Result<Array1<f64>> {
            let stats = bwstats::accumulate_stats(&self.gmm, block, None)?;
            let y = self.tvm.extract(&stats)?;
            Ok(models::predict(&self.scorer, ModelInput::Vector(y.view()))?.posteriors)
        };
        let mut gamma = bwstats::relevance_weights(&mut score_block, feats, &self.gamma)?;
        // An utterance whose every block is judged unreliable still needs an
        // i-vector; zero statistics would collapse downstream covariance
        // estimates. Fall back to unweighted accumulation for that utterance.
        if gamma.iter().all(|&g| g == 0.0) {
            gamma.iter_mut().for_each(|g| *g = 1.0);
        }
        Ok(gamma)
    }
}

/// Accumulates zeroth/first-order statistics for every utterance in both
/// splits. With `stats.weighted=true` each frame is scaled by the
/// entropy-derived relevance weight of its block, which requires the
/// subspace and the entropy scorer from an earlier unweighted pass.
pub fn extract_stats(cfg: &PipelineConfig) -> Result<String> {
    require(&cfg.ubm_path(), "train-ubm")?;
    let gmm = ubm::read_gmm(&cfg.ubm_path())?;
    let weighter = if cfg.stats_weighted {
        Some(Weighter::load(cfg, &gmm)?)
    } else {
        None
    };
    let mut counts = Vec::new();
    for split in ["train", "eval"] {
        let utts = load_prepared(cfg, split)?;
        let dir = cfg.stats_dir(split);
        std::fs::create_dir_all(&dir)?;
        for utt in &utts {
            let stats = match &weighter {
                Some(w) => {
                    let gamma = w.weights(&utt.features)?;
                    bwstats::accumulate_stats(&gmm, &utt.features, Some(&gamma))?
                }
                None => bwstats::accumulate_stats(&gmm, &utt.features, None)?,
            };
            bwstats::write_stats(&dir.join(format!("{}.rbws", utt.id)), &stats)?;
        }
        counts.push(utts.len());
    }
    Ok(format!(
        "wrote {} train + {} eval statistics files (weighted={}) under {}",
        counts[0],
        counts[1],
        cfg.stats_weighted,
        cfg.work_dir.join("stats").display()
    ))
}

fn read_split_stats(cfg: &PipelineConfig, split: &str) -> Result<Vec<(String, bwstats::BwStats)>> {
    let ids = manifest_ids(&cfg.manifest_path(split))?;
    let dir = cfg.stats_dir(split);
    let mut out = Vec::with_capacity(ids.len());
    for (id, _) in ids {
        let path = dir.join(format!("{id}.rbws"));
        require(&path, "extract-stats")?;
        out.push((id, bwstats::read_stats(&path)?));
    }
    Ok(out)
}

/// Trains the total-variability subspace from training statistics.
pub fn train_tvm(cfg: &PipelineConfig) -> Result<String> {
    require(&cfg.ubm_path(), "train-ubm")?;
    let gmm = ubm::read_gmm(&cfg.ubm_path())?;
    let stats: Vec<_> =
        read_split_stats(cfg, "train")?.into_iter().map(|(_, s)| s).collect();
    let (model, objective) =
        tvm::train_tvm(&gmm, &stats, cfg.tvm_rank, cfg.tvm_iterations, cfg.tvm_seed)?;
    tvm::write_tvm(&cfg.tvm_path(), &model)?;
    Ok(format!(
        "trained rank-{} subspace on {} utterances (final objective {:.6}) -> {}",
        model.rank(),
        stats.len(),
        objective.last().copied().unwrap_or(f64::NAN),
        cfg.tvm_path().display()
    ))
}

/// Extracts one i-vector per utterance into a named-tensor container per
/// split (tensor name = utterance id, shape 1 x rank).
pub fn extract_ivectors(cfg: &PipelineConfig) -> Result<String> {
    require(&cfg.ubm_path(), "train-ubm")?;
    require(&cfg.tvm_path(), "train-tvm")?;
    let gmm = ubm::read_gmm(&cfg.ubm_path())?;
    let model = tvm::read_tvm(&cfg.tvm_path(), gmm)?;
    let mut counts = Vec::new();
    for split in ["train", "eval"] {
        let mut set = crate::embednet::ParamSet::new();
        for (id, stats) in read_split_stats(cfg, split)? {
            let y = model.extract(&stats)?;
            let row = y.insert_axis(ndarray::Axis(0));
            set.insert(&id, row)?;
        }
        crate::embednet::write_checkpoint(&cfg.ivectors_path(split), &set)?;
        counts.push(set.len());
    }
    Ok(format!(
        "extracted {} train + {} eval i-vectors (rank {}) under {}",
        counts[0],
        counts[1],
        model.rank(),
        cfg.work_dir.display()
    ))
}

/// Reads one split's i-vectors, in manifest order, with labels.
fn read_split_ivectors(
    cfg: &PipelineConfig,
    split: &str,
) -> Result<(Vec<String>, Vec<Option<usize>>, Array2<f64>)> {
    let path = cfg.ivectors_path(split);
    require(&path, "extract-ivectors")?;
    let set = crate::embednet::read_checkpoint(&path)?;
    let ids = manifest_ids(&cfg.manifest_path(split))?;
    if set.len() != ids.len() {
        return Err(Error::invalid(
            "pipeline",
            format!(
                "{} holds {} i-vectors but the manifest lists {} utterances",
                path.display(),
                set.len(),
                ids.len()
            ),
        ));
    }
    let mut vectors = Array2::zeros((ids.len(), set.tensor(0).ncols()));
    let mut labels = Vec::with_capacity(ids.len());
    let mut names = Vec::with_capacity(ids.len());
    for (i, (id, label)) in ids.iter().enumerate() {
        let t = set.get(id).map_err(|_| {
            Error::invalid(
                "pipeline",
                format!("{} is missing an i-vector for {id}", path.display()),
            )
        })?;
        if t.nrows() != 1 || t.ncols() != vectors.ncols() {
            return Err(Error::shape(
                "pipeline",
                format!("i-vector {id} has shape {:?}", t.dim()),
            ));
        }
        vectors.row_mut(i).assign(&t.row(0));
        labels.push(*label);
        names.push(id.clone());
    }
    Ok((names, labels, vectors))
}

fn known_labels(split: &str, labels: &[Option<usize>]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            l.ok_or_else(|| {
                Error::invalid("pipeline", format!("{split} split has unlabeled utterances"))
            })
        })
        .collect()
}

/// Fits the classifier chain on training i-vectors: within-class
/// covariance normalization, length normalization, LDA, then a linear SVM
/// on the projected vectors.
pub fn train_backend(cfg: &PipelineConfig) -> Result<String> {
    let (_, labels, vectors) = read_split_ivectors(cfg, "train")?;
    let labels = known_labels("train", &labels)?;
    let wccn = backend::fit_wccn(vectors.view(), &labels)?;
    let mut normed = wccn.apply_rows(vectors.view())?;
    for mut row in normed.rows_mut() {
        let n = backend::length_normalize(row.view());
        row.assign(&n);
    }
    let lda = backend::fit_lda(normed.view(), &labels, cfg.effective_lda_dim())?;
    let projected = lda.apply_rows(normed.view())?;
    let svm = backend::train_linear_svm(
        projected.view(),
        &labels,
        cfg.svm_c,
        cfg.svm_epochs,
        cfg.backend_seed,
    )?;
    std::fs::create_dir_all(cfg.work_dir.join("backend"))?;
    backend::write_transform(&cfg.wccn_path(), &wccn)?;
    backend::write_transform(&cfg.lda_path(), &lda)?;
    backend::write_svm(&cfg.svm_path(), &svm)?;
    Ok(format!(
        "trained backend on {} i-vectors: wccn -> length norm -> lda({}) -> svm({} classes) under {}",
        vectors.nrows(),
        cfg.effective_lda_dim(),
        svm.num_classes(),
        cfg.work_dir.join("backend").display()
    ))
}

fn load_backend(cfg: &PipelineConfig) -> Result<(LinearTransform, LinearTransform, LinearSvm)> {
    for p in [cfg.wccn_path(), cfg.lda_path(), cfg.svm_path()] {
        require(&p, "train-backend")?;
    }
    Ok((
        backend::read_transform(&cfg.wccn_path())?,
        backend::read_transform(&cfg.lda_path())?,
        backend::read_svm(&cfg.svm_path())?,
    ))
}

/// Applies the trained chain to one i-vector and returns per-class margins.
fn backend_margins(
    chain: &(LinearTransform, LinearTransform, LinearSvm),
    v: ndarray::ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let (wccn, lda, svm) = chain;
    let v = wccn.apply(v)?;
    let v = backend::length_normalize(v.view());
    let v = lda.apply(v.view())?;
    backend::classify(svm, v.view())
}

/// Margins -> posteriors by softmax. Argmax is unchanged; the point is to
/// put SVM scores on the same flat-prior LLR scale as model posteriors.
fn softmax(margins: &Array1<f64>) -> Array1<f64> {
    let max = margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = margins.mapv(|v| (v - max).exp());
    let total = p.sum();
    p.mapv_inplace(|v| v / total);
    p
}

/// Trains `model.architecture` on the training split and saves the model
/// directory. Architectures that consume upstream artifacts (i-vectors,
/// trunk embeddings, initial checkpoints) load them from the work dir.
pub fn train_model(cfg: &PipelineConfig) -> Result<String> {
    let mcfg = cfg.model_config();
    let arch = mcfg.architecture;
    let model = match arch {
        Architecture::EntropyDnn => {
            // Segment i-vectors from every training utterance, labeled by
            // the utterance's language.
            let (tv, utts) = load_tvm_and_corpus(cfg, "train")?;
            let mut rows: Vec<Array2<f64>> = Vec::new();
            let mut labels = Vec::new();
            for utt in &utts {
                let lang = utt_label(utt)?;
                let segs = tv.segment_ivectors(&utt.features, SEGMENT_WINDOW, SEGMENT_HOP)?;
                for _ in 0..segs.nrows() {
                    labels.push(lang);
                }
                rows.push(segs);
            }
            let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
                .map_err(|e| Error::shape("pipeline", e.to_string()))?;
            models::train_entropy_dnn(stacked.view(), &labels, &mcfg)?
        }
        Architecture::IBlstm => {
            let (tv, utts) = load_tvm_and_corpus(cfg, "train")?;
            models::train_seq_model(
                &utts,
                |u| tv.segment_ivectors(&u.features, SEGMENT_WINDOW, SEGMENT_HOP),
                &mcfg,
            )?
        }
        Architecture::XBlstm => {
            let trunk = load_trained(cfg, Architecture::Xvector)?;
            let utts = load_prepared(cfg, "train")?;
            models::train_seq_model(
                &utts,
                |u| models::segment_xvectors(&trunk, &u.features, SEGMENT_WINDOW, SEGMENT_HOP),
                &mcfg,
            )?
        }
        Architecture::Hgru => {
            let utts = load_prepared(cfg, "train")?;
            models::train_hgru(&utts, &mcfg)?
        }
        Architecture::Xvector => {
            let utts = load_prepared(cfg, "train")?;
            models::train_xvector(&utts, &mcfg)?
        }
        Architecture::XBlstmE2e => {
            let trunk = load_trained(cfg, Architecture::Xvector)?;
            let backend_model = load_trained(cfg, Architecture::XBlstm)?;
            let utts = load_prepared(cfg, "train")?;
            models::train_e2e(&utts, &mcfg, &trunk, &backend_model)?
        }
    };
    let dir = cfg.model_dir(arch);
    models::save_model(&dir, &model)?;
    let last_loss = model.log.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} for {} steps (final batch loss {:.6}) -> {}",
        arch.as_str(),
        model.log.len(),
        last_loss,
        dir.display()
    ))
}

fn utt_label(utt: &Utterance) -> Result<usize> {
    utt.language.ok_or_else(|| {
        Error::invalid("pipeline", format!("utterance {} has no language label", utt.id))
    })
}

fn load_tvm_and_corpus(cfg: &PipelineConfig, split: &str) -> Result<(TvModel, Vec<Utterance>)> {
    require(&cfg.ubm_path(), "train-ubm")?;
    require(&cfg.tvm_path(), "train-tvm")?;
    let gmm = ubm::read_gmm(&cfg.ubm_path())?;
    let tv = tvm::read_tvm(&cfg.tvm_path(), gmm)?;
    Ok((tv, load_prepared(cfg, split)?))
}

fn load_trained(cfg: &PipelineConfig, arch: Architecture) -> Result<TrainedModel> {
    let dir = cfg.model_dir(arch);
    require(
        &dir.join("config.txt"),
        &format!("train-model with model.architecture={}", arch.as_str()),
    )?;
    models::load_model(&dir)
}

/// Everything a trained model needs at inference time beyond raw features.
enum Auxiliary {
    None,
    /// i-vector extractor for segment embeddings.
    Subspace(TvModel),
    /// Embedding trunk for segment x-vectors.
    Trunk(TrainedModel),
}

fn load_auxiliary(cfg: &PipelineConfig, arch: Architecture) -> Result<Auxiliary> {
    match arch {
        Architecture::EntropyDnn | Architecture::IBlstm => {
            require(&cfg.ubm_path(), "train-ubm")?;
            require(&cfg.tvm_path(), "train-tvm")?;
            let gmm = ubm::read_gmm(&cfg.ubm_path())?;
            Ok(Auxiliary::Subspace(tvm::read_tvm(&cfg.tvm_path(), gmm)?))
        }
        Architecture::XBlstm => Ok(Auxiliary::Trunk(load_trained(cfg, Architecture::Xvector)?)),
        Architecture::Hgru | Architecture::Xvector | Architecture::XBlstmE2e => {
            Ok(Auxiliary::None)
        }
    }
}

/// Runs one utterance through a trained model. For the segment-level
/// entropy scorer the utterance posterior is the inverse-entropy-weighted
/// fusion of its segment posteriors.
fn predict_utterance(
    model: &TrainedModel,
    aux: &Auxiliary,
    utt: &Utterance,
) -> Result<Prediction> {
    let f = &utt.features;
    match (model.config.architecture, aux) {
        (Architecture::EntropyDnn, Auxiliary::Subspace(tv)) => {
            let segs = tv.segment_ivectors(f, SEGMENT_WINDOW, SEGMENT_HOP)?;
            let mut posteriors = Vec::with_capacity(segs.nrows());
            for row in segs.rows() {
                posteriors.push(models::predict(model, ModelInput::Vector(row))?.posteriors);
            }
            let (fused, _) = bwstats::inverse_entropy_fuse(&posteriors)?;
            Ok(Prediction { posteriors: fused, attention: None, head: None })
        }
        (Architecture::IBlstm, Auxiliary::Subspace(tv)) => {
            let segs = tv.segment_ivectors(f, SEGMENT_WINDOW, SEGMENT_HOP)?;
            models::predict(model, ModelInput::Embeddings(segs.view()))
        }
        (Architecture::XBlstm, Auxiliary::Trunk(trunk)) => {
            let segs = models::segment_xvectors(trunk, f, SEGMENT_WINDOW, SEGMENT_HOP)?;
            models::predict(model, ModelInput::Embeddings(segs.view()))
        }
        (Architecture::Hgru | Architecture::Xvector | Architecture::XBlstmE2e, _) => {
            models::predict(model, ModelInput::Features(f))
        }
        (arch, _) => Err(Error::invalid(
            "pipeline",
            format!("no auxiliary artifacts loaded for {}", arch.as_str()),
        )),
    }
}

/// Scores the eval split and writes the trial score file.
pub fn score(cfg: &PipelineConfig) -> Result<String> {
    let languages = language_names(cfg.num_languages);
    let (trial_ids, labels, scores) = match cfg.score_system {
        ScoreSystem::Svm => {
            let chain = load_backend(cfg)?;
            let (ids, labels, vectors) = read_split_ivectors(cfg, "eval")?;
            let mut scores = Array2::zeros((vectors.nrows(), cfg.num_languages));
            for (i, v) in vectors.rows().into_iter().enumerate() {
                let margins = backend_margins(&chain, v)?;
                if margins.len() != cfg.num_languages {
                    return Err(Error::shape(
                        "pipeline",
                        format!(
                            "svm produced {} margins for {} languages",
                            margins.len(),
                            cfg.num_languages
                        ),
                    ));
                }
                let p = softmax(&(margins * cfg.score_margin_scale));
                let llr = eval::posteriors_to_llr(
                    p.as_slice().expect("contiguous posteriors"),
                    cfg.num_languages,
                )?;
                scores.row_mut(i).assign(&llr);
            }
            (ids, labels, scores)
        }
        ScoreSystem::Model => {
            let model = load_trained(cfg, cfg.model_architecture)?;
            let aux = load_auxiliary(cfg, cfg.model_architecture)?;
            let utts = load_prepared(cfg, "eval")?;
            let mut scores = Array2::zeros((utts.len(), cfg.num_languages));
            let mut ids = Vec::with_capacity(utts.len());
            let mut labels = Vec::with_capacity(utts.len());
            for (i, utt) in utts.iter().enumerate() {
                let pred = predict_utterance(&model, &aux, utt)?;
                let p = pred.posteriors.as_slice().expect("contiguous posteriors");
                let llr = eval::posteriors_to_llr(p, cfg.num_languages)?;
                scores.row_mut(i).assign(&llr);
                ids.push(utt.id.clone());
                labels.push(utt.language);
            }
            (ids, labels, scores)
        }
    };
    let set = ScoreSet { trial_ids, labels, languages, scores };
    let path = cfg.scores_path();
    std::fs::create_dir_all(path.parent().expect("scores path has a parent"))?;
    eval::write_scores(&path, &set)?;
    Ok(format!(
        "scored {} eval utterances with system={} -> {}",
        set.trial_ids.len(),
        cfg.score_system.as_str(),
        path.display()
    ))
}

/// Computes the metric suite from the score file and writes the reports.
pub fn evaluate(cfg: &PipelineConfig) -> Result<String> {
    let path = cfg.scores_path();
    require(&path, "score")?;
    let set = eval::read_scores(&path)?;
    let report = eval::evaluate(&set)?;
    eval::write_report(&cfg.report_path(), &report)?;
    eval::write_language_report(&cfg.language_report_path(), &set.languages, &report)?;
    eval::write_det_points(&cfg.det_path(), &set)?;
    let mut s = String::new();
    let _ = writeln!(s, "trials={}", report.num_trials);
    let _ = writeln!(s, "accuracy={}", report.accuracy);
    let _ = writeln!(s, "eer_avg={}", report.eer_avg);
    let _ = writeln!(s, "eer_pooled={}", report.eer_pooled);
    let _ = writeln!(s, "c_avg_beta1={}", report.c_avg_beta1);
    let _ = writeln!(s, "c_avg_beta9={}", report.c_avg_beta9);
    let _ = writeln!(s, "c_avg_primary={}", report.c_avg_primary);
    let _ = write!(s, "report={}", cfg.report_path().display());
    Ok(s)
}

/// Frame window covered by each attention position, per architecture.
fn attention_windows(cfg: &ModelConfig, num_frames: usize) -> Result<Vec<(usize, usize)>> {
    match cfg.architecture {
        Architecture::IBlstm | Architecture::XBlstm | Architecture::XBlstmE2e => {
            Ok(TvModel::segment_windows(num_frames, SEGMENT_WINDOW, SEGMENT_HOP))
        }
        Architecture::Hgru => {
            let (l1, l2) = models::layer_counts(num_frames, cfg)?;
            let mut out = Vec::with_capacity(l2);
            for j in 0..l2 {
                let first = j * cfg.hgru_win2;
                let last = ((j + 1) * cfg.hgru_win2).min(l1) - 1;
                let start = first * cfg.hgru_hop1;
                let end = last * cfg.hgru_hop1 + cfg.hgru_win1;
                out.push((start, end - start));
            }
            Ok(out)
        }
        arch => Err(Error::invalid(
            "pipeline",
            format!("{} has no attention layer to dump", arch.as_str()),
        )),
    }
}

/// Writes one CSV per eval utterance relating attention weights to the
/// short-term SNR of the frames each position attends over.
pub fn attn_dump(cfg: &PipelineConfig) -> Result<String> {
    let model = load_trained(cfg, cfg.model_architecture)?;
    let aux = load_auxiliary(cfg, cfg.model_architecture)?;
    let utts = load_prepared(cfg, "eval")?;
    let dir = cfg.attn_dir();
    std::fs::create_dir_all(&dir)?;
    for utt in &utts {
        let pred = predict_utterance(&model, &aux, utt)?;
        let attention = pred.attention.ok_or_else(|| {
            Error::invalid(
                "pipeline",
                format!("{} returned no attention weights", model.config.architecture.as_str()),
            )
        })?;
        let windows = attention_windows(&model.config, utt.features.num_frames())?;
        if windows.len() != attention.len() {
            return Err(Error::shape(
                "pipeline",
                format!(
                    "{}: {} attention positions but {} windows",
                    utt.id,
                    attention.len(),
                    windows.len()
                ),
            ));
        }
        let mut csv = String::from("segment,attention,mean_snr_db\n");
        for (i, ((start, len), w)) in windows.iter().zip(attention.iter()).enumerate() {
            let snr = corpus::mean_window_snr(&utt.features, *start, *len)
                .map(|v| v.to_string())
                .unwrap_or_else(|| "nan".to_string());
            let _ = writeln!(csv, "{i},{w},{snr}");
        }
        std::fs::write(dir.join(format!("{}.csv", utt.id)), csv)?;
    }
    Ok(format!("wrote {} attention dumps under {}", utts.len(), dir.display()))
}

/// Dispatches a subcommand by its CLI name.
pub fn run_stage(stage: &str, cfg: &PipelineConfig) -> Result<String> {
    match stage {
        "gen-corpus" => gen_corpus(cfg),
        "train-ubm" => train_ubm(cfg),
        "extract-stats" => extract_stats(cfg),
        "train-tvm" => train_tvm(cfg),
        "extract-ivectors" => extract_ivectors(cfg),
        "train-backend" => train_backend(cfg),
        "train-model" => train_model(cfg),
        "score" => score(cfg),
        "evaluate" => evaluate(cfg),
        "attn-dump" => attn_dump(cfg),
        other => Err(Error::invalid("pipeline", format!("unknown stage '{other}'"))),
    }
}

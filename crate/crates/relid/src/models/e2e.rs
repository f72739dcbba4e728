//! Joint fine-tuning of the x-vector trunk and the BLSTM-attention
//! sequence backend. The trunk's parameters live under "xv." and the
//! backend's under "seq." in one merged parameter set, the forward
//! pass runs every segment window through the trunk inside the same
//! graph as the backend, and gradients flow from the cross entropy all
//! the way into the TDNN stack. Fine-tuning runs Adam at a tenth of
//! the backend learning rate, so zero fine-tuning steps reproduce the
//! cascaded system exactly.

use rand_chacha::ChaCha8Rng;

use crate::corpus::{voiced_frames_f64, FeatureSequence, Utterance};
use crate::embednet::{Binding, Graph, ParamSet};
use crate::error::{Error, Result};
use crate::tvm::{TvModel, SEGMENT_HOP, SEGMENT_WINDOW};

use super::trainer::train_loop;
use super::xvector::XVEC_MIN_FRAMES;
use super::{batch_loss, seq, xvector, Architecture, ForwardOut, ModelConfig, TrainedModel};

/// Joint fine-tuning runs at this multiple of the backend rate.
pub(crate) const E2E_LR_FACTOR: f64 = 0.1;

/// Training crops are this long, in seconds, matching the sequence
/// backend's fifteen-second regime on the frame axis.
pub(crate) const E2E_CROP_S: f64 = 15.0;

pub(crate) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let trunk = xvector::init(cfg, cfg.trunk_hidden_dim, cfg.trunk_fc_dim, rng)?;
    let backend = seq::init_with_input(cfg, cfg.embed_dim, rng)?;
    merge(&trunk, &backend)
}

fn merge(trunk: &ParamSet, backend: &ParamSet) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    ps.merge_prefixed("xv.", trunk)?;
    ps.merge_prefixed("seq.", backend)?;
    Ok(ps)
}

pub(crate) fn forward(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    f: &FeatureSequence,
) -> Result<ForwardOut> {
    if f.dim() != cfg.input_dim {
        return Err(Error::shape(
            "x_blstm_e2e",
            format!("features have {} dims, expected {}", f.dim(), cfg.input_dim),
        ));
    }
    let windows = TvModel::segment_windows(f.num_frames(), SEGMENT_WINDOW, SEGMENT_HOP);
    let mut rows = Vec::with_capacity(windows.len());
    for &(start, len) in &windows {
        let window = f.slice(start, len)?;
        let voiced = voiced_frames_f64(&window);
        if voiced.nrows() < XVEC_MIN_FRAMES {
            rows.push(g.zeros(1, cfg.embed_dim)?);
        } else {
            let frames = g.leaf(voiced)?;
            rows.push(xvector::trunk_embedding(g, bd, "xv.", frames)?);
        }
    }
    let emb_mat = g.concat_rows(&rows)?;
    seq::forward_node(g, bd, "seq.", emb_mat)
}

/// Checks that the two initial checkpoints fit `cfg`, returning every
/// mismatch in one message.
fn check_compatible(
    cfg: &ModelConfig,
    trunk: &TrainedModel,
    backend: &TrainedModel,
) -> Result<()> {
    let mut problems = Vec::new();
    if trunk.config.architecture != Architecture::Xvector {
        problems.push(format!(
            "trunk model is {}, expected xvector",
            trunk.config.architecture.as_str()
        ));
    }
    if backend.config.architecture != Architecture::XBlstm {
        problems.push(format!(
            "backend model is {}, expected x_blstm",
            backend.config.architecture.as_str()
        ));
    }
    let fields = [
        ("trunk input_dim", trunk.config.input_dim, cfg.input_dim),
        ("trunk hidden_dim", trunk.config.hidden_dim, cfg.trunk_hidden_dim),
        ("trunk fc_dim", trunk.config.fc_dim, cfg.trunk_fc_dim),
        ("trunk embed_dim", trunk.config.embed_dim, cfg.embed_dim),
        ("trunk num_languages", trunk.config.num_languages, cfg.num_languages),
        ("backend input_dim", backend.config.input_dim, cfg.embed_dim),
        ("backend hidden_dim", backend.config.hidden_dim, cfg.hidden_dim),
        ("backend fc_dim", backend.config.fc_dim, cfg.fc_dim),
        ("backend attn_dim", backend.config.attn_dim, cfg.attn_dim),
        ("backend num_languages", backend.config.num_languages, cfg.num_languages),
    ];
    for (what, got, want) in fields {
        if got != want {
            problems.push(format!("{what} is {got}, config expects {want}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(
            "train_e2e",
            format!("architecture mismatch with initial checkpoints: {}", problems.join("; ")),
        ))
    }
}

/// Fine-tunes the merged network starting from a trained x-vector
/// trunk and a trained `x_blstm` backend, on one random
/// [`E2E_CROP_S`]-second crop per utterance per epoch.
pub fn train_e2e(
    utts: &[Utterance],
    cfg: &ModelConfig,
    trunk: &TrainedModel,
    backend: &TrainedModel,
) -> Result<TrainedModel> {
    if cfg.architecture != Architecture::XBlstmE2e {
        return Err(Error::invalid(
            "train_e2e",
            format!("config names architecture {}", cfg.architecture.as_str()),
        ));
    }
    cfg.validate()?;
    check_compatible(cfg, trunk, backend)?;
    for utt in utts {
        let label = utt.language.ok_or_else(|| {
            Error::invalid("train_e2e", format!("utterance {} has no label", utt.id))
        })?;
        if label >= cfg.num_languages {
            return Err(Error::invalid(
                "train_e2e",
                format!("label {label} out of range for {} languages", cfg.num_languages),
            ));
        }
    }
    let params = merge(&trunk.params, &backend.params)?;
    let mut opt = cfg.optimizer.clone();
    opt.learning_rate *= E2E_LR_FACTOR;
    let utt_labels: Vec<usize> = utts.iter().map(|u| u.language.expect("checked above")).collect();
    let (params, log) = train_loop(params, utts.len(), Some(&utt_labels), &opt, cfg.seed, |g, bd, batch, rng| {
        use rand::Rng;
        let mut crops: Vec<(FeatureSequence, usize)> = Vec::with_capacity(batch.len());
        for &i in batch {
            let utt = &utts[i];
            let label = utt.language.expect("checked above");
            let f = &utt.features;
            let frames_per_s = 1000.0 / f64::from(f.hop_ms);
            let want = (E2E_CROP_S * frames_per_s).round() as usize;
            let len = want.clamp(1, f.num_frames());
            let start = rng.random_range(0..=f.num_frames() - len);
            crops.push((f.slice(start, len)?, label));
        }
        let items: Vec<(super::ModelInput<'_>, usize)> =
            crops.iter().map(|(f, label)| (super::ModelInput::Features(f), *label)).collect();
        batch_loss(g, bd, cfg, &items)
    })?;
    Ok(TrainedModel { config: cfg.clone(), params, log })
}

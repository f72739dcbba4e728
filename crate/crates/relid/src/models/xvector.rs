//! X-vector embedding network: five context (TDNN) layers over voiced
//! frames, statistics pooling to a single mean-and-deviation vector,
//! then two fully connected layers and a zero-started softmax over
//! languages. The utterance embedding is the first post-pooling affine
//! output, taken before its nonlinearity; the classifier posteriors
//! are usable directly as a baseline scorer.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{voiced_frames_f64, FeatureSequence, Utterance};
use crate::embednet::layers::{
    affine, dense_init, dense_init_zero, stats_pool, tdnn_forward, tdnn_init,
};
use crate::embednet::{bind, Binding, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::tvm::TvModel;

use super::trainer::train_loop;
use super::{batch_loss, Architecture, ForwardOut, ModelConfig, ModelInput, TrainedModel};

/// Per-layer context offsets, in frames relative to the current step.
const TDNN_OFFSETS: [&[i64]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

/// Minimum voiced frames an input needs: the total context span of the
/// five layers (4 + 4 + 6 frames around the center, plus the center).
pub const XVEC_MIN_FRAMES: usize = 15;

/// Training crops are this long, in seconds.
pub(crate) const XVEC_CROP_S: f64 = 3.0;

/// Inserts the trunk and classifier parameters. `hidden` is the TDNN
/// width and `fc` the width of the second post-pooling layer; the
/// standalone model passes `cfg.hidden_dim` / `cfg.fc_dim`, the joint
/// end-to-end model its `trunk_*` fields.
pub(crate) fn init(
    cfg: &ModelConfig,
    hidden: usize,
    fc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    let mut in_dim = cfg.input_dim;
    for (i, offsets) in TDNN_OFFSETS.iter().enumerate() {
        tdnn_init(&mut ps, rng, &format!("t{}", i + 1), in_dim, hidden, offsets)?;
        in_dim = hidden;
    }
    dense_init(&mut ps, rng, "a1", 2 * hidden, cfg.embed_dim)?;
    dense_init(&mut ps, rng, "a2", cfg.embed_dim, fc)?;
    dense_init_zero(&mut ps, "out", fc, cfg.num_languages)?;
    Ok(ps)
}

/// Embedding of a frame matrix already in the graph: TDNN stack,
/// statistics pooling, first affine (pre-nonlinearity), 1 x embed_dim.
pub(crate) fn trunk_embedding(
    g: &mut Graph,
    bd: &Binding,
    prefix: &str,
    frames: NodeId,
) -> Result<NodeId> {
    let mut h = frames;
    for (i, offsets) in TDNN_OFFSETS.iter().enumerate() {
        h = tdnn_forward(g, bd, &format!("{prefix}t{}", i + 1), h, offsets)?;
    }
    let pooled = stats_pool(g, h)?;
    affine(g, bd, &format!("{prefix}a1"), pooled)
}

/// Classifier logits from an embedding node.
fn classifier_logits(g: &mut Graph, bd: &Binding, prefix: &str, emb: NodeId) -> Result<NodeId> {
    let r1 = g.relu(emb)?;
    let a2 = affine(g, bd, &format!("{prefix}a2"), r1)?;
    let r2 = g.relu(a2)?;
    affine(g, bd, &format!("{prefix}out"), r2)
}

fn voiced_or_error(f: &FeatureSequence, context: &'static str) -> Result<Array2<f64>> {
    let rows = voiced_frames_f64(f);
    if rows.nrows() < XVEC_MIN_FRAMES {
        return Err(Error::invalid(
            context,
            format!(
                "input has {} voiced frames, needs at least {XVEC_MIN_FRAMES} (network context span)",
                rows.nrows()
            ),
        ));
    }
    Ok(rows)
}

pub(crate) fn forward_classifier(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    f: &FeatureSequence,
) -> Result<ForwardOut> {
    if f.dim() != cfg.input_dim {
        return Err(Error::shape(
            "xvector",
            format!("features have {} dims, expected {}", f.dim(), cfg.input_dim),
        ));
    }
    let rows = voiced_or_error(f, "xvector")?;
    let frames = g.leaf(rows)?;
    let emb = trunk_embedding(g, bd, "", frames)?;
    let logits = classifier_logits(g, bd, "", emb)?;
    Ok(ForwardOut { logits, attention: None, head: None })
}

/// The utterance embedding: voiced frames through the trunk, returning
/// the pre-nonlinearity affine output after pooling.
pub fn extract_xvector(model: &TrainedModel, f: &FeatureSequence) -> Result<Array1<f64>> {
    if model.config.architecture != Architecture::Xvector {
        return Err(Error::invalid(
            "extract_xvector",
            format!("model is {}, not xvector", model.config.architecture.as_str()),
        ));
    }
    let rows = voiced_or_error(f, "extract_xvector")?;
    let mut g = Graph::new();
    let bd = bind(&mut g, &model.params)?;
    let frames = g.leaf(rows)?;
    let emb = trunk_embedding(&mut g, &bd, "", frames)?;
    Ok(g.value(emb).row(0).to_owned())
}

/// Segment x-vectors over sliding windows of `win` frames advanced by
/// `hop`, mirroring segment i-vector extraction: trailing windows that
/// would run past the end are dropped, a shorter-than-window utterance
/// yields one clipped window, and a window with fewer voiced frames
/// than the network's context span yields the zero vector.
pub fn segment_xvectors(
    model: &TrainedModel,
    f: &FeatureSequence,
    win: usize,
    hop: usize,
) -> Result<Array2<f64>> {
    if model.config.architecture != Architecture::Xvector {
        return Err(Error::invalid(
            "segment_xvectors",
            format!("model is {}, not xvector", model.config.architecture.as_str()),
        ));
    }
    if win == 0 || hop == 0 {
        return Err(Error::invalid("segment_xvectors", "win and hop must be positive"));
    }
    let windows = TvModel::segment_windows(f.num_frames(), win, hop);
    let mut out = Array2::zeros((windows.len(), model.config.embed_dim));
    for (row, &(start, len)) in windows.iter().enumerate() {
        let window = f.slice(start, len)?;
        let rows = voiced_frames_f64(&window);
        if rows.nrows() < XVEC_MIN_FRAMES {
            continue; // zero vector
        }
        let mut g = Graph::new();
        let bd = bind(&mut g, &model.params)?;
        let frames = g.leaf(rows)?;
        let emb = trunk_embedding(&mut g, &bd, "", frames)?;
        out.row_mut(row).assign(&g.value(emb).row(0));
    }
    Ok(out)
}

/// Trains the classifier on labeled feature sequences, one random
/// [`XVEC_CROP_S`]-second crop per utterance per epoch (the whole
/// utterance when shorter, or when a crop lands on too few voiced
/// frames).
pub fn train_xvector(utts: &[Utterance], cfg: &ModelConfig) -> Result<TrainedModel> {
    if cfg.architecture != Architecture::Xvector {
        return Err(Error::invalid(
            "train_xvector",
            format!("config names architecture {}", cfg.architecture.as_str()),
        ));
    }
    cfg.validate()?;
    for utt in utts {
        let label = utt.language.ok_or_else(|| {
            Error::invalid("train_xvector", format!("utterance {} has no label", utt.id))
        })?;
        if label >= cfg.num_languages {
            return Err(Error::invalid(
                "train_xvector",
                format!("label {label} out of range for {} languages", cfg.num_languages),
            ));
        }
        voiced_or_error(&utt.features, "train_xvector").map_err(|e| {
            Error::invalid("train_xvector", format!("utterance {}: {e}", utt.id))
        })?;
    }
    let utt_labels: Vec<usize> = utts.iter().map(|u| u.language.expect("checked above")).collect();
    let params = super::init_params(cfg)?;
    let (params, log) =
        train_loop(params, utts.len(), Some(&utt_labels), &cfg.optimizer, cfg.seed, |g, bd, batch, rng| {
            let mut crops: Vec<(FeatureSequence, usize)> = Vec::with_capacity(batch.len());
            for &i in batch {
                let utt = &utts[i];
                let label = utt.language.expect("checked above");
                let f = &utt.features;
                let frames_per_s = 1000.0 / f64::from(f.hop_ms);
                let want = (XVEC_CROP_S * frames_per_s).round() as usize;
                let len = want.clamp(1, f.num_frames());
                let start = rng.random_range(0..=f.num_frames() - len);
                let crop = f.slice(start, len)?;
                let crop = if crop.num_voiced() < XVEC_MIN_FRAMES { f.clone() } else { crop };
                crops.push((crop, label));
            }
            let items: Vec<(ModelInput<'_>, usize)> =
                crops.iter().map(|(f, label)| (ModelInput::Features(f), *label)).collect();
            batch_loss(g, bd, cfg, &items)
        })?;
    Ok(TrainedModel { config: cfg.clone(), params, log })
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, predict};
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn tiny_cfg(langs: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(Architecture::Xvector, langs, 2);
        cfg.hidden_dim = 2;
        cfg.fc_dim = 3;
        cfg.embed_dim = 2;
        cfg
    }

    fn features(t: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_fn((t, dim), |_| rng.random_range(-1.0f32..1.0));
        FeatureSequence::new(frames, vec![true; t], 10).unwrap()
    }

    fn init_model(cfg: &ModelConfig) -> TrainedModel {
        TrainedModel {
            params: init_params(cfg).unwrap(),
            config: cfg.clone(),
            log: vec![],
        }
    }

    #[test]
    fn loss_at_uniform_init_is_ln_l() {
        let cfg = tiny_cfg(4);
        let params = init_params(&cfg).unwrap();
        let f = features(20, 2, 1);
        let mut g = Graph::new();
        let bd = bind(&mut g, &params).unwrap();
        let items = [(ModelInput::Features(&f), 2usize)];
        let loss = batch_loss(&mut g, &bd, &cfg, &items).unwrap();
        assert_abs_diff_eq!(g.scalar(loss).unwrap(), 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn embedding_dim_is_fixed_and_crops_differ() {
        // Wide enough that no ReLU layer dies outright at initialization
        // (a dead layer would pool to a constant and equalize the crops).
        let mut cfg = tiny_cfg(2);
        cfg.hidden_dim = 6;
        cfg.embed_dim = 4;
        cfg.fc_dim = 6;
        let model = init_model(&cfg);
        let f = features(60, 2, 2);
        let short = f.slice(0, 20).unwrap();
        let long = f.slice(0, 45).unwrap();
        let e1 = extract_xvector(&model, &short).unwrap();
        let e2 = extract_xvector(&model, &long).unwrap();
        assert_eq!(e1.len(), cfg.embed_dim);
        assert_eq!(e2.len(), cfg.embed_dim);
        assert!(e1.iter().all(|v| v.is_finite()));
        assert!(e2.iter().all(|v| v.is_finite()));
        assert!(e1 != e2, "different crops should embed differently");
    }

    #[test]
    fn too_few_voiced_frames_is_rejected() {
        let cfg = tiny_cfg(2);
        let model = init_model(&cfg);
        let f = features(XVEC_MIN_FRAMES - 1, 2, 3);
        let err = extract_xvector(&model, &f).unwrap_err();
        assert!(err.to_string().contains("voiced frames"));
        let err = predict(&model, ModelInput::Features(&f)).unwrap_err();
        assert!(err.to_string().contains("voiced frames"));
    }

    #[test]
    fn posteriors_form_a_distribution() {
        let cfg = tiny_cfg(3);
        let model = init_model(&cfg);
        let p = predict(&model, ModelInput::Features(&features(30, 2, 4))).unwrap();
        assert_eq!(p.posteriors.len(), 3);
        assert_abs_diff_eq!(p.posteriors.sum(), 1.0, epsilon = 1e-12);
        assert!(p.attention.is_none());
    }

    #[test]
    fn segment_windows_mirror_ivector_layout_with_zero_rows_for_silence() {
        let cfg = tiny_cfg(2);
        let model = init_model(&cfg);
        let mut f = features(300, 2, 5);
        // Silence the first hundred frames: the first window has no
        // voiced frames and must embed to zero.
        for i in 0..100 {
            f.voiced[i] = false;
        }
        let segs = segment_xvectors(&model, &f, 100, 20).unwrap();
        assert_eq!(segs.nrows(), (300 - 100) / 20 + 1);
        assert!(segs.row(0).iter().all(|&v| v == 0.0));
        assert!(segs.row(segs.nrows() - 1).iter().any(|&v| v != 0.0));
        // Shorter than one window: a single clipped row.
        let short = f.slice(150, 80).unwrap();
        let segs = segment_xvectors(&model, &short, 100, 20).unwrap();
        assert_eq!(segs.nrows(), 1);
    }

    #[test]
    fn training_reduces_loss() {
        let mut cfg = tiny_cfg(2);
        cfg.hidden_dim = 6;
        cfg.embed_dim = 4;
        cfg.fc_dim = 6;
        cfg.optimizer.epochs = 5;
        cfg.optimizer.learning_rate = 1e-2;
        let utts: Vec<Utterance> = (0..6)
            .map(|i| {
                let lang = i % 2;
                let mut f = features(40, 2, 30 + i as u64);
                f.frames.mapv_inplace(|v| v + if lang == 0 { 1.0 } else { -1.0 });
                Utterance { id: format!("u{i}"), language: Some(lang), features: f }
            })
            .collect();
        let model = train_xvector(&utts, &cfg).unwrap();
        assert_abs_diff_eq!(model.log[0].1, (2.0f64).ln(), epsilon = 1e-12);
        assert!(model.log.last().unwrap().1 < model.log[0].1);
    }

    #[test]
    fn architecture_gradients_match_finite_differences() {
        let cfg = tiny_cfg(2);
        let params = init_params(&cfg).unwrap();
        let f = features(20, 2, 6);
        let report = crate::embednet::check_gradients(&params, |g, bd| {
            let items = [(ModelInput::Features(&f), 1usize)];
            batch_loss(g, bd, &cfg, &items)
        })
        .unwrap();
        assert!(report.ok(), "{:?}", report.failures);
    }
}

//! Hierarchical GRU over raw features with duration-specific output
//! heads. Layer 1 re-runs a unidirectional GRU over each short frame
//! window (default 20 frames, 10-frame hop) and keeps the final state;
//! layer 2 re-runs a unidirectional GRU over each non-overlapping block
//! of those vectors (default 10, so one output per second), processing
//! a shorter trailing block as well; layer 3 is a bidirectional GRU
//! over the second-level sequence, pooled by attention. A shared ReLU
//! fully connected layer feeds two zero-started softmax heads, and an
//! input is routed to the SHORT head when its duration is at most the
//! configured threshold, to the LONG head otherwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FeatureSequence, Utterance};
use crate::embednet::layers::{
    affine, attention_forward, attention_init, bigru_forward, dense_init, dense_init_zero,
    gru_forward_seq, gru_init, Direction,
};
use crate::embednet::{Binding, Graph, ParamSet};
use crate::error::{Error, Result};

use super::trainer::train_loop;
use super::{batch_loss, Architecture, DurationHead, ForwardOut, ModelConfig, TrainedModel};

/// SHORT-head training crops are this long.
pub(crate) const SHORT_CROP_S: f64 = 3.0;
/// LONG-head training crops are drawn uniformly from this range.
pub(crate) const LONG_CROP_RANGE_S: (f64, f64) = (10.0, 30.0);

pub(crate) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    gru_init(&mut ps, rng, "l1", cfg.input_dim, cfg.hgru_l1)?;
    gru_init(&mut ps, rng, "l2", cfg.hgru_l1, cfg.hgru_l2)?;
    gru_init(&mut ps, rng, "l3f", cfg.hgru_l2, cfg.hgru_l3)?;
    gru_init(&mut ps, rng, "l3b", cfg.hgru_l2, cfg.hgru_l3)?;
    attention_init(&mut ps, rng, "attn", 2 * cfg.hgru_l3, cfg.attn_dim)?;
    dense_init(&mut ps, rng, "fc", 2 * cfg.hgru_l3, cfg.fc_dim)?;
    dense_init_zero(&mut ps, "short", cfg.fc_dim, cfg.num_languages)?;
    dense_init_zero(&mut ps, "long", cfg.fc_dim, cfg.num_languages)?;
    Ok(ps)
}

/// How many vectors layers 1 and 2 emit for a `t`-frame input:
/// layer 1 emits one per full window, (t - win1) / hop1 + 1; layer 2
/// emits one per block of win2, with a shorter trailing block still
/// processed, ceil(l1 / win2).
pub fn layer_counts(t: usize, cfg: &ModelConfig) -> Result<(usize, usize)> {
    if t < cfg.hgru_win1 {
        return Err(Error::invalid(
            "hgru",
            format!("{t} frames is shorter than one layer-1 window of {}", cfg.hgru_win1),
        ));
    }
    let l1 = (t - cfg.hgru_win1) / cfg.hgru_hop1 + 1;
    let l2 = l1.div_ceil(cfg.hgru_win2);
    Ok((l1, l2))
}

/// Routes a duration to an output head.
pub(crate) fn route(cfg: &ModelConfig, duration_s: f64) -> DurationHead {
    if duration_s <= cfg.duration_threshold_s {
        DurationHead::Short
    } else {
        DurationHead::Long
    }
}

pub(crate) fn forward(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    f: &FeatureSequence,
) -> Result<ForwardOut> {
    if f.dim() != cfg.input_dim {
        return Err(Error::shape(
            "hgru",
            format!("features have {} dims, expected {}", f.dim(), cfg.input_dim),
        ));
    }
    let t = f.num_frames();
    let (l1_count, _) = layer_counts(t, cfg)?;
    let head = route(cfg, f.duration_s());

    let frames = f.frames.mapv(f64::from);
    let x = g.leaf(frames)?;

    // Layer 1: final GRU state of each overlapping window.
    let mut l1_rows = Vec::with_capacity(l1_count);
    for k in 0..l1_count {
        let win = g.slice_rows(x, k * cfg.hgru_hop1, cfg.hgru_win1)?;
        let states = gru_forward_seq(g, bd, "l1", win, Direction::Forward)?;
        l1_rows.push(*states.last().expect("window is nonempty"));
    }
    let l1_mat = g.concat_rows(&l1_rows)?;

    // Layer 2: final GRU state of each non-overlapping block, trailing
    // remainder included.
    let l2_count = l1_count.div_ceil(cfg.hgru_win2);
    let mut l2_rows = Vec::with_capacity(l2_count);
    for j in 0..l2_count {
        let start = j * cfg.hgru_win2;
        let len = cfg.hgru_win2.min(l1_count - start);
        let block = g.slice_rows(l1_mat, start, len)?;
        let states = gru_forward_seq(g, bd, "l2", block, Direction::Forward)?;
        l2_rows.push(*states.last().expect("block is nonempty"));
    }
    let l2_mat = g.concat_rows(&l2_rows)?;

    let h3 = bigru_forward(g, bd, "l3f", "l3b", l2_mat)?;
    let (pooled, weights) = attention_forward(g, bd, "attn", h3)?;
    let a = affine(g, bd, "fc", pooled)?;
    let fc = g.relu(a)?;
    let head_name = match head {
        DurationHead::Short => "short",
        DurationHead::Long => "long",
    };
    let logits = affine(g, bd, head_name, fc)?;
    Ok(ForwardOut { logits, attention: Some(weights), head: Some(head) })
}

/// Trains the hierarchy end to end on labeled feature sequences. Each
/// utterance contributes two crops per epoch: a [`SHORT_CROP_S`]-second
/// crop and one drawn from [`LONG_CROP_RANGE_S`], both clamped to the
/// utterance (and to one layer-1 window) and routed by their own
/// duration, so each head trains on durations it will serve.
pub fn train_hgru(utts: &[Utterance], cfg: &ModelConfig) -> Result<TrainedModel> {
    if cfg.architecture != Architecture::Hgru {
        return Err(Error::invalid(
            "train_hgru",
            format!("config names architecture {}", cfg.architecture.as_str()),
        ));
    }
    cfg.validate()?;
    for utt in utts {
        let label = utt.language.ok_or_else(|| {
            Error::invalid("train_hgru", format!("utterance {} has no label", utt.id))
        })?;
        if label >= cfg.num_languages {
            return Err(Error::invalid(
                "train_hgru",
                format!("label {label} out of range for {} languages", cfg.num_languages),
            ));
        }
        layer_counts(utt.features.num_frames(), cfg).map_err(|_| {
            Error::invalid(
                "train_hgru",
                format!(
                    "utterance {} has {} frames, shorter than one layer-1 window of {}",
                    utt.id,
                    utt.features.num_frames(),
                    cfg.hgru_win1
                ),
            )
        })?;
    }
    let utt_labels: Vec<usize> = utts.iter().map(|u| u.language.expect("checked above")).collect();
    let params = super::init_params(cfg)?;
    let (params, log) =
        train_loop(params, utts.len(), Some(&utt_labels), &cfg.optimizer, cfg.seed, |g, bd, batch, rng| {
            let mut crops: Vec<(FeatureSequence, usize)> = Vec::with_capacity(2 * batch.len());
            for &i in batch {
                let utt = &utts[i];
                let label = utt.language.expect("checked above");
                let f = &utt.features;
                let frames_per_s = 1000.0 / f64::from(f.hop_ms);
                let short_frames = (SHORT_CROP_S * frames_per_s).round() as usize;
                let long_s = rng.random_range(LONG_CROP_RANGE_S.0..=LONG_CROP_RANGE_S.1);
                let long_frames = (long_s * frames_per_s).round() as usize;
                for want in [short_frames, long_frames] {
                    let len = want.clamp(cfg.hgru_win1, f.num_frames());
                    let start = rng.random_range(0..=f.num_frames() - len);
                    crops.push((f.slice(start, len)?, label));
                }
            }
            let items: Vec<(super::ModelInput<'_>, usize)> = crops
                .iter()
                .map(|(f, label)| (super::ModelInput::Features(f), *label))
                .collect();
            batch_loss(g, bd, cfg, &items)
        })?;
    Ok(TrainedModel { config: cfg.clone(), params, log })
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, predict, ModelInput};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn tiny_cfg(langs: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(Architecture::Hgru, langs, 2);
        cfg.hgru_l1 = 2;
        cfg.hgru_l2 = 2;
        cfg.hgru_l3 = 2;
        cfg.attn_dim = 2;
        cfg.fc_dim = 3;
        cfg.hgru_win1 = 4;
        cfg.hgru_hop1 = 2;
        cfg.hgru_win2 = 3;
        cfg
    }

    fn features(t: usize, dim: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_fn((t, dim), |_| rng.random_range(-1.0f32..1.0));
        FeatureSequence::new(frames, vec![true; t], 10).unwrap()
    }

    #[test]
    fn window_arithmetic_matches_closed_form() {
        // Default windows: 1000 frames -> 99 first-level vectors -> 10
        // second-level vectors.
        let cfg = ModelConfig::desk(Architecture::Hgru, 3, 20);
        assert_eq!(layer_counts(1000, &cfg).unwrap(), (99, 10));
        assert_eq!(layer_counts(20, &cfg).unwrap(), (1, 1));
        assert!(layer_counts(19, &cfg).is_err());

        // Enumerated oracle: count the windows a direct scan produces.
        let tiny = tiny_cfg(2);
        for t in [4, 5, 9, 12, 17, 101] {
            let mut l1 = 0;
            let mut start = 0;
            while start + tiny.hgru_win1 <= t {
                l1 += 1;
                start += tiny.hgru_hop1;
            }
            let l2 = l1 / tiny.hgru_win2 + usize::from(l1 % tiny.hgru_win2 != 0);
            assert_eq!(layer_counts(t, &tiny).unwrap(), (l1, l2), "t = {t}");
        }
    }

    #[test]
    fn attention_length_equals_second_level_count() {
        let cfg = tiny_cfg(2);
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg.clone(),
            log: vec![],
        };
        let f = features(17, 2, 3);
        let (_, l2) = layer_counts(17, &cfg).unwrap();
        let p = predict(&model, ModelInput::Features(&f)).unwrap();
        assert_eq!(p.attention.unwrap().len(), l2);
        assert_abs_diff_eq!(p.posteriors.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn duration_routes_to_the_matching_head() {
        let mut cfg = tiny_cfg(2);
        cfg.hgru_win1 = 20;
        cfg.hgru_hop1 = 10;
        cfg.hgru_win2 = 10;
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg,
            log: vec![],
        };
        // 300 frames of 10 ms = 3 s <= 5 s threshold.
        let p = predict(&model, ModelInput::Features(&features(300, 2, 4))).unwrap();
        assert_eq!(p.head, Some(DurationHead::Short));
        // 1000 frames = 10 s > 5 s.
        let p = predict(&model, ModelInput::Features(&features(1000, 2, 5))).unwrap();
        assert_eq!(p.head, Some(DurationHead::Long));
    }

    #[test]
    fn loss_at_uniform_init_is_ln_l_on_both_heads() {
        let cfg = tiny_cfg(3);
        let params = init_params(&cfg).unwrap();
        // 0.12 s and 0.06 s against the 0.1 s threshold: one crop per head.
        let mut cfg_split = cfg.clone();
        cfg_split.duration_threshold_s = 0.1;
        let long_f = features(12, 2, 6);
        let short_f = features(6, 2, 7);
        for f in [&short_f, &long_f] {
            let mut g = Graph::new();
            let bd = crate::embednet::bind(&mut g, &params).unwrap();
            let items = [(ModelInput::Features(f), 1usize)];
            let loss = batch_loss(&mut g, &bd, &cfg_split, &items).unwrap();
            assert_abs_diff_eq!(g.scalar(loss).unwrap(), 3.0f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn too_short_input_is_rejected() {
        let cfg = tiny_cfg(2);
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg.clone(),
            log: vec![],
        };
        let err = predict(&model, ModelInput::Features(&features(3, 2, 8))).unwrap_err();
        assert!(err.to_string().contains("shorter than one layer-1 window"));

        let utts = vec![Utterance {
            id: "short".into(),
            language: Some(0),
            features: features(3, 2, 9),
        }];
        assert!(train_hgru(&utts, &cfg).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        // Wide enough that the fully connected ReLU layer keeps live
        // units at initialization; a dead layer would leave only the
        // head biases trainable, which balanced classes pin at ln 2.
        let mut cfg = tiny_cfg(2);
        cfg.hgru_l1 = 4;
        cfg.hgru_l2 = 4;
        cfg.hgru_l3 = 4;
        cfg.fc_dim = 8;
        cfg.attn_dim = 4;
        cfg.optimizer.epochs = 4;
        cfg.optimizer.batch_size = 4;
        cfg.optimizer.learning_rate = 1e-2;
        let utts: Vec<Utterance> = (0..6)
            .map(|i| {
                let lang = i % 2;
                let mut f = features(40, 2, 20 + i as u64);
                // Shift each language's features apart so crops separate.
                f.frames.mapv_inplace(|v| v + if lang == 0 { 1.0 } else { -1.0 });
                Utterance { id: format!("u{i}"), language: Some(lang), features: f }
            })
            .collect();
        let model = train_hgru(&utts, &cfg).unwrap();
        assert_abs_diff_eq!(model.log[0].1, (2.0f64).ln(), epsilon = 1e-12);
        assert!(model.log.last().unwrap().1 < model.log[0].1);
    }

    #[test]
    fn architecture_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg(2);
        // 0.12 s vs 0.08 s against a 0.1 s threshold exercises both heads
        // in one batch.
        cfg.duration_threshold_s = 0.1;
        let params = init_params(&cfg).unwrap();
        let f_long = features(12, 2, 10);
        let f_short = features(8, 2, 11);
        let report = crate::embednet::check_gradients(&params, |g, bd| {
            let items = [
                (ModelInput::Features(&f_long), 0usize),
                (ModelInput::Features(&f_short), 1usize),
            ];
            batch_loss(g, bd, &cfg, &items)
        })
        .unwrap();
        assert!(report.ok(), "{:?}", report.failures);
    }
}

//! Sequence classifier over segment embeddings: two bidirectional LSTM
//! layers, attention pooling over time, one ReLU fully connected layer,
//! and a zero-started softmax output. The same network serves i-vector
//! sequences (`i_blstm`) and x-vector sequences (`x_blstm`); only the
//! embedding source differs.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Utterance;
use crate::embednet::layers::{
    affine, attention_forward, attention_init, bilstm_forward, dense_init, dense_init_zero,
    lstm_init,
};
use crate::embednet::{Binding, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

use super::trainer::train_loop;
use super::{batch_loss, Architecture, ForwardOut, ModelConfig, ModelInput, TrainedModel};

/// Training crop length in embedding rows: fifteen seconds of
/// 10 ms frames, windowed at 100 frames per segment with a 20-frame
/// hop, yields (1500 - 100) / 20 + 1 = 71 segment embeddings.
pub const SEQ_CROP_ROWS: usize = 71;

/// Inserts the sequence classifier's parameters with `in_dim` inputs
/// per time step. Names are unprefixed; the joint end-to-end model
/// merges them under "seq.".
pub(crate) fn init_with_input(
    cfg: &ModelConfig,
    in_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    let h = cfg.hidden_dim;
    lstm_init(&mut ps, rng, "l1f", in_dim, h)?;
    lstm_init(&mut ps, rng, "l1b", in_dim, h)?;
    lstm_init(&mut ps, rng, "l2f", 2 * h, h)?;
    lstm_init(&mut ps, rng, "l2b", 2 * h, h)?;
    attention_init(&mut ps, rng, "attn", 2 * h, cfg.attn_dim)?;
    dense_init(&mut ps, rng, "fc", 2 * h, cfg.fc_dim)?;
    dense_init_zero(&mut ps, "out", cfg.fc_dim, cfg.num_languages)?;
    Ok(ps)
}

/// Forward pass from an embedding matrix already in the graph
/// (T x in_dim). `prefix` selects the parameter namespace ("" for the
/// standalone model, "seq." inside the end-to-end model).
pub(crate) fn forward_node(
    g: &mut Graph,
    bd: &Binding,
    prefix: &str,
    x: NodeId,
) -> Result<ForwardOut> {
    let h1 = bilstm_forward(g, bd, &format!("{prefix}l1f"), &format!("{prefix}l1b"), x)?;
    let h2 = bilstm_forward(g, bd, &format!("{prefix}l2f"), &format!("{prefix}l2b"), h1)?;
    let (pooled, weights) = attention_forward(g, bd, &format!("{prefix}attn"), h2)?;
    let a = affine(g, bd, &format!("{prefix}fc"), pooled)?;
    let fc = g.relu(a)?;
    let logits = affine(g, bd, &format!("{prefix}out"), fc)?;
    Ok(ForwardOut { logits, attention: Some(weights), head: None })
}

pub(crate) fn forward(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: ArrayView2<'_, f64>,
) -> Result<ForwardOut> {
    if x.nrows() == 0 {
        return Err(Error::invalid("sequence model", "empty embedding sequence"));
    }
    if x.ncols() != cfg.input_dim {
        return Err(Error::shape(
            "sequence model",
            format!("embeddings have {} dims, expected {}", x.ncols(), cfg.input_dim),
        ));
    }
    let node = g.leaf(x.to_owned())?;
    forward_node(g, bd, prefix, node)
}

/// Trains the sequence classifier. `embeddings_fn` maps each utterance
/// to its segment-embedding sequence (one row per segment); embeddings
/// are computed once up front. Each epoch draws one random contiguous
/// crop of [`SEQ_CROP_ROWS`] rows per utterance (the whole sequence if
/// shorter).
pub fn train_seq_model<F>(
    utts: &[Utterance],
    embeddings_fn: F,
    cfg: &ModelConfig,
) -> Result<TrainedModel>
where
    F: Fn(&Utterance) -> Result<Array2<f64>>,
{
    if !matches!(cfg.architecture, Architecture::IBlstm | Architecture::XBlstm) {
        return Err(Error::invalid(
            "train_seq_model",
            format!("config names architecture {}", cfg.architecture.as_str()),
        ));
    }
    cfg.validate()?;
    let mut items: Vec<(Array2<f64>, usize)> = Vec::with_capacity(utts.len());
    for utt in utts {
        let label = utt.language.ok_or_else(|| {
            Error::invalid("train_seq_model", format!("utterance {} has no label", utt.id))
        })?;
        if label >= cfg.num_languages {
            return Err(Error::invalid(
                "train_seq_model",
                format!("label {label} out of range for {} languages", cfg.num_languages),
            ));
        }
        let emb = embeddings_fn(utt)?;
        if emb.nrows() == 0 {
            return Err(Error::invalid(
                "train_seq_model",
                format!("utterance {} produced an empty embedding sequence", utt.id),
            ));
        }
        if emb.ncols() != cfg.input_dim {
            return Err(Error::shape(
                "train_seq_model",
                format!(
                    "utterance {} embeddings have {} dims, config says {}",
                    utt.id,
                    emb.ncols(),
                    cfg.input_dim
                ),
            ));
        }
        items.push((emb, label));
    }
    let item_labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
    let params = super::init_params(cfg)?;
    let (params, log) =
        train_loop(params, items.len(), Some(&item_labels), &cfg.optimizer, cfg.seed, |g, bd, batch, rng| {
            let mut batch_items = Vec::with_capacity(batch.len());
            for &i in batch {
                let (emb, label) = &items[i];
                let rows = emb.nrows();
                let view = if rows <= SEQ_CROP_ROWS {
                    emb.view()
                } else {
                    let start = rng.random_range(0..=rows - SEQ_CROP_ROWS);
                    emb.slice(ndarray::s![start..start + SEQ_CROP_ROWS, ..])
                };
                batch_items.push((ModelInput::Embeddings(view), *label));
            }
            batch_loss(g, bd, cfg, &batch_items)
        })?;
    Ok(TrainedModel { config: cfg.clone(), params, log })
}

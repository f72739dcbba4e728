//! Feed-forward scorer over single segment embeddings: three ReLU
//! hidden layers and a zero-started softmax output. Each 1000 ms
//! segment i-vector is classified on its own, inheriting its
//! utterance's language label, and the resulting posteriors are what
//! the entropy-based relevance weighting consumes.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::embednet::layers::{affine, dense_init, dense_init_zero};
use crate::embednet::{Binding, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

use super::trainer::train_loop;
use super::{Architecture, ForwardOut, ModelConfig, TrainedModel};

pub(crate) fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    dense_init(&mut ps, rng, "h1", cfg.input_dim, cfg.hidden_dim)?;
    dense_init(&mut ps, rng, "h2", cfg.hidden_dim, cfg.hidden_dim)?;
    dense_init(&mut ps, rng, "h3", cfg.hidden_dim, cfg.hidden_dim)?;
    dense_init_zero(&mut ps, "out", cfg.hidden_dim, cfg.num_languages)?;
    Ok(ps)
}

/// Logits for a batch of row vectors (B x input_dim -> B x L).
fn logits_from_rows(g: &mut Graph, bd: &Binding, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for layer in ["h1", "h2", "h3"] {
        let a = affine(g, bd, layer, h)?;
        h = g.relu(a)?;
    }
    affine(g, bd, "out", h)
}

pub(crate) fn forward(
    g: &mut Graph,
    bd: &Binding,
    cfg: &ModelConfig,
    v: ArrayView1<'_, f64>,
) -> Result<ForwardOut> {
    if v.len() != cfg.input_dim {
        return Err(Error::shape(
            "entropy_dnn",
            format!("input has {} dims, expected {}", v.len(), cfg.input_dim),
        ));
    }
    let row = g.leaf(v.to_owned().insert_axis(ndarray::Axis(0)))?;
    let logits = logits_from_rows(g, bd, row)?;
    Ok(ForwardOut { logits, attention: None, head: None })
}

/// Trains the segment-level scorer on stacked segment embeddings (one
/// row per segment) with their inherited utterance labels.
pub fn train_entropy_dnn(
    vectors: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &ModelConfig,
) -> Result<TrainedModel> {
    if cfg.architecture != Architecture::EntropyDnn {
        return Err(Error::invalid(
            "train_entropy_dnn",
            format!("config names architecture {}", cfg.architecture.as_str()),
        ));
    }
    cfg.validate()?;
    if vectors.nrows() != labels.len() {
        return Err(Error::shape(
            "train_entropy_dnn",
            format!("{} vectors but {} labels", vectors.nrows(), labels.len()),
        ));
    }
    if vectors.ncols() != cfg.input_dim {
        return Err(Error::shape(
            "train_entropy_dnn",
            format!("vectors have {} dims, config says {}", vectors.ncols(), cfg.input_dim),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.num_languages) {
        return Err(Error::invalid(
            "train_entropy_dnn",
            format!("label {bad} out of range for {} languages", cfg.num_languages),
        ));
    }
    let params = super::init_params(cfg)?;
    let dim = cfg.input_dim;
    let (params, log) = train_loop(
        params,
        vectors.nrows(),
        Some(labels),
        &cfg.optimizer,
        cfg.seed,
        |g, bd, batch, _rng| {
            let mut rows = Array2::zeros((batch.len(), dim));
            let mut batch_labels = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                rows.row_mut(r).assign(&vectors.row(i));
                batch_labels.push(labels[i]);
            }
            let x = g.leaf(rows)?;
            let logits = logits_from_rows(g, bd, x)?;
            g.cross_entropy(logits, &batch_labels)
        },
    )?;
    Ok(TrainedModel { config: cfg.clone(), params, log })
}

#[cfg(test)]
mod tests {
    use super::super::{batch_loss, init_params, predict, ModelInput, OptimizerConfig};
    use super::*;
    use crate::embednet::{bind, check_gradients};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(langs: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk(Architecture::EntropyDnn, langs, 4);
        cfg.hidden_dim = 8;
        cfg
    }

    /// Two well-separated Gaussian clouds in 4 dimensions.
    fn separable(n_per_class: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Array2::zeros((2 * n_per_class, 4));
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            for j in 0..4 {
                x[[i, j]] = center + 0.3 * rng.random_range(-1.0..1.0);
            }
            labels.push(class);
        }
        (x, labels)
    }

    #[test]
    fn loss_at_uniform_init_is_ln_l() {
        for langs in [2, 3, 7] {
            let cfg = tiny_cfg(langs);
            let params = init_params(&cfg).unwrap();
            let mut g = Graph::new();
            let bd = bind(&mut g, &params).unwrap();
            let v = ndarray::Array1::linspace(-1.0, 1.0, 4);
            let items = [(ModelInput::Vector(v.view()), 1usize)];
            let loss = batch_loss(&mut g, &bd, &cfg, &items).unwrap();
            assert_abs_diff_eq!(
                g.scalar(loss).unwrap(),
                (langs as f64).ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn separable_classes_reach_high_training_accuracy() {
        let (x, labels) = separable(50);
        let mut cfg = tiny_cfg(2);
        cfg.optimizer = OptimizerConfig {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 20,
            val_fraction: 0.0,
            patience: 5,
        };
        let model = train_entropy_dnn(x.view(), &labels, &cfg).unwrap();
        let mut correct = 0;
        for (i, &label) in labels.iter().enumerate() {
            let p = predict(&model, ModelInput::Vector(x.row(i))).unwrap();
            assert_abs_diff_eq!(p.posteriors.sum(), 1.0, epsilon = 1e-12);
            assert!(p.attention.is_none());
            let arg = p
                .posteriors
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if arg == label {
                correct += 1;
            }
        }
        assert!(
            correct as f64 / labels.len() as f64 >= 0.99,
            "only {correct}/{} correct",
            labels.len()
        );
    }

    #[test]
    fn posterior_dimension_matches_language_count() {
        let cfg = tiny_cfg(5);
        let model = TrainedModel {
            params: init_params(&cfg).unwrap(),
            config: cfg,
            log: vec![],
        };
        let v = ndarray::Array1::zeros(4);
        let p = predict(&model, ModelInput::Vector(v.view())).unwrap();
        assert_eq!(p.posteriors.len(), 5);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let (x, mut labels) = separable(3);
        labels[2] = 9;
        let err = train_entropy_dnn(x.view(), &labels, &tiny_cfg(2)).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn architecture_gradients_match_finite_differences() {
        let mut cfg = tiny_cfg(2);
        cfg.input_dim = 3;
        cfg.hidden_dim = 3;
        let params = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ndarray::Array1::from_shape_fn(3, |_| rng.random_range(0.3..1.0));
        let b = ndarray::Array1::from_shape_fn(3, |_| rng.random_range(-1.0..-0.3));
        let report = check_gradients(&params, |g, bd| {
            let items =
                [(ModelInput::Vector(a.view()), 0usize), (ModelInput::Vector(b.view()), 1usize)];
            batch_loss(g, bd, &cfg, &items)
        })
        .unwrap();
        assert!(report.ok(), "{:?}", report.failures);
    }
}

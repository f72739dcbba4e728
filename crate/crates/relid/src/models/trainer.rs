//! Shared training loop: seeded shuffling, mini-batch Adam with global
//! gradient clipping, per-step loss logging, and optional held-out
//! early stopping. Every source of randomness derives from the model
//! seed, so a (seed, config, corpus) triple always reproduces the same
//! parameters bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embednet::optim::GRAD_CLIP_NORM;
use crate::embednet::{bind, clip_global_norm, Adam, Binding, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};

use super::OptimizerConfig;

/// Separates the training RNG stream from other consumers of the seed.
const TRAIN_SEED_SALT: u64 = 0x5452_4E31;
/// Seeds held-out loss evaluation independently of the step counter.
const VAL_SEED_SALT: u64 = 0x5641_4C31;

/// Runs mini-batch Adam over `num_items` training items. `build_loss`
/// receives the item indices of one batch plus the training RNG (for
/// crop sampling) and must return the batch's mean-loss node.
///
/// With `opt.val_fraction > 0`, that fraction of the items (rounded
/// down, stratified by `labels` when given) is held out before
/// training; after each epoch the held-out loss is evaluated (with a
/// fixed RNG, so crop-sampled losses stay comparable across epochs),
/// and training stops once it has not improved for `opt.patience`
/// consecutive epochs. The parameters from the best epoch are what
/// come back, so a generous patience costs time, never quality.
///
/// Returns the trained parameters and the (step, training loss) log.
pub(crate) fn train_loop<F>(
    mut params: ParamSet,
    num_items: usize,
    labels: Option<&[usize]>,
    opt: &OptimizerConfig,
    seed: u64,
    mut build_loss: F,
) -> Result<(ParamSet, Vec<(u64, f64)>)>
where
    F: FnMut(&mut Graph, &Binding, &[usize], &mut ChaCha8Rng) -> Result<NodeId>,
{
    if num_items == 0 {
        return Err(Error::invalid("training", "no training items"));
    }
    if let Some(l) = labels {
        if l.len() != num_items {
            return Err(Error::shape(
                "training",
                format!("{} labels for {num_items} items", l.len()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_SEED_SALT);
    let (val_idx, mut train_idx) = split_validation(num_items, labels, opt.val_fraction, &mut rng);
    if train_idx.is_empty() {
        return Err(Error::invalid("training", "validation split leaves no training items"));
    }

    let mut adam = Adam::new(&params, opt.learning_rate)?;
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ParamSet> = None;
    let mut stale = 0usize;

    for _epoch in 0..opt.epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(opt.batch_size) {
            let mut g = Graph::new();
            let bd = bind(&mut g, &params)?;
            let loss = build_loss(&mut g, &bd, batch, &mut rng)?;
            let loss_value = g.scalar(loss)?;
            g.backward(loss)?;
            let mut grads = bd.grads(&g);
            clip_global_norm(&mut grads, GRAD_CLIP_NORM);
            adam.step(&mut params, &grads)?;
            step += 1;
            log.push((step, loss_value));
        }
        if !val_idx.is_empty() {
            let val_loss = mean_loss(
                &params,
                &val_idx,
                opt.batch_size,
                seed ^ VAL_SEED_SALT,
                &mut build_loss,
            )?;
            if val_loss < best_val {
                best_val = val_loss;
                best_params = Some(params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= opt.patience {
                    break;
                }
            }
        }
    }
    if let Some(best) = best_params {
        params = best;
    }
    Ok((params, log))
}

/// Holds out `fraction` of the items (rounded down). With labels the
/// split is stratified: each class contributes its own rounded-down
/// share, so tiny desk corpora cannot lose a class from either side.
fn split_validation(
    num_items: usize,
    labels: Option<&[usize]>,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..num_items).collect();
    order.shuffle(rng);
    let Some(labels) = labels else {
        let val_count = (num_items as f64 * fraction).floor() as usize;
        let (val, train) = order.split_at(val_count);
        return (val.to_vec(), train.to_vec());
    };
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let total = (num_items as f64 * fraction).floor() as usize;
    let shares: Vec<f64> = (0..num_classes)
        .map(|c| labels.iter().filter(|&&l| l == c).count() as f64 * fraction)
        .collect();
    let mut remaining: Vec<usize> = shares.iter().map(|&s| s.floor() as usize).collect();
    // Rounding down per class can fall short of the overall share; top
    // up the classes with the largest fractional remainders.
    let mut deficit = total.saturating_sub(remaining.iter().sum());
    let mut by_rem: Vec<usize> = (0..num_classes).collect();
    by_rem.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for c in by_rem {
        if deficit == 0 {
            break;
        }
        remaining[c] += 1;
        deficit -= 1;
    }
    let mut val = Vec::new();
    let mut train = Vec::new();
    for i in order {
        let c = labels[i];
        if remaining[c] > 0 {
            remaining[c] -= 1;
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (val, train)
}

/// Item-weighted mean loss over `indices` without touching gradients.
fn mean_loss<F>(
    params: &ParamSet,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    build_loss: &mut F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &Binding, &[usize], &mut ChaCha8Rng) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for batch in indices.chunks(batch_size) {
        let mut g = Graph::new();
        let bd = bind(&mut g, params)?;
        let loss = build_loss(&mut g, &bd, batch, &mut rng)?;
        total += g.scalar(loss)? * batch.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

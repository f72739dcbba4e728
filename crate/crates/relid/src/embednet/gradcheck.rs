//! Central finite-difference verification of the backward pass.
//!
//! The checker treats every tensor in a ParamSet as a variable: it runs
//! the analytic backward once, then re-evaluates the loss at +-epsilon
//! per entry. Inputs can be checked too by simply placing them in the
//! set. Tolerance: |fd - analytic| <= max(1e-4 * max(|fd|, |analytic|),
//! 1e-6).

use crate::embednet::graph::{Graph, NodeId};
use crate::embednet::params::{bind, Binding, ParamSet};
use crate::error::Result;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-6;

#[derive(Debug)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub worst_abs_err: f64,
    /// Human-readable descriptions of entries outside tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic gradients of `loss_fn` against central finite
/// differences, entry by entry over every tensor in `params`. The
/// closure must be deterministic: it is re-invoked many times on
/// perturbed copies of the parameters.
pub fn check_gradients<F>(params: &ParamSet, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Binding) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bd = bind(&mut g, params)?;
    let loss = loss_fn(&mut g, &bd)?;
    g.backward(loss)?;
    let analytic = bd.grads(&g);

    let eval = |params: &ParamSet, loss_fn: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let bd = bind(&mut g, params)?;
        let loss = loss_fn(&mut g, &bd)?;
        g.scalar(loss)
    };

    let mut report = GradCheckReport { checked: 0, worst_abs_err: 0.0, failures: Vec::new() };
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let dim = params.tensor(i).dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let mut plus = params.clone();
                plus.tensor_mut(i)[[r, c]] += FD_EPSILON;
                let f_plus = eval(&plus, &mut loss_fn)?;
                let mut minus = params.clone();
                minus.tensor_mut(i)[[r, c]] -= FD_EPSILON;
                let f_minus = eval(&minus, &mut loss_fn)?;
                let fd = (f_plus - f_minus) / (2.0 * FD_EPSILON);
                let an = analytic[i][[r, c]];
                let err = (fd - an).abs();
                let tol = (FD_REL_TOL * fd.abs().max(an.abs())).max(FD_ABS_TOL);
                report.checked += 1;
                report.worst_abs_err = report.worst_abs_err.max(err);
                if err > tol {
                    report.failures.push(format!(
                        "{name}[{r},{c}]: analytic {an} vs finite difference {fd}"
                    ));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::layers::{
        affine, attention_forward, attention_init, bigru_forward, bilstm_forward,
        dense_init, gru_forward_seq, gru_init, lstm_forward_seq, lstm_init, stats_pool,
        tdnn_forward, tdnn_init, Direction,
    };
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random matrix with entries of magnitude in [0.2, 1.2): keeps ReLU
    /// and other kinked ops away from their corners at FD step 1e-5.
    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            let mag = rng.random_range(0.2..1.2);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
    }

    fn assert_ok(report: &GradCheckReport) {
        assert!(
            report.ok(),
            "{} of {} entries failed, first: {}",
            report.failures.len(),
            report.checked,
            report.failures[0]
        );
    }

    /// Sums the output against a fixed random functional so gradients
    /// of every output entry matter (a plain sum would hide transpose
    /// and permutation bugs behind symmetry).
    fn weighted_sum(
        g: &mut Graph,
        out: NodeId,
        weights: &Array2<f64>,
    ) -> Result<NodeId> {
        let w = g.leaf(weights.clone())?;
        let prod = g.mul(out, w)?;
        g.sum(prod)
    }

    #[test]
    fn primitive_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut ps = ParamSet::new();
        ps.insert("a", rand_mat(&mut rng, 3, 4)).unwrap();
        ps.insert("b", rand_mat(&mut rng, 4, 2)).unwrap();
        ps.insert("c", rand_mat(&mut rng, 3, 2)).unwrap();
        ps.insert("row", rand_mat(&mut rng, 1, 2)).unwrap();
        let probe = rand_mat(&mut rng, 3, 2);
        let probe_t = rand_mat(&mut rng, 2, 3);

        // One composite touching matmul, add, add_row, scale, mul, and
        // the three pointwise nonlinearities.
        let report = check_gradients(&ps, |g, bd| {
            let a = bd.id("a")?;
            let b = bd.id("b")?;
            let c = bd.id("c")?;
            let row = bd.id("row")?;
            let mm = g.matmul(a, b)?;
            let sum = g.add(mm, c)?;
            let biased = g.add_row(sum, row)?;
            let scaled = g.scale(biased, 1.7)?;
            let th = g.tanh(scaled)?;
            let sg = g.sigmoid(th)?;
            let re = g.relu(sg)?;
            let prod = g.mul(re, c)?;
            weighted_sum(g, prod, &probe)
        })
        .unwrap();
        assert_ok(&report);

        // Transpose composed with softmax rows.
        let report = check_gradients(&ps, |g, bd| {
            let a = bd.id("c")?;
            let t = g.transpose(a)?;
            let sm = g.softmax_rows(t)?;
            weighted_sum(g, sm, &probe_t)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn reduction_and_reshape_ops_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ps = ParamSet::new();
        ps.insert("x", rand_mat(&mut rng, 5, 3)).unwrap();
        ps.insert("y", rand_mat(&mut rng, 2, 3)).unwrap();
        let probe = rand_mat(&mut rng, 1, 6);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("x")?;
            let y = bd.id("y")?;
            let both = g.concat_rows(&[x, y])?; // 7x3
            let head = g.slice_rows(both, 1, 4)?;
            let left = g.slice_cols(head, 0, 2)?;
            let right = g.slice_cols(head, 2, 1)?;
            let glued = g.concat_cols(&[right, left])?; // 4x3
            let m = g.mean_rows(glued)?;
            let sq = g.mul(m, m)?;
            let parts = g.concat_cols(&[m, sq])?;
            weighted_sum(g, parts, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn sqrt_floor_passes_away_from_and_below_the_floor() {
        // The floor must dwarf the finite-difference step so the +-eps
        // probes of the flat branch stay flat; a floor of 0.25 leaves
        // x = 0.1 floored on both sides of the perturbation.
        let mut ps = ParamSet::new();
        let mut x = Array2::from_elem((1, 3), 0.5);
        x[[0, 1]] = 2.0;
        x[[0, 2]] = 0.1;
        ps.insert("x", x).unwrap();
        let probe = Array2::from_elem((1, 3), 1.0);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("x")?;
            let s = g.sqrt_floored(x, 0.25)?;
            weighted_sum(g, s, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn context_gather_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut ps = ParamSet::new();
        ps.insert("x", rand_mat(&mut rng, 6, 2)).unwrap();
        let probe = rand_mat(&mut rng, 3, 6);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("x")?;
            let ctx = g.context_gather(x, &[-2, 0, 1])?; // 3 x 6
            weighted_sum(g, ctx, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn cross_entropy_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut ps = ParamSet::new();
        ps.insert("logits", rand_mat(&mut rng, 4, 3)).unwrap();
        let report = check_gradients(&ps, |g, bd| {
            let l = bd.id("logits")?;
            g.cross_entropy(l, &[0, 2, 1, 2])
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn dense_layer_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut ps = ParamSet::new();
        dense_init(&mut ps, &mut rng, "fc", 3, 2).unwrap();
        ps.insert("input", rand_mat(&mut rng, 4, 3)).unwrap();
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("input")?;
            let h = affine(g, bd, "fc", x)?;
            let r = g.relu(h)?;
            g.cross_entropy(r, &[0, 1, 0, 1])
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn unrolled_lstm_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut ps = ParamSet::new();
        lstm_init(&mut ps, &mut rng, "cell", 2, 3).unwrap();
        ps.insert("input", rand_mat(&mut rng, 3, 2)).unwrap();
        let probe = rand_mat(&mut rng, 1, 3);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("input")?;
            let hs = lstm_forward_seq(g, bd, "cell", x, Direction::Forward)?;
            weighted_sum(g, *hs.last().unwrap(), &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn unrolled_gru_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mut ps = ParamSet::new();
        gru_init(&mut ps, &mut rng, "cell", 2, 3).unwrap();
        ps.insert("input", rand_mat(&mut rng, 3, 2)).unwrap();
        let probe = rand_mat(&mut rng, 1, 3);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("input")?;
            let hs = gru_forward_seq(g, bd, "cell", x, Direction::Forward)?;
            weighted_sum(g, *hs.last().unwrap(), &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn bidirectional_wrappers_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let mut ps = ParamSet::new();
        lstm_init(&mut ps, &mut rng, "lf", 2, 2).unwrap();
        lstm_init(&mut ps, &mut rng, "lb", 2, 2).unwrap();
        gru_init(&mut ps, &mut rng, "gf", 2, 2).unwrap();
        gru_init(&mut ps, &mut rng, "gb", 2, 2).unwrap();
        ps.insert("input", rand_mat(&mut rng, 4, 2)).unwrap();
        let probe = rand_mat(&mut rng, 4, 4);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("input")?;
            let l = bilstm_forward(g, bd, "lf", "lb", x)?;
            let gr = bigru_forward(g, bd, "gf", "gb", x)?;
            let both = g.add(l, gr)?;
            weighted_sum(g, both, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn tdnn_and_stats_pool_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let mut ps = ParamSet::new();
        tdnn_init(&mut ps, &mut rng, "t1", 2, 3, &[-1, 0, 1]).unwrap();
        ps.insert("input", rand_mat(&mut rng, 6, 2)).unwrap();
        let probe = rand_mat(&mut rng, 1, 6);
        let report = check_gradients(&ps, |g, bd| {
            let x = bd.id("input")?;
            let h = tdnn_forward(g, bd, "t1", x, &[-1, 0, 1])?;
            let pooled = stats_pool(g, h)?;
            weighted_sum(g, pooled, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }

    #[test]
    fn attention_passes_finite_differences_including_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut ps = ParamSet::new();
        attention_init(&mut ps, &mut rng, "att", 3, 3).unwrap();
        ps.insert("h", rand_mat(&mut rng, 4, 3)).unwrap();
        let probe = rand_mat(&mut rng, 1, 3);
        let report = check_gradients(&ps, |g, bd| {
            let h = bd.id("h")?;
            let (pooled, _) = attention_forward(g, bd, "att", h)?;
            weighted_sum(g, pooled, &probe)
        })
        .unwrap();
        assert_ok(&report);
    }
}

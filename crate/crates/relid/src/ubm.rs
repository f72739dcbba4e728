//! Diagonal-covariance GMM universal background model.
//!
//! Training is EM from an iterative binary-split initialization: start from
//! the global Gaussian, split every mean by a +-0.1*std perturbation, run EM,
//! and repeat until the target component count is reached. The per-iteration
//! total log-likelihood is recorded per stage and is nondecreasing (EM
//! guarantee; floors allow 1e-6 absolute slack).

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, dim_u32};

/// Floor applied to every variance entry after each M-step.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Floor applied to component weights (weights are renormalized after).
pub const WEIGHT_FLOOR: f64 = 1e-8;
/// Permitted decrease in total log-likelihood between EM iterations.
pub const LL_SLACK: f64 = 1e-6;

/// Gaussian mixture with diagonal covariances. Constructors validate and
/// precompute per-component normalizers, so scoring never re-derives them.
#[derive(Debug, Clone)]
pub struct DiagonalGmm {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    // -0.5 * sum_d ln(2 pi var_cd), cached per component.
    log_norm: Array1<f64>,
    inv_var: Array2<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 {
            return Err(Error::invalid("DiagonalGmm", "no components"));
        }
        if means.nrows() != c || variances.nrows() != c || means.ncols() != variances.ncols() {
            return Err(Error::shape(
                "DiagonalGmm",
                format!(
                    "weights {}, means {}x{}, variances {}x{}",
                    c,
                    means.nrows(),
                    means.ncols(),
                    variances.nrows(),
                    variances.ncols()
                ),
            ));
        }
        if means.ncols() == 0 {
            return Err(Error::invalid("DiagonalGmm", "zero-dimensional means"));
        }
        let sum: f64 = weights.sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid(
                "DiagonalGmm",
                format!("weights must be a distribution (sum {sum})"),
            ));
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("DiagonalGmm", "variances must be positive"));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("DiagonalGmm", "non-finite mean"));
        }
        let mut g = DiagonalGmm {
            weights,
            means,
            variances,
            log_norm: Array1::zeros(c),
            inv_var: Array2::zeros((0, 0)),
        };
        g.refresh_cache();
        Ok(g)
    }

    fn refresh_cache(&mut self) {
        let (c, d) = (self.num_components(), self.dim());
        let mut log_norm = Array1::zeros(c);
        let mut inv_var = Array2::zeros((c, d));
        for k in 0..c {
            let mut acc = 0.0;
            for j in 0..d {
                let v = self.variances[[k, j]];
                acc += (2.0 * PI * v).ln();
                inv_var[[k, j]] = 1.0 / v;
            }
            log_norm[k] = -0.5 * acc;
        }
        self.log_norm = log_norm;
        self.inv_var = inv_var;
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn variances(&self) -> ArrayView2<'_, f64> {
        self.variances.view()
    }

    /// Per-component log of weight * Gaussian density at `x`.
    fn weighted_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for k in 0..self.num_components() {
            let mut quad = 0.0;
            for j in 0..d {
                let c = x[j] - self.means[[k, j]];
                quad += c * c * self.inv_var[[k, j]];
            }
            out[k] = self.weights[k].ln() + self.log_norm[k] - 0.5 * quad;
        }
    }

    /// Posterior responsibilities p(c | x); sums to one.
    pub fn posteriors(&self, x: &[f64]) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "posteriors",
                format!("frame dim {} vs model dim {}", x.len(), self.dim()),
            ));
        }
        let mut logp = vec![0.0; self.num_components()];
        self.weighted_log_densities(x, &mut logp);
        let lse = log_sum_exp(&logp);
        Ok(Array1::from_iter(logp.iter().map(|&l| (l - lse).exp())))
    }

    /// Log-density of one frame under the mixture.
    pub fn log_likelihood_frame(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "log_likelihood",
                format!("frame dim {} vs model dim {}", x.len(), self.dim()),
            ));
        }
        let mut logp = vec![0.0; self.num_components()];
        self.weighted_log_densities(x, &mut logp);
        Ok(log_sum_exp(&logp))
    }

    /// Total log-likelihood of a frame matrix (rows are frames).
    pub fn log_likelihood(&self, frames: ArrayView2<f64>) -> Result<f64> {
        if frames.ncols() != self.dim() {
            return Err(Error::shape(
                "log_likelihood",
                format!("frame dim {} vs model dim {}", frames.ncols(), self.dim()),
            ));
        }
        let mut total = 0.0;
        let mut logp = vec![0.0; self.num_components()];
        for row in frames.rows() {
            self.weighted_log_densities(row.as_slice().expect("contiguous row"), &mut logp);
            total += log_sum_exp(&logp);
        }
        Ok(total)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-likelihood trace recorded during training, one vector per split
/// stage. Within a stage the values are nondecreasing up to `LL_SLACK`.
#[derive(Debug, Clone, Default)]
pub struct UbmTrainLog {
    pub stage_log_likelihoods: Vec<Vec<f64>>,
}

struct EmAccumulators {
    ll: f64,
    n: Array1<f64>,
    fx: Array2<f64>,
    fx2: Array2<f64>,
}

fn em_accumulate(gmm: &DiagonalGmm, frames: ArrayView2<f64>) -> EmAccumulators {
    let (c, d) = (gmm.num_components(), gmm.dim());
    // Shards are fixed-size and folded in order, so the reduction is
    // deterministic for any thread count.
    let shard = 8192;
    let rows = frames.nrows();
    let starts: Vec<usize> = (0..rows).step_by(shard).collect();
    let partials: Vec<EmAccumulators> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + shard).min(rows);
            let mut acc = EmAccumulators {
                ll: 0.0,
                n: Array1::zeros(c),
                fx: Array2::zeros((c, d)),
                fx2: Array2::zeros((c, d)),
            };
            let mut logp = vec![0.0; c];
            for i in s..e {
                let row = frames.row(i);
                let x = row.as_slice().expect("contiguous row");
                gmm.weighted_log_densities(x, &mut logp);
                let lse = log_sum_exp(&logp);
                acc.ll += lse;
                for k in 0..c {
                    let r = (logp[k] - lse).exp();
                    if r > 0.0 {
                        acc.n[k] += r;
                        for j in 0..d {
                            acc.fx[[k, j]] += r * x[j];
                            acc.fx2[[k, j]] += r * x[j] * x[j];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = EmAccumulators {
        ll: 0.0,
        n: Array1::zeros(c),
        fx: Array2::zeros((c, d)),
        fx2: Array2::zeros((c, d)),
    };
    for p in partials {
        total.ll += p.ll;
        total.n += &p.n;
        total.fx += &p.fx;
        total.fx2 += &p.fx2;
    }
    total
}

/// One EM iteration; returns the log-likelihood of the parameters that
/// entered the iteration.
fn em_iterate(
    gmm: &DiagonalGmm,
    frames: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(DiagonalGmm, f64)> {
    let (c, d) = (gmm.num_components(), gmm.dim());
    let total_frames = frames.nrows() as f64;
    let acc = em_accumulate(gmm, frames);

    let mut weights = Array1::zeros(c);
    let mut means = Array2::zeros((c, d));
    let mut variances = Array2::zeros((c, d));
    for k in 0..c {
        let nk = acc.n[k];
        if nk < 1e-8 {
            // Dead component: reseat on a random frame with unit variance.
            // The reseat draws from the training RNG, keeping runs seeded.
            let i = rng.random_range(0..frames.nrows());
            weights[k] = WEIGHT_FLOOR;
            for j in 0..d {
                means[[k, j]] = frames[[i, j]];
                variances[[k, j]] = 1.0;
            }
            continue;
        }
        weights[k] = (nk / total_frames).max(WEIGHT_FLOOR);
        for j in 0..d {
            let m = acc.fx[[k, j]] / nk;
            means[[k, j]] = m;
            variances[[k, j]] = (acc.fx2[[k, j]] / nk - m * m).max(VARIANCE_FLOOR);
        }
    }
    let wsum: f64 = weights.sum();
    weights.mapv_inplace(|w| w / wsum);
    Ok((DiagonalGmm::new(weights, means, variances)?, acc.ll))
}

fn global_gaussian(frames: ArrayView2<f64>) -> Result<DiagonalGmm> {
    let (n, d) = (frames.nrows(), frames.ncols());
    let mut mean = Array1::<f64>::zeros(d);
    for row in frames.rows() {
        mean += &row;
    }
    mean.mapv_inplace(|v| v / n as f64);
    let mut var = Array1::<f64>::zeros(d);
    for row in frames.rows() {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.mapv_inplace(|v| (v / n as f64).max(VARIANCE_FLOOR));
    DiagonalGmm::new(
        Array1::ones(1),
        mean.insert_axis(ndarray::Axis(0)),
        var.insert_axis(ndarray::Axis(0)),
    )
}

/// Splits components until `target` is reached: each chosen mean becomes
/// two children at mean +- 0.1*std with half the weight.
fn split_components(gmm: &DiagonalGmm, target: usize) -> Result<DiagonalGmm> {
    let (c, d) = (gmm.num_components(), gmm.dim());
    let to_split = (target - c).min(c);
    // Split the heaviest components first so uneven targets stay balanced.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        gmm.weights()[b]
            .partial_cmp(&gmm.weights()[a])
            .expect("weights are finite")
    });
    let split_set: std::collections::HashSet<usize> = order[..to_split].iter().copied().collect();

    let new_c = c + to_split;
    let mut weights = Array1::zeros(new_c);
    let mut means = Array2::zeros((new_c, d));
    let mut variances = Array2::zeros((new_c, d));
    let mut next = 0usize;
    for k in 0..c {
        if split_set.contains(&k) {
            for sign in [-1.0, 1.0] {
                weights[next] = gmm.weights()[k] / 2.0;
                for j in 0..d {
                    let std = gmm.variances()[[k, j]].sqrt();
                    means[[next, j]] = gmm.means()[[k, j]] + sign * 0.1 * std;
                    variances[[next, j]] = gmm.variances()[[k, j]];
                }
                next += 1;
            }
        } else {
            weights[next] = gmm.weights()[k];
            for j in 0..d {
                means[[next, j]] = gmm.means()[[k, j]];
                variances[[next, j]] = gmm.variances()[[k, j]];
            }
            next += 1;
        }
    }
    DiagonalGmm::new(weights, means, variances)
}

/// Trains a UBM on pooled voiced frames. `iterations` EM updates run after
/// every split stage; the seed only feeds dead-component reseating.
pub fn train_ubm(
    frames: ArrayView2<f64>,
    components: usize,
    iterations: usize,
    seed: u64,
) -> Result<(DiagonalGmm, UbmTrainLog)> {
    if components == 0 {
        return Err(Error::invalid("train_ubm", "components must be positive"));
    }
    if frames.nrows() < components {
        return Err(Error::invalid(
            "train_ubm",
            format!("{} frames cannot support {} components", frames.nrows(), components),
        ));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("train_ubm", "non-finite frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gmm = global_gaussian(frames)?;
    let mut log = UbmTrainLog::default();
    loop {
        let mut stage = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (next, ll) = em_iterate(&gmm, frames, &mut rng)?;
            stage.push(ll);
            gmm = next;
        }
        log.stage_log_likelihoods.push(stage);
        if gmm.num_components() >= components {
            break;
        }
        let target = (gmm.num_components() * 2).min(components);
        gmm = split_components(&gmm, target)?;
    }
    Ok((gmm, log))
}

const GMM_MAGIC: &[u8; 4] = b"RGMM";

/// Serializes a GMM to the RGMM layout (used for files and for hashing).
pub fn gmm_to_bytes(gmm: &DiagonalGmm) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let path = Path::new("<memory>");
    io::write_magic(&mut buf, GMM_MAGIC)?;
    buf.write_u32::<LE>(dim_u32(gmm.num_components(), "components", path)?)?;
    buf.write_u32::<LE>(dim_u32(gmm.dim(), "dim", path)?)?;
    io::write_f32_slice(&mut buf, gmm.weights().iter().map(|&v| v as f32))?;
    io::write_matrix_f32(&mut buf, &gmm.means().to_owned())?;
    io::write_matrix_f32(&mut buf, &gmm.variances().to_owned())?;
    Ok(buf)
}

pub fn write_gmm(path: &Path, gmm: &DiagonalGmm) -> Result<()> {
    let bytes = gmm_to_bytes(gmm)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_gmm(path: &Path) -> Result<DiagonalGmm> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, GMM_MAGIC, path)?;
    let c = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let d = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let weights = io::read_vector_f32(&mut r, c, path)?;
    let means = io::read_matrix_f32(&mut r, c, d, path)?;
    let variances = io::read_matrix_f32(&mut r, c, d, path)?;
    io::expect_eof(&mut r, path)?;
    // f32 round-trips can nudge the weight sum; renormalize before the
    // distribution check.
    let sum: f64 = weights.sum();
    if sum <= 0.0 {
        return Err(Error::bad_file(path, "weights do not form a distribution"));
    }
    DiagonalGmm::new(weights.mapv(|w| w / sum), means, variances)
        .map_err(|e| Error::bad_file(path, e.to_string()))
}

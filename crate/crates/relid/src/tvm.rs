//! Total variability model: M(s) = M0 + T y(s).
//!
//! `extract` computes the MAP point estimate
//!     y* = (I + T' Sigma^-1 N(s) T)^-1 T' Sigma^-1 F(s)
//! and training runs EM over per-utterance statistics, maximizing the
//! marginal likelihood of the statistics under a standard-normal prior on
//! y. No minimum-divergence step is applied.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bwstats::{accumulate_stats, BwStats};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::io::{self, dim_u32};
use crate::linalg;
use crate::ubm::DiagonalGmm;

/// Permitted decrease of the EM objective between iterations.
pub const OBJECTIVE_SLACK: f64 = 1e-4;

/// Default segment window length in frames (one second at 10 ms hop).
pub const SEGMENT_WINDOW: usize = 100;
/// Default segment hop in frames (200 ms at 10 ms hop).
pub const SEGMENT_HOP: usize = 20;

/// Low-rank total variability subspace tied to a UBM.
#[derive(Debug, Clone)]
pub struct TvModel {
    /// (C*D) x R loading matrix; rows are grouped per component.
    t: Array2<f64>,
    ubm: DiagonalGmm,
    // Per-component Gram matrices T_c' Sigma_c^-1 T_c, cached for
    // extraction.
    gram: Vec<Array2<f64>>,
}

impl TvModel {
    pub fn new(t: Array2<f64>, ubm: DiagonalGmm) -> Result<TvModel> {
        let (c, d) = (ubm.num_components(), ubm.dim());
        if t.nrows() != c * d {
            return Err(Error::shape(
                "TvModel",
                format!("matrix has {} rows, UBM needs {}", t.nrows(), c * d),
            ));
        }
        if t.ncols() == 0 {
            return Err(Error::invalid("TvModel", "rank must be positive"));
        }
        let gram = build_gram(&t, &ubm);
        Ok(TvModel { t, ubm, gram })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn ubm(&self) -> &DiagonalGmm {
        &self.ubm
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.t.view()
    }

    fn check_stats(&self, stats: &BwStats, context: &'static str) -> Result<()> {
        if stats.num_components() != self.ubm.num_components() || stats.dim() != self.ubm.dim() {
            return Err(Error::shape(
                context,
                format!(
                    "stats are {}x{}, model is {}x{}",
                    stats.num_components(),
                    stats.dim(),
                    self.ubm.num_components(),
                    self.ubm.dim()
                ),
            ));
        }
        Ok(())
    }

    /// Posterior-mode i-vector for one set of statistics. Zero statistics
    /// produce the zero vector.
    pub fn extract(&self, stats: &BwStats) -> Result<Array1<f64>> {
        self.check_stats(stats, "extract")?;
        let (a, b) = self.posterior_system(stats);
        let chol = linalg::cholesky(a.view(), "extract")?;
        let mut y = chol.solve_vec(b.view());
        // One step of iterative refinement keeps the residual of the
        // normal equations far below the documented 1e-8 bound.
        let r = &b - &a.dot(&y);
        y += &chol.solve_vec(r.view());
        Ok(y)
    }

    /// Precision matrix I + T' Sigma^-1 N T and projected statistics
    /// T' Sigma^-1 F for one utterance.
    fn posterior_system(&self, stats: &BwStats) -> (Array2<f64>, Array1<f64>) {
        let r = self.rank();
        let (c, d) = (self.ubm.num_components(), self.ubm.dim());
        let mut a = Array2::<f64>::eye(r);
        let mut b = Array1::<f64>::zeros(r);
        for k in 0..c {
            let nk = stats.n[k];
            if nk != 0.0 {
                a.scaled_add(nk, &self.gram[k]);
            }
            let tc = self.t.slice(s![k * d..(k + 1) * d, ..]);
            for j in 0..d {
                let fij = stats.f[[k, j]] * self.ubm_inv_var(k, j);
                if fij != 0.0 {
                    b.scaled_add(fij, &tc.row(j));
                }
            }
        }
        (a, b)
    }

    fn ubm_inv_var(&self, c: usize, d: usize) -> f64 {
        1.0 / self.ubm.variances()[[c, d]]
    }

    /// Segment i-vectors over sliding windows of `win` frames advanced by
    /// `hop`. Trailing windows that would run past the end are dropped; an
    /// utterance shorter than one window yields a single clipped window.
    /// Windows with no voiced frames yield the zero i-vector.
    pub fn segment_ivectors(
        &self,
        feats: &FeatureSequence,
        win: usize,
        hop: usize,
    ) -> Result<Array2<f64>> {
        if win == 0 || hop == 0 {
            return Err(Error::invalid("segment_ivectors", "win and hop must be positive"));
        }
        let t = feats.num_frames();
        let starts: Vec<(usize, usize)> = if t < win {
            vec![(0, t)]
        } else {
            (0..=(t - win) / hop).map(|k| (k * hop, win)).collect()
        };
        let mut out = Array2::zeros((starts.len(), self.rank()));
        for (row, &(start, len)) in starts.iter().enumerate() {
            let window = feats.slice(start, len)?;
            let stats = accumulate_stats(&self.ubm, &window, None)?;
            let y = self.extract(&stats)?;
            out.row_mut(row).assign(&y);
        }
        Ok(out)
    }

    /// Window start positions matching `segment_ivectors`, for aligning
    /// diagnostics such as per-window SNR with embedding rows.
    pub fn segment_windows(t: usize, win: usize, hop: usize) -> Vec<(usize, usize)> {
        if t < win {
            vec![(0, t)]
        } else {
            (0..=(t - win) / hop).map(|k| (k * hop, win)).collect()
        }
    }
}

fn build_gram(t: &Array2<f64>, ubm: &DiagonalGmm) -> Vec<Array2<f64>> {
    let (c, d) = (ubm.num_components(), ubm.dim());
    let r = t.ncols();
    (0..c)
        .map(|k| {
            let tc = t.slice(s![k * d..(k + 1) * d, ..]);
            // T_c' diag(1/sigma^2) T_c
            let mut scaled = tc.to_owned();
            for j in 0..d {
                let iv = 1.0 / ubm.variances()[[k, j]];
                scaled.row_mut(j).mapv_inplace(|v| v * iv);
            }
            let mut g = Array2::zeros((r, r));
            ndarray::linalg::general_mat_mul(1.0, &tc.t(), &scaled.view(), 0.0, &mut g);
            g
        })
        .collect()
}

/// Per-utterance E-step result.
struct EStep {
    y: Array1<f64>,
    eyy: Array2<f64>,
    objective: f64,
}

/// Trains the loading matrix by EM. The recorded objective is the marginal
/// log-likelihood of the statistics (up to a T-independent constant) of
/// the parameters entering each iteration; it is nondecreasing within
/// `OBJECTIVE_SLACK`. `iterations = 0` returns the seeded initialization.
pub fn train_tvm(
    ubm: &DiagonalGmm,
    stats: &[BwStats],
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<(TvModel, Vec<f64>)> {
    if stats.is_empty() {
        return Err(Error::invalid("train_tvm", "no training statistics"));
    }
    if rank == 0 {
        return Err(Error::invalid("train_tvm", "rank must be positive"));
    }
    let (c, d) = (ubm.num_components(), ubm.dim());
    for st in stats {
        if st.num_components() != c || st.dim() != d {
            return Err(Error::shape(
                "train_tvm",
                format!("stats are {}x{}, UBM is {c}x{d}", st.num_components(), st.dim()),
            ));
        }
    }

    // Seeded Gaussian initialization scaled by 0.1.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut t = Array2::<f64>::zeros((c * d, rank));
    for v in t.iter_mut() {
        *v = 0.1 * normal.sample(&mut rng);
    }

    let mut objectives = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let model = TvModel::new(t.clone(), ubm.clone())?;
        let esteps: Vec<Result<EStep>> = stats
            .par_iter()
            .map(|st| {
                let (a, b) = model.posterior_system(st);
                let chol = linalg::cholesky(a.view(), "train_tvm")?;
                let y = chol.solve_vec(b.view());
                let cov = chol.inverse();
                let mut eyy = cov;
                for i in 0..rank {
                    for j in 0..rank {
                        eyy[[i, j]] += y[i] * y[j];
                    }
                }
                let objective = 0.5 * b.dot(&y) - 0.5 * chol.log_det();
                Ok(EStep { y, eyy, objective })
            })
            .collect();

        // M-step accumulators: A_c = sum_s N_c E[yy'], C_c = sum_s F_c E[y]'.
        let mut a_acc = vec![Array2::<f64>::zeros((rank, rank)); c];
        let mut c_acc = vec![Array2::<f64>::zeros((d, rank)); c];
        let mut objective = 0.0;
        for (st, es) in stats.iter().zip(esteps) {
            let es = es?;
            objective += es.objective;
            for k in 0..c {
                let nk = st.n[k];
                if nk != 0.0 {
                    a_acc[k].scaled_add(nk, &es.eyy);
                }
                for j in 0..d {
                    let fkj = st.f[[k, j]];
                    if fkj != 0.0 {
                        c_acc[k].row_mut(j).scaled_add(fkj, &es.y);
                    }
                }
            }
        }
        objectives.push(objective);

        for k in 0..c {
            // Components with no occupancy anywhere keep their rows.
            if a_acc[k].diag().sum() == 0.0 {
                continue;
            }
            let chol = linalg::cholesky(a_acc[k].view(), "train_tvm")?;
            // Solve A_c X' = C_c' so T_c = X.
            let xt = chol.solve_mat(c_acc[k].t());
            t.slice_mut(s![k * d..(k + 1) * d, ..]).assign(&xt.t());
        }
    }

    Ok((TvModel::new(t, ubm.clone())?, objectives))
}

const TVM_MAGIC: &[u8; 4] = b"RTVM";

/// SHA-256 of the UBM's serialized bytes, embedded in the TVM file so a
/// mismatched UBM is rejected at load time.
pub fn ubm_hash(ubm: &DiagonalGmm) -> Result<[u8; 32]> {
    let bytes = crate::ubm::gmm_to_bytes(ubm)?;
    let digest = Sha256::digest(&bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    Ok(out)
}

pub fn write_tvm(path: &Path, model: &TvModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, TVM_MAGIC)?;
    w.write_u32::<LE>(dim_u32(model.ubm.num_components(), "components", path)?)?;
    w.write_u32::<LE>(dim_u32(model.ubm.dim(), "dim", path)?)?;
    w.write_u32::<LE>(dim_u32(model.rank(), "rank", path)?)?;
    w.write_all(&ubm_hash(&model.ubm)?)?;
    io::write_matrix_f32(&mut w, &model.t)?;
    w.flush()?;
    Ok(())
}

/// Reads a TVM and binds it to `ubm`, verifying the embedded hash.
pub fn read_tvm(path: &Path, ubm: DiagonalGmm) -> Result<TvModel> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, TVM_MAGIC, path)?;
    let c = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let d = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let rank = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)
        .map_err(|_| Error::bad_file(path, "truncated UBM hash"))?;
    if c != ubm.num_components() || d != ubm.dim() {
        return Err(Error::bad_file(
            path,
            format!(
                "model is {c}x{d}, supplied UBM is {}x{}",
                ubm.num_components(),
                ubm.dim()
            ),
        ));
    }
    if stored != ubm_hash(&ubm)? {
        return Err(Error::bad_file(path, "UBM hash mismatch"));
    }
    let t = io::read_matrix_f32(&mut r, c * d, rank, path)?;
    io::expect_eof(&mut r, path)?;
    TvModel::new(t, ubm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bwstats::BwStats;

    fn toy_ubm(c: usize, d: usize) -> DiagonalGmm {
        let weights = Array1::from_elem(c, 1.0 / c as f64);
        let mut means = Array2::zeros((c, d));
        for k in 0..c {
            for j in 0..d {
                means[[k, j]] = (k as f64) - (j as f64) * 0.5;
            }
        }
        let variances = Array2::from_elem((c, d), 1.0);
        DiagonalGmm::new(weights, means, variances).unwrap()
    }

    /// Statistics sampled from the generative model F_c = N_c (T0 y)_c
    /// plus CLT-scaled noise.
    fn synthetic_stats(
        t0: &Array2<f64>,
        c: usize,
        d: usize,
        count: usize,
        noise: f64,
        seed: u64,
    ) -> Vec<BwStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rank = t0.ncols();
        (0..count)
            .map(|_| {
                let y = Array1::from_iter((0..rank).map(|_| normal.sample(&mut rng)));
                let shift = t0.dot(&y);
                let mut st = BwStats::zeros(c, d);
                let mut total = 0.0;
                for k in 0..c {
                    let nk = 20.0 + 10.0 * rng.random::<f64>();
                    st.n[k] = nk;
                    total += nk;
                    for j in 0..d {
                        st.f[[k, j]] =
                            nk * shift[k * d + j] + nk.sqrt() * noise * normal.sample(&mut rng);
                    }
                }
                st.frame_count = total.ceil() as usize;
                st
            })
            .collect()
    }

    #[test]
    fn zero_stats_give_zero_ivector() {
        let ubm = toy_ubm(2, 3);
        let t = Array2::from_elem((6, 2), 0.3);
        let model = TvModel::new(t, ubm).unwrap();
        let stats = BwStats::zeros(2, 3);
        let y = model.extract(&stats).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_solves_the_normal_equations() {
        let ubm = toy_ubm(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>() - 0.5);
        let model = TvModel::new(t, ubm).unwrap();
        let stats = &synthetic_stats(&model.t.clone(), 3, 2, 1, 0.5, 1)[0];
        let y = model.extract(stats).unwrap();
        let (a, b) = model.posterior_system(stats);
        let resid = &b - &a.dot(&y);
        let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "residual {norm}");
    }

    #[test]
    fn em_objective_is_nondecreasing() {
        let ubm = toy_ubm(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t0 = Array2::from_shape_fn((12, 2), |_| rng.random::<f64>() - 0.5);
        let stats = synthetic_stats(&t0, 4, 3, 60, 0.3, 5);
        let (_, obj) = train_tvm(&ubm, &stats, 2, 8, 11).unwrap();
        assert_eq!(obj.len(), 8);
        for w in obj.windows(2) {
            assert!(
                w[1] >= w[0] - OBJECTIVE_SLACK,
                "objective decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn zero_iterations_returns_seeded_init() {
        let ubm = toy_ubm(2, 2);
        let stats = synthetic_stats(&Array2::from_elem((4, 2), 0.2), 2, 2, 5, 0.1, 2);
        let (a, obj) = train_tvm(&ubm, &stats, 2, 0, 77).unwrap();
        let (b, _) = train_tvm(&ubm, &stats, 2, 0, 77).unwrap();
        assert!(obj.is_empty());
        assert_eq!(a.matrix(), b.matrix());
        // A different seed gives a different initialization.
        let (c, _) = train_tvm(&ubm, &stats, 2, 0, 78).unwrap();
        assert_ne!(a.matrix(), c.matrix());
    }

    #[test]
    fn em_recovers_planted_subspace() {
        let c = 4;
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t0 = Array2::from_shape_fn((c * d, 2), |_| normal.sample(&mut rng));
        let stats = synthetic_stats(&t0, c, d, 200, 0.05, 8);
        let ubm = toy_ubm(c, d);
        let (model, _) = train_tvm(&ubm, &stats, 2, 20, 4).unwrap();
        let angle =
            linalg::principal_angle_degrees(model.matrix().view(), t0.view()).unwrap();
        assert!(angle < 5.0, "principal angle {angle} degrees");
    }

    #[test]
    fn segment_windows_match_contract() {
        // 1000 frames, win 100, hop 20 -> 46 windows.
        let w = TvModel::segment_windows(1000, 100, 20);
        assert_eq!(w.len(), 46);
        assert_eq!(w[0], (0, 100));
        assert_eq!(w[45], (900, 100));
        // Shorter than one window -> single clipped window.
        let w = TvModel::segment_windows(60, 100, 20);
        assert_eq!(w, vec![(0, 60)]);
    }

    #[test]
    fn unvoiced_window_yields_zero_vector() {
        let ubm = toy_ubm(2, 2);
        let t = Array2::from_elem((4, 2), 0.25);
        let model = TvModel::new(t, ubm).unwrap();
        let frames = Array2::<f32>::from_elem((120, 2), 1.0);
        let mut feats = FeatureSequence::new(frames, vec![true; 120], 10).unwrap();
        // Silence the second window's exclusive frames entirely.
        for i in 100..120 {
            feats.voiced[i] = false;
        }
        let w = TvModel::segment_windows(120, 100, 20);
        assert_eq!(w, vec![(0, 100), (20, 100)]);
        // Window 2 covers frames 20..120; it still has voiced frames. Use
        // a fully unvoiced short utterance instead for the zero check.
        let frames = Array2::<f32>::from_elem((50, 2), 1.0);
        let mut short = FeatureSequence::new(frames, vec![true; 50], 10).unwrap();
        for v in short.voiced.iter_mut() {
            *v = false;
        }
        let ivs = model.segment_ivectors(&short, 100, 20).unwrap();
        assert_eq!(ivs.nrows(), 1);
        assert!(ivs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tvm_file_round_trip_checks_ubm_hash() {
        let dir = tempfile::tempdir().unwrap();
        let ubm = toy_ubm(2, 2);
        let t = Array2::from_elem((4, 3), 0.5);
        let model = TvModel::new(t, ubm.clone()).unwrap();
        let path = dir.path().join("tv.rtvm");
        write_tvm(&path, &model).unwrap();
        let back = read_tvm(&path, ubm).unwrap();
        assert_eq!(back.rank(), 3);
        // A different UBM must be rejected.
        let other = toy_ubm(2, 2);
        let shifted = DiagonalGmm::new(
            other.weights().to_owned(),
            other.means().mapv(|m| m + 1.0),
            other.variances().to_owned(),
        )
        .unwrap();
        let err = read_tvm(&path, shifted).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"));
    }

    #[test]
    fn wrong_dim_stats_are_rejected() {
        let ubm = toy_ubm(2, 2);
        let model = TvModel::new(Array2::from_elem((4, 2), 0.1), ubm).unwrap();
        let stats = BwStats::zeros(3, 2);
        assert!(model.extract(&stats).is_err());
    }

    #[test]
    fn ivector_norm_is_moderate_under_prior() {
        // With data generated from the model, i-vector norms should be
        // O(sqrt(rank)), not exploding.
        let ubm = toy_ubm(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t0 = Array2::from_shape_fn((12, 3), |_| normal.sample(&mut rng));
        let stats = synthetic_stats(&t0, 4, 3, 50, 0.1, 3);
        let (model, _) = train_tvm(&ubm, &stats, 3, 10, 2).unwrap();
        let mut max_norm = 0.0f64;
        for st in &stats {
            let y = model.extract(st).unwrap();
            max_norm = max_norm.max(y.dot(&y).sqrt());
        }
        assert!(max_norm < 20.0, "i-vector norm {max_norm}");
    }
}

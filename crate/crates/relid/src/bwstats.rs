//! Zeroth/first-order sufficient statistics with optional per-frame
//! relevance weights.
//!
//! The weighted statistics are
//!     N_c = sum_i gamma_i p(c | x_i)
//!     F_c = sum_i gamma_i p(c | x_i) (x_i - mu_c)
//! over voiced frames. gamma comes from the entropy of an auxiliary
//! classifier's posterior on each one-second block: confident blocks keep
//! full weight, uncertain blocks are linearly faded, blocks beyond the
//! upper entropy bound are dropped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array1, Array2};

use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::io::{self, dim_u32};
use crate::ubm::DiagonalGmm;

/// Sufficient statistics of one utterance (or one window).
#[derive(Debug, Clone)]
pub struct BwStats {
    /// Per-component occupancy, length C.
    pub n: Array1<f64>,
    /// Mean-offset first-order statistics, C x D.
    pub f: Array2<f64>,
    /// Number of frames that entered the summation.
    pub frame_count: usize,
}

impl BwStats {
    pub fn zeros(c: usize, d: usize) -> BwStats {
        BwStats {
            n: Array1::zeros(c),
            f: Array2::zeros((c, d)),
            frame_count: 0,
        }
    }

    pub fn num_components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }
}

/// Accumulates statistics over the voiced frames of `feats`. `gamma`, when
/// given, must hold one weight in [0, 1] per voiced frame (time order).
pub fn accumulate_stats(
    gmm: &DiagonalGmm,
    feats: &FeatureSequence,
    gamma: Option<&[f64]>,
) -> Result<BwStats> {
    if feats.dim() != gmm.dim() {
        return Err(Error::shape(
            "accumulate_stats",
            format!("feature dim {} vs model dim {}", feats.dim(), gmm.dim()),
        ));
    }
    let voiced_count = feats.num_voiced();
    if let Some(g) = gamma {
        if g.len() != voiced_count {
            return Err(Error::shape(
                "accumulate_stats",
                format!("{} gamma values for {} voiced frames", g.len(), voiced_count),
            ));
        }
        if g.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid(
                "accumulate_stats",
                "gamma values must lie in [0, 1]",
            ));
        }
    }
    let (c, d) = (gmm.num_components(), gmm.dim());
    let mut stats = BwStats::zeros(c, d);
    stats.frame_count = voiced_count;
    let mut v = 0usize;
    for i in 0..feats.num_frames() {
        if !feats.voiced[i] {
            continue;
        }
        let x = feats.frame_f64(i);
        let w = gamma.map_or(1.0, |g| g[v]);
        v += 1;
        if w == 0.0 {
            continue;
        }
        let post = gmm.posteriors(&x)?;
        for k in 0..c {
            let r = w * post[k];
            if r == 0.0 {
                continue;
            }
            stats.n[k] += r;
            for j in 0..d {
                stats.f[[k, j]] += r * (x[j] - gmm.means()[[k, j]]);
            }
        }
    }
    Ok(stats)
}

/// Shannon entropy of a posterior vector, in nats; 0 ln 0 reads as 0.
/// Rejects vectors that are not a distribution within 1e-6.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::invalid("entropy", "empty distribution"));
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("entropy", "negative or non-finite probability"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(
            "entropy",
            format!("probabilities sum to {sum}, expected 1"),
        ));
    }
    Ok(p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum())
}

/// Entropy-to-weight mapping parameters. Defaults place the full-weight
/// knee at 0.2*ln(L) and the cutoff at 0.9*ln(L).
#[derive(Debug, Clone)]
pub struct GammaConfig {
    pub h_min: f64,
    pub h_max: f64,
    /// Block granularity in frames (one second at a 10 ms hop).
    pub block_frames: usize,
}

impl GammaConfig {
    pub fn new(h_min: f64, h_max: f64, block_frames: usize) -> Result<GammaConfig> {
        if !(h_min >= 0.0 && h_max > h_min) {
            return Err(Error::invalid(
                "GammaConfig",
                format!("need 0 <= h_min < h_max, got [{h_min}, {h_max}]"),
            ));
        }
        if block_frames == 0 {
            return Err(Error::invalid("GammaConfig", "block_frames must be positive"));
        }
        Ok(GammaConfig { h_min, h_max, block_frames })
    }

    /// Defaults derived from the number of target languages.
    pub fn for_languages(num_languages: usize) -> Result<GammaConfig> {
        if num_languages < 2 {
            return Err(Error::invalid(
                "GammaConfig",
                "need at least two languages for an entropy range",
            ));
        }
        let h_uniform = (num_languages as f64).ln();
        GammaConfig::new(0.2 * h_uniform, 0.9 * h_uniform, 100)
    }
}

/// Piecewise-linear entropy-to-relevance mapping:
/// 1 below h_min, 0 above h_max, linear fade in between.
pub fn gamma_from_entropy(h: f64, cfg: &GammaConfig) -> f64 {
    if h < cfg.h_min {
        1.0
    } else if h > cfg.h_max {
        0.0
    } else {
        (cfg.h_max - h) / (cfg.h_max - cfg.h_min)
    }
}

/// Per-voiced-frame relevance weights for one utterance.
///
/// The utterance is split into non-overlapping blocks of
/// `cfg.block_frames`; `posterior_fn` scores each block and the entropy of
/// that posterior is mapped through `gamma_from_entropy`. Every voiced
/// frame inherits its block's gamma. A trailing block shorter than half a
/// block inherits the previous block's gamma instead of being scored.
pub fn relevance_weights(
    posterior_fn: &mut dyn FnMut(&FeatureSequence) -> Result<Array1<f64>>,
    feats: &FeatureSequence,
    cfg: &GammaConfig,
) -> Result<Vec<f64>> {
    let t = feats.num_frames();
    let b = cfg.block_frames;
    // Block boundaries: full blocks, then an optional tail.
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let full = t / b;
    for k in 0..full {
        bounds.push((k * b, b));
    }
    let tail = t % b;
    if tail > 0 {
        bounds.push((full * b, tail));
    }
    if bounds.is_empty() {
        bounds.push((0, t));
    }

    let mut gammas: Vec<f64> = Vec::with_capacity(bounds.len());
    for (idx, &(start, len)) in bounds.iter().enumerate() {
        let inherits = idx > 0 && len * 2 < b;
        if inherits {
            gammas.push(gammas[idx - 1]);
            continue;
        }
        let block = feats.slice(start, len)?;
        let post = posterior_fn(&block)?;
        let h = entropy(post.as_slice().expect("contiguous posterior"))?;
        gammas.push(gamma_from_entropy(h, cfg));
    }

    let mut out = Vec::with_capacity(feats.num_voiced());
    for (idx, &(start, len)) in bounds.iter().enumerate() {
        for i in start..start + len {
            if feats.voiced[i] {
                out.push(gammas[idx]);
            }
        }
    }
    Ok(out)
}

/// Inverse-entropy fusion weights: w_k proportional to 1 / H_k. Members
/// with exactly zero entropy split a total weight of one equally and
/// everything else gets zero.
pub fn fusion_weights(entropies: &[f64]) -> Result<Vec<f64>> {
    if entropies.is_empty() {
        return Err(Error::invalid("fusion_weights", "no systems to fuse"));
    }
    if entropies.iter().any(|&h| h < 0.0 || !h.is_finite()) {
        return Err(Error::invalid("fusion_weights", "entropies must be finite and >= 0"));
    }
    let zeros: Vec<usize> = entropies
        .iter()
        .enumerate()
        .filter(|(_, &h)| h == 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut w = vec![0.0; entropies.len()];
    if !zeros.is_empty() {
        let share = 1.0 / zeros.len() as f64;
        for i in zeros {
            w[i] = share;
        }
        return Ok(w);
    }
    let total: f64 = entropies.iter().map(|&h| 1.0 / h).sum();
    for (i, &h) in entropies.iter().enumerate() {
        w[i] = (1.0 / h) / total;
    }
    Ok(w)
}

/// Fuses per-system posteriors with inverse-entropy weights; returns the
/// fused posterior and its argmax (ties resolve to the lowest index).
pub fn inverse_entropy_fuse(posteriors: &[Array1<f64>]) -> Result<(Array1<f64>, usize)> {
    if posteriors.is_empty() {
        return Err(Error::invalid("inverse_entropy_fuse", "no posteriors"));
    }
    let l = posteriors[0].len();
    let mut entropies = Vec::with_capacity(posteriors.len());
    for p in posteriors {
        if p.len() != l {
            return Err(Error::shape(
                "inverse_entropy_fuse",
                format!("posterior lengths {} vs {}", p.len(), l),
            ));
        }
        entropies.push(entropy(p.as_slice().expect("contiguous posterior"))?);
    }
    let w = fusion_weights(&entropies)?;
    let mut fused = Array1::<f64>::zeros(l);
    for (wk, p) in w.iter().zip(posteriors) {
        fused.scaled_add(*wk, p);
    }
    let mut best = 0usize;
    for i in 1..l {
        if fused[i] > fused[best] {
            best = i;
        }
    }
    Ok((fused, best))
}

const STATS_MAGIC: &[u8; 4] = b"RBWS";

/// Writes statistics: magic, version, C u32, D u32, frame_count u64, N as
/// f32, F row-major as f32.
pub fn write_stats(path: &Path, stats: &BwStats) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, STATS_MAGIC)?;
    w.write_u32::<LE>(dim_u32(stats.num_components(), "components", path)?)?;
    w.write_u32::<LE>(dim_u32(stats.dim(), "dim", path)?)?;
    w.write_u64::<LE>(stats.frame_count as u64)?;
    io::write_vector_f32(&mut w, &stats.n)?;
    io::write_matrix_f32(&mut w, &stats.f)?;
    w.flush()?;
    Ok(())
}

pub fn read_stats(path: &Path) -> Result<BwStats> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, STATS_MAGIC, path)?;
    let c = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let d = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let frame_count = r
        .read_u64::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let n = io::read_vector_f32(&mut r, c, path)?;
    let f = io::read_matrix_f32(&mut r, c, d, path)?;
    io::expect_eof(&mut r, path)?;
    Ok(BwStats { n, f, frame_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};
    use crate::ubm::train_ubm;
    use ndarray::array;

    fn small_setup() -> (DiagonalGmm, FeatureSequence) {
        let cfg = CorpusConfig {
            num_languages: 1,
            utterances_per_language: 2,
            duration_range_s: (2.0, 2.0),
            feature_dim: 3,
            ..CorpusConfig::default()
        };
        let utts = generate_corpus(&cfg).unwrap();
        let pooled = crate::corpus::pool_voiced_frames(&utts, 1).unwrap();
        let (gmm, _) = train_ubm(pooled.view(), 2, 5, 0).unwrap();
        (gmm, utts[0].features.clone())
    }

    #[test]
    fn occupancy_totals_match_frame_count() {
        let (gmm, feats) = small_setup();
        let stats = accumulate_stats(&gmm, &feats, None).unwrap();
        assert_eq!(stats.frame_count, feats.num_voiced());
        // With unit gamma, sum_c N_c equals the voiced frame count.
        assert!((stats.n.sum() - stats.frame_count as f64).abs() < 1e-8);
    }

    #[test]
    fn gamma_scales_stats_linearly() {
        let (gmm, feats) = small_setup();
        let full = accumulate_stats(&gmm, &feats, None).unwrap();
        let half = accumulate_stats(
            &gmm,
            &feats,
            Some(&vec![0.5; feats.num_voiced()]),
        )
        .unwrap();
        for k in 0..full.num_components() {
            assert!((half.n[k] - 0.5 * full.n[k]).abs() < 1e-10);
            for j in 0..full.dim() {
                assert!((half.f[[k, j]] - 0.5 * full.f[[k, j]]).abs() < 1e-10);
            }
        }
        // Occupancy can only shrink under weighting.
        assert!(half.n.sum() <= half.frame_count as f64 + 1e-12);
    }

    #[test]
    fn zero_gamma_zeroes_stats() {
        let (gmm, feats) = small_setup();
        let z = accumulate_stats(&gmm, &feats, Some(&vec![0.0; feats.num_voiced()])).unwrap();
        assert_eq!(z.n.sum(), 0.0);
        assert_eq!(z.f.sum(), 0.0);
    }

    #[test]
    fn gamma_length_and_range_are_enforced() {
        let (gmm, feats) = small_setup();
        assert!(accumulate_stats(&gmm, &feats, Some(&[0.5])).is_err());
        let bad = vec![1.5; feats.num_voiced()];
        assert!(accumulate_stats(&gmm, &feats, Some(&bad)).is_err());
    }

    #[test]
    fn entropy_matches_hand_values() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.5, 0.5]).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-12);
        let h4 = entropy(&[0.25; 4]).unwrap();
        assert!((h4 - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(entropy(&[0.6, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn gamma_mapping_hits_boundaries_exactly() {
        let cfg = GammaConfig::new(0.2, 0.9, 100).unwrap();
        assert_eq!(gamma_from_entropy(0.0, &cfg), 1.0);
        assert_eq!(gamma_from_entropy(0.2, &cfg), 1.0);
        assert_eq!(gamma_from_entropy(0.9, &cfg), 0.0);
        assert_eq!(gamma_from_entropy(1.5, &cfg), 0.0);
        let mid = gamma_from_entropy(0.55, &cfg);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gamma_is_monotone_nonincreasing_in_entropy() {
        let cfg = GammaConfig::for_languages(3).unwrap();
        let mut prev = f64::INFINITY;
        let mut h = 0.0;
        while h < 1.2 {
            let g = gamma_from_entropy(h, &cfg);
            assert!(g <= prev + 1e-15);
            assert!((0.0..=1.0).contains(&g));
            prev = g;
            h += 0.01;
        }
    }

    #[test]
    fn relevance_weights_are_blockwise_constant() {
        // 2.5 s at 10 ms: blocks 0..100, 100..200, 200..250 (half a block
        // is not "shorter than half", so the tail is scored on its own).
        let frames = Array2::<f32>::zeros((250, 2));
        let feats = FeatureSequence::new(frames, vec![true; 250], 10).unwrap();
        let cfg = GammaConfig::new(0.2, 0.9, 100).unwrap();
        let mut calls = 0usize;
        let mut posterior = |block: &FeatureSequence| {
            calls += 1;
            // Alternate confident / uniform so blocks differ.
            Ok(if calls % 2 == 1 {
                array![1.0, 0.0, 0.0]
            } else {
                array![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
            })
            .map(|p: Array1<f64>| {
                assert!(block.num_frames() == 100 || block.num_frames() == 50);
                p
            })
        };
        let w = relevance_weights(&mut posterior, &feats, &cfg).unwrap();
        assert_eq!(w.len(), 250);
        assert_eq!(calls, 3);
        assert!(w[..100].iter().all(|&g| g == w[0]));
        assert!(w[100..200].iter().all(|&g| g == w[100]));
        assert!(w[200..].iter().all(|&g| g == w[200]));
        assert_eq!(w[0], 1.0); // confident block
        assert_eq!(w[100], 0.0); // uniform block: H = ln 3 > 0.9
        assert_eq!(w[200], 1.0);
    }

    #[test]
    fn short_tail_inherits_previous_gamma() {
        // 1.3 s: one full block plus a 30-frame tail (< half a block).
        let frames = Array2::<f32>::zeros((130, 2));
        let feats = FeatureSequence::new(frames, vec![true; 130], 10).unwrap();
        let cfg = GammaConfig::new(0.2, 0.9, 100).unwrap();
        let mut calls = 0usize;
        let mut posterior = |_: &FeatureSequence| {
            calls += 1;
            Ok(array![1.0, 0.0])
        };
        let w = relevance_weights(&mut posterior, &feats, &cfg).unwrap();
        assert_eq!(calls, 1, "tail must not be scored");
        assert!(w.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn fusion_weights_match_hand_case() {
        // H = [0.5, 1.0]: w1 = (1/0.5) / (1/0.5 + 1/1.0) = 2/3.
        let w = fusion_weights(&[0.5, 1.0]).unwrap();
        assert_eq!(w[0], 2.0 / 3.0);
        assert_eq!(w[1], 1.0 / 3.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_entropy_members_take_all_weight() {
        let w = fusion_weights(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn fuse_prefers_low_entropy_member() {
        let sharp = array![0.9, 0.05, 0.05];
        let flat = array![0.3, 0.4, 0.3];
        let (fused, label) = inverse_entropy_fuse(&[sharp, flat]).unwrap();
        assert_eq!(label, 0);
        assert!((fused.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (gmm, feats) = small_setup();
        let stats = accumulate_stats(&gmm, &feats, None).unwrap();
        let path = dir.path().join("u.rbws");
        write_stats(&path, &stats).unwrap();
        let back = read_stats(&path).unwrap();
        assert_eq!(back.frame_count, stats.frame_count);
        assert_eq!(back.num_components(), stats.num_components());
        for k in 0..stats.num_components() {
            assert!((back.n[k] - stats.n[k]).abs() < 1e-3);
        }
    }
}

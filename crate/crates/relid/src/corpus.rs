//! Synthetic noisy-speech corpus generation and feature preprocessing.
//!
//! Utterances are sequences of feature frames drawn from per-language
//! diagonal-covariance source GMMs. Noise is additive Gaussian in feature
//! space, scaled per frame so the speech-power to noise-power ratio matches
//! the requested SNR; `partial` mode corrupts only the first half of each
//! utterance. Preprocessing is energy-quantile SAD followed by two-stage
//! CMVN (utterance-level, then a sliding window).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{self, dim_u32};
use crate::ubm::DiagonalGmm;

/// Value written into `snr_trace` for frames that received no noise.
pub const CLEAN_SNR_SENTINEL_DB: f32 = 999.0;

/// Frame matrix plus voicing mask and optional per-frame SNR diagnostic.
///
/// Frames are stored as f32 to match the on-disk layout, so write/read
/// round-trips are bit-exact. Numerics downstream promote to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// T x D frame matrix.
    pub frames: Array2<f32>,
    /// Voicing mask, length T.
    pub voiced: Vec<bool>,
    /// Frame hop in milliseconds.
    pub hop_ms: u16,
    /// Realized per-frame SNR in dB; `CLEAN_SNR_SENTINEL_DB` marks clean
    /// frames. Absent for corpora generated without noise.
    pub snr_trace: Option<Vec<f32>>,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f32>, voiced: Vec<bool>, hop_ms: u16) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::invalid(
                "FeatureSequence",
                format!("empty frame matrix {}x{}", frames.nrows(), frames.ncols()),
            ));
        }
        if voiced.len() != frames.nrows() {
            return Err(Error::shape(
                "FeatureSequence",
                format!("{} frames but {} voicing flags", frames.nrows(), voiced.len()),
            ));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("FeatureSequence", "non-finite frame value"));
        }
        if hop_ms == 0 {
            return Err(Error::invalid("FeatureSequence", "hop_ms must be positive"));
        }
        Ok(FeatureSequence {
            frames,
            voiced,
            hop_ms,
            snr_trace: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_frames() as f64 * f64::from(self.hop_ms) / 1000.0
    }

    pub fn num_voiced(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    /// Frame `i` promoted to f64.
    pub fn frame_f64(&self, i: usize) -> Vec<f64> {
        self.frames.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Copies the frame range `[start, start + len)` into a new sequence,
    /// carrying voicing and SNR trace along.
    pub fn slice(&self, start: usize, len: usize) -> Result<FeatureSequence> {
        if len == 0 || start + len > self.num_frames() {
            return Err(Error::invalid(
                "FeatureSequence::slice",
                format!(
                    "range {start}..{} out of bounds for {} frames",
                    start + len,
                    self.num_frames()
                ),
            ));
        }
        let mut out = FeatureSequence::new(
            self.frames.slice(ndarray::s![start..start + len, ..]).to_owned(),
            self.voiced[start..start + len].to_vec(),
            self.hop_ms,
        )?;
        out.snr_trace = self
            .snr_trace
            .as_ref()
            .map(|t| t[start..start + len].to_vec());
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Language label; None for unlabeled material (stored as -1 on disk).
    pub language: Option<usize>,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Clean,
    /// Every frame is corrupted.
    Full,
    /// Only the first half of each utterance is corrupted.
    Partial,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Result<NoiseMode> {
        match s {
            "clean" => Ok(NoiseMode::Clean),
            "full" => Ok(NoiseMode::Full),
            "partial" => Ok(NoiseMode::Partial),
            other => Err(Error::Config(format!("unknown noise mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Clean => "clean",
            NoiseMode::Full => "full",
            NoiseMode::Partial => "partial",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub utterances_per_language: usize,
    /// Uniform duration range in seconds.
    pub duration_range_s: (f64, f64),
    pub feature_dim: usize,
    /// Components in each language's source GMM.
    pub source_components: usize,
    /// Standard deviation of source component means; controls how far apart
    /// the languages sit in feature space.
    pub mean_spread: f64,
    /// Stationary fraction of frames spent in background chatter rather than
    /// the language's own speech. Real recordings are heterogeneous — pauses
    /// and competing speakers interleave with the foreground — so clean
    /// utterances carry stretches drawn from the pooled source mixture in
    /// sticky runs (mean dwell [`AMBIENCE_DWELL_FRAMES`]). Those stretches
    /// look alike across languages while carrying each utterance's label,
    /// which is what lets downstream relevance models learn to discount
    /// uninformative regions from clean data alone. Zero disables the runs.
    pub ambience_fraction: f64,
    pub noise: NoiseMode,
    pub snr_db: f64,
    pub hop_ms: u16,
    pub seed: u64,
}

/// Mean length of a background-chatter run, in frames (1.2 s at 10 ms).
pub const AMBIENCE_DWELL_FRAMES: usize = 120;

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_languages: 3,
            utterances_per_language: 20,
            duration_range_s: (6.0, 12.0),
            feature_dim: 20,
            source_components: 5,
            mean_spread: 1.0,
            ambience_fraction: 0.25,
            noise: NoiseMode::Clean,
            snr_db: 10.0,
            hop_ms: 10,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.num_languages == 0
            || self.utterances_per_language == 0
            || self.feature_dim == 0
            || self.source_components == 0
        {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        let (lo, hi) = self.duration_range_s;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "bad duration range [{lo}, {hi}]"
            )));
        }
        if self.hop_ms == 0 {
            return Err(Error::Config("hop_ms must be positive".into()));
        }
        if !(0.0..=0.9).contains(&self.ambience_fraction) {
            return Err(Error::Config(format!(
                "ambience_fraction {} outside [0, 0.9]",
                self.ambience_fraction
            )));
        }
        Ok(())
    }
}

/// Deterministic utterance id; also the feature file stem.
pub fn utterance_id(language: usize, index: usize) -> String {
    format!("lang{language:02}_utt{index:04}")
}

/// Samples the source GMM for one language. Depends only on (seed,
/// language), so utterances can be generated in parallel.
pub fn language_source_gmm(cfg: &CorpusConfig, language: usize) -> Result<DiagonalGmm> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ io::fnv1a64(format!("lang-gmm-{language}").as_bytes()),
    );
    let k = cfg.source_components;
    let d = cfg.feature_dim;
    let normal = Normal::new(0.0, cfg.mean_spread).expect("finite spread");
    let mut means = Array2::zeros((k, d));
    let mut variances = Array2::zeros((k, d));
    for c in 0..k {
        for j in 0..d {
            means[[c, j]] = normal.sample(&mut rng);
            variances[[c, j]] = rng.random_range(0.5..1.5);
        }
    }
    let mut weights = ndarray::Array1::zeros(k);
    for c in 0..k {
        weights[c] = rng.random_range(0.5..1.5);
    }
    let total: f64 = weights.sum();
    weights.mapv_inplace(|w| w / total);
    DiagonalGmm::new(weights, means, variances)
}

fn sample_frame(gmm: &DiagonalGmm, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = gmm.num_components() - 1;
    for c in 0..gmm.num_components() {
        acc += gmm.weights()[c];
        if u < acc {
            comp = c;
            break;
        }
    }
    for (j, slot) in out.iter_mut().enumerate() {
        let std = gmm.variances()[[comp, j]].sqrt();
        let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
        *slot = gmm.means()[[comp, j]] + std * z;
    }
}

/// Background-chatter source: every language's source model pooled with
/// equal language weights. It plays two roles. Chatter *runs* in otherwise
/// clean utterances draw frames from it directly, giving recordings the
/// heterogeneity of real audio. Additive *corruption* in the noisy modes
/// draws from it too — centered on the pool's mixture mean (returned
/// alongside) so the noise is zero-mean — which makes corruption carry the
/// component structure of competing speech (synthetic babble) rather than
/// isotropic fuzz: it injects misleading language evidence instead of
/// merely widening variances.
fn babble_source(gmms: &[DiagonalGmm]) -> (DiagonalGmm, Vec<f64>) {
    let k: usize = gmms.iter().map(DiagonalGmm::num_components).sum();
    let d = gmms[0].dim();
    let mut weights = ndarray::Array1::zeros(k);
    let mut means = Array2::zeros((k, d));
    let mut variances = Array2::zeros((k, d));
    let mut row = 0;
    for gmm in gmms {
        for c in 0..gmm.num_components() {
            weights[row] = gmm.weights()[c] / gmms.len() as f64;
            for j in 0..d {
                means[[row, j]] = gmm.means()[[c, j]];
                variances[[row, j]] = gmm.variances()[[c, j]];
            }
            row += 1;
        }
    }
    let mut center = vec![0.0; d];
    for c in 0..k {
        for (j, slot) in center.iter_mut().enumerate() {
            *slot += weights[c] * means[[c, j]];
        }
    }
    let pool = DiagonalGmm::new(weights, means, variances)
        .expect("pooled source weights/variances stay valid");
    (pool, center)
}

/// Generates one utterance from its own RNG stream (`seed ^ fnv1a64(id)`).
fn generate_utterance(
    cfg: &CorpusConfig,
    gmm: &DiagonalGmm,
    babble: &(DiagonalGmm, Vec<f64>),
    language: usize,
    index: usize,
) -> Utterance {
    let id = utterance_id(language, index);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ io::fnv1a64(id.as_bytes()));
    let (lo, hi) = cfg.duration_range_s;
    let dur_s = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let frames_per_s = 1000.0 / f64::from(cfg.hop_ms);
    let t = (dur_s * frames_per_s).round().max(1.0) as usize;
    let d = cfg.feature_dim;

    let mut frames = Array2::<f32>::zeros((t, d));
    let mut trace = vec![CLEAN_SNR_SENTINEL_DB; t];
    let mut buf = vec![0.0f64; d];
    let mut noise = vec![0.0f64; d];
    let snr_factor = 10f64.powf(cfg.snr_db / 10.0);
    // Two-state Markov chain over {speech, chatter}: sticky runs with mean
    // chatter dwell AMBIENCE_DWELL_FRAMES and speech dwell chosen so the
    // stationary chatter fraction equals cfg.ambience_fraction.
    let p_amb = cfg.ambience_fraction;
    let leave_amb = 1.0 / AMBIENCE_DWELL_FRAMES as f64;
    let leave_speech = leave_amb * p_amb / (1.0 - p_amb);
    let mut in_chatter = p_amb > 0.0 && rng.random::<f64>() < p_amb;
    for i in 0..t {
        if p_amb > 0.0 {
            let u: f64 = rng.random();
            if in_chatter {
                if u < leave_amb {
                    in_chatter = false;
                }
            } else if u < leave_speech {
                in_chatter = true;
            }
        }
        let source = if in_chatter { &babble.0 } else { gmm };
        sample_frame(source, &mut rng, &mut buf);
        let noisy = match cfg.noise {
            NoiseMode::Clean => false,
            NoiseMode::Full => true,
            NoiseMode::Partial => i < t / 2,
        };
        if noisy {
            let speech_power: f64 = buf.iter().map(|v| v * v).sum::<f64>() / d as f64;
            // Draw a babble frame, center it, and rescale so the realized
            // per-frame speech/noise power ratio equals snr_db exactly.
            sample_frame(&babble.0, &mut rng, &mut noise);
            for (e, c) in noise.iter_mut().zip(&babble.1) {
                *e -= c;
            }
            let raw_power: f64 = noise.iter().map(|v| v * v).sum::<f64>() / d as f64;
            if speech_power > 0.0 && raw_power > 0.0 {
                let scale = (speech_power / snr_factor / raw_power).sqrt();
                for (v, e) in buf.iter_mut().zip(&noise) {
                    *v += scale * e;
                }
                trace[i] = cfg.snr_db as f32;
            }
        }
        for j in 0..d {
            frames[[i, j]] = buf[j] as f32;
        }
    }

    let mut features = FeatureSequence::new(frames, vec![true; t], cfg.hop_ms)
        .expect("generated frames are finite and non-empty");
    if cfg.noise != NoiseMode::Clean {
        features.snr_trace = Some(trace);
    }
    Utterance {
        id,
        language: Some(language),
        features,
    }
}

/// Generates the full corpus. Utterances are independent RNG streams, so
/// the result is identical regardless of thread count.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut gmms = Vec::with_capacity(cfg.num_languages);
    for l in 0..cfg.num_languages {
        gmms.push(language_source_gmm(cfg, l)?);
    }
    let babble = babble_source(&gmms);
    let jobs: Vec<(usize, usize)> = (0..cfg.num_languages)
        .flat_map(|l| (0..cfg.utterances_per_language).map(move |u| (l, u)))
        .collect();
    let utts: Vec<Utterance> = jobs
        .par_iter()
        .map(|&(l, u)| generate_utterance(cfg, &gmms[l], &babble, l, u))
        .collect();
    Ok(utts)
}

/// Type-7 (linearly interpolated) quantile of already-sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Energy-quantile SAD: marks a frame voiced when its energy is at or above
/// the `energy_quantile` quantile of the utterance's frame energies. Ties
/// with the threshold count as voiced, so quantile 0 keeps every frame.
pub fn apply_sad(f: &mut FeatureSequence, energy_quantile: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&energy_quantile) {
        return Err(Error::invalid(
            "apply_sad",
            format!("quantile {energy_quantile} outside [0, 1]"),
        ));
    }
    let energies: Vec<f64> = (0..f.num_frames())
        .map(|i| f.frames.row(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum())
        .collect();
    let mut sorted = energies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("energies are finite"));
    let threshold = quantile_sorted(&sorted, energy_quantile);
    for (i, e) in energies.iter().enumerate() {
        f.voiced[i] = *e >= threshold;
    }
    Ok(())
}

fn voiced_mean_var(
    frames: &Array2<f32>,
    voiced: &[bool],
    range: std::ops::Range<usize>,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let d = frames.ncols();
    let mut mean = vec![0.0f64; d];
    let mut count = 0usize;
    for i in range.clone() {
        if voiced[i] {
            count += 1;
            for j in 0..d {
                mean[j] += f64::from(frames[[i, j]]);
            }
        }
    }
    if count == 0 {
        return None;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in range {
        if voiced[i] {
            for j in 0..d {
                let c = f64::from(frames[[i, j]]) - mean[j];
                var[j] += c * c;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= count as f64;
    }
    Some((mean, var))
}

/// Variance floor applied inside CMVN before dividing by the std.
pub const CMVN_VAR_FLOOR: f64 = 1e-8;

/// Stage 1 of CMVN: normalize all frames with mean/variance computed over
/// the voiced frames. After this stage the voiced frames have zero mean and
/// unit variance per dimension (up to the variance floor).
pub fn cmvn_global(f: &mut FeatureSequence) -> Result<()> {
    let t = f.num_frames();
    let (mean, var) = voiced_mean_var(&f.frames, &f.voiced, 0..t)
        .ok_or_else(|| Error::invalid("cmvn", "no voiced frames"))?;
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / v.max(CMVN_VAR_FLOOR).sqrt()).collect();
    for i in 0..t {
        for j in 0..f.dim() {
            let x = f64::from(f.frames[[i, j]]);
            f.frames[[i, j]] = ((x - mean[j]) * inv_std[j]) as f32;
        }
    }
    Ok(())
}

/// Two-stage CMVN: utterance-level normalization, then per-frame
/// re-normalization with statistics from a centered window of
/// `window_s` seconds, clipped at the utterance edges. Window statistics
/// use voiced frames only; a window with no voiced frames leaves its
/// center frame unchanged.
pub fn cmvn(f: &mut FeatureSequence, window_s: f64) -> Result<()> {
    if !(window_s > 0.0) {
        return Err(Error::invalid("cmvn", format!("window {window_s}s not positive")));
    }
    cmvn_global(f)?;
    let t = f.num_frames();
    let d = f.dim();
    let w = ((window_s * 1000.0 / f64::from(f.hop_ms)).round() as usize).max(1);
    let half_lo = w / 2;
    let half_hi = w - half_lo; // window is [i - half_lo, i + half_hi)
    let mut out = f.frames.clone();
    for i in 0..t {
        let start = i.saturating_sub(half_lo);
        let end = (i + half_hi).min(t);
        if let Some((mean, var)) = voiced_mean_var(&f.frames, &f.voiced, start..end) {
            for j in 0..d {
                let inv_std = 1.0 / var[j].max(CMVN_VAR_FLOOR).sqrt();
                let x = f64::from(f.frames[[i, j]]);
                out[[i, j]] = ((x - mean[j]) * inv_std) as f32;
            }
        }
    }
    f.frames = out;
    Ok(())
}

const FEATURE_MAGIC: &[u8; 4] = b"RLID";

/// Writes an utterance's features. Layout: magic, version u16, T u32,
/// D u32, hop_ms u16, label i16 (-1 unlabeled), T*D f32 frames row-major,
/// T voicing bytes, SNR presence flag u8, then T f32 SNR values if present.
pub fn write_features(path: &Path, utt: &Utterance) -> Result<()> {
    let f = &utt.features;
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, FEATURE_MAGIC)?;
    w.write_u32::<LE>(dim_u32(f.num_frames(), "frame count", path)?)?;
    w.write_u32::<LE>(dim_u32(f.dim(), "feature dim", path)?)?;
    w.write_u16::<LE>(f.hop_ms)?;
    let label: i16 = match utt.language {
        Some(l) => i16::try_from(l)
            .map_err(|_| Error::bad_file(path, format!("label {l} overflows i16")))?,
        None => -1,
    };
    w.write_i16::<LE>(label)?;
    io::write_f32_slice(&mut w, f.frames.iter().copied())?;
    for &v in &f.voiced {
        w.write_u8(u8::from(v))?;
    }
    match &f.snr_trace {
        Some(trace) => {
            w.write_u8(1)?;
            io::write_f32_slice(&mut w, trace.iter().copied())?;
        }
        None => w.write_u8(0)?,
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file; the utterance id is the file stem.
pub fn read_features(path: &Path) -> Result<Utterance> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, FEATURE_MAGIC, path)?;
    let t = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let d = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let hop_ms = r
        .read_u16::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))?;
    let label = r
        .read_i16::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))?;
    if t == 0 || d == 0 {
        return Err(Error::bad_file(path, format!("empty feature matrix {t}x{d}")));
    }
    let flat = io::read_f32_vec(&mut r, t * d, path)?;
    let frames = Array2::from_shape_vec((t, d), flat)
        .map_err(|e| Error::bad_file(path, format!("bad frame shape: {e}")))?;
    let mut voiced_bytes = vec![0u8; t];
    r.read_exact(&mut voiced_bytes)
        .map_err(|_| Error::bad_file(path, "truncated voicing mask"))?;
    let voiced: Vec<bool> = voiced_bytes.iter().map(|&b| b != 0).collect();
    let has_snr = r
        .read_u8()
        .map_err(|_| Error::bad_file(path, "missing SNR presence flag"))?;
    let snr_trace = match has_snr {
        0 => None,
        1 => Some(io::read_f32_vec(&mut r, t, path)?),
        other => {
            return Err(Error::bad_file(path, format!("bad SNR presence flag {other}")));
        }
    };
    io::expect_eof(&mut r, path)?;
    let mut features = FeatureSequence::new(frames, voiced, hop_ms)
        .map_err(|e| Error::bad_file(path, e.to_string()))?;
    features.snr_trace = snr_trace;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let language = if label < 0 { None } else { Some(label as usize) };
    Ok(Utterance { id, language, features })
}

/// Writes a corpus manifest: one `relative-path<TAB>label` line per
/// utterance, label -1 when unlabeled.
pub fn write_manifest(path: &Path, entries: &[(String, Option<usize>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (rel, label) in entries {
        let l = label.map(|v| v as i64).unwrap_or(-1);
        writeln!(w, "{rel}\t{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, Option<usize>)>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once('\t').ok_or_else(|| {
            Error::bad_file(path, format!("line {}: expected 'path<TAB>label'", lineno + 1))
        })?;
        let label: i64 = label.trim().parse().map_err(|_| {
            Error::bad_file(path, format!("line {}: bad label '{label}'", lineno + 1))
        })?;
        let label = if label < 0 { None } else { Some(label as usize) };
        out.push((PathBuf::from(rel), label));
    }
    Ok(out)
}

/// Writes a generated corpus to `dir` as feature files plus `manifest.txt`.
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utts.len());
    for utt in utts {
        let rel = format!("{}.feat", utt.id);
        write_features(&dir.join(&rel), utt)?;
        entries.push((rel, utt.language));
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every utterance listed in a manifest. Paths are resolved relative
/// to the manifest's directory; a label disagreement between manifest and
/// feature file is an error.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for (rel, label) in entries {
        let utt = read_features(&base.join(&rel))?;
        if utt.language.is_some() && label.is_some() && utt.language != label {
            return Err(Error::bad_file(
                manifest,
                format!(
                    "label mismatch for {}: manifest {:?}, file {:?}",
                    rel.display(),
                    label,
                    utt.language
                ),
            ));
        }
        out.push(Utterance { language: label.or(utt.language), ..utt });
    }
    Ok(out)
}

/// Mean SNR in dB over a frame window, from the recorded trace. Clean
/// frames contribute the sentinel, so an all-clean window reports 999.
pub fn mean_window_snr(f: &FeatureSequence, start: usize, len: usize) -> Option<f64> {
    let trace = f.snr_trace.as_ref()?;
    let end = (start + len).min(trace.len());
    if start >= end {
        return None;
    }
    let sum: f64 = trace[start..end].iter().map(|&v| f64::from(v)).sum();
    Some(sum / (end - start) as f64)
}

/// Voiced frames of one utterance as an f64 matrix, in time order.
pub fn voiced_frames_f64(f: &FeatureSequence) -> Array2<f64> {
    let rows: Vec<usize> = (0..f.num_frames()).filter(|&i| f.voiced[i]).collect();
    let mut out = Array2::zeros((rows.len(), f.dim()));
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..f.dim() {
            out[[r, j]] = f64::from(f.frames[[i, j]]);
        }
    }
    out
}

/// Voiced frames of every utterance pooled into one matrix, optionally
/// keeping only every `stride`-th voiced frame.
pub fn pool_voiced_frames(utts: &[Utterance], stride: usize) -> Result<Array2<f64>> {
    if utts.is_empty() {
        return Err(Error::invalid("pool_voiced_frames", "no utterances"));
    }
    let stride = stride.max(1);
    let d = utts[0].features.dim();
    let mut rows: Vec<f64> = Vec::new();
    let mut kept = 0usize;
    let mut counter = 0usize;
    for utt in utts {
        if utt.features.dim() != d {
            return Err(Error::shape(
                "pool_voiced_frames",
                format!("dim {} vs {}", utt.features.dim(), d),
            ));
        }
        for i in 0..utt.features.num_frames() {
            if utt.features.voiced[i] {
                if counter % stride == 0 {
                    rows.extend(utt.features.frames.row(i).iter().map(|&v| f64::from(v)));
                    kept += 1;
                }
                counter += 1;
            }
        }
    }
    if kept == 0 {
        return Err(Error::invalid("pool_voiced_frames", "no voiced frames"));
    }
    Array2::from_shape_vec((kept, d), rows)
        .map_err(|e| Error::invalid("pool_voiced_frames", e.to_string()))
}

//! Trial scoring containers and detection metrics.
//!
//! Equal error rate is computed on the convex hull of the ROC (via pooling
//! adjacent violators), so it is the best error rate achievable by any
//! monotone recalibration of the scores, including interpolated operating
//! points. The average detection cost sweeps the application-dependent
//! threshold ln(beta) over the values in `C_AVG_BETAS`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Cost ratios for the average-cost metric; the primary metric is the
/// mean of the costs at these two operating points.
pub const C_AVG_BETAS: [f64; 2] = [1.0, 9.0];

/// Log-likelihood-ratio magnitude cap; keeps degenerate posteriors (0 or 1)
/// finite.
pub const LLR_CLAMP: f64 = 30.0;

/// A block of trial scores: one row per trial, one column per language.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub trial_ids: Vec<String>,
    /// True language per trial; None for unlabeled trials.
    pub labels: Vec<Option<usize>>,
    pub languages: Vec<String>,
    pub scores: Array2<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.scores.nrows();
        if self.trial_ids.len() != n || self.labels.len() != n {
            return Err(Error::shape(
                "ScoreSet",
                format!(
                    "{} score rows, {} ids, {} labels",
                    n,
                    self.trial_ids.len(),
                    self.labels.len()
                ),
            ));
        }
        if self.languages.len() != self.scores.ncols() {
            return Err(Error::shape(
                "ScoreSet",
                format!(
                    "{} languages, {} score columns",
                    self.languages.len(),
                    self.scores.ncols()
                ),
            ));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("ScoreSet", "scores contain NaN"));
        }
        for l in &self.labels {
            if let Some(l) = *l {
                if l >= self.languages.len() {
                    return Err(Error::invalid(
                        "ScoreSet",
                        format!("label {} out of range", l),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Labels as plain indices; errors if any trial is unlabeled.
    pub fn required_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.ok_or_else(|| {
                    Error::invalid("ScoreSet", format!("trial {i} has no label"))
                })
            })
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of trials whose top-scoring language matches the label.
pub fn accuracy(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() == 0 {
        return Err(Error::invalid("accuracy", "no trials"));
    }
    if scores.nrows() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} rows, {} labels", scores.nrows(), labels.len()),
        ));
    }
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        let row = scores.row(i);
        if argmax(row.as_slice().expect("contiguous row")) == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy)]
struct Block {
    targets: u64,
    nontargets: u64,
}

/// Sorts both pools, merges exact score ties, then pools adjacent
/// violators so the target fraction increases strictly with score.
fn pav_blocks(targets: &[f64], nontargets: &[f64]) -> Vec<Block> {
    let mut merged: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    merged.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are not NaN"));

    let mut blocks: Vec<(f64, Block)> = Vec::new();
    for (score, is_target) in merged {
        let add = |b: &mut Block| {
            if is_target {
                b.targets += 1;
            } else {
                b.nontargets += 1;
            }
        };
        match blocks.last_mut() {
            Some((s, b)) if *s == score => add(b),
            _ => {
                let mut b = Block { targets: 0, nontargets: 0 };
                add(&mut b);
                blocks.push((score, b));
            }
        }
    }

    let mut stack: Vec<Block> = Vec::with_capacity(blocks.len());
    for (_, b) in blocks {
        stack.push(b);
        while stack.len() >= 2 {
            let cur = stack[stack.len() - 1];
            let prev = stack[stack.len() - 2];
            let prev_total = prev.targets + prev.nontargets;
            let cur_total = cur.targets + cur.nontargets;
            // Pool while the target fraction fails to increase; compare
            // in integers to dodge rounding.
            if (prev.targets as u128) * (cur_total as u128)
                >= (cur.targets as u128) * (prev_total as u128)
            {
                stack.pop();
                let top = stack.last_mut().unwrap();
                top.targets += cur.targets;
                top.nontargets += cur.nontargets;
            } else {
                break;
            }
        }
    }
    stack
}

/// Vertices of the ROC convex hull as (p_fa, p_miss) pairs, running from
/// (1, 0) at the lowest threshold to (0, 1) at the highest.
pub fn roc_hull(targets: &[f64], nontargets: &[f64]) -> Result<Vec<(f64, f64)>> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::invalid(
            "roc_hull",
            "need at least one target and one non-target score",
        ));
    }
    if targets.iter().chain(nontargets).any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_hull", "scores contain NaN"));
    }
    let blocks = pav_blocks(targets, nontargets);
    let t_total = targets.len() as f64;
    let n_total = nontargets.len() as f64;
    let mut pts = Vec::with_capacity(blocks.len() + 1);
    pts.push((1.0, 0.0));
    let (mut ct, mut cn) = (0u64, 0u64);
    for b in blocks {
        ct += b.targets;
        cn += b.nontargets;
        pts.push((
            (nontargets.len() as u64 - cn) as f64 / n_total,
            ct as f64 / t_total,
        ));
    }
    Ok(pts)
}

/// Equal error rate: the miss rate where the ROC convex hull crosses the
/// p_miss = p_fa diagonal.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    let pts = roc_hull(targets, nontargets)?;
    // p_miss - p_fa rises monotonically along the hull from -1 to +1.
    for j in 1..pts.len() {
        let (fa, pm) = pts[j];
        let diff = pm - fa;
        if diff >= 0.0 {
            if diff == 0.0 {
                return Ok(pm);
            }
            let (fa0, pm0) = pts[j - 1];
            let t = (fa0 - pm0) / ((pm - pm0) - (fa - fa0));
            return Ok(pm0 + t * (pm - pm0));
        }
    }
    unreachable!("hull ends at (0, 1) where p_miss - p_fa = 1");
}

/// Splits scores into per-language target and non-target pools and
/// concatenates them across languages.
pub fn pooled_trials(scores: ArrayView2<f64>, labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        for lang in 0..scores.ncols() {
            if lang == l {
                targets.push(scores[[i, lang]]);
            } else {
                nontargets.push(scores[[i, lang]]);
            }
        }
    }
    (targets, nontargets)
}

fn language_trial_counts(labels: &[usize], num_languages: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_languages];
    for &l in labels {
        if l >= num_languages {
            return Err(Error::invalid("evaluate", format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    if let Some(lang) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(
            "evaluate",
            format!("language {lang} has no trials"),
        ));
    }
    Ok(counts)
}

/// Average detection cost at cost ratio `beta`. A trial counts as a miss
/// for its own language when its score is at or below ln(beta), and as a
/// false alarm against another language when that language's score is
/// strictly above ln(beta).
pub fn c_avg(scores: ArrayView2<f64>, labels: &[usize], beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid("c_avg", "beta must be positive and finite"));
    }
    if scores.nrows() != labels.len() {
        return Err(Error::shape(
            "c_avg",
            format!("{} rows, {} labels", scores.nrows(), labels.len()),
        ));
    }
    let num_languages = scores.ncols();
    if num_languages < 2 {
        return Err(Error::invalid("c_avg", "need at least two languages"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("c_avg", "scores contain NaN"));
    }
    let counts = language_trial_counts(labels, num_languages)?;
    let threshold = beta.ln();

    let mut total = 0.0;
    for target in 0..num_languages {
        let mut misses = 0usize;
        // False alarms per impostor language.
        let mut fa = vec![0usize; num_languages];
        for (i, &l) in labels.iter().enumerate() {
            let s = scores[[i, target]];
            if l == target {
                if s <= threshold {
                    misses += 1;
                }
            } else if s > threshold {
                fa[l] += 1;
            }
        }
        let p_miss = misses as f64 / counts[target] as f64;
        let mut fa_term = 0.0;
        for imp in 0..num_languages {
            if imp != target {
                fa_term += fa[imp] as f64 / counts[imp] as f64;
            }
        }
        total += p_miss + beta * fa_term / (num_languages - 1) as f64;
    }
    Ok(total / num_languages as f64)
}

/// Mean of the average costs at the ratios in `C_AVG_BETAS`.
pub fn c_avg_primary(scores: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for beta in C_AVG_BETAS {
        total += c_avg(scores, labels, beta)?;
    }
    Ok(total / C_AVG_BETAS.len() as f64)
}

/// Converts a posterior for one of `num_languages` classes into a
/// log-likelihood ratio against the flat prior over the other classes,
/// clamped to +-LLR_CLAMP.
pub fn to_llr(posterior: f64, num_languages: usize) -> Result<f64> {
    if num_languages < 2 {
        return Err(Error::invalid("to_llr", "need at least two languages"));
    }
    if !(0.0..=1.0).contains(&posterior) {
        return Err(Error::invalid(
            "to_llr",
            format!("posterior {posterior} outside [0, 1]"),
        ));
    }
    let llr = posterior.ln() - ((1.0 - posterior) / (num_languages as f64 - 1.0)).ln();
    Ok(llr.clamp(-LLR_CLAMP, LLR_CLAMP))
}

/// Maps a row of posteriors through `to_llr`.
pub fn posteriors_to_llr(posteriors: &[f64], num_languages: usize) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(posteriors.len());
    for (i, &p) in posteriors.iter().enumerate() {
        out[i] = to_llr(p, num_languages)?;
    }
    Ok(out)
}

/// Summary metrics over a labeled score set. The headline equal error
/// rate is the average of the per-language rates; the pooled rate over
/// all trial-language pairs is kept alongside for detection plots.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub num_trials: usize,
    pub num_languages: usize,
    pub accuracy: f64,
    pub eer_avg: f64,
    pub eer_pooled: f64,
    pub eer_per_language: Vec<f64>,
    pub trials_per_language: Vec<usize>,
    pub c_avg_beta1: f64,
    pub c_avg_beta9: f64,
    pub c_avg_primary: f64,
}

pub fn evaluate(set: &ScoreSet) -> Result<MetricsReport> {
    set.validate()?;
    let labels = set.required_labels()?;
    let num_languages = set.languages.len();
    let counts = language_trial_counts(&labels, num_languages)?;

    let accuracy = accuracy(set.scores.view(), &labels)?;
    let (targets, nontargets) = pooled_trials(set.scores.view(), &labels);
    let eer_pooled = eer(&targets, &nontargets)?;

    let mut eer_per_language = Vec::with_capacity(num_languages);
    for lang in 0..num_languages {
        let mut t = Vec::new();
        let mut n = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == lang {
                t.push(set.scores[[i, lang]]);
            } else {
                n.push(set.scores[[i, lang]]);
            }
        }
        eer_per_language.push(eer(&t, &n)?);
    }
    let eer_avg = eer_per_language.iter().sum::<f64>() / num_languages as f64;

    let c1 = c_avg(set.scores.view(), &labels, C_AVG_BETAS[0])?;
    let c9 = c_avg(set.scores.view(), &labels, C_AVG_BETAS[1])?;
    Ok(MetricsReport {
        num_trials: labels.len(),
        num_languages,
        accuracy,
        eer_avg,
        eer_pooled,
        eer_per_language,
        trials_per_language: counts,
        c_avg_beta1: c1,
        c_avg_beta9: c9,
        c_avg_primary: 0.5 * (c1 + c9),
    })
}

fn check_csv_field(kind: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(',') || value.contains('\n') {
        return Err(Error::invalid(
            "write_scores",
            format!("{kind} {value:?} is empty or contains a comma or newline"),
        ));
    }
    Ok(())
}

/// Writes scores as CSV: header `trial_id,label,<language>...`, one row
/// per trial, label column holding the language name or `-` when the
/// trial is unlabeled. Floats use the shortest round-trip form, so equal
/// score sets serialize to identical bytes.
pub fn write_scores(path: &Path, set: &ScoreSet) -> Result<()> {
    set.validate()?;
    let mut out = String::new();
    out.push_str("trial_id,label");
    for lang in &set.languages {
        check_csv_field("language", lang)?;
        if lang == "-" {
            return Err(Error::invalid("write_scores", "language named \"-\""));
        }
        out.push(',');
        out.push_str(lang);
    }
    out.push('\n');
    for (i, id) in set.trial_ids.iter().enumerate() {
        check_csv_field("trial id", id)?;
        out.push_str(id);
        out.push(',');
        match set.labels[i] {
            Some(l) => out.push_str(&set.languages[l]),
            None => out.push('-'),
        }
        for j in 0..set.languages.len() {
            let _ = write!(out, ",{}", set.scores[[i, j]]);
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::bad_file(path, "empty score file"))?;
    let cells: Vec<&str> = header.split(',').collect();
    if cells.len() < 4 || cells[0] != "trial_id" || cells[1] != "label" {
        return Err(Error::bad_file(
            path,
            "header must be trial_id,label,<language>,... with at least two languages",
        ));
    }
    let languages: Vec<String> = cells[2..].iter().map(|s| s.to_string()).collect();

    let mut trial_ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != languages.len() + 2 {
            return Err(Error::bad_file(
                path,
                format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    languages.len() + 2
                ),
            ));
        }
        trial_ids.push(fields[0].to_string());
        let label = if fields[1] == "-" {
            None
        } else {
            Some(languages.iter().position(|l| l == fields[1]).ok_or_else(|| {
                Error::bad_file(
                    path,
                    format!("line {}: unknown label {:?}", lineno + 2, fields[1]),
                )
            })?)
        };
        labels.push(label);
        for f in &fields[2..] {
            let v: f64 = f.parse().map_err(|_| {
                Error::bad_file(path, format!("line {}: bad score {:?}", lineno + 2, f))
            })?;
            rows.push(v);
        }
    }
    let n = trial_ids.len();
    let scores = Array2::from_shape_vec((n, languages.len()), rows)
        .map_err(|e| Error::bad_file(path, format!("score shape: {e}")))?;
    let set = ScoreSet { trial_ids, labels, languages, scores };
    set.validate()?;
    Ok(set)
}

/// Writes the summary as `key=value` lines.
pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "num_trials={}", report.num_trials);
    let _ = writeln!(out, "num_languages={}", report.num_languages);
    let _ = writeln!(out, "accuracy={}", report.accuracy);
    let _ = writeln!(out, "eer_avg={}", report.eer_avg);
    let _ = writeln!(out, "eer_pooled={}", report.eer_pooled);
    let _ = writeln!(out, "c_avg_beta1={}", report.c_avg_beta1);
    let _ = writeln!(out, "c_avg_beta9={}", report.c_avg_beta9);
    let _ = writeln!(out, "c_avg_primary={}", report.c_avg_primary);
    fs::write(path, out)?;
    Ok(())
}

/// Writes per-language rows: `language,num_trials,eer`.
pub fn write_language_report(
    path: &Path,
    languages: &[String],
    report: &MetricsReport,
) -> Result<()> {
    if languages.len() != report.eer_per_language.len() {
        return Err(Error::shape(
            "write_language_report",
            format!(
                "{} languages, {} per-language rows",
                languages.len(),
                report.eer_per_language.len()
            ),
        ));
    }
    let mut out = String::from("language,num_trials,eer\n");
    for (i, lang) in languages.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{}",
            lang, report.trials_per_language[i], report.eer_per_language[i]
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the pooled ROC hull vertices as `p_fa,p_miss` rows, for
/// detection tradeoff plots.
pub fn write_det_points(path: &Path, set: &ScoreSet) -> Result<()> {
    set.validate()?;
    let labels = set.required_labels()?;
    let (targets, nontargets) = pooled_trials(set.scores.view(), &labels);
    let pts = roc_hull(&targets, &nontargets)?;
    let mut out = String::from("p_fa,p_miss\n");
    for (fa, pm) in pts {
        let _ = writeln!(out, "{},{}", fa, pm);
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Reference equal error rate: enumerate every hard operating point
    /// (a threshold between adjacent distinct scores, plus the extremes),
    /// then take the lowest diagonal crossing over all segments between
    /// point pairs that straddle p_miss = p_fa, along with any point
    /// sitting exactly on the diagonal. Every such segment is achievable
    /// by randomizing between two thresholds, so the minimum equals the
    /// hull crossing.
    fn eer_brute(targets: &[f64], nontargets: &[f64]) -> f64 {
        let mut cuts: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        let mut points = Vec::new();
        // One operating point per threshold choice: below everything,
        // at each distinct score (score <= threshold rejects), so the
        // extremes come out as (pm=0, pfa=1) and (pm=1, pfa=0).
        let mut thresholds = vec![f64::NEG_INFINITY];
        thresholds.extend(cuts.iter().copied());
        for th in thresholds {
            let pm = targets.iter().filter(|&&s| s <= th).count() as f64
                / targets.len() as f64;
            let fa = nontargets.iter().filter(|&&s| s > th).count() as f64
                / nontargets.len() as f64;
            points.push((pm, fa));
        }
        let mut best = f64::INFINITY;
        for &(pm, fa) in &points {
            if pm == fa {
                best = best.min(pm);
            }
        }
        for &(pm_a, fa_a) in &points {
            for &(pm_b, fa_b) in &points {
                let da = pm_a - fa_a;
                let db = pm_b - fa_b;
                if da > 0.0 && db < 0.0 {
                    let t = da / (da - db);
                    best = best.min(pm_a + t * (pm_b - pm_a));
                }
            }
        }
        best
    }

    /// Reference average cost, written as the flattest possible loops.
    fn c_avg_brute(scores: &Array2<f64>, labels: &[usize], beta: f64) -> f64 {
        let nl = scores.ncols();
        let th = beta.ln();
        let mut sum = 0.0;
        for target in 0..nl {
            let tgt_trials: Vec<usize> =
                (0..labels.len()).filter(|&i| labels[i] == target).collect();
            let misses = tgt_trials
                .iter()
                .filter(|&&i| scores[[i, target]] <= th)
                .count();
            let mut cost = misses as f64 / tgt_trials.len() as f64;
            for imp in 0..nl {
                if imp == target {
                    continue;
                }
                let imp_trials: Vec<usize> =
                    (0..labels.len()).filter(|&i| labels[i] == imp).collect();
                let fas = imp_trials
                    .iter()
                    .filter(|&&i| scores[[i, target]] > th)
                    .count();
                cost += beta * (fas as f64 / imp_trials.len() as f64) / (nl - 1) as f64;
            }
            sum += cost;
        }
        sum / nl as f64
    }

    #[test]
    fn eer_interpolates_the_hull_crossing() {
        // Targets {0.9, 0.4}, non-targets {0.6, 0.1}: every hard
        // threshold gives pm = pfa = 0.5 at best, but the hull edge from
        // (pm 0, pfa 0.5) to (pm 0.5, pfa 0) crosses the diagonal at 1/4.
        let e = eer(&[0.9, 0.4], &[0.6, 0.1]).unwrap();
        assert_eq!(e, 0.25);
    }

    #[test]
    fn eer_handles_degenerate_pools() {
        // Identical scores carry no information: 0.5.
        assert_eq!(eer(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        // Perfect separation: 0.
        assert_eq!(eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        // Perfectly anti-correlated scores still hull to chance.
        assert_eq!(eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 0.5);
        assert!(eer(&[], &[1.0]).is_err());
        assert!(eer(&[1.0], &[]).is_err());
    }

    #[test]
    fn eer_matches_brute_force_on_random_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let nt = rng.random_range(1..25);
            let nn = rng.random_range(1..25);
            // Half the trials use a coarse grid to force ties.
            let coarse = trial % 2 == 0;
            let sample = |rng: &mut ChaCha8Rng| {
                if coarse {
                    (rng.random_range(0..6) as f64) * 0.5
                } else {
                    rng.random::<f64>()
                }
            };
            let targets: Vec<f64> =
                (0..nt).map(|_| sample(&mut rng) + 0.3).collect();
            let nontargets: Vec<f64> = (0..nn).map(|_| sample(&mut rng)).collect();
            let fast = eer(&targets, &nontargets).unwrap();
            let brute = eer_brute(&targets, &nontargets);
            assert!(
                (fast - brute).abs() < 1e-9,
                "trial {trial}: hull {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn roc_hull_endpoints_are_fixed() {
        let pts = roc_hull(&[0.5, 1.5], &[0.0, 1.0]).unwrap();
        assert_eq!(*pts.first().unwrap(), (1.0, 0.0));
        assert_eq!(*pts.last().unwrap(), (0.0, 1.0));
    }

    #[test]
    fn c_avg_counts_boundary_scores_as_misses() {
        // Two languages, beta = 1 so the threshold is ln 1 = 0. The
        // label-0 trial scores exactly 0 for language 0: a miss. Nothing
        // scores above 0, so there are no false alarms and
        // c_avg = (1 + 1) / 2 = 1.
        let scores = array![[0.0, -1.0], [-1.0, -2.0]];
        let labels = [0usize, 1];
        let c = c_avg(scores.view(), &labels, 1.0).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn c_avg_zero_scores_cost_one_at_beta_one() {
        let scores = Array2::zeros((6, 3));
        let labels = [0usize, 0, 1, 1, 2, 2];
        assert_eq!(c_avg(scores.view(), &labels, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn c_avg_perfect_scores_cost_zero() {
        let mut scores = Array2::from_elem((4, 2), f64::NEG_INFINITY);
        let labels = [0usize, 0, 1, 1];
        for (i, &l) in labels.iter().enumerate() {
            scores[[i, l]] = f64::INFINITY;
        }
        for beta in C_AVG_BETAS {
            assert_eq!(c_avg(scores.view(), &labels, beta).unwrap(), 0.0);
        }
        assert_eq!(c_avg_primary(scores.view(), &labels).unwrap(), 0.0);
    }

    #[test]
    fn c_avg_requires_trials_for_every_language() {
        let scores = Array2::zeros((2, 3));
        let labels = [0usize, 1]; // language 2 never appears
        assert!(c_avg(scores.view(), &labels, 1.0).is_err());
    }

    #[test]
    fn c_avg_matches_brute_force_on_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let nl = rng.random_range(2..5);
            let n = rng.random_range(nl..30);
            let mut labels: Vec<usize> = (0..nl).collect();
            for _ in nl..n {
                labels.push(rng.random_range(0..nl));
            }
            let scores =
                Array2::from_shape_fn((n, nl), |_| rng.random::<f64>() * 6.0 - 3.0);
            for beta in [1.0, 9.0, 2.5] {
                let fast = c_avg(scores.view(), &labels, beta).unwrap();
                let brute = c_avg_brute(&scores, &labels, beta);
                assert!((fast - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn llr_of_flat_posterior_is_zero() {
        for l in 2..6 {
            let llr = to_llr(1.0 / l as f64, l).unwrap();
            assert!(llr.abs() < 1e-12, "L={l}: {llr}");
        }
        // ln(0.5) - ln(0.25) = ln 2.
        let llr = to_llr(0.5, 3).unwrap();
        assert!((llr - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn llr_clamps_degenerate_posteriors() {
        assert_eq!(to_llr(1.0, 4).unwrap(), LLR_CLAMP);
        assert_eq!(to_llr(0.0, 4).unwrap(), -LLR_CLAMP);
        assert!(to_llr(1.5, 4).is_err());
        assert!(to_llr(0.5, 1).is_err());
        // Two languages: llr(0.9) = ln(0.9/0.1) = ln 9.
        assert!((to_llr(0.9, 2).unwrap() - 9.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eer_is_rank_invariant_per_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let targets: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + 0.2).collect();
        let nontargets: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let base = eer(&targets, &nontargets).unwrap();
        // Any strictly increasing map preserves score order, and the
        // hull depends only on order.
        let warp = |s: &f64| (3.0 * s).exp() - 2.0;
        let wt: Vec<f64> = targets.iter().map(warp).collect();
        let wn: Vec<f64> = nontargets.iter().map(warp).collect();
        let warped = eer(&wt, &wn).unwrap();
        assert!((base - warped).abs() < 1e-12);
    }

    #[test]
    fn accuracy_breaks_ties_toward_lower_index() {
        let scores = array![[0.5, 0.5], [0.5, 0.5]];
        assert_eq!(accuracy(scores.view(), &[0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(scores.view(), &[1, 1]).unwrap(), 0.0);
    }

    fn sample_set() -> ScoreSet {
        ScoreSet {
            trial_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            labels: vec![Some(0), Some(0), Some(1), Some(1)],
            languages: vec!["lang00".into(), "lang01".into()],
            scores: array![[2.0, -1.0], [1.5, 0.25], [-0.5, 3.0], [0.125, 1.0]],
        }
    }

    #[test]
    fn score_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let set = sample_set();
        write_scores(&path, &set).unwrap();
        let back = read_scores(&path).unwrap();
        assert_eq!(back.trial_ids, set.trial_ids);
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.languages, set.languages);
        assert_eq!(back.scores, set.scores);

        // Rewriting the parsed set is byte-identical.
        let again = dir.path().join("again.csv");
        write_scores(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn score_csv_keeps_unlabeled_trials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let mut set = sample_set();
        set.labels[2] = None;
        write_scores(&path, &set).unwrap();
        let back = read_scores(&path).unwrap();
        assert_eq!(back.labels[2], None);
        assert!(evaluate(&back).is_err(), "unlabeled trials cannot be scored");
    }

    #[test]
    fn score_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "nope\n").unwrap();
        assert!(read_scores(&path).is_err());
        fs::write(&path, "trial_id,label,a,b\nt0,a,0.5\n").unwrap();
        assert!(read_scores(&path).is_err(), "missing score column");
        fs::write(&path, "trial_id,label,a,b\nt0,zz,0.5,0.5\n").unwrap();
        assert!(read_scores(&path).is_err(), "unknown label name");
        fs::write(&path, "trial_id,label,a,b\nt0,a,0.5,x\n").unwrap();
        assert!(read_scores(&path).is_err(), "unparseable score");
    }

    #[test]
    fn evaluate_reports_consistent_metrics() {
        let set = sample_set();
        let report = evaluate(&set).unwrap();
        assert_eq!(report.num_trials, 4);
        assert_eq!(report.num_languages, 2);
        assert_eq!(report.trials_per_language, vec![2, 2]);
        // Every trial scores its own language highest.
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.eer_pooled, 0.0);
        assert_eq!(report.eer_avg, 0.0);
        assert_eq!(
            report.c_avg_primary,
            0.5 * (report.c_avg_beta1 + report.c_avg_beta9)
        );
        // Both c_avg terms only involve threshold comparisons, so
        // cross-check against the brute-force form.
        let labels = set.required_labels().unwrap();
        for (beta, got) in [(1.0, report.c_avg_beta1), (9.0, report.c_avg_beta9)] {
            assert!((got - c_avg_brute(&set.scores, &labels, beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_files_have_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        let report = evaluate(&set).unwrap();
        let rp = dir.path().join("report.txt");
        write_report(&rp, &report).unwrap();
        let text = fs::read_to_string(&rp).unwrap();
        assert!(text.contains("c_avg_primary="));
        assert!(text.contains("eer_pooled=0"));

        let lp = dir.path().join("langs.csv");
        write_language_report(&lp, &set.languages, &report).unwrap();
        let text = fs::read_to_string(&lp).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("language,num_trials,eer\n"));

        let dp = dir.path().join("det.csv");
        write_det_points(&dp, &set).unwrap();
        let text = fs::read_to_string(&dp).unwrap();
        assert!(text.starts_with("p_fa,p_miss\n"));
        assert!(text.lines().count() >= 3);
    }
}

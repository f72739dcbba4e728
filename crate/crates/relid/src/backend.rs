//! Embedding post-processing and classification backend.
//!
//! The scoring chain is WCCN, then length normalization, then LDA, then a
//! one-vs-rest linear SVM whose margins serve as system scores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, dim_u32};
use crate::linalg;

/// Rescue regularization for singular scatter matrices, as a fraction of
/// the average diagonal: S + 1e-6 * tr(S)/dim * I. Applied only when the
/// unmodified scatter fails to factor, so well-conditioned data is
/// whitened exactly.
pub const SCATTER_REG: f64 = 1e-6;

/// A linear map applied as y = M x.
#[derive(Debug, Clone)]
pub struct LinearTransform {
    pub matrix: Array2<f64>,
}

impl LinearTransform {
    pub fn apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.matrix.ncols() {
            return Err(Error::shape(
                "LinearTransform::apply",
                format!("vector dim {} vs transform input {}", v.len(), self.matrix.ncols()),
            ));
        }
        Ok(self.matrix.dot(&v))
    }

    pub fn apply_rows(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        if m.ncols() != self.matrix.ncols() {
            return Err(Error::shape(
                "LinearTransform::apply",
                format!("rows have dim {}, transform input {}", m.ncols(), self.matrix.ncols()),
            ));
        }
        Ok(m.dot(&self.matrix.t()))
    }
}

/// Projects onto the unit sphere; the zero vector stays zero.
pub fn length_normalize(v: ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v.to_owned()
    } else {
        v.mapv(|x| x / norm)
    }
}

fn class_index(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::invalid("backend", "no labels"));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    let mut index = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        index[l].push(i);
    }
    Ok(index)
}

/// Fits within-class covariance normalization. Returns the transform B'
/// with B B' = W^-1 for W the average within-class covariance; applying it
/// makes the within-class covariance identity.
pub fn fit_wccn(vectors: ArrayView2<f64>, labels: &[usize]) -> Result<LinearTransform> {
    if vectors.nrows() != labels.len() {
        return Err(Error::shape(
            "fit_wccn",
            format!("{} vectors, {} labels", vectors.nrows(), labels.len()),
        ));
    }
    let index = class_index(labels)?;
    let populated: Vec<&Vec<usize>> = index.iter().filter(|ix| !ix.is_empty()).collect();
    if populated.len() < 2 || populated.iter().any(|ix| ix.len() < 2) {
        return Err(Error::invalid(
            "fit_wccn",
            "need at least two classes with at least two vectors each",
        ));
    }
    let d = vectors.ncols();
    let mut w = Array2::<f64>::zeros((d, d));
    for ix in &populated {
        let mut mean = Array1::<f64>::zeros(d);
        for &i in ix.iter() {
            mean += &vectors.row(i);
        }
        mean.mapv_inplace(|v| v / ix.len() as f64);
        let mut cov = Array2::<f64>::zeros((d, d));
        for &i in ix.iter() {
            let c = &vectors.row(i) - &mean;
            for a in 0..d {
                for b in 0..d {
                    cov[[a, b]] += c[a] * c[b];
                }
            }
        }
        cov.mapv_inplace(|v| v / ix.len() as f64);
        w += &cov;
    }
    w.mapv_inplace(|v| v / populated.len() as f64);

    let w_inv = factor_scatter(w, "fit_wccn")?.inverse();
    let b = linalg::cholesky(w_inv.view(), "fit_wccn")?.lower();
    Ok(LinearTransform { matrix: b.t().to_owned() })
}

/// Factors a scatter matrix, falling back to a ridged copy when the raw
/// matrix is singular.
fn factor_scatter(mut s: Array2<f64>, context: &'static str) -> Result<linalg::CholFactor> {
    if let Ok(f) = linalg::cholesky(s.view(), context) {
        return Ok(f);
    }
    let d = s.nrows();
    let reg = SCATTER_REG * s.diag().sum() / d as f64;
    // Degenerate all-zero scatter still gets a nonzero ridge.
    let reg = if reg > 0.0 { reg } else { SCATTER_REG };
    for i in 0..d {
        s[[i, i]] += reg;
    }
    linalg::cholesky(s.view(), context)
}

/// Fits linear discriminant analysis via the generalized eigenproblem
/// between/within scatter. Rows of the returned transform are ordered by
/// decreasing eigenvalue, signs fixed so each row's largest-magnitude
/// entry is positive. `out_dim` must be at most (number of classes - 1).
pub fn fit_lda(
    vectors: ArrayView2<f64>,
    labels: &[usize],
    out_dim: usize,
) -> Result<LinearTransform> {
    if vectors.nrows() != labels.len() {
        return Err(Error::shape(
            "fit_lda",
            format!("{} vectors, {} labels", vectors.nrows(), labels.len()),
        ));
    }
    let index = class_index(labels)?;
    let populated: Vec<&Vec<usize>> = index.iter().filter(|ix| !ix.is_empty()).collect();
    let num_classes = populated.len();
    if num_classes < 2 {
        return Err(Error::invalid("fit_lda", "need at least two classes"));
    }
    if out_dim == 0 || out_dim > num_classes - 1 {
        return Err(Error::invalid(
            "fit_lda",
            format!("out_dim {out_dim} outside [1, {}]", num_classes - 1),
        ));
    }
    let d = vectors.ncols();
    let n = vectors.nrows() as f64;
    let mut global = Array1::<f64>::zeros(d);
    for row in vectors.rows() {
        global += &row;
    }
    global.mapv_inplace(|v| v / n);

    let mut sb = Array2::<f64>::zeros((d, d));
    let mut sw = Array2::<f64>::zeros((d, d));
    for ix in &populated {
        let nk = ix.len() as f64;
        let mut mean = Array1::<f64>::zeros(d);
        for &i in ix.iter() {
            mean += &vectors.row(i);
        }
        mean.mapv_inplace(|v| v / nk);
        let mc = &mean - &global;
        for a in 0..d {
            for b in 0..d {
                sb[[a, b]] += nk * mc[a] * mc[b];
            }
        }
        for &i in ix.iter() {
            let c = &vectors.row(i) - &mean;
            for a in 0..d {
                for b in 0..d {
                    sw[[a, b]] += c[a] * c[b];
                }
            }
        }
    }
    sb.mapv_inplace(|v| v / n);
    sw.mapv_inplace(|v| v / n);

    // Whiten: Sw = L L'; solve the standard symmetric problem on
    // L^-1 Sb L^-T, then map eigenvectors back through L^-T.
    let chol = factor_scatter(sw, "fit_lda")?;
    let l = chol.lower();
    let x = solve_lower(&l, sb.view()); // L^-1 Sb
    let m = solve_lower(&l, x.t()); // L^-1 (L^-1 Sb)' = L^-1 Sb L^-T
    let (eigvals, eigvecs) = linalg::symmetric_eig(m.view(), "fit_lda")?;
    if eigvals[0] <= 1e-8 {
        return Err(Error::invalid(
            "fit_lda",
            "between-class scatter is degenerate (identical class means?)",
        ));
    }

    let mut rows = Array2::<f64>::zeros((out_dim, d));
    for k in 0..out_dim {
        let u = eigvecs.column(k).to_owned();
        let wv = solve_upper_t(&l, u.view()); // L^-T u
        let mut row = wv;
        // Sign convention: the largest-magnitude entry is positive.
        let mut max_i = 0usize;
        for i in 1..d {
            if row[i].abs() > row[max_i].abs() {
                max_i = i;
            }
        }
        if row[max_i] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
        rows.row_mut(k).assign(&row);
    }
    Ok(LinearTransform { matrix: rows })
}

/// Solves L X = B for lower-triangular L, column by column.
fn solve_lower(l: &Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let cols = b.ncols();
    let mut x = Array2::<f64>::zeros((n, cols));
    for c in 0..cols {
        for i in 0..n {
            let mut acc = b[[i, c]];
            for j in 0..i {
                acc -= l[[i, j]] * x[[j, c]];
            }
            x[[i, c]] = acc / l[[i, i]];
        }
    }
    x
}

/// Solves L' x = b for lower-triangular L.
fn solve_upper_t(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= l[[j, i]] * x[j];
        }
        x[i] = acc / l[[i, i]];
    }
    x
}

/// One-vs-rest linear SVM trained by deterministic, epoch-shuffled
/// subgradient descent (Pegasos schedule).
#[derive(Debug, Clone)]
pub struct LinearSvm {
    /// L x D weight rows.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LinearSvm {
    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

pub fn train_linear_svm(
    vectors: ArrayView2<f64>,
    labels: &[usize],
    c_reg: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearSvm> {
    if vectors.nrows() != labels.len() {
        return Err(Error::shape(
            "train_linear_svm",
            format!("{} vectors, {} labels", vectors.nrows(), labels.len()),
        ));
    }
    if !(c_reg > 0.0) {
        return Err(Error::invalid("train_linear_svm", "c_reg must be positive"));
    }
    let index = class_index(labels)?;
    if index.len() < 2 {
        return Err(Error::invalid("train_linear_svm", "need at least two classes"));
    }
    if let Some(empty) = index.iter().position(|ix| ix.is_empty()) {
        return Err(Error::invalid(
            "train_linear_svm",
            format!("class {empty} has no training vectors"),
        ));
    }
    let n = vectors.nrows();
    let d = vectors.ncols();
    let num_classes = index.len();
    let lambda = 1.0 / (c_reg * n as f64);

    let mut weights = Array2::<f64>::zeros((num_classes, d));
    let mut biases = Array1::<f64>::zeros(num_classes);
    for class in 0..num_classes {
        // Per-class RNG stream so adding a class never reshuffles others.
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut w = Array1::<f64>::zeros(d);
        let mut b = 0.0f64;
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0u64;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let y = if labels[i] == class { 1.0 } else { -1.0 };
                let x = vectors.row(i);
                let margin = y * (w.dot(&x) + b);
                w.mapv_inplace(|v| v * (1.0 - eta * lambda));
                if margin < 1.0 {
                    w.scaled_add(eta * y, &x);
                    b += eta * y;
                }
            }
        }
        weights.row_mut(class).assign(&w);
        biases[class] = b;
    }
    Ok(LinearSvm { weights, biases })
}

/// Per-class margins w_l . x + b_l; used directly as scores.
pub fn classify(svm: &LinearSvm, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() != svm.dim() {
        return Err(Error::shape(
            "classify",
            format!("vector dim {} vs SVM dim {}", v.len(), svm.dim()),
        ));
    }
    Ok(svm.weights.dot(&v) + &svm.biases)
}

const TRANSFORM_MAGIC: &[u8; 4] = b"RLTX";
const SVM_MAGIC: &[u8; 4] = b"RSVM";

pub fn write_transform(path: &Path, t: &LinearTransform) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, TRANSFORM_MAGIC)?;
    w.write_u32::<LE>(dim_u32(t.matrix.nrows(), "rows", path)?)?;
    w.write_u32::<LE>(dim_u32(t.matrix.ncols(), "cols", path)?)?;
    io::write_matrix_f32(&mut w, &t.matrix)?;
    w.flush()?;
    Ok(())
}

pub fn read_transform(path: &Path) -> Result<LinearTransform> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, TRANSFORM_MAGIC, path)?;
    let rows = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let cols = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let matrix = io::read_matrix_f32(&mut r, rows, cols, path)?;
    io::expect_eof(&mut r, path)?;
    Ok(LinearTransform { matrix })
}

pub fn write_svm(path: &Path, svm: &LinearSvm) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, SVM_MAGIC)?;
    w.write_u32::<LE>(dim_u32(svm.num_classes(), "classes", path)?)?;
    w.write_u32::<LE>(dim_u32(svm.dim(), "dim", path)?)?;
    io::write_matrix_f32(&mut w, &svm.weights)?;
    io::write_vector_f32(&mut w, &svm.biases)?;
    w.flush()?;
    Ok(())
}

pub fn read_svm(path: &Path) -> Result<LinearSvm> {
    let mut r = BufReader::new(File::open(path)?);
    io::check_magic(&mut r, SVM_MAGIC, path)?;
    let classes = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let dim = r
        .read_u32::<LE>()
        .map_err(|_| Error::bad_file(path, "truncated header"))? as usize;
    let weights = io::read_matrix_f32(&mut r, classes, dim, path)?;
    let biases = io::read_vector_f32(&mut r, classes, path)?;
    io::expect_eof(&mut r, path)?;
    Ok(LinearSvm { weights, biases })
}

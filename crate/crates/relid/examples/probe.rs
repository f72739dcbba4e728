//! Scratch diagnostic: nearest-class-mean accuracy at each backend stage.
//! Usage: probe <work_dir>

use ndarray::{Array1, Array2};
use relid::backend;
use relid::corpus;
use relid::embednet;
use relid::Result;
use std::path::Path;

fn ids_labels(manifest: &Path) -> Result<Vec<(String, usize)>> {
    Ok(corpus::read_manifest(manifest)?
        .into_iter()
        .map(|(p, l)| {
            (
                p.file_stem().unwrap().to_str().unwrap().to_string(),
                l.unwrap(),
            )
        })
        .collect())
}

fn load_split(work: &Path, split: &str) -> Result<(Array2<f64>, Vec<usize>)> {
    let set = embednet::read_checkpoint(&work.join(format!("ivectors_{split}.rnet")))?;
    let ids = ids_labels(&work.join("corpus").join(split).join("manifest.txt"))?;
    let dim = set.tensor(0).ncols();
    let mut m = Array2::zeros((ids.len(), dim));
    let mut labels = Vec::new();
    for (i, (id, l)) in ids.iter().enumerate() {
        m.row_mut(i).assign(&set.get(id)?.row(0));
        labels.push(*l);
    }
    Ok((m, labels))
}

fn nearest_mean_acc(
    train: &Array2<f64>,
    tl: &[usize],
    eval: &Array2<f64>,
    el: &[usize],
    classes: usize,
) -> f64 {
    let dim = train.ncols();
    let mut means = Array2::<f64>::zeros((classes, dim));
    let mut counts = vec![0.0; classes];
    for (i, &l) in tl.iter().enumerate() {
        means.row_mut(l).scaled_add(1.0, &train.row(i));
        counts[l] += 1.0;
    }
    for l in 0..classes {
        means.row_mut(l).mapv_inplace(|v| v / counts[l]);
    }
    let mut correct = 0;
    for (i, &l) in el.iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..classes {
            let d: f64 = eval
                .row(i)
                .iter()
                .zip(means.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == l {
            correct += 1;
        }
    }
    correct as f64 / el.len() as f64
}

fn scatter_ratio(m: &Array2<f64>, labels: &[usize], classes: usize) -> (f64, f64) {
    let dim = m.ncols();
    let global = m.mean_axis(ndarray::Axis(0)).unwrap();
    let mut means = Array2::<f64>::zeros((classes, dim));
    let mut counts = vec![0.0; classes];
    for (i, &l) in labels.iter().enumerate() {
        means.row_mut(l).scaled_add(1.0, &m.row(i));
        counts[l] += 1.0;
    }
    for l in 0..classes {
        means.row_mut(l).mapv_inplace(|v| v / counts[l]);
    }
    let mut within = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        within += (&m.row(i) - &means.row(l)).mapv(|v| v * v).sum();
    }
    let mut between = 0.0;
    for l in 0..classes {
        between += counts[l] * (&means.row(l) - &global).mapv(|v| v * v).sum();
    }
    (between / labels.len() as f64, within / labels.len() as f64)
}

fn lnorm_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = backend::length_normalize(r.view());
        r.assign(&n);
    }
    out
}

fn main() -> Result<()> {
    let work = std::env::args().nth(1).expect("usage: probe <work_dir>");
    let work = Path::new(&work);
    let (train, tl) = load_split(work, "train")?;
    let (eval, el) = load_split(work, "eval")?;
    let classes = tl.iter().max().unwrap() + 1;

    let stage = |name: &str, tr: &Array2<f64>, ev: &Array2<f64>| {
        let acc = nearest_mean_acc(tr, &tl, ev, &el, classes);
        let (b, w) = scatter_ratio(tr, &tl, classes);
        println!("{name:>14}: nearest-mean acc={acc:.3}  between={b:.4} within={w:.4} ratio={:.3}", b / w);
    };

    stage("raw", &train, &eval);
    let wccn = backend::read_transform(&work.join("backend").join("wccn.rltx"))?;
    let (tr_w, ev_w) = (wccn.apply_rows(train.view())?, wccn.apply_rows(eval.view())?);
    stage("wccn", &tr_w, &ev_w);
    let (tr_n, ev_n) = (lnorm_rows(&tr_w), lnorm_rows(&ev_w));
    stage("wccn+lnorm", &tr_n, &ev_n);
    let lda = backend::read_transform(&work.join("backend").join("lda.rltx"))?;
    let (tr_l, ev_l) = (lda.apply_rows(tr_n.view())?, lda.apply_rows(ev_n.view())?);
    stage("wccn+lnorm+lda", &tr_l, &ev_l);

    let svm = backend::read_svm(&work.join("backend").join("svm.rsvm"))?;
    let mut correct = 0;
    let mut train_correct = 0;
    for (i, &l) in el.iter().enumerate() {
        let m = backend::classify(&svm, ev_l.row(i))?;
        if relid::eval::argmax(m.as_slice().unwrap()) == l {
            correct += 1;
        }
    }
    for (i, &l) in tl.iter().enumerate() {
        let m = backend::classify(&svm, tr_l.row(i))?;
        if relid::eval::argmax(m.as_slice().unwrap()) == l {
            train_correct += 1;
        }
    }
    println!(
        "{:>14}: eval acc={:.3} train acc={:.3}",
        "svm",
        correct as f64 / el.len() as f64,
        train_correct as f64 / tl.len() as f64
    );
    let _unused: Array1<f64>;
    Ok(())
}

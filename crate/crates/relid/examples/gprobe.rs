//! Scratch: dump per-block gamma for a work dir (args: workdir).

use ndarray::Array1;
use relid::{backend, bwstats, corpus, io, models, tvm, ubm};
use std::path::Path;

fn main() {
    let wd = std::env::args().nth(1).expect("workdir");
    let wd = Path::new(&wd);
    let gmm = ubm::read_gmm(&wd.join("ubm.rgmm")).unwrap();
    let tv = tvm::read_tvm(&wd.join("tvm.rtvm"), gmm.clone()).unwrap();
    let model = models::load_model(&wd.join("model/entropy_dnn")).unwrap();
    let gamma = bwstats::GammaConfig::for_languages(model.config.num_languages).unwrap();
    println!("h_min={:.4} h_max={:.4}", gamma.h_min, gamma.h_max);

    let utts = corpus::load_corpus(&wd.join("corpus/eval/manifest.txt")).unwrap();
    let mut agg_noisy = Vec::new();
    let mut agg_clean = Vec::new();
    for (ui, utt) in utts.iter().take(12).enumerate() {
        let mut f = utt.features.clone();
        corpus::apply_sad(&mut f, 0.1).unwrap();
        corpus::cmvn(&mut f, 3.0).unwrap();
        let t = f.num_frames();
        let mut hs = Vec::new();
        let mut post_fn = |block: &corpus::FeatureSequence| -> relid::error::Result<Array1<f64>> {
            let stats = bwstats::accumulate_stats(&gmm, block, None)?;
            let iv = tv.extract(&stats)?;
            let pred = models::predict(&model, models::ModelInput::Vector(iv.view()))?;
            let h: f64 = pred
                .posteriors
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum();
            hs.push(h);
            Ok(pred.posteriors)
        };
        let g = bwstats::relevance_weights(&mut post_fn, &f, &gamma).unwrap();
        // per-voiced-frame gammas; mean over first vs second half of frames
        let half = g.len() / 2;
        let m1 = g[..half].iter().sum::<f64>() / half as f64;
        let m2 = g[half..].iter().sum::<f64>() / (g.len() - half) as f64;
        agg_noisy.push(m1);
        agg_clean.push(m2);
        if ui < 6 {
            println!(
                "utt {ui} t={t} label={:?} gamma_noisyhalf={m1:.3} gamma_cleanhalf={m2:.3} H={:?}",
                utt.language,
                hs.iter().map(|h| (h * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
    let n = agg_noisy.len() as f64;
    println!(
        "mean gamma noisy-half={:.3} clean-half={:.3}",
        agg_noisy.iter().sum::<f64>() / n,
        agg_clean.iter().sum::<f64>() / n
    );
    let _ = io::fnv1a64(b"keep-io-import");
    let _ = backend::length_normalize(Array1::<f64>::ones(4).view());
}

//! Scratch: i_blstm train/eval accuracy split (args: workdir).

use relid::{corpus, models, tvm, ubm};
use std::path::Path;

fn main() {
    let wd = std::env::args().nth(1).expect("workdir");
    let wd = Path::new(&wd);
    let gmm = ubm::read_gmm(&wd.join("ubm.rgmm")).unwrap();
    let tv = tvm::read_tvm(&wd.join("tvm.rtvm"), gmm).unwrap();
    let model = models::load_model(&wd.join("model/i_blstm")).unwrap();
    for split in ["train", "eval"] {
        let utts = corpus::load_corpus(&wd.join(format!("corpus/{split}/manifest.txt"))).unwrap();
        let mut right = 0usize;
        let mut total = 0usize;
        let mut conf_sum = 0.0f64;
        for utt in &utts {
            let mut f = utt.features.clone();
            corpus::apply_sad(&mut f, 0.1).unwrap();
            corpus::cmvn(&mut f, 3.0).unwrap();
            let emb = tv.segment_ivectors(&f, tvm::SEGMENT_WINDOW, tvm::SEGMENT_HOP).unwrap();
            let pred =
                models::predict(&model, models::ModelInput::Embeddings(emb.view())).unwrap();
            let arg = pred
                .posteriors
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            conf_sum += pred.posteriors[arg];
            if Some(arg) == utt.language {
                right += 1;
            }
            total += 1;
        }
        println!(
            "{split}: accuracy {right}/{total} = {:.4}, mean top posterior {:.3}",
            right as f64 / total as f64,
            conf_sum / total as f64
        );
    }
}

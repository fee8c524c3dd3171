//! Verification metrics: EER and AUC from genuine/impostor scores, and the
//! per-subject one-vs-rest report built from windowed score vectors.
//!
//! `cargo run --release --example roc_metrics`

use pulseid::eval::{per_subject_eval, roc_eer_auc, scores_csv, ScoreRow};

fn main() -> pulseid::Result<()> {
    let r = roc_eer_auc(&[0.9, 0.2], &[0.8, 0.1])?;
    println!("pos [0.9, 0.2] / neg [0.8, 0.1]: EER {:.2} AUC {:.2}", r.eer, r.auc);

    let row = |s: usize, i: usize, scores: Vec<f64>| ScoreRow { true_subject: s, window_idx: i, session: "s1".into(), scores };
    let rows = vec![
        row(0, 0, vec![0.7, 0.2, 0.1]),
        row(0, 1, vec![0.5, 0.4, 0.1]),
        row(1, 0, vec![0.3, 0.6, 0.1]),
        row(1, 1, vec![0.45, 0.35, 0.2]),
        row(2, 0, vec![0.1, 0.2, 0.7]),
    ];
    let rep = per_subject_eval(&rows)?;
    for m in &rep.per_subject {
        println!("subject {} EER {:.3} AUC {:.3}", m.subject, m.eer, m.auc);
    }
    println!("mean EER {:.3} AUC {:.3}\n{}", rep.mean_eer, rep.mean_auc, scores_csv(&rows));
    Ok(())
}

//! Frame accuracy, phase-level precision/recall/Jaccard, and the relaxed
//! boundary protocol that forgives transition jitter within ten seconds.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use sprmamba::metrics::{aggregate, evaluate_video, Protocol};

fn main() {
    // Hand fixture: one frame mispredicted across a phase boundary.
    let gt = vec![0usize, 0, 1, 1];
    let pred = vec![0usize, 1, 1, 1];
    let report = evaluate_video("fixture", &pred, &gt, 2, Protocol::Standard, 1.0, 10.0).unwrap();
    println!("hand fixture: accuracy {:.2}%, averaged jaccard {:.2}%", report.accuracy, report.jaccard);
    for (phase, scores) in report.per_phase.iter().enumerate() {
        if let Some(s) = scores {
            println!(
                "  phase {phase}: precision {:.2}  recall {:.2}  jaccard {:.2}",
                s.precision, s.recall, s.jaccard
            );
        }
    }

    // A prediction that transitions 8 frames late is perfect under the
    // relaxed protocol (10-second window at 1 fps) but not under standard.
    let gt: Vec<usize> = (0..60).map(|t| usize::from(t >= 30)).collect();
    let late: Vec<usize> = (0..60).map(|t| usize::from(t >= 38)).collect();
    let std = evaluate_video("late", &late, &gt, 2, Protocol::Standard, 1.0, 10.0).unwrap();
    let rel = evaluate_video("late", &late, &gt, 2, Protocol::Relaxed, 1.0, 10.0).unwrap();
    println!("\nboundary 8 frames late: standard {:.2}%, relaxed {:.2}%", std.accuracy, rel.accuracy);

    // Aggregation over videos reports mean and population std per metric.
    let reports = vec![
        evaluate_video("a", &late, &gt, 2, Protocol::Standard, 1.0, 10.0).unwrap(),
        evaluate_video("b", &gt, &gt, 2, Protocol::Standard, 1.0, 10.0).unwrap(),
    ];
    let agg = aggregate(&reports).unwrap();
    println!("\n{}", agg.to_text());
    println!("csv form:\n{}", agg.to_csv());
}

//! Frame accuracy, phase-level precision/recall/Jaccard, the relaxed
//! boundary protocol, and aggregation over videos.
//!
//! Phase-level scores are computed per phase and averaged over the phases
//! that occur in the ground truth or the prediction; phases absent from both
//! are skipped. A phase present in the ground truth but never predicted
//! scores zero and stays in the average.
//!
//! The relaxed protocol forgives transition jitter: within `window_seconds *
//! fps` frames after a ground-truth boundary, predictions equal to the
//! preceding phase count as correct, and within the same span before the
//! boundary predictions equal to the following phase count as correct.
//! Forgiven frames are rewritten to the ground truth label and the standard
//! metrics are computed on the corrected stream.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Standard,
    Relaxed,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Standard => "standard",
            Protocol::Relaxed => "relaxed",
        })
    }
}

/// Percent precision/recall/Jaccard of one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseScores {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Scores of one video under one protocol.
#[derive(Clone, Debug)]
pub struct VideoReport {
    pub video_id: String,
    pub protocol: Protocol,
    pub accuracy: f64,
    /// Indexed by phase id; `None` when the phase is absent from both streams.
    pub per_phase: Vec<Option<PhaseScores>>,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// Mean and population standard deviation of one metric over videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

/// Aggregate over a collection of per-video reports.
#[derive(Clone, Debug)]
pub struct AggregateReport {
    pub protocol: Protocol,
    pub videos: usize,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub jaccard: MeanStd,
}

/// Percentage of frames predicted in their ground-truth phase.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Data("empty label stream".into()));
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / gt.len() as f64)
}

/// Per-phase and phase-averaged precision/recall/Jaccard (percent).
pub fn phase_prf_jaccard(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
) -> Result<(Vec<Option<PhaseScores>>, f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} predictions vs {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range [0, {num_classes})"
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let mut per_phase = vec![None; num_classes];
    let (mut sp, mut sr, mut sj, mut included) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..num_classes {
        let present = tp[c] + fp[c] + fn_[c] > 0;
        if !present {
            continue;
        }
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let scores = PhaseScores {
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            jaccard: ratio(tp[c], tp[c] + fp[c] + fn_[c]),
        };
        per_phase[c] = Some(scores);
        sp += scores.precision;
        sr += scores.recall;
        sj += scores.jaccard;
        included += 1;
    }
    let n = included.max(1) as f64;
    Ok((per_phase, sp / n, sr / n, sj / n))
}

/// Ground-truth segments as `(phase, start, end)` half-open ranges.
fn segments(gt: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=gt.len() {
        if t == gt.len() || gt[t] != gt[start] {
            out.push((gt[start], start, t));
            start = t;
        }
    }
    out
}

/// Applies the boundary-forgiveness rule and returns the corrected
/// prediction stream.
pub fn relax_predictions(pred: &[usize], gt: &[usize], fps: f64, window_seconds: f64) -> Vec<usize> {
    let mut corrected = pred.to_vec();
    if gt.is_empty() {
        return corrected;
    }
    let window = (window_seconds * fps).round() as usize;
    let segs = segments(gt);
    for pair in segs.windows(2) {
        let (prev_phase, prev_start, boundary) = pair[0];
        let (next_phase, _, next_end) = pair[1];
        // Late transition: the first frames of the next segment may still be
        // predicted as the previous phase.
        for t in boundary..(boundary + window).min(next_end) {
            if pred[t] == prev_phase {
                corrected[t] = gt[t];
            }
        }
        // Early transition: the last frames of the previous segment may
        // already be predicted as the next phase.
        for t in boundary.saturating_sub(window).max(prev_start)..boundary {
            if pred[t] == next_phase {
                corrected[t] = gt[t];
            }
        }
    }
    corrected
}

/// Evaluates one video under the chosen protocol.
pub fn evaluate_video(
    video_id: &str,
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    protocol: Protocol,
    fps: f64,
    window_seconds: f64,
) -> Result<VideoReport> {
    let corrected;
    let eval_pred: &[usize] = match protocol {
        Protocol::Standard => pred,
        Protocol::Relaxed => {
            if !(fps > 0.0) {
                return Err(Error::Data(format!("fps must be positive, got {fps}")));
            }
            corrected = relax_predictions(pred, gt, fps, window_seconds);
            &corrected
        }
    };
    let accuracy = frame_accuracy(eval_pred, gt)?;
    let (per_phase, precision, recall, jaccard) = phase_prf_jaccard(eval_pred, gt, num_classes)?;
    Ok(VideoReport {
        video_id: video_id.to_string(),
        protocol,
        accuracy,
        per_phase,
        precision,
        recall,
        jaccard,
    })
}

/// Mean and population standard deviation per metric over videos.
pub fn aggregate(reports: &[VideoReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Usage("aggregate over zero videos".into()));
    }
    let protocol = reports[0].protocol;
    let stat = |get: &dyn Fn(&VideoReport) -> f64| {
        let n = reports.len() as f64;
        let mean = reports.iter().map(|r| get(r)).sum::<f64>() / n;
        let var = reports.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    };
    Ok(AggregateReport {
        protocol,
        videos: reports.len(),
        accuracy: stat(&|r| r.accuracy),
        precision: stat(&|r| r.precision),
        recall: stat(&|r| r.recall),
        jaccard: stat(&|r| r.jaccard),
    })
}

impl AggregateReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "protocol: {}   videos: {}\n",
            self.protocol, self.videos
        ));
        out.push_str(&format!("{:<12}{:>10}{:>10}\n", "metric", "mean", "std"));
        for (name, m) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("jaccard", self.jaccard),
        ] {
            out.push_str(&format!("{name:<12}{:>10.2}{:>10.2}\n", m.mean, m.std));
        }
        out
    }

    /// Machine-readable form: `metric,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        for (name, m) in [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("jaccard", self.jaccard),
        ] {
            out.push_str(&format!("{name},{:.4},{:.4}\n", m.mean, m.std));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_basics() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 75.0);
        assert_eq!(frame_accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(matches!(
            frame_accuracy(&[0], &[0, 1]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn prf_jaccard_hand_fixture() {
        let (per, p, r, j) = phase_prf_jaccard(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        let p0 = per[0].unwrap();
        assert!((p0.precision - 100.0).abs() < 1e-9);
        assert!((p0.recall - 50.0).abs() < 1e-9);
        assert!((p0.jaccard - 50.0).abs() < 1e-9);
        let p1 = per[1].unwrap();
        assert!((p1.precision - 200.0 / 3.0).abs() < 1e-9);
        assert!((p1.recall - 100.0).abs() < 1e-9);
        assert!((p1.jaccard - 200.0 / 3.0).abs() < 1e-9);
        assert!((p - (100.0 + 200.0 / 3.0) / 2.0).abs() < 1e-9);
        assert!((r - 75.0).abs() < 1e-9);
        assert!((j - (50.0 + 200.0 / 3.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_scores_hundred_everywhere() {
        let labels = [0, 0, 2, 2, 1];
        let (_, p, r, j) = phase_prf_jaccard(&labels, &labels, 3).unwrap();
        assert_eq!((p, r, j), (100.0, 100.0, 100.0));
    }

    #[test]
    fn phase_only_in_gt_scores_zero_and_counts() {
        // Phase 1 never predicted: recall 0, jaccard 0, included in average.
        let (per, p, r, j) = phase_prf_jaccard(&[0, 0, 0, 0], &[0, 0, 1, 1], 3).unwrap();
        let p1 = per[1].unwrap();
        assert_eq!(p1.precision, 0.0);
        assert_eq!(p1.recall, 0.0);
        assert_eq!(p1.jaccard, 0.0);
        assert!(per[2].is_none());
        // Phase 0: tp=2, fp=2, fn=0 -> P=50, R=100, J=50; averaged with zeros.
        assert!((p - 25.0).abs() < 1e-9);
        assert!((r - 50.0).abs() < 1e-9);
        assert!((j - 25.0).abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let n = rng.gen_range(1..=60);
            let k = rng.gen_range(2..=6);
            let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

            // Independent oracle: full confusion matrix enumeration.
            let mut m = vec![vec![0usize; k]; k];
            for (&p, &g) in pred.iter().zip(&gt) {
                m[g][p] += 1;
            }
            let (per, ap, ar, aj) = phase_prf_jaccard(&pred, &gt, k).unwrap();
            let (mut sp, mut sr, mut sj, mut cnt) = (0.0, 0.0, 0.0, 0);
            for c in 0..k {
                let tp = m[c][c];
                let fp: usize = (0..k).filter(|&g| g != c).map(|g| m[g][c]).sum();
                let fn_: usize = (0..k).filter(|&p| p != c).map(|p| m[c][p]).sum();
                if tp + fp + fn_ == 0 {
                    assert!(per[c].is_none());
                    continue;
                }
                let div = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
                let s = per[c].unwrap();
                assert_eq!(s.precision, div(tp, tp + fp));
                assert_eq!(s.recall, div(tp, tp + fn_));
                assert_eq!(s.jaccard, div(tp, tp + fp + fn_));
                sp += s.precision;
                sr += s.recall;
                sj += s.jaccard;
                cnt += 1;
            }
            assert_eq!(ap, sp / cnt as f64);
            assert_eq!(ar, sr / cnt as f64);
            assert_eq!(aj, sj / cnt as f64);
        }
    }

    #[test]
    fn invariant_under_consistent_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 5;
        let gt: Vec<usize> = (0..80).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..80).map(|_| rng.gen_range(0..k)).collect();
        let perm = [3, 0, 4, 1, 2];
        let gt2: Vec<usize> = gt.iter().map(|&v| perm[v]).collect();
        let pred2: Vec<usize> = pred.iter().map(|&v| perm[v]).collect();
        let (_, p1, r1, j1) = phase_prf_jaccard(&pred, &gt, k).unwrap();
        let (_, p2, r2, j2) = phase_prf_jaccard(&pred2, &gt2, k).unwrap();
        assert!((p1 - p2).abs() < 1e-12);
        assert!((r1 - r2).abs() < 1e-12);
        assert!((j1 - j2).abs() < 1e-12);
        assert_eq!(
            frame_accuracy(&pred, &gt).unwrap(),
            frame_accuracy(&pred2, &gt2).unwrap()
        );
    }

    fn shifted_boundary(shift: usize) -> (Vec<usize>, Vec<usize>) {
        // gt: 30 frames of phase 0, then 30 of phase 1. pred transitions late.
        let gt: Vec<usize> = (0..60).map(|t| usize::from(t >= 30)).collect();
        let pred: Vec<usize> = (0..60).map(|t| usize::from(t >= 30 + shift)).collect();
        (pred, gt)
    }

    #[test]
    fn relaxed_forgives_small_boundary_shift() {
        let (pred, gt) = shifted_boundary(8);
        assert!(frame_accuracy(&pred, &gt).unwrap() < 100.0);
        let r = evaluate_video("v", &pred, &gt, 2, Protocol::Relaxed, 1.0, 10.0).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.jaccard, 100.0);
    }

    #[test]
    fn relaxed_window_is_bounded() {
        let (pred, gt) = shifted_boundary(15);
        let r = evaluate_video("v", &pred, &gt, 2, Protocol::Relaxed, 1.0, 10.0).unwrap();
        // 10 of the 15 late frames forgiven; 5 remain wrong.
        assert!((r.accuracy - 100.0 * 55.0 / 60.0).abs() < 1e-9);
    }

    #[test]
    fn relaxed_forgives_early_transition() {
        let gt: Vec<usize> = (0..40).map(|t| usize::from(t >= 20)).collect();
        let pred: Vec<usize> = (0..40).map(|t| usize::from(t >= 14)).collect();
        let r = evaluate_video("v", &pred, &gt, 2, Protocol::Relaxed, 1.0, 10.0).unwrap();
        assert_eq!(r.accuracy, 100.0);
    }

    #[test]
    fn relaxed_equals_standard_on_perfect_prediction() {
        let gt = vec![0, 0, 1, 1, 2, 2];
        let std = evaluate_video("v", &gt, &gt, 3, Protocol::Standard, 1.0, 10.0).unwrap();
        let rel = evaluate_video("v", &gt, &gt, 3, Protocol::Relaxed, 1.0, 10.0).unwrap();
        assert_eq!(std.accuracy, 100.0);
        assert_eq!(rel.accuracy, 100.0);
    }

    #[test]
    fn relaxed_never_below_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..=120);
            let k = rng.gen_range(2..=5);
            // Segment-structured ground truth, noisy predictions.
            let mut gt = Vec::with_capacity(n);
            let mut phase = 0usize;
            while gt.len() < n {
                let run = rng.gen_range(1..=20).min(n - gt.len());
                gt.extend(std::iter::repeat(phase).take(run));
                phase = rng.gen_range(0..k);
            }
            let pred: Vec<usize> = gt
                .iter()
                .map(|&g| if rng.gen::<f64>() < 0.3 { rng.gen_range(0..k) } else { g })
                .collect();
            let s = evaluate_video("v", &pred, &gt, k, Protocol::Standard, 1.0, 10.0).unwrap();
            let r = evaluate_video("v", &pred, &gt, k, Protocol::Relaxed, 1.0, 10.0).unwrap();
            assert!(r.accuracy >= s.accuracy - 1e-12);
            assert!(r.precision >= s.precision - 1e-12);
            assert!(r.recall >= s.recall - 1e-12);
            assert!(r.jaccard >= s.jaccard - 1e-12);
        }
    }

    #[test]
    fn window_scales_with_fps() {
        // At 2 fps the 10-second window spans 20 frames.
        let gt: Vec<usize> = (0..80).map(|t| usize::from(t >= 40)).collect();
        let pred: Vec<usize> = (0..80).map(|t| usize::from(t >= 55)).collect();
        let r1 = evaluate_video("v", &pred, &gt, 2, Protocol::Relaxed, 1.0, 10.0).unwrap();
        let r2 = evaluate_video("v", &pred, &gt, 2, Protocol::Relaxed, 2.0, 10.0).unwrap();
        assert!(r1.accuracy < 100.0);
        assert_eq!(r2.accuracy, 100.0);
    }

    fn report(acc: f64) -> VideoReport {
        VideoReport {
            video_id: "v".into(),
            protocol: Protocol::Standard,
            accuracy: acc,
            per_phase: vec![],
            precision: acc,
            recall: acc,
            jaccard: acc,
        }
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let one = aggregate(&[report(90.0)]).unwrap();
        assert_eq!(one.accuracy, MeanStd { mean: 90.0, std: 0.0 });

        let two = aggregate(&[report(80.0), report(90.0)]).unwrap();
        assert_eq!(two.accuracy, MeanStd { mean: 85.0, std: 5.0 });

        let swapped = aggregate(&[report(90.0), report(80.0)]).unwrap();
        assert_eq!(swapped.accuracy.mean, two.accuracy.mean);
        assert_eq!(swapped.accuracy.std, two.accuracy.std);
    }

    #[test]
    fn report_text_and_csv_forms() {
        let agg = aggregate(&[report(80.0), report(90.0)]).unwrap();
        let text = agg.to_text();
        assert!(text.contains("accuracy") && text.contains("85.00"));
        let csv = agg.to_csv();
        assert!(csv.starts_with("metric,mean,std\n"));
        assert!(csv.contains("accuracy,85.0000,5.0000"));
    }
}

//! Seeded synthetic workflow generator.
//!
//! Emits label sequences by traversing an ordered phase grammar with
//! per-phase skip and revisit probabilities, heavy-tailed (log-normal)
//! segment durations, and features built as phase cluster centers plus a
//! mean-reverting within-phase random walk plus observation noise. Cluster
//! separation and walk scale tune how hard frame-wise classification is.

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Grammar entry for one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpec {
    /// Relative duration weight (normalized across phases).
    pub weight: f64,
    /// Probability the phase is skipped entirely in a sequence.
    pub skip_prob: f64,
    /// Probability that an earlier phase is revisited right after this one.
    pub revisit_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub phases: Vec<PhaseSpec>,
    /// Log-normal dispersion of segment durations.
    pub duration_sigma: f64,
    pub feature_dim: usize,
    /// Exact total frames per sequence.
    pub seq_len: usize,
    /// Distance scale between phase cluster centers.
    pub inter_phase_separation: f64,
    /// Stationary scale of the within-phase random walk.
    pub intra_phase_drift: f64,
    /// Per-frame observation noise.
    pub observation_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Duration weights mirror a strongly imbalanced workflow where one
        // central phase dominates the timeline.
        let weights = [6.0, 4.0, 2.0, 4.0, 6.0, 20.0, 5.0, 2.0];
        SynthConfig {
            num_classes: 8,
            phases: weights
                .iter()
                .map(|&w| PhaseSpec {
                    weight: w,
                    skip_prob: 0.05,
                    revisit_prob: 0.05,
                })
                .collect(),
            duration_sigma: 0.4,
            feature_dim: 32,
            seq_len: 512,
            inter_phase_separation: 3.0,
            intra_phase_drift: 1.0,
            observation_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.phases.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} phase specs for {} classes",
                self.phases.len(),
                self.num_classes
            )));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.skip_prob) || !(0.0..=1.0).contains(&p.revisit_prob) {
                return Err(Error::Config(format!("phase {i}: probabilities must be in [0, 1]")));
            }
            if p.weight < 0.0 {
                return Err(Error::Config(format!("phase {i}: negative duration weight")));
            }
        }
        if self.phases.iter().all(|p| p.skip_prob >= 1.0) {
            return Err(Error::Config("every phase has skip probability 1".into()));
        }
        if self.feature_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("feature_dim and seq_len must be >= 1".into()));
        }
        if self.duration_sigma < 0.0 {
            return Err(Error::Config("duration_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Phase cluster centers, deterministic in the seed alone.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = self.inter_phase_separation / (self.feature_dim as f64).sqrt();
        (0..self.num_classes)
            .map(|_| (0..self.feature_dim).map(|_| gaussian(&mut rng) * scale).collect())
            .collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; both uniforms drawn unconditionally to keep the stream
    // consumption deterministic.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Phase segments of one traversal (phase id per segment, in order).
fn traverse_grammar(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut segments: Vec<usize> = Vec::new();
    let mut visited: Vec<usize> = Vec::new();
    for (p, spec) in cfg.phases.iter().enumerate() {
        if rng.gen::<f64>() < spec.skip_prob {
            continue;
        }
        segments.push(p);
        visited.push(p);
        if visited.len() > 1 && rng.gen::<f64>() < spec.revisit_prob {
            let back = visited[rng.gen_range(0..visited.len() - 1)];
            segments.push(back);
        }
    }
    if segments.is_empty() {
        let fallback = cfg
            .phases
            .iter()
            .position(|p| p.skip_prob < 1.0)
            .expect("validated: not all phases skipped");
        segments.push(fallback);
    }
    segments
}

/// Segment durations summing exactly to `seq_len`.
fn segment_durations(cfg: &SynthConfig, segments: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let sigma = cfg.duration_sigma;
    let raw: Vec<f64> = segments
        .iter()
        .map(|&p| {
            let w = cfg.phases[p].weight.max(1e-9);
            // Mean-preserving log-normal multiplier, clipped at one frame.
            w * (sigma * gaussian(rng) - 0.5 * sigma * sigma).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut durs: Vec<usize> = raw
        .iter()
        .map(|r| ((r / total * cfg.seq_len as f64).round() as usize).max(1))
        .collect();
    // Repair rounding drift on the longest segment.
    loop {
        let sum: usize = durs.iter().sum();
        if sum == cfg.seq_len {
            break;
        }
        let target = durs
            .iter()
            .enumerate()
            .max_by_key(|(_, &d)| d)
            .map(|(i, _)| i)
            .unwrap();
        if sum < cfg.seq_len {
            durs[target] += cfg.seq_len - sum;
        } else {
            let excess = sum - cfg.seq_len;
            let take = excess.min(durs[target] - 1);
            if take == 0 {
                // Every segment is at one frame; drop trailing segments.
                while durs.iter().sum::<usize>() > cfg.seq_len {
                    durs.pop();
                }
                break;
            }
            durs[target] -= take;
        }
    }
    durs
}

/// Generates `count` sequences; byte-identical for identical configs.
pub fn gen_synthetic(cfg: &SynthConfig, count: usize) -> Result<Vec<FeatureSequence>> {
    cfg.validate()?;
    let centers = cfg.centers();
    let rho: f64 = 0.95;
    let walk_step = cfg.intra_phase_drift * (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + i as u64);
        let segments = traverse_grammar(cfg, &mut rng);
        let durs = segment_durations(cfg, &segments, &mut rng);

        let mut labels = Vec::with_capacity(cfg.seq_len);
        let mut features = Vec::with_capacity(cfg.seq_len * cfg.feature_dim);
        let mut walk = vec![0.0; cfg.feature_dim];
        for (&phase, &dur) in segments.iter().zip(&durs) {
            let center = &centers[phase];
            // Re-center the walk at each phase entry.
            for w in walk.iter_mut() {
                *w = 0.0;
            }
            for _ in 0..dur {
                labels.push(phase);
                for dim in 0..cfg.feature_dim {
                    walk[dim] = rho * walk[dim] + walk_step * gaussian(&mut rng);
                    let obs = center[dim] + walk[dim] + cfg.observation_noise * gaussian(&mut rng);
                    // Keep values exactly representable in f32 so file
                    // roundtrips are bit-exact.
                    features.push(obs as f32 as f64);
                }
            }
        }
        out.push(FeatureSequence {
            video_id: format!("synth{i:04}"),
            features: NdArray::new(vec![labels.len(), cfg.feature_dim], features)?,
            labels,
            fps: 1,
        });
    }
    Ok(out)
}

/// Checks that first occurrences of phases respect the grammar order and
/// that any repeat visits an already-seen phase. Used as the order oracle.
pub fn respects_grammar_order(labels: &[usize]) -> bool {
    let mut seen: Vec<usize> = Vec::new();
    let mut prev = usize::MAX;
    for &p in labels {
        if p == prev {
            continue;
        }
        prev = p;
        if let Some(&last_new) = seen.last() {
            if p > last_new {
                // New phase must extend the grammar order.
                seen.push(p);
            } else if !seen.contains(&p) {
                return false;
            }
        } else {
            seen.push(p);
        }
    }
    // First occurrences must be strictly increasing.
    seen.windows(2).all(|w| w[0] < w[1])
}

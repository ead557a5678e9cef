use sprmamba::metrics::{evaluate_video, Protocol};
use sprmamba::model::{argmax_rows, ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{train, TrainConfig};

fn run(stages: usize, seed: u64, noise: f64, lam: f64, epochs: usize) -> (f64, f64, f64) {
    let synth = SynthConfig {
        num_classes: 5,
        phases: (0..5).map(|_| PhaseSpec { weight: 1.0, skip_prob: 0.05, revisit_prob: 0.1 }).collect(),
        duration_sigma: 0.4, feature_dim: 16, seq_len: 160,
        inter_phase_separation: 4.5, intra_phase_drift: 0.8, observation_noise: noise, seed: 100 + seed,
    };
    let data = gen_synthetic(&synth, 17).unwrap();
    let (tr, held) = data.split_at(12);
    let mc = ModelConfig {
        input_dim: 16, stage1_dim: 16, refine_dim: 8, layers_per_stage: 2,
        stages, num_classes: 5, window_size: 4, longrange_stride: 8,
        dropout: 0.1, causal: false, state_dim: 4, lambda_expand: 2,
        conv_mode: ConvMode::Dilated, branch_mode: BranchMode::Full, seed,
    };
    let tc = TrainConfig {
        base_lr: 2e-3, warmup_epochs: 4, total_epochs: epochs,
        target_train_acc: 97.5, smoothing_weight: lam, seed,
        ..TrainConfig::default()
    };
    let (model, hist) = train(tr, None, &mc, &tc).unwrap();
    let (mut acc, mut jac) = (0.0, 0.0);
    for s in held {
        let out = model.forward_eval(&s.features, None).unwrap();
        let pred = argmax_rows(&out.last().unwrap().probs);
        let r = evaluate_video("v", &pred, &s.labels, 5, Protocol::Standard, 1.0, 10.0).unwrap();
        acc += r.accuracy;
        jac += r.jaccard;
    }
    let n = held.len() as f64;
    (acc / n, jac / n, hist.records.last().unwrap().train_acc)
}

fn main() {
    for &(noise, lam, epochs) in &[(1.6f64, 0.02f64, 120usize), (1.2, 0.15, 120)] {
        for stages in [1usize, 4] {
            let (mut a, mut j, mut t) = (0.0, 0.0, 0.0);
            for seed in 0..3 {
                let (ai, ji, ti) = run(stages, seed, noise, lam, epochs);
                a += ai; j += ji; t += ti;
            }
            println!("noise {noise} lam {lam} ep {epochs} S{stages}: held acc {:.2} jac {:.2} (train {:.1})", a / 3.0, j / 3.0, t / 3.0);
        }
    }
}

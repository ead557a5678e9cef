use sprmamba::metrics::{evaluate_video, Protocol};
use sprmamba::model::{argmax_rows, ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{train, TrainConfig};

fn run(conv: ConvMode, seed: u64, sep: f64, noise: f64, w: usize) -> f64 {
    let synth = SynthConfig {
        num_classes: 5,
        phases: (0..5).map(|_| PhaseSpec { weight: 1.0, skip_prob: 0.05, revisit_prob: 0.1 }).collect(),
        duration_sigma: 0.4, feature_dim: 16, seq_len: 192,
        inter_phase_separation: sep, intra_phase_drift: 0.8, observation_noise: noise, seed: 100 + seed,
    };
    let data = gen_synthetic(&synth, 21).unwrap();
    let (tr, held) = data.split_at(16);
    let mc = ModelConfig {
        input_dim: 16, stage1_dim: 16, refine_dim: 8, layers_per_stage: 3,
        stages: 1, num_classes: 5, window_size: w, longrange_stride: 8,
        dropout: 0.1, causal: false, state_dim: 4, lambda_expand: 2,
        conv_mode: conv, branch_mode: BranchMode::Full, seed,
    };
    let tc = TrainConfig { base_lr: 2e-3, warmup_epochs: 4, total_epochs: 40, target_train_acc: 98.0, seed, ..TrainConfig::default() };
    let (model, _) = train(tr, None, &mc, &tc).unwrap();
    let mut acc = 0.0;
    for s in held {
        let out = model.forward_eval(&s.features, None).unwrap();
        let pred = argmax_rows(&out.last().unwrap().probs);
        acc += evaluate_video("v", &pred, &s.labels, 5, Protocol::Standard, 1.0, 10.0).unwrap().accuracy;
    }
    acc / held.len() as f64
}

fn main() {
    for &(sep, noise) in &[(4.5f64, 1.6f64), (4.5, 2.0)] {
        for mode in [ConvMode::Dilated, ConvMode::None] {
            let mut acc = 0.0;
            for seed in 0..5 {
                acc += run(mode, seed, sep, noise, 4);
            }
            println!("sep {sep} noise {noise} {mode:?}: held-out {:.2}", acc / 5.0);
        }
    }
}

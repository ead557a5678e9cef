use sprmamba::model::{ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{train, TrainConfig};

fn main() {
    let synth = SynthConfig {
        num_classes: 5,
        phases: (0..5).map(|_| PhaseSpec { weight: 1.0, skip_prob: 0.05, revisit_prob: 0.1 }).collect(),
        duration_sigma: 0.4,
        feature_dim: 16,
        seq_len: 160,
        inter_phase_separation: 4.5,
        intra_phase_drift: 0.8,
        observation_noise: 1.2,
        seed: 100,
    };
    let data = gen_synthetic(&synth, 12).unwrap();
    let mc = ModelConfig {
        input_dim: 16, stage1_dim: 16, refine_dim: 8, layers_per_stage: 2,
        stages: 4, num_classes: 5, window_size: 4, longrange_stride: 8,
        dropout: 0.1, causal: false, state_dim: 4, lambda_expand: 2,
        conv_mode: ConvMode::Dilated, branch_mode: BranchMode::Full, seed: 0,
    };
    let tc = TrainConfig { base_lr: 2e-3, warmup_epochs: 4, total_epochs: 60, seed: 0, ..TrainConfig::default() };
    let (_, hist) = train(&data, None, &mc, &tc).unwrap();
    for r in hist.records.iter().step_by(6) {
        let sl: Vec<String> = r.stage_losses.iter().map(|v| format!("{v:.3}")).collect();
        println!("epoch {:>3} acc {:>5.1} stage losses [{}]", r.epoch, r.train_acc, sl.join(", "));
    }
}

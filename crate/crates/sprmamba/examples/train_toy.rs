//! Trains a small model on synthetic workflows in-process and prints the
//! learning curve. Takes around half a minute.
//!
//! ```bash
//! cargo run --release --example train_toy
//! ```

use sprmamba::model::{ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{eval_accuracy, train, TrainConfig};

fn main() {
    let synth = SynthConfig {
        num_classes: 5,
        phases: (0..5)
            .map(|_| PhaseSpec {
                weight: 1.0,
                skip_prob: 0.05,
                revisit_prob: 0.05,
            })
            .collect(),
        duration_sigma: 0.3,
        feature_dim: 16,
        seq_len: 256,
        inter_phase_separation: 4.0,
        intra_phase_drift: 1.0,
        observation_noise: 0.5,
        seed: 7,
    };
    let data = gen_synthetic(&synth, 8).unwrap();
    let (train_set, held_out) = data.split_at(6);

    let model_config = ModelConfig {
        input_dim: 16,
        stage1_dim: 16,
        refine_dim: 8,
        layers_per_stage: 2,
        stages: 2,
        num_classes: 5,
        window_size: 16,
        longrange_stride: 16,
        dropout: 0.05,
        causal: false,
        state_dim: 4,
        lambda_expand: 2,
        conv_mode: ConvMode::Dilated,
        branch_mode: BranchMode::Full,
        seed: 0,
    };
    let train_config = TrainConfig {
        base_lr: 3e-3,
        warmup_epochs: 4,
        total_epochs: 30,
        target_train_acc: 99.0,
        ..TrainConfig::default()
    };

    println!("training on {} sequences of {} frames...", train_set.len(), synth.seq_len);
    let (model, history) = train(train_set, None, &model_config, &train_config).unwrap();
    for r in history.records.iter().step_by(5) {
        println!(
            "epoch {:>3}  lr {:.5}  loss {:>7.4}  train acc {:>6.2}%",
            r.epoch, r.lr, r.total_loss, r.train_acc
        );
    }
    let last = history.records.last().unwrap();
    println!(
        "stopped after epoch {} at {:.2}% train accuracy",
        last.epoch, last.train_acc
    );
    let held = eval_accuracy(&model, held_out).unwrap();
    println!("held-out frame accuracy: {held:.2}%");
}

//! End-to-end, file-based: generate data, train, checkpoint, predict, and
//! evaluate — the same path the `sprm` binary drives, here through the
//! library API against a temporary directory.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use sprmamba::checkpoint::{load_checkpoint, save_checkpoint};
use sprmamba::data::{read_features, write_features, write_predictions};
use sprmamba::metrics::{aggregate, evaluate_video, Protocol};
use sprmamba::model::{argmax_rows, ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{train, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("sprm_pipeline_example");
    std::fs::create_dir_all(&dir).unwrap();

    // 1. Generate and store a small synthetic dataset.
    let synth = SynthConfig {
        num_classes: 4,
        phases: (0..4)
            .map(|_| PhaseSpec {
                weight: 1.0,
                skip_prob: 0.0,
                revisit_prob: 0.0,
            })
            .collect(),
        duration_sigma: 0.3,
        feature_dim: 12,
        seq_len: 192,
        inter_phase_separation: 4.0,
        intra_phase_drift: 0.8,
        observation_noise: 0.4,
        seed: 3,
    };
    let seqs = gen_synthetic(&synth, 5).unwrap();
    for seq in &seqs {
        write_features(&dir.join(format!("{}.sprf", seq.video_id)), seq).unwrap();
    }
    println!("wrote {} feature files to {}", seqs.len(), dir.display());

    // 2. Train and checkpoint.
    let model_config = ModelConfig {
        input_dim: 12,
        stage1_dim: 16,
        refine_dim: 8,
        layers_per_stage: 2,
        stages: 2,
        num_classes: 4,
        window_size: 12,
        longrange_stride: 12,
        dropout: 0.0,
        causal: false,
        state_dim: 4,
        lambda_expand: 2,
        conv_mode: ConvMode::Dilated,
        branch_mode: BranchMode::Full,
        seed: 0,
    };
    let train_config = TrainConfig {
        base_lr: 3e-3,
        warmup_epochs: 3,
        total_epochs: 25,
        target_train_acc: 98.0,
        ..TrainConfig::default()
    };
    let (model, history) = train(&seqs, None, &model_config, &train_config).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    println!(
        "trained {} epochs; final train accuracy {:.2}%",
        history.records.len(),
        history.records.last().unwrap().train_acc
    );

    // 3. Reload the checkpoint and predict every sequence.
    let model = load_checkpoint(&ckpt).unwrap();
    let mut reports = Vec::new();
    for seq in &seqs {
        let loaded = read_features(&dir.join(format!("{}.sprf", seq.video_id))).unwrap();
        let outputs = model.forward_eval(&loaded.features, None).unwrap();
        let probs = &outputs.last().unwrap().probs;
        let pred = argmax_rows(probs);
        write_predictions(&dir.join(format!("{}.csv", seq.video_id)), &loaded.labels, &pred, probs).unwrap();
        reports.push(
            evaluate_video(&seq.video_id, &pred, &loaded.labels, 4, Protocol::Standard, 1.0, 10.0)
                .unwrap(),
        );
    }

    // 4. Aggregate metrics over videos.
    let agg = aggregate(&reports).unwrap();
    println!("\n{}", agg.to_text());
}

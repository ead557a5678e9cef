use sprmamba::metrics::{evaluate_video, Protocol};
use sprmamba::model::{argmax_rows, ConvMode, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::{train, TrainConfig};

fn synth_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        num_classes: 5,
        phases: (0..5)
            .map(|_| PhaseSpec { weight: 1.0, skip_prob: 0.05, revisit_prob: 0.1 })
            .collect(),
        duration_sigma: 0.4,
        feature_dim: 16,
        seq_len: 160,
        inter_phase_separation: 4.5,
        intra_phase_drift: 0.8,
        observation_noise: 1.2,
        seed,
    }
}

fn model_cfg(stages: usize, branch: BranchMode, conv: ConvMode, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: 16,
        stage1_dim: 16,
        refine_dim: 8,
        layers_per_stage: 2,
        stages,
        num_classes: 5,
        window_size: 4,
        longrange_stride: 8,
        dropout: 0.1,
        causal: false,
        state_dim: 4,
        lambda_expand: 2,
        conv_mode: conv,
        branch_mode: branch,
        seed,
    }
}

fn run(stages: usize, branch: BranchMode, conv: ConvMode, seed: u64) -> (f64, f64) {
    let data = gen_synthetic(&synth_cfg(100 + seed), 17).unwrap();
    let (tr, held) = data.split_at(12);
    let tc = TrainConfig {
        base_lr: 2e-3,
        warmup_epochs: 4,
        total_epochs: 60,
        target_train_acc: 97.5,
        seed,
        ..TrainConfig::default()
    };
    let (model, _) = train(tr, None, &model_cfg(stages, branch, conv, seed), &tc).unwrap();
    let mut accs = Vec::new();
    let mut jaccs = Vec::new();
    for seq in held {
        let out = model.forward_eval(&seq.features, None).unwrap();
        let pred = argmax_rows(&out.last().unwrap().probs);
        let r = evaluate_video("v", &pred, &seq.labels, 5, Protocol::Standard, 1.0, 10.0).unwrap();
        accs.push(r.accuracy);
        jaccs.push(r.jaccard);
    }
    (
        accs.iter().sum::<f64>() / accs.len() as f64,
        jaccs.iter().sum::<f64>() / jaccs.len() as f64,
    )
}

fn main() {
    let t0 = std::time::Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let mut rows = vec![];
    for &(name, stages, branch, conv) in &[
        ("S4-full", 4usize, BranchMode::Full, ConvMode::Dilated),
        ("S1-full", 1, BranchMode::Full, ConvMode::Dilated),
        ("S1-attn", 1, BranchMode::AttentionOnly, ConvMode::Dilated),
        ("S1-ssm", 1, BranchMode::SsmOnly, ConvMode::Dilated),
        ("S1-noconv", 1, BranchMode::Full, ConvMode::None),
    ] {
        let mut acc_sum = 0.0;
        let mut jac_sum = 0.0;
        for &s in &seeds {
            let (a, j) = run(stages, branch, conv, s);
            acc_sum += a;
            jac_sum += j;
        }
        let (a, j) = (acc_sum / 5.0, jac_sum / 5.0);
        println!("{name:<12} acc {a:6.2}  jaccard {j:6.2}");
        rows.push((name, a, j));
    }
    println!("\n(a) S4 jaccard {:.2} vs S1 {:.2}  -> {}", rows[0].2, rows[1].2, rows[0].2 >= rows[1].2 - 0.5);
    let max_single = rows[2].1.max(rows[3].1);
    println!("(b) full acc {:.2} vs max(single) {:.2} -> {}", rows[1].1, max_single, rows[1].1 >= max_single - 0.5);
    println!("(c) dilated acc {:.2} vs noconv {:.2} -> {}", rows[1].1, rows[4].1, rows[1].1 >= rows[4].1 - 0.5);
    println!("elapsed {:.0} s", t0.elapsed().as_secs_f64());
}

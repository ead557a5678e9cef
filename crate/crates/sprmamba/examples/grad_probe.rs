use sprmamba::graph::Graph;
use sprmamba::layers::Mode;
use sprmamba::model::{ConvMode, Model, ModelConfig};
use sprmamba::srtm::BranchMode;
use sprmamba::synth::{gen_synthetic, PhaseSpec, SynthConfig};
use sprmamba::training::stage_losses;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let synth = SynthConfig {
        num_classes: 5,
        phases: (0..5).map(|_| PhaseSpec { weight: 1.0, skip_prob: 0.0, revisit_prob: 0.0 }).collect(),
        duration_sigma: 0.4, feature_dim: 16, seq_len: 192,
        inter_phase_separation: 8.0, intra_phase_drift: 0.8, observation_noise: 0.3, seed: 100,
    };
    let data = gen_synthetic(&synth, 1).unwrap();
    let seq = &data[0];
    let mc = ModelConfig {
        input_dim: 16, stage1_dim: 16, refine_dim: 8, layers_per_stage: 3,
        stages: 4, num_classes: 5, window_size: 4, longrange_stride: 8,
        dropout: 0.0, causal: false, state_dim: 4, lambda_expand: 2,
        conv_mode: ConvMode::Dilated, branch_mode: BranchMode::Full, seed: 0,
    };
    let model = Model::new(mc).unwrap();
    let mask = vec![true; seq.len()];

    for stages_in_loss in [1usize, 4] {
        let mut g = Graph::new();
        let f = g.constant(seq.features.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = model.forward_graph(&mut g, f, None, Mode::Train, &mut rng).unwrap();
        let parts = stage_losses(&mut g, &all[..stages_in_loss], &seq.labels, &mask, 0.15, 4.0).unwrap();
        let mut loss = parts[0];
        for &p in &parts[1..] { loss = g.add(loss, p).unwrap(); }
        g.backward(loss).unwrap();
        let gp = g.grad(all[0].probs).unwrap();
        let norm: f64 = gp.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("loss over {stages_in_loss} stage(s): |d loss / d probs1| = {norm:.4e}");
    }
}

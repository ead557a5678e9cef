//! Zero-order-hold discretization and the two equivalent ways to run a
//! time-invariant state-space layer: the step-by-step recurrence and the
//! structured convolution kernel.
//!
//! ```bash
//! cargo run --release --example zoh_discretization
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprmamba::ssm::{apply_kernel, discretize_zoh, ssm_conv_kernel, ssm_recurrence, SsmParams};

fn main() {
    // The textbook scalar case: a = -1, delta = ln 2 halves the state each
    // step, so an impulse produces the geometric sequence 1/2, 1/4, 1/8, ...
    let params = SsmParams {
        a: vec![-1.0],
        b: vec![1.0],
        c: vec![1.0],
        delta: 2f64.ln(),
    };
    let disc = discretize_zoh(&params).unwrap();
    println!("scalar system: A_bar = {:.3}, B_bar = {:.3}", disc.a_bar[0], disc.b_bar[0]);
    let mut impulse = vec![0.0; 8];
    impulse[0] = 1.0;
    let response = ssm_recurrence(&disc, &params.c, &impulse);
    println!("impulse response: {response:?}");

    // Recurrence and kernel form agree for any time-invariant system.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 16;
    let l = 256;
    let params = SsmParams {
        a: (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect(),
        b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        delta: 0.1,
    };
    let disc = discretize_zoh(&params).unwrap();
    let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y_rec = ssm_recurrence(&disc, &params.c, &x);
    let kernel = ssm_conv_kernel(&disc, &params.c, l).unwrap();
    let y_conv = apply_kernel(&kernel, &x);
    let max_dev = y_rec
        .iter()
        .zip(&y_conv)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("state dim {n}, {l} frames: max |recurrence - kernel| = {max_dev:.3e}");
    assert!(max_dev < 1e-10);
    println!("the two routes agree");
}

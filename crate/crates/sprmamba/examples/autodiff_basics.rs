//! The autodiff core: build a small graph, run backward, and compare the
//! recorded gradients against central finite differences.
//!
//! ```bash
//! cargo run --release --example autodiff_basics
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sprmamba::graph::Graph;
use sprmamba::tensor::NdArray;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, d, c) = (6, 4, 3);
    let x = NdArray::new(
        vec![l, d],
        (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let w = NdArray::new(
        vec![d, c],
        (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    // loss = sum(gelu(instance_norm(x @ w)))
    let build = |x: &NdArray| {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.constant(w.clone());
        let gamma = g.constant(NdArray::filled(&[c], 1.0));
        let beta = g.constant(NdArray::zeros(&[c]));
        let mm = g.matmul(xn, wn).unwrap();
        let norm = g.instance_norm(mm, gamma, beta, 1e-5, None, false).unwrap();
        let act = g.gelu(norm).unwrap();
        let loss = g.sum_all(act).unwrap();
        (g, xn, loss)
    };

    let (mut g, xn, loss) = build(&x);
    g.backward(loss).unwrap();
    let grad = g.grad(xn).unwrap();
    println!("loss = {:.6}", g.value(loss).data()[0]);

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let (gp, _, lp) = build(&plus);
        let (gm, _, lm) = build(&minus);
        let fd = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * eps);
        let ad = grad.data()[k];
        worst = worst.max((ad - fd).abs() / (1e-8 + fd.abs().max(ad.abs())));
    }
    println!("checked {} coordinates against finite differences", x.numel());
    println!("worst relative error: {worst:.3e}");
    assert!(worst < 1e-4);
    println!("gradients agree");
}

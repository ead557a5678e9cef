//! Embedded invariant suite behind `sprm selfcheck`: discretization closed
//! forms, recurrence/kernel equivalence, sampling roundtrips, gradient spot
//! checks, and metric fixtures. Setting `SPRM_SELFCHECK_CORRUPT=1` injects a
//! kernel corruption to demonstrate that failures are detected.

use crate::graph::Graph;
use crate::layers::Mode;
use crate::metrics::{evaluate_video, frame_accuracy, phase_prf_jaccard, Protocol};
use crate::sampling::{
    longrange_inverse, longrange_reorder, window_merge, window_partition,
};
use crate::srtm::{SrtmBlock, SrtmConfig};
use crate::ssm::{apply_kernel, discretize_zoh, selective_scan_values, ssm_conv_kernel, ssm_recurrence, SsmParams};
use crate::tensor::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: std::result::Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs every embedded check; `corrupt` perturbs the convolution kernel in
/// the equivalence check (the failure-injection hook).
pub fn run_selfcheck(corrupt: bool) -> Vec<CheckResult> {
    vec![
        check("zoh-closed-form", zoh_closed_form()),
        check("recurrence-vs-kernel", recurrence_vs_kernel(corrupt)),
        check("selective-scan-lti", selective_scan_lti()),
        check("sampling-roundtrips", sampling_roundtrips()),
        check("gradient-spot-checks", gradient_spot_checks()),
        check("srtm-gradient", srtm_gradient()),
        check("metrics-fixture", metrics_fixture()),
    ]
}

fn zoh_closed_form() -> std::result::Result<String, String> {
    let d = discretize_zoh(&SsmParams {
        a: vec![-1.0],
        b: vec![1.0],
        c: vec![1.0],
        delta: 2f64.ln(),
    })
    .map_err(|e| e.to_string())?;
    let err = (d.a_bar[0] - 0.5).abs().max((d.b_bar[0] - 0.5).abs());
    if err < 1e-12 {
        Ok(format!("max err {err:.2e}"))
    } else {
        Err(format!("expected (0.5, 0.5), got ({}, {})", d.a_bar[0], d.b_bar[0]))
    }
}

fn recurrence_vs_kernel(corrupt: bool) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let n = [1, 4, 16][i % 3];
        let l = 64;
        let p = SsmParams {
            a: (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            delta: rng.gen_range(0.01..1.0),
        };
        let d = discretize_zoh(&p).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y_rec = ssm_recurrence(&d, &p.c, &x);
        let mut kernel = ssm_conv_kernel(&d, &p.c, l).map_err(|e| e.to_string())?;
        if corrupt {
            kernel[0] += 0.01;
        }
        let y_conv = apply_kernel(&kernel, &x);
        for (a, b) in y_rec.iter().zip(&y_conv) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-5 {
        Ok(format!("20 systems, max abs dev {worst:.2e}"))
    } else {
        Err(format!("max abs dev {worst:.2e} exceeds 1e-5"))
    }
}

fn selective_scan_lti() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = 8;
        let l = 48;
        let p = SsmParams {
            a: (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            delta: rng.gen_range(0.01..0.5),
        };
        let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = discretize_zoh(&p).map_err(|e| e.to_string())?;
        let y_lti = ssm_recurrence(&d, &p.c, &x);
        let delta_seq = vec![p.delta; l];
        let mut b_seq = vec![0.0; l * n];
        let mut c_seq = vec![0.0; l * n];
        for t in 0..l {
            b_seq[t * n..(t + 1) * n].copy_from_slice(&p.b);
            c_seq[t * n..(t + 1) * n].copy_from_slice(&p.c);
        }
        let y = selective_scan_values(&x, &delta_seq, &b_seq, &c_seq, &p.a, l, 1, n);
        for (a, b) in y.iter().zip(&y_lti) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    if worst <= 1e-6 {
        Ok(format!("10 systems, max rel dev {worst:.2e}"))
    } else {
        Err(format!("max rel dev {worst:.2e} exceeds 1e-6"))
    }
}

fn sampling_roundtrips() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let l = rng.gen_range(1..=300);
        let w = rng.gen_range(1..=48);
        let g = rng.gen_range(1..=48);
        let f = NdArray::new(
            vec![l, 3],
            (0..l * 3).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let (wins, wmasks) = window_partition(&f, w).map_err(|e| e.to_string())?;
        if window_merge(&wins, &wmasks).map_err(|e| e.to_string())? != f {
            return Err(format!("window roundtrip failed at L={l} W={w}"));
        }
        let (subs, smasks) = longrange_reorder(&f, g).map_err(|e| e.to_string())?;
        if longrange_inverse(&subs, &smasks).map_err(|e| e.to_string())? != f {
            return Err(format!("long-range roundtrip failed at L={l} G={g}"));
        }
    }
    Ok("50 random shapes, exact".into())
}

fn gradient_spot_checks() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (l, d, c) = (5, 4, 3);
    let x = NdArray::new(vec![l, d], (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = NdArray::new(vec![d, c], (0..d * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let loss_weights =
        NdArray::new(vec![l, c], (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

    let eval = |x: &NdArray, want_grad: bool| -> (f64, Option<NdArray>) {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.constant(w.clone());
        let gamma = g.constant(NdArray::filled(&[c], 1.0));
        let beta = g.constant(NdArray::zeros(&[c]));
        let mm = g.matmul(xn, wn).unwrap();
        let norm = g.instance_norm(mm, gamma, beta, 1e-5, None, false).unwrap();
        let act = g.gelu(norm).unwrap();
        let wl = g.mul_const(act, &loss_weights).unwrap();
        let loss = g.sum_all(wl).unwrap();
        if want_grad {
            g.backward(loss).unwrap();
            (g.value(loss).data()[0], g.grad(xn))
        } else {
            (g.value(loss).data()[0], None)
        }
    };
    let (_, grad) = eval(&x, true);
    let grad = grad.ok_or("no gradient produced")?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
        let ad = grad.data()[k];
        worst = worst.max((ad - fd).abs() / (1e-8 + fd.abs().max(ad.abs())));
    }
    if worst <= 1e-4 {
        Ok(format!("composite graph, max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} exceeds 1e-4"))
    }
}

fn srtm_gradient() -> std::result::Result<String, String> {
    let mut store = crate::graph::ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut cfg = SrtmConfig::new(8, 4);
    cfg.dropout = 0.0;
    let block = SrtmBlock::new(&mut store, &mut rng, "check", cfg).map_err(|e| e.to_string())?;
    let l = 6;
    let x = NdArray::new(vec![l, 8], (0..l * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let weights =
        NdArray::new(vec![l, 8], (0..l * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mask = vec![true; l];
    let eval = |x: &NdArray, want_grad: bool| -> (f64, Option<NdArray>) {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let y = block.forward(&mut g, &store, xn, None, &mask, &[(0, mask.len())], Mode::Eval, &mut r).unwrap();
        let wl = g.mul_const(y, &weights).unwrap();
        let loss = g.sum_all(wl).unwrap();
        if want_grad {
            g.backward(loss).unwrap();
            (g.value(loss).data()[0], g.grad(xn))
        } else {
            (g.value(loss).data()[0], None)
        }
    };
    let (_, grad) = eval(&x, true);
    let grad = grad.ok_or("no gradient produced")?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in (0..x.numel()).step_by(5) {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
        let ad = grad.data()[k];
        worst = worst.max((ad - fd).abs() / (1e-8 + fd.abs().max(ad.abs())));
    }
    if worst <= 1e-3 {
        Ok(format!("hybrid block, max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} exceeds 1e-3"))
    }
}

fn metrics_fixture() -> std::result::Result<String, String> {
    let acc = frame_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    if (acc - 75.0).abs() > 1e-9 {
        return Err(format!("fixture accuracy {acc}, expected 75"));
    }
    let (_, _, _, j) = phase_prf_jaccard(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).map_err(|e| e.to_string())?;
    if (j - (50.0 + 200.0 / 3.0) / 2.0).abs() > 1e-9 {
        return Err(format!("fixture jaccard {j:.4}, expected 58.3333"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..50 {
        let n = rng.gen_range(2..=80);
        let k = rng.gen_range(2..=5);
        let mut gt = Vec::with_capacity(n);
        let mut phase = 0usize;
        while gt.len() < n {
            let run = rng.gen_range(1..=15).min(n - gt.len());
            gt.extend(std::iter::repeat(phase).take(run));
            phase = rng.gen_range(0..k);
        }
        let pred: Vec<usize> = gt
            .iter()
            .map(|&g| if rng.gen::<f64>() < 0.3 { rng.gen_range(0..k) } else { g })
            .collect();
        let s = evaluate_video("v", &pred, &gt, k, Protocol::Standard, 1.0, 10.0)
            .map_err(|e| e.to_string())?;
        let r = evaluate_video("v", &pred, &gt, k, Protocol::Relaxed, 1.0, 10.0)
            .map_err(|e| e.to_string())?;
        if r.accuracy < s.accuracy - 1e-12 {
            return Err(format!("relaxed {} below standard {}", r.accuracy, s.accuracy));
        }
    }
    Ok("hand fixture and 50 relaxed>=standard pairs".into())
}

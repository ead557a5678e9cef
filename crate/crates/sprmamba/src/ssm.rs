//! State-space sequence layer: zero-order-hold discretization, the discrete
//! recurrence, its convolution-kernel form, and the input-dependent
//! (selective) scan used inside the TranMamba block.
//!
//! The diagonal continuous system per channel is
//!   h'(t) = A h(t) + B x(t),   y(t) = C h(t)
//! discretized with step delta into
//!   A_bar = exp(delta A),   B_bar = (delta A)^-1 (exp(delta A) - I) delta B
//! evaluated entrywise as ((e^{delta a} - 1) / a) * B, with the series limit
//! delta * B when |delta a| < 1e-8 to avoid cancellation.

use crate::error::{Error, Result};

/// Threshold below which the B_bar expression switches to its Taylor limit.
pub const SERIES_LIMIT: f64 = 1e-8;

/// Continuous-time parameters of one diagonal SSM channel.
///
/// `a` holds the (strictly negative) diagonal of the evolution matrix.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: f64,
}

/// Discrete-time parameters produced by [`discretize_zoh`].
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// Zero-order-hold discretization of a diagonal system.
pub fn discretize_zoh(params: &SsmParams) -> Result<DiscreteSsm> {
    if !(params.delta > 0.0) {
        return Err(Error::Domain(format!(
            "zoh discretization requires delta > 0, got {}",
            params.delta
        )));
    }
    if params.a.len() != params.b.len() {
        return Err(Error::Dimension(format!(
            "state dims disagree: a has {}, b has {}",
            params.a.len(),
            params.b.len()
        )));
    }
    let mut a_bar = Vec::with_capacity(params.a.len());
    let mut b_bar = Vec::with_capacity(params.a.len());
    for (&a, &b) in params.a.iter().zip(&params.b) {
        let (ab, bb) = zoh_entry(a, b, params.delta);
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

#[inline]
fn zoh_entry(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let s = delta * a;
    let a_bar = s.exp();
    let b_bar = if s.abs() < SERIES_LIMIT {
        delta * b
    } else {
        (a_bar - 1.0) / a * b
    };
    (a_bar, b_bar)
}

/// Runs h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t left to right with h_0 = 0.
pub fn ssm_recurrence(disc: &DiscreteSsm, c: &[f64], x: &[f64]) -> Vec<f64> {
    let n = disc.a_bar.len();
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        let mut acc = 0.0;
        for i in 0..n {
            h[i] = disc.a_bar[i] * h[i] + disc.b_bar[i] * xt;
            acc += c[i] * h[i];
        }
        y.push(acc);
    }
    y
}

/// Structured convolution kernel (C B_bar, C A_bar B_bar, ..., C A_bar^{M-1} B_bar).
///
/// Valid for time-invariant parameters only; used as the equivalence oracle
/// for the recurrence.
pub fn ssm_conv_kernel(disc: &DiscreteSsm, c: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::Usage("kernel length must be >= 1".into()));
    }
    let n = disc.a_bar.len();
    let mut pow = disc.b_bar.clone();
    let mut kernel = Vec::with_capacity(m);
    for j in 0..m {
        if j > 0 {
            for i in 0..n {
                pow[i] *= disc.a_bar[i];
            }
        }
        kernel.push(c.iter().zip(&pow).map(|(&ci, &pi)| ci * pi).sum());
    }
    Ok(kernel)
}

/// Causal convolution y_t = sum_{j<=t} kernel_j x_{t-j}.
pub fn apply_kernel(kernel: &[f64], x: &[f64]) -> Vec<f64> {
    let l = x.len();
    let mut y = vec![0.0; l];
    for (t, yt) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &kj) in kernel.iter().enumerate().take(t + 1) {
            acc += kj * x[t - j];
        }
        *yt = acc;
    }
    y
}

// ── selective scan kernels ──────────────────────────────────────────────
//
// Layouts: u, delta are [L x C] time-major; b, c are [L x N]; a is [C x N].
// The cache stores per-channel state and A_bar histories as [C][L][N].

#[derive(Debug)]
pub struct ScanCache {
    pub(crate) h: Vec<f64>,
    pub(crate) abar: Vec<f64>,
}

pub(crate) struct ScanGrads {
    pub du: Vec<f64>,
    pub ddelta: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    pub da: Vec<f64>,
}

/// Forward scan. `spans` lists independent `[start, end)` row ranges; the
/// state resets to zero at each span start.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    l: usize,
    ch: usize,
    n: usize,
    spans: &[(usize, usize)],
) -> (Vec<f64>, ScanCache) {
    let mut y = vec![0.0; l * ch];
    let mut h_hist = vec![0.0; ch * l * n];
    let mut abar_hist = vec![0.0; ch * l * n];
    let mut h = vec![0.0; n];
    for ci in 0..ch {
        let arow = &a[ci * n..(ci + 1) * n];
        for &(start, end) in spans {
            h.iter_mut().for_each(|v| *v = 0.0);
            for t in start..end {
                let dt = delta[t * ch + ci];
                let ut = u[t * ch + ci];
                let brow = &b[t * n..(t + 1) * n];
                let crow = &c[t * n..(t + 1) * n];
                let base = (ci * l + t) * n;
                let mut acc = 0.0;
                for ni in 0..n {
                    let s = dt * arow[ni];
                    let ab = s.exp();
                    let g = if s.abs() < SERIES_LIMIT {
                        dt
                    } else {
                        (ab - 1.0) / arow[ni]
                    };
                    let hv = ab * h[ni] + g * brow[ni] * ut;
                    h[ni] = hv;
                    h_hist[base + ni] = hv;
                    abar_hist[base + ni] = ab;
                    acc += crow[ni] * hv;
                }
                y[t * ch + ci] = acc;
            }
        }
    }
    (
        y,
        ScanCache {
            h: h_hist,
            abar: abar_hist,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    gout: &[f64],
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    cache: &ScanCache,
    l: usize,
    ch: usize,
    n: usize,
    spans: &[(usize, usize)],
) -> ScanGrads {
    let mut du = vec![0.0; l * ch];
    let mut ddelta = vec![0.0; l * ch];
    let mut db = vec![0.0; l * n];
    let mut dc = vec![0.0; l * n];
    let mut da = vec![0.0; ch * n];
    let mut lam = vec![0.0; n];
    for ci in 0..ch {
        let arow = &a[ci * n..(ci + 1) * n];
        let darow = &mut da[ci * n..(ci + 1) * n];
        for &(span_start, span_end) in spans {
            lam.iter_mut().for_each(|v| *v = 0.0);
            for t in (span_start..span_end).rev() {
                let gy = gout[t * ch + ci];
                let dt = delta[t * ch + ci];
                let ut = u[t * ch + ci];
                let brow = &b[t * n..(t + 1) * n];
                let crow = &c[t * n..(t + 1) * n];
                let base = (ci * l + t) * n;
                let prev_base = (ci * l + t.saturating_sub(1)) * n;
                let has_prev = t > span_start;
                let mut du_acc = 0.0;
                let mut dd_acc = 0.0;
                for ni in 0..n {
                    let hv = cache.h[base + ni];
                    // Output contribution y_t = sum_n c_t[n] h_t[n].
                    dc[t * n + ni] += gy * hv;
                    let lam_n = lam[ni] + gy * crow[ni];
                    let ab = cache.abar[base + ni];
                    let an = arow[ni];
                    let s = dt * an;
                    let (g, dg_da) = if s.abs() < SERIES_LIMIT {
                        (dt, dt * dt / 2.0)
                    } else {
                        let g = (ab - 1.0) / an;
                        (g, (dt * ab - g) / an)
                    };
                    let h_prev = if has_prev { cache.h[prev_base + ni] } else { 0.0 };
                    du_acc += lam_n * g * brow[ni];
                    db[t * n + ni] += lam_n * g * ut;
                    // d a_bar/d delta = a_bar * a, d g/d delta = a_bar.
                    dd_acc += lam_n * (h_prev * ab * an + ut * brow[ni] * ab);
                    darow[ni] += lam_n * (h_prev * ab * dt + ut * brow[ni] * dg_da);
                    lam[ni] = lam_n * ab;
                }
                du[t * ch + ci] = du_acc;
                ddelta[t * ch + ci] = dd_acc;
            }
        }
    }
    ScanGrads { du, ddelta, db, dc, da }
}

/// Convenience wrapper: runs the scan without gradient bookkeeping.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_values(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    l: usize,
    ch: usize,
    n: usize,
) -> Vec<f64> {
    scan_forward(u, delta, b, c, a, l, ch, n, &[(0, l)]).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(a: f64, b: f64, delta: f64) -> SsmParams {
        SsmParams {
            a: vec![a],
            b: vec![b],
            c: vec![1.0],
            delta,
        }
    }

    #[test]
    fn zoh_scalar_closed_form() {
        // a = -1, delta = ln 2: A_bar = 1/2, B_bar = (1/2 - 1)/(-1) = 1/2.
        let d = discretize_zoh(&scalar_params(-1.0, 1.0, 2f64.ln())).unwrap();
        assert!((d.a_bar[0] - 0.5).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_delta_to_zero_limit() {
        let d = discretize_zoh(&scalar_params(-1.0, 1.0, 1e-12)).unwrap();
        assert!((d.a_bar[0] - 1.0).abs() < 1e-9);
        assert!(d.b_bar[0].abs() < 1e-9);
    }

    #[test]
    fn zoh_series_branch_near_zero_a() {
        let delta = 0.5;
        let d = discretize_zoh(&scalar_params(-1e-12, 2.0, delta)).unwrap();
        // |delta * a| < 1e-8 takes the Taylor limit B_bar = delta * B exactly.
        assert_eq!(d.b_bar[0], delta * 2.0);
    }

    #[test]
    fn zoh_rejects_nonpositive_delta() {
        assert!(matches!(
            discretize_zoh(&scalar_params(-1.0, 1.0, 0.0)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            discretize_zoh(&scalar_params(-1.0, 1.0, -0.3)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn recurrence_zero_input_is_zero() {
        let p = scalar_params(-1.0, 1.0, 0.3);
        let d = discretize_zoh(&p).unwrap();
        let y = ssm_recurrence(&d, &p.c, &[0.0; 16]);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrence_impulse_geometric() {
        // Hand-unrolled: h_1 = 0.5, then halves each step.
        let p = scalar_params(-1.0, 1.0, 2f64.ln());
        let d = discretize_zoh(&p).unwrap();
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let y = ssm_recurrence(&d, &p.c, &x);
        let expected = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_base_term() {
        let p = SsmParams {
            a: vec![-1.0, -2.0],
            b: vec![1.0, 0.5],
            c: vec![0.3, 0.7],
            delta: 0.25,
        };
        let d = discretize_zoh(&p).unwrap();
        let k = ssm_conv_kernel(&d, &p.c, 1).unwrap();
        let expected: f64 = p.c.iter().zip(&d.b_bar).map(|(c, b)| c * b).sum();
        assert_eq!(k.len(), 1);
        assert!((k[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn kernel_is_geometric_for_impulse_params() {
        let p = scalar_params(-1.0, 1.0, 2f64.ln());
        let d = discretize_zoh(&p).unwrap();
        let k = ssm_conv_kernel(&d, &p.c, 5).unwrap();
        for (j, &kj) in k.iter().enumerate() {
            assert!((kj - 0.5_f64.powi(j as i32 + 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_matches_recurrence_random_lti() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = *[1usize, 4, 16].get(rng.gen_range(0..3)).unwrap();
            let l = 64;
            let p = SsmParams {
                a: (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect(),
                b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                delta: rng.gen_range(0.01..1.0),
            };
            let d = discretize_zoh(&p).unwrap();
            let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y_rec = ssm_recurrence(&d, &p.c, &x);
            let k = ssm_conv_kernel(&d, &p.c, l).unwrap();
            let y_conv = apply_kernel(&k, &x);
            for (a, b) in y_rec.iter().zip(&y_conv) {
                assert!((a - b).abs() < 1e-6, "recurrence {a} vs kernel {b}");
            }
        }
    }

    #[test]
    fn impulse_response_magnitude_nonincreasing() {
        let p = scalar_params(-0.5, 1.0, 0.7);
        let d = discretize_zoh(&p).unwrap();
        let mut x = vec![0.0; 32];
        x[0] = 1.0;
        let y = ssm_recurrence(&d, &p.c, &x);
        for w in y.windows(2) {
            assert!(w[1].abs() <= w[0].abs() + 1e-15);
        }
    }

    #[test]
    fn selective_scan_zero_input_zero_output() {
        let (l, ch, n) = (8, 3, 4);
        let u = vec![0.0; l * ch];
        let delta = vec![0.1; l * ch];
        let b = vec![0.5; l * n];
        let c = vec![0.5; l * n];
        let a = vec![-1.0; ch * n];
        let y = selective_scan_values(&u, &delta, &b, &c, &a, l, ch, n);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selective_scan_constant_projections_match_lti() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = 4;
            let l = 48;
            let p = SsmParams {
                a: (0..n).map(|_| -rng.gen_range(0.1..2.0)).collect(),
                b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                delta: rng.gen_range(0.01..0.5),
            };
            let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = discretize_zoh(&p).unwrap();
            let y_lti = ssm_recurrence(&d, &p.c, &x);

            // One channel; tile B_t, C_t constant over time.
            let delta_seq = vec![p.delta; l];
            let mut b_seq = vec![0.0; l * n];
            let mut c_seq = vec![0.0; l * n];
            for t in 0..l {
                b_seq[t * n..(t + 1) * n].copy_from_slice(&p.b);
                c_seq[t * n..(t + 1) * n].copy_from_slice(&p.c);
            }
            let y = selective_scan_values(&x, &delta_seq, &b_seq, &c_seq, &p.a, l, 1, n);
            for (a, b) in y.iter().zip(&y_lti) {
                let denom = b.abs().max(1.0);
                assert!((a - b).abs() / denom < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn selective_scan_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (l, ch, n) = (20, 2, 4);
        let u: Vec<f64> = (0..l * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..l * ch).map(|_| rng.gen_range(0.01..0.5)).collect();
        let b: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..l * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..ch * n).map(|_| -rng.gen_range(0.1..2.0)).collect();
        let y0 = selective_scan_values(&u, &delta, &b, &c, &a, l, ch, n);
        let t_perturb = 12;
        let mut u2 = u.clone();
        u2[t_perturb * ch] += 5.0;
        let y1 = selective_scan_values(&u2, &delta, &b, &c, &a, l, ch, n);
        for t in 0..t_perturb {
            for ci in 0..ch {
                assert_eq!(y0[t * ch + ci], y1[t * ch + ci], "frame {t} changed");
            }
        }
        assert!(y0[t_perturb * ch] != y1[t_perturb * ch]);
    }
}

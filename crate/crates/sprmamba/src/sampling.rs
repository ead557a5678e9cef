//! Hierarchical sampling: non-overlapping window partition and stride-based
//! long-range reordering, both with exact inverses.
//!
//! Sequences whose length is not a multiple of the window size or stride are
//! zero-padded to the next multiple; a validity mask marks the padding so it
//! can be excluded from attention, normalization statistics, and losses.

use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Window size and long-range stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingConfig {
    pub window_size: usize,
    pub longrange_stride: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            window_size: 64,
            longrange_stride: 64,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.longrange_stride == 0 {
            return Err(Error::Config(
                "window size and long-range stride must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Index plan for the long-range reordering of a length-`l` sequence.
///
/// After zero-padding to `padded_len = ceil(l / g) * g`, row `j` of the
/// reordered sequence is original row `perm[j]`; subsequence `s` occupies the
/// contiguous row range `[s * sub_len, (s + 1) * sub_len)`.
#[derive(Clone, Debug)]
pub struct LongrangePlan {
    pub padded_len: usize,
    pub sub_len: usize,
    pub num_subsequences: usize,
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
}

/// Builds the stride-`g` reorder plan: subsequence s holds frames s, s+g, s+2g, ...
pub fn longrange_plan(l: usize, g: usize) -> Result<LongrangePlan> {
    if l == 0 {
        return Err(Error::Usage("long-range reorder of an empty sequence".into()));
    }
    if g == 0 {
        return Err(Error::Config("long-range stride must be >= 1".into()));
    }
    let sub_len = l.div_ceil(g);
    let padded_len = sub_len * g;
    let mut perm = vec![0usize; padded_len];
    let mut inverse = vec![0usize; padded_len];
    for s in 0..g {
        for j in 0..sub_len {
            let original = j * g + s;
            let reordered = s * sub_len + j;
            perm[reordered] = original;
            inverse[original] = reordered;
        }
    }
    Ok(LongrangePlan {
        padded_len,
        sub_len,
        num_subsequences: g,
        perm,
        inverse,
    })
}

/// Number of windows covering `l` frames.
pub fn num_windows(l: usize, w: usize) -> usize {
    l.div_ceil(w)
}

/// Splits `[L x C]` features into `ceil(L/W)` windows of exactly `W` rows;
/// the final window is zero-padded. Returns per-window validity masks.
pub fn window_partition(f: &NdArray, w: usize) -> Result<(Vec<NdArray>, Vec<Vec<bool>>)> {
    let (l, c) = f.dims2()?;
    if l == 0 {
        return Err(Error::Usage("window partition of an empty sequence".into()));
    }
    if w == 0 {
        return Err(Error::Config("window size must be >= 1".into()));
    }
    let n = num_windows(l, w);
    let mut windows = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for win in 0..n {
        let start = win * w;
        let mut data = vec![0.0; w * c];
        let mut mask = vec![false; w];
        for j in 0..w {
            let t = start + j;
            if t < l {
                data[j * c..(j + 1) * c].copy_from_slice(f.row(t));
                mask[j] = true;
            }
        }
        windows.push(NdArray::new(vec![w, c], data)?);
        masks.push(mask);
    }
    Ok((windows, masks))
}

/// Exact inverse of [`window_partition`]: concatenates windows and drops padding.
pub fn window_merge(windows: &[NdArray], masks: &[Vec<bool>]) -> Result<NdArray> {
    if windows.is_empty() {
        return Err(Error::Usage("window merge of an empty window list".into()));
    }
    let (_, c) = windows[0].dims2()?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (win, mask) in windows.iter().zip(masks) {
        let (w, _) = win.dims2()?;
        if mask.len() != w {
            return Err(Error::Dimension(format!(
                "mask length {} != window size {w}",
                mask.len()
            )));
        }
        for (j, &valid) in mask.iter().enumerate().take(w) {
            if valid {
                rows.push(win.row(j).to_vec());
            }
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    NdArray::new(vec![rows.len(), c], flat)
}

/// Reorders `[L x C]` into `G` subsequences of `ceil(L/G)` rows each
/// (zero-padded), with per-subsequence validity masks.
pub fn longrange_reorder(f: &NdArray, g: usize) -> Result<(Vec<NdArray>, Vec<Vec<bool>>)> {
    let (l, c) = f.dims2()?;
    let plan = longrange_plan(l, g)?;
    let mut subs = Vec::with_capacity(plan.num_subsequences);
    let mut masks = Vec::with_capacity(plan.num_subsequences);
    for s in 0..plan.num_subsequences {
        let mut data = vec![0.0; plan.sub_len * c];
        let mut mask = vec![false; plan.sub_len];
        for j in 0..plan.sub_len {
            let original = plan.perm[s * plan.sub_len + j];
            if original < l {
                data[j * c..(j + 1) * c].copy_from_slice(f.row(original));
                mask[j] = true;
            }
        }
        subs.push(NdArray::new(vec![plan.sub_len, c], data)?);
        masks.push(mask);
    }
    Ok((subs, masks))
}

/// Exact inverse of [`longrange_reorder`]: restores original frame order.
pub fn longrange_inverse(subs: &[NdArray], masks: &[Vec<bool>]) -> Result<NdArray> {
    if subs.is_empty() {
        return Err(Error::Usage("long-range inverse of an empty list".into()));
    }
    let g = subs.len();
    let (sub_len, c) = subs[0].dims2()?;
    let l: usize = masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    let mut data = vec![0.0; l * c];
    for (s, (sub, mask)) in subs.iter().zip(masks).enumerate() {
        for j in 0..sub_len {
            if mask[j] {
                let original = j * g + s;
                data[original * c..(original + 1) * c].copy_from_slice(sub.row(j));
            }
        }
    }
    NdArray::new(vec![l, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(l: usize, c: usize, rng: &mut ChaCha8Rng) -> NdArray {
        NdArray::new(
            vec![l, c],
            (0..l * c).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn window_partition_divisible() {
        let f = NdArray::new(vec![8, 1], (0..8).map(|i| i as f64).collect()).unwrap();
        let (wins, masks) = window_partition(&f, 4).unwrap();
        assert_eq!(wins.len(), 2);
        assert_eq!(wins[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(wins[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        assert!(masks.iter().all(|m| m.iter().all(|&v| v)));
    }

    #[test]
    fn window_partition_pads_final_window() {
        let f = NdArray::new(vec![7, 1], (0..7).map(|i| i as f64).collect()).unwrap();
        let (wins, masks) = window_partition(&f, 4).unwrap();
        assert_eq!(wins.len(), 2);
        assert_eq!(wins[1].data(), &[4.0, 5.0, 6.0, 0.0]);
        assert_eq!(masks[1], vec![true, true, true, false]);
        let merged = window_merge(&wins, &masks).unwrap();
        assert_eq!(&merged, &f);
    }

    #[test]
    fn window_larger_than_sequence() {
        let f = NdArray::new(vec![3, 2], (0..6).map(|i| i as f64).collect()).unwrap();
        let (wins, masks) = window_partition(&f, 16).unwrap();
        assert_eq!(wins.len(), 1);
        assert_eq!(&wins[0].data()[..6], f.data());
        assert_eq!(window_merge(&wins, &masks).unwrap(), f);
    }

    #[test]
    fn longrange_stride_four_example() {
        let f = NdArray::new(vec![8, 1], (0..8).map(|i| i as f64).collect()).unwrap();
        let (subs, _) = longrange_reorder(&f, 4).unwrap();
        assert_eq!(subs.len(), 4);
        assert_eq!(subs[0].data(), &[0.0, 4.0]);
        assert_eq!(subs[1].data(), &[1.0, 5.0]);
        assert_eq!(subs[2].data(), &[2.0, 6.0]);
        assert_eq!(subs[3].data(), &[3.0, 7.0]);
    }

    #[test]
    fn longrange_stride_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = seq(9, 3, &mut rng);
        let (subs, masks) = longrange_reorder(&f, 1).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(&subs[0], &f);
        assert_eq!(longrange_inverse(&subs, &masks).unwrap(), f);
    }

    #[test]
    fn roundtrips_exact_over_random_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let l = rng.gen_range(1..=500);
            let w = rng.gen_range(1..=64);
            let g = rng.gen_range(1..=64);
            let f = seq(l, 2, &mut rng);

            let (wins, wmasks) = window_partition(&f, w).unwrap();
            assert_eq!(window_merge(&wins, &wmasks).unwrap(), f, "window L={l} W={w}");

            let (subs, smasks) = longrange_reorder(&f, g).unwrap();
            assert_eq!(longrange_inverse(&subs, &smasks).unwrap(), f, "longrange L={l} G={g}");
        }
    }

    #[test]
    fn plans_are_permutations_covering_every_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let l = rng.gen_range(1..=300);
            let g = rng.gen_range(1..=32);
            let plan = longrange_plan(l, g).unwrap();
            let mut seen = vec![false; plan.padded_len];
            for &p in &plan.perm {
                assert!(!seen[p], "index {p} covered twice");
                seen[p] = true;
            }
            assert!(seen.iter().all(|&v| v));
            for (orig, &reordered) in plan.inverse.iter().enumerate() {
                assert_eq!(plan.perm[reordered], orig);
            }
        }
    }

    #[test]
    fn padding_content_never_reaches_merged_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = seq(11, 2, &mut rng);
        let (mut wins, masks) = window_partition(&f, 4).unwrap();
        // Corrupt the padding rows; the merge must be unaffected.
        let last = wins.len() - 1;
        for (j, &valid) in masks[last].clone().iter().enumerate() {
            if !valid {
                for ch in 0..2 {
                    wins[last].set(j, ch, 1e9);
                }
            }
        }
        assert_eq!(window_merge(&wins, &masks).unwrap(), f);
    }

    #[test]
    fn zero_window_is_config_error() {
        let f = NdArray::zeros(&[4, 1]);
        assert!(matches!(window_partition(&f, 0), Err(Error::Config(_))));
        assert!(matches!(longrange_reorder(&f, 0), Err(Error::Config(_))));
    }
}

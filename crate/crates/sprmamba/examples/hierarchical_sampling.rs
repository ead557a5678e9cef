//! Window partition and long-range stride reordering, both with exact
//! inverses and validity masks on padded frames.
//!
//! ```bash
//! cargo run --release --example hierarchical_sampling
//! ```

use sprmamba::sampling::{
    longrange_inverse, longrange_reorder, window_merge, window_partition,
};
use sprmamba::tensor::NdArray;

fn main() {
    // A length-10 sequence with one feature per frame, so the reordering is
    // easy to read off.
    let f = NdArray::new(vec![10, 1], (0..10).map(|i| i as f64).collect()).unwrap();

    let (windows, wmasks) = window_partition(&f, 4).unwrap();
    println!("window size 4 over 10 frames -> {} windows:", windows.len());
    for (w, mask) in windows.iter().zip(&wmasks) {
        println!("  {:?}  valid {:?}", w.data(), mask);
    }
    let merged = window_merge(&windows, &wmasks).unwrap();
    assert_eq!(merged, f);
    println!("merge restores the original exactly\n");

    let (subs, smasks) = longrange_reorder(&f, 4).unwrap();
    println!("stride 4 -> {} subsequences:", subs.len());
    for (s, mask) in subs.iter().zip(&smasks) {
        println!("  {:?}  valid {:?}", s.data(), mask);
    }
    let restored = longrange_inverse(&subs, &smasks).unwrap();
    assert_eq!(restored, f);
    println!("inverse restores the original order exactly");
}

//! Reduction helpers with fixed-order multi-accumulator unrolling. Plain
//! `acc += a*b` loops form a sequential FP dependency chain the compiler must
//! not reassociate; splitting into eight independent lanes lets it vectorize
//! while keeping results deterministic (the lane order is fixed).

use super::Element;

const LANES: usize = 8;

/// Dot product over equal-length slices.
#[inline]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[off + l] * b[off + l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    pairwise(acc) + tail
}

/// Sum of a slice.
#[inline]
pub fn sum<E: Element>(a: &[E]) -> E {
    let mut acc = [E::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[off + l];
        }
    }
    let mut tail = E::zero();
    for v in &a[chunks * LANES..] {
        tail = tail + *v;
    }
    pairwise(acc) + tail
}

/// Sum of squared differences.
#[inline]
pub fn sq_diff_sum<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for l in 0..LANES {
            let d = a[off + l] - b[off + l];
            acc[l] = acc[l] + d * d;
        }
    }
    let mut tail = E::zero();
    for i in chunks * LANES..a.len() {
        let d = a[i] - b[i];
        tail = tail + d * d;
    }
    pairwise(acc) + tail
}

#[inline]
fn pairwise<E: Element>(acc: [E; LANES]) -> E {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

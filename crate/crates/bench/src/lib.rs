//! Deterministic inputs shared by the benchmarks.

use kilnmap_core::Tensor;

/// Tensor of the given shape filled with a fixed pseudo-random pattern in [-1, 1).
pub fn pattern(shape: &[usize], salt: u64) -> Tensor {
    let mut s = salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

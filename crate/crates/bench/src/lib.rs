//! Fixtures shared by the criterion benches under `benches/`.

use lms_core::Tensor;

/// Deterministic pseudo-random tensor in `[-1, 1)` (splitmix-style hash of the index).
pub fn fixture(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let mut z = (i as u64).wrapping_add(salt).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^= z >> 31;
        (z >> 40) as f32 / (1u64 << 23) as f32 - 1.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_is_deterministic_and_bounded() {
        let a = fixture(&[2, 3, 4], 1);
        assert_eq!(a.data(), fixture(&[2, 3, 4], 1).data());
        assert_ne!(a.data(), fixture(&[2, 3, 4], 2).data());
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }
}

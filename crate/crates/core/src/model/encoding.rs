use crate::numerics::{Scalar, Tensor};

/// Frequency encoding `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{deg−1}πp), cos(2^{deg−1}πp)]`.
///
/// Each block is the whole vector `p`, so the output has `p.len() * (1 + 2 * degrees)`
/// entries.
pub fn positional_encode<T: Scalar>(p: &[T], degrees: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(p.len() * (1 + 2 * degrees));
    out.extend_from_slice(p);
    let pi = T::lit(std::f64::consts::PI);
    let mut freq = T::one();
    for _ in 0..degrees {
        out.extend(p.iter().map(|&v| (freq * pi * v).sin()));
        out.extend(p.iter().map(|&v| (freq * pi * v).cos()));
        freq = freq + freq;
    }
    out
}

/// Encodes a batch of 3-vectors into a `batch × 3(1 + 2·degrees)` matrix.
pub fn encode_batch<T: Scalar>(points: &[[f64; 3]], degrees: usize) -> Tensor<T> {
    assert!(!points.is_empty(), "empty batch");
    let dim = 3 * (1 + 2 * degrees);
    let mut data = Vec::with_capacity(points.len() * dim);
    for p in points {
        let p = [T::lit(p[0]), T::lit(p[1]), T::lit(p[2])];
        data.extend(positional_encode(&p, degrees));
    }
    Tensor::from_vec(&[points.len(), dim], data).expect("encoded batch")
}

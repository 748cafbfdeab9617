//! Slice-level numeric kernels shared by the graph ops.
//!
//! Every kernel accumulates each output element in a fixed order that
//! depends only on that element's own row, so results for one row never
//! change with the number of other rows in the batch.

use super::Real;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×k] = g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = dot(grow, brow);
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_at<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Rotation tables for rotary embeddings: `cos`/`sin` laid out as
/// `[positions.len(), head_dim / 2]`, pair `i` rotating at
/// frequency `theta^(-2i / head_dim)`.
pub(crate) fn rope_tables<T: Real>(positions: &[f64], head_dim: usize, theta: f64) -> (Vec<T>, Vec<T>) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &m in positions {
        for &f in &freqs {
            let angle = m * f;
            cos.push(T::of(angle.cos()));
            sin.push(T::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates interleaved coordinate pairs `(2i, 2i+1)` of one head vector.
/// `inverse` applies the transposed rotation.
#[inline]
pub(crate) fn rotate_pairs<T: Real>(x: &mut [T], cos: &[T], sin: &[T], inverse: bool) {
    for (i, (&c, &s)) in cos.iter().zip(sin).enumerate() {
        let s = if inverse { -s } else { s };
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul::<f64>(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_plain_product() {
        // g·bᵀ where b is 3×2 equals g·(bᵀ) computed explicitly.
        let g = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0];
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 3.0];
        assert_eq!(matmul_bt::<f64>(&g, &b, 2, 2, 3), matmul::<f64>(&g, &bt, 2, 2, 3));
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 3.0, 5.0, 2.0, 4.0, 6.0];
        let g2 = [1.0, -1.0, 2.0, 0.5, 0.0, 1.0];
        assert_eq!(matmul_at::<f64>(&a, &g2, 3, 2, 2), matmul::<f64>(&at, &g2, 2, 3, 2));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}

//! Pairwise (balanced-tree) summation.
//!
//! Besides the usual accuracy benefit over a running sum, the balanced tree
//! has one property the loss floors rely on: summing `2^k` identical values
//! is exact (every addition doubles a value, which only increments the
//! exponent), so `mean` over a power-of-two count of equal inputs returns
//! that input bit-for-bit.

/// Sum `xs` with a fixed balanced reduction tree.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n <= 8 {
        return small_tree(xs);
    }
    let mid = n / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Balanced reduction of at most 8 values without recursion overhead.
fn small_tree(xs: &[f64]) -> f64 {
    let mut buf = [0.0; 8];
    let mut n = xs.len();
    if n == 0 {
        return 0.0;
    }
    buf[..n].copy_from_slice(xs);
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    buf[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_power_of_two_counts() {
        for &n in &[2usize, 8, 16, 256, 4096] {
            let xs = vec![1e-4; n];
            assert_eq!(pairwise_sum(&xs) / n as f64, 1e-4, "count {n}");
        }
    }

    #[test]
    fn matches_naive_on_small_input() {
        let xs = [1.5, -2.25, 0.5, 3.0, -0.75];
        assert_eq!(pairwise_sum(&xs), 2.0);
    }

    #[test]
    fn handles_empty_and_singleton() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[7.5]), 7.5);
    }

    #[test]
    fn close_to_exact_on_random_data() {
        // Compare against Kahan summation on an ill-conditioned mix.
        let xs: Vec<f64> = (0..10_001)
            .map(|i| if i % 2 == 0 { 1e10 } else { -1e10 + 0.25 })
            .collect();
        let mut kahan = 0.0f64;
        let mut c = 0.0f64;
        for &x in &xs {
            let y = x - c;
            let t = kahan + y;
            c = (t - kahan) - y;
            kahan = t;
        }
        let got = pairwise_sum(&xs);
        assert!((got - kahan).abs() <= 1e-3 * kahan.abs().max(1.0));
    }
}

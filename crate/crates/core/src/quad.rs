//! Gauss–Legendre quadrature on boxes.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence for P_n(x) and P_{n-1}(x).
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `∫_a^b f`.
pub fn integrate_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    x.iter().zip(&w).map(|(xi, wi)| wi * f(mid + half * xi)).sum::<f64>() * half
}

/// `∫∫ f` over `[lo0, hi0] × [lo1, hi1]` with the tensor-product rule.
pub fn integrate_2d(f: impl Fn(f64, f64) -> f64, lo: [f64; 2], hi: [f64; 2], n: usize) -> f64 {
    let (x, w) = gauss_legendre(n);
    let h0 = 0.5 * (hi[0] - lo[0]);
    let m0 = 0.5 * (hi[0] + lo[0]);
    let h1 = 0.5 * (hi[1] - lo[1]);
    let m1 = 0.5 * (hi[1] + lo[1]);
    let mut total = 0.0;
    for (xi, wi) in x.iter().zip(&w) {
        let u = m0 + h0 * xi;
        let mut inner = 0.0;
        for (xj, wj) in x.iter().zip(&w) {
            inner += wj * f(u, m1 + h1 * xj);
        }
        total += wi * inner;
    }
    total * h0 * h1
}

//! Gauss-Legendre rules on `[-1, 1]` and their tensor products.

/// Nodes and weights of the `m`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Roots of `P_m` are found by Newton's method from the usual cosine guesses;
/// weights are `2 / ((1 - x^2) P_m'(x)^2)`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(m, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(m, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    (nodes, weights)
}

/// `(P_m(x), P_m'(x))` by the three-term recurrence.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product rule for the uniform law on `[-1, 1]^d`: points and
/// probability weights summing to one.
pub fn uniform_cube(d: usize, m: usize) -> Vec<(Vec<f64>, f64)> {
    let (x, w) = gauss_legendre(m);
    let mut out = vec![(Vec::with_capacity(d), 1.0)];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|(p, pw)| {
                x.iter().zip(&w).map(move |(&xi, &wi)| {
                    let mut q = p.clone();
                    q.push(xi);
                    (q, pw * wi / 2.0)
                })
            })
            .collect();
    }
    out
}

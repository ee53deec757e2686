#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use conformal_contraction::linalg::{Matrix, Vector};
use conformal_contraction::metric::ContractionMetric;

pub fn vtol_metric() -> ContractionMetric {
    ContractionMetric::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/vtol_metric.json"))
        .unwrap()
}

/// Shortest path on a planar lattice over `[lo, hi]²` with `n` nodes per axis.
/// Moves are all coprime steps with |dx|, |dy| ≤ `reach`; each edge is
/// integrated with Simpson's rule. `a` and `b` must be lattice nodes.
pub fn lattice_distance(
    metric: &ContractionMetric,
    a: [f64; 2],
    b: [f64; 2],
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
    reach: i64,
) -> f64 {
    let h = [
        (hi[0] - lo[0]) / (n - 1) as f64,
        (hi[1] - lo[1]) / (n - 1) as f64,
    ];
    let node = |p: [f64; 2]| -> (i64, i64) {
        let i = ((p[0] - lo[0]) / h[0]).round() as i64;
        let j = ((p[1] - lo[1]) / h[1]).round() as i64;
        assert!(
            ((p[0] - lo[0]) / h[0] - i as f64).abs() < 1e-9,
            "endpoint off lattice"
        );
        assert!(
            ((p[1] - lo[1]) / h[1] - j as f64).abs() < 1e-9,
            "endpoint off lattice"
        );
        (i, j)
    };
    let pos = |i: i64, j: i64| [lo[0] + i as f64 * h[0], lo[1] + j as f64 * h[1]];
    let gcd = |mut x: i64, mut y: i64| {
        (x, y) = (x.abs(), y.abs());
        while y != 0 {
            (x, y) = (y, x % y);
        }
        x
    };
    let moves: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dx| (-reach..=reach).map(move |dy| (dx, dy)))
        .filter(|&(dx, dy)| (dx, dy) != (0, 0) && gcd(dx, dy) == 1)
        .collect();
    let speed = |p: [f64; 2], d: [f64; 2]| {
        let m = metric.eval(&Vector::from_vec(p.to_vec()));
        let d = Vector::from_vec(d.to_vec());
        d.dot(&(&m * &d)).sqrt()
    };
    let edge = |p: [f64; 2], q: [f64; 2]| {
        let d = [q[0] - p[0], q[1] - p[1]];
        let at = |s: f64| speed([p[0] + s * d[0], p[1] + s * d[1]], d);
        (at(0.0) + 4.0 * at(0.25) + 2.0 * at(0.5) + 4.0 * at(0.75) + at(1.0)) / 12.0
    };
    let (s, t) = (node(a), node(b));
    let idx = |i: i64, j: i64| (i * n as i64 + j) as usize;
    let mut dist = vec![f64::INFINITY; n * n];
    let mut heap = BinaryHeap::new();
    dist[idx(s.0, s.1)] = 0.0;
    heap.push(Reverse((0f64.to_bits(), s.0, s.1)));
    while let Some(Reverse((bits, i, j))) = heap.pop() {
        let d = f64::from_bits(bits);
        if (i, j) == t {
            return d;
        }
        if d > dist[idx(i, j)] {
            continue;
        }
        for &(dx, dy) in &moves {
            let (u, v) = (i + dx, j + dy);
            if u < 0 || v < 0 || u >= n as i64 || v >= n as i64 {
                continue;
            }
            let nd = d + edge(pos(i, j), pos(u, v));
            if nd < dist[idx(u, v)] {
                dist[idx(u, v)] = nd;
                heap.push(Reverse((nd.to_bits(), u, v)));
            }
        }
    }
    f64::INFINITY
}

/// `argmin ½‖κ‖²` subject to `aᵀκ ≥ b` by a log-barrier path with damped
/// Newton steps on the full Hessian.
pub fn qp_barrier(a: &Vector, b: f64) -> Vector {
    let m = a.len();
    let na = a.norm_squared();
    let mut k = a * ((b + 1.0) / na);
    let mut mu = 1.0;
    while mu > 1e-13 {
        for _ in 0..100 {
            let s = a.dot(&k) - b;
            let g = &k - a * (mu / s);
            let hess = Matrix::identity(m, m) + a * a.transpose() * (mu / (s * s));
            let step = hess.lu().solve(&(-&g)).unwrap();
            let ds = a.dot(&step);
            let mut t = 1.0;
            while s + t * ds <= 0.0 {
                t *= 0.5;
            }
            k += &step * t;
            if step.norm() * t < 1e-15 * (1.0 + k.norm()) {
                break;
            }
        }
        mu *= 0.1;
    }
    k
}

/// Two binomial standard errors of a fraction `p` over `n` trials.
pub fn binomial_slack(p: f64, n: usize) -> f64 {
    2.0 * (p * (1.0 - p) / n as f64).sqrt()
}

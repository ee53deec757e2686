//! Riemannian distances: a constant metric against its closed form, and a
//! state-dependent metric in the plane where the geodesic bends.

use conformal_contraction::linalg::{Matrix, Vector};
use conformal_contraction::metric::{
    riemannian_distance, ContractionMetric, GeodesicOptions, PolyTerm,
};

fn main() -> conformal_contraction::Result<()> {
    let m = Matrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
    let flat = ContractionMetric::constant(m.clone(), 1.0)?;
    let (a, b) = (
        Vector::from_vec(vec![-1.0, 0.5]),
        Vector::from_vec(vec![2.0, -1.0]),
    );
    let (d, _) = riemannian_distance(&flat, &a, &b, &GeodesicOptions::default());
    let e = &b - &a;
    println!(
        "constant: {d:.12} vs sqrt(e'Me) {:.12}",
        e.dot(&(&m * &e)).sqrt()
    );

    // M(x) = (1 + x₂²) I
    let curved = ContractionMetric::polynomial(
        vec![
            PolyTerm {
                exponents: vec![0, 0],
                coefficient: Matrix::identity(2, 2),
            },
            PolyTerm {
                exponents: vec![0, 2],
                coefficient: Matrix::identity(2, 2),
            },
        ],
        1.0,
        5.0,
        1.0,
    )?;
    let (a, b) = (
        Vector::from_vec(vec![-1.5, 1.5]),
        Vector::from_vec(vec![1.5, 1.5]),
    );
    for k in [2, 8, 32] {
        let (d, g) = riemannian_distance(
            &curved,
            &a,
            &b,
            &GeodesicOptions {
                segments: k,
                ..Default::default()
            },
        );
        let dip = g.nodes.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        println!(
            "curved, {k:>2} segments: distance {d:.6}, {} iterations, lowest x2 {dip:.4}",
            g.iterations
        );
    }
    println!(
        "straight chord length {:.6}",
        3.0 * (1.0 + 1.5f64 * 1.5).sqrt()
    );
    Ok(())
}

//! Planar cross-sections of a VTOL tube around a hover reference, written as
//! the ellipse CSV, with a sampling check that projections stay inside.

use std::path::Path;

use conformal_contraction::linalg::Vector;
use conformal_contraction::metric::ContractionMetric;
use conformal_contraction::rng::stream;
use conformal_contraction::systems::{benchmark_vtol, integrate, VtolParams};
use conformal_contraction::tube::PrciTube;

fn main() -> conformal_contraction::Result<()> {
    let metric = ContractionMetric::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/vtol_metric.json"),
    )?;
    let params = VtolParams::default();
    let vtol = benchmark_vtol(&params).nominal();
    let hover = Vector::from_vec(vec![params.hover_thrust(); 2]);
    let x0 = Vector::from_vec(vec![5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    let reference = integrate(&vtol, &x0, |_, _| hover.clone(), 1.0, 0.1)?;
    let tube = PrciTube::with_radius(reference, metric, 2.0, 0.05);

    let out = std::env::temp_dir().join("vtol_tube_ellipse.csv");
    tube.write_ellipse_csv(0, 1, std::fs::File::create(&out)?)?;
    println!("wrote {}", out.display());

    let (_, e) = &tube.project(0, 1)?[0];
    println!(
        "(px, pz) ellipse at t=0: shape {:?}, largest Euclidean half-axis {:.4}",
        e.shape,
        e.euclidean_radius()
    );
    let mut rng = stream(0, "tube-projection", 0);
    let inside = (0..10_000)
        .filter(|_| {
            let x = tube.sample_cross_section(0.0, &mut rng);
            e.contains([x[0], x[1]])
        })
        .count();
    println!("{inside}/10000 sampled cross-section points project inside");
    Ok(())
}

//! Synthesize a constant contraction metric for the 3D benchmark and check it
//! on a finer grid. `--vtol` also rebuilds `assets/vtol_metric.json` (about a
//! minute on one core).

use std::path::Path;
use std::time::Instant;

use conformal_contraction::metric::{
    synthesize_constant_metric, verify_contraction, SynthesisOptions, VerifyOptions,
};
use conformal_contraction::systems::{benchmark_3d, benchmark_vtol, BoxSet};

fn main() -> conformal_contraction::Result<()> {
    env_logger::init();
    let (nominal, _) = benchmark_3d(&Default::default());
    let t = Instant::now();
    let out = synthesize_constant_metric(
        &nominal,
        &nominal.state_box().grid(5, None),
        &SynthesisOptions::default(),
    )?;
    let fine = verify_contraction(
        &out.metric,
        &nominal,
        &nominal.state_box().grid(9, None),
        &VerifyOptions::default(),
    );
    println!(
        "3D: lambda {:.4}, chi {:.3}, objective {:.3} in {:.1?}; 9^3 check passed: {} (worst margin {:.3e})",
        out.metric.rate(),
        out.chi,
        out.objective,
        t.elapsed(),
        fine.passed,
        fine.worst_contraction_margin
    );
    for c in &out.candidates {
        println!(
            "  candidate lambda {:.3} chi {:.3} objective {:.3}",
            c.lambda, c.chi, c.objective
        );
    }

    if std::env::args().any(|a| a == "--vtol") {
        let vtol = benchmark_vtol(&Default::default()).nominal();
        let d30 = 30f64.to_radians();
        let b = BoxSet::new(
            vec![0.0, 0.0, -d30, -1.0, -0.5, -d30],
            vec![0.0, 0.0, d30, 1.0, 0.5, d30],
        );
        let opts = SynthesisOptions {
            lambda_min: 0.1,
            lambda_max: 2.0,
            chi_max: 100.0,
            verify_grid: Some(b.grid(7, Some(&[2, 3, 4, 5]))),
            ..Default::default()
        };
        let t = Instant::now();
        let out = synthesize_constant_metric(&vtol, &b.grid(3, Some(&[2, 3, 4, 5])), &opts)?;
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/vtol_metric.json");
        out.metric.save(&path)?;
        println!(
            "VTOL: lambda {:.4}, chi {:.2} in {:.1?}, written to {}",
            out.metric.rate(),
            out.chi,
            t.elapsed(),
            path.display()
        );
    }
    Ok(())
}

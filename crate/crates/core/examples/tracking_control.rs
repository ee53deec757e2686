//! Nominal contraction of the min-norm tracking feedback on the 3D benchmark:
//! the Riemannian distance to a reference decays at least like e^{-λt}.

use conformal_contraction::control::ContractingPolicy;
use conformal_contraction::linalg::Vector;
use conformal_contraction::metric::synthesize_constant_metric;
use conformal_contraction::predictor::{sample_reference_dataset, ReferenceSampler};
use conformal_contraction::tube::tracking_distances;

fn main() -> conformal_contraction::Result<()> {
    let (nominal, _) = conformal_contraction::systems::benchmark_3d(&Default::default());
    let metric = synthesize_constant_metric(
        &nominal,
        &nominal.state_box().grid(5, None),
        &Default::default(),
    )?
    .metric;
    let refs = sample_reference_dataset(
        &nominal,
        &ReferenceSampler::for_system(&nominal),
        1,
        3.0,
        0.01,
        7,
    )?;
    let r = &refs.records[0];
    let policy = ContractingPolicy::new(metric.clone(), nominal.clone(), r.reference_input.clone());
    let x0 = &r.record.states[0] + Vector::from_vec(vec![1.5, -1.0, 0.5]);
    let run = policy.rollout(&nominal, &x0, &r.record.states[0], 3.0, 0.01)?;
    let d = tracking_distances(
        &metric,
        &run.record.states,
        &run.reference,
        &Default::default(),
    );
    println!("lambda {:.4}", metric.rate());
    for k in (0..d.len()).step_by(50) {
        let t = run.record.times[k];
        println!(
            "t {t:4.2}  d {:.6}  d0 e^(-lambda t) {:.6}",
            d[k],
            d[0] * (-metric.rate() * t).exp()
        );
    }
    Ok(())
}

//! Split conformal calibration of closed-loop residual scores, the resulting
//! tube radius, and its coverage on fresh rollouts.

use std::sync::Arc;

use conformal_contraction::conformal::{calibrate, empirical_coverage, score_dataset};
use conformal_contraction::metric::synthesize_constant_metric;
use conformal_contraction::predictor::{
    generate_perturbed_dataset, sample_reference_dataset, split_reference, train, Family,
    PolicyMode, ReferenceSampler, Split, TrainConfig,
};
use conformal_contraction::systems::benchmark_3d;
use conformal_contraction::tube::{tracking_distances, tube_radius, ContainmentReport};

fn main() -> conformal_contraction::Result<()> {
    let (horizon, dt, alpha) = (3.0, 0.01, 0.1);
    let (nominal, truth) = benchmark_3d(&Default::default());
    let metric = synthesize_constant_metric(
        &nominal,
        &nominal.state_box().grid(5, None),
        &Default::default(),
    )?
    .metric;
    let refs = sample_reference_dataset(
        &nominal,
        &ReferenceSampler::for_system(&nominal),
        130,
        horizon,
        dt,
        11,
    )?;
    let (tr, rest) = split_reference(&refs, 50);
    let (cal, test) = split_reference(&rest, 40);

    let train_ds = generate_perturbed_dataset(
        &truth,
        &tr,
        &PolicyMode::OpenLoopReference,
        Split::Train,
        None,
    )?;
    let cfg = TrainConfig {
        family: Family::LinearFeatures,
        ..Default::default()
    };
    let predictor = Arc::new(train(&train_ds, &cfg)?);
    let mode = PolicyMode::ClosedLoop {
        metric: metric.clone(),
        predictor: Some(predictor.clone()),
        geodesic: Default::default(),
        saturate: false,
    };
    let cal_ds = generate_perturbed_dataset(&truth, &cal, &mode, Split::Cal, None)?;
    let test_ds = generate_perturbed_dataset(&truth, &test, &mode, Split::Test, None)?;

    let c = calibrate(&score_dataset(&truth, Some(&predictor), &cal_ds), alpha)?;
    let radius = tube_radius(&metric, c.quantile_value);
    println!("{}", c.summary());
    let test_scores = score_dataset(&truth, Some(&predictor), &test_ds);
    println!(
        "score coverage on {} test rollouts: {:.3}",
        test_scores.len(),
        empirical_coverage(&test_scores, c.quantile_value)
    );

    let maxima: Vec<f64> = test_ds
        .records
        .iter()
        .zip(&test.records)
        .map(|(r, re)| {
            tracking_distances(
                &metric,
                &r.record.states,
                &re.record.states,
                &Default::default(),
            )
            .into_iter()
            .fold(0.0, f64::max)
        })
        .collect();
    let rep = ContainmentReport::from_max_distances(&maxima, radius, alpha, c.quantile_value);
    println!(
        "tube radius {radius:.4}: {}/{} rollouts contained",
        rep.contained, rep.n
    );
    Ok(())
}

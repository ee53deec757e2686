//! Fit the uncertainty predictor on open-loop perturbed rollouts of the 3D
//! benchmark and compare families by their sup-over-time error.

use conformal_contraction::predictor::{
    generate_perturbed_dataset, sample_reference_dataset, split_reference, sup_error, train,
    Family, PolicyMode, ReferenceSampler, Split, TrainConfig,
};
use conformal_contraction::systems::benchmark_3d;

fn main() -> conformal_contraction::Result<()> {
    let (nominal, truth) = benchmark_3d(&Default::default());
    let refs = sample_reference_dataset(
        &nominal,
        &ReferenceSampler::for_system(&nominal),
        60,
        2.0,
        0.01,
        3,
    )?;
    let (tr, held) = split_reference(&refs, 40);
    let train_ds = generate_perturbed_dataset(
        &truth,
        &tr,
        &PolicyMode::OpenLoopReference,
        Split::Train,
        None,
    )?;
    let held_ds = generate_perturbed_dataset(
        &truth,
        &held,
        &PolicyMode::OpenLoopReference,
        Split::Test,
        None,
    )?;
    for family in [Family::Zero, Family::LinearFeatures, Family::Mlp] {
        let p = train(
            &train_ds,
            &TrainConfig {
                family,
                epochs: 200,
                ..Default::default()
            },
        )?;
        println!(
            "{family:<16} train sup error {:.5}  held-out {:.5}",
            sup_error(&p, &train_ds)?,
            sup_error(&p, &held_ds)?
        );
    }
    Ok(())
}

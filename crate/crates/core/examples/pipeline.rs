//! Run every stage of the smoke configuration into a scratch directory and
//! print the report table. Pass a config path to run something else.

use std::path::PathBuf;

use conformal_contraction::harness::Pipeline;

fn main() -> conformal_contraction::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let out = std::env::temp_dir().join("prci-example-pipeline");
    let mut p = Pipeline::from_config_file(&config, &out, None)?;
    let report = p.run()?;
    print!("{}", report.table());
    println!("artifacts in {}", out.display());
    Ok(())
}

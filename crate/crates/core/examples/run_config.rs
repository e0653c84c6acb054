//! Run configs: defaults, JSON round trip, dotted overrides and the hash that
//! names each run directory.

use span::runner::{experiment_bundle, RunConfig};

fn main() -> span::Result<()> {
    let base = RunConfig::default();
    let tuned = base.with_override("distill.lr=5e-4")?.with_override("span.kind=deformable")?.with_override("span.regularizer.lambda_incl=1e-3")?;
    println!("default hash {}", base.hash()?);
    println!("tuned hash   {}", tuned.hash()?);
    assert_eq!(RunConfig::from_json(&serde_json::to_string(&tuned)?)?, tuned);
    match base.with_override("distill.learning_rate=1") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }
    for (name, cfg) in experiment_bundle() {
        println!("{name:<22} regime {:<16} templates {:?}", cfg.augment.regime.as_str(), cfg.span.kind.map(|k| k.as_str()));
    }
    Ok(())
}

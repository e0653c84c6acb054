//! Frozen-feature linear probe and the low-data sweep on a briefly trained
//! model.

use span::runner::{evaluate_low_data, evaluate_probe, pretrain, RunConfig};
use span::synthdata::generate_corpus;

fn main() -> span::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.distill.epochs = 2;
    let corpus = generate_corpus(&cfg.corpus)?;
    let state = pretrain(&cfg, &corpus, None, None, |_, _| {})?;
    let probe = evaluate_probe(&cfg, &state.pair.teacher, &corpus)?;
    println!("probe AUC on {} training images: {:.4} ({})", probe.n_train, probe.mean_auc, probe.feature_source);
    let table = evaluate_low_data(&cfg, &state.pair.teacher, &corpus)?;
    for (size, mean, sd) in table.summary() {
        println!("{size:>3} labelled: AUC {mean:.4} +- {sd:.4}");
    }
    print!("{}", table.to_csv(&cfg.hash()?, "dino").as_str());
    Ok(())
}

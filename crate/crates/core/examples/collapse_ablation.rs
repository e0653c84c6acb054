//! Train with both regularisation terms, inclusion only and exclusion only,
//! and compare mAP with how concentrated the attention becomes.

use span::runner::{ablate_collapse, ablation_csv, RunConfig};
use span::span_reg::TemplateKind;
use span::synthdata::generate_corpus;
use span::templates::build_template_set;

fn main() -> span::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let mut cfg = RunConfig::span(TemplateKind::GlobalAverage);
    cfg.distill.epochs = epochs;
    let corpus = generate_corpus(&cfg.corpus)?;
    let set = build_template_set(TemplateKind::GlobalAverage, &corpus, &cfg.templates, None)?;
    let rows = ablate_collapse(&cfg, &corpus, &set)?;
    print!("{}", ablation_csv(&rows, &cfg.hash()?).as_str());
    Ok(())
}

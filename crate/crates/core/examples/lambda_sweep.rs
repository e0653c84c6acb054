//! A small grid search over the inclusion and exclusion strengths.

use span::runner::{sweep_lambda, RunConfig};
use span::span_reg::TemplateKind;
use span::synthdata::{generate_corpus, COMPONENT_NAMES};
use span::templates::build_template_set;

fn main() -> span::Result<()> {
    let mut cfg = RunConfig::span(TemplateKind::SpatialHeuristic);
    cfg.distill.epochs = 1;
    cfg.eval.lambda_values = vec![1e-4, 1e-2];
    let corpus = generate_corpus(&cfg.corpus)?;
    let set = build_template_set(TemplateKind::SpatialHeuristic, &corpus, &cfg.templates, None)?;
    let result = sweep_lambda(&cfg, &corpus, &set)?;
    print!("{}", result.to_csv(&cfg.hash()?, &COMPONENT_NAMES).as_str());
    println!("best (inclusion, exclusion): {:?}", result.best);
    Ok(())
}

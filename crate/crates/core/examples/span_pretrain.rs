//! SPAN pretraining: DINO plus attention regularisation of three heads toward
//! deformable knowledge templates.
//!
//! `cargo run --release --example span_pretrain -- [epochs] [template kind]`

use span::runner::{evaluate_attention, pretrain, RunConfig};
use span::span_reg::TemplateKind;
use span::synthdata::{generate_corpus, Split};
use span::templates::build_template_set;

fn main() -> span::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let kind = args.next().map_or(Ok(TemplateKind::Deformable), |k| TemplateKind::parse(&k))?;
    let mut cfg = RunConfig::span(kind);
    cfg.distill.epochs = epochs;
    let corpus = generate_corpus(&cfg.corpus)?;
    let templates = build_template_set(kind, &corpus, &cfg.templates, None)?;
    println!("{} templates of kind {}", templates.len(), kind.as_str());

    let state = pretrain(&cfg, &corpus, Some(&templates), None, |e, recs| {
        let n = recs.len() as f64;
        println!(
            "epoch {} dino {:.4} span {:+.5}",
            e + 1,
            recs.iter().map(|r| r.dino_loss).sum::<f64>() / n,
            recs.iter().map(|r| r.span_loss).sum::<f64>() / n
        );
    })?;
    let report = evaluate_attention(&cfg, &state.pair.teacher, &corpus, Split::ProbeTest)?;
    println!("assigned-head mAP {:.4}, per component {:?}", report.result.map(), report.result.component_ap());
    println!("max-over-heads mAP {:.4}", report.max_over_heads.map());
    Ok(())
}

//! Build all three template kinds and compare them against ground truth.

use span::span_reg::TemplateKind;
use span::synthdata::{generate_corpus, CorpusConfig};
use span::templates::{build_template_set, mean_iou, TemplateConfig};

fn main() -> span::Result<()> {
    let corpus = generate_corpus(&CorpusConfig { n_samples: 96, ..CorpusConfig::default() })?;
    let cache = std::env::temp_dir().join("span-template-cache");
    for kind in TemplateKind::ALL {
        let set = build_template_set(kind, &corpus, &TemplateConfig::default(), Some(&cache))?;
        println!("{:<18} {:>3} template(s), mean IoU vs ground truth {:.3}", kind.as_str(), set.len(), mean_iou(&set, &corpus)?);
    }
    println!("cached under {}", cache.display());
    Ok(())
}

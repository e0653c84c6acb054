//! Generate the synthetic corpus, write it as PGM files and reload it.
//!
//! `cargo run --example generate_corpus -- [out_dir]`

use span::synthdata::{generate_corpus, load_corpus, save_corpus, CorpusConfig, Split, COMPONENT_NAMES};

fn main() -> span::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("span-corpus"), Into::into);
    let config = CorpusConfig::default();
    let corpus = generate_corpus(&config)?;
    for split in Split::ALL {
        let members = corpus.split(split);
        let positives = members.iter().filter(|s| s.label == 1).count();
        println!("{:<12} {:>4} samples, {:>3} with a lesion", split.as_str(), members.len(), positives);
    }
    let ex = corpus.exemplar()?;
    for (c, name) in COMPONENT_NAMES.iter().enumerate() {
        println!("exemplar {name}: {} px", ex.mask_area(c));
    }
    save_corpus(&corpus, &out)?;
    assert_eq!(load_corpus(&out)?, corpus);
    println!("wrote and reloaded {}", out.display());
    Ok(())
}

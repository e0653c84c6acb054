//! Plain DINO self-distillation for a few epochs, with checkpoint and resume.
//!
//! `cargo run --release --example dino_pretrain -- [epochs]`

use span::augment::Regime;
use span::runner::{evaluate_attention, load_state, pretrain, RunConfig, CHECKPOINT_STEM};
use span::synthdata::{generate_corpus, Split};

fn main() -> span::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let mut cfg = RunConfig::dino(Regime::DomainSpecific);
    cfg.distill.epochs = epochs;
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = tempfile_dir("span-dino");

    // Stop after one epoch, then resume to the full length from the checkpoint.
    let first = RunConfig { distill: span::distill::DistillConfig { epochs: 1, ..cfg.distill }, ..cfg.clone() };
    pretrain(&first, &corpus, None, Some(&dir), |e, r| println!("epoch {} dino loss {:.4}", e + 1, r.iter().map(|s| s.dino_loss).sum::<f64>() / r.len() as f64))?;
    let state = pretrain(&cfg, &corpus, None, Some(&dir), |e, r| println!("epoch {} dino loss {:.4}", e + 1, r.iter().map(|s| s.dino_loss).sum::<f64>() / r.len() as f64))?;
    assert_eq!(load_state(&dir.join(CHECKPOINT_STEM))?, state);

    let report = evaluate_attention(&cfg, &state.pair.teacher, &corpus, Split::ProbeTest)?;
    println!("teacher attention mAP (max over heads): {:.4}", report.result.map());
    println!("loss log: {}", dir.join("loss.csv").display());
    Ok(())
}

fn tempfile_dir(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

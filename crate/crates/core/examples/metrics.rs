//! The evaluation metrics on small hand-made inputs.

use span::eval::{auc, average_precision, linear_probe, pointing_game, ProbeConfig};

fn main() -> span::Result<()> {
    let ap = average_precision(&[0.9, 0.8, 0.1, 0.05], &[1, 0, 1, 0])?;
    println!("AP of [0.9, 0.8, 0.1, 0.05] against [1, 0, 1, 0]: {ap:.4}");

    let gt = [0u8, 1, 1, 0];
    let hit = [0.1, 0.7, 0.2, 0.0];
    let miss = [0.9, 0.1, 0.0, 0.0];
    println!("pointing game, 3 hits and 1 miss: {}", pointing_game(&[&hit, &hit, &hit, &miss], &[&gt, &gt, &gt, &gt])?);

    println!("AUC of positives {{0.9, 0.4}} vs negatives {{0.5, 0.1}}: {}", auc(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0])?);

    let train: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64 * 2.0 + (i as f64 * 0.37).sin() * 0.3, (i as f64).cos()]).collect();
    let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
    let r = linear_probe(&train[..12], &labels[..12], &train[12..], &labels[12..], &ProbeConfig::default())?;
    println!("linear probe on a separable toy: AUC {:.3}", r.mean_auc);
    Ok(())
}

//! Register the exemplar onto another corpus image with the b-spline
//! free-form deformation and carry its segmentation across.

use span::bspline::{register, warp_image, warp_mask, RegistrationConfig};
use span::synthdata::{generate_corpus, CorpusConfig, Split, COMPONENT_NAMES};
use span::templates::iou;

fn main() -> span::Result<()> {
    let corpus = generate_corpus(&CorpusConfig { n_samples: 64, ..CorpusConfig::default() })?;
    let exemplar = corpus.exemplar()?;
    let target = corpus.split(Split::Pretrain)[0];
    let (w, h) = (target.width, target.height);
    let config = RegistrationConfig::default();
    let (grid, diag) = register(&target.image_f64(), &exemplar.image_f64(), w, h, &config)?;
    println!("MSE {:.6} -> {:.6} in {} iterations, displacement RMS {:.3} px", diag.initial_mse, diag.final_mse, diag.records.len(), grid.field_rms());

    let warped = warp_image(&exemplar.image_f64(), &grid)?;
    let mse: f64 = warped.iter().zip(target.image_f64()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (w * h) as f64;
    println!("warped exemplar vs target MSE {mse:.6}");
    for (c, name) in COMPONENT_NAMES.iter().enumerate() {
        let before = iou(&exemplar.masks[c], &target.masks[c]);
        let after = iou(&warp_mask(&exemplar.masks[c], &grid)?, &target.masks[c]);
        println!("{name:<10} IoU with target mask: {before:.3} unwarped, {after:.3} warped");
    }
    print!("{}", diag.to_csv("example").as_str().lines().take(6).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}

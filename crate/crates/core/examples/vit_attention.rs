//! Run the ViT on a few images and inspect the last layer's [CLS] attention.

use span::synthdata::{generate_corpus, CorpusConfig};
use span::vit::{extract_cls_attention, ImageBatch, ParameterSet, ViTConfig};

fn main() -> span::Result<()> {
    let corpus = generate_corpus(&CorpusConfig { n_samples: 64, ..CorpusConfig::default() })?;
    let config = ViTConfig::default();
    let model = ParameterSet::<f32>::init(&config, 0)?;
    println!("parameters: {}", model.len());
    let images: Vec<Vec<f32>> = corpus.samples.iter().take(4).map(|s| s.image_f32()).collect();
    let batch = ImageBatch::from_images(config.image_size, images.iter().map(Vec::as_slice))?;
    let fwd = model.forward(&batch)?;
    for b in 0..batch.len() {
        let stack = extract_cls_attention(&fwd, b, (64, 64))?;
        for h in 0..stack.n_heads {
            let patches: f64 = stack.head_patches(h).iter().sum();
            // Patch mass plus the dropped [CLS] self weight is the whole row.
            println!("image {b} head {h}: patch mass {patches:.4} + cls {:.4} = {:.4}", stack.cls_self[h], patches + stack.cls_self[h]);
        }
    }
    Ok(())
}

//! Draw views under both augmentation regimes and carry a knowledge map
//! through the geometric part of each view.

use span::augment::{make_view_set, transform_knowledge_map, AugmentParams, Regime};
use span::synthdata::{generate_sample, CorpusConfig};

fn main() -> span::Result<()> {
    let sample = generate_sample(&CorpusConfig::default(), 7, 0)?;
    for regime in [Regime::DomainAgnostic, Regime::DomainSpecific] {
        let params = AugmentParams::for_regime(regime);
        let views = make_view_set(&sample.image_f32(), sample.width, sample.height, 42, &params, regime)?;
        println!("{}: {} global, {} local views", regime.as_str(), views.global_views.len(), views.local_views.len());
        for v in &views.global_views {
            let g = &v.recipe.geometric;
            let map = transform_knowledge_map(&sample.masks[0], &v.recipe);
            let inside = map.iter().filter(|&&m| m == 1).count();
            println!(
                "  crop at ({:.1}, {:.1}) size {:.1}x{:.1}, flip {}, rot {:+.1} deg, shift ({:+.3}, {:+.3}): left lobe covers {inside} of {} px",
                g.crop.x0,
                g.crop.y0,
                g.crop.width,
                g.crop.height,
                g.hflip,
                g.rotation_deg,
                g.translation[0],
                g.translation[1],
                map.len()
            );
        }
    }
    Ok(())
}

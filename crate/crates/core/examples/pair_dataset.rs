//! Procedural content images, the three style transforms, and a held-out
//! evaluation set. Writes `pairs.png` (content, then each transform) to the
//! output directory.
//!
//! cargo run --release --example pair_dataset -- work

use std::path::PathBuf;

use pairlora::evaluation::perceptual_distance;
use pairlora::io::{grid, save_png};
use pairlora::pairgen::{gen_content, gen_eval_set, make_pair, posterize, Category, ContentSpec, StyleTransform};

fn main() -> pairlora::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "work".into()));
    let transforms = [
        StyleTransform::Posterize { levels: 8 },
        StyleTransform::FlattenBackground { hue: 0.6 },
        StyleTransform::OutlineOverlay { threshold: 0.15 },
    ];
    let mut tiles = Vec::new();
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let content = gen_content(&ContentSpec::new(cat, 100 + i as u64, 7));
        tiles.push(content.clone());
        for tf in &transforms {
            let styled = tf.apply(&content)?;
            println!("{:>9} {:<20} distance {:.4}", cat.name(), tf.to_string(), perceptual_distance(&content, &styled)?);
            tiles.push(styled);
        }
    }
    save_png(&grid(&tiles, 1 + transforms.len())?, &out.join("pairs.png"))?;

    let spec = ContentSpec::new(Category::Face, 12345, 777);
    let pair = make_pair(&spec, &transforms[0], 0)?;
    println!("training prompts: content {:?}, style {:?}", pair.c_content.tokens(), pair.c_style.tokens());
    let p = posterize(&pair.x_content, 8)?;
    println!("posterize is idempotent: {}", posterize(&p, 8)? == p);

    let set = gen_eval_set(&spec, &transforms[0], 10, 10)?;
    println!(
        "held-out: {} same-category, {} different-category",
        set.same_category.len(),
        set.different_category.len()
    );
    Ok(())
}

use std::collections::BTreeSet;

use crate::dataset::template::render_text;
use crate::error::Result;
use crate::raster::{CategoryVocabulary, SemanticMask, Triplet, BACKGROUND};

/// One triplet per non-background class, each isolating that class in the
/// mask. The image is left untouched.
pub fn category_augment(triplet: &Triplet, vocab: &CategoryVocabulary) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(triplet.classes.len());
    for &k in &triplet.classes {
        let ids = triplet
            .mask
            .classes()
            .iter()
            .map(|&c| if c == k { k } else { BACKGROUND })
            .collect();
        let mask = SemanticMask::new(triplet.width(), triplet.height(), ids, triplet.mask.vocab_ref())?;
        let text = render_text(&BTreeSet::from([k]), vocab)?;
        out.push(Triplet::new(
            format!("{}-k{k}", triplet.id),
            triplet.image.clone(),
            mask,
            text,
            triplet.source.clone(),
            vocab,
        )?);
    }
    Ok(out)
}

//! The caption template `A satellite image of {name}, {name}, ...`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::raster::{CategoryVocabulary, ClassId, BACKGROUND};

pub const PREFIX: &str = "A satellite image of ";
const SEPARATOR: &str = ", ";
const BACKGROUND_NAME: &str = "background";

/// Renders class names in ascending id order.
pub fn render_text(classes: &BTreeSet<ClassId>, vocab: &CategoryVocabulary) -> Result<String> {
    if classes.is_empty() {
        return Err(Error::invalid("cannot describe an empty class set"));
    }
    let mut names = Vec::with_capacity(classes.len());
    for &id in classes {
        if id == BACKGROUND {
            return Err(Error::invalid("background is not a describable class"));
        }
        names.push(
            vocab
                .name(id)
                .ok_or_else(|| Error::invalid(format!("class id {id} not in vocabulary")))?,
        );
    }
    Ok(format!("{PREFIX}{}", names.join(SEPARATOR)))
}

/// Like [`render_text`], but a background-only set renders as
/// `A satellite image of background`.
pub fn describe(classes: &BTreeSet<ClassId>, vocab: &CategoryVocabulary) -> Result<String> {
    if classes.is_empty() {
        Ok(format!("{PREFIX}{BACKGROUND_NAME}"))
    } else {
        render_text(classes, vocab)
    }
}

/// Splits a caption into its class names without consulting a vocabulary.
pub fn parse_names(text: &str) -> Result<Vec<&str>> {
    let body = text
        .strip_prefix(PREFIX)
        .ok_or_else(|| Error::Parse(format!("{text:?} does not start with {PREFIX:?}")))?;
    let names: Vec<&str> = body.split(SEPARATOR).collect();
    if names.iter().any(|n| n.is_empty() || n.trim() != *n || n.contains(',')) {
        return Err(Error::Parse(format!("malformed class list in {text:?}")));
    }
    Ok(names)
}

/// Inverse of [`render_text`]; accepts names in any order.
pub fn parse_text(text: &str, vocab: &CategoryVocabulary) -> Result<BTreeSet<ClassId>> {
    let names = parse_names(text)?;
    if names == [BACKGROUND_NAME] {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for name in names {
        match vocab.id_of(name) {
            Some(id) if id != BACKGROUND => {
                out.insert(id);
            }
            _ => return Err(Error::Parse(format!("unknown class name {name:?}"))),
        }
    }
    Ok(out)
}

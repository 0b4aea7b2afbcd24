//! Manifest diagnostics: class histograms, foreground fractions and a check
//! of the two-population intensity model against the observed pixels.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cfcomp::mixed_stats;
use crate::dataset::DatasetManifest;
use crate::error::Result;
use crate::raster::{foreground_fraction, Triplet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Predicted vs observed whole-image intensity moments for one record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixCheck {
    pub id: String,
    pub alpha: f64,
    pub predicted_mean: f64,
    pub observed_mean: f64,
    pub predicted_var: f64,
    pub observed_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub records: usize,
    /// Pixels per class name, background included.
    pub class_pixels: BTreeMap<String, u64>,
    /// Records containing each foreground class.
    pub class_records: BTreeMap<String, usize>,
    pub sources: BTreeMap<String, usize>,
    pub foreground_fraction: Option<Summary>,
    /// Largest relative error of the predicted mean/variance over records
    /// with both populations present.
    pub mix_max_rel_error: Option<f64>,
    pub mix: Vec<MixCheck>,
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        s += v;
        s2 += v * v;
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = s / n as f64;
    (mean, (s2 / n as f64 - mean * mean).max(0.0), n)
}

/// Channel-averaged intensities on the 0-1 scale.
fn intensities(t: &Triplet) -> Vec<f64> {
    let ch = t.image.channels();
    t.image
        .data()
        .chunks_exact(ch)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / (255.0 * ch as f64))
        .collect()
}

fn mix_check(t: &Triplet) -> Result<Option<MixCheck>> {
    let values = intensities(t);
    let fg = |want: bool| {
        values
            .iter()
            .zip(t.mask.classes())
            .filter(move |(_, &c)| (c != 0) == want)
            .map(|(&v, _)| v)
    };
    let (mu_o, var_o, n_o) = moments(fg(true));
    let (mu_b, var_b, n_b) = moments(fg(false));
    if n_o == 0 || n_b == 0 {
        return Ok(None);
    }
    let alpha = foreground_fraction(&t.mask)?;
    let predicted = mixed_stats(mu_o, var_o, mu_b, var_b, alpha)?;
    let (mu, var, _) = moments(values.iter().copied());
    Ok(Some(MixCheck {
        id: t.id.clone(),
        alpha,
        predicted_mean: predicted.mu_mix,
        observed_mean: mu,
        predicted_var: predicted.var_mix,
        observed_var: var,
    }))
}

pub fn dataset_stats(manifest: &DatasetManifest) -> Result<DatasetStats> {
    let mut class_pixels = BTreeMap::new();
    let mut class_records = BTreeMap::new();
    let mut sources = BTreeMap::new();
    let mut fractions = Vec::with_capacity(manifest.len());
    let mut mix = Vec::new();
    let name = |c| manifest.vocab.name(c).unwrap_or("?").to_string();
    for t in &manifest.triplets {
        for &c in t.mask.classes() {
            *class_pixels.entry(name(c)).or_insert(0u64) += 1;
        }
        for &c in &t.classes {
            *class_records.entry(name(c)).or_insert(0) += 1;
        }
        *sources.entry(t.source.clone()).or_insert(0) += 1;
        fractions.push(foreground_fraction(&t.mask)?);
        if let Some(m) = mix_check(t)? {
            mix.push(m);
        }
    }
    let rel = |p: f64, o: f64| (p - o).abs() / o.abs().max(1e-12);
    let mix_max_rel_error = mix
        .iter()
        .map(|m| rel(m.predicted_mean, m.observed_mean).max(rel(m.predicted_var, m.observed_var)))
        .reduce(f64::max);
    Ok(DatasetStats {
        records: manifest.len(),
        class_pixels,
        class_records,
        sources,
        foreground_fraction: Summary::of(&fractions),
        mix_max_rel_error,
        mix,
    })
}

//! Corpus distribution report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SchemaViolation, SizeCategory, SourceDataset, VlirSample};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub crops: usize,
    /// Number of samples with a given number of crops.
    pub crops_per_image: BTreeMap<usize, usize>,
    pub sources: BTreeMap<SourceDataset, usize>,
    /// Size category of each sample's first crop (one per sample).
    pub size_categories: BTreeMap<SizeCategory, usize>,
    /// Size category of every crop.
    pub crop_size_categories: BTreeMap<SizeCategory, usize>,
}

impl CorpusStats {
    /// All-zero report with every source and category listed.
    pub fn empty() -> Self {
        CorpusStats {
            sources: SourceDataset::ALL.iter().map(|&d| (d, 0)).collect(),
            size_categories: SizeCategory::ALL.iter().map(|&c| (c, 0)).collect(),
            crop_size_categories: SizeCategory::ALL.iter().map(|&c| (c, 0)).collect(),
            ..Default::default()
        }
    }

    /// Internal consistency of the totals.
    pub fn check(&self) -> Result<(), String> {
        let hist_images: usize = self.crops_per_image.values().sum();
        let hist_crops: usize = self.crops_per_image.iter().map(|(k, v)| k * v).sum();
        let per_source: usize = self.sources.values().sum();
        let first: usize = self.size_categories.values().sum();
        let all: usize = self.crop_size_categories.values().sum();
        let checks = [
            ("histogram images", hist_images, self.samples),
            ("histogram crops", hist_crops, self.crops),
            ("per-source samples", per_source, self.samples),
            ("first-crop categories", first, self.samples),
            ("all-crop categories", all, self.crops),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(format!("{what}: {got} != {want}"));
            }
        }
        Ok(())
    }
}

/// Tally a corpus. Samples without crops or with a category that does not
/// match the stored ratio are schema violations.
pub fn corpus_stats<'a>(corpus: impl IntoIterator<Item = &'a VlirSample>) -> Result<CorpusStats, SchemaViolation> {
    let mut s = CorpusStats::empty();
    for sample in corpus {
        let violation = |reason: String| SchemaViolation {
            sample_id: sample.sample_id.clone(),
            reason,
        };
        let first = sample.crops.first().ok_or_else(|| violation("no crop records".into()))?;
        for c in &sample.crops {
            if !(c.area_ratio > 0.0 && c.area_ratio <= 1.0) {
                return Err(violation(format!("area ratio {} outside (0, 1]", c.area_ratio)));
            }
            if c.category != SizeCategory::from_ratio(c.area_ratio) {
                return Err(violation(format!("category {:?} does not match ratio {}", c.category, c.area_ratio)));
            }
            *s.crop_size_categories.entry(c.category).or_default() += 1;
        }
        s.samples += 1;
        s.crops += sample.crops.len();
        *s.crops_per_image.entry(sample.crops.len()).or_default() += 1;
        *s.sources.entry(sample.source).or_default() += 1;
        *s.size_categories.entry(first.category).or_default() += 1;
    }
    Ok(s)
}

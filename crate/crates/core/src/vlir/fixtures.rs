//! A synthetic corpus with the published distribution: 11,810 samples
//! whose crop-count histogram, source mix and first-crop size mix match
//! the reported figures exactly. Every sample passes offline validation.

use sha2::{Digest, Sha256};

use super::{
    ConstructionPath, CropRecord, FilterOutcome, ImageRef, Provenance, SizeCategory, SourceDataset, VlirSample,
    SCHEMA_VERSION,
};
use crate::types::BBox;

pub const CROPS_PER_IMAGE: [(usize, usize); 7] = [(1, 11105), (2, 607), (3, 68), (4, 16), (5, 8), (6, 3), (7, 3)];

pub const SOURCES: [(SourceDataset, usize); 5] = [
    (SourceDataset::GQA, 4057),
    (SourceDataset::TextVQA, 3267),
    (SourceDataset::DocVQA, 1497),
    (SourceDataset::InfographicsVQA, 1497),
    (SourceDataset::VSR, 1492),
];

/// Size category of each sample's first crop.
pub const FIRST_CROP_SIZES: [(SizeCategory, usize); 4] = [
    (SizeCategory::VerySmall, 5280),
    (SizeCategory::Small, 4043),
    (SizeCategory::Medium, 1914),
    (SizeCategory::Large, 573),
];

pub const SAMPLES: usize = 11_810;
const SIDE: u32 = 1000;

fn expand<T: Copy>(counts: &[(T, usize)]) -> Vec<T> {
    counts.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect()
}

fn first_box(cat: SizeCategory) -> BBox {
    // Ratios 0.0036, 0.09, 0.36 and 0.64 on a 1000 x 1000 image.
    let side = match cat {
        SizeCategory::VerySmall => 60,
        SizeCategory::Small => 300,
        SizeCategory::Medium => 600,
        SizeCategory::Large => 800,
    };
    BBox {
        x1: 10,
        y1: 10,
        x2: 10 + side,
        y2: 10 + side,
    }
}

fn extra_box(k: usize) -> BBox {
    let x = 100 + 60 * k as u32;
    BBox {
        x1: x,
        y1: 920,
        x2: x + 40,
        y2: 960,
    }
}

/// The full fixture corpus, in a fixed order.
pub fn reference_corpus() -> Vec<VlirSample> {
    let hist = expand(&CROPS_PER_IMAGE);
    let sources = expand(&SOURCES);
    let sizes = expand(&FIRST_CROP_SIZES);
    debug_assert!(hist.len() == SAMPLES && sources.len() == SAMPLES && sizes.len() == SAMPLES);
    (0..SAMPLES)
        .map(|i| {
            // Co-prime strides spread the three marginals independently.
            let n_crops = hist[i];
            let source = sources[(i * 7919) % SAMPLES];
            let size = sizes[(i * 104_729) % SAMPLES];
            let boxes: Vec<BBox> = std::iter::once(first_box(size)).chain((1..n_crops).map(extra_box)).collect();
            let mut think = String::from("<think>");
            for (k, b) in boxes.iter().enumerate() {
                think.push_str(&format!("Step {}: I zoom in on the relevant region. {}\n", k + 1, b.to_command()));
            }
            let answer = if i % 2 == 0 { "yes" } else { "no" };
            let rationale = format!("{think}The region answers the question.</think>\n<answer>{answer}</answer>");
            let sample_id = format!("ref-{i:05}");
            VlirSample {
                schema_version: SCHEMA_VERSION,
                image: ImageRef {
                    sha256: hex::encode(Sha256::digest(sample_id.as_bytes())),
                    width: SIDE,
                    height: SIDE,
                },
                sample_id,
                source,
                question: "Is the highlighted detail present?".into(),
                answer: answer.into(),
                rationale,
                crops: boxes.iter().map(|&b| CropRecord::new(b, (SIDE, SIDE))).collect(),
                provenance: Provenance {
                    generator: "fixture".into(),
                    path: if i % 3 == 0 {
                        ConstructionPath::BboxPrompt
                    } else {
                        ConstructionPath::QaPrompt
                    },
                    attempts: 1,
                    region_filter: Some(FilterOutcome::Accept),
                    reasoning_filter: Some(FilterOutcome::Accept),
                },
            }
        })
        .collect()
}

//! Controlled corruption of executed crop boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{make_bbox, BBox, CropAction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// Swap in a uniformly drawn box that differs from the original.
    #[serde(alias = "REPLACE_RANDOM")]
    ReplaceRandom,
    /// Shift and rescale the box by up to `jitter` of its size, then clamp.
    #[serde(alias = "JITTER")]
    Jitter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Probability that a box is kept unchanged.
    pub grounding_accuracy: f64,
    pub kind: PerturbKind,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.5
}

impl PerturbSpec {
    pub fn new(grounding_accuracy: f64, kind: PerturbKind, seed: u64) -> Self {
        PerturbSpec {
            grounding_accuracy,
            kind,
            jitter: default_jitter(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.grounding_accuracy) {
            return Err(format!("grounding accuracy {} outside [0, 1]", self.grounding_accuracy));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(format!("jitter magnitude {} must be finite and >= 0", self.jitter));
        }
        Ok(())
    }
}

/// Seeded box corrupter. Each call consumes randomness in a fixed order,
/// so a given seed always yields the same sequence of decisions.
#[derive(Debug, Clone)]
pub struct Perturber {
    spec: PerturbSpec,
    rng: ChaCha8Rng,
}

impl Perturber {
    pub fn new(spec: &PerturbSpec) -> Self {
        Perturber {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        }
    }

    /// A stream specific to one episode, independent across episodes.
    pub fn for_episode(spec: &PerturbSpec, episode_seed: u64) -> Self {
        Perturber {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(super::group::splitmix64(spec.seed ^ super::group::splitmix64(episode_seed))),
        }
    }

    pub fn perturb_box(&mut self, bbox: &BBox, dims: (u32, u32)) -> BBox {
        let keep: f64 = self.rng.random();
        if keep < self.spec.grounding_accuracy {
            return *bbox;
        }
        match self.spec.kind {
            PerturbKind::ReplaceRandom => self.random_box(bbox, dims),
            PerturbKind::Jitter => self.jitter_box(bbox, dims),
        }
    }

    fn span(&mut self, len: u32) -> (u32, u32) {
        let a = self.rng.random_range(0..len);
        let b = self.rng.random_range(0..len);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        (lo, hi + 1)
    }

    fn random_box(&mut self, original: &BBox, (w, h): (u32, u32)) -> BBox {
        if w == 1 && h == 1 {
            return *original;
        }
        loop {
            let (x1, x2) = self.span(w);
            let (y1, y2) = self.span(h);
            let b = BBox { x1, y1, x2, y2 };
            if b != *original {
                return b;
            }
        }
    }

    fn jitter_box(&mut self, b: &BBox, dims: (u32, u32)) -> BBox {
        let j = self.spec.jitter;
        let (bw, bh) = (b.width() as f64, b.height() as f64);
        let cx = (b.x1 + b.x2) as f64 / 2.0 + self.rng.random_range(-j..=j) * bw;
        let cy = (b.y1 + b.y2) as f64 / 2.0 + self.rng.random_range(-j..=j) * bh;
        let s = 1.0 + self.rng.random_range(-j..=j);
        let (hw, hh) = ((bw * s / 2.0).max(0.5), (bh * s / 2.0).max(0.5));
        let r = |v: f64| v.round() as i64;
        make_bbox(r(cx - hw), r(cy - hh), r(cx + hw), r(cy + hh), dims).unwrap_or(*b)
    }
}

/// Apply the perturbation to each valid action independently; invalid actions
/// pass through untouched.
pub fn perturb_grounding(actions: &[CropAction], spec: &PerturbSpec, dims: (u32, u32)) -> Vec<CropAction> {
    let mut p = Perturber::new(spec);
    actions
        .iter()
        .map(|a| {
            let mut out = a.clone();
            if let Some(b) = a.bbox.filter(|_| a.valid) {
                let nb = p.perturb_box(&b, dims);
                if nb != b {
                    out.bbox = Some(nb);
                    out.coords = [nb.x1 as i64, nb.y1 as i64, nb.x2 as i64, nb.y2 as i64];
                    out.raw_text = nb.to_command();
                }
            }
            out
        })
        .collect()
}

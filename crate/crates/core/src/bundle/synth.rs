//! Seeded synthetic bundles with planted content groups.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bundle, BundleError, EmbeddingMatrix, ImageRecord, Label, Split, TextTable};
use crate::linalg;

const STEMS: &[&str] = &[
    "beach", "office", "party", "bedroom", "street", "kitchen", "concert", "garden", "stadium",
    "museum", "forest", "clinic", "library", "harbor", "market", "church",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of planted content groups.
    pub groups: usize,
    pub images_per_group: usize,
    pub dim: usize,
    pub words_per_group: usize,
    pub tags_per_image: usize,
    /// Fraction of private images per group; one entry per group.
    pub private_bias: Vec<f64>,
    /// Per-coordinate Gaussian spread of images and words around their group center.
    pub sigma: f64,
    /// Probability that a tag is replaced by a word from another group.
    pub tag_noise: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl SynthSpec {
    /// `groups` groups alternating mostly-private and mostly-public.
    pub fn new(groups: usize, images_per_group: usize, dim: usize, sigma: f64, tag_noise: f64) -> Self {
        let private_bias = (0..groups)
            .map(|g| if g % 2 == 0 { 0.95 } else { 0.05 })
            .collect();
        SynthSpec {
            groups,
            images_per_group,
            dim,
            words_per_group: 12,
            tags_per_image: 8,
            private_bias,
            sigma,
            tag_noise,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: &str| Err(BundleError::InvalidSpec(m.to_string()));
        if self.groups < 1 {
            return bad("need at least one group");
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return bad("sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.tag_noise) {
            return bad("tag noise rate must lie in [0, 1]");
        }
        if self.private_bias.len() != self.groups
            || self.private_bias.iter().any(|b| !(0.0..=1.0).contains(b))
        {
            return bad("private_bias needs one value in [0, 1] per group");
        }
        if self.images_per_group == 0 || self.dim == 0 {
            return bad("images_per_group and dim must be positive");
        }
        if self.tags_per_image == 0 || self.tags_per_image > self.words_per_group {
            return bad("tags_per_image must be in 1..=words_per_group");
        }
        let fr = self.train_fraction + self.val_fraction;
        if self.train_fraction < 0.0 || self.val_fraction < 0.0 || fr > 1.0 {
            return bad("split fractions must be non-negative and sum to at most 1");
        }
        Ok(())
    }

    pub fn word(&self, group: usize, i: usize) -> String {
        match STEMS.get(group) {
            Some(stem) => format!("{stem}{i:02}"),
            None => format!("group{group}w{i:02}"),
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Unit-norm group centers, pairwise separated by at least `min_sep`.
fn group_centers(k: usize, dim: usize, min_sep: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    while centers.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if centers.len() < dim {
            // Gram-Schmidt against the existing centers gives orthonormal centers
            for c in &centers {
                let p = linalg::dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        if let Some(u) = linalg::normalized(&v) {
            centers.push(u);
        }
    }
    let mut closest = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            closest = closest.min(linalg::euclidean(&centers[i], &centers[j]));
        }
    }
    if closest.is_finite() && closest < min_sep {
        let scale = min_sep / closest * 1.01;
        centers.iter_mut().flatten().for_each(|x| *x *= scale);
    }
    centers
}

/// Deterministic synthetic bundle with `spec.groups` planted content groups.
pub fn synth_bundle(spec: &SynthSpec, seed: u64) -> Result<Bundle, BundleError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = group_centers(spec.groups, spec.dim, 6.0 * spec.sigma, &mut rng);
    let noise = Normal::new(0.0, spec.sigma).unwrap();
    let jitter = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        center.iter().map(|c| f32_round(c + noise.sample(rng))).collect()
    };

    let mut words = Vec::new();
    let mut word_rows = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        for i in 0..spec.words_per_group {
            words.push(spec.word(g, i));
            word_rows.push(jitter(c, &mut rng));
        }
    }

    struct Draft {
        group: usize,
        split: Split,
        label: Label,
        tags: Vec<String>,
        embedding: Vec<f64>,
    }
    let mut drafts = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        let n = spec.images_per_group;
        let n_train = (n as f64 * spec.train_fraction).round() as usize;
        let n_val = ((n as f64 * spec.val_fraction).round() as usize).min(n - n_train.min(n));
        let mut splits: Vec<Split> = (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect();
        splits.shuffle(&mut rng);
        for split in splits {
            let label = if rng.gen::<f64>() < spec.private_bias[g] {
                Label::Private
            } else {
                Label::Public
            };
            let mut own: Vec<usize> = (0..spec.words_per_group).collect();
            own.shuffle(&mut rng);
            let mut tags: Vec<String> = Vec::with_capacity(spec.tags_per_image);
            for &w in own.iter().take(spec.tags_per_image) {
                let mut tag = spec.word(g, w);
                if spec.groups > 1 && rng.gen::<f64>() < spec.tag_noise {
                    loop {
                        let mut other = rng.gen_range(0..spec.groups - 1);
                        if other >= g {
                            other += 1;
                        }
                        let cand = spec.word(other, rng.gen_range(0..spec.words_per_group));
                        if !tags.contains(&cand) {
                            tag = cand;
                            break;
                        }
                    }
                }
                tags.push(tag);
            }
            drafts.push(Draft {
                group: g,
                split,
                label,
                tags,
                embedding: jitter(c, &mut rng),
            });
        }
    }
    drafts.shuffle(&mut rng);

    let mut records = Vec::with_capacity(drafts.len());
    let mut rows = Vec::with_capacity(drafts.len());
    for (i, d) in drafts.into_iter().enumerate() {
        records.push(ImageRecord {
            id: format!("img-{i:05}-g{}", d.group),
            split: d.split,
            label: Some(d.label),
            tags: d.tags,
        });
        rows.push(d.embedding);
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let bundle = Bundle {
        records,
        image_embeddings: EmbeddingMatrix::from_rows(rows, ids)?,
        vocabulary: TextTable::new(EmbeddingMatrix::from_rows(word_rows, words)?)?,
        reduced: None,
        phrases: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Planted group of a synthetic record id (`img-NNNNN-gG`).
pub fn planted_group(id: &str) -> Option<usize> {
    id.rsplit_once("-g").and_then(|(_, g)| g.parse().ok())
}

//! Synthetic domain-shift benchmark generation.
//!
//! Generative process (all draws from one seeded stream, byte-reproducible):
//!
//! 1. Every attribute token gets an embedding row (shared by all encoders,
//!    like a common tokenizer), and its direction in image space is that row
//!    through a fixed benchmark matrix. The token→pixel relationship is
//!    therefore linear and learnable from any attribute subset, so encoders
//!    trained on class attributes generalize to attributes they never saw
//!    (the retrieval salts). A class prototype is the normalized mean of its
//!    attributes' directions; class attribute sets are disjoint.
//! 2. A source sample of class `c` is `prototype_c + noise`, with isotropic
//!    Gaussian spread.
//! 3. The target split applies a fixed domain shift to freshly drawn source
//!    samples: a rotation by `magnitude·π/4` inside a subspace of random
//!    coordinate pairs, an additive bias along a random unit direction, and
//!    extra Gaussian noise. Magnitude 0 reproduces the source distribution
//!    parameters exactly.
//! 4. Retrieval items pair a *salted* image (class attributes plus one
//!    item-unique salt attribute) with the matching attribute-bag caption, so
//!    items of the same class stay distinguishable in both modalities.
//! 5. The capability gap is constructible: the scorer's training split mixes
//!    source pairs with a slice of shifted pairs — over every class in the
//!    `standard` variant, over only the first half of the classes in the
//!    `complementary` variant (strong where covered, weaker elsewhere, so the
//!    adapted student can overtake it overall).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PairSet;
use crate::numcore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    Standard,
    /// Scorer sees shifted data for the first half of the classes only.
    Complementary,
}

impl BenchVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(BenchVariant::Standard),
            "complementary" => Ok(BenchVariant::Complementary),
            other => Err(Error::config(format!("unknown benchmark variant `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::Standard => "standard",
            BenchVariant::Complementary => "complementary",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub classes: usize,
    pub d_in: usize,
    /// Token-embedding width shared by every encoder built on this benchmark.
    pub d_tok: usize,
    pub attrs_per_class: usize,
    /// Shift magnitude in [0, 1]: 0 reproduces the source distribution.
    pub shift: f64,
    pub variant: BenchVariant,
    /// Per-sample Gaussian spread around the prototype.
    pub sample_noise: f64,
    pub student_pairs_per_class: usize,
    pub scorer_pairs_per_class: usize,
    /// Shifted pairs per covered class in the scorer's training split.
    pub scorer_shift_pairs_per_class: usize,
    pub source_eval_samples: usize,
    pub target_samples: usize,
    pub retrieval_items: usize,
    pub caption_samples: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    pub fn desk_default(seed: u64) -> Self {
        Self {
            classes: 20,
            d_in: 32,
            d_tok: 24,
            attrs_per_class: 3,
            shift: 0.6,
            variant: BenchVariant::Standard,
            sample_noise: 0.55,
            student_pairs_per_class: 40,
            scorer_pairs_per_class: 80,
            scorer_shift_pairs_per_class: 24,
            source_eval_samples: 1000,
            target_samples: 2000,
            retrieval_items: 60,
            caption_samples: 120,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub images: Vec<Vec<f64>>,
    /// Attribute bag (class attributes + item salt) describing each image.
    pub captions: Vec<Vec<usize>>,
    pub classes: Vec<usize>,
}

/// The domain-shift transform, kept explicit so magnitude 0 is exactly the
/// identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftTransform {
    /// Disjoint coordinate pairs rotated by `angle`.
    pub rotation_pairs: Vec<(usize, usize)>,
    pub angle: f64,
    pub bias: Vec<f64>,
    pub extra_noise: f64,
}

impl ShiftTransform {
    pub fn apply(&self, v: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = v.to_vec();
        let (sin, cos) = self.angle.sin_cos();
        for &(i, j) in &self.rotation_pairs {
            let (a, b) = (out[i], out[j]);
            out[i] = cos * a - sin * b;
            out[j] = sin * a + cos * b;
        }
        for (o, b) in out.iter_mut().zip(&self.bias) {
            let z: f64 = rng.sample(StandardNormal);
            *o += b + self.extra_noise * z;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftBenchmark {
    pub spec: BenchmarkSpec,
    /// Attribute-token ids per class (disjoint sets).
    pub class_attrs: Vec<Vec<usize>>,
    /// Class attributes plus one salt token per retrieval item.
    pub attr_vocab: usize,
    /// Shared token-embedding table (`attr_vocab × d_tok`).
    pub attr_tokens: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
    pub shift: ShiftTransform,
    pub student_train: PairSet,
    pub scorer_train: PairSet,
    pub source_eval: PairSet,
    pub target_eval: PairSet,
    pub retrieval: RetrievalSet,
    pub caption_eval: PairSet,
}

impl ShiftBenchmark {
    /// Reference attribute set for a caption of the given class.
    pub fn caption_reference(&self, class: usize) -> &[usize] {
        &self.class_attrs[class]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let json = serde_json::to_string(self)
            .map_err(|e| Error::invalid(format!("benchmark serialization failed: {e}")))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint { path: path.display().to_string() });
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("benchmark parse failed: {e}")))
    }
}

fn unit_direction(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if let Ok(u) = numcore::l2_normalize(&v) {
            return u;
        }
    }
}

/// Fraction of the scorer's uncovered-class training pairs whose label is
/// swapped with the partner class (complementary variant only).
const LABEL_MIX_RATE: f64 = 0.2;

pub fn gen_benchmark(spec: &BenchmarkSpec) -> Result<ShiftBenchmark> {
    if spec.classes < 2 {
        return Err(Error::invalid("benchmark needs at least 2 classes"));
    }
    if spec.d_in < 4 {
        return Err(Error::invalid("benchmark needs d_in >= 4"));
    }
    if spec.attrs_per_class == 0 {
        return Err(Error::invalid("benchmark needs at least one attribute per class"));
    }
    if spec.d_tok < 2 {
        return Err(Error::invalid("benchmark needs d_tok >= 2"));
    }
    if !(0.0..=1.0).contains(&spec.shift) {
        return Err(Error::invalid("shift magnitude must be in [0, 1]"));
    }
    // attribute directions must stay distinguishable in image space
    let attr_vocab = spec.classes * spec.attrs_per_class + spec.retrieval_items;
    if attr_vocab > 40 * spec.d_in {
        return Err(Error::invalid(format!(
            "attribute table capacity exceeded: {attr_vocab} attributes in {} dims",
            spec.d_in
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_in;

    let class_attrs: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| (c * spec.attrs_per_class..(c + 1) * spec.attrs_per_class).collect())
        .collect();
    let salt_base = spec.classes * spec.attrs_per_class;

    // token embeddings first; image directions are those rows through one
    // fixed linear map, so the token→pixel relationship is learnable from any
    // attribute subset and generalizes to held-out attributes
    let tok_std = 1.0 / (spec.d_tok as f64).sqrt();
    let attr_tokens: Vec<Vec<f64>> = (0..attr_vocab)
        .map(|_| {
            (0..spec.d_tok)
                .map(|_| tok_std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let g_std = 1.0 / (d as f64).sqrt();
    let token_to_image: Vec<Vec<f64>> = (0..spec.d_tok)
        .map(|_| (0..d).map(|_| g_std * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let attr_dirs: Vec<Vec<f64>> = attr_tokens
        .iter()
        .map(|tok| {
            let mut dir = vec![0.0; d];
            for (tk, grow) in tok.iter().zip(&token_to_image) {
                for (o, g) in dir.iter_mut().zip(grow) {
                    *o += tk * g;
                }
            }
            dir
        })
        .collect();

    let proto_of = |attrs: &[usize]| -> Result<Vec<f64>> {
        let mut p = vec![0.0; d];
        for &a in attrs {
            for (x, y) in p.iter_mut().zip(&attr_dirs[a]) {
                *x += y;
            }
        }
        for x in &mut p {
            *x /= attrs.len() as f64;
        }
        numcore::l2_normalize(&p)
    };

    let prototypes: Vec<Vec<f64>> = class_attrs
        .iter()
        .map(|attrs| proto_of(attrs))
        .collect::<Result<_>>()?;

    // shift transform: rotate ⌊d/4⌋ disjoint coordinate pairs drawn from a
    // seeded permutation, plus additive bias and extra noise
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let rotation_pairs: Vec<(usize, usize)> =
        (0..d / 2).map(|i| (perm[2 * i], perm[2 * i + 1])).collect();
    let bias_dir = unit_direction(d, &mut rng);
    let shift = ShiftTransform {
        rotation_pairs,
        angle: spec.shift * std::f64::consts::FRAC_PI_3,
        bias: bias_dir.iter().map(|b| spec.shift * 0.8 * b).collect(),
        extra_noise: spec.shift * 0.30,
    };

    let noise_std = spec.sample_noise / (d as f64).sqrt();
    let source_sample = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        prototypes[class]
            .iter()
            .map(|&p| p + noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    // student training split: source only
    let mut student_train = PairSet::default();
    for c in 0..spec.classes {
        for _ in 0..spec.student_pairs_per_class {
            let img = source_sample(c, &mut rng);
            student_train.push(img, c);
        }
    }

    // scorer training split: more source pairs, plus a shifted slice
    let covered_classes = match spec.variant {
        BenchVariant::Standard => spec.classes,
        BenchVariant::Complementary => spec.classes / 2,
    };
    // complementary variant: uncovered classes come in partner pairs whose
    // labels are mixed in the scorer's training split. The scorer's learned
    // anchors for such a pair blur together — an error source more training
    // capacity cannot repair — while the student's clean split keeps the
    // pair separated. Covered classes additionally receive a shifted slice.
    let uncovered_partner = |c: usize| -> usize {
        let offset = c - covered_classes;
        let n_uncovered = spec.classes - covered_classes;
        covered_classes + (offset ^ 1).min(n_uncovered.saturating_sub(1))
    };
    let mut scorer_train = PairSet::default();
    for c in 0..spec.classes {
        for _ in 0..spec.scorer_pairs_per_class {
            let img = source_sample(c, &mut rng);
            let label = if c >= covered_classes && rng.gen::<f64>() < LABEL_MIX_RATE {
                uncovered_partner(c)
            } else {
                c
            };
            scorer_train.push(img, label);
        }
        if c < covered_classes {
            for _ in 0..spec.scorer_shift_pairs_per_class {
                let img = source_sample(c, &mut rng);
                scorer_train.push(shift.apply(&img, &mut rng), c);
            }
        }
    }



    let mut source_eval = PairSet::default();
    for i in 0..spec.source_eval_samples {
        let c = i % spec.classes;
        source_eval.push(source_sample(c, &mut rng), c);
    }

    let mut target_eval = PairSet::default();
    for i in 0..spec.target_samples {
        let c = i % spec.classes;
        let img = source_sample(c, &mut rng);
        target_eval.push(shift.apply(&img, &mut rng), c);
    }

    // retrieval items: salted image + salted caption, target-shifted
    let mut retrieval = RetrievalSet { images: Vec::new(), captions: Vec::new(), classes: Vec::new() };
    for i in 0..spec.retrieval_items {
        let c = i % spec.classes;
        let salt = salt_base + i;
        let mut attrs = class_attrs[c].clone();
        attrs.push(salt);
        let proto = proto_of(&attrs)?;
        let img: Vec<f64> = proto
            .iter()
            .map(|&p| p + noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        retrieval.images.push(shift.apply(&img, &mut rng));
        retrieval.captions.push(attrs);
        retrieval.classes.push(c);
    }

    let mut caption_eval = PairSet::default();
    for i in 0..spec.caption_samples {
        let c = i % spec.classes;
        let img = source_sample(c, &mut rng);
        caption_eval.push(shift.apply(&img, &mut rng), c);
    }

    Ok(ShiftBenchmark {
        spec: spec.clone(),
        class_attrs,
        attr_vocab,
        attr_tokens,
        prototypes,
        shift,
        student_train,
        scorer_train,
        source_eval,
        target_eval,
        retrieval,
        caption_eval,
    })
}

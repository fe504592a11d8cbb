//! Seeded synthetic identity data.
//!
//! Each identity is a prototype pixel vector drawn uniformly from [0, 255];
//! samples are the prototype plus gaussian noise, clipped back into range.
//! The noise scale controls how much the identity clouds overlap and thereby
//! how hard verification and attack transfer are.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::model::PIXEL_MAX;
use crate::rng::{derive, derive_n, fnv1a64, Stream};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum SynthError {
    BadShape { detail: String },
    BadFraction { fraction: f64 },
    /// A class cannot keep at least one sample on each side of a split.
    ClassTooSmall { class: usize, count: usize },
    /// Attack pairs need at least two identities.
    TooFewIdentities { classes: usize },
    Tensor(TensorError),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadShape { detail } => write!(f, "invalid dataset shape: {detail}"),
            SynthError::BadFraction { fraction } => {
                write!(f, "train fraction {fraction} must lie strictly between 0 and 1")
            }
            SynthError::ClassTooSmall { class, count } => {
                write!(f, "class {class} has {count} samples, too few to stratify")
            }
            SynthError::TooFewIdentities { classes } => {
                write!(f, "need at least 2 identities, got {classes}")
            }
            SynthError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SynthError {}

impl From<TensorError> for SynthError {
    fn from(e: TensorError) -> Self {
        SynthError::Tensor(e)
    }
}

/// Labeled pixel-domain samples around per-class prototypes.
#[derive(Clone, Debug)]
pub struct IdentityDataset {
    pub class_count: usize,
    pub input_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    prototypes: Vec<f64>,
    samples: Vec<f64>,
    labels: Vec<usize>,
}

impl IdentityDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * self.input_dim..(class + 1) * self.input_dim]
    }

    /// Sample `i` as a 1×dim tensor row.
    pub fn sample_row(&self, i: usize) -> Tensor {
        Tensor::row(self.sample(i).to_vec()).expect("dataset rows are valid tensors")
    }

    /// Gather the given sample indices into a batch matrix plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (
            Tensor::matrix(indices.len(), self.input_dim, data).expect("batch data is finite"),
            labels,
        )
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Content hash covering shape, noise scale, labels, and sample bits.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.samples.len() * 8 + self.labels.len() * 8 + 32);
        bytes.extend_from_slice(&(self.class_count as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        bytes.extend_from_slice(&self.sigma.to_bits().to_le_bytes());
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for &v in &self.samples {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    /// True when every sample value sits inside the pixel range.
    pub fn pixels_in_range(&self) -> bool {
        self.samples.iter().all(|&v| (0.0..=PIXEL_MAX).contains(&v))
    }
}

fn clip_pixel(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else if v > PIXEL_MAX {
        PIXEL_MAX
    } else {
        v
    }
}

/// Generate a dataset whose prototypes and noise both derive from `seed`.
pub fn generate(
    seed: u64,
    classes: usize,
    per_class: usize,
    input_dim: usize,
    sigma: f64,
) -> Result<IdentityDataset, SynthError> {
    generate_resampled(seed, seed, classes, per_class, input_dim, sigma)
}

/// Generate a dataset with prototypes from `seed` but noise from `draw_seed`:
/// the same identity space sampled independently. Used to give victims a
/// disjoint draw of the identities the surrogate trained on.
pub fn generate_resampled(
    seed: u64,
    draw_seed: u64,
    classes: usize,
    per_class: usize,
    input_dim: usize,
    sigma: f64,
) -> Result<IdentityDataset, SynthError> {
    if classes < 2 {
        return Err(SynthError::TooFewIdentities { classes });
    }
    if per_class < 2 {
        return Err(SynthError::BadShape {
            detail: String::from("per_class must be at least 2"),
        });
    }
    if input_dim == 0 {
        return Err(SynthError::BadShape {
            detail: String::from("input_dim must be positive"),
        });
    }
    if !(sigma >= 0.0) {
        return Err(SynthError::BadShape {
            detail: String::from("sigma must be non-negative"),
        });
    }

    let mut proto_stream = Stream::new(derive(seed, b"prototypes"));
    let prototypes = proto_stream.uniform_vec(classes * input_dim, 0.0, PIXEL_MAX);

    let mut samples = Vec::with_capacity(classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let proto = &prototypes[class * input_dim..(class + 1) * input_dim];
        let mut noise = Stream::new(derive_n(draw_seed, b"class-noise", class as u64));
        for _ in 0..per_class {
            for &p in proto {
                samples.push(clip_pixel(p + sigma * noise.gaussian()));
            }
            labels.push(class);
        }
    }

    Ok(IdentityDataset {
        class_count: classes,
        input_dim,
        sigma,
        seed,
        prototypes,
        samples,
        labels,
    })
}

/// Label-stratified split into disjoint train and eval datasets.
pub fn split(
    dataset: &IdentityDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(IdentityDataset, IdentityDataset), SynthError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SynthError::BadFraction {
            fraction: train_fraction,
        });
    }
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for class in 0..dataset.class_count {
        let mut members = dataset.indices_of_class(class);
        if members.len() < 2 {
            return Err(SynthError::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        let mut stream = Stream::new(derive_n(seed, b"split", class as u64));
        stream.shuffle(&mut members);
        let mut take = libm::round(train_fraction * members.len() as f64) as usize;
        take = take.clamp(1, members.len() - 1);
        let (tr, ev) = members.split_at(take);
        train_idx.extend_from_slice(tr);
        eval_idx.extend_from_slice(ev);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    Ok((subset(dataset, &train_idx), subset(dataset, &eval_idx)))
}

fn subset(dataset: &IdentityDataset, indices: &[usize]) -> IdentityDataset {
    let mut samples = Vec::with_capacity(indices.len() * dataset.input_dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        samples.extend_from_slice(dataset.sample(i));
        labels.push(dataset.labels[i]);
    }
    IdentityDataset {
        class_count: dataset.class_count,
        input_dim: dataset.input_dim,
        sigma: dataset.sigma,
        seed: dataset.seed,
        prototypes: dataset.prototypes.clone(),
        samples,
        labels,
    }
}

/// Source→target attack pairs across distinct identities.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sample `n_pairs` cross-identity (source, target) index pairs.
pub fn sample_attack_pairs(
    dataset: &IdentityDataset,
    n_pairs: usize,
    seed: u64,
) -> Result<PairSet, SynthError> {
    if dataset.class_count < 2 {
        return Err(SynthError::TooFewIdentities {
            classes: dataset.class_count,
        });
    }
    let distinct = {
        let first = dataset.labels.first().copied();
        dataset.labels.iter().any(|&l| Some(l) != first)
    };
    if !distinct || dataset.len() < 2 {
        return Err(SynthError::TooFewIdentities { classes: 1 });
    }
    let mut stream = Stream::new(derive(seed, b"attack-pairs"));
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let s = stream.index(dataset.len());
        let t = stream.index(dataset.len());
        if dataset.labels[s] != dataset.labels[t] {
            pairs.push((s, t));
        }
    }
    Ok(PairSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_collapses_to_prototypes() {
        let ds = generate(4, 3, 2, 5, 0.0).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i), ds.prototype(ds.label(i)));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(9, 4, 3, 6, 12.0).unwrap();
        let b = generate(9, 4, 3, 6, 12.0).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.samples, b.samples);
        let c = generate(10, 4, 3, 6, 12.0).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn pixels_stay_in_range() {
        let ds = generate(2, 2, 50, 8, 400.0).unwrap();
        assert!(ds.pixels_in_range());
    }

    #[test]
    fn noise_scale_matches_sigma() {
        let sigma = 10.0;
        let ds = generate(13, 2, 500, 16, sigma).unwrap();
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for i in 0..ds.len() {
            let proto = ds.prototype(ds.label(i));
            for (s, p) in ds.sample(i).iter().zip(proto) {
                sq_sum += (s - p) * (s - p);
                count += 1;
            }
        }
        let std = libm::sqrt(sq_sum / count as f64);
        assert!(
            (std - sigma).abs() / sigma < 0.15,
            "std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn resampled_shares_prototypes_but_not_noise() {
        let a = generate(21, 3, 4, 5, 8.0).unwrap();
        let b = generate_resampled(21, 99, 3, 4, 5, 8.0).unwrap();
        assert_eq!(a.prototypes, b.prototypes);
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn split_partitions_and_stratifies() {
        let ds = generate(5, 4, 10, 6, 5.0).unwrap();
        let (train, eval) = split(&ds, 0.7, 3).unwrap();
        assert_eq!(train.len() + eval.len(), ds.len());
        for class in 0..4 {
            let tr = train.indices_of_class(class).len();
            let ev = eval.indices_of_class(class).len();
            assert_eq!(tr + ev, 10);
            assert!((tr as f64 - 7.0).abs() <= 1.0, "class {class} train share {tr}");
            assert!(tr >= 1 && ev >= 1);
        }
        // Disjointness: pooled sample multiset must match the source.
        let mut all: Vec<u64> = Vec::new();
        for i in 0..train.len() {
            all.push(fnv1a64(
                &train.sample(i).iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>(),
            ));
        }
        for i in 0..eval.len() {
            all.push(fnv1a64(
                &eval.sample(i).iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>(),
            ));
        }
        let mut src: Vec<u64> = (0..ds.len())
            .map(|i| {
                fnv1a64(&ds.sample(i).iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>())
            })
            .collect();
        all.sort_unstable();
        src.sort_unstable();
        assert_eq!(all, src);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = generate(5, 3, 4, 4, 2.0).unwrap();
        assert!(matches!(split(&ds, 0.0, 1), Err(SynthError::BadFraction { .. })));
        assert!(matches!(split(&ds, 1.0, 1), Err(SynthError::BadFraction { .. })));
    }

    #[test]
    fn attack_pairs_cross_identities() {
        let ds = generate(8, 5, 4, 6, 3.0).unwrap();
        let pairs = sample_attack_pairs(&ds, 40, 17).unwrap();
        assert_eq!(pairs.len(), 40);
        for &(s, t) in &pairs.pairs {
            assert_ne!(ds.label(s), ds.label(t));
        }
        let again = sample_attack_pairs(&ds, 40, 17).unwrap();
        assert_eq!(pairs.pairs, again.pairs);
    }

    #[test]
    fn generate_validates_sizes() {
        assert!(generate(1, 1, 4, 4, 1.0).is_err());
        assert!(generate(1, 3, 1, 4, 1.0).is_err());
        assert!(generate(1, 3, 4, 0, 1.0).is_err());
        assert!(generate(1, 3, 4, 4, -1.0).is_err());
    }
}

//! Structure/texture latent representation and the channel-slicing scheme.
//!
//! The structure tensor is partitioned along its channel axis into slices,
//! one per semantic region. Masking keeps a single slice and zeroes the rest;
//! decoding a masked latent together with the texture vector is expected to
//! reproduce only that slice's region. Everything here is a pure function.

use ndarray::{Array1, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatentError {
    #[error("slice '{label}' has an empty channel range [{start}, {end})")]
    EmptyRange { label: String, start: usize, end: usize },
    #[error("slices '{first}' and '{second}' overlap on channel {channel}")]
    Overlap { first: String, second: String, channel: usize },
    #[error("channel {channel} of {num_channels} is not covered by any slice")]
    Gap { channel: usize, num_channels: usize },
    #[error("slice '{label}' exceeds the channel count {num_channels}")]
    OutOfBounds { label: String, num_channels: usize },
    #[error("duplicate region label '{label}'")]
    DuplicateLabel { label: String },
    #[error("scheme must contain at least one slice")]
    NoSlices,
    #[error("slice index {index} out of range for {count} slices")]
    SliceIndex { index: usize, count: usize },
    #[error("structure tensor has {actual} channels, scheme expects {expected}")]
    ChannelMismatch { actual: usize, expected: usize },
    #[error("noise scale must be nonnegative, got {0}")]
    NegativeScale(f64),
}

/// One region-assigned channel slice: half-open range `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Slice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Partition of the structure-tensor channels into region slices.
///
/// Invariants (enforced by [`SliceScheme::new`]): slices are nonempty,
/// pairwise disjoint, cover `[0, num_channels)` exactly, and labels are
/// unique.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceScheme {
    num_channels: usize,
    slices: Vec<Slice>,
}

impl SliceScheme {
    /// Validates and constructs a scheme. Each violation gets its own error.
    pub fn new(num_channels: usize, slices: Vec<Slice>) -> Result<Self, LatentError> {
        if slices.is_empty() {
            return Err(LatentError::NoSlices);
        }
        for s in &slices {
            if s.start >= s.end {
                return Err(LatentError::EmptyRange {
                    label: s.label.clone(),
                    start: s.start,
                    end: s.end,
                });
            }
            if s.end > num_channels {
                return Err(LatentError::OutOfBounds {
                    label: s.label.clone(),
                    num_channels,
                });
            }
        }
        for (i, s) in slices.iter().enumerate() {
            for t in &slices[i + 1..] {
                if t.label == s.label {
                    return Err(LatentError::DuplicateLabel { label: s.label.clone() });
                }
            }
        }
        let mut owner: Vec<Option<usize>> = vec![None; num_channels];
        for (i, s) in slices.iter().enumerate() {
            for c in s.range() {
                if let Some(prev) = owner[c] {
                    return Err(LatentError::Overlap {
                        first: slices[prev].label.clone(),
                        second: s.label.clone(),
                        channel: c,
                    });
                }
                owner[c] = Some(i);
            }
        }
        if let Some(c) = owner.iter().position(Option::is_none) {
            return Err(LatentError::Gap { channel: c, num_channels });
        }
        Ok(Self { num_channels, slices })
    }

    /// The 5-region face scheme: hair [0,2), skin [2,4), nose [4,6),
    /// eyes [6,7), lips+mouth [7,8) on an 8-channel structure tensor.
    pub fn face5() -> Self {
        Self::new(
            8,
            vec![
                Slice { label: "hair".into(), start: 0, end: 2 },
                Slice { label: "skin".into(), start: 2, end: 4 },
                Slice { label: "nose".into(), start: 4, end: 6 },
                Slice { label: "eyes".into(), start: 6, end: 7 },
                Slice { label: "lips_mouth".into(), start: 7, end: 8 },
            ],
        )
        .expect("built-in scheme is valid")
    }

    /// Low-data variant: two wide 4-channel slices for hair and skin.
    pub fn face2_wide() -> Self {
        Self::new(
            8,
            vec![
                Slice { label: "hair".into(), start: 0, end: 4 },
                Slice { label: "skin".into(), start: 4, end: 8 },
            ],
        )
        .expect("built-in scheme is valid")
    }

    /// Looks a preset up by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "face5" => Some(Self::face5()),
            "face2-wide" => Some(Self::face2_wide()),
            _ => None,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    /// Number of region slices R.
    pub fn num_regions(&self) -> usize {
        self.slices.len()
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn slice(&self, index: usize) -> Result<&Slice, LatentError> {
        self.slices
            .get(index)
            .ok_or(LatentError::SliceIndex { index, count: self.slices.len() })
    }

    pub fn labels(&self) -> Vec<&str> {
        self.slices.iter().map(|s| s.label.as_str()).collect()
    }

    /// 0/1 channel mask that keeps only slice `index`.
    pub fn channel_mask(&self, index: usize) -> Result<Vec<f64>, LatentError> {
        let s = self.slice(index)?;
        let mut mask = vec![0.0; self.num_channels];
        for c in s.range() {
            mask[c] = 1.0;
        }
        Ok(mask)
    }
}

/// Spatial latent holding layout information, shape (C_s, h_s, w_s).
#[derive(Clone, Debug, PartialEq)]
pub struct StructureTensor(pub Array3<f64>);

impl StructureTensor {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Global appearance latent, shape (C_t).
#[derive(Clone, Debug, PartialEq)]
pub struct TextureVector(pub Array1<f64>);

impl TextureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Structure and texture produced by one encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub structure: StructureTensor,
    pub texture: TextureVector,
}

/// Where perturbation noise is applied relative to the masked tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLocus {
    /// Only the retained slice's channels are perturbed (default).
    SliceOnly,
    /// Every channel of the masked tensor is perturbed, including the zeroed ones.
    WholeTensor,
}

impl Default for NoiseLocus {
    fn default() -> Self {
        NoiseLocus::SliceOnly
    }
}

/// Returns a copy of `s` with every channel outside slice `index` set to zero.
pub fn mask_structure(
    s: &StructureTensor,
    index: usize,
    scheme: &SliceScheme,
) -> Result<StructureTensor, LatentError> {
    if s.channels() != scheme.num_channels() {
        return Err(LatentError::ChannelMismatch {
            actual: s.channels(),
            expected: scheme.num_channels(),
        });
    }
    let keep = scheme.slice(index)?.range();
    let mut out = Array3::zeros(s.0.raw_dim());
    for c in keep {
        out.index_axis_mut(Axis(0), c).assign(&s.0.index_axis(Axis(0), c));
    }
    Ok(StructureTensor(out))
}

/// Adds i.i.d. Gaussian noise of standard deviation `scale` to the masked
/// tensor. With [`NoiseLocus::SliceOnly`] the channels outside slice `index`
/// stay exactly zero. Deterministic for a fixed seed.
pub fn add_slice_noise(
    s_masked: &StructureTensor,
    index: usize,
    scheme: &SliceScheme,
    scale: f64,
    seed: u64,
    locus: NoiseLocus,
) -> Result<StructureTensor, LatentError> {
    if scale < 0.0 {
        return Err(LatentError::NegativeScale(scale));
    }
    if s_masked.channels() != scheme.num_channels() {
        return Err(LatentError::ChannelMismatch {
            actual: s_masked.channels(),
            expected: scheme.num_channels(),
        });
    }
    let slice = scheme.slice(index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut out = s_masked.0.clone();
    let channels: Vec<usize> = match locus {
        NoiseLocus::SliceOnly => slice.range().collect(),
        NoiseLocus::WholeTensor => (0..scheme.num_channels()).collect(),
    };
    for c in channels {
        for v in out.index_axis_mut(Axis(0), c).iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v += scale * n;
        }
    }
    Ok(StructureTensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_structure(c: usize, h: usize, seed: u64) -> StructureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StructureTensor(Array3::from_shape_fn((c, h, h), |_| rng.gen_range(-2.0..2.0)))
    }

    #[test]
    fn face5_scheme_matches_published_correspondences() {
        let scheme = SliceScheme::face5();
        assert_eq!(scheme.num_channels(), 8);
        assert_eq!(scheme.num_regions(), 5);
        let expected = [
            ("hair", 0, 2),
            ("skin", 2, 4),
            ("nose", 4, 6),
            ("eyes", 6, 7),
            ("lips_mouth", 7, 8),
        ];
        for (s, (label, start, end)) in scheme.slices().iter().zip(expected) {
            assert_eq!((s.label.as_str(), s.start, s.end), (label, start, end));
        }
    }

    #[test]
    fn single_slice_identity_partition_is_valid() {
        let scheme = SliceScheme::new(4, vec![Slice { label: "all".into(), start: 0, end: 4 }]);
        assert!(scheme.is_ok());
    }

    #[test]
    fn validation_rejects_each_defect_distinctly() {
        let overlap = SliceScheme::new(
            3,
            vec![
                Slice { label: "a".into(), start: 0, end: 2 },
                Slice { label: "b".into(), start: 1, end: 3 },
            ],
        );
        assert!(matches!(overlap, Err(LatentError::Overlap { .. })));

        let gap = SliceScheme::new(
            4,
            vec![
                Slice { label: "a".into(), start: 0, end: 1 },
                Slice { label: "b".into(), start: 2, end: 4 },
            ],
        );
        assert!(matches!(gap, Err(LatentError::Gap { channel: 1, .. })));

        let empty = SliceScheme::new(2, vec![Slice { label: "a".into(), start: 1, end: 1 }]);
        assert!(matches!(empty, Err(LatentError::EmptyRange { .. })));

        let dup = SliceScheme::new(
            2,
            vec![
                Slice { label: "a".into(), start: 0, end: 1 },
                Slice { label: "a".into(), start: 1, end: 2 },
            ],
        );
        assert!(matches!(dup, Err(LatentError::DuplicateLabel { .. })));

        let oob = SliceScheme::new(2, vec![Slice { label: "a".into(), start: 0, end: 3 }]);
        assert!(matches!(oob, Err(LatentError::OutOfBounds { .. })));

        assert!(matches!(SliceScheme::new(2, vec![]), Err(LatentError::NoSlices)));
    }

    #[test]
    fn mask_keeps_only_the_requested_slice() {
        let scheme = SliceScheme::face5();
        let s = random_structure(8, 4, 3);
        // Slice 3 ("eyes") is the single channel 6.
        let masked = mask_structure(&s, 3, &scheme).unwrap();
        for c in 0..8 {
            let chan = masked.0.index_axis(Axis(0), c);
            if c == 6 {
                assert_eq!(chan, s.0.index_axis(Axis(0), 6));
            } else {
                assert!(chan.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mask_on_single_slice_scheme_is_identity() {
        let scheme = SliceScheme::new(3, vec![Slice { label: "all".into(), start: 0, end: 3 }]).unwrap();
        let s = random_structure(3, 4, 4);
        let masked = mask_structure(&s, 0, &scheme).unwrap();
        assert_eq!(masked, s);
    }

    #[test]
    fn mask_of_zero_tensor_is_zero() {
        let scheme = SliceScheme::face5();
        let s = StructureTensor(Array3::zeros((8, 4, 4)));
        let masked = mask_structure(&s, 2, &scheme).unwrap();
        assert!(masked.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_is_idempotent_and_partitions_the_tensor() {
        let scheme = SliceScheme::face5();
        for seed in 0..50 {
            let s = random_structure(8, 4, seed);
            let mut total = Array3::zeros(s.0.raw_dim());
            for i in 0..scheme.num_regions() {
                let m1 = mask_structure(&s, i, &scheme).unwrap();
                let m2 = mask_structure(&m1, i, &scheme).unwrap();
                assert_eq!(m1, m2, "idempotence failed for slice {i}");
                total += &m1.0;
            }
            assert_eq!(total, s.0, "slice masks must sum back to the input");
            // Disjoint supports.
            for i in 0..scheme.num_regions() {
                for j in i + 1..scheme.num_regions() {
                    let mi = mask_structure(&s, i, &scheme).unwrap();
                    let mj = mask_structure(&s, j, &scheme).unwrap();
                    let both = mi.0.iter().zip(mj.0.iter()).filter(|(a, b)| **a != 0.0 && **b != 0.0).count();
                    assert_eq!(both, 0, "slices {i},{j} share support");
                }
            }
        }
    }

    #[test]
    fn mask_rejects_bad_index_and_shape() {
        let scheme = SliceScheme::face5();
        let s = random_structure(8, 4, 0);
        assert!(matches!(mask_structure(&s, 5, &scheme), Err(LatentError::SliceIndex { .. })));
        let wrong = random_structure(4, 4, 0);
        assert!(matches!(
            mask_structure(&wrong, 0, &scheme),
            Err(LatentError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn zero_scale_noise_is_identity() {
        let scheme = SliceScheme::face5();
        let s = mask_structure(&random_structure(8, 4, 5), 1, &scheme).unwrap();
        let noised = add_slice_noise(&s, 1, &scheme, 0.0, 99, NoiseLocus::SliceOnly).unwrap();
        assert_eq!(noised, s);
    }

    #[test]
    fn noise_is_seed_deterministic_and_slice_confined() {
        let scheme = SliceScheme::face5();
        let s = mask_structure(&random_structure(8, 6, 6), 2, &scheme).unwrap();
        let a = add_slice_noise(&s, 2, &scheme, 0.01, 7, NoiseLocus::SliceOnly).unwrap();
        let b = add_slice_noise(&s, 2, &scheme, 0.01, 7, NoiseLocus::SliceOnly).unwrap();
        assert_eq!(a, b);
        // Channels outside slice 2 ([4,6)) stay exactly zero.
        for c in (0..8).filter(|c| !(4..6).contains(c)) {
            assert!(a.0.index_axis(Axis(0), c).iter().all(|&v| v == 0.0));
        }
        // Whole-tensor locus perturbs the zeroed channels too.
        let w = add_slice_noise(&s, 2, &scheme, 0.01, 7, NoiseLocus::WholeTensor).unwrap();
        assert!(w.0.index_axis(Axis(0), 0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn noise_rejects_negative_scale() {
        let scheme = SliceScheme::face5();
        let s = StructureTensor(Array3::zeros((8, 4, 4)));
        assert_eq!(
            add_slice_noise(&s, 0, &scheme, -0.1, 0, NoiseLocus::SliceOnly),
            Err(LatentError::NegativeScale(-0.1))
        );
    }

    #[test]
    fn empirical_noise_std_matches_declared_law() {
        // Monte-Carlo oracle: the per-entry increments must have std `scale`.
        let scheme = SliceScheme::face5();
        let s = StructureTensor(Array3::zeros((8, 64, 64)));
        let masked = mask_structure(&s, 0, &scheme).unwrap();
        let scale = 0.01;
        let mut samples = Vec::new();
        for seed in 0..16 {
            let noised = add_slice_noise(&masked, 0, &scheme, scale, seed, NoiseLocus::SliceOnly).unwrap();
            for c in 0..2 {
                for (&after, &before) in noised
                    .0
                    .index_axis(Axis(0), c)
                    .iter()
                    .zip(masked.0.index_axis(Axis(0), c).iter())
                {
                    samples.push(after - before);
                }
            }
        }
        assert!(samples.len() >= 100_000, "need at least 1e5 samples, got {}", samples.len());
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let std = var.sqrt();
        assert!(
            (std - scale).abs() <= 0.05 * scale,
            "empirical std {std} not within 5% of {scale}"
        );
    }
}

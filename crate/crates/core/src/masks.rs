//! Dropout masks over hidden units.
//!
//! Masks are enumerated in a canonical little-endian order: the hidden units
//! of all layers are concatenated (layer 1 first, ascending unit index) and
//! bit `k` of a mask index controls unit `k` of that concatenation.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{invalid, shape, Error, Result};

/// Widest mask space that can be indexed by a `u64`.
pub const MAX_INDEXABLE_BITS: usize = 63;

/// One bit per hidden unit, grouped by layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DropoutMask {
    layers: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn new(layers: Vec<Vec<bool>>) -> Self {
        Self { layers }
    }

    pub fn all_ones(hidden_sizes: &[usize]) -> Self {
        Self::new(hidden_sizes.iter().map(|&n| vec![true; n]).collect())
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().map(Vec::len)
    }

    pub fn count_ones(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    /// Bits of the whole mask in canonical order.
    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers.iter().flatten().copied()
    }

    /// One hexadecimal string per layer. Unit `k` of a layer is bit `k` of
    /// the number the string spells, so the last digit holds units 0..4.
    pub fn to_hex_layers(&self) -> Vec<String> {
        self.layers.iter().map(|bits| bits_to_hex(bits)).collect()
    }

    pub fn from_hex_layers(hidden_sizes: &[usize], layers: &[impl AsRef<str>]) -> Result<Self> {
        if layers.len() != hidden_sizes.len() {
            return Err(shape(format!(
                "{} hex layers for {} hidden layers",
                layers.len(),
                hidden_sizes.len()
            )));
        }
        hidden_sizes
            .iter()
            .zip(layers)
            .map(|(&n, hex)| hex_to_bits(hex.as_ref(), n))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Sidecar text form: one `<size> <hex>` line per layer.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for (bits, hex) in self.layers.iter().zip(self.to_hex_layers()) {
            let _ = writeln!(out, "{} {}", bits.len(), hex);
        }
        out
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut sizes = Vec::new();
        let mut hexes = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut parts = line.split_whitespace();
            let (Some(size), Some(hex), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(mask_format(format!("expected `<size> <hex>`, got `{line}`")));
            };
            sizes.push(
                size.parse::<usize>()
                    .map_err(|e| mask_format(format!("bad layer size `{size}`: {e}")))?,
            );
            hexes.push(hex.to_string());
        }
        Self::from_hex_layers(&sizes, &hexes)
    }
}

fn mask_format(reason: String) -> Error {
    Error::Format {
        what: "mask sidecar",
        reason,
    }
}

fn bits_to_hex(bits: &[bool]) -> String {
    let n_digits = bits.len().div_ceil(4).max(1);
    (0..n_digits)
        .rev()
        .map(|d| {
            let nibble = (0..4)
                .filter(|&b| bits.get(4 * d + b).copied().unwrap_or(false))
                .fold(0u32, |acc, b| acc | (1 << b));
            char::from_digit(nibble, 16).unwrap()
        })
        .collect()
}

fn hex_to_bits(hex: &str, n: usize) -> Result<Vec<bool>> {
    let digits: Vec<u32> = hex
        .chars()
        .rev()
        .map(|c| c.to_digit(16).ok_or_else(|| mask_format(format!("bad hex digit `{c}`"))))
        .collect::<Result<_>>()?;
    let mut bits = vec![false; n];
    for (d, nibble) in digits.iter().enumerate() {
        for b in 0..4 {
            if nibble & (1 << b) != 0 {
                let k = 4 * d + b;
                if k >= n {
                    return Err(mask_format(format!("bit {k} set in a layer of {n} units")));
                }
                bits[k] = true;
            }
        }
    }
    Ok(bits)
}

/// The set of all masks over a given hidden-layer shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpace {
    hidden_sizes: Vec<usize>,
    n_bits: usize,
}

impl MaskSpace {
    pub fn new(hidden_sizes: Vec<usize>) -> Self {
        let n_bits = hidden_sizes.iter().sum();
        Self {
            hidden_sizes,
            n_bits,
        }
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    /// Number of maskable units.
    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn total_masks(&self) -> Result<u64> {
        if self.n_bits > MAX_INDEXABLE_BITS {
            return Err(Error::TooLarge {
                bits: self.n_bits,
                cap: MAX_INDEXABLE_BITS,
            });
        }
        Ok(1u64 << self.n_bits)
    }

    pub fn mask_from_index(&self, index: u64) -> Result<DropoutMask> {
        let total = self.total_masks()?;
        if index >= total {
            return Err(invalid(format!("mask index {index} out of range 0..{total}")));
        }
        let mut offset = 0;
        let layers = self
            .hidden_sizes
            .iter()
            .map(|&n| {
                let bits = (0..n).map(|k| index >> (offset + k) & 1 == 1).collect();
                offset += n;
                bits
            })
            .collect();
        Ok(DropoutMask::new(layers))
    }

    pub fn index_of(&self, mask: &DropoutMask) -> Result<u64> {
        self.total_masks()?;
        self.check(mask)?;
        Ok(mask
            .bits()
            .enumerate()
            .filter(|&(_, b)| b)
            .fold(0u64, |acc, (k, _)| acc | (1 << k)))
    }

    /// Splits a mask index into one bit word per layer.
    pub(crate) fn layer_words(&self, index: u64, words: &mut Vec<u64>) {
        words.clear();
        let mut offset = 0;
        for &n in &self.hidden_sizes {
            let word = if n >= 64 { index >> offset } else { (index >> offset) & ((1u64 << n) - 1) };
            words.push(word);
            offset += n;
        }
    }

    pub fn check(&self, mask: &DropoutMask) -> Result<()> {
        if mask.sizes().ne(self.hidden_sizes.iter().copied()) {
            return Err(shape(format!(
                "mask sizes {:?} do not match space {:?}",
                mask.sizes().collect::<Vec<_>>(),
                self.hidden_sizes
            )));
        }
        Ok(())
    }

    /// Every mask in index order.
    pub fn iter(&self) -> Result<MaskIter<'_>> {
        let total = self.total_masks()?;
        Ok(MaskIter {
            space: self,
            next: 0,
            end: total,
        })
    }

    /// Masks with index in `range`, in index order. Lets parallel workers
    /// split the enumeration.
    pub fn iter_range(&self, range: Range<u64>) -> Result<MaskIter<'_>> {
        let total = self.total_masks()?;
        if range.start > range.end || range.end > total {
            return Err(invalid(format!("range {range:?} outside 0..{total}")));
        }
        Ok(MaskIter {
            space: self,
            next: range.start,
            end: range.end,
        })
    }
}

/// Streaming enumerator over a [`MaskSpace`].
#[derive(Debug, Clone)]
pub struct MaskIter<'a> {
    space: &'a MaskSpace,
    next: u64,
    end: u64,
}

impl Iterator for MaskIter<'_> {
    type Item = DropoutMask;

    fn next(&mut self) -> Option<DropoutMask> {
        if self.next >= self.end {
            return None;
        }
        let mask = self.space.mask_from_index(self.next).ok()?;
        self.next += 1;
        Some(mask)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = usize::try_from(self.end - self.next).unwrap_or(usize::MAX);
        (left, Some(left))
    }
}

/// Per-layer probability that a unit is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPolicy {
    inclusion: Vec<f64>,
}

impl MaskPolicy {
    pub fn new(inclusion: Vec<f64>) -> Result<Self> {
        if let Some(p) = inclusion.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(invalid(format!("inclusion probability {p} outside (0, 1]")));
        }
        Ok(Self { inclusion })
    }

    /// The same probability on every hidden layer.
    pub fn uniform(p: f64, n_layers: usize) -> Result<Self> {
        Self::new(vec![p; n_layers])
    }

    /// Standard dropout on hidden units: keep with probability 1/2.
    pub fn half(n_layers: usize) -> Self {
        Self {
            inclusion: vec![0.5; n_layers],
        }
    }

    pub fn inclusion(&self) -> &[f64] {
        &self.inclusion
    }

    pub fn n_layers(&self) -> usize {
        self.inclusion.len()
    }
}

/// Draws each unit independently with its layer's inclusion probability.
pub fn sample_mask<R: Rng + ?Sized>(
    policy: &MaskPolicy,
    space: &MaskSpace,
    rng: &mut R,
) -> Result<DropoutMask> {
    if policy.n_layers() != space.hidden_sizes.len() {
        return Err(shape(format!(
            "policy has {} layers, space has {}",
            policy.n_layers(),
            space.hidden_sizes.len()
        )));
    }
    Ok(sample_sizes(policy, &space.hidden_sizes, rng))
}

pub(crate) fn sample_sizes<R: Rng + ?Sized>(
    policy: &MaskPolicy,
    hidden_sizes: &[usize],
    rng: &mut R,
) -> DropoutMask {
    DropoutMask::new(
        hidden_sizes
            .iter()
            .zip(&policy.inclusion)
            .map(|(&n, &p)| (0..n).map(|_| rng.gen::<f64>() < p).collect())
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn index_conventions() {
        let space = MaskSpace::new(vec![2, 1]);
        assert_eq!(space.total_masks().unwrap(), 8);
        assert_eq!(space.mask_from_index(0).unwrap().count_ones(), 0);
        assert_eq!(space.mask_from_index(7).unwrap(), DropoutMask::all_ones(&[2, 1]));
        assert_eq!(
            space.mask_from_index(0b101).unwrap(),
            DropoutMask::new(vec![vec![true, false], vec![true]])
        );
        assert!(space.mask_from_index(8).is_err());
    }

    #[test]
    fn two_bit_enumeration_order() {
        let space = MaskSpace::new(vec![2]);
        let got: Vec<_> = space.iter().unwrap().map(|m| m.layer(0).to_vec()).collect();
        assert_eq!(
            got,
            vec![
                vec![false, false],
                vec![true, false],
                vec![false, true],
                vec![true, true]
            ]
        );
    }

    #[test]
    fn full_sized_space_counts() {
        let space = MaskSpace::new(vec![10, 10]);
        assert_eq!(space.total_masks().unwrap(), 1 << 20);
        let iter = space.iter().unwrap();
        assert_eq!(iter.size_hint().0, 1_048_576);
        assert_eq!(iter.count(), 1_048_576);
    }

    #[test]
    fn too_large_space_is_an_error() {
        let space = MaskSpace::new(vec![40, 40]);
        assert!(matches!(space.iter(), Err(Error::TooLarge { bits: 80, .. })));
        assert!(space.mask_from_index(0).is_err());
    }

    #[test]
    fn bijection_exhaustive_up_to_16_bits() {
        for sizes in [vec![1], vec![3, 2], vec![4, 4, 1], vec![8, 8], vec![16]] {
            let space = MaskSpace::new(sizes);
            let total = space.total_masks().unwrap();
            let mut seen = vec![false; total as usize];
            for (i, mask) in space.iter().unwrap().enumerate() {
                let idx = space.index_of(&mask).unwrap();
                assert_eq!(idx, i as u64);
                assert!(!seen[idx as usize]);
                seen[idx as usize] = true;
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn ranges_concatenate_to_full_enumeration() {
        let space = MaskSpace::new(vec![3, 2]);
        let full: Vec<_> = space.iter().unwrap().collect();
        let mut split: Vec<_> = space.iter_range(0..13).unwrap().collect();
        split.extend(space.iter_range(13..32).unwrap());
        assert_eq!(full, split);
        assert!(space.iter_range(0..33).is_err());
    }

    #[test]
    fn layer_words_match_mask() {
        let space = MaskSpace::new(vec![3, 4, 2]);
        let mut words = Vec::new();
        for idx in 0..space.total_masks().unwrap() {
            space.layer_words(idx, &mut words);
            let mask = space.mask_from_index(idx).unwrap();
            for (l, &w) in words.iter().enumerate() {
                for (j, &b) in mask.layer(l).iter().enumerate() {
                    assert_eq!(w >> j & 1 == 1, b);
                }
            }
        }
    }

    #[test]
    fn sampling_degenerate_and_deterministic() {
        let space = MaskSpace::new(vec![10, 10]);
        let ones = MaskPolicy::uniform(1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_mask(&ones, &space, &mut rng).unwrap().count_ones(), 20);
        }
        let half = MaskPolicy::half(2);
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..50).map(|_| sample_mask(&half, &space, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            (0..50).map(|_| sample_mask(&half, &space, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(sample_mask(&MaskPolicy::half(1), &space, &mut rng).is_err());
    }

    #[test]
    fn sampling_rate_and_independence() {
        let space = MaskSpace::new(vec![20]);
        let policy = MaskPolicy::half(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                sample_mask(&policy, &space, &mut rng)
                    .unwrap()
                    .bits()
                    .map(|b| if b { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mean_on = samples.iter().map(|s| s.iter().sum::<f64>()).sum::<f64>() / n as f64;
        assert!((9.5..=10.5).contains(&mean_on), "mean bits on {mean_on}");

        let means: Vec<f64> = (0..20)
            .map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..20 {
            for b in a + 1..20 {
                let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
                for s in &samples {
                    let (x, y) = (s[a] - means[a], s[b] - means[b]);
                    cov += x * y;
                    va += x * x;
                    vb += y * y;
                }
                let rho = cov / (va * vb).sqrt();
                assert!(rho.abs() <= 0.05, "units {a},{b}: rho = {rho}");
            }
        }
    }

    #[test]
    fn policy_validation() {
        assert!(MaskPolicy::new(vec![0.0]).is_err());
        assert!(MaskPolicy::new(vec![1.5]).is_err());
        assert!(MaskPolicy::new(vec![f64::NAN]).is_err());
        assert!(MaskPolicy::new(vec![0.5, 1.0]).is_ok());
    }

    #[test]
    fn hex_sidecar_round_trip() {
        let mask = DropoutMask::new(vec![
            vec![true, false, false, false, true],
            vec![false, true, true],
        ]);
        assert_eq!(mask.to_hex_layers(), vec!["11".to_string(), "6".to_string()]);
        let back = DropoutMask::from_sidecar(&mask.to_sidecar()).unwrap();
        assert_eq!(back, mask);
        assert!(DropoutMask::from_hex_layers(&[3], &["8"]).is_err());
        assert!(DropoutMask::from_hex_layers(&[3], &["g"]).is_err());
        assert!(DropoutMask::from_sidecar("3").is_err());
    }
}

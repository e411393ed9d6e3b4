//! Grouping latent frames into fixed-size patches.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `K` patches of `P` frames each, right-padded with zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[K, P, d]`.
    pub patches: Tensor<f64>,
    /// Number of real (unpadded) frames.
    pub frames: usize,
}

impl PatchSequence {
    pub fn patch_size(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.patches.shape()[2]
    }

    /// `[K, P]` flags, true for real frames.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.count() * self.patch_size()).map(|i| i < self.frames).collect()
    }

    pub fn padding(&self) -> usize {
        self.count() * self.patch_size() - self.frames
    }

    /// Flattened patch `k`, `P * d` values.
    pub fn patch(&self, k: usize) -> &[f64] {
        let n = self.patch_size() * self.dim();
        &self.patches.data()[k * n..(k + 1) * n]
    }
}

/// Splits `[T, d]` latents into `ceil(T / P)` patches.
pub fn patchify(z: &Tensor<f64>, p: usize) -> Result<PatchSequence> {
    if p < 1 {
        return Err(Error::invalid("patch size must be at least 1"));
    }
    let &[t, d] = z.shape() else {
        return Err(Error::shape("patchify", format!("latents must be [T, d], got {:?}", z.shape())));
    };
    let k = t.div_ceil(p);
    let mut data = z.data().to_vec();
    data.resize(k * p * d, 0.0);
    Ok(PatchSequence { patches: Tensor::new(vec![k, p, d], data)?, frames: t })
}

/// Inverse of [`patchify`]: drops the padding of the final patch.
pub fn unpatchify(seq: &PatchSequence) -> Result<Tensor<f64>> {
    let d = seq.dim();
    Tensor::new(vec![seq.frames, d], seq.patches.data()[..seq.frames * d].to_vec())
}

/// Assembles generated `[P * d]` patches into a sequence with no padding.
pub fn from_patches(patches: &[Vec<f64>], p: usize, d: usize) -> Result<PatchSequence> {
    let data: Vec<f64> = patches.iter().flatten().copied().collect();
    Ok(PatchSequence { patches: Tensor::new(vec![patches.len(), p, d], data)?, frames: patches.len() * p })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![t, d], (0..t * d).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap()
    }

    #[test]
    fn counts_and_padding() {
        let s = patchify(&ramp(8, 3), 4).unwrap();
        assert_eq!((s.count(), s.padding()), (2, 0));
        let s = patchify(&ramp(9, 3), 4).unwrap();
        assert_eq!((s.count(), s.padding()), (3, 3));
        assert_eq!(s.mask().iter().filter(|m| !**m).count(), 3);
        assert!(s.patch(2)[3..].iter().all(|&v| v == 0.0));
        assert!(patchify(&ramp(9, 3), 0).is_err());
    }

    #[test]
    fn round_trip() {
        for t in 1..12 {
            let z = ramp(t, 2);
            assert_eq!(unpatchify(&patchify(&z, 4).unwrap()).unwrap(), z);
        }
    }
}

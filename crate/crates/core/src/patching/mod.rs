//! Patch tokenization of two-channel samples and patch energy scores.

pub mod augment;

use std::sync::Arc;

use crate::energy::DenoisedSample;
use crate::error::{Error, Result};
use crate::numerics::{SparseMap, Tensor};

pub use augment::{augment, AugmentationPolicy, Transform, ViewPlan};

pub const CHANNELS: usize = 2;

/// `M` flattened patches of both channels in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[M, 2·P·P]`: channel 0 block then channel 1 block, each row-major.
    pub patches: Tensor,
    /// `(grid row, grid column)` per patch.
    pub coords: Vec<(usize, usize)>,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub fn check_patch_size(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "patch size P = {patch} must divide H = {height} and W = {width}"
        )));
    }
    Ok(())
}

/// Source index in a `[2, H, W]` sample for every element of the `[M, 2, P,
/// P]` patch tensor.
fn gather_index(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let (gh, gw) = (height / patch, width / patch);
    let mut idx = Vec::with_capacity(CHANNELS * height * width);
    for gr in 0..gh {
        for gc in 0..gw {
            for ch in 0..CHANNELS {
                for r in 0..patch {
                    for c in 0..patch {
                        idx.push(ch * height * width + (gr * patch + r) * width + gc * patch + c);
                    }
                }
            }
        }
    }
    idx
}

/// Linear map from a `[2, H, W]` sample to its `[M, 2, P, P]` patches.
pub fn patch_map(height: usize, width: usize, patch: usize) -> Result<Arc<SparseMap>> {
    check_patch_size(height, width, patch)?;
    let idx = gather_index(height, width, patch);
    let mut b = SparseMap::builder(CHANNELS * height * width);
    for &i in &idx {
        b.push(i, 1.0);
        b.end_row();
    }
    let m = height * width / (patch * patch);
    Ok(Arc::new(b.finish(&[m, CHANNELS, patch, patch])))
}

pub fn split_patches(sample: &DenoisedSample, patch: usize) -> Result<PatchSequence> {
    let (h, w) = (sample.height(), sample.width());
    check_patch_size(h, w, patch)?;
    let stacked = sample.stacked();
    let src = stacked.data();
    let data: Vec<f64> = gather_index(h, w, patch).into_iter().map(|i| src[i]).collect();
    let (gh, gw) = (h / patch, w / patch);
    let coords = (0..gh).flat_map(|r| (0..gw).map(move |c| (r, c))).collect();
    Ok(PatchSequence {
        patches: Tensor::new(&[gh * gw, CHANNELS * patch * patch], data)?,
        coords,
        patch,
        height: h,
        width: w,
    })
}

/// Exact inverse of [`split_patches`].
pub fn reassemble(seq: &PatchSequence) -> Result<DenoisedSample> {
    let (h, w) = (seq.height, seq.width);
    let mut out = vec![0.0; CHANNELS * h * w];
    for (k, &i) in gather_index(h, w, seq.patch).iter().enumerate() {
        out[i] = seq.patches.data()[k];
    }
    DenoisedSample::from_stacked(&Tensor::new(&[CHANNELS, h, w], out)?, None)
}

/// Mean of the energy channel over each patch.
pub fn patch_energy_scores(seq: &PatchSequence) -> Vec<f64> {
    let pp = seq.patch * seq.patch;
    (0..seq.len())
        .map(|i| seq.patches.row(i)[pp..].iter().sum::<f64>() / pp as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> DenoisedSample {
        DenoisedSample {
            intensity: Tensor::new(&[h, w], (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap(),
            energy: Tensor::filled(&[h, w], 0.5),
            source: None,
        }
    }

    #[test]
    fn patch_counts() {
        assert_eq!(split_patches(&sample(8, 8), 4).unwrap().len(), 4);
        assert_eq!(split_patches(&sample(64, 64), 16).unwrap().len(), 16);
    }

    #[test]
    fn indivisible_size_names_everything() {
        let e = split_patches(&sample(10, 10), 4).unwrap_err().to_string();
        assert!(e.contains("P = 4") && e.contains("H = 10") && e.contains("W = 10"), "{e}");
    }

    #[test]
    fn uniform_energy_scores() {
        let seq = split_patches(&sample(8, 8), 4).unwrap();
        assert_eq!(patch_energy_scores(&seq), vec![0.5; 4]);
    }

    #[test]
    fn one_hot_energy_patch() {
        let mut s = sample(8, 8);
        s.energy = Tensor::zeros(&[8, 8]);
        for r in 0..4 {
            for c in 0..4 {
                s.energy.data_mut()[r * 8 + c] = 1.0;
            }
        }
        let seq = split_patches(&s, 4).unwrap();
        assert_eq!(patch_energy_scores(&seq), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reassembly_is_exact() {
        let s = sample(12, 8);
        let back = reassemble(&split_patches(&s, 4).unwrap()).unwrap();
        assert_eq!(back.intensity, s.intensity);
        assert_eq!(back.energy, s.energy);
    }

    #[test]
    fn sparse_map_matches_split() {
        let s = sample(8, 12);
        let seq = split_patches(&s, 4).unwrap();
        let map = patch_map(8, 12, 4).unwrap();
        assert_eq!(map.apply(s.stacked().data()), seq.patches.data());
    }
}

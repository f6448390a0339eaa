//! Planted synthetic datasets with known concept structure.
//!
//! Class `c` owns high-level concept `c` and attributes `c·L .. c·L + L`.
//! Attributes of class `c` are scattered around concept `c`. Each image
//! embeds near its class concept; each patch embeds near one attribute of
//! the class, drawn uniformly. The example ground truth marks
//! the attributes planted in at least one patch, the class ground truth marks
//! all attributes the class owns. High-level concepts are mutually
//! orthogonal when `C ≤ K`, so an image's similarity to a foreign concept is
//! pure noise.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CfcbmError, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::numerics::Matrix;
use crate::store::{
    is_perfect_square, l2_normalize, BinaryMatrix, ConceptEmbeddings, EmbeddingDataset,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub n_examples: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
    pub attrs_per_class: usize,
    pub n_patches: usize,
    /// Norm of the noise scattering a class's attributes around its concept.
    pub attribute_spread: f64,
    /// Norm of the isotropic noise added to an image's class concept.
    pub image_noise: f64,
    /// Norm of the isotropic noise added to a patch's planted attribute.
    pub patch_noise: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            n_examples: 2000,
            n_classes: 10,
            embed_dim: 32,
            attrs_per_class: 4,
            n_patches: 4,
            attribute_spread: 1.0,
            image_noise: 1.0,
            patch_noise: 1.0,
        }
    }
}

const DATA_STREAM: u64 = u64::MAX;

fn gaussian(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            scale * g
        })
        .collect()
}

fn near(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Result<Vec<f64>> {
    let per_coord = noise / (center.len() as f64).sqrt();
    let v: Vec<f64> = gaussian(rng, center.len(), per_coord)
        .iter()
        .zip(center)
        .map(|(e, c)| c + e)
        .collect();
    l2_normalize(&v)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        data.extend(l2_normalize(&gaussian(rng, k, 1.0))?);
    }
    Matrix::from_vec(rows, k, data)
}

/// Gram-Schmidt over random Gaussian rows; needs `rows ≤ k`.
fn orthonormal_rows(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Result<Matrix> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = gaussian(rng, k, 1.0);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        if let Ok(unit) = l2_normalize(&v) {
            out.push(unit);
        }
    }
    Matrix::from_vec(rows, k, out.concat())
}

/// Generates the dataset and its general-layout hierarchy.
pub fn planted(spec: &PlantedSpec, seed: u64) -> Result<(EmbeddingDataset, ConceptHierarchy)> {
    let PlantedSpec {
        n_examples: n,
        n_classes: c,
        embed_dim: k,
        attrs_per_class: l,
        n_patches: p,
        attribute_spread,
        image_noise,
        patch_noise,
    } = *spec;
    if n == 0 || c == 0 || k == 0 || l == 0 {
        return Err(CfcbmError::Parameter(format!(
            "degenerate planted spec {spec:?}"
        )));
    }
    if !is_perfect_square(p) {
        return Err(CfcbmError::Parameter(format!(
            "patch count {p} is not a perfect square"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);

    let high = if c <= k {
        orthonormal_rows(&mut rng, c, k)?
    } else {
        unit_rows(&mut rng, c, k)?
    };
    let mut low = Vec::with_capacity(c * l * k);
    for y in 0..c {
        for _ in 0..l {
            low.extend(near(&mut rng, high.row(y), attribute_spread)?);
        }
    }
    let low = Matrix::from_vec(c * l, k, low)?;

    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mut images = Vec::with_capacity(n * k);
    let mut patches = Vec::with_capacity(n * p * k);
    let mut example_gt = vec![0u8; n * c * l];
    for (i, &y) in labels.iter().enumerate() {
        images.extend(near(&mut rng, high.row(y), image_noise)?);
        for _ in 0..p {
            let attr = y * l + (rng.next_u64() % l as u64) as usize;
            patches.extend(near(&mut rng, low.row(attr), patch_noise)?);
            example_gt[i * c * l + attr] = 1;
        }
    }
    let mut class_gt = vec![0u8; c * c * l];
    for y in 0..c {
        for j in 0..l {
            class_gt[y * c * l + y * l + j] = 1;
        }
    }

    let ds = EmbeddingDataset {
        n_classes: c,
        image_embeddings: Matrix::from_vec(n, k, images)?,
        patch_embeddings: Matrix::from_vec(n * p, k, patches)?,
        n_patches: p,
        labels,
        concepts: ConceptEmbeddings { high, low },
        example_ground_truth: Some(BinaryMatrix::new(n, c * l, example_gt)?),
        class_ground_truth: Some(BinaryMatrix::new(c, c * l, class_gt)?),
    };
    let hierarchy = ConceptHierarchy::build_general(
        (0..c).map(|y| format!("class{y}")).collect(),
        (0..c)
            .map(|y| (0..l).map(|j| format!("class{y}_attr{j}")).collect())
            .collect(),
    )?;
    Ok((ds, hierarchy))
}

/// Like [`planted`] but with `n_holdout` extra examples drawn from the same
/// concepts and returned as a separate dataset.
pub fn planted_with_holdout(
    spec: &PlantedSpec,
    n_holdout: usize,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset, ConceptHierarchy)> {
    let total = PlantedSpec {
        n_examples: spec.n_examples + n_holdout,
        ..spec.clone()
    };
    let (all, hierarchy) = planted(&total, seed)?;
    let train: Vec<usize> = (0..spec.n_examples).collect();
    let holdout: Vec<usize> = (spec.n_examples..total.n_examples).collect();
    Ok((all.subset(&train), all.subset(&holdout), hierarchy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_data_is_well_formed_and_reproducible() {
        let spec = PlantedSpec {
            n_examples: 50,
            n_patches: 9,
            ..PlantedSpec::default()
        };
        let (ds, hier) = planted(&spec, 1).unwrap();
        ds.check_shapes().unwrap();
        hier.validate(&ds.concepts).unwrap();
        assert_eq!(ds.patch_embeddings.rows(), 50 * 9);
        let gt = ds.example_ground_truth.as_ref().unwrap();
        for i in 0..50 {
            let y = ds.labels[i];
            let on: Vec<usize> = (0..40).filter(|&a| gt.row(i)[a] == 1).collect();
            assert!(!on.is_empty() && on.iter().all(|&a| a / 4 == y));
        }
        assert_eq!(planted(&spec, 1).unwrap().0, ds);
        assert_ne!(planted(&spec, 2).unwrap().0, ds);
    }

    #[test]
    fn holdout_shares_the_concepts() {
        let spec = PlantedSpec {
            n_examples: 30,
            ..PlantedSpec::default()
        };
        let (train, test, _) = planted_with_holdout(&spec, 20, 3).unwrap();
        assert_eq!(train.n_examples(), 30);
        assert_eq!(test.n_examples(), 20);
        assert_eq!(train.concepts, test.concepts);
        test.check_shapes().unwrap();
    }

    #[test]
    fn rejects_non_square_patch_counts() {
        let spec = PlantedSpec {
            n_patches: 6,
            ..PlantedSpec::default()
        };
        assert!(matches!(planted(&spec, 0), Err(CfcbmError::Parameter(_))));
    }
}

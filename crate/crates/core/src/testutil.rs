// Seeded generators for unit tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::knowledge::DescriptorBank;
use crate::math::{normalize, FeatureVector, Temperature};

pub fn basis(d: usize, i: usize) -> FeatureVector {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    FeatureVector::new(v).unwrap()
}

pub fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> FeatureVector {
    normalize(&FeatureVector::new(gaussian(rng, d)).unwrap()).unwrap()
}

/// Each class gets a random center; descriptors scatter around it.
pub fn random_bank(rng: &mut impl Rng, n: usize, m: usize, d: usize, spread: f64) -> DescriptorBank {
    let scale = spread / (d as f64).sqrt();
    let mut feats = Vec::new();
    for _ in 0..n {
        let center = random_unit(rng, d);
        let row = (0..m)
            .map(|_| {
                let g = gaussian(rng, d);
                let raw: Vec<f64> = center
                    .as_slice()
                    .iter()
                    .zip(&g)
                    .map(|(c, e)| c + scale * e)
                    .collect();
                normalize(&FeatureVector::new(raw).unwrap()).unwrap()
            })
            .collect();
        feats.push(row);
    }
    let names = (0..n).map(|c| format!("class_{c}")).collect();
    let texts = (0..n)
        .map(|c| (0..m).map(|j| format!("class_{c} trait {j}")).collect())
        .collect();
    DescriptorBank::new(names, texts, feats, Temperature::new(0.01).unwrap()).unwrap()
}

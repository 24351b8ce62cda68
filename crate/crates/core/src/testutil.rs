use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EstimationData, InstrumentSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dataset with every instrument level present. Binary exposure and
/// outcome unless `continuous_x`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, levels: usize, continuous_x: bool) -> Dataset {
    let z: Vec<usize> = (0..n).map(|i| if i < 2 * levels { i % levels } else { rng.random_range(0..levels) }).collect();
    let x: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if continuous_x {
                rng.random_range(-1.5..1.5) + 0.4 * l as f64
            } else if i < 2 * levels {
                // one exposed and one unexposed row per level
                (i / levels) as f64
            } else {
                f64::from(rng.random_bool(0.2 + 0.5 * l as f64 / levels as f64))
            }
        })
        .collect();
    let y: Vec<f64> = x.iter().map(|&xi| f64::from(rng.random_bool(0.2 + 0.2 * xi.clamp(0.0, 1.0)))).collect();
    Dataset::from_levels(y, x, z, (0..levels).map(|l| l as f64).collect()).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, n: usize, levels: usize, continuous_x: bool) -> EstimationData {
    let ds = random_dataset(rng, n, levels, continuous_x);
    EstimationData::new(&ds, &InstrumentSpec::indicators(levels)).unwrap()
}

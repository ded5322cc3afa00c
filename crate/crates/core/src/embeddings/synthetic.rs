use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, EmbeddingDataset, ImageEmbedding};

/// Clustered embeddings: unit-norm class means at least `separation` apart,
/// plus isotropic Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 14,
            train_per_class: 20,
            test_per_class: 20,
            dim: 64,
            separation: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

const ATTEMPTS_PER_CLASS: usize = 1000;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::InvalidSpec(m.into()));
        if self.classes < 2 {
            return fail("at least 2 classes are required");
        }
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("every class needs at least one train and one test sample");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail("separation must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be nonnegative");
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class {c}")).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Returns `(class means, train split, test split)`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<(Vec<Vec<f64>>, EmbeddingDataset, EmbeddingDataset), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let mut attempts = 0;
    while means.len() < spec.classes {
        attempts += 1;
        if attempts > ATTEMPTS_PER_CLASS * spec.classes {
            return Err(DataError::Placement {
                classes: spec.classes,
                dim: spec.dim,
                separation: spec.separation,
            });
        }
        let mut v = gaussian(&mut rng, spec.dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if means.iter().all(|m| distance(m, &v) >= spec.separation) {
            means.push(v);
        }
    }
    let mut split = |per_class: usize| {
        let mut samples = Vec::with_capacity(spec.classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for s in 0..per_class {
                let noise = gaussian(&mut rng, spec.dim);
                let vector = mean
                    .iter()
                    .zip(noise)
                    .map(|(m, n)| (m + spec.noise_std * n) as f32)
                    .collect();
                samples.push(ImageEmbedding::new(c as u32, s as u32, vector));
            }
        }
        EmbeddingDataset::new(spec.dim, samples, spec.labels())
    };
    let train = split(spec.train_per_class)?;
    let test = split(spec.test_per_class)?;
    Ok((means, train, test))
}

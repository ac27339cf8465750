//! Synthetic mixture-of-domains regression tasks.
//!
//! The training distribution is a weighted mixture of domains. Each domain
//! has its own input cluster and target map (a random linear map plus a
//! random ReLU feature term), so per-domain losses are separately
//! measurable and routing can specialize by domain.

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Input cluster separation between domain means.
const MEAN_SCALE: f64 = 2.5;
/// Within-domain input noise.
const NOISE_STD: f64 = 0.8;
/// Random feature count in the nonlinear target term.
const FEATURES: usize = 8;

#[derive(Clone, Debug)]
pub struct DomainParams {
    pub mean: Vec<f64>,
    /// d_out×d_model linear target map.
    pub linear: Matrix,
    /// FEATURES×d_model random feature projection.
    pub feat_in: Matrix,
    /// d_out×FEATURES readout of the rectified features.
    pub feat_out: Matrix,
}

impl DomainParams {
    fn generate(d_model: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut mean: Vec<f64> = (0..d_model).map(|_| normal.sample(rng)).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        mean.iter_mut().for_each(|v| *v *= MEAN_SCALE / norm);
        Self {
            mean,
            linear: Matrix::randn(d_out, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            feat_in: Matrix::randn(FEATURES, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            feat_out: Matrix::randn(d_out, FEATURES, 1.0 / (FEATURES as f64).sqrt(), rng),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let normal = Normal::new(0.0, NOISE_STD).unwrap();
        let x: Vec<f64> = self.mean.iter().map(|m| m + normal.sample(rng)).collect();
        (x.clone(), self.target(&x))
    }

    pub fn target(&self, x: &[f64]) -> Vec<f64> {
        let xm = Matrix::col(x.to_vec());
        let lin = self.linear.matmul(&xm).expect("shape fixed at generation");
        let feats = self
            .feat_in
            .matmul(&xm)
            .expect("shape fixed at generation")
            .map(|z| z.max(0.0));
        let nl = self.feat_out.matmul(&feats).expect("shape fixed at generation");
        lin.add(&nl).expect("shape fixed at generation").data().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct DomainMixture {
    pub pi: Vec<f64>,
    pub domains: Vec<DomainParams>,
    pub d_model: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// B×d_model inputs, one token per row.
    pub inputs: Matrix,
    /// B×d_out targets.
    pub targets: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_row(&self, t: usize) -> &[f64] {
        let d = self.inputs.cols();
        &self.inputs.data()[t * d..(t + 1) * d]
    }

    pub fn target_row(&self, t: usize) -> &[f64] {
        let d = self.targets.cols();
        &self.targets.data()[t * d..(t + 1) * d]
    }
}

/// Long-tail mixture weights: one head domain holds 1−tail_mass, the rest
/// split tail_mass equally.
pub fn long_tail_weights(m: usize, tail_mass: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Config(format!("long-tail mixture needs m >= 2, got {m}")));
    }
    if !(0.0 < tail_mass && tail_mass < 1.0) {
        return Err(Error::Config(format!("tail mass must be in (0,1), got {tail_mass}")));
    }
    let per_tail = tail_mass / (m - 1) as f64;
    let mut pi = vec![per_tail; m];
    pi[0] = 1.0 - tail_mass;
    Ok(pi)
}

impl DomainMixture {
    pub fn new(pi: Vec<f64>, d_model: usize, d_out: usize, task_seed: u64) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::Config("mixture needs at least one domain".into()));
        }
        if pi.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let domains = (0..pi.len())
            .map(|d| {
                let mut rng = seed::rng(task_seed, "domain", d as u64);
                DomainParams::generate(d_model, d_out, &mut rng)
            })
            .collect();
        Ok(Self {
            pi,
            domains,
            d_model,
            d_out,
        })
    }

    pub fn long_tail(m: usize, tail_mass: f64, d_model: usize, d_out: usize, task_seed: u64) -> Result<Self> {
        Self::new(long_tail_weights(m, tail_mass)?, d_model, d_out, task_seed)
    }

    pub fn n_domains(&self) -> usize {
        self.pi.len()
    }

    fn draw_domain(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (d, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                return d;
            }
        }
        self.pi.len() - 1
    }

    /// Draws a batch: each row samples a domain from π, then (x, y) from it.
    pub fn sample_batch(&self, batch: usize, seed_value: u64) -> Result<Batch> {
        if batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut rng = seed::rng(seed_value, "batch", 0);
        let mut inputs = Vec::with_capacity(batch * self.d_model);
        let mut targets = Vec::with_capacity(batch * self.d_out);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let d = self.draw_domain(&mut rng);
            let (x, y) = self.domains[d].sample(&mut rng);
            inputs.extend_from_slice(&x);
            targets.extend_from_slice(&y);
            labels.push(d);
        }
        Ok(Batch {
            inputs: Matrix::from_vec(batch, self.d_model, inputs)?,
            targets: Matrix::from_vec(batch, self.d_out, targets)?,
            labels,
        })
    }

    /// The same domains re-weighted to target a subset uniformly: the
    /// fine-tuning analog of specializing on one downstream task.
    pub fn refocus(&self, focus: &[usize]) -> Result<DomainMixture> {
        if focus.is_empty() {
            return Err(Error::Config("focus needs at least one domain".into()));
        }
        if focus.iter().any(|&d| d >= self.pi.len()) {
            return Err(Error::Config(format!("focus domain out of range (m = {})", self.pi.len())));
        }
        let mut pi = vec![0.0; self.pi.len()];
        for &d in focus {
            pi[d] = 1.0 / focus.len() as f64;
        }
        Ok(DomainMixture {
            pi,
            domains: self.domains.clone(),
            d_model: self.d_model,
            d_out: self.d_out,
        })
    }

    /// A batch drawn entirely from one domain (per-domain evaluation sets).
    pub fn sample_domain_batch(&self, domain: usize, batch: usize, seed_value: u64) -> Result<Batch> {
        if domain >= self.pi.len() {
            return Err(Error::Config(format!("domain {domain} out of range")));
        }
        let mut rng = seed::rng(seed_value, "domain-batch", domain as u64);
        let mut inputs = Vec::with_capacity(batch * self.d_model);
        let mut targets = Vec::with_capacity(batch * self.d_out);
        for _ in 0..batch {
            let (x, y) = self.domains[domain].sample(&mut rng);
            inputs.extend_from_slice(&x);
            targets.extend_from_slice(&y);
        }
        Ok(Batch {
            inputs: Matrix::from_vec(batch, self.d_model, inputs)?,
            targets: Matrix::from_vec(batch, self.d_out, targets)?,
            labels: vec![domain; batch],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_tail_weights_match_hand_values() {
        assert_eq!(long_tail_weights(2, 0.1).unwrap(), vec![0.9, 0.1]);
        let pi = long_tail_weights(5, 0.2).unwrap();
        assert!((pi[0] - 0.8).abs() < 1e-15);
        for p in &pi[1..] {
            assert!((p - 0.05).abs() < 1e-15);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(long_tail_weights(1, 0.2).is_err());
        assert!(long_tail_weights(3, 1.0).is_err());
    }

    #[test]
    fn single_domain_labels_are_all_zero() {
        let mix = DomainMixture::new(vec![1.0], 4, 2, 1).unwrap();
        let b = mix.sample_batch(32, 9).unwrap();
        assert!(b.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn zero_weight_domain_never_sampled() {
        let mix = DomainMixture::new(vec![1.0, 0.0], 4, 2, 2).unwrap();
        let b = mix.sample_batch(200, 10).unwrap();
        assert!(b.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn label_frequency_concentrates() {
        // π = [0.5, 0.5], B = 10⁴: empirical frequency within 3σ of 0.5.
        let mix = DomainMixture::new(vec![0.5, 0.5], 4, 2, 3).unwrap();
        let b = mix.sample_batch(10_000, 11).unwrap();
        let f0 = b.labels.iter().filter(|&&l| l == 0).count() as f64 / 10_000.0;
        let sigma = (0.25f64 / 10_000.0).sqrt();
        assert!((f0 - 0.5).abs() < 3.0 * sigma, "f0 = {f0}");
    }

    #[test]
    fn same_seed_same_batch() {
        let mix = DomainMixture::long_tail(3, 0.3, 4, 2, 4).unwrap();
        let a = mix.sample_batch(16, 42).unwrap();
        let b = mix.sample_batch(16, 42).unwrap();
        assert_eq!(a.labels, b.labels);
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.inputs), bits(&b.inputs));
        assert_eq!(bits(&a.targets), bits(&b.targets));
        let c = mix.sample_batch(16, 43).unwrap();
        assert_ne!(bits(&a.inputs), bits(&c.inputs));
    }
}

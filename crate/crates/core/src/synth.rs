//! Synthetic bags with planted phenotypes.
//!
//! A phenotype bank holds `G` shared unit vectors plus one discriminative
//! unit vector per class. A bag of class `c` draws `⌈ρ·m⌉` instances around
//! the class vector and the rest around uniformly chosen shared vectors,
//! each with isotropic Gaussian noise of scale `σ`.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bagstore::{Bag, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng;

/// Maximum allowed |cos| between any two bank vectors.
pub const BANK_MAX_COS: f64 = 0.5;
const BANK_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_shared: usize,
    pub dim: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    /// Fraction of instances drawn from the class phenotype.
    pub disc_fraction: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_shared: 6,
            dim: 64,
            bag_size_min: 200,
            bag_size_max: 600,
            disc_fraction: 0.05,
            noise: 0.6,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// `min_bag` is the smallest bag the downstream division accepts.
    pub fn validate(&self, min_bag: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.dim == 0 {
            return bad("num_classes and dim must be positive".into());
        }
        if self.bag_size_min > self.bag_size_max || self.bag_size_min == 0 {
            return bad(format!(
                "bag size range [{}, {}] is empty",
                self.bag_size_min, self.bag_size_max
            ));
        }
        if self.bag_size_min < min_bag {
            return bad(format!(
                "bag_size_min {} is below the pseudo-bag count {min_bag}",
                self.bag_size_min
            ));
        }
        if !(self.disc_fraction > 0.0 && self.disc_fraction < 1.0) {
            return bad(format!(
                "disc_fraction {} not in (0, 1)",
                self.disc_fraction
            ));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be positive", self.noise));
        }
        Ok(())
    }
}

/// Unit-norm phenotype means: shared ones first, then one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeBank {
    pub num_shared: usize,
    pub vectors: Vec<Array1<f64>>,
}

impl PhenotypeBank {
    pub fn shared(&self, g: usize) -> &Array1<f64> {
        &self.vectors[g]
    }

    pub fn class_mean(&self, class: usize) -> &Array1<f64> {
        &self.vectors[self.num_shared + class]
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Draw `G + C` unit vectors with pairwise |cos| below [`BANK_MAX_COS`],
/// resampling each vector up to 1000 times.
pub fn gen_phenotype_bank<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<PhenotypeBank> {
    let total = cfg.num_shared + cfg.num_classes;
    let mut vectors: Vec<Array1<f64>> = Vec::with_capacity(total);
    while vectors.len() < total {
        let mut accepted = None;
        for _ in 0..BANK_TRIES {
            let v = gaussian_vector(cfg.dim, rng);
            let norm = v.dot(&v).sqrt();
            if norm == 0.0 {
                continue;
            }
            let v = v / norm;
            if vectors.iter().all(|u| u.dot(&v).abs() < BANK_MAX_COS) {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => vectors.push(v),
            None => {
                return Err(Error::Bank(format!(
                    "no admissible direction for vector {} of {total} in d = {} after {BANK_TRIES} tries",
                    vectors.len() + 1,
                    cfg.dim
                )))
            }
        }
    }
    Ok(PhenotypeBank {
        num_shared: cfg.num_shared,
        vectors,
    })
}

/// A bag plus the bank index each instance was drawn around.
pub fn gen_bag_with_truth<R: Rng + ?Sized>(
    id: &str,
    class: usize,
    bank: &PhenotypeBank,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<(Bag, Vec<usize>)> {
    if class >= cfg.num_classes {
        return Err(Error::LabelOutOfRange {
            id: id.to_string(),
            label: class,
            num_classes: cfg.num_classes,
        });
    }
    let m = rng.random_range(cfg.bag_size_min..=cfg.bag_size_max);
    let n_disc = disc_count(cfg.disc_fraction, m);
    let mut sources: Vec<usize> = (0..m)
        .map(|j| {
            if j < n_disc || cfg.num_shared == 0 {
                bank.num_shared + class
            } else {
                rng.random_range(0..cfg.num_shared)
            }
        })
        .collect();
    sources.shuffle(rng);
    let mut features = Array2::<f64>::zeros((m, cfg.dim));
    for (mut row, &src) in features.rows_mut().into_iter().zip(&sources) {
        let mean = &bank.vectors[src];
        for (x, mu) in row.iter_mut().zip(mean) {
            *x = mu + cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok((Bag::new(id, features, class)?, sources))
}

/// `⌈ρ·m⌉`, guarded against float noise just above an integer.
pub fn disc_count(rho: f64, m: usize) -> usize {
    let x = rho * m as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c as usize).min(m)
}

pub fn gen_bag<R: Rng + ?Sized>(
    id: &str,
    class: usize,
    bank: &PhenotypeBank,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Bag> {
    Ok(gen_bag_with_truth(id, class, bank, cfg, rng)?.0)
}

/// Class-balanced train/val/test splits. Bag `i` of a split has class
/// `i mod C`; each bag draws from its own keyed stream.
pub fn gen_dataset(cfg: &SynthConfig, sizes: (usize, usize, usize)) -> Result<Dataset> {
    use rayon::prelude::*;
    let bank = gen_phenotype_bank(cfg, &mut rng::stream(cfg.seed, &["bank".into()]))?;
    let mut specs = Vec::new();
    for (split, count) in [
        (Split::Train, sizes.0),
        (Split::Val, sizes.1),
        (Split::Test, sizes.2),
    ] {
        for i in 0..count {
            specs.push((
                format!("{}_{i:04}", split.as_str()),
                i % cfg.num_classes,
                split,
            ));
        }
    }
    let entries = specs
        .par_iter()
        .map(|(id, class, split)| {
            let mut r = rng::stream(cfg.seed, &["bag".into(), id.as_str().into()]);
            Ok((gen_bag(id, *class, &bank, cfg, &mut r)?, *split))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.num_classes, cfg.dim, entries)
}

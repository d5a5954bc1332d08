//! Wall-clock benchmarks of pseudo-bag division.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bagstore::Bag;
use crate::division::{self, DivisionConfig, DivisionMethod};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::{self, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Bag sizes for the linearity fit.
    pub sizes: Vec<usize>,
    pub dim: usize,
    /// Bags per size.
    pub bags: usize,
    /// Timed repetitions per bag, after one discarded warm-up.
    pub reps: usize,
    /// Bag size for the method comparison.
    pub compare_m: usize,
    pub methods: Vec<DivisionMethod>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1000, 2000, 4000, 8000],
            dim: 1024,
            bags: 3,
            reps: 10,
            compare_m: 3000,
            methods: DivisionMethod::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: DivisionMethod,
    pub m: usize,
    pub d: usize,
    pub reps: usize,
    /// Seconds per bag.
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    /// `prototype_ft` at every size.
    pub scaling: Vec<BenchRow>,
    /// Every method at `compare_m`.
    pub methods: Vec<BenchRow>,
    /// Log-log slope of `prototype_ft` mean time against `m`.
    pub slope: f64,
}

impl BenchReport {
    pub fn method(&self, method: DivisionMethod) -> Option<&BenchRow> {
        self.methods.iter().find(|r| r.method == method)
    }
}

/// Bags of exactly `m` instances in dimension `d`.
pub fn bench_bags(m: usize, d: usize, count: usize, seed: u64) -> Result<Vec<Bag>> {
    let cfg = SynthConfig {
        dim: d,
        bag_size_min: m,
        bag_size_max: m,
        seed,
        ..SynthConfig::default()
    };
    let bank = synth::gen_phenotype_bank(&cfg, &mut rng::stream(seed, &["bench-bank".into()]))?;
    (0..count)
        .map(|i| {
            let id = format!("bench_{m}_{i}");
            let mut r = rng::stream(seed, &["bench-bag".into(), id.as_str().into()]);
            synth::gen_bag(&id, i % cfg.num_classes, &bank, &cfg, &mut r)
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `divide` on every bag `reps` times after one untimed warm-up call.
pub fn time_division(
    bags: &[Bag],
    cfg: &DivisionConfig,
    reps: usize,
    seed: u64,
) -> Result<BenchRow> {
    let first = bags
        .first()
        .ok_or_else(|| Error::Config("no bags to time".into()))?;
    if reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    let mut check = division::divide_seeded(first, cfg, seed)?;
    let mut times = Vec::with_capacity(bags.len() * reps);
    for bag in bags {
        for rep in 0..reps {
            let mut r = rng::stream(seed, &["bench-divide".into(), bag.id().into(), rep.into()]);
            let t0 = Instant::now();
            check = division::divide(bag, cfg, &mut r)?;
            times.push(t0.elapsed().as_secs_f64());
        }
    }
    check.validate()?;
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(BenchRow {
        method: cfg.method,
        m: first.m(),
        d: first.d(),
        reps,
        mean,
        median: median(&mut times),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn run_bench(cfg: &BenchConfig, division: &DivisionConfig) -> Result<BenchReport> {
    if cfg.sizes.is_empty() {
        return Err(Error::Config("bench needs at least one size".into()));
    }
    let ft = DivisionConfig {
        method: DivisionMethod::PrototypeFt,
        ..division.clone()
    };
    let mut scaling = Vec::new();
    for &m in &cfg.sizes {
        let bags = bench_bags(m, cfg.dim, cfg.bags, cfg.seed)?;
        let row = time_division(&bags, &ft, cfg.reps, cfg.seed)?;
        log::info!("prototype_ft m={m}: mean {:.3e} s", row.mean);
        scaling.push(row);
    }
    let xs: Vec<f64> = scaling.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = scaling.iter().map(|r| r.mean).collect();
    let slope = if xs.len() >= 2 {
        loglog_slope(&xs, &ys)
    } else {
        f64::NAN
    };

    let m0 = cfg.compare_m;
    let bags = bench_bags(m0, cfg.dim, cfg.bags, cfg.seed)?;
    let mut methods = Vec::new();
    for &method in &cfg.methods {
        let c = DivisionConfig {
            method,
            ..division.clone()
        };
        let row = time_division(&bags, &c, cfg.reps, cfg.seed)?;
        log::info!("{} m={m0}: mean {:.3e} s", method.as_str(), row.mean);
        methods.push(row);
    }
    Ok(BenchReport {
        scaling,
        methods,
        slope,
    })
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut s = String::from("kind,method,m,d,reps,mean_s,median_s\n");
    for (kind, rows) in [("scaling", &report.scaling), ("methods", &report.methods)] {
        for r in rows {
            s.push_str(&format!(
                "{kind},{},{},{},{},{:.6e},{:.6e}\n",
                r.method.as_str(),
                r.m,
                r.d,
                r.reps,
                r.mean,
                r.median
            ));
        }
    }
    s.push_str(&format!("slope,prototype_ft,,,,{:.4},\n", report.slope));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_runs() {
        let cfg = BenchConfig {
            sizes: vec![60, 120],
            compare_m: 60,
            dim: 16,
            reps: 2,
            ..Default::default()
        };
        let div = DivisionConfig {
            n: 10,
            ..Default::default()
        };
        let report = run_bench(&cfg, &div).unwrap();
        assert_eq!(report.scaling.len(), 2);
        assert_eq!(report.methods.len(), 4);
        assert!(report.slope.is_finite());
        assert!(bench_csv(&report).starts_with("kind,method,m,d,reps,mean_s,median_s\n"));
    }
}

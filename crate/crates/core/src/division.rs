//! Pseudo-bag division.
//!
//! Instances of a bag are first grouped into `l` phenotypes, then each
//! phenotype stratum is shuffled and dealt across `n` pseudo-bags so every
//! pseudo-bag roughly preserves the bag's phenotype mix.
//!
//! Phenotypes come from one of four methods:
//! * `prototype_ft`: bin instances by cosine similarity to the bag mean, then
//!   refine with `k` rounds of centroid updates (cosine assignment);
//! * `prototype`: the binning alone;
//! * `kmeans`: classical Lloyd iterations with Euclidean distance;
//! * `random`: no phenotypes, instances dealt uniformly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bagstore::Bag;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivisionMethod {
    PrototypeFt,
    Prototype,
    Random,
    Kmeans,
}

impl DivisionMethod {
    pub const ALL: [DivisionMethod; 4] = [
        DivisionMethod::PrototypeFt,
        DivisionMethod::Prototype,
        DivisionMethod::Random,
        DivisionMethod::Kmeans,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DivisionMethod::PrototypeFt => "prototype_ft",
            DivisionMethod::Prototype => "prototype",
            DivisionMethod::Random => "random",
            DivisionMethod::Kmeans => "kmeans",
        }
    }
}

impl std::str::FromStr for DivisionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DivisionMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown division method {s:?}")))
    }
}

/// Settings for the `kmeans` baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansParams {
    /// Lloyd iteration cap per run.
    pub max_iter: usize,
    /// Independent random initializations; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for KmeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivisionConfig {
    /// Pseudo-bags per bag.
    pub n: usize,
    /// Phenotype count.
    pub l: usize,
    /// Fine-tuning iterations.
    pub k: usize,
    pub method: DivisionMethod,
    /// Reject bags with fewer than `n` instances instead of leaving some
    /// pseudo-bags empty.
    pub strict: bool,
    pub kmeans: KmeansParams,
}

impl Default for DivisionConfig {
    fn default() -> Self {
        Self {
            n: 30,
            l: 8,
            k: 8,
            method: DivisionMethod::PrototypeFt,
            strict: true,
            kmeans: KmeansParams::default(),
        }
    }
}

impl DivisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.l == 0 {
            return Err(Error::Config(format!(
                "division needs n >= 1 and l >= 1 (got n = {}, l = {})",
                self.n, self.l
            )));
        }
        if self.method == DivisionMethod::Kmeans
            && (self.kmeans.restarts == 0 || self.kmeans.max_iter == 0)
        {
            return Err(Error::Config(
                "kmeans needs restarts >= 1 and max_iter >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Phenotype and pseudo-bag index of every instance of one bag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoBagPartition {
    n: usize,
    l: usize,
    phenotype: Vec<usize>,
    pseudo_bag: Vec<usize>,
}

impl PseudoBagPartition {
    /// Build and validate a partition.
    pub fn new(n: usize, l: usize, phenotype: Vec<usize>, pseudo_bag: Vec<usize>) -> Result<Self> {
        let p = Self {
            n,
            l,
            phenotype,
            pseudo_bag,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Instance count.
    pub fn m(&self) -> usize {
        self.pseudo_bag.len()
    }

    pub fn phenotype(&self) -> &[usize] {
        &self.phenotype
    }

    pub fn pseudo_bag(&self) -> &[usize] {
        &self.pseudo_bag
    }

    /// Instance indices of each pseudo-bag, ascending.
    pub fn pseudo_bags(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n];
        for (j, &t) in self.pseudo_bag.iter().enumerate() {
            out[t].push(j);
        }
        out
    }

    /// Check range, per-stratum balance and non-emptiness.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPartition(msg));
        if self.n == 0 || self.l == 0 {
            return bad(format!("n = {}, l = {}", self.n, self.l));
        }
        if self.phenotype.len() != self.pseudo_bag.len() {
            return bad(format!(
                "{} phenotype entries vs {} pseudo-bag entries",
                self.phenotype.len(),
                self.pseudo_bag.len()
            ));
        }
        let mut counts = vec![vec![0usize; self.n]; self.l];
        for (j, (&c, &t)) in self.phenotype.iter().zip(&self.pseudo_bag).enumerate() {
            if c >= self.l {
                return bad(format!("instance {j}: phenotype {c} >= l = {}", self.l));
            }
            if t >= self.n {
                return bad(format!("instance {j}: pseudo-bag {t} >= n = {}", self.n));
            }
            counts[c][t] += 1;
        }
        for (c, row) in counts.iter().enumerate() {
            let lo = row.iter().min().copied().unwrap_or(0);
            let hi = row.iter().max().copied().unwrap_or(0);
            if hi - lo > 1 {
                return bad(format!("phenotype {c}: pseudo-bag sizes range {lo}..={hi}"));
            }
        }
        if self.m() >= self.n {
            let mut sizes = vec![0usize; self.n];
            for &t in &self.pseudo_bag {
                sizes[t] += 1;
            }
            if let Some(t) = sizes.iter().position(|&s| s == 0) {
                return bad(format!(
                    "pseudo-bag {t} is empty with m = {} >= n",
                    self.m()
                ));
            }
        }
        Ok(())
    }

    pub fn to_sidecar(&self, bag_id: &str) -> PartitionSidecar {
        PartitionSidecar {
            bag_id: bag_id.to_string(),
            n: self.n,
            l: self.l,
            phenotype: self.phenotype.clone(),
            pseudo_bag: self.pseudo_bag.clone(),
        }
    }
}

/// JSON form of a partition, stored next to the bag it divides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSidecar {
    pub bag_id: String,
    pub n: usize,
    pub l: usize,
    pub phenotype: Vec<usize>,
    pub pseudo_bag: Vec<usize>,
}

impl PartitionSidecar {
    pub fn into_partition(self) -> Result<PseudoBagPartition> {
        PseudoBagPartition::new(self.n, self.l, self.phenotype, self.pseudo_bag)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Intermediate state of prototype clustering.
#[derive(Debug, Clone)]
pub struct ClusterState {
    /// Bag mean.
    pub prototype: Array1<f64>,
    /// Centroids used by the last reassignment; `None` for clusters that were
    /// empty then (or all of them when no fine-tuning ran).
    pub centroids: Vec<Option<Array1<f64>>>,
    /// Final member indices per cluster.
    pub members: Vec<Vec<usize>>,
    /// Cosine similarity of each instance to the prototype.
    pub similarities: Vec<f64>,
}

pub fn compute_prototype(bag: &Bag) -> Array1<f64> {
    let x = bag.features();
    let mut sum = Array1::<f64>::zeros(bag.d());
    for row in x.rows() {
        sum += &row;
    }
    sum / bag.m() as f64
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either norm is 0. Clamped to `[−1, 1]`.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn row_norms(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| dot(r, r).sqrt()).collect()
}

/// Bin of a similarity in `[−1, 1]` among `l` equal-width bins, 0-based.
/// The last bin is closed on the right so `s = 1` lands in bin `l − 1`.
pub fn similarity_bin(s: f64, l: usize) -> usize {
    let b = ((s + 1.0) * l as f64 / 2.0).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(l - 1)
    }
}

fn prototype_similarities(bag: &Bag, prototype: &Array1<f64>) -> Vec<f64> {
    let x = bag.features();
    let pn = dot(prototype.view(), prototype.view()).sqrt();
    let dots = x.dot(prototype);
    row_norms(x)
        .into_iter()
        .zip(dots.iter())
        .map(|(xn, &d)| {
            if xn == 0.0 || pn == 0.0 {
                0.0
            } else {
                (d / (xn * pn)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// Initial phenotype (0-based) of every instance from its similarity to the
/// bag prototype.
pub fn initial_phenotypes(bag: &Bag, l: usize) -> Vec<usize> {
    assert!(l >= 1, "l must be >= 1");
    let prototype = compute_prototype(bag);
    prototype_similarities(bag, &prototype)
        .into_iter()
        .map(|s| similarity_bin(s, l))
        .collect()
}

/// Member mean of every non-empty cluster.
fn cluster_means(x: ArrayView2<'_, f64>, assign: &[usize], l: usize) -> Vec<Option<Array1<f64>>> {
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((l, d));
    let mut counts = vec![0usize; l];
    for (row, &c) in x.rows().into_iter().zip(assign) {
        let mut s = sums.row_mut(c);
        s += &row;
        counts[c] += 1;
    }
    sums.rows()
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.to_owned() / n as f64))
        .collect()
}

/// Reassign each instance to the centroid of maximal cosine similarity.
/// Missing centroids are skipped; ties go to the lowest index.
fn assign_by_cosine(
    x: ArrayView2<'_, f64>,
    norms: &[f64],
    centroids: &[Option<Array1<f64>>],
) -> Vec<usize> {
    let live: Vec<usize> = (0..centroids.len())
        .filter(|&c| centroids[c].is_some())
        .collect();
    let d = x.ncols();
    let mut unit = Array2::<f64>::zeros((d, live.len()));
    for (col, &c) in live.iter().enumerate() {
        let f = centroids[c].as_ref().expect("live centroid");
        let n = dot(f.view(), f.view()).sqrt();
        if n > 0.0 {
            unit.column_mut(col).assign(&(f / n));
        }
    }
    let dots = x.dot(&unit);
    dots.rows()
        .into_iter()
        .zip(norms)
        .map(|(row, &xn)| {
            let mut best = 0;
            let mut best_s = f64::NEG_INFINITY;
            for (col, &v) in row.iter().enumerate() {
                let s = if xn == 0.0 { 0.0 } else { v / xn };
                if s > best_s {
                    best_s = s;
                    best = col;
                }
            }
            live[best]
        })
        .collect()
}

/// Run `k` fine-tuning rounds; also returns the centroids used last.
fn finetune_traced(
    bag: &Bag,
    mut assign: Vec<usize>,
    l: usize,
    k: usize,
) -> (Vec<usize>, Vec<Option<Array1<f64>>>) {
    let x = bag.features();
    let norms = row_norms(x);
    let mut centroids = vec![None; l];
    for _ in 0..k {
        centroids = cluster_means(x, &assign, l);
        assign = assign_by_cosine(x, &norms, &centroids);
    }
    (assign, centroids)
}

/// Exactly `k` rounds of: recompute each non-empty cluster's mean, then move
/// every instance to its most cosine-similar centroid. `phenotypes` must hold
/// indices below `l`.
pub fn finetune_phenotypes(bag: &Bag, phenotypes: Vec<usize>, l: usize, k: usize) -> Vec<usize> {
    assert_eq!(phenotypes.len(), bag.m(), "one phenotype per instance");
    assert!(
        phenotypes.iter().all(|&c| c < l),
        "phenotype index out of range"
    );
    finetune_traced(bag, phenotypes, l, k).0
}

/// Prototype binning followed by `k` fine-tuning rounds.
pub fn cluster_phenotypes(bag: &Bag, l: usize, k: usize) -> ClusterState {
    assert!(l >= 1, "l must be >= 1");
    let prototype = compute_prototype(bag);
    let similarities = prototype_similarities(bag, &prototype);
    let initial = similarities.iter().map(|&s| similarity_bin(s, l)).collect();
    let (assign, centroids) = finetune_traced(bag, initial, l, k);
    let mut members = vec![Vec::new(); l];
    for (j, &c) in assign.iter().enumerate() {
        members[c].push(j);
    }
    ClusterState {
        prototype,
        centroids,
        members,
        similarities,
    }
}

/// Shuffle each phenotype stratum and deal it across `n` pseudo-bags.
///
/// Dealing continues round-robin from where the previous stratum stopped
/// (starting at a random offset), so every stratum is split into parts whose
/// sizes differ by at most one and, when `m ≥ n`, no pseudo-bag is empty.
pub fn stratified_pseudobags<R: Rng + ?Sized>(
    phenotypes: &[usize],
    n: usize,
    strict: bool,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let m = phenotypes.len();
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    if strict && m < n {
        return Err(Error::BagTooSmall { m, n });
    }
    let strata = phenotypes.iter().copied().max().map_or(0, |c| c + 1);
    let mut members = vec![Vec::new(); strata];
    for (j, &c) in phenotypes.iter().enumerate() {
        members[c].push(j);
    }
    let mut out = vec![0usize; m];
    let mut cursor = rng.random_range(0..n);
    for stratum in &mut members {
        stratum.shuffle(rng);
        for &j in stratum.iter() {
            out[j] = cursor;
            cursor = (cursor + 1) % n;
        }
    }
    Ok(out)
}

fn sq_norms(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| dot(r, r)).collect()
}

/// One Lloyd run from uniformly drawn instance centers. Returns assignments
/// and inertia.
fn lloyd_run<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    x_sq: &[f64],
    clusters: usize,
    max_iter: usize,
    rng: &mut R,
) -> (Vec<usize>, f64) {
    let m = x.nrows();
    let init = rand::seq::index::sample(rng, m, clusters);
    let mut centers: Vec<Array1<f64>> = init.iter().map(|j| x.row(j).to_owned()).collect();
    let mut assign: Vec<usize> = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        let mut ct = Array2::<f64>::zeros((x.ncols(), clusters));
        for (c, f) in centers.iter().enumerate() {
            ct.column_mut(c).assign(f);
        }
        let c_sq: Vec<f64> = centers.iter().map(|f| dot(f.view(), f.view())).collect();
        let dots = x.dot(&ct);
        let mut next = Vec::with_capacity(m);
        inertia = 0.0;
        for (row, &xs) in dots.rows().into_iter().zip(x_sq) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &v) in row.iter().enumerate() {
                let dist = (xs - 2.0 * v + c_sq[c]).max(0.0);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            inertia += best_d;
            next.push(best);
        }
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
        for (c, mean) in cluster_means(x, &assign, clusters).into_iter().enumerate() {
            // Empty clusters keep their previous center.
            if let Some(mean) = mean {
                centers[c] = mean;
            }
        }
    }
    (assign, inertia)
}

/// Classical K-means (Euclidean, uniform instance initialization), best of
/// `params.restarts` runs by inertia.
pub fn kmeans_phenotypes<R: Rng + ?Sized>(
    bag: &Bag,
    l: usize,
    params: &KmeansParams,
    rng: &mut R,
) -> Vec<usize> {
    let x = bag.features();
    let clusters = l.min(bag.m());
    let x_sq = sq_norms(x);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..params.restarts.max(1) {
        let run = lloyd_run(x, &x_sq, clusters, params.max_iter.max(1), rng);
        if best.as_ref().is_none_or(|(_, i)| run.1 < *i) {
            best = Some(run);
        }
    }
    best.expect("at least one run").0
}

/// Divide one bag into pseudo-bags with the configured method.
pub fn divide<R: Rng + ?Sized>(
    bag: &Bag,
    cfg: &DivisionConfig,
    rng: &mut R,
) -> Result<PseudoBagPartition> {
    cfg.validate()?;
    if cfg.strict && bag.m() < cfg.n {
        return Err(Error::BagTooSmall {
            m: bag.m(),
            n: cfg.n,
        });
    }
    let phenotype = match cfg.method {
        DivisionMethod::PrototypeFt => {
            finetune_traced(bag, initial_phenotypes(bag, cfg.l), cfg.l, cfg.k).0
        }
        DivisionMethod::Prototype => initial_phenotypes(bag, cfg.l),
        DivisionMethod::Random => vec![0; bag.m()],
        DivisionMethod::Kmeans => kmeans_phenotypes(bag, cfg.l, &cfg.kmeans, rng),
    };
    let pseudo_bag = stratified_pseudobags(&phenotype, cfg.n, cfg.strict, rng)?;
    PseudoBagPartition::new(cfg.n, cfg.l, phenotype, pseudo_bag)
}

/// The division stream for one bag under a global seed.
pub fn division_rng(seed: u64, bag_id: &str) -> StreamRng {
    rng::stream(seed, &["divide".into(), bag_id.into()])
}

/// [`divide`] with the bag's own keyed stream.
pub fn divide_seeded(bag: &Bag, cfg: &DivisionConfig, seed: u64) -> Result<PseudoBagPartition> {
    divide(bag, cfg, &mut division_rng(seed, bag.id()))
}

/// Divide many bags, in parallel when a thread pool is available. Output
/// order follows input order and does not depend on the thread count.
pub fn divide_all(
    bags: &[Bag],
    cfg: &DivisionConfig,
    seed: u64,
) -> Result<Vec<PseudoBagPartition>> {
    use rayon::prelude::*;
    bags.par_iter()
        .map(|b| divide_seeded(b, cfg, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn bag(rows: Array2<f64>) -> Bag {
        Bag::new("t", rows, 0).unwrap()
    }

    fn random_bag(m: usize, d: usize, seed: u64) -> Bag {
        let mut rng = StreamRng::seed_from_u64(seed);
        let v: Vec<f64> = (0..m * d)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        bag(Array2::from_shape_vec((m, d), v).unwrap())
    }

    /// Neumaier-compensated column sums.
    fn compensated_mean(b: &Bag) -> Vec<f64> {
        (0..b.d())
            .map(|c| {
                let (mut s, mut comp) = (0.0f64, 0.0f64);
                for j in 0..b.m() {
                    let v = b.features()[[j, c]];
                    let t = s + v;
                    if s.abs() >= v.abs() {
                        comp += (s - t) + v;
                    } else {
                        comp += (v - t) + s;
                    }
                    s = t;
                }
                (s + comp) / b.m() as f64
            })
            .collect()
    }

    #[test]
    fn prototype_examples() {
        let one = bag(array![[3.0, -1.0]]);
        assert_eq!(compute_prototype(&one).to_vec(), vec![3.0, -1.0]);
        let two = bag(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(compute_prototype(&two).to_vec(), vec![0.5, 0.5]);
        let big = random_bag(1000, 16, 3);
        let got = compute_prototype(&big);
        for (g, e) in got.iter().zip(compensated_mean(&big)) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1e-300), "{g} vs {e}");
        }
    }

    #[test]
    fn cosine_examples() {
        let v = array![0.3, -2.0, 5.0];
        assert!((cosine_similarity(v.view(), v.view()) - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()),
            0.0
        );
        assert_eq!(
            cosine_similarity(array![1.0, 0.0].view(), array![-1.0, 0.0].view()),
            -1.0
        );
        assert_eq!(
            cosine_similarity(array![0.0, 0.0].view(), array![1.0, 0.0].view()),
            0.0
        );
    }

    #[test]
    fn bin_examples() {
        // 0-based: phenotype 6 of 8 in 1-based terms is bin 5.
        assert_eq!(similarity_bin(0.3, 8), 5);
        assert_eq!(similarity_bin(-1.0, 8), 0);
        assert_eq!(similarity_bin(1.0, 8), 7);
        assert_eq!(similarity_bin(0.25, 8), 5);
        assert_eq!(similarity_bin(0.2499, 8), 4);
        assert_eq!(similarity_bin(0.7, 1), 0);
    }

    #[test]
    fn initial_phenotypes_use_prototype_similarity() {
        // Prototype (1, 0.5); instance (1, 0.5) has similarity 1 -> last bin;
        // (1, 0) and (1, 1) are symmetric around it.
        let b = bag(array![[1.0, 0.0], [1.0, 1.0], [1.0, 0.5]]);
        let p = initial_phenotypes(&b, 4);
        assert_eq!(p[2], 3);
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn finetune_zero_iterations_is_identity() {
        let b = random_bag(50, 4, 1);
        let init: Vec<usize> = (0..50).map(|j| j % 3).collect();
        assert_eq!(finetune_phenotypes(&b, init.clone(), 3, 0), init);
    }

    /// Two clouds around orthogonal directions; any non-degenerate start
    /// must end with each cloud in its own cluster.
    #[test]
    fn finetune_separates_clouds() {
        let mut rng = StreamRng::seed_from_u64(9);
        let d = 6;
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for j in 0..80 {
            let cloud = j % 2;
            for c in 0..d {
                let base = if c == cloud * 3 { 5.0 } else { 0.0 };
                rows.push(base + rng.random::<f64>() * 0.6 - 0.3);
            }
            truth.push(cloud);
        }
        let b = bag(Array2::from_shape_vec((80, d), rows).unwrap());
        // Brute-force confirmation the clouds are separated in cosine terms.
        let mut min_intra = 1.0f64;
        let mut max_inter = -1.0f64;
        for i in 0..80 {
            for j in 0..i {
                let s = cosine_similarity(b.instance(i), b.instance(j));
                if truth[i] == truth[j] {
                    min_intra = min_intra.min(s);
                } else {
                    max_inter = max_inter.max(s);
                }
            }
        }
        assert!(max_inter < min_intra);
        for start in 0..5u64 {
            // Mixed start: each cluster holds members of both clouds.
            let mut r = StreamRng::seed_from_u64(start);
            let init: Vec<usize> = (0..80)
                .map(|j| {
                    if r.random::<f64>() < 0.7 {
                        truth[j]
                    } else {
                        1 - truth[j]
                    }
                })
                .collect();
            let out = finetune_phenotypes(&b, init, 2, 5);
            let same = out.iter().zip(&truth).filter(|(a, b)| a == b).count();
            assert!(same == 80 || same == 0, "start {start}: {same}/80 agree");
        }
    }

    #[test]
    fn final_assignment_is_self_consistent() {
        for seed in 0..5 {
            let b = random_bag(200, 8, seed);
            let state = cluster_phenotypes(&b, 5, 4);
            for (c, members) in state.members.iter().enumerate() {
                for &j in members {
                    // Brute force over the centroids of the last round.
                    let mut best = None;
                    let mut best_s = f64::NEG_INFINITY;
                    for (ci, f) in state.centroids.iter().enumerate() {
                        if let Some(f) = f {
                            let s = cosine_similarity(f.view(), b.instance(j));
                            if s > best_s {
                                best_s = s;
                                best = Some(ci);
                            }
                        }
                    }
                    assert_eq!(best, Some(c));
                }
            }
        }
    }

    #[test]
    fn stratified_examples() {
        let mut rng = StreamRng::seed_from_u64(0);
        let out = stratified_pseudobags(&[0; 7], 3, true, &mut rng).unwrap();
        let mut sizes = [0; 3];
        for &t in &out {
            sizes[t] += 1;
        }
        sizes.sort();
        assert_eq!(sizes, [2, 2, 3]);

        let out = stratified_pseudobags(&[0, 1, 2, 1, 0], 1, true, &mut rng).unwrap();
        assert!(out.iter().all(|&t| t == 0));

        assert!(matches!(
            stratified_pseudobags(&[0, 0], 3, true, &mut rng),
            Err(Error::BagTooSmall { m: 2, n: 3 })
        ));
        assert_eq!(
            stratified_pseudobags(&[0, 0], 3, false, &mut rng)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn small_strata_still_fill_every_pseudo_bag() {
        // Eight strata of four: no stratum alone reaches n = 30.
        let phen: Vec<usize> = (0..32).map(|j| j % 8).collect();
        let mut rng = StreamRng::seed_from_u64(4);
        let out = stratified_pseudobags(&phen, 30, true, &mut rng).unwrap();
        PseudoBagPartition::new(30, 8, phen, out).unwrap();
    }

    #[test]
    fn divide_forced_sizes_and_determinism() {
        let b = random_bag(12, 3, 2);
        let cfg = DivisionConfig {
            n: 12,
            l: 1,
            ..Default::default()
        };
        for method in DivisionMethod::ALL {
            let cfg = DivisionConfig {
                method,
                ..cfg.clone()
            };
            let p = divide_seeded(&b, &cfg, 5).unwrap();
            assert!(p.pseudo_bags().iter().all(|pb| pb.len() == 1), "{method:?}");
            assert_eq!(p, divide_seeded(&b, &cfg, 5).unwrap());
        }
    }

    #[test]
    fn partition_validation_catches_skew() {
        assert!(PseudoBagPartition::new(2, 1, vec![0, 0, 0], vec![0, 0, 0]).is_err());
        assert!(PseudoBagPartition::new(2, 1, vec![0, 0, 0], vec![0, 1, 0]).is_ok());
        assert!(PseudoBagPartition::new(2, 1, vec![0, 0], vec![0, 2]).is_err());
        assert!(PseudoBagPartition::new(2, 1, vec![1], vec![0]).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = random_bag(40, 3, 8);
        let p = divide_seeded(
            &b,
            &DivisionConfig {
                n: 5,
                l: 3,
                k: 2,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let path = dir.path().join("t.partition.json");
        p.to_sidecar("t").save(&path).unwrap();
        let back = PartitionSidecar::load(&path).unwrap();
        assert_eq!(back.bag_id, "t");
        assert_eq!(back.into_partition().unwrap(), p);
    }

    #[test]
    fn kmeans_recovers_obvious_clusters() {
        let b = bag(array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]);
        let mut rng = StreamRng::seed_from_u64(0);
        let a = kmeans_phenotypes(&b, 2, &KmeansParams::default(), &mut rng);
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
    }

    #[test]
    fn config_validation() {
        assert!(DivisionConfig {
            n: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DivisionConfig {
            l: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            "kmeans".parse::<DivisionMethod>().unwrap(),
            DivisionMethod::Kmeans
        );
        assert!("knn".parse::<DivisionMethod>().is_err());
    }
}

//! Attention-pooling MIL classifier with hand-derived gradients.
//!
//! For a bag `X` (`m × d`):
//!
//! ```text
//! e_j   = relu(W1ᵀ x_j + b1)          instance embedding (h)
//! s_j   = wᵀ tanh(Vᵀ e_j)             attention score
//! a     = softmax(s)                   attention over instances
//! z     = Σ_j a_j e_j                  bag embedding (h)
//! probs = softmax(W2ᵀ z + b2)          class probabilities (C)
//! ```
//!
//! Training is plain SGD on one bag (or augmented sample) per step with a
//! soft-target cross-entropy.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bagstore::{Bag, Dataset, SoftLabel, Split};
use crate::division::{self, DivisionConfig, PseudoBagPartition};
use crate::error::{Error, Result};
use crate::eval;
use crate::mixing::{self, DividedBag, MixConfig};
use crate::rng;

/// Guard inside the log of the cross-entropy.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    /// Instance embedding, `d × h`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Attention projection, `h × a`.
    pub v: Array2<f64>,
    /// Attention scoring vector, `a`.
    pub w: Array1<f64>,
    /// Classifier, `h × C`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..s))
}

impl MilParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(d: usize, h: usize, a: usize, c: usize, rng: &mut R) -> Self {
        let w1 = xavier(d, h, rng);
        let v = xavier(h, a, rng);
        let w = xavier(a, 1, rng).into_shape_with_order(a).expect("column");
        let w2 = xavier(h, c, rng);
        Self {
            w1,
            b1: Array1::zeros(h),
            v,
            w,
            w2,
            b2: Array1::zeros(c),
        }
    }

    pub fn zeros(d: usize, h: usize, a: usize, c: usize) -> Self {
        Self {
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            v: Array2::zeros((h, a)),
            w: Array1::zeros(a),
            w2: Array2::zeros((h, c)),
            b2: Array1::zeros(c),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn attn(&self) -> usize {
        self.v.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.b2.len()
    }

    /// Parameter count.
    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.v.len() + self.w.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All values in the fixed order W1, b1, V, w, W2, b2 (row-major).
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.v.iter())
            .chain(self.w.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.v.iter_mut())
            .chain(self.w.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &MilParams) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.v.scaled_add(scale, &other.v);
        self.w.scaled_add(scale, &other.w);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    x: ArrayView2<'a, f64>,
    pre: Array2<f64>,
    emb: Array2<f64>,
    th: Array2<f64>,
    z: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<'a> {
    pub probs: Array1<f64>,
    pub attention: Array1<f64>,
    pub cache: ForwardCache<'a>,
}

fn softmax(v: &Array1<f64>) -> Array1<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = v.mapv(|x| (x - max).exp());
    let s = e.sum();
    e / s
}

pub fn forward<'a>(params: &MilParams, x: ArrayView2<'a, f64>) -> ForwardOutput<'a> {
    assert!(x.nrows() >= 1, "empty bag");
    assert_eq!(x.ncols(), params.dim(), "feature dimension mismatch");
    let pre = x.dot(&params.w1) + &params.b1;
    let emb = pre.mapv(|v| v.max(0.0));
    let th = emb.dot(&params.v).mapv(f64::tanh);
    let scores = th.dot(&params.w);
    let attention = softmax(&scores);
    let z = attention.dot(&emb);
    let logits = z.dot(&params.w2) + &params.b2;
    let probs = softmax(&logits);
    ForwardOutput {
        probs,
        attention,
        cache: ForwardCache { x, pre, emb, th, z },
    }
}

/// `−Σ_c t_c · ln(p_c + ε)`.
pub fn loss(probs: &[f64], target: &SoftLabel) -> f64 {
    assert_eq!(probs.len(), target.num_classes(), "class count mismatch");
    -probs
        .iter()
        .zip(target.probs())
        .map(|(p, t)| t * (p + LOG_EPS).ln())
        .sum::<f64>()
}

/// Gradient of [`loss`] with respect to the logits. With `ε = 0` this is
/// exactly `probs − target`; the guard perturbs it by at most ~ε/p.
pub fn logit_gradient(probs: &Array1<f64>, target: &SoftLabel) -> Array1<f64> {
    let t = target.probs();
    let r: f64 = probs
        .iter()
        .zip(t)
        .map(|(p, tk)| tk * p / (p + LOG_EPS))
        .sum();
    Array1::from_iter(
        probs
            .iter()
            .zip(t)
            .map(|(p, tc)| p * r - tc * p / (p + LOG_EPS)),
    )
}

/// Exact gradients of `loss(forward(params, x), target)`.
pub fn backward(params: &MilParams, out: &ForwardOutput<'_>, target: &SoftLabel) -> MilParams {
    let cache = &out.cache;
    let a = &out.attention;
    let dlogits = logit_gradient(&out.probs, target);

    let h = params.hidden();
    let c = params.num_classes();
    let gw2 = cache
        .z
        .view()
        .into_shape_with_order((h, 1))
        .expect("column")
        .dot(&dlogits.view().into_shape_with_order((1, c)).expect("row"));
    let gb2 = dlogits.clone();
    let dz = params.w2.dot(&dlogits);

    // Attention softmax.
    let da = cache.emb.dot(&dz);
    let mean_da = a.dot(&da);
    let ds = a * &(da - mean_da);

    let gw = cache.th.t().dot(&ds);
    let mut du = Array2::<f64>::zeros(cache.th.raw_dim());
    for ((mut row, th_row), &dsj) in du.rows_mut().into_iter().zip(cache.th.rows()).zip(&ds) {
        for ((u, &t), &wk) in row.iter_mut().zip(&th_row).zip(&params.w) {
            *u = dsj * wk * (1.0 - t * t);
        }
    }
    let gv = cache.emb.t().dot(&du);

    let mut de = du.dot(&params.v.t());
    for (mut row, &aj) in de.rows_mut().into_iter().zip(a) {
        row.scaled_add(aj, &dz);
    }
    de.zip_mut_with(&cache.pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let gw1 = cache.x.t().dot(&de);
    let gb1 = de.sum_axis(Axis(0));

    MilParams {
        w1: gw1,
        b1: gb1,
        v: gv,
        w: gw,
        w2: gw2,
        b2: gb2,
    }
}

pub fn predict_features(params: &MilParams, x: ArrayView2<'_, f64>) -> SoftLabel {
    let probs = forward(params, x).probs;
    // Renormalize to absorb the last-ulp drift of the softmax sum.
    let s = probs.sum();
    SoftLabel::new(probs.iter().map(|p| p / s).collect()).expect("softmax output")
}

pub fn predict(params: &MilParams, bag: &Bag) -> SoftLabel {
    predict_features(params, bag.features())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Psemix,
    Mixup,
    Instancemix,
}

impl Augmentation {
    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Psemix => "psemix",
            Augmentation::Mixup => "mixup",
            Augmentation::Instancemix => "instancemix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Epochs without validation-loss improvement before stopping; 0 never
    /// stops early.
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub attn: usize,
    pub augmentation: Augmentation,
    pub mix: MixConfig,
    pub division: DivisionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 50,
            patience: 10,
            seed: 0,
            hidden: 64,
            attn: 32,
            augmentation: Augmentation::None,
            mix: MixConfig::default(),
            division: DivisionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.hidden == 0 || self.attn == 0 {
            return Err(Error::Config("epochs, hidden and attn must be >= 1".into()));
        }
        self.mix.validate()?;
        if self.augmentation == Augmentation::Psemix {
            self.division.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean loss over the clean training bags after the epoch.
    pub train_loss: f64,
    pub train_auc: Option<f64>,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    /// Mean loss over the (possibly augmented) samples seen during the epoch.
    pub stream_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub best: MilParams,
    /// Parameters after the final epoch run.
    pub last: MilParams,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// One training input: features plus soft target.
struct Sample {
    features: Array2<f64>,
    target: SoftLabel,
    id: String,
}

/// Build the sample for step `step` of `epoch`, anchored at bag `i`.
#[allow(clippy::too_many_arguments)]
fn make_sample(
    train: &[Bag],
    partitions: &[PseudoBagPartition],
    i: usize,
    epoch: usize,
    step: usize,
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<Sample> {
    let anchor = &train[i];
    if cfg.augmentation == Augmentation::None || train.len() < 2 {
        return Ok(Sample {
            features: anchor.features().to_owned(),
            target: SoftLabel::one_hot(anchor.label(), num_classes),
            id: anchor.id().to_string(),
        });
    }
    let mut r = rng::stream(cfg.seed, &["augment".into(), epoch.into(), step.into()]);
    // Partner drawn uniformly from the other bags.
    let mut j = r.random_range(0..train.len() - 1);
    if j >= i {
        j += 1;
    }
    let partner = &train[j];
    let sample = match cfg.augmentation {
        Augmentation::Psemix => mixing::psemix_pair(
            DividedBag::new(anchor, &partitions[i])?,
            DividedBag::new(partner, &partitions[j])?,
            &cfg.mix,
            num_classes,
            &mut r,
        )?,
        Augmentation::Mixup => {
            mixing::mixup_interpolate(anchor, partner, cfg.mix.alpha, num_classes, &mut r)?
        }
        Augmentation::Instancemix => {
            mixing::instancemix(anchor, partner, cfg.mix.alpha, num_classes, &mut r)?
        }
        Augmentation::None => unreachable!(),
    };
    Ok(Sample {
        features: sample.features,
        target: sample.label,
        id: format!("{}+{}", anchor.id(), partner.id()),
    })
}

/// Mean loss and AUC of `params` on `bags`.
fn score(params: &MilParams, bags: &[Bag], num_classes: usize) -> (f64, Option<f64>) {
    if bags.is_empty() {
        return (f64::NAN, None);
    }
    let r = eval::evaluate(params, bags, num_classes);
    (r.ce_loss, r.auc)
}

/// Train on `train`, selecting by loss on `val` (or on `train` when `val`
/// is empty).
pub fn train(
    train: &[Bag],
    val: &[Bag],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("empty training set".into()))?;
    let d = first.d();
    let partitions = if cfg.augmentation == Augmentation::Psemix {
        division::divide_all(train, &cfg.division, cfg.seed)?
    } else {
        Vec::new()
    };
    let mut params = MilParams::init(
        d,
        cfg.hidden,
        cfg.attn,
        num_classes,
        &mut rng::stream(cfg.seed, &["init".into()]),
    );
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &["order".into(), epoch.into()]));
        let mut stream_loss = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let sample = make_sample(train, &partitions, i, epoch, step, num_classes, cfg)?;
            let out = forward(&params, sample.features.view());
            let l = loss(out.probs.as_slice().expect("contiguous"), &sample.target);
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    bag: sample.id,
                });
            }
            stream_loss += l;
            let grad = backward(&params, &out, &sample.target);
            params.add_scaled(-cfg.lr, &grad);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    bag: sample.id,
                });
            }
        }
        let (train_loss, train_auc) = score(&params, train, num_classes);
        let (val_loss, val_auc) = score(&params, val, num_classes);
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            train_auc,
            val_loss,
            val_auc,
            stream_loss: stream_loss / train.len() as f64,
        });
        let select = if val.is_empty() { train_loss } else { val_loss };
        if select < best_loss {
            best_loss = select;
            best = params.clone();
            best_epoch = epoch;
        } else if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            log::debug!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        best_epoch,
        metrics,
    })
}

/// [`train`] on a dataset's train and val splits.
pub fn train_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(
        &dataset.split(Split::Train),
        &dataset.split(Split::Val),
        dataset.num_classes(),
        cfg,
    )
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Per-epoch metrics as CSV.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,train_auc,val_loss,val_auc\n");
    for m in metrics {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch,
            m.train_loss,
            fmt_opt(m.train_auc),
            m.val_loss,
            fmt_opt(m.val_auc)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub hidden: usize,
    pub attn: usize,
    pub num_classes: usize,
    /// Parameter order of the blob.
    pub layout: Vec<String>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

const CHECKPOINT_FORMAT: &str = "psemix-mil";

/// Checkpoint file: u32 LE header length, JSON header, then every parameter
/// as little-endian f64 in [`MilParams::iter`] order.
pub fn save_checkpoint(
    params: &MilParams,
    config: Option<&TrainConfig>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dim: params.dim(),
        hidden: params.hidden(),
        attn: params.attn(),
        num_classes: params.num_classes(),
        layout: ["w1", "b1", "v", "w", "w2", "b2"]
            .map(String::from)
            .to_vec(),
        config: config.map(serde_json::to_value).transpose()?,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(4 + json.len() + 8 * params.len());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in params.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MilParams, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 4 {
        return Err(bad("file shorter than its length prefix"));
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(4..4 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(bad("unknown checkpoint format"));
    }
    let mut params = MilParams::zeros(header.dim, header.hidden, header.attn, header.num_classes);
    let blob = &bytes[4 + hlen..];
    if blob.len() != 8 * params.len() {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            8 * params.len()
        )));
    }
    for (dst, chunk) in params.iter_mut().zip(blob.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok((params, header))
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use psemix::bagstore::{self, Dataset, Split};
use psemix::bench;
use psemix::division::{self, DivisionConfig};
use psemix::eval::{self, ProtocolRow};
use psemix::mil;
use psemix::mixing::{self, DividedBag};
use psemix::rng;
use psemix::synth;
use psemix::DivisionMethod;
use rand::Rng;
use serde_json::json;

use crate::config::{Protocol, RunConfig};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Create the output directory and persist the resolved config in it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.toml"), cfg.to_toml()?)?;
    Ok(out)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data_path()?;
    let ds = bagstore::load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    log::info!("loaded {} bags from {}", ds.len(), path.display());
    Ok(ds)
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let s = cfg.splits;
    let ds = synth::gen_dataset(&cfg.synth, (s.train, s.val, s.test))?;
    let manifest = bagstore::save_dataset(&ds, &out)?;
    log::info!("wrote {} bags, manifest {}", ds.len(), manifest.display());
    Ok(())
}

pub fn divide(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let out = prepare_out(cfg)?;
    let dir = out.join("partitions");
    fs::create_dir_all(&dir)?;
    let partitions = division::divide_all(ds.bags(), &cfg.division, cfg.seed)?;
    for (bag, part) in ds.bags().iter().zip(&partitions) {
        part.validate()?;
        part.to_sidecar(bag.id())
            .save(dir.join(format!("{}.json", bag.id())))?;
    }
    log::info!("wrote {} partitions to {}", partitions.len(), dir.display());

    let methods = if cfg.divide.timing_methods.is_empty() {
        vec![cfg.division.method]
    } else {
        cfg.divide.timing_methods.clone()
    };
    let mut csv = String::from("method,bags,reps,mean_s,median_s\n");
    for method in methods {
        let c = DivisionConfig {
            method,
            ..cfg.division.clone()
        };
        let row = bench::time_division(ds.bags(), &c, cfg.divide.reps, cfg.seed)?;
        log::info!("{}: mean {:.3e} s per bag", method.as_str(), row.mean);
        csv.push_str(&format!(
            "{},{},{},{:.6e},{:.6e}\n",
            method.as_str(),
            ds.len(),
            row.reps,
            row.mean,
            row.median
        ));
    }
    write(&out.join("timing.csv"), csv)
}

pub fn augment(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let out = prepare_out(cfg)?;
    let train = ds.split(Split::Train);
    if train.len() < 2 {
        bail!("augmentation needs at least two training bags");
    }
    let partitions = division::divide_all(&train, &cfg.division, cfg.seed)?;
    let mut entries = Vec::with_capacity(cfg.augment.count);
    let mut records = Vec::with_capacity(cfg.augment.count);
    for s in 0..cfg.augment.count {
        let mut r = rng::stream(cfg.seed, &["cli-augment".into(), s.into()]);
        let i = s % train.len();
        let mut j = r.random_range(0..train.len() - 1);
        if j >= i {
            j += 1;
        }
        let sample = mixing::psemix_pair(
            DividedBag::new(&train[i], &partitions[i])?,
            DividedBag::new(&train[j], &partitions[j])?,
            &cfg.mix,
            ds.num_classes(),
            &mut r,
        )?;
        let id = format!("aug_{s:04}");
        records.push(json!({
            "id": id,
            "kind": sample.kind,
            "label": sample.label.probs(),
            "bag_a": sample.provenance.bag_a,
            "bag_b": sample.provenance.bag_b,
            "kept_a": sample.provenance.kept_a,
            "kept_b": sample.provenance.kept_b,
            "m": sample.m(),
        }));
        entries.push((sample.to_bag(id)?, Split::Train));
    }
    let aug = Dataset::new(ds.num_classes(), ds.dim(), entries)?;
    bagstore::save_dataset(&aug, &out)?;
    write(
        &out.join("samples.json"),
        serde_json::to_string_pretty(&records)?,
    )?;
    log::info!("wrote {} augmented samples", aug.len());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let out = prepare_out(cfg)?;
    let tc = cfg.train_config();
    let outcome = mil::train_dataset(&ds, &tc)?;
    mil::save_checkpoint(&outcome.best, Some(&tc), out.join("best.ckpt"))?;
    mil::save_checkpoint(&outcome.last, Some(&tc), out.join("last.ckpt"))?;
    write(&out.join("metrics.csv"), mil::metrics_csv(&outcome.metrics))?;

    let test = ds.split(Split::Test);
    let c = ds.num_classes();
    let (best, last) = (
        eval::evaluate(&outcome.best, &test, c),
        eval::evaluate(&outcome.last, &test, c),
    );
    log::info!(
        "best epoch {} of {}; test auc best {:?} last {:?}",
        outcome.best_epoch,
        outcome.metrics.len(),
        best.auc,
        last.auc
    );
    let rows = [
        ProtocolRow::from_report("test_best", outcome.best_epoch as f64, cfg.seed, &best),
        ProtocolRow::from_report(
            "test_last",
            (outcome.metrics.len() - 1) as f64,
            cfg.seed,
            &last,
        ),
    ];
    write(&out.join("test.csv"), eval::protocol_csv(&rows))
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let ckpt = cfg
        .checkpoint
        .as_deref()
        .context("no model: pass --checkpoint or set `checkpoint` in the config")?;
    let (params, _) =
        mil::load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if params.dim() != ds.dim() || params.num_classes() != ds.num_classes() {
        bail!(
            "checkpoint expects d = {}, C = {}; dataset has d = {}, C = {}",
            params.dim(),
            params.num_classes(),
            ds.dim(),
            ds.num_classes()
        );
    }
    let out = prepare_out(cfg)?;
    let (train, val, test) = (
        ds.split(Split::Train),
        ds.split(Split::Val),
        ds.split(Split::Test),
    );
    let c = ds.num_classes();
    let seed = cfg.seed;
    let mut rows = Vec::new();
    for protocol in &cfg.eval.protocols {
        match protocol {
            Protocol::Plain => {
                rows.push(ProtocolRow::from_report(
                    "plain",
                    0.0,
                    seed,
                    &eval::evaluate(&params, &test, c),
                ));
            }
            Protocol::Gap => {
                let g = eval::generalization_gap(&params, &train, &test, c);
                rows.push(ProtocolRow {
                    protocol: "gap".into(),
                    param: 0.0,
                    seed,
                    acc: None,
                    auc: g.auc_gap,
                    ce: g.loss_gap,
                });
            }
            Protocol::Occlusion => {
                for (r, rep) in
                    eval::occlusion_test(&params, &test, &cfg.eval.occlusion_ratios, c, seed)?
                {
                    rows.push(ProtocolRow::from_report("occlusion", r, seed, &rep));
                }
            }
            Protocol::Corruption => {
                let tc = cfg.train_config();
                for &ratio in &cfg.eval.corruption_ratios {
                    let mut r = rng::stream(seed, &["corrupt".into(), ratio.to_bits().into()]);
                    let (noisy, _) = eval::corrupt_labels(&train, ratio, c, &mut r)?;
                    let outcome = mil::train(&noisy, &val, c, &tc)?;
                    let best = eval::evaluate(&outcome.best, &test, c);
                    let last = eval::evaluate(&outcome.last, &test, c);
                    log::info!(
                        "corruption {ratio}: auc best {:?} last {:?}",
                        best.auc,
                        last.auc
                    );
                    rows.push(ProtocolRow::from_report(
                        "corruption_best",
                        ratio,
                        seed,
                        &best,
                    ));
                    rows.push(ProtocolRow::from_report(
                        "corruption_last",
                        ratio,
                        seed,
                        &last,
                    ));
                }
            }
            Protocol::Inbetween => {
                let partitions = division::divide_all(&train, &cfg.division, seed)?;
                let curve = eval::inbetween_test(
                    &params,
                    &train,
                    &partitions,
                    &cfg.eval.lambda_grid,
                    cfg.mix.target_mode,
                    c,
                    seed,
                )?;
                for (lambda, ce) in curve {
                    rows.push(ProtocolRow {
                        protocol: "inbetween".into(),
                        param: lambda,
                        seed,
                        acc: None,
                        auc: None,
                        ce,
                    });
                }
            }
        }
    }
    write(&out.join("eval.csv"), eval::protocol_csv(&rows))
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let out = prepare_out(cfg)?;
    let report = bench::run_bench(&cfg.bench, &cfg.division)?;
    write(&out.join("bench.csv"), bench::bench_csv(&report))?;
    let mean = |m: DivisionMethod| report.method(m).map(|r| r.mean);
    let speedup = mean(DivisionMethod::Kmeans)
        .zip(mean(DivisionMethod::PrototypeFt))
        .map(|(k, f)| k / f);
    let fastest = report
        .methods
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .map(|r| r.method.as_str());
    log::info!(
        "slope {:.3}, kmeans / prototype_ft {:?}, fastest {:?}",
        report.slope,
        speedup,
        fastest
    );
    let summary = json!({
        "slope": report.slope,
        "kmeans_over_prototype_ft": speedup,
        "fastest": fastest,
    });
    write(
        &out.join("bench.json"),
        serde_json::to_string_pretty(&summary)?,
    )
}

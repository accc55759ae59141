//! Mini-batch training with AdamW and a plateau schedule, per-epoch
//! checkpoints and JSONL metric logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tmamba_core::data::{stack, SegSample};
use tmamba_core::net::{segmentation_loss, Model};
use tmamba_core::numcore::Graph;
use tmamba_core::optim::{AdamW, PlateauScheduler};

use crate::config::RunConfig;
use crate::eval::{evaluate, evaluate_with_loss};
use crate::tensorfile::{io_err, read_tensorfile, write_tensorfile, Entry, TensorFile};
use crate::Error;

pub const CHECKPOINT_FILE: &str = "checkpoint.tmtn";
pub const LOG_FILE: &str = "log.jsonl";
const CONFIG_ENTRY: &str = "config";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_dsc: Option<f64>,
    pub val_iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
}

/// Parameters plus the run configuration as UTF-8 `key = value` text.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &Model) -> Result<(), Error> {
    let mut f = TensorFile::new();
    let text = cfg.to_text().into_bytes();
    f.insert(CONFIG_ENTRY, Entry::u8(&[text.len()], text));
    for (name, t) in model.params.iter() {
        f.insert_tensor(name, t);
    }
    write_tensorfile(path, &f)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model), Error> {
    let f = read_tensorfile(path)?;
    let text = String::from_utf8(f.bytes(CONFIG_ENTRY)?.to_vec())
        .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
    let cfg = RunConfig::parse(&text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::build(cfg.net.clone(), &mut rng)?;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = f.tensor(&name)?;
        let id = model.params.find(&name).expect("name from the same store");
        if t.shape() != model.params.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, model expects {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        *model.params.get_mut(id) = t;
    }
    Ok((cfg, model))
}

fn check_samples(cfg: &RunConfig, samples: &[SegSample]) -> Result<(), Error> {
    for s in samples {
        if s.size() != cfg.net.input_size.as_slice() || s.image.shape()[0] != cfg.net.in_channels {
            return Err(Error::Data(format!(
                "sample {} has image shape {:?}, the network expects ({}, {:?})",
                s.id,
                s.image.shape(),
                cfg.net.in_channels,
                cfg.net.input_size
            )));
        }
    }
    Ok(())
}

/// Trains on `train`, validating on `val` after every epoch. With `out`
/// set, the checkpoint is rewritten and one log line appended per epoch.
pub fn train(
    cfg: &RunConfig,
    train: &[SegSample],
    val: &[SegSample],
    out: Option<&Path>,
) -> Result<TrainOutcome, Error> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    check_samples(cfg, train)?;
    check_samples(cfg, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::build(cfg.net.clone(), &mut rng)?;
    let mut opt = AdamW::new(cfg.optim.clone(), model.params.values());
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    sched.min_lr = cfg.min_lr;

    let paths = out.map(|dir| (dir.join(CHECKPOINT_FILE), dir.join(LOG_FILE)));
    if let (Some(dir), Some((ckpt, log))) = (out, &paths) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        fs::File::create(log).map_err(|e| io_err(log, e))?;
        save_checkpoint(ckpt, cfg, &model)?;
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.cfg.lr;
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&SegSample> = idx.iter().map(|i| &train[*i]).collect();
            let (x, y) = stack(&refs)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(x);
            let o = model.forward(&mut g, &p, xv)?;
            let l = segmentation_loss(&mut g, o.logits, &y, cfg.net.dice_weight, cfg.net.ce_weight)?;
            let value = g.value(l.total).item();
            if !value.is_finite() {
                return Err(Error::Data(format!("loss diverged at epoch {epoch}")));
            }
            sum += value * refs.len() as f64;
            g.backward(l.total)?;
            let grads = p.grads(&g);
            opt.step(model.params.values_mut(), &grads)?;
        }
        let train_loss = sum / train.len() as f64;
        let mut rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss: None,
            val_dsc: None,
            val_iou: None,
        };
        let monitored = if val.is_empty() {
            train_loss
        } else {
            let report = evaluate_with_loss(&model, val, cfg.batch_size)?;
            let v = report.loss.expect("loss requested");
            rec.val_loss = Some(v);
            rec.val_dsc = Some(report.mean.dsc);
            rec.val_iou = Some(report.mean.iou);
            v
        };
        opt.cfg.lr = sched.observe(monitored, opt.cfg.lr);
        if let Some((ckpt, logp)) = &paths {
            save_checkpoint(ckpt, cfg, &model)?;
            append_json(logp, &rec)?;
        }
        log.push(rec);
    }
    Ok(TrainOutcome { model, log })
}

pub(crate) fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut line = serde_json::to_vec(value).expect("records serialize");
    line.push(b'\n');
    f.write_all(&line).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// One row of a threshold sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub s_low: f64,
    pub s_high: f64,
    pub final_train_loss: f64,
    pub test_dsc: f64,
    pub test_iou: f64,
    pub out_dir: PathBuf,
}

/// Trains once per `(s_low, s_high)` pair, each into its own subdirectory
/// of `out`, and scores every run on `test`.
pub fn threshold_sweep(
    cfg: &RunConfig,
    train_set: &[SegSample],
    test: &[SegSample],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, Error> {
    let mut rows = Vec::with_capacity(cfg.sweep_thresholds.len());
    for &(s_low, s_high) in &cfg.sweep_thresholds {
        let mut run = cfg.clone();
        run.net.s_low = s_low;
        run.net.s_high = s_high;
        run.sweep_thresholds.clear();
        let dir = out.map(|d| d.join(format!("slow{s_low}_shigh{s_high}")));
        if let Some(d) = &dir {
            run.out_dir = d.clone();
        }
        let outcome = train(&run, train_set, test, dir.as_deref())?;
        let report = evaluate(&outcome.model, test, cfg.batch_size)?;
        rows.push(SweepRow {
            s_low,
            s_high,
            final_train_loss: outcome.log.last().map_or(f64::NAN, |r| r.train_loss),
            test_dsc: report.mean.dsc,
            test_iou: report.mean.iou,
            out_dir: run.out_dir,
        });
    }
    Ok(rows)
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("s_low  s_high  train_loss  test_dsc  test_iou\n");
    for r in rows {
        s.push_str(&format!(
            "{:<5}  {:<6}  {:>10.6}  {:>8.4}  {:>8.4}\n",
            r.s_low, r.s_high, r.final_train_loss, r.test_dsc, r.test_iou
        ));
    }
    s
}

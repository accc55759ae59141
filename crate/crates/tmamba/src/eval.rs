//! Per-sample and aggregate segmentation metrics, plus the mean gate
//! proportions of every scale.

use serde::{Deserialize, Serialize};
use tmamba_core::data::{stack, SegSample};
use tmamba_core::metrics::{evaluate_masks, BinaryMask, DEFAULT_SO_TOLERANCE};
use tmamba_core::net::{argmax_labels, segmentation_loss, Model};
use tmamba_core::numcore::{Graph, Tensor};

use crate::Error;

/// Anything that maps a batch of samples to logits `(B, K, *S)` and
/// optional per-scale gate proportions `(B, k)`.
pub trait Predictor {
    fn predict(&self, batch: &[&SegSample]) -> Result<(Tensor, Vec<Option<Tensor>>), Error>;
}

impl Predictor for Model {
    fn predict(&self, batch: &[&SegSample]) -> Result<(Tensor, Vec<Option<Tensor>>), Error> {
        let (x, _) = stack(batch)?;
        Ok(self.predict_with_gates(&x)?)
    }
}

/// Emits the ground-truth masks as logits: the perfect predictor.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskOracle;

impl Predictor for MaskOracle {
    fn predict(&self, batch: &[&SegSample]) -> Result<(Tensor, Vec<Option<Tensor>>), Error> {
        let (_, labels) = stack(batch)?;
        let size = batch[0].size();
        let spatial: usize = size.iter().product();
        let mut shape = vec![batch.len(), 2];
        shape.extend(size);
        let logits = Tensor::from_fn(&shape, |i| {
            let (b, c, s) = (i / (2 * spatial), (i / spatial) % 2, i % spatial);
            if labels[b * spatial + s] == c {
                1.0
            } else {
                -1.0
            }
        });
        Ok((logits, Vec::new()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
    pub miou: f64,
    pub acc: f64,
    /// Surface metrics are undefined when either mask is empty.
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub so: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub samples: usize,
    pub dsc: f64,
    pub iou: f64,
    pub miou: f64,
    pub acc: f64,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub so: Option<f64>,
    /// Samples whose surface metrics were undefined.
    pub surface_undefined: usize,
    /// Mean stream proportions per scale, `None` where a scale has no gate.
    pub gates: Vec<Option<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean: MeanMetrics,
    /// Mean loss, present when computed by [`evaluate_with_loss`].
    pub loss: Option<f64>,
}

impl EvalReport {
    /// One JSON line per sample followed by a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for m in &self.per_sample {
            s.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            s.push('\n');
        }
        s.push_str(&serde_json::json!({ "summary": &self.mean }).to_string());
        s.push('\n');
        s
    }
}

pub fn evaluate<P: Predictor>(predictor: &P, samples: &[SegSample], batch: usize) -> Result<EvalReport, Error> {
    run(predictor, samples, batch, None)
}

/// [`evaluate`] for a model, also averaging its training loss.
pub fn evaluate_with_loss(model: &Model, samples: &[SegSample], batch: usize) -> Result<EvalReport, Error> {
    run(model, samples, batch, Some((model.cfg.dice_weight, model.cfg.ce_weight)))
}

fn run<P: Predictor>(
    predictor: &P,
    samples: &[SegSample],
    batch: usize,
    loss_weights: Option<(f64, f64)>,
) -> Result<EvalReport, Error> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut gate_sums: Vec<Option<Vec<f64>>> = Vec::new();
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        let (logits, gates) = predictor.predict(&refs)?;
        let mut want = vec![chunk.len(), logits.shape().get(1).copied().unwrap_or(0)];
        want.extend(chunk[0].size());
        if logits.shape() != want.as_slice() || want[1] < 2 {
            return Err(Error::Data(format!(
                "prediction shape {:?} does not match the samples {:?}",
                logits.shape(),
                want
            )));
        }
        if let Some((dw, cw)) = loss_weights {
            let (_, labels) = stack(&refs)?;
            let mut g = Graph::new();
            let lv = g.constant(logits.clone());
            let l = segmentation_loss(&mut g, lv, &labels, dw, cw)?;
            loss_sum += g.value(l.total).item() * chunk.len() as f64;
        }
        let labels = argmax_labels(&logits);
        let spatial: usize = chunk[0].size().iter().product();
        for (b, s) in chunk.iter().enumerate() {
            let pred = BinaryMask::from_labels(s.size(), &labels[b * spatial..(b + 1) * spatial], 1, &s.spacing)?;
            let gt = BinaryMask::from_labels(s.size(), &s.labels(), 1, &s.spacing)?;
            let r = evaluate_masks(&pred, &gt, DEFAULT_SO_TOLERANCE)?;
            per_sample.push(SampleMetrics {
                id: s.id.clone(),
                dsc: r.overlap.dsc,
                iou: r.overlap.iou,
                miou: r.overlap.miou,
                acc: r.overlap.acc,
                hd: r.surface.map(|d| d.hd),
                assd: r.surface.map(|d| d.assd),
                so: r.surface.map(|d| d.so),
            });
        }
        if gate_sums.is_empty() {
            gate_sums = vec![None; gates.len()];
        }
        for (sum, gate) in gate_sums.iter_mut().zip(&gates) {
            if let Some(t) = gate {
                let k = t.shape()[1];
                let acc = sum.get_or_insert_with(|| vec![0.0; k]);
                for (i, v) in t.data().iter().enumerate() {
                    acc[i % k] += v;
                }
            }
        }
    }
    let n = per_sample.len() as f64;
    let mean_of = |f: &dyn Fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let defined: Vec<&SampleMetrics> = per_sample.iter().filter(|m| m.hd.is_some()).collect();
    let surface_mean = |f: &dyn Fn(&SampleMetrics) -> Option<f64>| {
        (!defined.is_empty()).then(|| defined.iter().filter_map(|m| f(m)).sum::<f64>() / defined.len() as f64)
    };
    let mean = MeanMetrics {
        samples: per_sample.len(),
        dsc: mean_of(&|m| m.dsc),
        iou: mean_of(&|m| m.iou),
        miou: mean_of(&|m| m.miou),
        acc: mean_of(&|m| m.acc),
        hd: surface_mean(&|m| m.hd),
        assd: surface_mean(&|m| m.assd),
        so: surface_mean(&|m| m.so),
        surface_undefined: per_sample.len() - defined.len(),
        gates: gate_sums
            .into_iter()
            .map(|s| s.map(|v| v.into_iter().map(|x| x / n).collect()))
            .collect(),
    };
    Ok(EvalReport {
        per_sample,
        mean,
        loss: loss_weights.map(|_| loss_sum / n),
    })
}

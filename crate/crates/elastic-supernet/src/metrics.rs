//! Model evaluation: top-1 accuracy, mean cross-entropy, and the exact
//! integer compute cost of the evaluated configuration, plus the
//! per-sample predictions so accuracy can be recounted independently.

use elastic_core::backbone::cost;
use elastic_core::backbone::forward::{forward_plain, NoProbe};
use elastic_core::backbone::{BackboneSpec, ElasticParams, SubmodelConfig};
use elastic_core::data::TokenDataset;
use elastic_core::scalar::Scalar;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_ce: f64,
    /// Exact integer MACs of the evaluated configuration (model cost; the
    /// input adapter and classifier head are excluded by the cost model).
    pub macs: u64,
    /// Argmax class per sample, ties to the lowest class index.
    pub predictions: Vec<usize>,
}

pub fn evaluate<T: Scalar>(
    params: &ElasticParams<T>,
    spec: &BackboneSpec,
    cfg: &SubmodelConfig,
    data: &TokenDataset<T>,
    batch_size: usize,
) -> Result<EvalReport> {
    data.validate(spec)?;
    let n = data.len();
    let classes = spec.classes;
    let mut predictions = Vec::with_capacity(n);
    let mut correct = 0usize;
    let mut ce_sum = 0.0f64;
    let mut at = 0usize;
    let step = batch_size.max(1);
    while at < n {
        let take = step.min(n - at);
        let (x, labels) = data.range(at, take);
        let logits = forward_plain(params, spec, cfg, x, take, &mut NoProbe)?;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let mut arg = 0usize;
            for (c, v) in row.iter().enumerate() {
                if v.as_f64() > row[arg].as_f64() {
                    arg = c;
                }
            }
            predictions.push(arg);
            if arg == label {
                correct += 1;
            }
            // Numerically-stable log-softmax in f64 regardless of the
            // working precision.
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            ce_sum += z.ln() - (row[label].as_f64() - m);
        }
        at += take;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n.max(1) as f64,
        mean_ce: ce_sum / n.max(1) as f64,
        macs: cost::macs(spec, cfg),
        predictions,
    })
}

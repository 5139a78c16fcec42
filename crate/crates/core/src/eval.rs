//! Dataset-level scoring of a model or of saved predictions.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{composite_non_text, MetricReport};
use crate::model::{forward, Model};
use crate::synth::Triplet;
use crate::tensor::Tensor;

/// Source of predictions.
pub enum Predictor<'a> {
    /// Run the network; the final prediction is quantized to 8 bits, as if
    /// saved to PNG.
    Model { model: &'a Model<f32>, iterations: usize },
    /// Read `<dir>/<id>.png` for each triplet.
    Dir(&'a Path),
}

/// How predictions are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Prediction compared with the target as is.
    Raw,
    /// Pixels outside the mask are replaced by the input before scoring.
    Composited,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Protocol::Raw),
            "composited" => Ok(Protocol::Composited),
            other => Err(Error::InvalidArgument(format!(
                "unknown protocol {other:?} (expected raw or composited)"
            ))),
        }
    }
}

/// Final 8-bit prediction for one triplet.
pub fn predict(predictor: &Predictor<'_>, triplet: &Triplet) -> Result<Tensor<f32>> {
    match predictor {
        Predictor::Model { model, iterations } => {
            let out = forward(model, &triplet.image, &triplet.mask, *iterations)?;
            let last = out.predictions.last().expect("at least one prediction");
            Ok(io::round_trip_8bit(last))
        }
        Predictor::Dir(dir) => {
            let path = dir.join(format!("{}.png", triplet.id));
            let pred = io::load_image_tensor(&path)?;
            if pred.shape() != triplet.gt.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: prediction {:?} vs target {:?}",
                    path.display(),
                    pred.shape(),
                    triplet.gt.shape()
                )));
            }
            Ok(pred)
        }
    }
}

/// Per-image reports, in dataset order.
pub fn evaluate_each(predictor: &Predictor<'_>, dataset: &[Triplet], protocol: Protocol) -> Result<Vec<(String, MetricReport)>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    dataset
        .iter()
        .map(|t| {
            t.validate()?;
            let mut pred = predict(predictor, t)?;
            if protocol == Protocol::Composited {
                pred = composite_non_text(&pred, &t.image, &t.mask)?;
            }
            Ok((t.id.clone(), MetricReport::for_pair(&pred, &t.gt)?))
        })
        .collect()
}

/// Mean of the per-image reports.
pub fn evaluate_dataset(predictor: &Predictor<'_>, dataset: &[Triplet], protocol: Protocol) -> Result<MetricReport> {
    let each = evaluate_each(predictor, dataset, protocol)?;
    let reports: Vec<MetricReport> = each.into_iter().map(|(_, r)| r).collect();
    MetricReport::mean(&reports)
}

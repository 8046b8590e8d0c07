//! Evaluation, single-image prediction and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normalize, resize_bilinear, Dataset};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::ops::PROB_FLOOR;
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted_class: String,
    /// Largest softmax entry.
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub records: Vec<PredictionRecord>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn record(id: &str, probs: &[f32], class_names: &[String], label: Option<usize>) -> PredictionRecord {
    let class = argmax(probs);
    PredictionRecord {
        id: id.to_string(),
        predicted_class: class_names[class].clone(),
        confidence: probs[class] as f64,
        correct: label.map(|l| l == class),
    }
}

/// Eval-mode pass over every item, without augmentation.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Evaluation> {
    let classes = ds.num_classes();
    if net.num_classes() != Some(classes) {
        return Err(Error::ClassCountMismatch {
            network: net.num_classes().unwrap_or(0),
            dataset: classes,
        });
    }
    if ds.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty dataset".into()));
    }
    let mut confusion = vec![vec![0; classes]; classes];
    let mut records = Vec::with_capacity(ds.len());
    let mut loss = 0.0;
    for chunk in ds.items.chunks(EVAL_BATCH) {
        let images = chunk.iter().map(|item| normalize(&item.image)).collect::<Result<Vec<_>>>()?;
        let probs = net.forward_eval(&Tensor::stack(&images)?)?;
        for (item, p) in chunk.iter().zip(probs.data().chunks(classes)) {
            let rec = record(&item.id, p, &ds.class_names, Some(item.label));
            confusion[item.label][argmax(p)] += 1;
            loss -= (p[item.label] as f64).max(PROB_FLOOR).ln();
            records.push(rec);
        }
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss / ds.len() as f64,
        confusion,
        records,
    })
}

/// Resizes `image` (`H x W x 3`, values 0-255) to the network input,
/// normalises and classifies it.
pub fn predict(net: &Network, id: &str, image: &Tensor<f32>, class_names: &[String]) -> Result<PredictionRecord> {
    if net.num_classes() != Some(class_names.len()) {
        return Err(Error::ClassCountMismatch {
            network: net.num_classes().unwrap_or(0),
            dataset: class_names.len(),
        });
    }
    let [h, w, c] = net.input_shape();
    if image.rank() != 3 || image.shape()[2] != c {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} cannot feed a network with {c} channels",
            image.shape()
        )));
    }
    let resized = resize_bilinear(image, h, w);
    let batch = normalize(&resized)?.reshape(vec![1, h, w, c])?;
    let probs = net.forward_eval(&batch)?;
    Ok(record(id, probs.data(), class_names, None))
}

pub fn write_json_report(path: impl AsRef<Path>, report: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report).expect("report types serialise");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `id,predicted_class,confidence,correct` rows; `correct` is empty when
/// the label is unknown.
pub fn write_csv_report(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "id,predicted_class,confidence,correct").expect("vec write");
    for r in records {
        let correct = r.correct.map(|c| c.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.id, r.predicted_class, r.confidence, correct).expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

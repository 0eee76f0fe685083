//! Top-1 evaluation on centre crops.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::center_crop;
use crate::attrnet::{argmax, combine_scores_with, AttrNet};
use crate::dataset::{load_labeled, LabeledImage, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub class: usize,
    pub predicted: usize,
    /// Attribute logits, `kC` class-major.
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub predictions: Vec<Prediction>,
}

pub fn evaluate_model(net: &AttrNet, samples: &[LabeledImage], eval_crop: f64) -> Result<EvalReport> {
    let cfg = net.config();
    let c = cfg.num_classes;
    let predictions: Vec<Prediction> = samples
        .par_iter()
        .map(|s| {
            if s.class >= c {
                return Err(Error::OutOfRange { what: "class", value: s.class, limit: c });
            }
            let img = center_crop(&s.image, cfg.input_side, eval_crop);
            let (z, _) = net.forward_one(&img)?;
            Ok(Prediction {
                id: s.id.clone(),
                class: s.class,
                predicted: argmax(&combine_scores_with(&z, cfg.score_mode)),
                logits: z.z,
            })
        })
        .collect::<Result<_>>()?;
    let mut per_class: Vec<ClassReport> = (0..c)
        .map(|class| ClassReport { class, count: 0, correct: 0, accuracy: 0.0 })
        .collect();
    for p in &predictions {
        per_class[p.class].count += 1;
        per_class[p.class].correct += usize::from(p.predicted == p.class);
    }
    for r in &mut per_class {
        r.accuracy = if r.count == 0 { 0.0 } else { r.correct as f64 / r.count as f64 };
    }
    let correct: usize = per_class.iter().map(|r| r.correct).sum();
    Ok(EvalReport {
        accuracy: if predictions.is_empty() { 0.0 } else { correct as f64 / predictions.len() as f64 },
        per_class,
        predictions,
    })
}

/// Loads a checkpoint and scores `split` of `manifest`. `expected_k`, when
/// given, must match the checkpoint's attributes per class.
pub fn evaluate(checkpoint: &Path, manifest: &Path, split: Split, eval_crop: f64, expected_k: Option<usize>) -> Result<EvalReport> {
    let net = AttrNet::load(checkpoint)?;
    let cfg = net.config();
    if let Some(k) = expected_k {
        if k != cfg.attributes_per_class {
            return Err(Error::shape("evaluate", "attributes per class", k, cfg.attributes_per_class));
        }
    }
    let samples = load_labeled(manifest, split)?;
    if let Some(bad) = samples.iter().find(|s| s.class >= cfg.num_classes) {
        return Err(Error::shape(
            "evaluate",
            "number of classes",
            cfg.num_classes,
            format!("class {} in {}", bad.class, manifest.display()),
        ));
    }
    evaluate_model(&net, &samples, eval_crop)
}

impl EvalReport {
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,count,correct,accuracy\n");
        for r in &self.per_class {
            out.push_str(&format!("{},{},{},{:.6}\n", r.class, r.count, r.correct, r.accuracy));
        }
        out
    }

    pub fn logits_csv(&self) -> String {
        let mut out = String::from("id,class,predicted,logits\n");
        for p in &self.predictions {
            let z: Vec<String> = p.logits.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!("{},{},{},{}\n", p.id, p.class, p.predicted, z.join(" ")));
        }
        out
    }

    /// Writes `accuracy.json`, `per_class.csv` and `logits.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("accuracy.json", serde_json::to_string_pretty(&serde_json::json!({ "accuracy": self.accuracy, "count": self.predictions.len() }))?),
            ("per_class.csv", self.per_class_csv()),
            ("logits.csv", self.logits_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

//! Accuracy and confusion counts, plus the rotated-copy comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_idx, train_val_split, Dataset};
use crate::harness::Result;
use crate::network::Model;
use crate::scalar::Scalar;

/// Index of the first maximal logit.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<Vec<usize>> {
    (0..data.len())
        .map(|i| {
            let logits = model.forward(&model.image(data.image(i))?, None)?;
            Ok(argmax(logits.data()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(classes: usize, labels: &[u8], predictions: &[usize]) -> Self {
        let mut counts = vec![vec![0; classes]; classes];
        for (&l, &p) in labels.iter().zip(predictions) {
            counts[l as usize][p] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub confusion: Confusion,
    pub rotated_confusion: Confusion,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    pub fn rotated_accuracy(&self) -> f64 {
        self.rotated_confusion.accuracy()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split            {}", self.split);
        let _ = writeln!(s, "samples          {}", self.samples);
        let _ = writeln!(s, "accuracy         {:.4}", self.accuracy());
        let _ = writeln!(s, "rotated90 acc    {:.4}", self.rotated_accuracy());
        let _ = writeln!(
            s,
            "rotation match   {}",
            if self.confusion == self.rotated_confusion { "exact" } else { "differs" }
        );
        let _ = writeln!(s, "confusion (rows: true label, columns: prediction)");
        let classes = self.confusion.counts.len();
        let _ = write!(s, "     ");
        for c in 0..classes {
            let _ = write!(s, "{c:>5}");
        }
        let _ = writeln!(s);
        for (t, row) in self.confusion.counts.iter().enumerate() {
            let _ = write!(s, "{t:>5}");
            for v in row {
                let _ = write!(s, "{v:>5}");
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Evaluates `model` on `data` and on its quarter-turn rotation.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, split: &str) -> Result<EvalReport> {
    let classes = model.config.classes;
    let pred = predict(model, data)?;
    let rotated = data.rotated90()?;
    let pred_rot = predict(model, &rotated)?;
    Ok(EvalReport {
        split: split.to_string(),
        samples: data.len(),
        confusion: Confusion::new(classes, &data.labels, &pred),
        rotated_confusion: Confusion::new(classes, &rotated.labels, &pred_rot),
    })
}

/// Rebuilds the configured split and evaluates a checkpoint in 64-bit
/// arithmetic. `split` is `train` or `val`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: Option<&Path>, split: &str) -> Result<EvalReport> {
    let t = &cfg.train;
    let base = load_idx(Path::new(&t.images), Path::new(&t.labels))?;
    let (train, val) = train_val_split(&base, t.seed, t.train_count, t.val_count, t.angle_mode)?;
    let data = match split {
        "train" => train,
        "val" => val,
        other => return Err(super::HarnessError::Usage(format!("unknown split '{other}' (expected train|val)"))),
    };
    let mut model = Model::<f64>::build(&cfg.model, t.seed)?;
    if let Some(p) = checkpoint_path {
        checkpoint::load(&mut model, p)?;
    }
    evaluate(&model, &data, split)
}

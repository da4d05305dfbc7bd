//! Classification and localization metrics.

use std::fmt::Write as _;

use ipagnn_core::interp::{class_name, NUM_CLASSES};

use crate::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub examples: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub weighted_error_f1: f64,
    /// Mean per-class recall over classes present in the split.
    pub balanced_accuracy: f64,
    /// Only for localizing models with at least one located error example.
    pub localization_accuracy: Option<f64>,
    pub per_class: Vec<ClassStats>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn per_class(pairs: &[(usize, usize)]) -> Vec<ClassStats> {
    let mut tp = [0usize; NUM_CLASSES];
    let mut pred = [0usize; NUM_CLASSES];
    let mut sup = [0usize; NUM_CLASSES];
    for &(t, p) in pairs {
        sup[t] += 1;
        pred[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..NUM_CLASSES)
        .map(|k| {
            let precision = ratio(tp[k], pred[k]);
            let recall = ratio(tp[k], sup[k]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassStats {
                precision,
                recall,
                f1,
                support: sup[k],
            }
        })
        .collect()
}

/// Support-weighted mean of per-class F1 over `(target, predicted)` pairs.
pub fn weighted_f1(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    per_class(pairs).iter().map(|c| c.support as f64 / n * c.f1).sum()
}

/// One evaluated example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub target: usize,
    pub predicted: usize,
    pub target_line: Option<usize>,
    pub predicted_line: Option<usize>,
}

impl MetricsReport {
    /// `localizes` says whether the model produces line predictions at all.
    pub fn compute(outcomes: &[Outcome], localizes: bool) -> MetricsReport {
        let pairs: Vec<(usize, usize)> = outcomes.iter().map(|o| (o.target, o.predicted)).collect();
        let mut confusion = vec![vec![0; NUM_CLASSES]; NUM_CLASSES];
        for &(t, p) in &pairs {
            confusion[t][p] += 1;
        }
        let n = pairs.len();
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        let stats = per_class(&pairs);
        let present: Vec<&ClassStats> = stats.iter().filter(|c| c.support > 0).collect();
        let balanced_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|c| c.recall).sum::<f64>() / present.len() as f64
        };
        let error_pairs: Vec<(usize, usize)> = pairs.iter().copied().filter(|(t, _)| *t != 0).collect();
        let located: Vec<&Outcome> = outcomes.iter().filter(|o| o.target != 0 && o.target_line.is_some()).collect();
        let localization_accuracy = (localizes && !located.is_empty()).then(|| {
            located.iter().filter(|o| o.predicted_line == o.target_line).count() as f64 / located.len() as f64
        });
        MetricsReport {
            examples: n,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            weighted_f1: weighted_f1(&pairs),
            weighted_error_f1: weighted_f1(&error_pairs),
            balanced_accuracy,
            localization_accuracy,
            per_class: stats,
            confusion,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples                {}", self.examples);
        let _ = writeln!(s, "accuracy                {:.4}", self.accuracy);
        let _ = writeln!(s, "weighted F1             {:.4}", self.weighted_f1);
        let _ = writeln!(s, "weighted error F1       {:.4}", self.weighted_error_f1);
        let _ = writeln!(s, "balanced accuracy       {:.4}", self.balanced_accuracy);
        match self.localization_accuracy {
            Some(l) => {
                let _ = writeln!(s, "localization accuracy   {l:.4}");
            }
            None => {
                let _ = writeln!(s, "localization accuracy   -");
            }
        }
        let _ = writeln!(s, "\n{:<18}{:>10}{:>10}{:>10}{:>9}", "class", "precision", "recall", "f1", "support");
        for (k, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<18}{:>10.4}{:>10.4}{:>10.4}{:>9}",
                class_name(k),
                c.precision,
                c.recall,
                c.f1,
                c.support
            );
        }
        let _ = writeln!(s, "\nconfusion (rows = target, columns = predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }

    /// `section,key,value` rows; floats are written in round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,key,value\n");
        let _ = writeln!(s, "summary,examples,{}", self.examples);
        let _ = writeln!(s, "summary,accuracy,{}", self.accuracy);
        let _ = writeln!(s, "summary,weighted_f1,{}", self.weighted_f1);
        let _ = writeln!(s, "summary,weighted_error_f1,{}", self.weighted_error_f1);
        let _ = writeln!(s, "summary,balanced_accuracy,{}", self.balanced_accuracy);
        if let Some(l) = self.localization_accuracy {
            let _ = writeln!(s, "summary,localization_accuracy,{l}");
        }
        for (k, c) in self.per_class.iter().enumerate() {
            let name = class_name(k);
            let _ = writeln!(s, "precision,{name},{}", c.precision);
            let _ = writeln!(s, "recall,{name},{}", c.recall);
            let _ = writeln!(s, "f1,{name},{}", c.f1);
            let _ = writeln!(s, "support,{name},{}", c.support);
        }
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                let _ = writeln!(s, "confusion,{}>{},{v}", class_name(t), class_name(p));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<MetricsReport> {
        let bad = |l: &str| ModelError::InvalidArgument(format!("bad metrics row `{l}`"));
        let class_of = |name: &str| (0..NUM_CLASSES).find(|k| class_name(*k) == name);
        let mut r = MetricsReport {
            examples: 0,
            accuracy: 0.0,
            weighted_f1: 0.0,
            weighted_error_f1: 0.0,
            balanced_accuracy: 0.0,
            localization_accuracy: None,
            per_class: vec![ClassStats::default(); NUM_CLASSES],
            confusion: vec![vec![0; NUM_CLASSES]; NUM_CLASSES],
        };
        for line in text.lines().skip(1) {
            let mut it = line.splitn(3, ',');
            let (Some(sec), Some(key), Some(val)) = (it.next(), it.next(), it.next()) else {
                return Err(bad(line));
            };
            let f = || val.parse::<f64>().map_err(|_| bad(line));
            let u = || val.parse::<usize>().map_err(|_| bad(line));
            match sec {
                "summary" => match key {
                    "examples" => r.examples = u()?,
                    "accuracy" => r.accuracy = f()?,
                    "weighted_f1" => r.weighted_f1 = f()?,
                    "weighted_error_f1" => r.weighted_error_f1 = f()?,
                    "balanced_accuracy" => r.balanced_accuracy = f()?,
                    "localization_accuracy" => r.localization_accuracy = Some(f()?),
                    _ => return Err(bad(line)),
                },
                "confusion" => {
                    let (a, b) = key.split_once('>').ok_or_else(|| bad(line))?;
                    let (a, b) = (class_of(a).ok_or_else(|| bad(line))?, class_of(b).ok_or_else(|| bad(line))?);
                    r.confusion[a][b] = u()?;
                }
                _ => {
                    let k = class_of(key).ok_or_else(|| bad(line))?;
                    let c = &mut r.per_class[k];
                    match sec {
                        "precision" => c.precision = f()?,
                        "recall" => c.recall = f()?,
                        "f1" => c.f1 = f()?,
                        "support" => c.support = u()?,
                        _ => return Err(bad(line)),
                    }
                }
            }
        }
        Ok(r)
    }
}

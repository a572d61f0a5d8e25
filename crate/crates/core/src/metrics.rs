//! Confusion counts and the accuracy figures reported for a change map.

use std::fmt;

use crate::diff::check_same_dims;
use crate::error::{Error, Result};
use crate::raster::ChangeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Count agreement of a predicted map with the truth, changed being positive.
pub fn confusion(pred: &ChangeMap, truth: &ChangeMap) -> Result<Confusion> {
    check_same_dims(pred.dims(), truth.dims(), "change map")?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Overall error, `fp + fn`.
    pub oe: u64,
    /// Percentage of correct classification, unrounded.
    pub pcc: f64,
    /// Cohen's kappa scaled to percent, unrounded.
    pub kc: f64,
}

/// Round half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn report(c: Confusion) -> Result<EvalReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Numeric("cannot score an empty map".into()));
    }
    let n = total as f64;
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let po = (tp + tn) / n;
    let pe = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
    let kc = if pe == 1.0 {
        if po == 1.0 {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * (po - pe) / (1.0 - pe)
    };
    Ok(EvalReport {
        tp: c.tp,
        tn: c.tn,
        fp: c.fp,
        fn_: c.fn_,
        oe: c.fp + c.fn_,
        pcc: 100.0 * po,
        kc,
    })
}

pub fn evaluate(pred: &ChangeMap, truth: &ChangeMap) -> Result<EvalReport> {
    report(confusion(pred, truth)?)
}

impl EvalReport {
    /// Field names of [`EvalReport::record`], in order.
    pub const RECORD_FIELDS: [&'static str; 7] = ["tp", "tn", "fp", "fn", "oe", "pcc", "kc"];

    /// One `key: value` line per field.
    pub fn key_values(&self) -> String {
        self.values()
            .iter()
            .zip(Self::RECORD_FIELDS)
            .map(|(v, k)| format!("{k}: {v}\n"))
            .collect()
    }

    /// Tab-separated values in [`EvalReport::RECORD_FIELDS`] order.
    pub fn record(&self) -> String {
        self.values().join("\t")
    }

    fn values(&self) -> [String; 7] {
        [
            self.tp.to_string(),
            self.tn.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            self.oe.to_string(),
            format!("{:.2}", round2(self.pcc)),
            format!("{:.2}", round2(self.kc)),
        ]
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key_values())
    }
}

//! Score tables (CSV) and calibration records (JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttackError, CalibratedAttack, Method, MiaMetrics, Orientation};
use crate::corpus::Membership;

/// JSON has no infinities, so sentinel thresholds are written as the strings
/// `"inf"` / `"-inf"`.
pub(crate) mod tau_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub example_id: String,
    pub method: Method,
    pub raw: f64,
    pub orientation: Orientation,
    pub label: Membership,
}

fn table_err(e: impl std::fmt::Display) -> AttackError {
    AttackError::Table(e.to_string())
}

pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<(), AttackError> {
    let mut w = csv::Writer::from_path(path).map_err(table_err)?;
    for r in rows {
        w.serialize(r).map_err(table_err)?;
    }
    w.flush().map_err(table_err)
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>, AttackError> {
    let mut r = csv::Reader::from_path(path).map_err(table_err)?;
    r.deserialize().map(|row| row.map_err(table_err)).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_docs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub method: Method,
    pub hyperparams: Hyperparams,
    #[serde(with = "tau_serde")]
    pub tau: f64,
    pub orientation: Orientation,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub note: String,
}

impl CalibrationRecord {
    pub fn new(attack: &CalibratedAttack, metrics: &MiaMetrics) -> Self {
        Self {
            method: attack.config.method,
            hyperparams: Hyperparams {
                k: attack.config.k,
                prefix_docs: attack.config.prefix_docs,
            },
            tau: attack.tau,
            orientation: attack.orientation,
            accuracy: metrics.accuracy,
            tpr: metrics.tpr,
            tnr: metrics.tnr,
            note: attack.calibration_note.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes") + "\n"
    }
}

/// Cross-validated hyperparameters of one model, one row of the tuning table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedHyperparams {
    pub model: String,
    pub mink_k: f64,
    pub minkpp_k: f64,
    pub recall_prefix: usize,
}

impl TunedHyperparams {
    /// `(model, mink-k, minkpp-k, recall-prefix)`.
    pub fn row(&self) -> String {
        format!(
            "({}, {:.2}, {:.2}, {})",
            self.model, self.mink_k, self.minkpp_k, self.recall_prefix
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{calibrate_threshold, AttackConfig};

    #[test]
    fn tuning_row_format() {
        let t = TunedHyperparams {
            model: "Pythia".into(),
            mink_k: 0.1,
            minkpp_k: 0.5,
            recall_prefix: 7,
        };
        assert_eq!(t.row(), "(Pythia, 0.10, 0.50, 7)");
    }

    #[test]
    fn infinite_threshold_roundtrips_through_json() {
        let (c, m) = calibrate_threshold(AttackConfig::new(Method::Loss), &[1.0, 1.0], &[true, false]).unwrap();
        assert!(c.tau.is_infinite());
        let rec = CalibrationRecord::new(&c, &m);
        let back: CalibrationRecord = serde_json::from_str(&rec.to_json()).unwrap();
        assert_eq!(back, rec);
        let back: CalibratedAttack = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn score_table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let rows = vec![
            ScoreRow {
                example_id: "m0001".into(),
                method: Method::Minkpp,
                raw: -0.1234567890123,
                orientation: Orientation::HigherIsMember,
                label: Membership::Member,
            },
            ScoreRow {
                example_id: "n0002".into(),
                method: Method::Minkpp,
                raw: 3.5e-300,
                orientation: Orientation::LowerIsMember,
                label: Membership::Nonmember,
            },
        ];
        write_score_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("example_id,method,raw,orientation,label\n"));
        assert_eq!(read_score_table(&path).unwrap(), rows);
    }
}

//! Radial error and detection-rate evaluation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;

pub const SDR_THRESHOLDS_MM: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Mre {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `(landmark id, error mm)` for landmarks present in both sets.
    pub errors: Vec<(usize, f64)>,
}

fn check_pair(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!("{} predicted landmarks vs {} annotated", pred.len(), gt.len())));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Data(format!("spacing mismatch: {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    for (a, b) in pred.landmarks.iter().zip(&gt.landmarks) {
        if a.id != b.id {
            return Err(Error::Data(format!("landmark id mismatch: {} vs {}", a.id, b.id)));
        }
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn mre(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<Mre> {
    check_pair(pred, gt)?;
    let errors: Vec<(usize, f64)> = pred
        .landmarks
        .iter()
        .zip(&gt.landmarks)
        .filter(|(p, g)| p.present && g.present)
        .map(|(p, g)| (g.id, gt.distance_mm(p.pos, g.pos)))
        .collect();
    if errors.is_empty() {
        return Err(Error::Data("no landmark is present in both prediction and annotation".into()));
    }
    let (mean, std) = mean_std(&errors.iter().map(|e| e.1).collect::<Vec<_>>());
    Ok(Mre { mean, std, errors })
}

/// Percentage of errors `<=` each threshold. An empty error list gives 0.
pub fn sdr(errors_mm: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("sdr", "thresholds must be sorted ascending"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            if errors_mm.is_empty() {
                0.0
            } else {
                100.0 * errors_mm.iter().filter(|&&e| e <= t).count() as f64 / errors_mm.len() as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PresenceCounts {
    pub both_present: usize,
    pub both_absent: usize,
    pub predicted_only: usize,
    pub annotated_only: usize,
}

impl PresenceCounts {
    pub fn total(&self) -> usize {
        self.both_present + self.both_absent + self.predicted_only + self.annotated_only
    }

    pub fn agreement_pct(&self) -> f64 {
        if self.total() == 0 {
            return 100.0;
        }
        100.0 * (self.both_present + self.both_absent) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ErrorRow {
    pub case: String,
    pub id: usize,
    pub error_mm: f64,
}

/// Aggregate over any number of cases.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<ErrorRow>,
    pub mre_mm: f64,
    pub std_mm: f64,
    pub thresholds_mm: Vec<f64>,
    pub sdr_pct: Vec<f64>,
    pub presence: PresenceCounts,
}

impl EvalReport {
    /// `cases` holds `(name, prediction, annotation)`. MRE and SDR cover
    /// landmarks present in both; presence agreement covers every landmark.
    pub fn evaluate<'a, I>(cases: I, thresholds: &[f64]) -> Result<EvalReport>
    where
        I: IntoIterator<Item = (&'a str, &'a LandmarkSet, &'a LandmarkSet)>,
    {
        let mut rows = Vec::new();
        let mut presence = PresenceCounts::default();
        for (name, pred, gt) in cases {
            check_pair(pred, gt)?;
            for (p, g) in pred.landmarks.iter().zip(&gt.landmarks) {
                match (p.present, g.present) {
                    (true, true) => {
                        presence.both_present += 1;
                        rows.push(ErrorRow {
                            case: name.to_string(),
                            id: g.id,
                            error_mm: gt.distance_mm(p.pos, g.pos),
                        });
                    }
                    (false, false) => presence.both_absent += 1,
                    (true, false) => presence.predicted_only += 1,
                    (false, true) => presence.annotated_only += 1,
                }
            }
        }
        let errors: Vec<f64> = rows.iter().map(|r| r.error_mm).collect();
        let (mre_mm, std_mm) = if errors.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&errors) };
        Ok(EvalReport {
            sdr_pct: sdr(&errors, thresholds)?,
            thresholds_mm: thresholds.to_vec(),
            rows,
            mre_mm,
            std_mm,
            presence,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<24}{:>12}", "landmarks evaluated", self.rows.len());
        let _ = writeln!(s, "{:<24}{:>12}", "MRE (mm)", format!("{:.2} ± {:.2}", self.mre_mm, self.std_mm));
        for (t, v) in self.thresholds_mm.iter().zip(&self.sdr_pct) {
            let _ = writeln!(s, "{:<24}{:>12}", format!("SDR @ {t} mm (%)"), format!("{v:.2}"));
        }
        let p = &self.presence;
        let _ = writeln!(s, "{:<24}{:>12}", "presence agreement (%)", format!("{:.2}", p.agreement_pct()));
        let _ = writeln!(
            s,
            "{:<24}{:>12}",
            "  present/absent/fp/fn",
            format!("{}/{}/{}/{}", p.both_present, p.both_absent, p.predicted_only, p.annotated_only)
        );
        s
    }

    /// One landmark per line: `case id error_mm hit@t...`.
    pub fn to_records(&self) -> String {
        let mut s = String::from("case\tid\terror_mm");
        for t in &self.thresholds_mm {
            let _ = write!(s, "\thit@{t}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}", r.case, r.id, r.error_mm);
            for t in &self.thresholds_mm {
                let _ = write!(s, "\t{}", u8::from(r.error_mm <= *t));
            }
            s.push('\n');
        }
        s
    }
}

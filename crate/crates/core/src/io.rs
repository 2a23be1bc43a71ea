//! Per-round CSV logs and the run summary.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{self, ClassAccuracyVector, RoundLog};

pub fn csv_header(num_classes: usize) -> String {
    let mut cols = vec!["round".to_string(), "global_acc".to_string()];
    cols.extend((0..num_classes).map(|c| format!("acc_class_{c}")));
    cols.extend(
        [
            "local_in_acc_mean",
            "local_in_acc_std",
            "local_out_acc_mean",
            "local_out_acc_std",
            "weight_div_mean",
            "dist_dist_mean",
            "train_loss",
        ]
        .map(String::from),
    );
    cols.join(",")
}

/// Renders logs as CSV. Floats use the shortest text that parses back to the
/// same value.
pub fn round_csv(logs: &[RoundLog], num_classes: usize) -> Result<String> {
    let mut s = csv_header(num_classes);
    s.push('\n');
    for log in logs {
        if log.class_acc.num_classes() != num_classes {
            return Err(Error::DimensionMismatch(format!(
                "round {} has {} class accuracies, expected {num_classes}",
                log.round,
                log.class_acc.num_classes()
            )));
        }
        let _ = write!(s, "{},{}", log.round, log.global_acc);
        for a in &log.class_acc.acc {
            let _ = write!(s, ",{a}");
        }
        let _ = writeln!(
            s,
            ",{},{},{},{},{},{},{}",
            log.local_in_acc_mean,
            log.local_in_acc_std,
            log.local_out_acc_mean,
            log.local_out_acc_std,
            log.weight_div_mean,
            log.dist_dist_mean,
            log.train_loss
        );
    }
    Ok(s)
}

pub fn write_round_csv(path: &Path, logs: &[RoundLog], num_classes: usize) -> Result<()> {
    let text = round_csv(logs, num_classes)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn parse_round_csv(text: &str) -> Result<Vec<RoundLog>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty round log".into()))?;
    let cols = header.split(',').count();
    if cols < 10 {
        return Err(Error::Format(format!("round log header has {cols} columns")));
    }
    let num_classes = cols - 9;
    if header != csv_header(num_classes) {
        return Err(Error::Format(format!("unexpected round log header `{header}`")));
    }
    let mut logs = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Format(format!(
                "line {}: {} fields, expected {cols}",
                i + 2,
                fields.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            fields[j]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: field {}: {e}", i + 2, j + 1)))
        };
        let round: usize = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: round: {e}", i + 2)))?;
        let acc = (0..num_classes).map(|c| num(2 + c)).collect::<Result<Vec<_>>>()?;
        let tail = 2 + num_classes;
        logs.push(RoundLog {
            round,
            global_acc: num(1)?,
            class_acc: ClassAccuracyVector { round, acc },
            local_in_acc_mean: num(tail)?,
            local_in_acc_std: num(tail + 1)?,
            local_out_acc_mean: num(tail + 2)?,
            local_out_acc_std: num(tail + 3)?,
            weight_div_mean: num(tail + 4)?,
            dist_dist_mean: num(tail + 5)?,
            train_loss: num(tail + 6)?,
        });
    }
    Ok(logs)
}

pub fn read_round_csv(path: &Path) -> Result<Vec<RoundLog>> {
    parse_round_csv(&std::fs::read_to_string(path)?)
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub peak_accuracy: f64,
    /// `None` when fewer than two rounds were evaluated.
    #[serde(rename = "forgetting_F")]
    pub forgetting: Option<f64>,
    pub rounds: usize,
}

impl RunSummary {
    pub fn from_logs(logs: &[RoundLog]) -> Result<Self> {
        let last = logs.last().ok_or_else(|| Error::InvalidArgument("no evaluated rounds".into()))?;
        let history: Vec<ClassAccuracyVector> = logs.iter().map(|l| l.class_acc.clone()).collect();
        let forgetting = if history.len() >= 2 {
            Some(metrics::forgetting_measure(&history)?)
        } else {
            None
        };
        Ok(Self {
            final_accuracy: last.global_acc,
            peak_accuracy: logs.iter().map(|l| l.global_acc).fold(f64::NEG_INFINITY, f64::max),
            forgetting,
            rounds: last.round,
        })
    }
}

/// Reproducibility record stored next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub tool_version: String,
    pub round_csv: String,
    pub summary_json: String,
    /// Seconds since the Unix epoch; kept out of `summary.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(flatten)]
    summary: &'a RunSummary,
    config: serde_json::Map<String, serde_json::Value>,
    manifest: &'a RunManifest,
}

/// Pretty JSON with the summary, the config echo and the manifest minus its
/// timestamp, so identical runs give identical bytes.
pub fn summary_json(summary: &RunSummary, config: &[(&str, String)], manifest: &RunManifest) -> Result<String> {
    let manifest = RunManifest {
        started_at: None,
        ..manifest.clone()
    };
    let config = config
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
        .collect();
    let file = SummaryFile {
        summary,
        config,
        manifest: &manifest,
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn manifest_json(manifest: &RunManifest) -> Result<String> {
    let mut s = serde_json::to_string_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(round: usize, acc: Vec<f64>) -> RoundLog {
        RoundLog {
            round,
            global_acc: acc.iter().sum::<f64>() / acc.len() as f64,
            class_acc: ClassAccuracyVector { round, acc },
            local_in_acc_mean: 0.1,
            local_in_acc_std: 1.0 / 3.0,
            local_out_acc_mean: 0.7,
            local_out_acc_std: 0.0,
            weight_div_mean: 12.5,
            dist_dist_mean: 1e-17,
            train_loss: 1.2345678901234567,
        }
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            csv_header(2),
            "round,global_acc,acc_class_0,acc_class_1,local_in_acc_mean,local_in_acc_std,\
             local_out_acc_mean,local_out_acc_std,weight_div_mean,dist_dist_mean,train_loss"
        );
    }

    #[test]
    fn csv_round_trips_exactly() {
        let logs = vec![log(1, vec![0.1, 0.2, 0.30000000000000004]), log(2, vec![1.0, 0.0, 2.0 / 3.0])];
        let text = round_csv(&logs, 3).unwrap();
        assert_eq!(parse_round_csv(&text).unwrap(), logs);
        assert!(round_csv(&logs, 4).is_err());
        assert!(parse_round_csv("round,x\n").is_err());
    }

    #[test]
    fn summary_fields() {
        let logs = vec![log(1, vec![0.9, 0.5]), log(2, vec![0.6, 0.6])];
        let s = RunSummary::from_logs(&logs).unwrap();
        assert_eq!(s.rounds, 2);
        assert!((s.final_accuracy - 0.6).abs() < 1e-15);
        assert!((s.peak_accuracy - 0.7).abs() < 1e-15);
        assert!((s.forgetting.unwrap() - 0.1).abs() < 1e-12);
        let m = RunManifest {
            config_hash: "ab".into(),
            master_seed: 3,
            tool_version: "0.1.0".into(),
            round_csv: "rounds.csv".into(),
            summary_json: "summary.json".into(),
            started_at: Some(17),
        };
        let json = summary_json(&s, &[("rounds", "2".into())], &m).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["forgetting_F"].as_f64().unwrap(), s.forgetting.unwrap());
        assert_eq!(v["config"]["rounds"], "2");
        assert!(v["manifest"].get("started_at").is_none());
        assert!(manifest_json(&m).unwrap().contains("started_at"));
    }
}

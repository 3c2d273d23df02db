//! Logit CSV files exchanged between the classifiers, fusion and evaluation.
//!
//! Header: `participant_id[,chunk_index],logit_<class>...,predicted`.
//! Logits are written with the shortest representation that parses back to
//! the same `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub participant_id: String,
    pub chunk_index: Option<usize>,
    pub logits: Vec<f32>,
}

impl Prediction {
    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub class_names: Vec<String>,
    pub rows: Vec<Prediction>,
}

pub fn write_predictions(path: &Path, class_names: &[String], rows: &[Prediction]) -> Result<()> {
    let with_chunks = !rows.is_empty() && rows.iter().all(|r| r.chunk_index.is_some());
    if !with_chunks && rows.iter().any(|r| r.chunk_index.is_some()) {
        return Err(Error::Config("prediction rows mix chunk-level and recording-level entries".into()));
    }
    let mut header = vec!["participant_id".to_string()];
    if with_chunks {
        header.push("chunk_index".into());
    }
    header.extend(class_names.iter().map(|c| format!("logit_{c}")));
    header.push("predicted".into());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        if r.logits.len() != class_names.len() {
            return Err(Error::Shape(format!(
                "{} logits for {} classes",
                r.logits.len(),
                class_names.len()
            )));
        }
        let mut rec = vec![r.participant_id.clone()];
        if let Some(c) = r.chunk_index {
            rec.push(c.to_string());
        }
        rec.extend(r.logits.iter().map(|v| v.to_string()));
        rec.push(class_names[r.predicted()].clone());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    crate::io::write_file(path, &bytes)
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile> {
    let mut reader = crate::io::csv_reader(path, false)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let bad_header = || Error::Ingest {
        row: 1,
        message: format!("unexpected prediction header {header:?}"),
    };
    if header.first().map(String::as_str) != Some("participant_id") || header.last().map(String::as_str) != Some("predicted") {
        return Err(bad_header());
    }
    let with_chunks = header.get(1).map(String::as_str) == Some("chunk_index");
    let first_logit = if with_chunks { 2 } else { 1 };
    let class_names: Vec<String> = header[first_logit..header.len() - 1]
        .iter()
        .map(|h| h.strip_prefix("logit_").map(str::to_string).ok_or_else(bad_header))
        .collect::<Result<_>>()?;
    if class_names.is_empty() {
        return Err(bad_header());
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Ingest {
                row,
                message: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        let chunk_index = if with_chunks {
            Some(rec[1].parse().map_err(|_| Error::Ingest {
                row,
                message: format!("bad chunk_index `{}`", &rec[1]),
            })?)
        } else {
            None
        };
        let logits = (first_logit..header.len() - 1)
            .map(|c| {
                rec[c].parse::<f32>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Ingest {
                    row,
                    message: format!("bad logit `{}`", &rec[c]),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(Prediction {
            participant_id: rec[0].to_string(),
            chunk_index,
            logits,
        });
    }
    Ok(PredictionFile { class_names, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        for chunked in [true, false] {
            let rows = vec![
                Prediction {
                    participant_id: "p1".into(),
                    chunk_index: chunked.then_some(0),
                    logits: vec![0.1, -1.0e-7],
                },
                Prediction {
                    participant_id: "p2".into(),
                    chunk_index: chunked.then_some(3),
                    logits: vec![-2.5, 3.333_333_3],
                },
            ];
            let p = dir.path().join(format!("{chunked}.csv"));
            write_predictions(&p, &names, &rows).unwrap();
            let back = read_predictions(&p).unwrap();
            assert_eq!(back.class_names, names);
            assert_eq!(back.rows, rows);
        }
    }
}

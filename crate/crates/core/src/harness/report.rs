use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flcore::{MetricsRecord, Participant};

/// Per-round server quantities written by [`export_plot_data`].
pub const PLOT_SERIES: [&str; 5] = ["test_acc", "l_s", "l_u", "n_pseudo_new", "pseudo_precision"];

/// Parses a JSONL metrics log. Blank lines are skipped; a malformed line
/// fails with its 1-based line number.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Metrics {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn series_value(r: &MetricsRecord, name: &str) -> Option<f64> {
    match name {
        "test_acc" => r.test_acc,
        "l_s" => r.l_s,
        "l_u" => r.l_u,
        "n_pseudo_new" => Some(r.n_pseudo_new as f64),
        "pseudo_precision" => r.pseudo_precision,
        _ => None,
    }
}

/// Writes a tidy `round,series,value` CSV from the server records of each
/// labelled metrics file. Series are named `<label>/<quantity>`, or just
/// `<quantity>` for an empty label. Missing values are left blank, so every
/// series has one row per round. Returns the number of data rows.
pub fn export_plot_data<P: AsRef<Path>>(inputs: &[(String, P)], out: impl Write) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["round", "series", "value"]).map_err(csv_err)?;
    let mut rows = 0;
    for (label, path) in inputs {
        let records = read_metrics(path)?;
        let server: Vec<&MetricsRecord> = records.iter().filter(|r| r.client_id == Participant::Server).collect();
        for name in PLOT_SERIES {
            let series = if label.is_empty() {
                name.to_string()
            } else {
                format!("{label}/{name}")
            };
            for r in &server {
                let value = series_value(r, name).map(|v| v.to_string()).unwrap_or_default();
                w.write_record([r.round.to_string(), series.clone(), value])
                    .map_err(csv_err)?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

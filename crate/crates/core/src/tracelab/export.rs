//! CSV schemas. Every file starts with a header row; timestamps and
//! durations are integer microseconds, fractions and statistics are printed
//! with at least one decimal digit.

use std::path::Path;

use thiserror::Error;

use super::{CdfSeries, Stage, StageStats, TraceRecord};
use crate::clock::Instant;

pub const CDF_HEADER: [&str; 2] = ["value_us", "fraction"];

pub const STAGE_STATS_HEADER: [&str; 10] = [
    "interval",
    "count",
    "min",
    "whisker_low",
    "q1",
    "median",
    "q3",
    "whisker_high",
    "max",
    "outliers",
];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: u64, message: String },
}

/// `{:?}` keeps a trailing `.0` on whole numbers and round-trips exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), ExportError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let p = || path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| ExportError::Csv { path: p(), source })?;
    w.write_record(header)
        .map_err(|source| ExportError::Csv { path: p(), source })?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        w.write_record(&row)
            .map_err(|source| ExportError::Csv { path: p(), source })?;
    }
    w.flush().map_err(|source| ExportError::Io { path: p(), source })
}

pub fn write_cdf(path: &Path, series: &CdfSeries) -> Result<(), ExportError> {
    write_rows(
        path,
        &CDF_HEADER,
        series.points().map(|(v, f)| [v.to_string(), fmt_f64(f)]),
    )
}

pub fn write_stage_stats(path: &Path, stats: &[(String, StageStats)]) -> Result<(), ExportError> {
    write_rows(
        path,
        &STAGE_STATS_HEADER,
        stats.iter().map(|(name, s)| {
            [
                name.clone(),
                s.count.to_string(),
                fmt_f64(s.min),
                fmt_f64(s.whisker_low),
                fmt_f64(s.q1),
                fmt_f64(s.median),
                fmt_f64(s.q3),
                fmt_f64(s.whisker_high),
                fmt_f64(s.max),
                s.outliers.to_string(),
            ]
        }),
    )
}

fn trace_header() -> Vec<&'static str> {
    std::iter::once("token").chain(Stage::ALL.iter().map(|s| s.as_str())).collect()
}

/// Wide format, one row per token; missing stages are empty cells.
pub fn write_traces(path: &Path, traces: &[TraceRecord]) -> Result<(), ExportError> {
    write_rows(
        path,
        &trace_header(),
        traces.iter().map(|t| {
            std::iter::once(t.token.to_string()).chain(
                Stage::ALL
                    .iter()
                    .map(|s| t.get(*s).map(|i| i.as_micros().to_string()).unwrap_or_default()),
            )
        }),
    )
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>, ExportError> {
    let p = || path.display().to_string();
    let mut rd = csv::Reader::from_path(path).map_err(|source| ExportError::Csv { path: p(), source })?;
    let malformed = |line: u64, message: String| ExportError::Malformed {
        path: p(),
        line,
        message,
    };
    let header = rd
        .headers()
        .map_err(|source| ExportError::Csv { path: p(), source })?
        .clone();
    if header.iter().ne(trace_header()) {
        return Err(malformed(1, format!("expected header {}", trace_header().join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|source| ExportError::Csv { path: p(), source })?;
        let token = row[0]
            .parse()
            .map_err(|_| malformed(line, format!("bad token {:?}", &row[0])))?;
        let mut t = TraceRecord::new(token);
        for (stage, cell) in Stage::ALL.iter().zip(row.iter().skip(1)) {
            if cell.is_empty() {
                continue;
            }
            let us: u64 = cell
                .parse()
                .map_err(|_| malformed(line, format!("bad {} timestamp {cell:?}", stage.as_str())))?;
            t.set(*stage, Instant::from_micros(us));
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{boxstats, cdf};
    use super::*;

    #[test]
    fn cdf_of_single_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cdf.csv");
        write_cdf(&path, &cdf(&[1]).unwrap()).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "value_us,fraction\n1,1.0\n");
    }

    #[test]
    fn empty_stats_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_stage_stats(&path, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{}\n", STAGE_STATS_HEADER.join(","))
        );
    }

    #[test]
    fn repeated_writes_are_identical() {
        let dir = tempfile::tempdir().unwrap();
        let stats = vec![("x".to_string(), boxstats(&[1.0, 2.5, 9.0]).unwrap())];
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_stage_stats(&a, &stats).unwrap();
        write_stage_stats(&b, &stats).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn traces_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let traces = vec![
            TraceRecord::new(0)
                .with(Stage::ControllerSend, Instant::ZERO)
                .with(Stage::ControllerRecv, Instant::from_micros(9000)),
            TraceRecord::new(1),
        ];
        write_traces(&path, &traces).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("token,controller_send,transport_tx,"));
        assert!(text.contains("\n0,0,,,,,,,,,9000\n"));
        assert_eq!(read_traces(&path).unwrap(), traces);
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let err = write_cdf(Path::new("/nonexistent-dir/x.csv"), &cdf(&[1]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}

use std::collections::HashMap;
use std::path::Path;

use crate::error::CliError;

/// Observations of one subject in original time units, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub subject: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Subject label used when the file has no `subject` column.
pub const SINGLE_SUBJECT: &str = "1";

/// Reads a long CSV with header `subject,t,y` (or just `t,y`). Subjects keep
/// the order of their first row.
pub fn read_series(path: &Path) -> Result<Vec<Series>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| input_error(path, &e))?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(CliError::Input(format!("{}: file is empty; expected a header `subject,t,y`", path.display())));
    }
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(t_col), Some(y_col)) = (column("t"), column("y")) else {
        return Err(CliError::Input(format!(
            "{}: line 1: header must contain `t` and `y` columns, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    };
    let subject_col = column("subject");

    let mut series: Vec<Series> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| input_error(path, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let number = |col: usize, name: &str| -> Result<f64, CliError> {
            let raw = record.get(col).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(CliError::Input(format!("{}: line {line}: invalid {name} value `{raw}`", path.display()))),
            }
        };
        let t = number(t_col, "t")?;
        let y = number(y_col, "y")?;
        let subject = subject_col.and_then(|c| record.get(c)).unwrap_or(SINGLE_SUBJECT).to_string();
        if subject.is_empty() {
            return Err(CliError::Input(format!("{}: line {line}: empty subject", path.display())));
        }
        let slot = *index.entry(subject.clone()).or_insert_with(|| {
            series.push(Series { subject, times: Vec::new(), values: Vec::new() });
            series.len() - 1
        });
        series[slot].times.push(t);
        series[slot].values.push(y);
    }
    if series.is_empty() {
        return Err(CliError::Input(format!("{}: no data rows after the header", path.display())));
    }
    Ok(series)
}

fn input_error(path: &Path, e: &csv::Error) -> CliError {
    match e.position() {
        Some(p) => CliError::Input(format!("{}: line {}: {e}", path.display(), p.line())),
        None => CliError::Input(format!("{}: {e}", path.display())),
    }
}

/// Affine map `t = offset + scale · u` taking `u ∈ [0, 1]` onto the observed time range.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeMap {
    pub offset: f64,
    pub scale: f64,
}

impl TimeMap {
    pub fn spanning(times: &[f64]) -> Option<Self> {
        let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi > lo).then_some(Self { offset: lo, scale: hi - lo })
    }

    pub fn to_unit(&self, t: f64) -> f64 {
        ((t - self.offset) / self.scale).clamp(0.0, 1.0)
    }

    pub fn to_original(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

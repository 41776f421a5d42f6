use serde::Serialize;

use crate::config::SCHEMA_VERSION;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Human,
    Csv,
    Json,
}

impl Format {
    pub fn from_flags(csv: bool, json: bool) -> Self {
        match (csv, json) {
            (true, _) => Format::Csv,
            (_, true) => Format::Json,
            _ => Format::Human,
        }
    }
}

/// Lossless scientific notation for machine-readable output (17 significant digits).
pub fn full(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON document with `schema_version` as the first field.
pub fn json<T: Serialize>(kind: &str, body: &T) -> Result<String, CliError> {
    #[derive(Serialize)]
    struct Envelope<'a, T> {
        schema_version: u32,
        kind: &'a str,
        #[serde(flatten)]
        body: &'a T,
    }
    let mut s = serde_json::to_string_pretty(&Envelope { schema_version: SCHEMA_VERSION, kind, body })
        .map_err(|e| CliError::Usage(format!("cannot serialise output: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn csv<R, I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_precision_round_trips() {
        for x in [3.49237e24, 0.1 + 0.2, 1.0 / 3.0] {
            let s = full(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let digits = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
            assert!(digits >= 12);
        }
    }

    #[test]
    fn json_leads_with_schema_version() {
        #[derive(Serialize)]
        struct B {
            x: u8,
        }
        let s = json("t", &B { x: 1 }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["x"], 1);
        assert!(s.trim_start().starts_with("{\n  \"schema_version\""));
    }
}

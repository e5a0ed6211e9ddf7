//! CSV decoding against a contract, and the inverse encoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::contract::{ColumnKind, ColumnSpec, TableContract};
use super::{IngestError, Result};
use crate::kg::Schema;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Value {
    pub fn text(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Real(r) => r.to_string(),
            Value::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Text(_) => None,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

/// A fully decoded row: codes are replaced by labels, blanks by `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedRow {
    pub table: String,
    /// 1-based index among the data rows.
    pub row: usize,
    pub fields: BTreeMap<String, Option<Value>>,
}

impl DecodedRow {
    pub fn get(&self, column: &str) -> Option<&Value> {
        self.fields.get(column).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub table: String,
    pub row: usize,
    pub column: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeOutcome {
    pub rows: Vec<DecodedRow>,
    pub rejects: Vec<Reject>,
}

fn decode_cell(schema: &Schema, spec: &ColumnSpec, raw: &str) -> std::result::Result<Option<Value>, String> {
    if raw.is_empty() {
        return if spec.nullable {
            Ok(None)
        } else {
            Err("missing value in non-nullable column".into())
        };
    }
    let v = match &spec.kind {
        ColumnKind::Key => Value::Text(raw.to_owned()),
        ColumnKind::Code { domain } => {
            let code: i64 = raw.parse().map_err(|_| format!("code {raw:?} is not an integer"))?;
            let label = schema
                .decode(domain, code)
                .ok_or_else(|| format!("code {code} outside domain {domain}"))?;
            Value::Text(label.to_owned())
        }
        ColumnKind::Enum { values } => {
            if !values.iter().any(|v| v == raw) {
                return Err(format!("value {raw:?} outside {values:?}"));
            }
            Value::Text(raw.to_owned())
        }
        ColumnKind::Int { min, max } => {
            let i: i64 = raw.parse().map_err(|_| format!("{raw:?} is not an integer"))?;
            if min.is_some_and(|m| i < m) || max.is_some_and(|m| i > m) {
                return Err(format!("{i} outside [{min:?}, {max:?}]"));
            }
            Value::Int(i)
        }
        ColumnKind::Real => {
            let r: f64 = raw.parse().map_err(|_| format!("{raw:?} is not a number"))?;
            if !r.is_finite() {
                return Err(format!("{raw:?} is not finite"));
            }
            Value::Real(r)
        }
    };
    Ok(Some(v))
}

/// Decodes one CSV table. Each row is either fully decoded or rejected with
/// the first offending column.
pub fn decode_table(bytes: &[u8], contract: &TableContract, schema: &Schema) -> Result<DecodeOutcome> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Parse {
            table: contract.table.clone(),
            line: e.position().map_or(1, |p| p.line()),
            message: e.to_string(),
        })?
        .clone();
    let mut positions = Vec::with_capacity(contract.columns.len());
    for spec in &contract.columns {
        let pos = headers.iter().position(|h| h == spec.name);
        if pos.is_none() && !spec.nullable {
            return Err(IngestError::Contract(format!(
                "table {}: missing mandatory column {}",
                contract.table, spec.name
            )));
        }
        positions.push(pos);
    }
    let mut out = DecodeOutcome::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| IngestError::Parse {
            table: contract.table.clone(),
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            message: e.to_string(),
        })?;
        let row = i + 1;
        let mut fields = BTreeMap::new();
        let mut reject = None;
        for (spec, pos) in contract.columns.iter().zip(&positions) {
            let raw = pos.and_then(|p| rec.get(p)).unwrap_or("");
            match decode_cell(schema, spec, raw) {
                Ok(v) => {
                    fields.insert(spec.name.clone(), v);
                }
                Err(reason) => {
                    reject = Some(Reject {
                        table: contract.table.clone(),
                        row,
                        column: spec.name.clone(),
                        reason: format!("column {}: {reason}", spec.name),
                    });
                    break;
                }
            }
        }
        match reject {
            Some(r) => out.rejects.push(r),
            None => out.rows.push(DecodedRow {
                table: contract.table.clone(),
                row,
                fields,
            }),
        }
    }
    Ok(out)
}

/// Writes rows back to CSV in contract column order, re-encoding labels.
pub fn encode_table(rows: &[DecodedRow], contract: &TableContract, schema: &Schema) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = contract.columns.iter().map(|c| c.name.as_str()).collect();
    let io = |e: csv::Error| IngestError::Contract(format!("table {}: {e}", contract.table));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = Vec::with_capacity(contract.columns.len());
        for spec in &contract.columns {
            let cell = match (r.get(&spec.name), &spec.kind) {
                (None, _) => String::new(),
                (Some(v), ColumnKind::Code { domain }) => {
                    let label = v.text();
                    schema
                        .encode(domain, &label)
                        .ok_or_else(|| IngestError::Contract(format!("{label} is not in the {domain} vocabulary")))?
                        .to_string()
                }
                (Some(v), _) => v.text(),
            };
            rec.push(cell);
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| IngestError::Contract(format!("table {}: {e}", contract.table)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::contract::builtin_contracts;

    fn crash_contract() -> TableContract {
        builtin_contracts().remove(0)
    }

    const HEADER: &str =
        "case_id,light,weather,rel_junct,surf_cond,manner,cais,hour,weekday,month,vehicle_count,event_count\n";

    #[test]
    fn empty_data_section() {
        let s = Schema::builtin();
        let out = decode_table(HEADER.as_bytes(), &crash_contract(), &s).unwrap();
        assert!(out.rows.is_empty() && out.rejects.is_empty());
    }

    #[test]
    fn out_of_domain_code_is_rejected() {
        let s = Schema::builtin();
        let csv = format!("{HEADER}C1,1,77,1,1,1,1,10,3,5,1,1\nC2,1,99,,1,,1,10,3,5,2,0\n");
        let out = decode_table(csv.as_bytes(), &crash_contract(), &s).unwrap();
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].column, "weather");
        assert!(out.rejects[0].reason.contains("77"));
        assert_eq!(out.rows.len(), 1);
        assert_eq!(out.rows[0].get("weather"), Some(&Value::Text("UNKNOWN".into())));
        assert_eq!(out.rows[0].get("rel_junct"), None);
        assert_eq!(out.rows[0].row, 2);
    }

    #[test]
    fn header_order_is_irrelevant() {
        let s = Schema::builtin();
        let csv =
            "month,case_id,light,weather,rel_junct,surf_cond,manner,cais,hour,weekday,vehicle_count,event_count\n\
                   5,C1,1,2,1,1,1,1,10,3,1,1\n";
        let out = decode_table(csv.as_bytes(), &crash_contract(), &s).unwrap();
        assert_eq!(out.rows[0].get("month"), Some(&Value::Int(5)));
        assert_eq!(out.rows[0].get("weather"), Some(&Value::Text("cloudy".into())));
    }

    #[test]
    fn missing_mandatory_column() {
        let s = Schema::builtin();
        let err = decode_table(b"case_id,light\n", &crash_contract(), &s).unwrap_err();
        assert!(matches!(err, IngestError::Contract(m) if m.contains("cais")));
    }

    #[test]
    fn malformed_csv_reports_line() {
        let s = Schema::builtin();
        let csv = format!("{HEADER}C1,1,1,1,1,1,1,10,3,5,1,1\nC2,1,1\n");
        match decode_table(csv.as_bytes(), &crash_contract(), &s).unwrap_err() {
            IngestError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn encode_inverts_decode() {
        let s = Schema::builtin();
        let csv = format!("{HEADER}C1,1,99,,1,,1,10,3,5,2,0\n\"C,2\",2,3,4,5,6,7,0,1,12,3,4\n");
        let c = crash_contract();
        let out = decode_table(csv.as_bytes(), &c, &s).unwrap();
        let bytes = encode_table(&out.rows, &c, &s).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), csv);
    }
}

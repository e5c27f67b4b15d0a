use jcra_core::metrics::ApReport;
use serde_json::{Map, Value};

use crate::json::{fixed, to_canonical};

const COLUMN: usize = 10;

/// Two-line table: the column names, then the values with six decimals.
pub fn table(r: &ApReport) -> String {
    let fields = r.fields();
    let header: String = fields.iter().map(|(n, _)| format!("{n:>COLUMN$}")).collect();
    let values: String = fields.iter().map(|(_, v)| format!("{:>COLUMN$}", fixed(*v))).collect();
    format!("{header}\n{values}\n")
}

pub fn to_json(r: &ApReport) -> Value {
    let mut m = Map::new();
    for (name, v) in r.fields() {
        // f64 numbers keep the six-decimal form, -1 included
        m.insert(name.to_string(), Value::from(v));
    }
    Value::Object(m)
}

pub fn json_text(r: &ApReport) -> String {
    to_canonical(&to_json(r))
}

//! Field extraction for the line-delimited JSON file formats, reporting the
//! line number and field name of whatever is wrong.

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Line<'a> {
    pub source: &'a str,
    pub number: usize,
}

impl Line<'_> {
    pub fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line: self.number,
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn object(&self, text: &str) -> Result<Map<String, Value>> {
        match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(map)) => Ok(map),
            Ok(_) => Err(self.err("<record>", "expected a JSON object")),
            Err(e) => Err(self.err("<record>", e.to_string())),
        }
    }

    fn field<'m>(&self, map: &'m Map<String, Value>, field: &str) -> Result<&'m Value> {
        map.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    pub fn u64(&self, map: &Map<String, Value>, field: &str) -> Result<u64> {
        self.field(map, field)?
            .as_u64()
            .ok_or_else(|| self.err(field, "expected a non-negative integer"))
    }

    pub fn usize(&self, map: &Map<String, Value>, field: &str) -> Result<usize> {
        let v = self.u64(map, field)?;
        usize::try_from(v).map_err(|_| self.err(field, "integer out of range"))
    }

    pub fn str<'m>(&self, map: &'m Map<String, Value>, field: &str) -> Result<&'m str> {
        self.field(map, field)?
            .as_str()
            .ok_or_else(|| self.err(field, "expected a string"))
    }

    pub fn f64_array(&self, map: &Map<String, Value>, field: &str) -> Result<Vec<f64>> {
        let arr = self
            .field(map, field)?
            .as_array()
            .ok_or_else(|| self.err(field, "expected an array of numbers"))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| self.err(field, "expected finite numbers"))
            })
            .collect()
    }

    pub fn u64_array(&self, map: &Map<String, Value>, field: &str) -> Result<Vec<u64>> {
        let arr = self
            .field(map, field)?
            .as_array()
            .ok_or_else(|| self.err(field, "expected an array of integers"))?;
        arr.iter()
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| self.err(field, "expected non-negative integers"))
            })
            .collect()
    }

    pub fn typed<T: DeserializeOwned>(&self, map: &Map<String, Value>, field: &str) -> Result<T> {
        let v = self.field(map, field)?;
        T::deserialize(v).map_err(|e| self.err(field, e.to_string()))
    }

    pub fn expect_format(&self, map: &Map<String, Value>, format: &str, version: u64) -> Result<()> {
        let found = self.str(map, "format")?;
        if found != format {
            return Err(self.err("format", format!("expected `{format}`, found `{found}`")));
        }
        let v = self.u64(map, "version")?;
        if v != version {
            return Err(self.err("version", format!("unsupported version {v}")));
        }
        Ok(())
    }
}

/// Non-blank lines with their 1-based line numbers.
pub(crate) fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

use serde::{Deserialize, Serialize};

use super::AnonError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ColumnRole {
    Identifier,
    QuasiIdentifier,
    Sensitive,
    Other,
}

impl ColumnRole {
    fn as_str(self) -> &'static str {
        match self {
            ColumnRole::Identifier => "IDENTIFIER",
            ColumnRole::QuasiIdentifier => "QUASI_IDENTIFIER",
            ColumnRole::Sensitive => "SENSITIVE",
            ColumnRole::Other => "OTHER",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            ColumnRole::Identifier,
            ColumnRole::QuasiIdentifier,
            ColumnRole::Sensitive,
            ColumnRole::Other,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Integer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
    #[serde(rename = "type")]
    pub kind: ColumnType,
}

impl Column {
    pub fn new(name: &str, role: ColumnRole, kind: ColumnType) -> Self {
        Self {
            name: name.to_string(),
            role,
            kind,
        }
    }
}

/// A table of records with declared column roles. Cells are stored as text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, rows: Vec<Vec<String>>) -> Result<Self, AnonError> {
        if let Some(row) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(AnonError::ArityMismatch { row });
        }
        let ds = Self { columns, rows };
        for (c, col) in ds.columns.iter().enumerate() {
            if col.kind == ColumnType::Integer {
                for r in &ds.rows {
                    if r[c].parse::<i64>().is_err() {
                        return Err(AnonError::NotInteger {
                            column: col.name.clone(),
                            value: r[c].clone(),
                        });
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize, AnonError> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| AnonError::UnknownColumn(name.to_string()))
    }

    pub fn quasi_identifiers(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::QuasiIdentifier)
            .map(|(i, _)| i)
            .collect()
    }

    /// Numeric view of a column; text columns are parsed leniently as floats.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>, AnonError> {
        let c = self.column_index(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[c].parse::<f64>().map_err(|_| AnonError::NotInteger {
                    column: name.to_string(),
                    value: r[c].clone(),
                })
            })
            .collect()
    }

    /// Parses delimiter-separated text whose header cells read `name:ROLE:type`.
    pub fn from_delimited(text: &str, delimiter: u8) -> Result<Self, AnonError> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| AnonError::Parse(e.to_string()))?.clone();
        let columns = headers
            .iter()
            .map(|h| {
                let parts: Vec<&str> = h.split(':').collect();
                let [name, role, kind] = parts.as_slice() else {
                    return Err(AnonError::Parse(format!("header cell {h:?} is not name:ROLE:type")));
                };
                let role = ColumnRole::parse(role).ok_or_else(|| AnonError::Parse(format!("unknown role {role:?}")))?;
                let kind = match *kind {
                    "text" => ColumnType::Text,
                    "integer" => ColumnType::Integer,
                    other => return Err(AnonError::Parse(format!("unknown type {other:?}"))),
                };
                Ok(Column::new(name, role, kind))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| AnonError::Parse(e.to_string()))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Dataset::new(columns, rows)
    }

    pub fn to_delimited(&self, delimiter: u8) -> String {
        let mut writer = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
        let header: Vec<String> = self
            .columns
            .iter()
            .map(|c| {
                let kind = match c.kind {
                    ColumnType::Text => "text",
                    ColumnType::Integer => "integer",
                };
                format!("{}:{}:{}", c.name, c.role.as_str(), kind)
            })
            .collect();
        writer.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            writer.write_record(r).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf8 cells")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delimited_round_trip() {
        let text = "name:IDENTIFIER:text,age:QUASI_IDENTIFIER:integer,dx:SENSITIVE:text\nann,34,flu\nbob,41,\"cold, mild\"\n";
        let ds = Dataset::from_delimited(text, b',').unwrap();
        assert_eq!(ds.columns.len(), 3);
        assert_eq!(ds.rows[1][2], "cold, mild");
        assert_eq!(ds.quasi_identifiers(), vec![1]);
        assert_eq!(Dataset::from_delimited(&ds.to_delimited(b','), b',').unwrap(), ds);
    }

    #[test]
    fn rejects_bad_headers_and_cells() {
        assert!(Dataset::from_delimited("age\n1\n", b',').is_err());
        assert!(Dataset::from_delimited("age:QI:integer\n1\n", b',').is_err());
        assert!(matches!(
            Dataset::from_delimited("age:QUASI_IDENTIFIER:integer\nold\n", b','),
            Err(AnonError::NotInteger { .. })
        ));
        let cols = vec![Column::new("a", ColumnRole::Other, ColumnType::Text)];
        assert!(matches!(
            Dataset::new(cols, vec![vec!["x".into(), "y".into()]]),
            Err(AnonError::ArityMismatch { row: 0 })
        ));
    }
}

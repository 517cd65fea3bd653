//! Runtime values of the stub kernel.

use std::cmp::Ordering;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<Value>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i].clone()).collect())
    }

    pub fn select_rows(&self, keep: impl Fn(&[Value]) -> bool) -> Table {
        Table {
            columns: self.columns.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    /// Fixed-width text grid with a positional index, abbreviated past 20
    /// rows.
    pub fn render(&self) -> String {
        const EDGE: usize = 10;
        let shown: Vec<(usize, &Vec<Value>)> = if self.rows.len() > 2 * EDGE {
            self.rows
                .iter()
                .enumerate()
                .take(EDGE)
                .chain(self.rows.iter().enumerate().skip(self.rows.len() - EDGE))
                .collect()
        } else {
            self.rows.iter().enumerate().collect()
        };
        let cells: Vec<Vec<String>> = shown
            .iter()
            .map(|(_, r)| r.iter().map(|v| clip(&v.to_str(), 40)).collect())
            .collect();
        let idx_w = shown.last().map(|(i, _)| i.to_string().len()).unwrap_or(1);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(c, h)| {
                cells
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([h.chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:idx_w$}", "");
        for (h, w) in self.columns.iter().zip(&widths) {
            let _ = write!(out, "  {h:>w$}");
        }
        for (k, (i, _)) in shown.iter().enumerate() {
            if self.rows.len() > 2 * EDGE && k == EDGE {
                out.push_str("\n...");
            }
            let _ = write!(out, "\n{i:<idx_w$}");
            for (cell, w) in cells[k].iter().zip(&widths) {
                let _ = write!(out, "  {cell:>w$}");
            }
        }
        if self.rows.len() > 2 * EDGE || self.rows.is_empty() {
            let _ = write!(
                out,
                "\n\n[{} rows x {} columns]",
                self.rows.len(),
                self.columns.len()
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Value::to_str))?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn clip(s: &str, n: usize) -> String {
    let s = s.replace('\n', " ");
    if s.chars().count() <= n {
        s
    } else {
        let mut t: String = s.chars().take(n - 3).collect();
        t.push_str("...");
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Tuple(Vec<Value>),
    Dict(Vec<(Value, Value)>),
    Table(Table),
    /// An imported module, by dotted path.
    Module(String),
    /// A named builtin or plugin function.
    Function(String),
    /// A file opened for writing, by absolute path.
    File(std::path::PathBuf),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::None => "NoneType",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "str",
            Value::List(_) => "list",
            Value::Tuple(_) => "tuple",
            Value::Dict(_) => "dict",
            Value::Table(_) => "DataFrame",
            Value::Module(_) => "module",
            Value::Function(_) => "builtin_function_or_method",
            Value::File(_) => "TextIOWrapper",
        }
    }

    pub fn truthy(&self) -> bool {
        match self {
            Value::None => false,
            Value::Bool(b) => *b,
            Value::Int(i) => *i != 0,
            Value::Float(f) => *f != 0.0,
            Value::Str(s) => !s.is_empty(),
            Value::List(v) | Value::Tuple(v) => !v.is_empty(),
            Value::Dict(d) => !d.is_empty(),
            Value::Table(t) => !t.rows.is_empty(),
            _ => true,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Bool(b) => Some(*b as i64 as f64),
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// `str(v)`.
    pub fn to_str(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            Value::Table(t) => t.render(),
            other => other.repr(),
        }
    }

    /// `repr(v)`.
    pub fn repr(&self) -> String {
        match self {
            Value::None => "None".into(),
            Value::Bool(true) => "True".into(),
            Value::Bool(false) => "False".into(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => float_repr(*f),
            Value::Str(s) => str_repr(s),
            Value::List(v) => format!(
                "[{}]",
                v.iter().map(Value::repr).collect::<Vec<_>>().join(", ")
            ),
            Value::Tuple(v) if v.len() == 1 => format!("({},)", v[0].repr()),
            Value::Tuple(v) => format!(
                "({})",
                v.iter().map(Value::repr).collect::<Vec<_>>().join(", ")
            ),
            Value::Dict(d) => format!(
                "{{{}}}",
                d.iter()
                    .map(|(k, v)| format!("{}: {}", k.repr(), v.repr()))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            Value::Table(t) => t.render(),
            Value::Module(m) => format!("<module '{m}'>"),
            Value::Function(f) => format!("<built-in function {f}>"),
            Value::File(p) => format!("<_io.TextIOWrapper name='{}' mode='w'>", p.display()),
        }
    }

    /// Python equality, with numeric cross-type comparison.
    pub fn py_eq(&self, other: &Value) -> bool {
        match (self.as_f64(), other.as_f64()) {
            (Some(a), Some(b)) if !matches!(self, Value::Str(_)) => a == b,
            _ => match (self, other) {
                (Value::List(a), Value::List(b)) | (Value::Tuple(a), Value::Tuple(b)) => {
                    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.py_eq(y))
                }
                _ => self == other,
            },
        }
    }

    pub fn py_cmp(&self, other: &Value) -> Option<Ordering> {
        if let (Some(a), Some(b)) = (self.as_f64(), other.as_f64()) {
            return a.partial_cmp(&b);
        }
        match (self, other) {
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::List(a), Value::List(b)) | (Value::Tuple(a), Value::Tuple(b)) => {
                for (x, y) in a.iter().zip(b) {
                    match x.py_cmp(y)? {
                        Ordering::Equal => continue,
                        o => return Some(o),
                    }
                }
                Some(a.len().cmp(&b.len()))
            }
            _ => None,
        }
    }
}

pub fn float_repr(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{f}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\\' => out.push_str("\\\\"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reprs_follow_python() {
        assert_eq!(Value::Float(2.0).repr(), "2.0");
        assert_eq!(Value::Float(0.25).repr(), "0.25");
        assert_eq!(Value::Str("it's".into()).repr(), "\"it's\"");
        assert_eq!(Value::Tuple(vec![Value::Int(1)]).repr(), "(1,)");
        assert_eq!(
            Value::List(vec![Value::Str("a".into()), Value::None]).repr(),
            "['a', None]"
        );
    }

    #[test]
    fn numeric_equality_crosses_types() {
        assert!(Value::Int(1).py_eq(&Value::Float(1.0)));
        assert!(!Value::Str("1".into()).py_eq(&Value::Int(1)));
    }

    #[test]
    fn table_render_aligns() {
        let t = Table {
            columns: vec!["topic".into(), "count".into()],
            rows: vec![
                vec![Value::Str("crash".into()), Value::Int(12)],
                vec![Value::Str("ui".into()), Value::Int(3)],
            ],
        };
        assert_eq!(
            t.render(),
            "   topic  count\n0  crash     12\n1     ui      3"
        );
    }
}

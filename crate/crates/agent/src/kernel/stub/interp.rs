//! Tree-walking evaluator with the sandbox checks of the stub kernel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::parser::{parse, BinOp, CmpOp, Expr, FPart, Stmt, Target};
use super::plugins::{self, split_topics};
use super::value::{Table, Value};
use crate::kernel::{contained_path, Artifact, ArtifactKind, ExecutionResult, DATA_HANDLE};

/// Why evaluation stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    /// A Python-style exception line, e.g. `NameError: name 'x' is not defined`.
    Error(String),
    Violation(String),
    Timeout,
}

type R<T> = Result<T, Flow>;

fn err<T>(msg: impl Into<String>) -> R<T> {
    Err(Flow::Error(msg.into()))
}

const NETWORK_MODULES: &[&str] = &[
    "socket",
    "ssl",
    "requests",
    "urllib",
    "urllib2",
    "urllib3",
    "http",
    "httpx",
    "aiohttp",
    "ftplib",
    "smtplib",
    "telnetlib",
    "poplib",
    "imaplib",
    "xmlrpc",
    "websocket",
    "websockets",
    "paramiko",
    "asyncio",
];
const PROCESS_MODULES: &[&str] = &[
    "subprocess",
    "multiprocessing",
    "ctypes",
    "pty",
    "cffi",
    "signal",
];
const PLAIN_MODULES: &[&str] = &[
    "pandas",
    "numpy",
    "matplotlib",
    "matplotlib.pyplot",
    "seaborn",
    "collections",
    "json",
    "math",
    "re",
    "datetime",
    "os",
    "os.path",
    "sys",
    "pathlib",
    "statistics",
    "itertools",
    "time",
    "string",
    "feedlens",
    "feedlens.plugins",
];
const PROCESS_ATTRS: &[&str] = &[
    "system",
    "popen",
    "fork",
    "forkpty",
    "execv",
    "execve",
    "execl",
    "execlp",
    "execvp",
    "spawnl",
    "spawnv",
    "kill",
    "startfile",
];
const DYNAMIC: &[&str] = &[
    "eval",
    "exec",
    "compile",
    "__import__",
    "globals",
    "locals",
    "getattr",
    "setattr",
    "vars",
];
const BUILTINS: &[&str] = &[
    "print",
    "len",
    "str",
    "int",
    "float",
    "bool",
    "round",
    "abs",
    "sum",
    "min",
    "max",
    "sorted",
    "list",
    "range",
    "repr",
    "open",
    "enumerate",
    "zip",
    "count_by",
    "topic_counts",
    "filter_rows",
    "filter_text",
    "filter_time",
    "sample_texts",
    "mean_by",
    "save_table",
    "save_text",
];

pub struct Interpreter {
    pub env: HashMap<String, Value>,
    pub workspace: PathBuf,
    pub snapshot: PathBuf,
    /// Plugin function names loaded at init.
    pub plugins: BTreeSet<String>,
    pub timeout: Duration,
    pub quota_bytes: u64,
    /// Every artifact in the workspace, in creation order.
    pub artifacts: Vec<Artifact>,
    logs: String,
    touched: Vec<String>,
    deadline: Instant,
}

impl Interpreter {
    pub fn new(
        workspace: PathBuf,
        snapshot: PathBuf,
        plugins: BTreeSet<String>,
        timeout: Duration,
        quota_bytes: u64,
    ) -> Self {
        Self {
            env: HashMap::new(),
            workspace,
            snapshot,
            plugins,
            timeout,
            quota_bytes,
            artifacts: Vec::new(),
            logs: String::new(),
            touched: Vec::new(),
            deadline: Instant::now() + timeout,
        }
    }

    /// Drops every binding and rebinds the data handle.
    pub fn reset_env(&mut self, df: &Table) {
        self.env.clear();
        self.env
            .insert(DATA_HANDLE.into(), Value::Table(df.clone()));
    }

    pub fn run_cell(&mut self, code: &str) -> ExecutionResult {
        self.logs.clear();
        self.touched.clear();
        self.deadline = Instant::now() + self.timeout;
        let program = match parse(code) {
            Ok(p) => p,
            Err(e) => return ExecutionResult::error(String::new(), e),
        };
        let mut last = None;
        for (i, line) in program.iter().enumerate() {
            if Instant::now() > self.deadline {
                return ExecutionResult::timeout(
                    std::mem::take(&mut self.logs),
                    self.timeout.as_secs_f64(),
                );
            }
            match self.exec(&line.stmt) {
                Ok(v) => {
                    if i + 1 == program.len() {
                        last = v;
                    }
                }
                Err(flow) => {
                    let logs = std::mem::take(&mut self.logs);
                    let mut result = match flow {
                        Flow::Error(msg) => ExecutionResult::error(
                            logs,
                            format!("Traceback (most recent call last):\n  File \"<cell>\", line {}\n{msg}", line.line),
                        ),
                        Flow::Violation(what) => ExecutionResult::violation(logs, what),
                        Flow::Timeout => ExecutionResult::timeout(logs, self.timeout.as_secs_f64()),
                    };
                    result.artifacts = self.cell_artifacts();
                    return result;
                }
            }
        }
        let output = match last {
            None | Some(Value::None) => String::new(),
            Some(v) => v.repr(),
        };
        ExecutionResult::ok(
            std::mem::take(&mut self.logs),
            output,
            self.cell_artifacts(),
        )
    }

    fn cell_artifacts(&self) -> Vec<Artifact> {
        self.artifacts
            .iter()
            .filter(|a| self.touched.contains(&a.path))
            .cloned()
            .collect()
    }

    fn exec(&mut self, stmt: &Stmt) -> R<Option<Value>> {
        match stmt {
            Stmt::Expr(e) => self.eval(e).map(Some),
            Stmt::Pass => Ok(None),
            Stmt::Assign(targets, e) => {
                let v = self.eval(e)?;
                for t in targets {
                    self.assign(t, v.clone())?;
                }
                Ok(None)
            }
            Stmt::AugAssign(name, op, e) => {
                let cur = self.lookup(name)?;
                let rhs = self.eval(e)?;
                let v = binop(op, cur, rhs)?;
                self.env.insert(name.clone(), v);
                Ok(None)
            }
            Stmt::Import(items) => {
                for (module, bound) in items {
                    self.check_module(module)?;
                    let value = if bound.as_str() == module.split('.').next().unwrap_or_default()
                        && !module.contains('.')
                    {
                        Value::Module(module.clone())
                    } else if module.starts_with(&format!("{bound}.")) {
                        Value::Module(bound.clone())
                    } else {
                        Value::Module(module.clone())
                    };
                    self.env.insert(bound.clone(), value);
                }
                Ok(None)
            }
            Stmt::FromImport(module, names) => {
                self.check_module(module)?;
                for (name, bound) in names {
                    let v = self.module_attr(module, name).map_err(|f| match f {
                        Flow::Error(_) => Flow::Error(format!(
                            "ImportError: cannot import name '{name}' from '{module}'"
                        )),
                        other => other,
                    })?;
                    self.env.insert(bound.clone(), v);
                }
                Ok(None)
            }
            Stmt::Del(names) => {
                for n in names {
                    if self.env.remove(n).is_none() {
                        return err(format!("NameError: name '{n}' is not defined"));
                    }
                }
                Ok(None)
            }
        }
    }

    fn assign(&mut self, target: &Target, v: Value) -> R<()> {
        match target {
            Target::Name(n) => {
                self.env.insert(n.clone(), v);
                Ok(())
            }
            Target::Unpack(names) => {
                let items = match v {
                    Value::List(i) | Value::Tuple(i) => i,
                    other => {
                        return err(format!(
                            "TypeError: cannot unpack non-iterable {} object",
                            other.type_name()
                        ))
                    }
                };
                if items.len() != names.len() {
                    return err(format!(
                        "ValueError: expected {} values to unpack, got {}",
                        names.len(),
                        items.len()
                    ));
                }
                for (n, i) in names.iter().zip(items) {
                    self.env.insert(n.clone(), i);
                }
                Ok(())
            }
            Target::Index(obj, idx) => {
                let Expr::Name(name) = obj else {
                    return err("TypeError: only names can be index-assigned in this kernel");
                };
                let key = self.eval(idx)?;
                let mut container = self.lookup(name)?;
                match &mut container {
                    Value::List(items) => {
                        let i = norm_index(&key, items.len())?;
                        items[i] = v;
                    }
                    Value::Dict(pairs) => match pairs.iter_mut().find(|(k, _)| k.py_eq(&key)) {
                        Some(slot) => slot.1 = v,
                        None => pairs.push((key, v)),
                    },
                    Value::Table(t) => {
                        let Value::Str(col) = key else {
                            return err("KeyError: column names must be strings");
                        };
                        let values = match v {
                            Value::List(vals) => {
                                if vals.len() != t.rows.len() {
                                    return err(format!(
                                        "ValueError: Length of values ({}) does not match length of index ({})",
                                        vals.len(),
                                        t.rows.len()
                                    ));
                                }
                                vals
                            }
                            scalar => vec![scalar; t.rows.len()],
                        };
                        let ci = match t.column_index(&col) {
                            Some(i) => i,
                            None => {
                                t.columns.push(col);
                                for r in &mut t.rows {
                                    r.push(Value::None);
                                }
                                t.columns.len() - 1
                            }
                        };
                        for (r, val) in t.rows.iter_mut().zip(values) {
                            r[ci] = val;
                        }
                    }
                    other => {
                        return err(format!(
                            "TypeError: '{}' object does not support item assignment",
                            other.type_name()
                        ))
                    }
                }
                self.env.insert(name.clone(), container);
                Ok(())
            }
        }
    }

    fn lookup(&self, name: &str) -> R<Value> {
        if let Some(v) = self.env.get(name) {
            return Ok(v.clone());
        }
        if DYNAMIC.contains(&name) {
            return Err(Flow::Violation(format!(
                "DynamicExecution: '{name}' is not available in the sandbox"
            )));
        }
        if BUILTINS.contains(&name) || self.plugins.contains(name) {
            return Ok(Value::Function(name.into()));
        }
        err(format!("NameError: name '{name}' is not defined"))
    }

    fn check_module(&self, module: &str) -> R<()> {
        let root = module.split('.').next().unwrap_or_default();
        if NETWORK_MODULES.contains(&root) {
            return Err(Flow::Violation(format!(
                "NetworkAccess: import of '{module}' is blocked"
            )));
        }
        if PROCESS_MODULES.contains(&root) {
            return Err(Flow::Violation(format!(
                "ProcessSpawn: import of '{module}' is blocked"
            )));
        }
        if PLAIN_MODULES.contains(&module)
            || plugins::BUILTIN_PLUGINS
                .iter()
                .any(|(n, m)| *m == module && self.plugins.contains(*n))
        {
            return Ok(());
        }
        err(format!("ModuleNotFoundError: No module named '{module}'"))
    }

    fn module_attr(&self, module: &str, name: &str) -> R<Value> {
        let f = |s: &str| Ok(Value::Function(s.to_string()));
        match (module, name) {
            ("os", n) if PROCESS_ATTRS.contains(&n) => Err(Flow::Violation(format!(
                "ProcessSpawn: os.{n} is not available in the sandbox"
            ))),
            ("os", "path") => Ok(Value::Module("os.path".into())),
            ("os", "remove" | "unlink") => f("os.remove"),
            ("os", "makedirs" | "mkdir") => f("os.makedirs"),
            ("os", "listdir") => f("os.listdir"),
            ("os.path", "join") => f("os.path.join"),
            ("os.path", "exists") => f("os.path.exists"),
            ("os.path", "basename") => f("os.path.basename"),
            ("math", "pi") => Ok(Value::Float(std::f64::consts::PI)),
            ("math", "e") => Ok(Value::Float(std::f64::consts::E)),
            ("math", "sqrt" | "log" | "exp" | "floor" | "ceil") => f(&format!("math.{name}")),
            ("time", "sleep") => f("time.sleep"),
            ("json", "dumps") => f("json.dumps"),
            ("pandas", "read_csv") => f("pandas.read_csv"),
            ("matplotlib", "pyplot") => Ok(Value::Module("matplotlib.pyplot".into())),
            ("feedlens", "plugins") => Ok(Value::Module("feedlens.plugins".into())),
            ("feedlens.plugins", n) if self.plugins.contains(n) => f(n),
            (m, n)
                if plugins::BUILTIN_PLUGINS
                    .iter()
                    .any(|(p, pm)| *pm == m && *p == n)
                    && self.plugins.contains(n) =>
            {
                f(n)
            }
            _ => err(format!(
                "AttributeError: module '{module}' has no attribute '{name}'"
            )),
        }
    }

    fn eval(&mut self, e: &Expr) -> R<Value> {
        match e {
            Expr::None => Ok(Value::None),
            Expr::Bool(b) => Ok(Value::Bool(*b)),
            Expr::Int(i) => Ok(Value::Int(*i)),
            Expr::Float(f) => Ok(Value::Float(*f)),
            Expr::Str(s) => Ok(Value::Str(s.clone())),
            Expr::FStr(parts) => {
                let mut out = String::new();
                for p in parts {
                    match p {
                        FPart::Lit(s) => out.push_str(s),
                        FPart::Expr(e, spec) => {
                            let v = self.eval(e)?;
                            out.push_str(&format_value(&v, spec.as_deref().unwrap_or(""))?);
                        }
                    }
                }
                Ok(Value::Str(out))
            }
            Expr::Name(n) => self.lookup(n),
            Expr::List(items) => Ok(Value::List(self.eval_all(items)?)),
            Expr::Tuple(items) => Ok(Value::Tuple(self.eval_all(items)?)),
            Expr::Dict(pairs) => {
                let mut out: Vec<(Value, Value)> = Vec::new();
                for (k, v) in pairs {
                    let k = self.eval(k)?;
                    let v = self.eval(v)?;
                    match out.iter_mut().find(|(ek, _)| ek.py_eq(&k)) {
                        Some(slot) => slot.1 = v,
                        None => out.push((k, v)),
                    }
                }
                Ok(Value::Dict(out))
            }
            Expr::Neg(inner) => match self.eval(inner)? {
                Value::Int(i) => Ok(Value::Int(-i)),
                Value::Float(f) => Ok(Value::Float(-f)),
                Value::Bool(b) => Ok(Value::Int(-(b as i64))),
                other => err(format!(
                    "TypeError: bad operand type for unary -: '{}'",
                    other.type_name()
                )),
            },
            Expr::Not(inner) => Ok(Value::Bool(!self.eval(inner)?.truthy())),
            Expr::And(a, b) => {
                let l = self.eval(a)?;
                if l.truthy() {
                    self.eval(b)
                } else {
                    Ok(l)
                }
            }
            Expr::Or(a, b) => {
                let l = self.eval(a)?;
                if l.truthy() {
                    Ok(l)
                } else {
                    self.eval(b)
                }
            }
            Expr::IfElse(cond, yes, no) => {
                if self.eval(cond)?.truthy() {
                    self.eval(yes)
                } else {
                    self.eval(no)
                }
            }
            Expr::Bin(op, a, b) => {
                let l = self.eval(a)?;
                let r = self.eval(b)?;
                binop(op, l, r)
            }
            Expr::Cmp(op, a, b) => {
                let l = self.eval(a)?;
                let r = self.eval(b)?;
                compare(op, &l, &r).map(Value::Bool)
            }
            Expr::Attr(obj, name) => {
                let v = self.eval(obj)?;
                self.attribute(v, name)
            }
            Expr::Index(obj, idx) => {
                let v = self.eval(obj)?;
                if let Expr::Slice(a, b) = idx.as_ref() {
                    let a = a.as_ref().map(|a| self.eval(a)).transpose()?;
                    let b = b.as_ref().map(|b| self.eval(b)).transpose()?;
                    return slice(v, a, b);
                }
                let k = self.eval(idx)?;
                index(v, k)
            }
            Expr::Slice(..) => err("SyntaxError: slice outside of subscript"),
            Expr::Call { func, args, kwargs } => {
                let args = self.eval_all(args)?;
                let mut kw = Vec::with_capacity(kwargs.len());
                for (k, v) in kwargs {
                    kw.push((k.clone(), self.eval(v)?));
                }
                if let Expr::Attr(obj, method) = func.as_ref() {
                    let recv = self.eval(obj)?;
                    if let Value::Module(m) = &recv {
                        let m = m.clone();
                        let f = self.module_attr(&m, method)?;
                        return self.call(f, args, kw);
                    }
                    let (result, updated) = self.call_method(recv, method, args, kw)?;
                    if let (Some(new), Expr::Name(n)) = (updated, obj.as_ref()) {
                        self.env.insert(n.clone(), new);
                    }
                    return Ok(result);
                }
                let f = self.eval(func)?;
                self.call(f, args, kw)
            }
        }
    }

    fn eval_all(&mut self, items: &[Expr]) -> R<Vec<Value>> {
        items.iter().map(|i| self.eval(i)).collect()
    }

    fn attribute(&self, v: Value, name: &str) -> R<Value> {
        match (&v, name) {
            (Value::Module(m), _) => self.module_attr(m, name),
            (Value::Table(t), "columns") => Ok(Value::List(
                t.columns.iter().cloned().map(Value::Str).collect(),
            )),
            (Value::Table(t), "shape") => Ok(Value::Tuple(vec![
                Value::Int(t.rows.len() as i64),
                Value::Int(t.columns.len() as i64),
            ])),
            (Value::Table(t), col) if t.column_index(col).is_some() => {
                Ok(Value::List(t.column(col).unwrap_or_default()))
            }
            _ => err(format!(
                "AttributeError: '{}' object has no attribute '{name}'",
                v.type_name()
            )),
        }
    }

    // ---- writes and paths ----

    fn workspace_path(&self, path: &str, action: &str) -> R<PathBuf> {
        contained_path(&self.workspace, path).ok_or_else(|| {
            Flow::Violation(format!(
                "FilesystemEscape: {action} '{path}' outside the workspace"
            ))
        })
    }

    fn readable_path(&self, path: &str) -> R<PathBuf> {
        if Path::new(path) == self.snapshot {
            return Ok(self.snapshot.clone());
        }
        self.workspace_path(path, "read of")
    }

    fn workspace_usage(&self) -> u64 {
        fn walk(p: &Path) -> u64 {
            std::fs::read_dir(p)
                .map(|rd| {
                    rd.flatten()
                        .map(|e| match e.metadata() {
                            Ok(m) if m.is_dir() => walk(&e.path()),
                            Ok(m) => m.len(),
                            Err(_) => 0,
                        })
                        .sum()
                })
                .unwrap_or(0)
        }
        walk(&self.workspace)
    }

    fn relative(&self, abs: &Path) -> String {
        abs.strip_prefix(&self.workspace)
            .unwrap_or(abs)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn record_artifact(&mut self, abs: &Path, caption: Option<String>) {
        let rel = self.relative(abs);
        let artifact = Artifact {
            kind: ArtifactKind::from_path(&rel),
            path: rel.clone(),
            url: None,
            caption,
        };
        match self.artifacts.iter_mut().find(|a| a.path == rel) {
            Some(slot) => *slot = artifact,
            None => self.artifacts.push(artifact),
        }
        if !self.touched.contains(&rel) {
            self.touched.push(rel);
        }
    }

    /// Writes (or appends) under the workspace, enforcing the quota.
    fn write_file(
        &mut self,
        path: &str,
        bytes: &[u8],
        append: bool,
        caption: Option<String>,
    ) -> R<PathBuf> {
        let abs = self.workspace_path(path, "write to")?;
        let existing = std::fs::metadata(&abs).map(|m| m.len()).unwrap_or(0);
        let after = self.workspace_usage() + bytes.len() as u64 - if append { 0 } else { existing };
        if after > self.quota_bytes {
            return err("OSError: [Errno 122] Disk quota exceeded");
        }
        if let Some(parent) = abs.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Flow::Error(format!("OSError: {e}")))?;
        }
        let res = if append {
            use std::io::Write;
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&abs)
                .and_then(|mut f| f.write_all(bytes))
        } else {
            std::fs::write(&abs, bytes)
        };
        res.map_err(|e| Flow::Error(format!("OSError: {e}")))?;
        self.record_artifact(&abs, caption);
        Ok(abs)
    }

    // ---- calls ----

    fn call(&mut self, f: Value, args: Vec<Value>, kw: Vec<(String, Value)>) -> R<Value> {
        let Value::Function(name) = f else {
            return err(format!(
                "TypeError: '{}' object is not callable",
                f.type_name()
            ));
        };
        match name.as_str() {
            "print" => {
                let a = Args::new("print", args, kw, &["sep", "end"], true)?;
                let sep = a.kw_str("sep")?.unwrap_or_else(|| " ".into());
                let end = a.kw_str("end")?.unwrap_or_else(|| "\n".into());
                let line = a
                    .rest
                    .iter()
                    .map(Value::to_str)
                    .collect::<Vec<_>>()
                    .join(&sep);
                self.logs.push_str(&line);
                self.logs.push_str(&end);
                Ok(Value::None)
            }
            "len" => {
                let a = Args::new("len", args, kw, &["obj"], false)?;
                match a.req(0)? {
                    Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
                    Value::List(v) | Value::Tuple(v) => Ok(Value::Int(v.len() as i64)),
                    Value::Dict(d) => Ok(Value::Int(d.len() as i64)),
                    Value::Table(t) => Ok(Value::Int(t.rows.len() as i64)),
                    other => err(format!(
                        "TypeError: object of type '{}' has no len()",
                        other.type_name()
                    )),
                }
            }
            "str" => {
                let a = Args::new("str", args, kw, &["object"], false)?;
                Ok(Value::Str(a.opt(0).map(|v| v.to_str()).unwrap_or_default()))
            }
            "repr" => {
                let a = Args::new("repr", args, kw, &["object"], false)?;
                Ok(Value::Str(a.req(0)?.repr()))
            }
            "int" => {
                let a = Args::new("int", args, kw, &["x"], false)?;
                match a.opt(0).unwrap_or(Value::Int(0)) {
                    Value::Int(i) => Ok(Value::Int(i)),
                    Value::Bool(b) => Ok(Value::Int(b as i64)),
                    Value::Float(f) => Ok(Value::Int(f.trunc() as i64)),
                    Value::Str(s) => s.trim().parse().map(Value::Int).or_else(|_| {
                        err(format!(
                            "ValueError: invalid literal for int() with base 10: {}",
                            Value::Str(s.clone()).repr()
                        ))
                    }),
                    other => err(format!(
                        "TypeError: int() argument must be a string or a number, not '{}'",
                        other.type_name()
                    )),
                }
            }
            "float" => {
                let a = Args::new("float", args, kw, &["x"], false)?;
                match a.opt(0).unwrap_or(Value::Float(0.0)) {
                    Value::Str(s) => s.trim().parse().map(Value::Float).or_else(|_| {
                        err(format!(
                            "ValueError: could not convert string to float: {}",
                            Value::Str(s.clone()).repr()
                        ))
                    }),
                    v => v.as_f64().map(Value::Float).ok_or_else(|| {
                        Flow::Error(format!(
                            "TypeError: float() argument must be a string or a number, not '{}'",
                            v.type_name()
                        ))
                    }),
                }
            }
            "bool" => {
                let a = Args::new("bool", args, kw, &["x"], false)?;
                Ok(Value::Bool(a.opt(0).is_some_and(|v| v.truthy())))
            }
            "abs" => {
                let a = Args::new("abs", args, kw, &["x"], false)?;
                match a.req(0)? {
                    Value::Int(i) => Ok(Value::Int(i.abs())),
                    Value::Float(f) => Ok(Value::Float(f.abs())),
                    other => err(format!(
                        "TypeError: bad operand type for abs(): '{}'",
                        other.type_name()
                    )),
                }
            }
            "round" => {
                let a = Args::new("round", args, kw, &["number", "ndigits"], false)?;
                let x = a.req(0)?;
                let nd = a.opt(1).filter(|v| *v != Value::None);
                let f = x.as_f64().ok_or_else(|| {
                    Flow::Error(format!(
                        "TypeError: type {} doesn't define __round__",
                        x.type_name()
                    ))
                })?;
                match nd {
                    None => Ok(Value::Int(round_half_even(f) as i64)),
                    Some(n) => {
                        let n = as_int(&n)?;
                        let p = 10f64.powi(n as i32);
                        Ok(Value::Float(round_half_even(f * p) / p))
                    }
                }
            }
            "sum" => {
                let a = Args::new("sum", args, kw, &["iterable", "start"], false)?;
                let mut acc = a.opt(1).unwrap_or(Value::Int(0));
                for v in iterate(a.req(0)?)? {
                    acc = binop(&BinOp::Add, acc, v)?;
                }
                Ok(acc)
            }
            "min" | "max" => {
                let a = Args::new(&name, args, kw, &[], true)?;
                let items = if a.rest.len() == 1 {
                    iterate(a.rest[0].clone())?
                } else {
                    a.rest.clone()
                };
                let mut best: Option<Value> = None;
                for v in items {
                    best = Some(match best {
                        None => v,
                        Some(b) => {
                            let ord = v.py_cmp(&b).ok_or_else(|| {
                                Flow::Error(format!("TypeError: '<' not supported between instances of '{}' and '{}'", v.type_name(), b.type_name()))
                            })?;
                            let better = if name == "min" {
                                ord.is_lt()
                            } else {
                                ord.is_gt()
                            };
                            if better {
                                v
                            } else {
                                b
                            }
                        }
                    });
                }
                best.ok_or_else(|| {
                    Flow::Error(format!("ValueError: {name}() arg is an empty sequence"))
                })
            }
            "sorted" => {
                let a = Args::new("sorted", args, kw, &["iterable", "reverse"], false)?;
                let mut items = iterate(a.req(0)?)?;
                sort_values(&mut items)?;
                if a.opt(1).is_some_and(|v| v.truthy()) {
                    items.reverse();
                }
                Ok(Value::List(items))
            }
            "list" => {
                let a = Args::new("list", args, kw, &["iterable"], false)?;
                Ok(Value::List(match a.opt(0) {
                    Some(v) => iterate(v)?,
                    None => Vec::new(),
                }))
            }
            "range" => {
                let a = Args::new("range", args, kw, &["start", "stop"], false)?;
                let (lo, hi) = match a.opt(1) {
                    Some(stop) => (as_int(&a.req(0)?)?, as_int(&stop)?),
                    None => (0, as_int(&a.req(0)?)?),
                };
                if hi - lo > 1_000_000 {
                    return err("MemoryError: range too large for this kernel");
                }
                Ok(Value::List((lo..hi).map(Value::Int).collect()))
            }
            "enumerate" => {
                let a = Args::new("enumerate", args, kw, &["iterable"], false)?;
                Ok(Value::List(
                    iterate(a.req(0)?)?
                        .into_iter()
                        .enumerate()
                        .map(|(i, v)| Value::Tuple(vec![Value::Int(i as i64), v]))
                        .collect(),
                ))
            }
            "zip" => {
                let a = Args::new("zip", args, kw, &[], true)?;
                let lists: Vec<Vec<Value>> =
                    a.rest.iter().cloned().map(iterate).collect::<R<_>>()?;
                let n = lists.iter().map(Vec::len).min().unwrap_or(0);
                Ok(Value::List(
                    (0..n)
                        .map(|i| Value::Tuple(lists.iter().map(|l| l[i].clone()).collect()))
                        .collect(),
                ))
            }
            "open" => {
                let a = Args::new("open", args, kw, &["file", "mode", "encoding"], false)?;
                let path = as_str(&a.req(0)?)?;
                let mode = a
                    .opt(1)
                    .map(|m| as_str(&m))
                    .transpose()?
                    .unwrap_or_else(|| "r".into());
                if mode.contains(['w', 'a', 'x', '+']) {
                    let abs = self.workspace_path(&path, "write to")?;
                    if mode.contains('w') || !abs.exists() {
                        self.write_file(&path, b"", false, None)?;
                    }
                    Ok(Value::File(abs))
                } else {
                    let abs = self.readable_path(&path)?;
                    if !abs.exists() {
                        return err(format!(
                            "FileNotFoundError: [Errno 2] No such file or directory: '{path}'"
                        ));
                    }
                    Ok(Value::File(abs))
                }
            }
            "count_by" => {
                let a = Args::new("count_by", args, kw, &["table", "column", "top_n"], false)?;
                let t = as_table(&a.req(0)?)?;
                let col = as_str(&a.req(1)?)?;
                count_by(&t, &col, opt_usize(a.opt(2))?)
            }
            "topic_counts" => {
                let a = Args::new("topic_counts", args, kw, &["table", "top_n"], false)?;
                count_by(&as_table(&a.req(0)?)?, "topics", opt_usize(a.opt(1))?)
            }
            "filter_rows" => {
                let a = Args::new(
                    "filter_rows",
                    args,
                    kw,
                    &["table", "column", "value"],
                    false,
                )?;
                let t = as_table(&a.req(0)?)?;
                let col = as_str(&a.req(1)?)?;
                let want = a.req(2)?.to_str();
                let ci = t
                    .column_index(&col)
                    .ok_or_else(|| Flow::Error(format!("KeyError: '{col}'")))?;
                let want = want.trim().to_lowercase();
                Ok(Value::Table(t.select_rows(|r| {
                    if col == "topics" {
                        split_topics(&r[ci])
                            .iter()
                            .any(|x| x.to_lowercase() == want)
                    } else {
                        r[ci].to_str().trim().to_lowercase() == want
                    }
                })))
            }
            "filter_text" => {
                let a = Args::new(
                    "filter_text",
                    args,
                    kw,
                    &["table", "keyword", "column"],
                    false,
                )?;
                let t = as_table(&a.req(0)?)?;
                let needle = as_str(&a.req(1)?)?.to_lowercase();
                let col = a
                    .opt(2)
                    .map(|c| as_str(&c))
                    .transpose()?
                    .unwrap_or_else(|| "text".into());
                let ci = t
                    .column_index(&col)
                    .ok_or_else(|| Flow::Error(format!("KeyError: '{col}'")))?;
                Ok(Value::Table(t.select_rows(|r| {
                    r[ci].to_str().to_lowercase().contains(&needle)
                })))
            }
            "filter_time" => {
                let a = Args::new(
                    "filter_time",
                    args,
                    kw,
                    &["table", "start", "end", "column"],
                    false,
                )?;
                let t = as_table(&a.req(0)?)?;
                let start = a
                    .opt(1)
                    .filter(|v| *v != Value::None)
                    .map(|v| as_str(&v))
                    .transpose()?;
                let end = a
                    .opt(2)
                    .filter(|v| *v != Value::None)
                    .map(|v| as_str(&v))
                    .transpose()?;
                let col = a
                    .opt(3)
                    .map(|c| as_str(&c))
                    .transpose()?
                    .unwrap_or_else(|| "timestamp".into());
                let ci = t
                    .column_index(&col)
                    .ok_or_else(|| Flow::Error(format!("KeyError: '{col}'")))?;
                // ISO-8601 strings order lexicographically
                Ok(Value::Table(t.select_rows(|r| {
                    let ts = r[ci].to_str();
                    start.as_ref().is_none_or(|s| ts.as_str() >= s.as_str())
                        && end.as_ref().is_none_or(|e| ts.as_str() < e.as_str())
                })))
            }
            "sample_texts" => {
                let a = Args::new("sample_texts", args, kw, &["table", "n", "column"], false)?;
                let t = as_table(&a.req(0)?)?;
                let n = opt_usize(a.opt(1))?.unwrap_or(5);
                let col = a
                    .opt(2)
                    .map(|c| as_str(&c))
                    .transpose()?
                    .unwrap_or_else(|| "text".into());
                let values = t
                    .column(&col)
                    .ok_or_else(|| Flow::Error(format!("KeyError: '{col}'")))?;
                Ok(Value::List(
                    values
                        .into_iter()
                        .take(n)
                        .map(|v| Value::Str(v.to_str()))
                        .collect(),
                ))
            }
            "mean_by" => {
                let a = Args::new("mean_by", args, kw, &["table", "group", "value"], false)?;
                let t = as_table(&a.req(0)?)?;
                mean_by(&t, &as_str(&a.req(1)?)?, &as_str(&a.req(2)?)?)
            }
            "save_table" => {
                let a = Args::new("save_table", args, kw, &["table", "path", "caption"], false)?;
                let t = as_table(&a.req(0)?)?;
                let path = as_str(&a.req(1)?)?;
                let caption = a.opt(2).map(|c| as_str(&c)).transpose()?;
                let csv = t
                    .to_csv()
                    .map_err(|e| Flow::Error(format!("OSError: {e}")))?;
                self.write_file(&path, csv.as_bytes(), false, caption)?;
                Ok(Value::None)
            }
            "save_text" => {
                let a = Args::new("save_text", args, kw, &["text", "path", "caption"], false)?;
                let text = a.req(0)?.to_str();
                let path = as_str(&a.req(1)?)?;
                let caption = a.opt(2).map(|c| as_str(&c)).transpose()?;
                self.write_file(&path, text.as_bytes(), false, caption)?;
                Ok(Value::None)
            }
            "issue_river" => {
                let a = Args::new(
                    "issue_river",
                    args,
                    kw,
                    &[
                        "table",
                        "topic_column",
                        "time_column",
                        "top_n",
                        "bucket",
                        "path",
                    ],
                    false,
                )?;
                let t = as_table(&a.req(0)?)?;
                let topic_col = a
                    .opt(1)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "topics".into());
                let time_col = a
                    .opt(2)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "timestamp".into());
                let top_n = opt_usize(a.opt(3))?.unwrap_or(7);
                let bucket = a
                    .opt(4)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "day".into());
                let path = a
                    .opt(5)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "issue_river.svg".into());
                let river = plugins::issue_river(&t, &topic_col, &time_col, top_n, &bucket)
                    .map_err(Flow::Error)?;
                let caption = format!(
                    "Issue river of the top {} topics per {bucket}",
                    river.topics.len()
                );
                self.write_file(&path, river.svg.as_bytes(), false, Some(caption))?;
                self.logs.push_str(&format!(
                    "issue_river: {} topics over {} periods -> {path}\n",
                    river.topics.len(),
                    river.periods.len()
                ));
                Ok(Value::None)
            }
            "word_cloud" => {
                let a = Args::new(
                    "word_cloud",
                    args,
                    kw,
                    &["table", "text_column", "top_n", "path"],
                    false,
                )?;
                let t = as_table(&a.req(0)?)?;
                let col = a
                    .opt(1)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "text".into());
                let top_n = opt_usize(a.opt(2))?.unwrap_or(40);
                let path = a
                    .opt(3)
                    .map(|v| as_str(&v))
                    .transpose()?
                    .unwrap_or_else(|| "word_cloud.svg".into());
                let (svg, words) = plugins::word_cloud(&t, &col, top_n).map_err(Flow::Error)?;
                self.write_file(
                    &path,
                    svg.as_bytes(),
                    false,
                    Some(format!("Word cloud of the top {} words", words.len())),
                )?;
                self.logs
                    .push_str(&format!("word_cloud: {} words -> {path}\n", words.len()));
                Ok(Value::None)
            }
            "os.remove" => {
                let a = Args::new("remove", args, kw, &["path"], false)?;
                let path = as_str(&a.req(0)?)?;
                let abs = self.workspace_path(&path, "removal of")?;
                std::fs::remove_file(&abs).map_err(|_| {
                    Flow::Error(format!(
                        "FileNotFoundError: [Errno 2] No such file or directory: '{path}'"
                    ))
                })?;
                let rel = self.relative(&abs);
                self.artifacts.retain(|a| a.path != rel);
                Ok(Value::None)
            }
            "os.makedirs" => {
                let a = Args::new("makedirs", args, kw, &["name", "exist_ok"], false)?;
                let path = as_str(&a.req(0)?)?;
                let abs = self.workspace_path(&path, "directory creation at")?;
                std::fs::create_dir_all(abs).map_err(|e| Flow::Error(format!("OSError: {e}")))?;
                Ok(Value::None)
            }
            "os.listdir" => {
                let a = Args::new("listdir", args, kw, &["path"], false)?;
                let path = a
                    .opt(0)
                    .map(|p| as_str(&p))
                    .transpose()?
                    .unwrap_or_else(|| ".".into());
                let abs = if path == "." {
                    self.workspace.clone()
                } else {
                    self.workspace_path(&path, "listing of")?
                };
                let mut names: Vec<String> = std::fs::read_dir(&abs)
                    .map_err(|_| {
                        Flow::Error(format!(
                            "FileNotFoundError: [Errno 2] No such file or directory: '{path}'"
                        ))
                    })?
                    .flatten()
                    .map(|e| e.file_name().to_string_lossy().into_owned())
                    .collect();
                names.sort();
                Ok(Value::List(names.into_iter().map(Value::Str).collect()))
            }
            "os.path.join" => {
                let a = Args::new("join", args, kw, &[], true)?;
                let parts: Vec<String> = a.rest.iter().map(as_str).collect::<R<_>>()?;
                Ok(Value::Str(parts.join("/")))
            }
            "os.path.basename" => {
                let a = Args::new("basename", args, kw, &["p"], false)?;
                let p = as_str(&a.req(0)?)?;
                Ok(Value::Str(
                    p.rsplit('/').next().unwrap_or_default().to_string(),
                ))
            }
            "os.path.exists" => {
                let a = Args::new("exists", args, kw, &["path"], false)?;
                let p = as_str(&a.req(0)?)?;
                Ok(Value::Bool(
                    contained_path(&self.workspace, &p).is_some_and(|abs| abs.exists()),
                ))
            }
            "math.sqrt" | "math.log" | "math.exp" | "math.floor" | "math.ceil" => {
                let a = Args::new(&name, args, kw, &["x"], false)?;
                let x = a.req(0)?;
                let f = x.as_f64().ok_or_else(|| {
                    Flow::Error(format!(
                        "TypeError: must be real number, not {}",
                        x.type_name()
                    ))
                })?;
                match name.as_str() {
                    "math.sqrt" if f < 0.0 => err("ValueError: math domain error"),
                    "math.log" if f <= 0.0 => err("ValueError: math domain error"),
                    "math.sqrt" => Ok(Value::Float(f.sqrt())),
                    "math.log" => Ok(Value::Float(f.ln())),
                    "math.exp" => Ok(Value::Float(f.exp())),
                    "math.floor" => Ok(Value::Int(f.floor() as i64)),
                    _ => Ok(Value::Int(f.ceil() as i64)),
                }
            }
            "time.sleep" => {
                let a = Args::new("sleep", args, kw, &["secs"], false)?;
                let secs = a.req(0)?.as_f64().ok_or_else(|| {
                    Flow::Error("TypeError: an integer or float is required".into())
                })?;
                let want = Duration::from_secs_f64(secs.max(0.0));
                let left = self.deadline.saturating_duration_since(Instant::now());
                if want > left {
                    std::thread::sleep(left);
                    return Err(Flow::Timeout);
                }
                std::thread::sleep(want);
                Ok(Value::None)
            }
            "json.dumps" => {
                let a = Args::new("dumps", args, kw, &["obj"], false)?;
                Ok(Value::Str(to_json(&a.req(0)?)?.to_string()))
            }
            "pandas.read_csv" => {
                let a = Args::new("read_csv", args, kw, &["filepath"], false)?;
                let path = as_str(&a.req(0)?)?;
                let abs = self.readable_path(&path)?;
                let text = std::fs::read_to_string(&abs).map_err(|_| {
                    Flow::Error(format!(
                        "FileNotFoundError: [Errno 2] No such file or directory: '{path}'"
                    ))
                })?;
                load_csv(&text)
                    .map(Value::Table)
                    .map_err(|e| Flow::Error(format!("ParserError: {e}")))
            }
            other => err(format!("NameError: name '{other}' is not defined")),
        }
    }

    fn call_method(
        &mut self,
        recv: Value,
        m: &str,
        args: Vec<Value>,
        kw: Vec<(String, Value)>,
    ) -> R<(Value, Option<Value>)> {
        let no_update = |v: Value| Ok((v, None));
        match recv {
            Value::Str(s) => {
                let a = Args::new(m, args, kw, &["a", "b"], true)?;
                match m {
                    "upper" => no_update(Value::Str(s.to_uppercase())),
                    "lower" => no_update(Value::Str(s.to_lowercase())),
                    "strip" => no_update(Value::Str(s.trim().into())),
                    "lstrip" => no_update(Value::Str(s.trim_start().into())),
                    "rstrip" => no_update(Value::Str(s.trim_end().into())),
                    "title" => no_update(Value::Str(title_case(&s))),
                    "split" => {
                        let parts: Vec<Value> = match a.opt(0).filter(|v| *v != Value::None) {
                            None => s.split_whitespace().map(|p| Value::Str(p.into())).collect(),
                            Some(sep) => s
                                .split(as_str(&sep)?.as_str())
                                .map(|p| Value::Str(p.into()))
                                .collect(),
                        };
                        no_update(Value::List(parts))
                    }
                    "join" => {
                        let items = iterate(a.req(0)?)?;
                        let strs: Vec<String> = items.iter().map(as_str).collect::<R<_>>()?;
                        no_update(Value::Str(strs.join(&s)))
                    }
                    "replace" => no_update(Value::Str(
                        s.replace(as_str(&a.req(0)?)?.as_str(), &as_str(&a.req(1)?)?),
                    )),
                    "startswith" => {
                        no_update(Value::Bool(s.starts_with(as_str(&a.req(0)?)?.as_str())))
                    }
                    "endswith" => no_update(Value::Bool(s.ends_with(as_str(&a.req(0)?)?.as_str()))),
                    "count" => no_update(Value::Int(
                        s.matches(as_str(&a.req(0)?)?.as_str()).count() as i64,
                    )),
                    "find" => {
                        let needle = as_str(&a.req(0)?)?;
                        no_update(Value::Int(
                            s.find(&needle)
                                .map(|b| s[..b].chars().count() as i64)
                                .unwrap_or(-1),
                        ))
                    }
                    "format" => no_update(Value::Str(str_format(&s, &a.rest, &a.kwargs)?)),
                    _ => err(format!(
                        "AttributeError: 'str' object has no attribute '{m}'"
                    )),
                }
            }
            Value::List(mut items) => {
                let a = Args::new(m, args, kw, &["x"], false)?;
                match m {
                    "append" => {
                        items.push(a.req(0)?);
                        Ok((Value::None, Some(Value::List(items))))
                    }
                    "extend" => {
                        items.extend(iterate(a.req(0)?)?);
                        Ok((Value::None, Some(Value::List(items))))
                    }
                    "pop" => {
                        let i = match a.opt(0) {
                            Some(k) => norm_index(&k, items.len())?,
                            None if items.is_empty() => {
                                return err("IndexError: pop from empty list")
                            }
                            None => items.len() - 1,
                        };
                        let v = items.remove(i);
                        Ok((v, Some(Value::List(items))))
                    }
                    "sort" => {
                        sort_values(&mut items)?;
                        Ok((Value::None, Some(Value::List(items))))
                    }
                    "count" => {
                        let x = a.req(0)?;
                        no_update(Value::Int(
                            items.iter().filter(|v| v.py_eq(&x)).count() as i64
                        ))
                    }
                    "index" => {
                        let x = a.req(0)?;
                        match items.iter().position(|v| v.py_eq(&x)) {
                            Some(i) => no_update(Value::Int(i as i64)),
                            None => err(format!("ValueError: {} is not in list", x.repr())),
                        }
                    }
                    "copy" => no_update(Value::List(items)),
                    _ => err(format!(
                        "AttributeError: 'list' object has no attribute '{m}'"
                    )),
                }
            }
            Value::Dict(pairs) => {
                let a = Args::new(m, args, kw, &["key", "default"], false)?;
                match m {
                    "keys" => no_update(Value::List(pairs.into_iter().map(|(k, _)| k).collect())),
                    "values" => no_update(Value::List(pairs.into_iter().map(|(_, v)| v).collect())),
                    "items" => no_update(Value::List(
                        pairs
                            .into_iter()
                            .map(|(k, v)| Value::Tuple(vec![k, v]))
                            .collect(),
                    )),
                    "get" => {
                        let k = a.req(0)?;
                        let found = pairs
                            .into_iter()
                            .find(|(pk, _)| pk.py_eq(&k))
                            .map(|(_, v)| v);
                        no_update(found.unwrap_or_else(|| a.opt(1).unwrap_or(Value::None)))
                    }
                    _ => err(format!(
                        "AttributeError: 'dict' object has no attribute '{m}'"
                    )),
                }
            }
            Value::Table(t) => match m {
                "head" | "tail" => {
                    let a = Args::new(m, args, kw, &["n"], false)?;
                    let n = opt_usize(a.opt(0))?.unwrap_or(5).min(t.rows.len());
                    let rows = if m == "head" {
                        t.rows[..n].to_vec()
                    } else {
                        t.rows[t.rows.len() - n..].to_vec()
                    };
                    no_update(Value::Table(Table {
                        columns: t.columns.clone(),
                        rows,
                    }))
                }
                "sort_values" => {
                    let a = Args::new(m, args, kw, &["by", "ascending"], false)?;
                    let by = as_str(&a.req(0)?)?;
                    let ci = t
                        .column_index(&by)
                        .ok_or_else(|| Flow::Error(format!("KeyError: '{by}'")))?;
                    let asc = a.opt(1).is_none_or(|v| v.truthy());
                    let mut rows = t.rows.clone();
                    rows.sort_by(|x, y| {
                        let o = x[ci].py_cmp(&y[ci]).unwrap_or(std::cmp::Ordering::Equal);
                        if asc {
                            o
                        } else {
                            o.reverse()
                        }
                    });
                    no_update(Value::Table(Table {
                        columns: t.columns.clone(),
                        rows,
                    }))
                }
                "to_csv" => {
                    let a = Args::new(m, args, kw, &["path", "index"], false)?;
                    let path = as_str(&a.req(0)?)?;
                    let csv = t
                        .to_csv()
                        .map_err(|e| Flow::Error(format!("OSError: {e}")))?;
                    self.write_file(&path, csv.as_bytes(), false, None)?;
                    no_update(Value::None)
                }
                "copy" => no_update(Value::Table(t)),
                _ => err(format!(
                    "AttributeError: 'DataFrame' object has no attribute '{m}'"
                )),
            },
            Value::File(path) => {
                let a = Args::new(m, args, kw, &["s"], false)?;
                match m {
                    "write" => {
                        let s = a.req(0)?.to_str();
                        let rel = self.relative(&path);
                        self.write_file(&rel, s.as_bytes(), true, None)?;
                        no_update(Value::Int(s.chars().count() as i64))
                    }
                    "read" => no_update(Value::Str(
                        std::fs::read_to_string(&path)
                            .map_err(|e| Flow::Error(format!("OSError: {e}")))?,
                    )),
                    "close" => no_update(Value::None),
                    _ => err(format!(
                        "AttributeError: '_io.TextIOWrapper' object has no attribute '{m}'"
                    )),
                }
            }
            other => err(format!(
                "AttributeError: '{}' object has no attribute '{m}'",
                other.type_name()
            )),
        }
    }
}

/// Call arguments bound to parameter names.
struct Args {
    fname: String,
    params: Vec<String>,
    slots: Vec<Option<Value>>,
    rest: Vec<Value>,
    kwargs: Vec<(String, Value)>,
}

impl Args {
    /// With `variadic`, positional arguments go to `rest` and `params` are
    /// keyword-only.
    fn new(
        fname: &str,
        args: Vec<Value>,
        kw: Vec<(String, Value)>,
        params: &[&str],
        variadic: bool,
    ) -> R<Args> {
        let mut slots: Vec<Option<Value>> = vec![None; params.len()];
        let mut rest = Vec::new();
        if variadic {
            rest = args;
        } else {
            if args.len() > params.len() {
                return err(format!(
                    "TypeError: {fname}() takes at most {} positional arguments ({} given)",
                    params.len(),
                    args.len()
                ));
            }
            for (slot, a) in slots.iter_mut().zip(args) {
                *slot = Some(a);
            }
        }
        let mut extra = Vec::new();
        for (k, v) in kw {
            match params.iter().position(|p| *p == k) {
                Some(i) if slots[i].is_some() => {
                    return err(format!(
                        "TypeError: {fname}() got multiple values for argument '{k}'"
                    ))
                }
                Some(i) => slots[i] = Some(v),
                None if variadic && fname == "format" => extra.push((k, v)),
                None => {
                    return err(format!(
                        "TypeError: {fname}() got an unexpected keyword argument '{k}'"
                    ))
                }
            }
        }
        Ok(Args {
            fname: fname.into(),
            params: params.iter().map(|p| p.to_string()).collect(),
            slots,
            rest,
            kwargs: extra,
        })
    }

    fn opt(&self, i: usize) -> Option<Value> {
        if self.slots.is_empty() {
            return self.rest.get(i).cloned();
        }
        self.slots
            .get(i)
            .cloned()
            .flatten()
            .or_else(|| self.rest.get(i).cloned())
    }

    fn req(&self, i: usize) -> R<Value> {
        self.opt(i).ok_or_else(|| {
            Flow::Error(format!(
                "TypeError: {}() missing required argument {}",
                self.fname,
                i + 1
            ))
        })
    }

    fn kw_str(&self, name: &str) -> R<Option<String>> {
        let Some(i) = self.params.iter().position(|p| p == name) else {
            return Ok(None);
        };
        self.slots[i].as_ref().map(as_str).transpose()
    }
}

fn as_str(v: &Value) -> R<String> {
    match v {
        Value::Str(s) => Ok(s.clone()),
        other => err(format!(
            "TypeError: expected str, got {}",
            other.type_name()
        )),
    }
}

fn as_int(v: &Value) -> R<i64> {
    match v {
        Value::Int(i) => Ok(*i),
        Value::Bool(b) => Ok(*b as i64),
        other => err(format!(
            "TypeError: '{}' object cannot be interpreted as an integer",
            other.type_name()
        )),
    }
}

fn opt_usize(v: Option<Value>) -> R<Option<usize>> {
    match v {
        None | Some(Value::None) => Ok(None),
        Some(v) => {
            let i = as_int(&v)?;
            if i < 0 {
                return err("ValueError: expected a non-negative integer");
            }
            Ok(Some(i as usize))
        }
    }
}

fn as_table(v: &Value) -> R<Table> {
    match v {
        Value::Table(t) => Ok(t.clone()),
        other => err(format!(
            "TypeError: expected DataFrame, got {}",
            other.type_name()
        )),
    }
}

fn iterate(v: Value) -> R<Vec<Value>> {
    match v {
        Value::List(v) | Value::Tuple(v) => Ok(v),
        Value::Str(s) => Ok(s.chars().map(|c| Value::Str(c.to_string())).collect()),
        Value::Dict(d) => Ok(d.into_iter().map(|(k, _)| k).collect()),
        Value::Table(t) => Ok(t.columns.into_iter().map(Value::Str).collect()),
        other => err(format!(
            "TypeError: '{}' object is not iterable",
            other.type_name()
        )),
    }
}

fn sort_values(items: &mut [Value]) -> R<()> {
    let mut failure = None;
    items.sort_by(|a, b| {
        a.py_cmp(b).unwrap_or_else(|| {
            failure.get_or_insert_with(|| {
                format!(
                    "TypeError: '<' not supported between instances of '{}' and '{}'",
                    a.type_name(),
                    b.type_name()
                )
            });
            std::cmp::Ordering::Equal
        })
    });
    failure.map_or(Ok(()), err)
}

fn norm_index(k: &Value, len: usize) -> R<usize> {
    let i = as_int(k)?;
    let j = if i < 0 { i + len as i64 } else { i };
    if j < 0 || j >= len as i64 {
        return err("IndexError: list index out of range");
    }
    Ok(j as usize)
}

fn slice(v: Value, a: Option<Value>, b: Option<Value>) -> R<Value> {
    let bounds = |len: usize| -> R<(usize, usize)> {
        let clamp = |x: Option<&Value>, default: usize| -> R<usize> {
            match x {
                None | Some(Value::None) => Ok(default),
                Some(v) => {
                    let i = as_int(v)?;
                    let j = if i < 0 {
                        (len as i64 + i).max(0)
                    } else {
                        i.min(len as i64)
                    };
                    Ok(j as usize)
                }
            }
        };
        let lo = clamp(a.as_ref(), 0)?;
        let hi = clamp(b.as_ref(), len)?;
        Ok((lo, hi.max(lo)))
    };
    match v {
        Value::List(items) => {
            let (lo, hi) = bounds(items.len())?;
            Ok(Value::List(items[lo..hi].to_vec()))
        }
        Value::Tuple(items) => {
            let (lo, hi) = bounds(items.len())?;
            Ok(Value::Tuple(items[lo..hi].to_vec()))
        }
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let (lo, hi) = bounds(chars.len())?;
            Ok(Value::Str(chars[lo..hi].iter().collect()))
        }
        Value::Table(t) => {
            let (lo, hi) = bounds(t.rows.len())?;
            Ok(Value::Table(Table {
                columns: t.columns.clone(),
                rows: t.rows[lo..hi].to_vec(),
            }))
        }
        other => err(format!(
            "TypeError: '{}' object is not subscriptable",
            other.type_name()
        )),
    }
}

fn index(v: Value, k: Value) -> R<Value> {
    match v {
        Value::List(items) | Value::Tuple(items) => {
            let i = norm_index(&k, items.len())?;
            Ok(items[i].clone())
        }
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let i = norm_index(&k, chars.len())
                .map_err(|_| Flow::Error("IndexError: string index out of range".into()))?;
            Ok(Value::Str(chars[i].to_string()))
        }
        Value::Dict(pairs) => pairs
            .into_iter()
            .find(|(pk, _)| pk.py_eq(&k))
            .map(|(_, v)| v)
            .ok_or_else(|| Flow::Error(format!("KeyError: {}", k.repr()))),
        Value::Table(t) => match k {
            Value::Str(col) => t
                .column(&col)
                .map(Value::List)
                .ok_or_else(|| Flow::Error(format!("KeyError: '{col}'"))),
            Value::List(cols) => {
                let names: Vec<String> = cols.iter().map(as_str).collect::<R<_>>()?;
                let idx: Vec<usize> = names
                    .iter()
                    .map(|c| {
                        t.column_index(c)
                            .ok_or_else(|| Flow::Error(format!("KeyError: '{c}'")))
                    })
                    .collect::<R<_>>()?;
                Ok(Value::Table(Table {
                    columns: names,
                    rows: t
                        .rows
                        .iter()
                        .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                        .collect(),
                }))
            }
            other => err(format!("KeyError: {}", other.repr())),
        },
        other => err(format!(
            "TypeError: '{}' object is not subscriptable",
            other.type_name()
        )),
    }
}

fn op_symbol(op: &BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::FloorDiv => "//",
        BinOp::Mod => "%",
        BinOp::Pow => "**",
    }
}

fn binop(op: &BinOp, l: Value, r: Value) -> R<Value> {
    let unsupported = |l: &Value, r: &Value| {
        err(format!(
            "TypeError: unsupported operand type(s) for {}: '{}' and '{}'",
            op_symbol(op),
            l.type_name(),
            r.type_name()
        ))
    };
    let overflow = || Flow::Error("OverflowError: integer result too large".into());
    match (&l, &r) {
        (Value::Str(a), Value::Str(b)) if *op == BinOp::Add => {
            return Ok(Value::Str(format!("{a}{b}")))
        }
        (Value::List(a), Value::List(b)) if *op == BinOp::Add => {
            return Ok(Value::List(a.iter().chain(b).cloned().collect()))
        }
        (Value::Tuple(a), Value::Tuple(b)) if *op == BinOp::Add => {
            return Ok(Value::Tuple(a.iter().chain(b).cloned().collect()))
        }
        (Value::Str(s), Value::Int(n)) | (Value::Int(n), Value::Str(s)) if *op == BinOp::Mul => {
            return Ok(Value::Str(s.repeat((*n).max(0) as usize)))
        }
        (Value::List(v), Value::Int(n)) | (Value::Int(n), Value::List(v)) if *op == BinOp::Mul => {
            let n = (*n).max(0) as usize;
            return Ok(Value::List(
                v.iter().cloned().cycle().take(v.len() * n).collect(),
            ));
        }
        (Value::Str(fmt), arg) if *op == BinOp::Mod => return percent_format(fmt, arg),
        _ => {}
    }
    let ints = match (&l, &r) {
        (Value::Int(_) | Value::Bool(_), Value::Int(_) | Value::Bool(_)) => {
            Some((as_int(&l)?, as_int(&r)?))
        }
        _ => None,
    };
    if let Some((a, b)) = ints {
        return match op {
            BinOp::Add => a.checked_add(b).map(Value::Int).ok_or_else(overflow),
            BinOp::Sub => a.checked_sub(b).map(Value::Int).ok_or_else(overflow),
            BinOp::Mul => a.checked_mul(b).map(Value::Int).ok_or_else(overflow),
            BinOp::Div if b == 0 => err("ZeroDivisionError: division by zero"),
            BinOp::Div => Ok(Value::Float(a as f64 / b as f64)),
            BinOp::FloorDiv | BinOp::Mod if b == 0 => {
                err("ZeroDivisionError: integer division or modulo by zero")
            }
            BinOp::FloorDiv => Ok(Value::Int(
                a.div_euclid(b) - if b < 0 && a.rem_euclid(b) != 0 { 1 } else { 0 },
            )),
            BinOp::Mod => {
                let m = a.rem_euclid(b);
                Ok(Value::Int(if b < 0 && m != 0 { m + b } else { m }))
            }
            BinOp::Pow if b < 0 => Ok(Value::Float((a as f64).powf(b as f64))),
            BinOp::Pow => u32::try_from(b)
                .ok()
                .and_then(|e| a.checked_pow(e))
                .map(Value::Int)
                .ok_or_else(overflow),
        };
    }
    let (Some(a), Some(b)) = (l.as_f64(), r.as_f64()) else {
        return unsupported(&l, &r);
    };
    if matches!(l, Value::Str(_)) || matches!(r, Value::Str(_)) {
        return unsupported(&l, &r);
    }
    match op {
        BinOp::Add => Ok(Value::Float(a + b)),
        BinOp::Sub => Ok(Value::Float(a - b)),
        BinOp::Mul => Ok(Value::Float(a * b)),
        BinOp::Div | BinOp::FloorDiv | BinOp::Mod if b == 0.0 => {
            err("ZeroDivisionError: float division by zero")
        }
        BinOp::Div => Ok(Value::Float(a / b)),
        BinOp::FloorDiv => Ok(Value::Float((a / b).floor())),
        BinOp::Mod => Ok(Value::Float(a - b * (a / b).floor())),
        BinOp::Pow => Ok(Value::Float(a.powf(b))),
    }
}

fn compare(op: &CmpOp, l: &Value, r: &Value) -> R<bool> {
    let order = || {
        l.py_cmp(r).ok_or_else(|| {
            let sym = match op {
                CmpOp::Lt => "<",
                CmpOp::Le => "<=",
                CmpOp::Gt => ">",
                _ => ">=",
            };
            Flow::Error(format!(
                "TypeError: '{sym}' not supported between instances of '{}' and '{}'",
                l.type_name(),
                r.type_name()
            ))
        })
    };
    let contains = || -> R<bool> {
        match r {
            Value::Str(hay) => Ok(hay.contains(as_str(l)?.as_str())),
            Value::List(items) | Value::Tuple(items) => Ok(items.iter().any(|i| i.py_eq(l))),
            Value::Dict(pairs) => Ok(pairs.iter().any(|(k, _)| k.py_eq(l))),
            Value::Table(t) => Ok(t.columns.iter().any(|c| Value::Str(c.clone()).py_eq(l))),
            other => err(format!(
                "TypeError: argument of type '{}' is not iterable",
                other.type_name()
            )),
        }
    };
    Ok(match op {
        CmpOp::Eq => l.py_eq(r),
        CmpOp::Ne => !l.py_eq(r),
        CmpOp::Lt => order()?.is_lt(),
        CmpOp::Le => order()?.is_le(),
        CmpOp::Gt => order()?.is_gt(),
        CmpOp::Ge => order()?.is_ge(),
        CmpOp::In => contains()?,
        CmpOp::NotIn => !contains()?,
        CmpOp::Is => l == r && matches!(l, Value::None | Value::Bool(_)),
        CmpOp::IsNot => !(l == r && matches!(l, Value::None | Value::Bool(_))),
    })
}

fn round_half_even(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

fn title_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut start = true;
    for c in s.chars() {
        if c.is_alphabetic() {
            if start {
                out.extend(c.to_uppercase());
            } else {
                out.extend(c.to_lowercase());
            }
            start = false;
        } else {
            out.push(c);
            start = true;
        }
    }
    out
}

/// A subset of the format-spec mini-language:
/// `[[fill]align][width][,][.precision][type]`.
pub fn format_value(v: &Value, spec: &str) -> R<String> {
    if spec.is_empty() {
        return Ok(v.to_str());
    }
    let chars: Vec<char> = spec.chars().collect();
    let mut i = 0;
    let mut fill = ' ';
    let mut align = None;
    if chars.len() >= 2 && matches!(chars[1], '<' | '>' | '^') {
        fill = chars[0];
        align = Some(chars[1]);
        i = 2;
    } else if matches!(chars.first(), Some('<' | '>' | '^')) {
        align = Some(chars[0]);
        i = 1;
    }
    let mut width = 0usize;
    while i < chars.len() && chars[i].is_ascii_digit() {
        width = width * 10 + chars[i].to_digit(10).unwrap_or(0) as usize;
        i += 1;
    }
    let grouping = i < chars.len() && chars[i] == ',';
    if grouping {
        i += 1;
    }
    let mut precision = None;
    if i < chars.len() && chars[i] == '.' {
        i += 1;
        let mut p = 0usize;
        while i < chars.len() && chars[i].is_ascii_digit() {
            p = p * 10 + chars[i].to_digit(10).unwrap_or(0) as usize;
            i += 1;
        }
        precision = Some(p);
    }
    let ty = chars.get(i).copied();
    if i + ty.map_or(0, |_| 1) != chars.len() {
        return err(format!("ValueError: Invalid format specifier '{spec}'"));
    }
    let numeric = || {
        v.as_f64().ok_or_else(|| {
            Flow::Error(format!(
                "ValueError: Unknown format code for object of type '{}'",
                v.type_name()
            ))
        })
    };
    let mut body = match ty {
        Some('f') => format!("{:.*}", precision.unwrap_or(6), numeric()?),
        Some('%') => format!("{:.*}%", precision.unwrap_or(6), numeric()? * 100.0),
        Some('d') => match v {
            Value::Int(n) => n.to_string(),
            _ => {
                return err(format!(
                    "ValueError: Unknown format code 'd' for object of type '{}'",
                    v.type_name()
                ))
            }
        },
        Some('s') => v.to_str(),
        None => match (precision, v) {
            (Some(p), Value::Float(f)) => format!("{:.*}", p, f),
            (Some(p), Value::Str(s)) => s.chars().take(p).collect(),
            _ => v.to_str(),
        },
        Some(other) => return err(format!("ValueError: Unknown format code '{other}'")),
    };
    if grouping {
        body = group_thousands(&body);
    }
    let len = body.chars().count();
    if len < width {
        let pad = width - len;
        let default_right = v.as_f64().is_some() && !matches!(v, Value::Str(_));
        let fill_s = |n: usize| fill.to_string().repeat(n);
        body = match align.unwrap_or(if default_right { '>' } else { '<' }) {
            '>' => format!("{}{body}", fill_s(pad)),
            '^' => format!("{}{body}{}", fill_s(pad / 2), fill_s(pad - pad / 2)),
            _ => format!("{body}{}", fill_s(pad)),
        };
    }
    Ok(body)
}

fn group_thousands(s: &str) -> String {
    let (sign, rest) = s.strip_prefix('-').map_or(("", s), |r| ("-", r));
    let (int, frac) = rest
        .split_once('.')
        .map_or((rest, None), |(a, b)| (a, Some(b)));
    let mut grouped = String::new();
    for (k, c) in int.chars().enumerate() {
        if k > 0 && (int.len() - k) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(c);
    }
    match frac {
        Some(f) => format!("{sign}{grouped}.{f}"),
        None => format!("{sign}{grouped}"),
    }
}

fn str_format(fmt: &str, args: &[Value], kwargs: &[(String, Value)]) -> R<String> {
    let mut out = String::new();
    let mut auto = 0;
    let mut rest = fmt;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('}') {
            return err("ValueError: Single '}' encountered in format string");
        }
        let close = tail.find('}').ok_or_else(|| {
            Flow::Error("ValueError: Single '{' encountered in format string".into())
        })?;
        let field = &tail[1..close];
        let (name, spec) = field.split_once(':').unwrap_or((field, ""));
        let v = if name.is_empty() {
            auto += 1;
            args.get(auto - 1)
                .cloned()
                .ok_or_else(|| Flow::Error("IndexError: Replacement index out of range".into()))?
        } else if let Ok(i) = name.parse::<usize>() {
            args.get(i)
                .cloned()
                .ok_or_else(|| Flow::Error("IndexError: Replacement index out of range".into()))?
        } else {
            kwargs
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Flow::Error(format!("KeyError: '{name}'")))?
        };
        out.push_str(&format_value(&v, spec)?);
        rest = &tail[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn percent_format(fmt: &str, arg: &Value) -> R<Value> {
    let args: Vec<Value> = match arg {
        Value::Tuple(items) => items.clone(),
        other => vec![other.clone()],
    };
    let mut out = String::new();
    let mut it = args.iter();
    let mut chars = fmt.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '%' {
            out.push(c);
            continue;
        }
        let mut spec = String::new();
        while let Some(&n) = chars.peek() {
            chars.next();
            if n.is_ascii_alphabetic() || n == '%' {
                spec.push(n);
                break;
            }
            spec.push(n);
        }
        if spec == "%" {
            out.push('%');
            continue;
        }
        let v = it.next().ok_or_else(|| {
            Flow::Error("TypeError: not enough arguments for format string".into())
        })?;
        let (body, ty) = spec.split_at(spec.len().saturating_sub(1));
        let py_spec = match ty {
            "s" | "r" => String::new(),
            "i" => format!("{body}d"),
            t => format!("{body}{t}"),
        };
        out.push_str(&if ty == "r" {
            v.repr()
        } else {
            format_value(v, &py_spec)?
        });
    }
    Ok(Value::Str(out))
}

fn to_json(v: &Value) -> R<serde_json::Value> {
    use serde_json::Value as J;
    Ok(match v {
        Value::None => J::Null,
        Value::Bool(b) => J::Bool(*b),
        Value::Int(i) => J::from(*i),
        Value::Float(f) => serde_json::Number::from_f64(*f)
            .map(J::Number)
            .unwrap_or(J::Null),
        Value::Str(s) => J::String(s.clone()),
        Value::List(items) | Value::Tuple(items) => {
            J::Array(items.iter().map(to_json).collect::<R<_>>()?)
        }
        Value::Dict(pairs) => {
            let mut m = serde_json::Map::new();
            for (k, v) in pairs {
                m.insert(k.to_str(), to_json(v)?);
            }
            J::Object(m)
        }
        other => {
            return err(format!(
                "TypeError: Object of type {} is not JSON serializable",
                other.type_name()
            ))
        }
    })
}

/// Counts values of `column`, one per row, or one per listed topic for the
/// `topics` column. Sorted by count descending, then value.
pub fn count_by(t: &Table, column: &str, top_n: Option<usize>) -> R<Value> {
    let ci = t
        .column_index(column)
        .ok_or_else(|| Flow::Error(format!("KeyError: '{column}'")))?;
    let mut counts: BTreeMap<String, i64> = BTreeMap::new();
    for r in &t.rows {
        if column == "topics" {
            for topic in split_topics(&r[ci]) {
                *counts.entry(topic).or_default() += 1;
            }
        } else {
            let v = r[ci].to_str();
            if !v.is_empty() {
                *counts.entry(v).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, i64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(n) = top_n {
        ranked.truncate(n);
    }
    let key = if column == "topics" { "topic" } else { column };
    Ok(Value::Table(Table {
        columns: vec![key.into(), "count".into()],
        rows: ranked
            .into_iter()
            .map(|(k, n)| vec![Value::Str(k), Value::Int(n)])
            .collect(),
    }))
}

fn numeric_cell(v: &Value) -> Option<f64> {
    if let Some(f) = v.as_f64() {
        return Some(f);
    }
    let s = v.to_str();
    match s.trim().to_lowercase().as_str() {
        "negative" => Some(-1.0),
        "neutral" => Some(0.0),
        "positive" => Some(1.0),
        other => other.parse().ok(),
    }
}

/// Mean of `value` per `group`; sentiment labels read as -1, 0 and 1.
fn mean_by(t: &Table, group: &str, value: &str) -> R<Value> {
    let gi = t
        .column_index(group)
        .ok_or_else(|| Flow::Error(format!("KeyError: '{group}'")))?;
    let vi = t
        .column_index(value)
        .ok_or_else(|| Flow::Error(format!("KeyError: '{value}'")))?;
    let mut acc: BTreeMap<String, (f64, i64)> = BTreeMap::new();
    for r in &t.rows {
        let Some(x) = numeric_cell(&r[vi]) else {
            continue;
        };
        let keys = if group == "topics" {
            split_topics(&r[gi])
        } else {
            vec![r[gi].to_str()]
        };
        for k in keys {
            let e = acc.entry(k).or_default();
            e.0 += x;
            e.1 += 1;
        }
    }
    let mut rows: Vec<(String, f64, i64)> = acc
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64, n))
        .collect();
    rows.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    let key = if group == "topics" { "topic" } else { group };
    Ok(Value::Table(Table {
        columns: vec![key.into(), "mean".into(), "count".into()],
        rows: rows
            .into_iter()
            .map(|(k, m, n)| vec![Value::Str(k), Value::Float(m), Value::Int(n)])
            .collect(),
    }))
}

/// Reads a CSV document into a table of string cells.
pub fn load_csv(text: &str) -> Result<Table, csv::Error> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(text.as_bytes());
    let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(|c| Value::Str(c.to_string())).collect());
    }
    Ok(Table { columns, rows })
}

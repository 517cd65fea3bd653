//! Recursive-descent parser producing a flat statement list.
//!
//! Only straight-line code is accepted: no blocks, loops or definitions.

use super::lexer::{syntax_error, tokenize, Tok, Token};

/// Positional and keyword arguments of a call.
type CallArgs = (Vec<Expr>, Vec<(String, Expr)>);

#[derive(Debug, Clone, PartialEq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    FloorDiv,
    Mod,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    NotIn,
    Is,
    IsNot,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FPart {
    Lit(String),
    Expr(Expr, Option<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    None,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    FStr(Vec<FPart>),
    Name(String),
    List(Vec<Expr>),
    Tuple(Vec<Expr>),
    Dict(Vec<(Expr, Expr)>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    IfElse(Box<Expr>, Box<Expr>, Box<Expr>),
    Call {
        func: Box<Expr>,
        args: Vec<Expr>,
        kwargs: Vec<(String, Expr)>,
    },
    Attr(Box<Expr>, String),
    Index(Box<Expr>, Box<Expr>),
    Slice(Option<Box<Expr>>, Option<Box<Expr>>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Name(String),
    Index(Expr, Expr),
    Unpack(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Expr(Expr),
    Assign(Vec<Target>, Expr),
    AugAssign(String, BinOp, Expr),
    /// `import a.b as c`: (module path, bound name).
    Import(Vec<(String, String)>),
    /// `from a import b as c`: module path and (name, bound name) pairs.
    FromImport(String, Vec<(String, String)>),
    Del(Vec<String>),
    Pass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub line: usize,
    pub stmt: Stmt,
}

const BLOCK_KEYWORDS: &[&str] = &[
    "if", "elif", "else", "for", "while", "def", "class", "with", "try", "except", "finally",
    "return", "yield", "lambda", "global", "nonlocal", "async", "await", "raise", "assert",
    "break", "continue",
];

pub fn parse(src: &str) -> Result<Vec<Line>, String> {
    let tokens = tokenize(src)?;
    let mut p = Parser { tokens, pos: 0 };
    let mut out = Vec::new();
    loop {
        match p.peek() {
            Tok::Eof => break,
            Tok::Newline => {
                p.pos += 1;
            }
            _ => {
                let line = p.line();
                out.push(Line {
                    line,
                    stmt: p.statement()?,
                });
                loop {
                    match p.peek() {
                        Tok::Op(";") => {
                            p.pos += 1;
                            if matches!(p.peek(), Tok::Newline | Tok::Eof) {
                                break;
                            }
                            let line = p.line();
                            out.push(Line {
                                line,
                                stmt: p.statement()?,
                            });
                        }
                        Tok::Newline | Tok::Eof => break,
                        other => return Err(p.err(&format!("unexpected {}", describe(other)))),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parses a single expression, as found inside an f-string placeholder.
pub fn parse_expr(src: &str) -> Result<Expr, String> {
    let mut p = Parser {
        tokens: tokenize(src)?,
        pos: 0,
    };
    let e = p.expr_list()?;
    while matches!(p.peek(), Tok::Newline) {
        p.pos += 1;
    }
    if !matches!(p.peek(), Tok::Eof) {
        return Err(p.err("invalid expression in f-string"));
    }
    Ok(e)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Name(n) => format!("name '{n}'"),
        Tok::Int(_) | Tok::Float(_) => "number".into(),
        Tok::Str(_) | Tok::FStr(_) => "string".into(),
        Tok::Op(o) => format!("'{o}'"),
        Tok::Newline => "end of line".into(),
        Tok::Eof => "end of input".into(),
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        &self.tokens[(self.pos + n).min(self.tokens.len() - 1)].tok
    }

    fn line(&self) -> usize {
        self.tokens[self.pos].line
    }

    fn err(&self, msg: &str) -> String {
        syntax_error(self.line(), msg)
    }

    fn next(&mut self) -> Tok {
        let t = self.tokens[self.pos].tok.clone();
        if !matches!(t, Tok::Eof) {
            self.pos += 1;
        }
        t
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Tok::Op(o) if *o == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), String> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(self.err(&format!("expected '{op}', found {}", describe(self.peek()))))
        }
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Name(n) if n == kw)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn name(&mut self) -> Result<String, String> {
        match self.next() {
            Tok::Name(n) => Ok(n),
            other => Err(self.err(&format!("expected a name, found {}", describe(&other)))),
        }
    }

    fn dotted(&mut self) -> Result<String, String> {
        let mut path = self.name()?;
        while self.eat_op(".") {
            path.push('.');
            path.push_str(&self.name()?);
        }
        Ok(path)
    }

    fn statement(&mut self) -> Result<Stmt, String> {
        if let Tok::Name(n) = self.peek() {
            if BLOCK_KEYWORDS.contains(&n.as_str()) {
                return Err(self.err(&format!(
                    "'{n}' statements are not supported by this kernel"
                )));
            }
            match n.as_str() {
                "pass" => {
                    self.pos += 1;
                    return Ok(Stmt::Pass);
                }
                "import" => {
                    self.pos += 1;
                    let mut items = Vec::new();
                    loop {
                        let module = self.dotted()?;
                        let bound = if self.eat_kw("as") {
                            self.name()?
                        } else {
                            module.split('.').next().unwrap_or_default().to_string()
                        };
                        items.push((module, bound));
                        if !self.eat_op(",") {
                            break;
                        }
                    }
                    return Ok(Stmt::Import(items));
                }
                "from" => {
                    self.pos += 1;
                    let module = self.dotted()?;
                    if !self.eat_kw("import") {
                        return Err(self.err("expected 'import'"));
                    }
                    let paren = self.eat_op("(");
                    let mut names = Vec::new();
                    loop {
                        if self.eat_op("*") {
                            return Err(
                                self.err("wildcard imports are not supported by this kernel")
                            );
                        }
                        let name = self.name()?;
                        let bound = if self.eat_kw("as") {
                            self.name()?
                        } else {
                            name.clone()
                        };
                        names.push((name, bound));
                        if !self.eat_op(",") {
                            break;
                        }
                        if paren && matches!(self.peek(), Tok::Op(")")) {
                            break;
                        }
                    }
                    if paren {
                        self.expect_op(")")?;
                    }
                    return Ok(Stmt::FromImport(module, names));
                }
                "del" => {
                    self.pos += 1;
                    let mut names = vec![self.name()?];
                    while self.eat_op(",") {
                        names.push(self.name()?);
                    }
                    return Ok(Stmt::Del(names));
                }
                _ => {}
            }
        }

        // augmented assignment
        if let (Tok::Name(n), Tok::Op(op)) = (self.peek().clone(), self.peek_at(1).clone()) {
            let bin = match op {
                "+=" => Some(BinOp::Add),
                "-=" => Some(BinOp::Sub),
                "*=" => Some(BinOp::Mul),
                "/=" => Some(BinOp::Div),
                "//=" => Some(BinOp::FloorDiv),
                "%=" => Some(BinOp::Mod),
                "**=" => Some(BinOp::Pow),
                _ => None,
            };
            if let Some(bin) = bin {
                self.pos += 2;
                let value = self.expr_list()?;
                return Ok(Stmt::AugAssign(n, bin, value));
            }
        }

        let first = self.expr_list()?;
        if !matches!(self.peek(), Tok::Op("=")) {
            return Ok(Stmt::Expr(first));
        }
        let mut targets = vec![self.target(first)?];
        let mut value;
        loop {
            self.expect_op("=")?;
            value = self.expr_list()?;
            if matches!(self.peek(), Tok::Op("=")) {
                targets.push(self.target(value)?);
            } else {
                break;
            }
        }
        Ok(Stmt::Assign(targets, value))
    }

    fn target(&self, e: Expr) -> Result<Target, String> {
        match e {
            Expr::Name(n) => Ok(Target::Name(n)),
            Expr::Index(obj, idx) => Ok(Target::Index(*obj, *idx)),
            Expr::Tuple(items) | Expr::List(items) => items
                .into_iter()
                .map(|i| match i {
                    Expr::Name(n) => Ok(n),
                    _ => Err(self.err("cannot assign to expression")),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Target::Unpack),
            _ => Err(self.err("cannot assign to expression")),
        }
    }

    /// Comma-separated expressions; more than one makes a tuple.
    fn expr_list(&mut self) -> Result<Expr, String> {
        let first = self.expr()?;
        if !matches!(self.peek(), Tok::Op(",")) {
            return Ok(first);
        }
        let mut items = vec![first];
        while self.eat_op(",") {
            if matches!(
                self.peek(),
                Tok::Newline | Tok::Eof | Tok::Op("=") | Tok::Op(")")
            ) {
                break;
            }
            items.push(self.expr()?);
        }
        Ok(Expr::Tuple(items))
    }

    fn expr(&mut self) -> Result<Expr, String> {
        let body = self.or_expr()?;
        if self.eat_kw("if") {
            let cond = self.or_expr()?;
            if !self.eat_kw("else") {
                return Err(self.err("expected 'else' in conditional expression"));
            }
            let other = self.expr()?;
            return Ok(Expr::IfElse(
                Box::new(cond),
                Box::new(body),
                Box::new(other),
            ));
        }
        Ok(body)
    }

    fn or_expr(&mut self) -> Result<Expr, String> {
        let mut left = self.and_expr()?;
        while self.eat_kw("or") {
            left = Expr::Or(Box::new(left), Box::new(self.and_expr()?));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, String> {
        let mut left = self.not_expr()?;
        while self.eat_kw("and") {
            left = Expr::And(Box::new(left), Box::new(self.not_expr()?));
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, String> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, String> {
        let mut left = self.arith()?;
        loop {
            let op = match self.peek() {
                Tok::Op("==") => CmpOp::Eq,
                Tok::Op("!=") => CmpOp::Ne,
                Tok::Op("<") => CmpOp::Lt,
                Tok::Op("<=") => CmpOp::Le,
                Tok::Op(">") => CmpOp::Gt,
                Tok::Op(">=") => CmpOp::Ge,
                Tok::Name(n) if n == "in" => CmpOp::In,
                Tok::Name(n) if n == "is" => {
                    if matches!(self.peek_at(1), Tok::Name(m) if m == "not") {
                        self.pos += 1;
                        CmpOp::IsNot
                    } else {
                        CmpOp::Is
                    }
                }
                Tok::Name(n)
                    if n == "not" && matches!(self.peek_at(1), Tok::Name(m) if m == "in") =>
                {
                    self.pos += 1;
                    CmpOp::NotIn
                }
                _ => return Ok(left),
            };
            self.pos += 1;
            let right = self.arith()?;
            left = Expr::Cmp(op, Box::new(left), Box::new(right));
        }
    }

    fn arith(&mut self) -> Result<Expr, String> {
        let mut left = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Op("+") => BinOp::Add,
                Tok::Op("-") => BinOp::Sub,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::Bin(op, Box::new(left), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, String> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op("*") => BinOp::Mul,
                Tok::Op("/") => BinOp::Div,
                Tok::Op("//") => BinOp::FloorDiv,
                Tok::Op("%") => BinOp::Mod,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::Bin(op, Box::new(left), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, String> {
        if self.eat_op("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op("+") {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, String> {
        let base = self.postfix()?;
        if self.eat_op("**") {
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Expr, String> {
        let mut e = self.atom()?;
        loop {
            if self.eat_op("(") {
                let (args, kwargs) = self.call_args()?;
                e = Expr::Call {
                    func: Box::new(e),
                    args,
                    kwargs,
                };
            } else if self.eat_op(".") {
                e = Expr::Attr(Box::new(e), self.name()?);
            } else if self.eat_op("[") {
                let idx = self.subscript()?;
                self.expect_op("]")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else {
                return Ok(e);
            }
        }
    }

    fn subscript(&mut self) -> Result<Expr, String> {
        let start = if matches!(self.peek(), Tok::Op(":")) {
            None
        } else {
            Some(self.expr_list()?)
        };
        if !self.eat_op(":") {
            return start.ok_or_else(|| self.err("empty subscript"));
        }
        let end = if matches!(self.peek(), Tok::Op("]")) {
            None
        } else {
            Some(self.expr()?)
        };
        Ok(Expr::Slice(start.map(Box::new), end.map(Box::new)))
    }

    fn call_args(&mut self) -> Result<CallArgs, String> {
        let mut args = Vec::new();
        let mut kwargs = Vec::new();
        while !self.eat_op(")") {
            if self.eat_op("*") || self.eat_op("**") {
                return Err(self.err("argument unpacking is not supported by this kernel"));
            }
            if let (Tok::Name(n), Tok::Op("=")) = (self.peek().clone(), self.peek_at(1)) {
                self.pos += 2;
                kwargs.push((n, self.expr()?));
            } else {
                if !kwargs.is_empty() {
                    return Err(self.err("positional argument follows keyword argument"));
                }
                args.push(self.expr()?);
            }
            if !self.eat_op(",") {
                self.expect_op(")")?;
                break;
            }
        }
        Ok((args, kwargs))
    }

    fn atom(&mut self) -> Result<Expr, String> {
        let line = self.line();
        match self.next() {
            Tok::Int(i) => Ok(Expr::Int(i)),
            Tok::Float(f) => Ok(Expr::Float(f)),
            Tok::Str(s) => {
                // adjacent literals concatenate
                let mut s = s;
                while let Tok::Str(more) = self.peek().clone() {
                    self.pos += 1;
                    s.push_str(&more);
                }
                Ok(Expr::Str(s))
            }
            Tok::FStr(body) => parse_fstring(&body, line).map(Expr::FStr),
            Tok::Name(n) => match n.as_str() {
                "None" => Ok(Expr::None),
                "True" => Ok(Expr::Bool(true)),
                "False" => Ok(Expr::Bool(false)),
                kw if BLOCK_KEYWORDS.contains(&kw) || kw == "import" || kw == "from" => {
                    Err(syntax_error(line, &format!("'{kw}' is not supported here")))
                }
                _ => Ok(Expr::Name(n)),
            },
            Tok::Op("(") => {
                if self.eat_op(")") {
                    return Ok(Expr::Tuple(Vec::new()));
                }
                let first = self.expr()?;
                if self.is_kw("for") {
                    return Err(self.err("comprehensions are not supported by this kernel"));
                }
                if self.eat_op(")") {
                    return Ok(first);
                }
                let mut items = vec![first];
                while self.eat_op(",") {
                    if matches!(self.peek(), Tok::Op(")")) {
                        break;
                    }
                    items.push(self.expr()?);
                }
                self.expect_op(")")?;
                Ok(Expr::Tuple(items))
            }
            Tok::Op("[") => {
                let mut items = Vec::new();
                while !self.eat_op("]") {
                    items.push(self.expr()?);
                    if self.is_kw("for") {
                        return Err(self.err("comprehensions are not supported by this kernel"));
                    }
                    if !self.eat_op(",") {
                        self.expect_op("]")?;
                        break;
                    }
                }
                Ok(Expr::List(items))
            }
            Tok::Op("{") => {
                let mut items = Vec::new();
                while !self.eat_op("}") {
                    let k = self.expr()?;
                    self.expect_op(":")?;
                    let v = self.expr()?;
                    items.push((k, v));
                    if !self.eat_op(",") {
                        self.expect_op("}")?;
                        break;
                    }
                }
                Ok(Expr::Dict(items))
            }
            other => Err(syntax_error(
                line,
                &format!("unexpected {}", describe(&other)),
            )),
        }
    }
}

fn parse_fstring(body: &str, line: usize) -> Result<Vec<FPart>, String> {
    let chars: Vec<char> = body.chars().collect();
    let mut parts = Vec::new();
    let mut lit = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '{' && chars.get(i + 1) == Some(&'{') {
            lit.push('{');
            i += 2;
        } else if c == '}' && chars.get(i + 1) == Some(&'}') {
            lit.push('}');
            i += 2;
        } else if c == '{' {
            let mut depth = 1;
            let mut j = i + 1;
            while j < chars.len() && depth > 0 {
                match chars[j] {
                    '{' | '[' | '(' => depth += 1,
                    '}' | ']' | ')' => depth -= 1,
                    _ => {}
                }
                if depth > 0 {
                    j += 1;
                }
            }
            if depth != 0 {
                return Err(syntax_error(line, "f-string: expecting '}'"));
            }
            let inner: String = chars[i + 1..j].iter().collect();
            // a format spec follows the last top-level colon
            let (expr_src, spec) = split_format_spec(&inner);
            if expr_src.trim().is_empty() {
                return Err(syntax_error(line, "f-string: empty expression not allowed"));
            }
            if !lit.is_empty() {
                parts.push(FPart::Lit(std::mem::take(&mut lit)));
            }
            let e = parse_expr(expr_src)
                .map_err(|_| syntax_error(line, "f-string: invalid expression"))?;
            parts.push(FPart::Expr(e, spec.map(str::to_string)));
            i = j + 1;
        } else if c == '}' {
            return Err(syntax_error(line, "f-string: single '}' is not allowed"));
        } else {
            lit.push(c);
            i += 1;
        }
    }
    if !lit.is_empty() {
        parts.push(FPart::Lit(lit));
    }
    Ok(parts)
}

fn split_format_spec(inner: &str) -> (&str, Option<&str>) {
    let mut depth = 0;
    let mut quote: Option<char> = None;
    for (i, c) in inner.char_indices() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '\'' | '"') => quote = Some(c),
            (None, '[' | '(' | '{') => depth += 1,
            (None, ']' | ')' | '}') => depth -= 1,
            (None, ':') if depth == 0 => return (&inner[..i], Some(&inner[i + 1..])),
            _ => {}
        }
    }
    (inner, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let p = parse("1 + 2 * 3").unwrap();
        assert_eq!(
            p[0].stmt,
            Stmt::Expr(Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Int(1)),
                Box::new(Expr::Bin(
                    BinOp::Mul,
                    Box::new(Expr::Int(2)),
                    Box::new(Expr::Int(3))
                ))
            ))
        );
    }

    #[test]
    fn statements_and_lines() {
        let p = parse("import pandas as pd\nx = 1; y = x\n\nprint(f'{x:.2f}', sep='')").unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(
            p[0].stmt,
            Stmt::Import(vec![("pandas".into(), "pd".into())])
        );
        assert_eq!(p[3].line, 4);
    }

    #[test]
    fn call_with_kwargs_and_index() {
        let p = parse("issue_river(df, top_n=7)[0]").unwrap();
        assert!(matches!(&p[0].stmt, Stmt::Expr(Expr::Index(..))));
    }

    #[test]
    fn blocks_are_rejected() {
        let e = parse("for x in y:\n    pass").unwrap_err();
        assert!(e.starts_with("SyntaxError"), "{e}");
        assert!(parse("x = = 2").is_err());
        assert!(parse("f(a=1, 2)").is_err());
        assert!(parse("x = (1,").is_err());
    }

    #[test]
    fn fstring_parts() {
        match &parse("f'a{b}c{d:>3}'").unwrap()[0].stmt {
            Stmt::Expr(Expr::FStr(parts)) => assert_eq!(parts.len(), 4),
            other => panic!("{other:?}"),
        }
        assert!(parse("f'{'").is_err());
    }
}

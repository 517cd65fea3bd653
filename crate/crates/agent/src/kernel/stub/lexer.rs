//! Tokenizer for the stub kernel's Python subset.

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str(String),
    /// Raw body of an f-string, placeholders unparsed.
    FStr(String),
    Op(&'static str),
    Newline,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: usize,
}

const OPS: &[&str] = &[
    "**=", "//=", "**", "//", "==", "!=", "<=", ">=", "->", "+=", "-=", "*=", "/=", "%=", "+", "-",
    "*", "/", "%", "<", ">", "=", "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "@", "~", "&",
    "|", "^",
];

pub fn syntax_error(line: usize, msg: &str) -> String {
    format!("SyntaxError: {msg} (line {line})")
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out: Vec<Token> = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut depth = 0usize;
    let mut at_line_start = true;
    let push_newline = |out: &mut Vec<Token>, line: usize| {
        if !matches!(
            out.last(),
            None | Some(Token {
                tok: Tok::Newline,
                ..
            })
        ) {
            out.push(Token {
                tok: Tok::Newline,
                line,
            });
        }
    };

    while i < chars.len() {
        let c = chars[i];
        if at_line_start && depth == 0 {
            let start = i;
            while i < chars.len() && (chars[i] == ' ' || chars[i] == '\t') {
                i += 1;
            }
            at_line_start = false;
            let blank = i >= chars.len() || chars[i] == '\n' || chars[i] == '#' || chars[i] == '\r';
            // a block body is left to the parser, which rejects the block
            let after_colon = out
                .iter()
                .rev()
                .nth(1)
                .is_some_and(|t| t.tok == Tok::Op(":"));
            if i > start && !blank && !after_colon {
                return Err(format!("IndentationError: unexpected indent (line {line})"));
            }
            continue;
        }
        match c {
            ' ' | '\t' | '\r' => i += 1,
            '\n' => {
                if depth == 0 {
                    push_newline(&mut out, line);
                    at_line_start = true;
                }
                line += 1;
                i += 1;
            }
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => {
                i += 2;
                line += 1;
            }
            c if c.is_ascii_digit()
                || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) =>
            {
                let start = i;
                let mut is_float = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_digit() || d == '_' {
                        i += 1;
                    } else if d == '.' && !is_float {
                        is_float = true;
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && chars
                            .get(i + 1)
                            .is_some_and(|n| n.is_ascii_digit() || *n == '-' || *n == '+')
                    {
                        is_float = true;
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
                let tok = if is_float {
                    Tok::Float(
                        text.parse()
                            .map_err(|_| syntax_error(line, "invalid number literal"))?,
                    )
                } else {
                    Tok::Int(
                        text.parse()
                            .map_err(|_| syntax_error(line, "integer literal too large"))?,
                    )
                };
                out.push(Token { tok, line });
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let lower = word.to_ascii_lowercase();
                let is_prefix = matches!(
                    lower.as_str(),
                    "f" | "r" | "b" | "rb" | "br" | "fr" | "rf" | "u"
                );
                if is_prefix && matches!(chars.get(i), Some('\'') | Some('"')) {
                    let raw = lower.contains('r');
                    let (body, next, lines) = read_string(&chars, i, raw, line)?;
                    i = next;
                    let tok = if lower.contains('f') {
                        Tok::FStr(body)
                    } else {
                        Tok::Str(body)
                    };
                    out.push(Token { tok, line });
                    line += lines;
                } else {
                    out.push(Token {
                        tok: Tok::Name(word),
                        line,
                    });
                }
            }
            '\'' | '"' => {
                let (body, next, lines) = read_string(&chars, i, false, line)?;
                i = next;
                out.push(Token {
                    tok: Tok::Str(body),
                    line,
                });
                line += lines;
            }
            _ => {
                let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
                let op = OPS
                    .iter()
                    .find(|op| rest.starts_with(**op))
                    .ok_or_else(|| syntax_error(line, &format!("invalid character {c:?}")))?;
                match *op {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => {
                        depth = depth
                            .checked_sub(1)
                            .ok_or_else(|| syntax_error(line, &format!("unmatched '{op}'")))?
                    }
                    _ => {}
                }
                out.push(Token {
                    tok: Tok::Op(op),
                    line,
                });
                i += op.len();
            }
        }
    }
    if depth > 0 {
        return Err(syntax_error(
            line,
            "unexpected EOF while parsing (unclosed bracket)",
        ));
    }
    push_newline(&mut out, line);
    out.push(Token {
        tok: Tok::Eof,
        line,
    });
    Ok(out)
}

/// Reads a quoted literal starting at `start`. Returns the body, the index
/// after the closing quote and the number of newlines consumed.
fn read_string(
    chars: &[char],
    start: usize,
    raw: bool,
    line: usize,
) -> Result<(String, usize, usize), String> {
    let q = chars[start];
    let triple = chars.get(start + 1) == Some(&q) && chars.get(start + 2) == Some(&q);
    let mut i = start + if triple { 3 } else { 1 };
    let mut body = String::new();
    let mut lines = 0;
    loop {
        let Some(&c) = chars.get(i) else {
            return Err(syntax_error(line, "unterminated string literal"));
        };
        if triple {
            if c == q && chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q) {
                return Ok((body, i + 3, lines));
            }
        } else if c == q {
            return Ok((body, i + 1, lines));
        } else if c == '\n' {
            return Err(syntax_error(line, "unterminated string literal"));
        }
        if c == '\n' {
            lines += 1;
        }
        if c == '\\' && !raw {
            let Some(&e) = chars.get(i + 1) else {
                return Err(syntax_error(line, "unterminated string literal"));
            };
            match e {
                'n' => body.push('\n'),
                't' => body.push('\t'),
                'r' => body.push('\r'),
                '0' => body.push('\0'),
                '\\' | '\'' | '"' => body.push(e),
                '\n' => lines += 1,
                other => {
                    body.push('\\');
                    body.push(other);
                }
            }
            i += 2;
            continue;
        }
        body.push(c);
        i += 1;
    }
}

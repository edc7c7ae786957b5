//! A small interpreter for straight-line Python: imports, assignments,
//! expressions and calls. Block statements are rejected.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{Map, Value as Json};

use super::value::{float_repr, Value};

pub type Namespace = BTreeMap<String, Value>;

pub const FINAL_ANSWER: &str = "final_answer";

/// How a block stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    Error { class: String, message: String },
    FinalAnswer(Value),
    /// The code asked the interpreter process to exit.
    Exit,
}

fn err<T>(class: &str, message: impl Into<String>) -> Result<T, Flow> {
    Err(Flow::Error {
        class: class.into(),
        message: message.into(),
    })
}

/// Forwards proxy calls to the host. Errors carry `(error_class, message)`.
pub trait ToolCaller {
    fn call(&mut self, tool: &str, args: Vec<Json>, kwargs: Map<String, Json>) -> Result<Json, (String, String)>;
}

// ---------------------------------------------------------------- lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str(String),
    FStr(String),
    Op(&'static str),
    Newline,
}

const OPS: [&str; 31] = [
    "**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "+", "-", "*", "/", "%", "<", ">", "=", "(", ")",
    "[", "]", "{", "}", ",", ":", ".", ";", "&", "|", "@",
];

fn syntax<T>(message: impl Into<String>) -> Result<T, Flow> {
    err("syntax-error", message)
}

fn lex(src: &str) -> Result<Vec<Tok>, Flow> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\n' => {
                if depth == 0 && !matches!(toks.last(), None | Some(Tok::Newline)) {
                    toks.push(Tok::Newline);
                }
                i += 1;
            }
            '\\' if chars.get(i + 1) == Some(&'\n') => i += 2,
            c if c.is_whitespace() => i += 1,
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(char::is_ascii_digit)) => {
                let start = i;
                let mut is_float = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_digit() || d == '_' {
                        i += 1;
                    } else if d == '.' && !is_float && chars.get(i + 1).is_none_or(|n| !n.is_alphabetic()) {
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
                if is_float {
                    toks.push(Tok::Float(text.parse().map_err(|_| Flow::Error {
                        class: "syntax-error".into(),
                        message: format!("invalid number {text}"),
                    })?));
                } else {
                    match text.parse() {
                        Ok(n) => toks.push(Tok::Int(n)),
                        Err(_) => return err("overflow-error", format!("integer literal {text} is too large")),
                    }
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let prefix = word.to_ascii_lowercase();
                let is_prefix = matches!(prefix.as_str(), "f" | "r" | "b" | "rb" | "br" | "fr" | "rf" | "u");
                if is_prefix && matches!(chars.get(i), Some('\'') | Some('"')) {
                    let (s, next) = lex_string(&chars, i, prefix.contains('r'))?;
                    i = next;
                    toks.push(if prefix.contains('f') { Tok::FStr(s) } else { Tok::Str(s) });
                } else {
                    toks.push(Tok::Name(word));
                }
            }
            '\'' | '"' => {
                let (s, next) = lex_string(&chars, i, false)?;
                i = next;
                toks.push(Tok::Str(s));
            }
            _ => {
                let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
                let Some(op) = OPS.iter().find(|op| rest.starts_with(**op)) else {
                    return syntax(format!("invalid character '{c}'"));
                };
                match *op {
                    "(" | "[" | "{" => depth += 1,
                    ")" | "]" | "}" => {
                        depth = depth.checked_sub(1).ok_or_else(|| Flow::Error {
                            class: "syntax-error".into(),
                            message: format!("unmatched '{op}'"),
                        })?
                    }
                    _ => {}
                }
                toks.push(Tok::Op(op));
                i += op.chars().count();
            }
        }
    }
    if depth != 0 {
        return syntax("unexpected EOF: unclosed bracket");
    }
    Ok(toks)
}

fn lex_string(chars: &[char], start: usize, raw: bool) -> Result<(String, usize), Flow> {
    let quote = chars[start];
    let triple = chars.get(start + 1) == Some(&quote) && chars.get(start + 2) == Some(&quote);
    let mut i = start + if triple { 3 } else { 1 };
    let mut out = String::new();
    loop {
        let Some(&c) = chars.get(i) else {
            return syntax("unterminated string literal");
        };
        if c == quote && (!triple || (chars.get(i + 1) == Some(&quote) && chars.get(i + 2) == Some(&quote))) {
            return Ok((out, i + if triple { 3 } else { 1 }));
        }
        if c == '\n' && !triple {
            return syntax("unterminated string literal");
        }
        if c == '\\' && !raw {
            let Some(&n) = chars.get(i + 1) else {
                return syntax("unterminated string literal");
            };
            i += 2;
            match n {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                'r' => out.push('\r'),
                '0' => out.push('\0'),
                '\\' | '\'' | '"' => out.push(n),
                '\n' => {}
                'u' => {
                    let hex: String = chars.get(i..i + 4).unwrap_or_default().iter().collect();
                    let ch = u32::from_str_radix(&hex, 16).ok().and_then(char::from_u32);
                    match ch {
                        Some(ch) if hex.len() == 4 => out.push(ch),
                        _ => return syntax("invalid \\u escape"),
                    }
                    i += 4;
                }
                other => {
                    out.push('\\');
                    out.push(other);
                }
            }
            continue;
        }
        out.push(c);
        i += 1;
    }
}

// ---------------------------------------------------------------- parser

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Lit(Value),
    Name(String),
    List(Vec<Expr>),
    Dict(Vec<(Expr, Expr)>),
    FStr(Vec<FPart>),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Bin(&'static str, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(Box<Expr>, Vec<(&'static str, Expr)>),
    Call(Box<Expr>, Vec<Expr>, Vec<(String, Expr)>),
    Index(Box<Expr>, Box<Expr>),
    Attr(Box<Expr>, String),
    IfElse(Box<Expr>, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum FPart {
    Lit(String),
    Expr(Expr, String),
}

#[derive(Debug, Clone, PartialEq)]
enum Stmt {
    /// (imported path, module bound, bound name)
    Import(Vec<(String, String, String)>),
    /// module path, (attribute, bound name)
    FromImport(String, Vec<(String, String)>),
    Assign(Vec<String>, Expr),
    AugAssign(String, &'static str, Expr),
    SetItem(String, Expr, Expr),
    Expr(Expr),
    Pass,
}

const BLOCK_KEYWORDS: [&str; 13] = [
    "if", "elif", "else", "for", "while", "def", "class", "try", "except", "finally", "with", "lambda", "return",
];

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_op(&self, op: &str) -> bool {
        matches!(self.peek(), Some(Tok::Op(o)) if *o == op)
    }

    fn peek_name(&self, name: &str) -> bool {
        matches!(self.peek(), Some(Tok::Name(n)) if n == name)
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.peek_op(op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_name(&mut self, name: &str) -> bool {
        if self.peek_name(name) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), Flow> {
        if self.eat_op(op) {
            Ok(())
        } else {
            syntax(format!("expected '{op}' but found {}", self.describe()))
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            None | Some(Tok::Newline) => "end of line".into(),
            Some(Tok::Name(n)) => format!("'{n}'"),
            Some(Tok::Op(o)) => format!("'{o}'"),
            Some(Tok::Int(i)) => i.to_string(),
            Some(Tok::Float(f)) => float_repr(*f),
            Some(Tok::Str(_)) | Some(Tok::FStr(_)) => "a string".into(),
        }
    }

    fn ident(&mut self) -> Result<String, Flow> {
        match self.peek() {
            Some(Tok::Name(n)) => {
                let n = n.clone();
                self.pos += 1;
                Ok(n)
            }
            _ => syntax(format!("expected a name but found {}", self.describe())),
        }
    }

    fn dotted(&mut self) -> Result<String, Flow> {
        let mut path = self.ident()?;
        while self.eat_op(".") {
            path.push('.');
            path.push_str(&self.ident()?);
        }
        Ok(path)
    }

    fn at_end(&self) -> bool {
        matches!(self.peek(), None | Some(Tok::Newline)) || self.peek_op(";")
    }

    fn statement(&mut self) -> Result<Stmt, Flow> {
        if let Some(Tok::Name(n)) = self.peek() {
            if BLOCK_KEYWORDS.contains(&n.as_str()) {
                return syntax(format!("'{n}' statements are not supported by this sandbox; write straight-line code"));
            }
        }
        if self.eat_name("pass") {
            return Ok(Stmt::Pass);
        }
        if self.eat_name("import") {
            let mut items = Vec::new();
            loop {
                let path = self.dotted()?;
                let top = path.split('.').next().unwrap_or_default().to_string();
                let (module, bind) = if self.eat_name("as") {
                    (path.clone(), self.ident()?)
                } else {
                    (top.clone(), top)
                };
                items.push((path, module, bind));
                if !self.eat_op(",") {
                    break;
                }
            }
            return Ok(Stmt::Import(items));
        }
        if self.eat_name("from") {
            let path = self.dotted()?;
            if !self.eat_name("import") {
                return syntax("expected 'import'");
            }
            let mut items = Vec::new();
            loop {
                let name = self.ident()?;
                let bind = if self.eat_name("as") { self.ident()? } else { name.clone() };
                items.push((name, bind));
                if !self.eat_op(",") {
                    break;
                }
            }
            return Ok(Stmt::FromImport(path, items));
        }

        // assignment targets: a = b = expr, a += expr, a[k] = expr
        let start = self.pos;
        let mut targets = Vec::new();
        loop {
            let save = self.pos;
            if let Some(Tok::Name(n)) = self.peek().cloned() {
                self.pos += 1;
                if self.peek_op("=") {
                    self.pos += 1;
                    targets.push(n);
                    continue;
                }
                if targets.is_empty() {
                    for op in ["+=", "-=", "*=", "/="] {
                        if self.eat_op(op) {
                            let value = self.expr()?;
                            return Ok(Stmt::AugAssign(n, &op[..1], value));
                        }
                    }
                    if self.peek_op("[") {
                        self.pos += 1;
                        let key = self.expr()?;
                        if self.eat_op("]") && self.eat_op("=") {
                            let value = self.expr()?;
                            return Ok(Stmt::SetItem(n, key, value));
                        }
                    }
                }
            }
            self.pos = save;
            break;
        }
        if targets.is_empty() {
            self.pos = start;
            return Ok(Stmt::Expr(self.expr()?));
        }
        Ok(Stmt::Assign(targets, self.expr()?))
    }

    fn expr(&mut self) -> Result<Expr, Flow> {
        let body = self.or_expr()?;
        if self.eat_name("if") {
            let cond = self.or_expr()?;
            if !self.eat_name("else") {
                return syntax("expected 'else' in conditional expression");
            }
            let other = self.expr()?;
            return Ok(Expr::IfElse(Box::new(cond), Box::new(body), Box::new(other)));
        }
        Ok(body)
    }

    fn or_expr(&mut self) -> Result<Expr, Flow> {
        let mut left = self.and_expr()?;
        while self.eat_name("or") {
            left = Expr::Or(Box::new(left), Box::new(self.and_expr()?));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, Flow> {
        let mut left = self.not_expr()?;
        while self.eat_name("and") {
            left = Expr::And(Box::new(left), Box::new(self.not_expr()?));
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, Flow> {
        if self.eat_name("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, Flow> {
        let first = self.sum()?;
        let mut rest = Vec::new();
        loop {
            let op = if let Some(Tok::Op(o)) = self.peek() {
                match *o {
                    "==" | "!=" | "<" | ">" | "<=" | ">=" => {
                        let o = *o;
                        self.pos += 1;
                        o
                    }
                    _ => break,
                }
            } else if self.eat_name("in") {
                "in"
            } else if self.peek_name("not") && matches!(self.toks.get(self.pos + 1), Some(Tok::Name(n)) if n == "in") {
                self.pos += 2;
                "not in"
            } else if self.eat_name("is") {
                if self.eat_name("not") {
                    "!="
                } else {
                    "=="
                }
            } else {
                break;
            };
            rest.push((op, self.sum()?));
        }
        Ok(if rest.is_empty() {
            first
        } else {
            Expr::Cmp(Box::new(first), rest)
        })
    }

    fn sum(&mut self) -> Result<Expr, Flow> {
        let mut left = self.term()?;
        loop {
            let op = if self.eat_op("+") {
                "+"
            } else if self.eat_op("-") {
                "-"
            } else {
                break;
            };
            left = Expr::Bin(op, Box::new(left), Box::new(self.term()?));
        }
        Ok(left)
    }

    fn term(&mut self) -> Result<Expr, Flow> {
        let mut left = self.unary()?;
        loop {
            let op = ["*", "/", "//", "%"].into_iter().find(|op| self.peek_op(op));
            let Some(op) = op else { break };
            self.pos += 1;
            left = Expr::Bin(op, Box::new(left), Box::new(self.unary()?));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expr, Flow> {
        if self.eat_op("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op("+") {
            return self.unary();
        }
        let base = self.postfix()?;
        if self.eat_op("**") {
            return Ok(Expr::Bin("**", Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Expr, Flow> {
        let mut e = self.atom()?;
        loop {
            if self.eat_op("(") {
                let (args, kwargs) = self.call_args()?;
                e = Expr::Call(Box::new(e), args, kwargs);
            } else if self.eat_op("[") {
                let idx = self.expr()?;
                if self.peek_op(":") {
                    return syntax("slices are not supported by this sandbox");
                }
                self.expect_op("]")?;
                e = Expr::Index(Box::new(e), Box::new(idx));
            } else if self.eat_op(".") {
                e = Expr::Attr(Box::new(e), self.ident()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn call_args(&mut self) -> Result<(Vec<Expr>, Vec<(String, Expr)>), Flow> {
        let mut args = Vec::new();
        let mut kwargs = Vec::new();
        while !self.eat_op(")") {
            let is_kw = matches!(self.peek(), Some(Tok::Name(_)))
                && matches!(self.toks.get(self.pos + 1), Some(Tok::Op("=")));
            if is_kw {
                let name = self.ident()?;
                self.pos += 1;
                kwargs.push((name, self.expr()?));
            } else {
                if !kwargs.is_empty() {
                    return syntax("positional argument follows keyword argument");
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

    fn atom(&mut self) -> Result<Expr, Flow> {
        let Some(tok) = self.peek().cloned() else {
            return syntax("unexpected end of input");
        };
        self.pos += 1;
        Ok(match tok {
            Tok::Int(i) => Expr::Lit(Value::Int(i)),
            Tok::Float(f) => Expr::Lit(Value::Float(f)),
            Tok::Str(mut s) => {
                // adjacent literals concatenate
                while let Some(Tok::Str(next)) = self.peek() {
                    s.push_str(next);
                    self.pos += 1;
                }
                Expr::Lit(Value::Str(s))
            }
            Tok::FStr(s) => Expr::FStr(parse_fstring(&s)?),
            Tok::Name(n) => match n.as_str() {
                "True" => Expr::Lit(Value::Bool(true)),
                "False" => Expr::Lit(Value::Bool(false)),
                "None" => Expr::Lit(Value::None),
                _ => Expr::Name(n),
            },
            Tok::Op("(") => {
                if self.eat_op(")") {
                    return Ok(Expr::List(Vec::new()));
                }
                let first = self.expr()?;
                if self.eat_op(",") {
                    // tuples are represented as lists
                    let mut items = vec![first];
                    while !self.eat_op(")") {
                        items.push(self.expr()?);
                        if !self.eat_op(",") {
                            self.expect_op(")")?;
                            break;
                        }
                    }
                    return Ok(Expr::List(items));
                }
                self.expect_op(")")?;
                first
            }
            Tok::Op("[") => {
                let mut items = Vec::new();
                while !self.eat_op("]") {
                    items.push(self.expr()?);
                    if self.peek_name("for") {
                        return syntax("comprehensions are not supported by this sandbox");
                    }
                    if !self.eat_op(",") {
                        self.expect_op("]")?;
                        break;
                    }
                }
                Expr::List(items)
            }
            Tok::Op("{") => {
                let mut pairs = Vec::new();
                while !self.eat_op("}") {
                    let k = self.expr()?;
                    self.expect_op(":")?;
                    let v = self.expr()?;
                    pairs.push((k, v));
                    if !self.eat_op(",") {
                        self.expect_op("}")?;
                        break;
                    }
                }
                Expr::Dict(pairs)
            }
            Tok::Newline => return syntax("unexpected end of line"),
            Tok::Op(o) => return syntax(format!("unexpected '{o}'")),
        })
    }
}

fn parse_fstring(s: &str) -> Result<Vec<FPart>, Flow> {
    let mut parts = Vec::new();
    let mut lit = String::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '{' if chars.get(i + 1) == Some(&'{') => {
                lit.push('{');
                i += 2;
            }
            '}' if chars.get(i + 1) == Some(&'}') => {
                lit.push('}');
                i += 2;
            }
            '{' => {
                let mut depth = 0;
                let mut j = i + 1;
                let mut colon = None;
                while j < chars.len() {
                    match chars[j] {
                        '[' | '(' | '{' => depth += 1,
                        ']' | ')' => depth -= 1,
                        '}' if depth == 0 => break,
                        '}' => depth -= 1,
                        ':' if depth == 0 && colon.is_none() => colon = Some(j),
                        _ => {}
                    }
                    j += 1;
                }
                if j >= chars.len() {
                    return syntax("f-string: expecting '}'");
                }
                let expr_end = colon.unwrap_or(j);
                let src: String = chars[i + 1..expr_end].iter().collect();
                let spec: String = colon.map(|c| chars[c + 1..j].iter().collect()).unwrap_or_default();
                let toks = lex(&src)?;
                let mut p = Parser { toks, pos: 0 };
                let e = p.expr()?;
                if p.pos != p.toks.len() {
                    return syntax("f-string: invalid expression");
                }
                if !lit.is_empty() {
                    parts.push(FPart::Lit(std::mem::take(&mut lit)));
                }
                parts.push(FPart::Expr(e, spec));
                i = j + 1;
            }
            '}' => return syntax("f-string: single '}' is not allowed"),
            c => {
                lit.push(c);
                i += 1;
            }
        }
    }
    if !lit.is_empty() {
        parts.push(FPart::Lit(lit));
    }
    Ok(parts)
}

fn parse_block(code: &str) -> Result<Vec<Stmt>, Flow> {
    let toks = lex(code)?;
    let mut p = Parser { toks, pos: 0 };
    let mut stmts = Vec::new();
    while p.pos < p.toks.len() {
        if matches!(p.peek(), Some(Tok::Newline)) || p.peek_op(";") {
            p.pos += 1;
            continue;
        }
        stmts.push(p.statement()?);
        if !p.at_end() {
            return syntax(format!("invalid syntax near {}", p.describe()));
        }
    }
    Ok(stmts)
}

// ---------------------------------------------------------------- evaluator

const BUILTINS: [&str; 19] = [
    "print", "len", "str", "repr", "int", "float", "bool", "round", "sum", "min", "max", "sorted", "list", "abs",
    "range", "exit", "quit", "isinstance", "type",
];

const MUTATING_METHODS: [&str; 6] = ["append", "extend", "update", "pop", "insert", "clear"];

pub struct Interp<'a> {
    pub ns: &'a mut Namespace,
    pub proxies: &'a [String],
    pub whitelist: &'a [String],
    pub caller: &'a mut dyn ToolCaller,
    pub stdout: &'a mut String,
}

impl Interp<'_> {
    /// Parses the whole block first (a syntax error runs nothing), then
    /// executes it statement by statement.
    pub fn run(&mut self, code: &str) -> Result<(), Flow> {
        let stmts = parse_block(code)?;
        for stmt in &stmts {
            self.exec(stmt)?;
        }
        Ok(())
    }

    fn is_proxy(&self, name: &str) -> bool {
        name == FINAL_ANSWER || self.proxies.iter().any(|p| p == name)
    }

    fn bind(&mut self, name: &str, value: Value) -> Result<(), Flow> {
        if self.is_proxy(name) {
            return err("proxy-shadowing", format!("'{name}' is a tool and cannot be reassigned"));
        }
        self.ns.insert(name.to_string(), value);
        Ok(())
    }

    fn check_import(&self, module: &str) -> Result<(), Flow> {
        let top = module.split('.').next().unwrap_or_default();
        if self.whitelist.iter().any(|w| w == top) {
            Ok(())
        } else {
            err(
                "import-violation",
                format!(
                    "import of '{module}' is not allowed; authorized imports: [{}]",
                    self.whitelist.join(", ")
                ),
            )
        }
    }

    fn exec(&mut self, stmt: &Stmt) -> Result<(), Flow> {
        match stmt {
            Stmt::Pass => Ok(()),
            Stmt::Import(items) => {
                for (path, _, _) in items {
                    self.check_import(path)?;
                }
                for (_, module, bind) in items {
                    self.bind(bind, Value::Module(module.clone()))?;
                }
                Ok(())
            }
            Stmt::FromImport(module, items) => {
                self.check_import(module)?;
                for (name, bind) in items {
                    let v = module_attr(module, name)?;
                    self.bind(bind, v)?;
                }
                Ok(())
            }
            Stmt::Assign(targets, e) => {
                let v = self.eval(e)?;
                for t in targets {
                    self.bind(t, v.clone())?;
                }
                Ok(())
            }
            Stmt::AugAssign(name, op, e) => {
                let cur = self.lookup(name)?;
                let rhs = self.eval(e)?;
                let v = binop(op, &cur, &rhs)?;
                self.bind(name, v)
            }
            Stmt::SetItem(name, k, e) => {
                let key = self.eval(k)?;
                let v = self.eval(e)?;
                let mut target = self.lookup(name)?;
                match &mut target {
                    Value::Dict(pairs) => match pairs.iter_mut().find(|(pk, _)| pk.py_eq(&key)) {
                        Some(slot) => slot.1 = v,
                        None => pairs.push((key, v)),
                    },
                    Value::List(items) => {
                        let i = list_index(items.len(), &key)?;
                        items[i] = v;
                    }
                    other => {
                        return err(
                            "type-error",
                            format!("'{}' object does not support item assignment", other.type_name()),
                        )
                    }
                }
                self.bind(name, target)
            }
            Stmt::Expr(e) => self.eval(e).map(|_| ()),
        }
    }

    fn lookup(&self, name: &str) -> Result<Value, Flow> {
        if self.is_proxy(name) {
            return Ok(Value::Proxy(name.to_string()));
        }
        if let Some(v) = self.ns.get(name) {
            return Ok(v.clone());
        }
        if BUILTINS.contains(&name) {
            return Ok(Value::Builtin(name.to_string()));
        }
        err("name-error", format!("name '{name}' is not defined"))
    }

    fn eval(&mut self, e: &Expr) -> Result<Value, Flow> {
        match e {
            Expr::Lit(v) => Ok(v.clone()),
            Expr::Name(n) => self.lookup(n),
            Expr::List(items) => Ok(Value::List(items.iter().map(|i| self.eval(i)).collect::<Result<_, _>>()?)),
            Expr::Dict(pairs) => {
                let mut out: Vec<(Value, Value)> = Vec::new();
                for (k, v) in pairs {
                    let k = self.eval(k)?;
                    let v = self.eval(v)?;
                    match out.iter_mut().find(|(pk, _)| pk.py_eq(&k)) {
                        Some(slot) => slot.1 = v,
                        None => out.push((k, v)),
                    }
                }
                Ok(Value::Dict(out))
            }
            Expr::FStr(parts) => {
                let mut s = String::new();
                for part in parts {
                    match part {
                        FPart::Lit(l) => s.push_str(l),
                        FPart::Expr(e, spec) => {
                            let v = self.eval(e)?;
                            s.push_str(&format_spec(&v, spec)?);
                        }
                    }
                }
                Ok(Value::Str(s))
            }
            Expr::Neg(inner) => match self.eval(inner)? {
                Value::Int(i) => i
                    .checked_neg()
                    .map(Value::Int)
                    .ok_or(())
                    .or_else(|_| err("overflow-error", "integer overflow")),
                Value::Bool(b) => Ok(Value::Int(-i64::from(b))),
                Value::Float(f) => Ok(Value::Float(-f)),
                other => err("type-error", format!("bad operand type for unary -: '{}'", other.type_name())),
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
            Expr::IfElse(cond, a, b) => {
                if self.eval(cond)?.truthy() {
                    self.eval(a)
                } else {
                    self.eval(b)
                }
            }
            Expr::Bin(op, a, b) => {
                let l = self.eval(a)?;
                let r = self.eval(b)?;
                binop(op, &l, &r)
            }
            Expr::Cmp(first, rest) => {
                let mut left = self.eval(first)?;
                for (op, e) in rest {
                    let right = self.eval(e)?;
                    if !compare(op, &left, &right)? {
                        return Ok(Value::Bool(false));
                    }
                    left = right;
                }
                Ok(Value::Bool(true))
            }
            Expr::Index(obj, idx) => {
                let o = self.eval(obj)?;
                let i = self.eval(idx)?;
                index(&o, &i)
            }
            Expr::Attr(obj, name) => {
                let o = self.eval(obj)?;
                match o {
                    Value::Module(m) => module_attr(&m, name),
                    other => {
                        if method_exists(&other, name) {
                            Ok(Value::Method(Box::new(other), name.clone()))
                        } else {
                            err(
                                "attribute-error",
                                format!("'{}' object has no attribute '{name}'", other.type_name()),
                            )
                        }
                    }
                }
            }
            Expr::Call(callee, args, kwargs) => {
                let args: Vec<Value> = args.iter().map(|a| self.eval(a)).collect::<Result<_, _>>()?;
                let mut kw = Vec::with_capacity(kwargs.len());
                for (k, v) in kwargs {
                    kw.push((k.clone(), self.eval(v)?));
                }
                // mutating method on a plain name writes the result back
                if let Expr::Attr(obj, method) = callee.as_ref() {
                    if let Expr::Name(var) = obj.as_ref() {
                        if MUTATING_METHODS.contains(&method.as_str()) && !self.is_proxy(var) {
                            let mut target = self.lookup(var)?;
                            let out = call_method(&mut target, method, args, &kw)?;
                            self.bind(var, target)?;
                            return Ok(out);
                        }
                    }
                }
                let f = self.eval(callee)?;
                self.call(f, args, kw)
            }
        }
    }

    fn call(&mut self, f: Value, args: Vec<Value>, kwargs: Vec<(String, Value)>) -> Result<Value, Flow> {
        match f {
            Value::Proxy(name) if name == FINAL_ANSWER => {
                let v = args
                    .into_iter()
                    .next()
                    .or_else(|| kwargs.into_iter().next().map(|(_, v)| v))
                    .unwrap_or(Value::None);
                Err(Flow::FinalAnswer(v))
            }
            Value::Proxy(name) => {
                let jargs = args.iter().map(Value::to_json).collect::<Result<Vec<_>, _>>();
                let jargs = jargs.or_else(|m| err("type-error", m))?;
                let mut jkw = Map::new();
                for (k, v) in &kwargs {
                    jkw.insert(k.clone(), v.to_json().or_else(|m| err("type-error", m))?);
                }
                match self.caller.call(&name, jargs, jkw) {
                    Ok(j) => Ok(Value::from_json(&j)),
                    Err((class, message)) => err(&class, message),
                }
            }
            Value::Builtin(name) => self.builtin(&name, args, kwargs),
            Value::ModuleFn(m, name) => module_call(&m, &name, &args),
            Value::Method(obj, name) => {
                let mut obj = *obj;
                call_method(&mut obj, &name, args, &kwargs)
            }
            other => err("type-error", format!("'{}' object is not callable", other.type_name())),
        }
    }

    fn builtin(&mut self, name: &str, args: Vec<Value>, kwargs: Vec<(String, Value)>) -> Result<Value, Flow> {
        let kw = |k: &str| kwargs.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
        let one = |args: &[Value]| -> Result<Value, Flow> {
            match args {
                [v] => Ok(v.clone()),
                _ => err("type-error", format!("{name}() takes exactly one argument ({} given)", args.len())),
            }
        };
        match name {
            "print" => {
                let sep = kw("sep").map_or(" ".to_string(), |v| v.to_str());
                let end = kw("end").map_or("\n".to_string(), |v| v.to_str());
                let parts: Vec<String> = args.iter().map(Value::to_str).collect();
                self.stdout.push_str(&parts.join(&sep));
                self.stdout.push_str(&end);
                Ok(Value::None)
            }
            "exit" | "quit" => Err(Flow::Exit),
            "len" => match one(&args)? {
                Value::Str(s) => Ok(Value::Int(s.chars().count() as i64)),
                Value::List(l) => Ok(Value::Int(l.len() as i64)),
                Value::Dict(d) => Ok(Value::Int(d.len() as i64)),
                other => err("type-error", format!("object of type '{}' has no len()", other.type_name())),
            },
            "str" => Ok(Value::Str(args.first().map_or(String::new(), Value::to_str))),
            "repr" => Ok(Value::Str(one(&args)?.repr())),
            "bool" => Ok(Value::Bool(args.first().is_some_and(Value::truthy))),
            "int" => match args.first().cloned().unwrap_or(Value::Int(0)) {
                Value::Float(f) if f.is_finite() => Ok(Value::Int(f.trunc() as i64)),
                Value::Str(s) => s
                    .trim()
                    .replace('_', "")
                    .parse()
                    .map(Value::Int)
                    .or_else(|_| err("value-error", format!("invalid literal for int() with base 10: {}", Value::Str(s).repr()))),
                v @ (Value::Int(_) | Value::Bool(_)) => Ok(Value::Int(v.as_int().unwrap_or_default())),
                other => err("type-error", format!("int() argument must be a string or a number, not '{}'", other.type_name())),
            },
            "float" => match args.first().cloned().unwrap_or(Value::Float(0.0)) {
                Value::Str(s) => s
                    .trim()
                    .parse()
                    .map(Value::Float)
                    .or_else(|_| err("value-error", format!("could not convert string to float: {}", Value::Str(s).repr()))),
                v if v.is_number() => Ok(Value::Float(v.as_f64().unwrap_or_default())),
                other => err("type-error", format!("float() argument must be a string or a number, not '{}'", other.type_name())),
            },
            "abs" => match one(&args)? {
                Value::Int(i) => Ok(Value::Int(i.abs())),
                Value::Bool(b) => Ok(Value::Int(i64::from(b))),
                Value::Float(f) => Ok(Value::Float(f.abs())),
                other => err("type-error", format!("bad operand type for abs(): '{}'", other.type_name())),
            },
            "round" => {
                let x = args.first().cloned().unwrap_or(Value::None);
                let nd = args.get(1).cloned().or_else(|| kw("ndigits"));
                round(&x, nd.as_ref())
            }
            "range" => {
                let ints: Vec<i64> = args
                    .iter()
                    .map(|a| a.as_int().ok_or(()))
                    .collect::<Result<_, _>>()
                    .or_else(|_| err("type-error", "range() arguments must be integers"))?;
                let (start, stop, step) = match ints.as_slice() {
                    [stop] => (0, *stop, 1),
                    [start, stop] => (*start, *stop, 1),
                    [start, stop, step] => (*start, *stop, *step),
                    _ => return err("type-error", "range expected 1 to 3 arguments"),
                };
                if step == 0 {
                    return err("value-error", "range() arg 3 must not be zero");
                }
                let mut out = Vec::new();
                let mut i = start;
                while (step > 0 && i < stop) || (step < 0 && i > stop) {
                    out.push(Value::Int(i));
                    if out.len() > 1_000_000 {
                        return err("memory-error", "range too large for this sandbox");
                    }
                    i += step;
                }
                Ok(Value::List(out))
            }
            "list" => match args.first() {
                None => Ok(Value::List(Vec::new())),
                Some(v) => iterate(v).map(Value::List),
            },
            "sum" => {
                let items = iterate(&one(&args)?)?;
                items.iter().try_fold(Value::Int(0), |acc, v| binop("+", &acc, v))
            }
            "min" | "max" => {
                let items = if args.len() == 1 { iterate(&args[0])? } else { args };
                let mut best: Option<Value> = None;
                for v in items {
                    best = Some(match best {
                        None => v,
                        Some(b) => {
                            let ord = v.py_cmp(&b).ok_or(()).or_else(|_| {
                                err("type-error", format!("'<' not supported between '{}' and '{}'", v.type_name(), b.type_name()))
                            })?;
                            let better = if name == "min" { ord.is_lt() } else { ord.is_gt() };
                            if better {
                                v
                            } else {
                                b
                            }
                        }
                    });
                }
                best.ok_or(()).or_else(|_| err("value-error", format!("{name}() arg is an empty sequence")))
            }
            "sorted" => {
                let mut items = iterate(&one(&args)?)?;
                sort_values(&mut items)?;
                if kw("reverse").is_some_and(|v| v.truthy()) {
                    items.reverse();
                }
                Ok(Value::List(items))
            }
            "isinstance" => err("type-error", "isinstance() is not supported by this sandbox"),
            "type" => Ok(Value::Str(format!("<class '{}'>", one(&args)?.type_name()))),
            _ => err("name-error", format!("name '{name}' is not defined")),
        }
    }
}

fn sort_values(items: &mut [Value]) -> Result<(), Flow> {
    let mut failed = None;
    items.sort_by(|a, b| {
        a.py_cmp(b).unwrap_or_else(|| {
            failed = Some((a.type_name(), b.type_name()));
            std::cmp::Ordering::Equal
        })
    });
    match failed {
        Some((a, b)) => err("type-error", format!("'<' not supported between instances of '{a}' and '{b}'")),
        None => Ok(()),
    }
}

fn iterate(v: &Value) -> Result<Vec<Value>, Flow> {
    match v {
        Value::List(l) => Ok(l.clone()),
        Value::Str(s) => Ok(s.chars().map(|c| Value::Str(c.to_string())).collect()),
        Value::Dict(d) => Ok(d.iter().map(|(k, _)| k.clone()).collect()),
        other => err("type-error", format!("'{}' object is not iterable", other.type_name())),
    }
}

fn round(x: &Value, ndigits: Option<&Value>) -> Result<Value, Flow> {
    let nd = match ndigits {
        None | Some(Value::None) => None,
        Some(v) => Some(v.as_int().ok_or(()).or_else(|_| err("type-error", "ndigits must be an integer"))?),
    };
    match (x, nd) {
        (Value::Int(_) | Value::Bool(_), _) => Ok(Value::Int(x.as_int().unwrap_or_default())),
        (Value::Float(f), None) => Ok(Value::Int(f.round_ties_even() as i64)),
        (Value::Float(f), Some(n)) => {
            let scale = 10f64.powi(n as i32);
            Ok(Value::Float((f * scale).round_ties_even() / scale))
        }
        (other, _) => err("type-error", format!("type {} doesn't define __round__", other.type_name())),
    }
}

fn format_spec(v: &Value, spec: &str) -> Result<String, Flow> {
    if spec.is_empty() {
        return Ok(v.to_str());
    }
    if let Some(prec) = spec.strip_prefix('.').and_then(|s| s.strip_suffix('f')) {
        let p: usize = prec.parse().or_else(|_| err("value-error", format!("invalid format spec '{spec}'")))?;
        let f = v.as_f64().ok_or(()).or_else(|_| {
            err("value-error", format!("unknown format code 'f' for object of type '{}'", v.type_name()))
        })?;
        return Ok(format!("{f:.p$}"));
    }
    if spec == "," {
        if let Some(i) = v.as_int() {
            let digits = i.unsigned_abs().to_string();
            let mut out = String::new();
            for (n, c) in digits.chars().enumerate() {
                if n > 0 && (digits.len() - n) % 3 == 0 {
                    out.push(',');
                }
                out.push(c);
            }
            return Ok(if i < 0 { format!("-{out}") } else { out });
        }
    }
    err("value-error", format!("format spec '{spec}' is not supported by this sandbox"))
}

fn list_index(len: usize, key: &Value) -> Result<usize, Flow> {
    let Some(i) = key.as_int() else {
        return err("type-error", format!("list indices must be integers, not {}", key.type_name()));
    };
    let idx = if i < 0 { i + len as i64 } else { i };
    if idx < 0 || idx >= len as i64 {
        return err("index-error", "list index out of range");
    }
    Ok(idx as usize)
}

fn index(obj: &Value, key: &Value) -> Result<Value, Flow> {
    match obj {
        Value::List(items) => Ok(items[list_index(items.len(), key)?].clone()),
        Value::Str(s) => {
            let chars: Vec<char> = s.chars().collect();
            let i = list_index(chars.len(), key).map_err(|_| Flow::Error {
                class: "index-error".into(),
                message: "string index out of range".into(),
            })?;
            Ok(Value::Str(chars[i].to_string()))
        }
        Value::Dict(pairs) => Value::dict_get(pairs, key)
            .cloned()
            .ok_or(())
            .or_else(|_| err("key-error", key.repr())),
        other => err("type-error", format!("'{}' object is not subscriptable", other.type_name())),
    }
}

fn num_pair(l: &Value, r: &Value) -> Option<(f64, f64)> {
    Some((l.as_f64()?, r.as_f64()?))
}

fn binop(op: &str, l: &Value, r: &Value) -> Result<Value, Flow> {
    let unsupported = || {
        err(
            "type-error",
            format!(
                "unsupported operand type(s) for {op}: '{}' and '{}'",
                l.type_name(),
                r.type_name()
            ),
        )
    };
    let overflow = || err("overflow-error", "integer overflow");
    if let (Some(a), Some(b)) = (l.as_int(), r.as_int()) {
        return match op {
            "+" => a.checked_add(b).map(Value::Int).map_or_else(overflow, Ok),
            "-" => a.checked_sub(b).map(Value::Int).map_or_else(overflow, Ok),
            "*" => a.checked_mul(b).map(Value::Int).map_or_else(overflow, Ok),
            "/" if b == 0 => err("zero-division", "division by zero"),
            "/" => Ok(Value::Float(a as f64 / b as f64)),
            "//" | "%" if b == 0 => err("zero-division", "integer division or modulo by zero"),
            "//" => {
                let q = a / b;
                Ok(Value::Int(if a % b != 0 && ((a < 0) != (b < 0)) { q - 1 } else { q }))
            }
            "%" => {
                let m = a % b;
                Ok(Value::Int(if m != 0 && ((m < 0) != (b < 0)) { m + b } else { m }))
            }
            "**" if b >= 0 => u32::try_from(b)
                .ok()
                .and_then(|e| a.checked_pow(e))
                .map(Value::Int)
                .map_or_else(overflow, Ok),
            "**" => Ok(Value::Float((a as f64).powf(b as f64))),
            _ => unsupported(),
        };
    }
    if let Some((a, b)) = num_pair(l, r) {
        return match op {
            "+" => Ok(Value::Float(a + b)),
            "-" => Ok(Value::Float(a - b)),
            "*" => Ok(Value::Float(a * b)),
            "/" | "//" | "%" if b == 0.0 => err("zero-division", "float division by zero"),
            "/" => Ok(Value::Float(a / b)),
            "//" => Ok(Value::Float((a / b).floor())),
            "%" => Ok(Value::Float(a - b * (a / b).floor())),
            "**" => Ok(Value::Float(a.powf(b))),
            _ => unsupported(),
        };
    }
    match (op, l, r) {
        ("+", Value::Str(a), Value::Str(b)) => Ok(Value::Str(format!("{a}{b}"))),
        ("+", Value::List(a), Value::List(b)) => Ok(Value::List(a.iter().chain(b).cloned().collect())),
        ("*", Value::Str(s), n) | ("*", n, Value::Str(s)) if n.as_int().is_some() => {
            Ok(Value::Str(s.repeat(n.as_int().unwrap_or(0).max(0) as usize)))
        }
        ("*", Value::List(items), n) | ("*", n, Value::List(items)) if n.as_int().is_some() => {
            let times = n.as_int().unwrap_or(0).max(0) as usize;
            Ok(Value::List(items.iter().cloned().cycle().take(items.len() * times).collect()))
        }
        ("%", Value::Str(_), _) => err("type-error", "%-formatting is not supported by this sandbox"),
        _ => unsupported(),
    }
}

fn compare(op: &str, l: &Value, r: &Value) -> Result<bool, Flow> {
    match op {
        "==" => Ok(l.py_eq(r)),
        "!=" => Ok(!l.py_eq(r)),
        "in" | "not in" => {
            let found = match r {
                Value::Str(hay) => match l {
                    Value::Str(needle) => hay.contains(needle.as_str()),
                    other => {
                        return err(
                            "type-error",
                            format!("'in <string>' requires string as left operand, not {}", other.type_name()),
                        )
                    }
                },
                Value::List(items) => items.iter().any(|i| i.py_eq(l)),
                Value::Dict(pairs) => pairs.iter().any(|(k, _)| k.py_eq(l)),
                other => return err("type-error", format!("argument of type '{}' is not iterable", other.type_name())),
            };
            Ok(found == (op == "in"))
        }
        _ => {
            let Some(ord) = l.py_cmp(r) else {
                return err(
                    "type-error",
                    format!(
                        "'{op}' not supported between instances of '{}' and '{}'",
                        l.type_name(),
                        r.type_name()
                    ),
                );
            };
            Ok(match op {
                "<" => ord.is_lt(),
                ">" => ord.is_gt(),
                "<=" => ord.is_le(),
                _ => ord.is_ge(),
            })
        }
    }
}

fn method_exists(v: &Value, name: &str) -> bool {
    let names: &[&str] = match v {
        Value::Str(_) => &[
            "upper", "lower", "strip", "lstrip", "rstrip", "split", "replace", "startswith", "endswith", "join",
            "find", "count", "isdigit", "title",
        ],
        Value::List(_) => &["append", "extend", "pop", "insert", "clear", "index", "count", "copy"],
        Value::Dict(_) => &["get", "keys", "values", "items", "update", "pop", "clear", "copy"],
        _ => &[],
    };
    names.contains(&name)
}

fn str_arg(args: &[Value], i: usize, method: &str) -> Result<String, Flow> {
    match args.get(i) {
        Some(Value::Str(s)) => Ok(s.clone()),
        Some(other) => err("type-error", format!("{method}() argument must be str, not {}", other.type_name())),
        None => err("type-error", format!("{method}() missing required argument")),
    }
}

fn call_method(obj: &mut Value, name: &str, args: Vec<Value>, kwargs: &[(String, Value)]) -> Result<Value, Flow> {
    if !method_exists(obj, name) {
        return err(
            "attribute-error",
            format!("'{}' object has no attribute '{name}'", obj.type_name()),
        );
    }
    let kw = |k: &str| kwargs.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
    match obj {
        Value::Str(s) => {
            let s = s.clone();
            Ok(match name {
                "upper" => Value::Str(s.to_uppercase()),
                "lower" => Value::Str(s.to_lowercase()),
                "title" => Value::Str(
                    s.split(' ')
                        .map(|w| {
                            let mut c = w.chars();
                            c.next()
                                .map(|f| f.to_uppercase().chain(c.flat_map(char::to_lowercase)).collect())
                                .unwrap_or_default()
                        })
                        .collect::<Vec<String>>()
                        .join(" "),
                ),
                "strip" | "lstrip" | "rstrip" => {
                    let set: Option<Vec<char>> = match args.first() {
                        Some(Value::Str(c)) => Some(c.chars().collect()),
                        _ => None,
                    };
                    let pred = |c: char| set.as_ref().map_or(c.is_whitespace(), |s| s.contains(&c));
                    Value::Str(match name {
                        "strip" => s.trim_matches(pred).to_string(),
                        "lstrip" => s.trim_start_matches(pred).to_string(),
                        _ => s.trim_end_matches(pred).to_string(),
                    })
                }
                "split" => {
                    let parts: Vec<Value> = match args.first().or(kw("sep").as_ref()) {
                        Some(Value::Str(sep)) if sep.is_empty() => return err("value-error", "empty separator"),
                        Some(Value::Str(sep)) => s.split(sep.as_str()).map(|p| Value::Str(p.into())).collect(),
                        _ => s.split_whitespace().map(|p| Value::Str(p.into())).collect(),
                    };
                    Value::List(parts)
                }
                "replace" => Value::Str(s.replace(&str_arg(&args, 0, name)?, &str_arg(&args, 1, name)?)),
                "startswith" => Value::Bool(s.starts_with(&str_arg(&args, 0, name)?)),
                "endswith" => Value::Bool(s.ends_with(&str_arg(&args, 0, name)?)),
                "find" => Value::Int(
                    s.find(&str_arg(&args, 0, name)?)
                        .map_or(-1, |b| s[..b].chars().count() as i64),
                ),
                "count" => Value::Int(s.matches(&str_arg(&args, 0, name)?).count() as i64),
                "isdigit" => Value::Bool(!s.is_empty() && s.chars().all(|c| c.is_ascii_digit())),
                _ => {
                    let items = iterate(args.first().unwrap_or(&Value::None))?;
                    let mut parts = Vec::with_capacity(items.len());
                    for item in items {
                        match item {
                            Value::Str(p) => parts.push(p),
                            other => {
                                return err(
                                    "type-error",
                                    format!("sequence item: expected str instance, {} found", other.type_name()),
                                )
                            }
                        }
                    }
                    Value::Str(parts.join(&s))
                }
            })
        }
        Value::List(items) => Ok(match name {
            "append" => {
                items.push(args.into_iter().next().unwrap_or(Value::None));
                Value::None
            }
            "extend" => {
                items.extend(iterate(args.first().unwrap_or(&Value::None))?);
                Value::None
            }
            "insert" => {
                let at = args.first().and_then(Value::as_int).unwrap_or(0);
                let at = if at < 0 { (at + items.len() as i64).max(0) } else { at.min(items.len() as i64) };
                items.insert(at as usize, args.get(1).cloned().unwrap_or(Value::None));
                Value::None
            }
            "pop" => {
                if items.is_empty() {
                    return err("index-error", "pop from empty list");
                }
                let i = match args.first() {
                    Some(k) => list_index(items.len(), k)?,
                    None => items.len() - 1,
                };
                items.remove(i)
            }
            "clear" => {
                items.clear();
                Value::None
            }
            "index" => {
                let target = args.first().cloned().unwrap_or(Value::None);
                match items.iter().position(|v| v.py_eq(&target)) {
                    Some(i) => Value::Int(i as i64),
                    None => return err("value-error", format!("{} is not in list", target.repr())),
                }
            }
            "count" => {
                let target = args.first().cloned().unwrap_or(Value::None);
                Value::Int(items.iter().filter(|v| v.py_eq(&target)).count() as i64)
            }
            _ => Value::List(items.clone()),
        }),
        Value::Dict(pairs) => Ok(match name {
            "get" => {
                let key = args.first().cloned().unwrap_or(Value::None);
                let default = args.get(1).cloned().or_else(|| kw("default")).unwrap_or(Value::None);
                Value::dict_get(pairs, &key).cloned().unwrap_or(default)
            }
            "keys" => Value::List(pairs.iter().map(|(k, _)| k.clone()).collect()),
            "values" => Value::List(pairs.iter().map(|(_, v)| v.clone()).collect()),
            "items" => Value::List(pairs.iter().map(|(k, v)| Value::List(vec![k.clone(), v.clone()])).collect()),
            "update" => {
                if let Some(Value::Dict(other)) = args.first() {
                    for (k, v) in other {
                        match pairs.iter_mut().find(|(pk, _)| pk.py_eq(k)) {
                            Some(slot) => slot.1 = v.clone(),
                            None => pairs.push((k.clone(), v.clone())),
                        }
                    }
                    Value::None
                } else {
                    return err("type-error", "update() expects a dict");
                }
            }
            "pop" => {
                let key = args.first().cloned().unwrap_or(Value::None);
                match pairs.iter().position(|(k, _)| k.py_eq(&key)) {
                    Some(i) => pairs.remove(i).1,
                    None => match args.get(1) {
                        Some(d) => d.clone(),
                        None => return err("key-error", key.repr()),
                    },
                }
            }
            "clear" => {
                pairs.clear();
                Value::None
            }
            _ => Value::Dict(pairs.clone()),
        }),
        other => err("attribute-error", format!("'{}' object has no attribute '{name}'", other.type_name())),
    }
}

fn module_attr(module: &str, name: &str) -> Result<Value, Flow> {
    let top = module.split('.').next().unwrap_or_default();
    let known: &[&str] = match top {
        "math" => &["sqrt", "floor", "ceil", "fabs", "log", "log10", "exp", "pow", "isclose"],
        "time" => &["sleep", "time"],
        "json" => &["dumps", "loads"],
        "statistics" => &["mean", "median"],
        _ => &[],
    };
    match (top, name) {
        ("math", "pi") => Ok(Value::Float(std::f64::consts::PI)),
        ("math", "e") => Ok(Value::Float(std::f64::consts::E)),
        _ if known.contains(&name) => Ok(Value::ModuleFn(top.to_string(), name.to_string())),
        _ => err("attribute-error", format!("module '{module}' has no attribute '{name}'")),
    }
}

fn module_call(module: &str, name: &str, args: &[Value]) -> Result<Value, Flow> {
    let num = |i: usize| -> Result<f64, Flow> {
        args.get(i)
            .and_then(Value::as_f64)
            .ok_or(())
            .or_else(|_| err("type-error", format!("{module}.{name}() expects a number")))
    };
    match (module, name) {
        ("math", "sqrt") => {
            let x = num(0)?;
            if x < 0.0 {
                err("value-error", "math domain error")
            } else {
                Ok(Value::Float(x.sqrt()))
            }
        }
        ("math", "floor") => Ok(Value::Int(num(0)?.floor() as i64)),
        ("math", "ceil") => Ok(Value::Int(num(0)?.ceil() as i64)),
        ("math", "fabs") => Ok(Value::Float(num(0)?.abs())),
        ("math", "log") => {
            let x = num(0)?;
            if x <= 0.0 {
                return err("value-error", "math domain error");
            }
            Ok(Value::Float(match args.get(1) {
                Some(_) => x.ln() / num(1)?.ln(),
                None => x.ln(),
            }))
        }
        ("math", "log10") => Ok(Value::Float(num(0)?.log10())),
        ("math", "exp") => Ok(Value::Float(num(0)?.exp())),
        ("math", "pow") => Ok(Value::Float(num(0)?.powf(num(1)?))),
        ("math", "isclose") => Ok(Value::Bool((num(0)? - num(1)?).abs() <= 1e-9 * num(0)?.abs().max(num(1)?.abs()))),
        ("time", "sleep") => {
            std::thread::sleep(Duration::from_secs_f64(num(0)?.max(0.0)));
            Ok(Value::None)
        }
        ("time", "time") => Ok(Value::Float(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64()),
        )),
        ("json", "dumps") => {
            let j = args.first().unwrap_or(&Value::None).to_json().or_else(|m| err("type-error", m))?;
            Ok(Value::Str(j.to_string()))
        }
        ("json", "loads") => match args.first() {
            Some(Value::Str(s)) => serde_json::from_str::<Json>(s)
                .map(|j| Value::from_json(&j))
                .or_else(|e| err("value-error", format!("invalid JSON: {e}"))),
            _ => err("type-error", "json.loads() expects a string"),
        },
        ("statistics", "mean") | ("statistics", "median") => {
            let mut xs: Vec<f64> = iterate(args.first().unwrap_or(&Value::None))?
                .iter()
                .map(|v| v.as_f64().ok_or(()))
                .collect::<Result<_, _>>()
                .or_else(|_| err("type-error", "statistics functions expect numbers"))?;
            if xs.is_empty() {
                return err("value-error", format!("{name} requires at least one data point"));
            }
            if name == "mean" {
                return Ok(Value::Float(xs.iter().sum::<f64>() / xs.len() as f64));
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let n = xs.len();
            Ok(Value::Float(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 }))
        }
        _ => err("attribute-error", format!("module '{module}' has no attribute '{name}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct EchoTools(Vec<(String, Vec<Json>)>);

    impl ToolCaller for EchoTools {
        fn call(&mut self, tool: &str, args: Vec<Json>, kwargs: Map<String, Json>) -> Result<Json, (String, String)> {
            self.0.push((tool.to_string(), args.clone()));
            match tool {
                "echo" => Ok(args.into_iter().next().or_else(|| kwargs.into_iter().next().map(|(_, v)| v)).unwrap_or(Json::Null)),
                _ => Err(("tool-failure".into(), format!("{tool} is broken"))),
            }
        }
    }

    fn run(ns: &mut Namespace, code: &str) -> (String, Result<(), Flow>) {
        let mut out = String::new();
        let mut tools = EchoTools(Vec::new());
        let proxies = vec!["echo".to_string(), "broken".to_string()];
        let whitelist = vec!["math".to_string(), "json".to_string()];
        let r = Interp {
            ns,
            proxies: &proxies,
            whitelist: &whitelist,
            caller: &mut tools,
            stdout: &mut out,
        }
        .run(code);
        (out, r)
    }

    fn class_of(r: Result<(), Flow>) -> String {
        match r {
            Err(Flow::Error { class, .. }) => class,
            other => format!("{other:?}"),
        }
    }

    #[test]
    fn straight_line_programs() {
        let mut ns = Namespace::new();
        let (out, r) = run(&mut ns, "print(1+1)");
        assert_eq!(out, "2\n");
        r.unwrap();
        let (out, _) = run(&mut ns, "x = 5\ny = x * 2 + 1; print(x, y)\nprint(f\"{x}-{y:.2f}\")");
        assert_eq!(out, "5 11\n5-11.00\n");
        let (out, _) = run(&mut ns, "d = {'a': [1, 2], 'b': 'c'}\nd['e'] = 3.5\nprint(d)\nprint(d['a'][-1], len(d))");
        assert_eq!(out, "{'a': [1, 2], 'b': 'c', 'e': 3.5}\n2 3\n");
        let (out, _) = run(&mut ns, "l = []\nl.append(3)\nl.append('x')\nprint(l, 7 // -2, -7 % 3, 1/4)");
        assert_eq!(out, "[3, 'x'] -4 2 0.25\n");
        let (out, _) = run(&mut ns, "import math\nprint(round(math.sqrt(2), 3), 'a' in 'cat', 2 if x > 9 else 3)");
        assert_eq!(out, "1.414 True 3\n");
    }

    #[test]
    fn errors_are_classified() {
        let mut ns = Namespace::new();
        assert_eq!(class_of(run(&mut ns, "print(nope)").1), "name-error");
        assert_eq!(class_of(run(&mut ns, "print(1").1), "syntax-error");
        assert_eq!(class_of(run(&mut ns, "import os").1), "import-violation");
        assert_eq!(class_of(run(&mut ns, "from subprocess import run").1), "import-violation");
        assert_eq!(class_of(run(&mut ns, "{}['k']").1), "key-error");
        assert_eq!(class_of(run(&mut ns, "[1][3]").1), "index-error");
        assert_eq!(class_of(run(&mut ns, "1/0").1), "zero-division");
        assert_eq!(class_of(run(&mut ns, "'a' + 1").1), "type-error");
        assert_eq!(class_of(run(&mut ns, "for i in range(3):\n    print(i)").1), "syntax-error");
        assert_eq!(class_of(run(&mut ns, "broken(1)").1), "tool-failure");
        assert_eq!(class_of(run(&mut ns, "echo = 3").1), "proxy-shadowing");
        assert_eq!(class_of(run(&mut ns, "final_answer = 3").1), "proxy-shadowing");
    }

    #[test]
    fn syntax_errors_run_nothing() {
        let mut ns = Namespace::new();
        let (out, r) = run(&mut ns, "print('before')\nprint(");
        assert_eq!(out, "");
        assert_eq!(class_of(r), "syntax-error");
    }

    #[test]
    fn final_answer_short_circuits() {
        let mut ns = Namespace::new();
        let (out, r) = run(&mut ns, "print('a')\nfinal_answer('done')\nprint('after')");
        assert_eq!(out, "a\n");
        assert_eq!(r, Err(Flow::FinalAnswer(Value::Str("done".into()))));
    }

    #[test]
    fn proxies_round_trip_json() {
        let mut ns = Namespace::new();
        let (out, _) = run(&mut ns, "r = echo({'k': [1, 2.5, None]})\nprint(r['k'])\nprint(echo(value='x'))");
        assert_eq!(out, "[1, 2.5, None]\nx\n");
        let _ = json!(null);
    }

    #[test]
    fn exit_is_reported() {
        let mut ns = Namespace::new();
        assert_eq!(run(&mut ns, "exit()").1, Err(Flow::Exit));
    }
}

//! Expressions over `(t, state)` used for terminal payoffs and obstacles.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary ('*' unary)*
//! unary  := '-' unary | atom
//! atom   := number | 't' | 'state' | '(' expr ')'
//!         | ('min' | 'max') '(' expr ',' expr ')' | 'abs' '(' expr ')'
//! ```

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    T,
    State,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, t: f64, state: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::T => t,
            Expr::State => state,
            Expr::Neg(a) => -a.eval(t, state),
            Expr::Add(a, b) => a.eval(t, state) + b.eval(t, state),
            Expr::Sub(a, b) => a.eval(t, state) - b.eval(t, state),
            Expr::Mul(a, b) => a.eval(t, state) * b.eval(t, state),
            Expr::Min(a, b) => a.eval(t, state).min(b.eval(t, state)),
            Expr::Max(a, b) => a.eval(t, state).max(b.eval(t, state)),
            Expr::Abs(a) => a.eval(t, state).abs(),
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized; parses back to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::T => f.write_str("t"),
            Expr::State => f.write_str("state"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => out.push((start, Token::Num(v))),
                _ => bail!("invalid number '{text}' at column {}", start + 1),
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(src[start..i].to_string())));
        } else if "+-*(),".contains(c) {
            out.push((i, Token::Sym(c)));
            i += 1;
        } else {
            bail!("unexpected character '{}' at column {}", src[i..].chars().next().unwrap_or(c), i + 1);
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.len, |(c, _)| *c) + 1
    }

    fn expect(&mut self, sym: char) -> Result<()> {
        if self.peek() == Some(&Token::Sym(sym)) {
            self.pos += 1;
            Ok(())
        } else {
            bail!("expected '{sym}' at column {}", self.column())
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Sym('+')) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Sym('-')) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Token::Sym('*')) {
            self.pos += 1;
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(&Token::Sym('-')) {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        let column = self.column();
        let Some(token) = self.peek().cloned() else {
            bail!("unexpected end of expression");
        };
        self.pos += 1;
        match token {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Sym('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Token::Ident(name) => match name.as_str() {
                "t" => Ok(Expr::T),
                "state" => Ok(Expr::State),
                "abs" => {
                    self.expect('(')?;
                    let a = self.expr()?;
                    self.expect(')')?;
                    Ok(Expr::Abs(Box::new(a)))
                }
                "min" | "max" => {
                    self.expect('(')?;
                    let a = Box::new(self.expr()?);
                    self.expect(',')?;
                    let b = Box::new(self.expr()?);
                    self.expect(')')?;
                    Ok(if name == "min" { Expr::Min(a, b) } else { Expr::Max(a, b) })
                }
                _ => bail!("unknown identifier '{name}' at column {column}"),
            },
            Token::Sym(c) => bail!("unexpected '{c}' at column {column}"),
        }
    }
}

impl FromStr for Expr {
    type Err = anyhow::Error;

    fn from_str(src: &str) -> Result<Self> {
        let mut p = Parser {
            tokens: tokenize(src)?,
            pos: 0,
            len: src.len(),
        };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            bail!("trailing input at column {}", p.column());
        }
        Ok(e)
    }
}

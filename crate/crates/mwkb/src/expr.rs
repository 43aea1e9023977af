//! Small arithmetic expression language for scenario configs: +, -, *, /, ^,
//! sin, cos, exp, numeric literals, named variables and the constant `pi`.
//! Expressions differentiate symbolically, so configured Hamiltonians and
//! initial phases get exact gradients and Hessians.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{MwkbError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// base ^ constant
    Pow(Arc<Expr>, f64),
    Neg(Arc<Expr>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
    Exp(Arc<Expr>),
}

/// A parsed scalar field together with its variable-name table.
#[derive(Debug, Clone)]
pub struct Field {
    pub expr: Arc<Expr>,
    pub vars: Vec<String>,
}

impl Field {
    /// Parses `text` with the given ordered variable names, e.g. ["q", "p"].
    pub fn parse(text: &str, vars: &[&str]) -> Result<Self> {
        let vars: Vec<String> = vars.iter().map(|s| s.to_string()).collect();
        let map: HashMap<&str, usize> = vars
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut p = Parser::tokenize(text)?;
        let expr = p.expression(&map)?;
        p.expect_end()?;
        Ok(Self {
            expr: Arc::new(simplify(&expr)),
            vars,
        })
    }

    pub fn constant(c: f64, vars: &[&str]) -> Self {
        Self {
            expr: Arc::new(Expr::Num(c)),
            vars: vars.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn eval(&self, args: &[f64]) -> f64 {
        eval(&self.expr, args)
    }

    /// Partial derivative with respect to variable index `k`.
    pub fn derivative(&self, k: usize) -> Self {
        Self {
            expr: Arc::new(simplify(&diff(&self.expr, k))),
            vars: self.vars.clone(),
        }
    }

    pub fn gradient(&self) -> Vec<Self> {
        (0..self.vars.len()).map(|k| self.derivative(k)).collect()
    }
}

pub fn eval(e: &Expr, args: &[f64]) -> f64 {
    match e {
        Expr::Num(c) => *c,
        Expr::Var(i) => args[*i],
        Expr::Add(a, b) => eval(a, args) + eval(b, args),
        Expr::Sub(a, b) => eval(a, args) - eval(b, args),
        Expr::Mul(a, b) => eval(a, args) * eval(b, args),
        Expr::Div(a, b) => eval(a, args) / eval(b, args),
        Expr::Pow(a, c) => eval(a, args).powf(*c),
        Expr::Neg(a) => -eval(a, args),
        Expr::Sin(a) => eval(a, args).sin(),
        Expr::Cos(a) => eval(a, args).cos(),
        Expr::Exp(a) => eval(a, args).exp(),
    }
}

fn diff(e: &Expr, k: usize) -> Expr {
    use Expr::*;
    match e {
        Num(_) => Num(0.0),
        Var(i) => Num(if *i == k { 1.0 } else { 0.0 }),
        Add(a, b) => Add(Arc::new(diff(a, k)), Arc::new(diff(b, k))),
        Sub(a, b) => Sub(Arc::new(diff(a, k)), Arc::new(diff(b, k))),
        Mul(a, b) => Add(
            Arc::new(Mul(Arc::new(diff(a, k)), b.clone())),
            Arc::new(Mul(a.clone(), Arc::new(diff(b, k)))),
        ),
        Div(a, b) => Div(
            Arc::new(Sub(
                Arc::new(Mul(Arc::new(diff(a, k)), b.clone())),
                Arc::new(Mul(a.clone(), Arc::new(diff(b, k)))),
            )),
            Arc::new(Pow(b.clone(), 2.0)),
        ),
        Pow(a, c) => Mul(
            Arc::new(Mul(Arc::new(Num(*c)), Arc::new(Pow(a.clone(), c - 1.0)))),
            Arc::new(diff(a, k)),
        ),
        Neg(a) => Neg(Arc::new(diff(a, k))),
        Sin(a) => Mul(Arc::new(Cos(a.clone())), Arc::new(diff(a, k))),
        Cos(a) => Neg(Arc::new(Mul(Arc::new(Sin(a.clone())), Arc::new(diff(a, k))))),
        Exp(a) => Mul(Arc::new(Exp(a.clone())), Arc::new(diff(a, k))),
    }
}

fn simplify(e: &Expr) -> Expr {
    use Expr::*;
    match e {
        Add(a, b) => match (simplify(a), simplify(b)) {
            (Num(x), Num(y)) => Num(x + y),
            (Num(z), s) | (s, Num(z)) if z == 0.0 => s,
            (sa, sb) => Add(Arc::new(sa), Arc::new(sb)),
        },
        Sub(a, b) => match (simplify(a), simplify(b)) {
            (Num(x), Num(y)) => Num(x - y),
            (sa, Num(z)) if z == 0.0 => sa,
            (Num(z), sb) if z == 0.0 => Neg(Arc::new(sb)),
            (sa, sb) => Sub(Arc::new(sa), Arc::new(sb)),
        },
        Mul(a, b) => match (simplify(a), simplify(b)) {
            (Num(x), Num(y)) => Num(x * y),
            (Num(z), _) | (_, Num(z)) if z == 0.0 => Num(0.0),
            (Num(o), s) | (s, Num(o)) if o == 1.0 => s,
            (sa, sb) => Mul(Arc::new(sa), Arc::new(sb)),
        },
        Div(a, b) => match (simplify(a), simplify(b)) {
            (Num(x), Num(y)) if y != 0.0 => Num(x / y),
            (Num(z), _) if z == 0.0 => Num(0.0),
            (sa, Num(o)) if o == 1.0 => sa,
            (sa, sb) => Div(Arc::new(sa), Arc::new(sb)),
        },
        Pow(a, c) => {
            let sa = simplify(a);
            if *c == 0.0 {
                Num(1.0)
            } else if *c == 1.0 {
                sa
            } else if let Num(x) = sa {
                Num(x.powf(*c))
            } else {
                Pow(Arc::new(sa), *c)
            }
        }
        Neg(a) => match simplify(a) {
            Num(x) => Num(-x),
            sa => Neg(Arc::new(sa)),
        },
        Sin(a) => Sin(Arc::new(simplify(a))),
        Cos(a) => Cos(Arc::new(simplify(a))),
        Exp(a) => Exp(Arc::new(simplify(a))),
        other => other.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn tokenize(text: &str) -> Result<Self> {
        let mut toks = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            match c {
                ' ' | '\t' | '\n' | '\r' => i += 1,
                '+' => {
                    toks.push(Tok::Plus);
                    i += 1;
                }
                '-' => {
                    toks.push(Tok::Minus);
                    i += 1;
                }
                '*' => {
                    toks.push(Tok::Star);
                    i += 1;
                }
                '/' => {
                    toks.push(Tok::Slash);
                    i += 1;
                }
                '^' => {
                    toks.push(Tok::Caret);
                    i += 1;
                }
                '(' => {
                    toks.push(Tok::LParen);
                    i += 1;
                }
                ')' => {
                    toks.push(Tok::RParen);
                    i += 1;
                }
                c if c.is_ascii_digit() || c == '.' => {
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_ascii_digit()
                            || chars[i] == '.'
                            || chars[i] == 'e'
                            || chars[i] == 'E'
                            || ((chars[i] == '+' || chars[i] == '-')
                                && i > start
                                && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
                    {
                        i += 1;
                    }
                    let s: String = chars[start..i].iter().collect();
                    let v = s
                        .parse::<f64>()
                        .map_err(|_| MwkbError::Expr(format!("bad number `{s}`")))?;
                    toks.push(Tok::Num(v));
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_ascii_alphanumeric() || chars[i] == '_')
                    {
                        i += 1;
                    }
                    toks.push(Tok::Ident(chars[start..i].iter().collect()));
                }
                other => {
                    return Err(MwkbError::Expr(format!("unexpected character `{other}`")))
                }
            }
        }
        Ok(Self { toks, pos: 0 })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            Err(MwkbError::Expr(format!(
                "trailing tokens starting at {:?}",
                self.toks[self.pos]
            )))
        }
    }

    fn expression(&mut self, map: &HashMap<&str, usize>) -> Result<Expr> {
        let mut lhs = self.term(map)?;
        while let Some(t) = self.peek() {
            match t {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Arc::new(lhs), Arc::new(self.term(map)?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Arc::new(lhs), Arc::new(self.term(map)?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self, map: &HashMap<&str, usize>) -> Result<Expr> {
        let mut lhs = self.unary(map)?;
        while let Some(t) = self.peek() {
            match t {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Arc::new(lhs), Arc::new(self.unary(map)?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Arc::new(lhs), Arc::new(self.unary(map)?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self, map: &HashMap<&str, usize>) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(Expr::Neg(Arc::new(self.unary(map)?)))
            }
            Some(Tok::Plus) => {
                self.bump();
                self.unary(map)
            }
            _ => self.power(map),
        }
    }

    fn power(&mut self, map: &HashMap<&str, usize>) -> Result<Expr> {
        let base = self.primary(map)?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let exp = self.unary(map)?;
            if let Expr::Num(c) = simplify(&exp) {
                return Ok(Expr::Pow(Arc::new(base), c));
            }
            return Err(MwkbError::Expr(
                "exponent must be a numeric constant".into(),
            ));
        }
        Ok(base)
    }

    fn primary(&mut self, map: &HashMap<&str, usize>) -> Result<Expr> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expression(map)?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(MwkbError::Expr("missing `)`".into())),
                }
            }
            Some(Tok::Ident(name)) => {
                if matches!(self.peek(), Some(Tok::LParen)) {
                    self.bump();
                    let arg = self.expression(map)?;
                    if !matches!(self.bump(), Some(Tok::RParen)) {
                        return Err(MwkbError::Expr(format!("missing `)` after {name}(")));
                    }
                    let arg = Arc::new(arg);
                    match name.as_str() {
                        "sin" => Ok(Expr::Sin(arg)),
                        "cos" => Ok(Expr::Cos(arg)),
                        "exp" => Ok(Expr::Exp(arg)),
                        other => Err(MwkbError::Expr(format!("unknown function `{other}`"))),
                    }
                } else if name == "pi" {
                    Ok(Expr::Num(std::f64::consts::PI))
                } else if let Some(&i) = map.get(name.as_str()) {
                    Ok(Expr::Var(i))
                } else {
                    Err(MwkbError::Expr(format!("unknown variable `{name}`")))
                }
            }
            other => Err(MwkbError::Expr(format!("unexpected token {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_eval() {
        let f = Field::parse("p^2/2 + q^2/2 + 0.1*q^4", &["q", "p"]).unwrap();
        assert!((f.eval(&[1.0, 2.0]) - (2.0 + 0.5 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_fd() {
        let f = Field::parse("sin(q)*cos(p) + exp(-q^2/2)", &["q", "p"]).unwrap();
        let dq = f.derivative(0);
        let dp = f.derivative(1);
        let (q, p) = (0.37, -1.2);
        let h = 1e-6;
        let fdq = (f.eval(&[q + h, p]) - f.eval(&[q - h, p])) / (2.0 * h);
        let fdp = (f.eval(&[q, p + h]) - f.eval(&[q, p - h])) / (2.0 * h);
        assert!((dq.eval(&[q, p]) - fdq).abs() < 1e-9);
        assert!((dp.eval(&[q, p]) - fdp).abs() < 1e-9);
    }

    #[test]
    fn second_derivatives() {
        let f = Field::parse("q^4/4 + q*p", &["q", "p"]).unwrap();
        let dqq = f.derivative(0).derivative(0);
        let dqp = f.derivative(0).derivative(1);
        assert!((dqq.eval(&[2.0, 0.0]) - 12.0).abs() < 1e-13);
        assert!((dqp.eval(&[2.0, 5.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pendulum_expr() {
        let f = Field::parse("p^2/2 - cos(q)", &["q", "p"]).unwrap();
        assert!((f.eval(&[0.0, 0.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonsense() {
        assert!(Field::parse("q +* p", &["q", "p"]).is_err());
        assert!(Field::parse("foo(q)", &["q", "p"]).is_err());
        assert!(Field::parse("q^p", &["q", "p"]).is_err());
        assert!(Field::parse("r + 1", &["q", "p"]).is_err());
        assert!(Field::parse("q + ", &["q", "p"]).is_err());
    }

    #[test]
    fn unary_minus_and_pi() {
        let f = Field::parse("-q^2 + pi", &["q"]).unwrap();
        assert!((f.eval(&[2.0]) - (std::f64::consts::PI - 4.0)).abs() < 1e-15);
    }
}

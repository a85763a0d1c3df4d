//! Attribute filters: a boolean tree over label and numeric comparisons,
//! parsed from the request's filter string and type-checked against the
//! collection schema before execution.
//!
//! Grammar (case-insensitive keywords):
//!   expr   := and ( OR and )*
//!   and    := unary ( AND unary )*
//!   unary  := NOT unary | '(' expr ')' | field op literal
//! Labels compare with = and !=, numerics with < <= = >= >.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{EngineError, Result};
use crate::schema::{NumericValue, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelOp {
    Eq,
    Ne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterExpr {
    And(Box<FilterExpr>, Box<FilterExpr>),
    Or(Box<FilterExpr>, Box<FilterExpr>),
    Not(Box<FilterExpr>),
    Label { field: String, op: LabelOp, value: String },
    Numeric { field: String, op: NumOp, value: f64 },
}

impl FilterExpr {
    /// Parse and type-check in one step.
    pub fn parse(text: &str, schema: &Schema) -> Result<FilterExpr> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, at: 0, schema };
        let expr = p.expr()?;
        if p.at != p.tokens.len() {
            return Err(EngineError::Filter(format!(
                "unexpected trailing input at token {}",
                p.at
            )));
        }
        Ok(expr)
    }

    /// Evaluate against one entity's attributes. A comparison on a missing
    /// field is false.
    pub fn matches(
        &self,
        labels: &BTreeMap<String, String>,
        numerics: &BTreeMap<String, NumericValue>,
    ) -> bool {
        match self {
            FilterExpr::And(a, b) => a.matches(labels, numerics) && b.matches(labels, numerics),
            FilterExpr::Or(a, b) => a.matches(labels, numerics) || b.matches(labels, numerics),
            FilterExpr::Not(e) => !e.matches(labels, numerics),
            FilterExpr::Label { field, op, value } => match labels.get(field) {
                Some(v) => match op {
                    LabelOp::Eq => v == value,
                    LabelOp::Ne => v != value,
                },
                None => false,
            },
            FilterExpr::Numeric { field, op, value } => match numerics.get(field) {
                Some(v) => {
                    let x = v.as_f64();
                    match op {
                        NumOp::Lt => x < *value,
                        NumOp::Le => x <= *value,
                        NumOp::Eq => x == *value,
                        NumOp::Ge => x >= *value,
                        NumOp::Gt => x > *value,
                    }
                }
                None => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Str(String),
    Op(String),
    LParen,
    RParen,
    And,
    Or,
    Not,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '\'' | '"' => {
                let quote = c;
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        Some(&ch) if ch == quote => {
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                        None => {
                            return Err(EngineError::Filter("unterminated string".into()));
                        }
                    }
                }
                out.push(Token::Str(s));
            }
            '=' | '!' | '<' | '>' | '&' | '|' => {
                let two: String = chars[i..chars.len().min(i + 2)].iter().collect();
                let (tok, step) = match two.as_str() {
                    "==" => (Token::Op("=".into()), 2),
                    "!=" | "<>" => (Token::Op("!=".into()), 2),
                    "<=" => (Token::Op("<=".into()), 2),
                    ">=" => (Token::Op(">=".into()), 2),
                    "&&" => (Token::And, 2),
                    "||" => (Token::Or, 2),
                    _ => match c {
                        '=' => (Token::Op("=".into()), 1),
                        '<' => (Token::Op("<".into()), 1),
                        '>' => (Token::Op(">".into()), 1),
                        '!' => (Token::Not, 1),
                        other => {
                            return Err(EngineError::Filter(format!("stray '{other}'")));
                        }
                    },
                };
                out.push(tok);
                i += step;
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_digit()
                        || chars[i] == '.'
                        || chars[i] == 'e'
                        || chars[i] == 'E'
                        || ((chars[i] == '-' || chars[i] == '+')
                            && (chars[i - 1] == 'e' || chars[i - 1] == 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v: f64 = text
                    .parse()
                    .map_err(|_| EngineError::Filter(format!("bad number '{text}'")))?;
                out.push(Token::Number(v));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                match word.to_ascii_lowercase().as_str() {
                    "and" => out.push(Token::And),
                    "or" => out.push(Token::Or),
                    "not" => out.push(Token::Not),
                    _ => out.push(Token::Ident(word)),
                }
            }
            other => {
                return Err(EngineError::Filter(format!("unexpected character '{other}'")));
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    at: usize,
    schema: &'a Schema,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.at)
    }

    fn expr(&mut self) -> Result<FilterExpr> {
        let mut left = self.and()?;
        while matches!(self.peek(), Some(Token::Or)) {
            self.at += 1;
            let right = self.and()?;
            left = FilterExpr::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<FilterExpr> {
        let mut left = self.unary()?;
        while matches!(self.peek(), Some(Token::And)) {
            self.at += 1;
            let right = self.unary()?;
            left = FilterExpr::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<FilterExpr> {
        match self.peek() {
            Some(Token::Not) => {
                self.at += 1;
                Ok(FilterExpr::Not(Box::new(self.unary()?)))
            }
            Some(Token::LParen) => {
                self.at += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::RParen) => {
                        self.at += 1;
                        Ok(inner)
                    }
                    _ => Err(EngineError::Filter("expected ')'".into())),
                }
            }
            Some(Token::Ident(_)) => self.comparison(),
            other => Err(EngineError::Filter(format!("expected a comparison, got {other:?}"))),
        }
    }

    fn comparison(&mut self) -> Result<FilterExpr> {
        let field = match self.peek() {
            Some(Token::Ident(name)) => name.clone(),
            _ => unreachable!(),
        };
        self.at += 1;
        let op = match self.peek() {
            Some(Token::Op(op)) => op.clone(),
            other => {
                return Err(EngineError::Filter(format!(
                    "expected a comparison operator after '{field}', got {other:?}"
                )));
            }
        };
        self.at += 1;
        let value = self.peek().cloned();
        self.at += 1;

        if self.schema.label_fields.iter().any(|f| *f == field) {
            let op = match op.as_str() {
                "=" => LabelOp::Eq,
                "!=" => LabelOp::Ne,
                other => {
                    return Err(EngineError::Filter(format!(
                        "label field '{field}' only supports = and !=, got '{other}'"
                    )));
                }
            };
            let value = match value {
                Some(Token::Str(s)) => s,
                Some(Token::Ident(s)) => s,
                other => {
                    return Err(EngineError::Filter(format!(
                        "label field '{field}' needs a string value, got {other:?}"
                    )));
                }
            };
            return Ok(FilterExpr::Label { field, op, value });
        }
        if self.schema.numeric_fields.iter().any(|f| f.name == field) {
            let op = match op.as_str() {
                "<" => NumOp::Lt,
                "<=" => NumOp::Le,
                "=" => NumOp::Eq,
                ">=" => NumOp::Ge,
                ">" => NumOp::Gt,
                other => {
                    return Err(EngineError::Filter(format!(
                        "numeric field '{field}' does not support '{other}'"
                    )));
                }
            };
            let value = match value {
                Some(Token::Number(v)) => v,
                other => {
                    return Err(EngineError::Filter(format!(
                        "numeric field '{field}' needs a numeric constant, got {other:?}"
                    )));
                }
            };
            return Ok(FilterExpr::Numeric { field, op, value });
        }
        Err(EngineError::Filter(format!("unknown filter field '{field}'")))
    }
}

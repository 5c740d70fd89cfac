//! A small arithmetic expression language used by scenario files.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?          right associative
//! primary := number | constant | variable | func '(' args ')' | '(' sum ')'
//! ```
//!
//! Variables are `t x y z xi1 xi2 r`; constants `pi e`; functions
//! `sin cos exp log abs sqrt min max sign`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown identifier `{name}` at line {line}, column {column}")]
    UnknownIdentifier {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("numeric evaluation error in `{subterm}`: {reason}")]
    Numeric { subterm: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X,
    Y,
    Z,
    Xi1,
    Xi2,
    /// Argument of a modulus of continuity.
    R,
}

impl Var {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "t" => Var::T,
            "x" => Var::X,
            "y" => Var::Y,
            "z" => Var::Z,
            "xi1" => Var::Xi1,
            "xi2" => Var::Xi2,
            "r" => Var::R,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
            Var::Xi1 => "xi1",
            Var::Xi2 => "xi2",
            Var::R => "r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Min,
    Max,
    Sign,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            "sign" => Func::Sign,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
            Func::Sign => "sign",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Pi,
    E,
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable bindings for evaluation. Unbound variables read as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub r: f64,
}

impl Vars {
    pub fn at(t: f64, point: &[f64]) -> Self {
        Vars {
            t,
            x: point.first().copied().unwrap_or(0.0),
            y: point.get(1).copied().unwrap_or(0.0),
            ..Default::default()
        }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Z => self.z,
            Var::Xi1 => self.xi1,
            Var::Xi2 => self.xi2,
            Var::R => self.r,
        }
    }
}

impl Expr {
    pub fn constant(value: f64) -> Self {
        Expr::Num(value)
    }

    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// Returns the value if the tree has no free variables.
    pub fn as_constant(&self) -> Option<f64> {
        if self.mentions_any_var() {
            None
        } else {
            self.eval(&Vars::default()).ok()
        }
    }

    pub fn mentions(&self, var: Var) -> bool {
        match self {
            Expr::Var(v) => *v == var,
            Expr::Num(_) | Expr::Pi | Expr::E => false,
            Expr::Neg(a) => a.mentions(var),
            Expr::Bin(_, a, b) => a.mentions(var) || b.mentions(var),
            Expr::Call(_, args) => args.iter().any(|a| a.mentions(var)),
        }
    }

    fn mentions_any_var(&self) -> bool {
        match self {
            Expr::Var(_) => true,
            Expr::Num(_) | Expr::Pi | Expr::E => false,
            Expr::Neg(a) => a.mentions_any_var(),
            Expr::Bin(_, a, b) => a.mentions_any_var() || b.mentions_any_var(),
            Expr::Call(_, args) => args.iter().any(Expr::mentions_any_var),
        }
    }

    pub fn eval(&self, vars: &Vars) -> Result<f64, ExprError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Pi => Ok(std::f64::consts::PI),
            Expr::E => Ok(std::f64::consts::E),
            Expr::Var(v) => Ok(vars.get(*v)),
            Expr::Neg(a) => Ok(-a.eval(vars)?),
            Expr::Bin(op, a, b) => {
                let l = a.eval(vars)?;
                let r = b.eval(vars)?;
                match op {
                    BinOp::Add => Ok(l + r),
                    BinOp::Sub => Ok(l - r),
                    BinOp::Mul => Ok(l * r),
                    BinOp::Div => {
                        if r == 0.0 {
                            Err(self.numeric_error("division by zero"))
                        } else {
                            Ok(l / r)
                        }
                    }
                    BinOp::Pow => {
                        let v = l.powf(r);
                        if v.is_nan() && !l.is_nan() && !r.is_nan() {
                            Err(self.numeric_error("negative base with fractional exponent"))
                        } else {
                            Ok(v)
                        }
                    }
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(vars)?;
                match f {
                    Func::Sin => Ok(a.sin()),
                    Func::Cos => Ok(a.cos()),
                    Func::Exp => Ok(a.exp()),
                    Func::Abs => Ok(a.abs()),
                    Func::Sign => Ok(if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }),
                    Func::Log => {
                        if a <= 0.0 {
                            Err(self.numeric_error("log of a nonpositive argument"))
                        } else {
                            Ok(a.ln())
                        }
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            Err(self.numeric_error("sqrt of a negative argument"))
                        } else {
                            Ok(a.sqrt())
                        }
                    }
                    Func::Min => Ok(a.min(args[1].eval(vars)?)),
                    Func::Max => Ok(a.max(args[1].eval(vars)?)),
                }
            }
        }
    }

    fn numeric_error(&self, reason: &str) -> ExprError {
        ExprError::Numeric {
            subterm: self.to_string(),
            reason: reason.to_string(),
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form; reparses to an identical tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Pi => write!(f, "pi"),
            Expr::E => write!(f, "e"),
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

impl Lexer {
    fn new(src: &str) -> Self {
        Lexer {
            chars: src.chars().collect(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn peek_char(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn tokenize(mut self) -> Result<Vec<(Tok, usize, usize)>, ExprError> {
        let mut out = Vec::new();
        loop {
            while matches!(self.peek_char(), Some(c) if c.is_whitespace()) {
                self.bump();
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek_char() else {
                out.push((Tok::End, line, col));
                return Ok(out);
            };
            let tok = if c.is_ascii_digit() || c == '.' {
                self.number(line, col)?
            } else if c.is_ascii_alphabetic() || c == '_' {
                let mut name = String::new();
                while matches!(self.peek_char(), Some(c) if c.is_ascii_alphanumeric() || c == '_')
                {
                    name.push(self.bump().unwrap());
                }
                Tok::Ident(name)
            } else {
                self.bump();
                match c {
                    '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    other => {
                        return Err(ExprError::Syntax {
                            line,
                            column: col,
                            message: format!("unexpected character `{other}`"),
                        })
                    }
                }
            };
            out.push((tok, line, col));
        }
    }

    fn number(&mut self, line: usize, col: usize) -> Result<Tok, ExprError> {
        let mut text = String::new();
        while matches!(self.peek_char(), Some(c) if c.is_ascii_digit() || c == '.') {
            text.push(self.bump().unwrap());
        }
        if matches!(self.peek_char(), Some('e' | 'E')) {
            // Only an exponent if followed by digits (optionally signed).
            let next = self.chars.get(self.pos + 1).copied();
            let after = self.chars.get(self.pos + 2).copied();
            let is_exp = matches!(next, Some(c) if c.is_ascii_digit())
                || (matches!(next, Some('+' | '-')) && matches!(after, Some(c) if c.is_ascii_digit()));
            if is_exp {
                text.push(self.bump().unwrap());
                if matches!(self.peek_char(), Some('+' | '-')) {
                    text.push(self.bump().unwrap());
                }
                while matches!(self.peek_char(), Some(c) if c.is_ascii_digit()) {
                    text.push(self.bump().unwrap());
                }
            }
        }
        text.parse::<f64>().map(Tok::Num).map_err(|_| ExprError::Syntax {
            line,
            column: col,
            message: format!("malformed number `{text}`"),
        })
    }
}

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn here(&self) -> (usize, usize) {
        (self.toks[self.pos].1, self.toks[self.pos].2)
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>) -> ExprError {
        let (line, column) = self.here();
        ExprError::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        if *self.peek() == tok {
            self.advance();
            Ok(())
        } else {
            Err(self.error(format!("expected {what}")))
        }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Op('+') => BinOp::Add,
                Tok::Op('-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Op('*') => BinOp::Mul,
                Tok::Op('/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Tok::Op('-') {
            self.advance();
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.primary()?;
        if *self.peek() == Tok::Op('^') {
            self.advance();
            let exponent = self.unary()?;
            Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let (line, column) = self.here();
        match self.advance() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let inner = self.sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                    let mut args = vec![self.sum()?];
                    while *self.peek() == Tok::Comma {
                        self.advance();
                        args.push(self.sum()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    if args.len() != func.arity() {
                        return Err(ExprError::Syntax {
                            line,
                            column,
                            message: format!(
                                "`{name}` takes {} argument(s), got {}",
                                func.arity(),
                                args.len()
                            ),
                        });
                    }
                    Ok(Expr::Call(func, args))
                } else if name == "pi" {
                    Ok(Expr::Pi)
                } else if name == "e" {
                    Ok(Expr::E)
                } else if let Some(v) = Var::from_name(&name) {
                    Ok(Expr::Var(v))
                } else {
                    Err(ExprError::UnknownIdentifier { name, line, column })
                }
            }
            Tok::End => Err(ExprError::Syntax {
                line,
                column,
                message: "unexpected end of expression".into(),
            }),
            other => Err(ExprError::Syntax {
                line,
                column,
                message: format!("unexpected token {other:?}"),
            }),
        }
    }
}

/// Parses an expression. Positions in errors are 1-based within `src`.
pub fn parse_expr(src: &str) -> Result<Expr, ExprError> {
    let toks = Lexer::new(src).tokenize()?;
    let mut parser = Parser { toks, pos: 0 };
    let expr = parser.sum()?;
    if *parser.peek() != Tok::End {
        return Err(parser.error("trailing input"));
    }
    Ok(expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{E, PI};

    fn ev(src: &str, vars: Vars) -> f64 {
        parse_expr(src).unwrap().eval(&vars).unwrap()
    }

    #[test]
    fn operation_examples() {
        assert_eq!(ev("1+t", Vars { t: 0.5, ..Default::default() }), 1.5);
        assert_eq!(ev("1+t", Vars { t: 1.5, ..Default::default() }), 2.5);
        assert_eq!(ev("sin(pi*x)", Vars { x: 0.5, ..Default::default() }), 1.0);
        assert_eq!(ev("2^3^2", Vars::default()), 512.0);
    }

    #[test]
    fn reference_table() {
        let v = Vars {
            t: 0.25,
            x: 1.5,
            y: -2.0,
            z: 0.75,
            xi1: 3.0,
            xi2: -4.0,
            r: 0.1,
        };
        let cases: [(&str, f64); 20] = [
            ("1 + 2 * 3", 7.0),
            ("(1 + 2) * 3", 9.0),
            ("8 / 4 / 2", 1.0),
            ("10 - 4 - 3", 3.0),
            ("-2^2", -4.0),
            ("(-2)^2", 4.0),
            ("2^-1", 0.5),
            ("1.5e2 + 2.5E-1", 150.25),
            (".5 * x", 0.75),
            ("sqrt(xi1^2 + xi2^2)", 5.0),
            ("abs(y) * sign(y)", -2.0),
            ("min(x, y) + max(x, y)", -0.5),
            ("exp(0) + log(e)", 2.0),
            ("cos(pi)", -1.0),
            ("sin(pi/6)", 0.5),
            ("e^2", E * E),
            ("t * x * y", -0.75),
            ("z - r", 0.65),
            ("sign(0)", 0.0),
            ("--x", 1.5),
        ];
        for (src, want) in cases {
            let got = ev(src, v);
            let rel = (got - want).abs() / want.abs().max(1.0);
            assert!(rel <= 1e-15, "{src}: got {got}, want {want}");
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_expr("1 + * 2") {
            Err(ExprError::Syntax { line, column, .. }) => assert_eq!((line, column), (1, 5)),
            other => panic!("unexpected {other:?}"),
        }
        match parse_expr("1 +\n  foo") {
            Err(ExprError::UnknownIdentifier { name, line, column }) => {
                assert_eq!(name, "foo");
                assert_eq!((line, column), (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_expr("sin(1, 2)").is_err());
        assert!(parse_expr("(1 + 2").is_err());
        assert!(parse_expr("1 2").is_err());
        assert!(parse_expr("").is_err());
    }

    #[test]
    fn numeric_errors_name_the_subterm() {
        let err = parse_expr("1 + log(x - 2)")
            .unwrap()
            .eval(&Vars { x: 1.0, ..Default::default() })
            .unwrap_err();
        match err {
            ExprError::Numeric { subterm, .. } => assert_eq!(subterm, "log((x - 2.0))"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_expr("sqrt(-1)").unwrap().eval(&Vars::default()).is_err());
        assert!(parse_expr("1/x").unwrap().eval(&Vars::default()).is_err());
        assert!(parse_expr("(-1)^0.5").unwrap().eval(&Vars::default()).is_err());
    }

    #[test]
    fn constant_folding() {
        assert_eq!(parse_expr("2*pi").unwrap().as_constant(), Some(2.0 * PI));
        assert_eq!(parse_expr("2*x").unwrap().as_constant(), None);
        assert!(parse_expr("xi1 + 1").unwrap().mentions(Var::Xi1));
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e6).prop_map(Expr::Num),
            Just(Expr::Pi),
            Just(Expr::E),
            prop_oneof![
                Just(Var::T),
                Just(Var::X),
                Just(Var::Y),
                Just(Var::Z),
                Just(Var::Xi1),
                Just(Var::Xi2),
                Just(Var::R)
            ]
            .prop_map(Expr::Var),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div),
                        Just(BinOp::Pow)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, a, b)| Expr::Bin(op, Box::new(a), Box::new(b))),
                (prop_oneof![Just(Func::Sin), Just(Func::Abs), Just(Func::Sqrt)], inner.clone())
                    .prop_map(|(f, a)| Expr::Call(f, vec![a])),
                (prop_oneof![Just(Func::Min), Just(Func::Max)], inner.clone(), inner)
                    .prop_map(|(f, a, b)| Expr::Call(f, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(e in arb_expr()) {
            let printed = e.to_string();
            let reparsed = parse_expr(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(parse_expr(&reparsed.to_string()).unwrap(), reparsed);
        }
    }
}

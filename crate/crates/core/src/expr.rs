//! A small arithmetic language over the variables `t` and `x`.
//!
//! Terminal conditions and generator inhomogeneities are written as strings
//! in configuration files and parsed into an [`Expr`]. Precedence, from
//! tightest to loosest: `^` (right-associative), unary `-`, `* /`, `+ -`.
//! Functions use call syntax: `exp abs sin cos sqrt` take one argument,
//! `max min` take two.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Abs,
    Sin,
    Cos,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

/// A parsed expression. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let tokens = lex(source)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            end: source.chars().count(),
        };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            let offset = tok.offset;
            let message = if tok.kind == Tok::RParen {
                "unbalanced parentheses: unexpected ')'".to_string()
            } else {
                format!("unexpected token {}", tok.kind)
            };
            return Err(Error::Parse { offset, message });
        }
        Ok(Self { root })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            root: Node::Const(value),
        }
    }

    pub fn from_node(root: Node) -> Self {
        Self { root }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Evaluates at `(t, x)`. Any non-finite intermediate is a domain error.
    pub fn eval(&self, t: f64, x: f64) -> Result<f64> {
        eval_node(&self.root, t, x)
    }

    /// True if the expression does not mention `t`.
    pub fn is_time_independent(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Const(_) => true,
                Node::Var(v) => *v != Var::T,
                Node::Unary(_, a) => walk(a),
                Node::Binary(_, a, b) => walk(a) && walk(b),
            }
        }
        walk(&self.root)
    }
}

impl FromStr for Expr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{what} produced a non-finite value")))
    }
}

fn eval_node(node: &Node, t: f64, x: f64) -> Result<f64> {
    match node {
        Node::Const(c) => Ok(*c),
        Node::Var(Var::T) => Ok(t),
        Node::Var(Var::X) => Ok(x),
        Node::Unary(op, a) => {
            let a = eval_node(a, t, x)?;
            match op {
                UnaryOp::Neg => Ok(-a),
                UnaryOp::Exp => finite(a.exp(), "exp"),
                UnaryOp::Abs => Ok(a.abs()),
                UnaryOp::Sin => finite(a.sin(), "sin"),
                UnaryOp::Cos => finite(a.cos(), "cos"),
                UnaryOp::Sqrt => {
                    if a < 0.0 {
                        Err(Error::Domain(format!("sqrt of negative value {a}")))
                    } else {
                        Ok(a.sqrt())
                    }
                }
            }
        }
        Node::Binary(op, a, b) => {
            let a = eval_node(a, t, x)?;
            let b = eval_node(b, t, x)?;
            match op {
                BinaryOp::Add => finite(a + b, "addition"),
                BinaryOp::Sub => finite(a - b, "subtraction"),
                BinaryOp::Mul => finite(a * b, "multiplication"),
                BinaryOp::Div => {
                    if b == 0.0 {
                        Err(Error::Domain("division by zero".into()))
                    } else {
                        finite(a / b, "division")
                    }
                }
                BinaryOp::Pow => {
                    if a < 0.0 && b.fract() != 0.0 {
                        Err(Error::Domain(format!(
                            "non-integer power {b} of negative base {a}"
                        )))
                    } else {
                        finite(a.powf(b), "power")
                    }
                }
                BinaryOp::Max => Ok(a.max(b)),
                BinaryOp::Min => Ok(a.min(b)),
            }
        }
    }
}

// ---------------------------------------------------------------- lexing

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
    Comma,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Plus => f.write_str("'+'"),
            Tok::Minus => f.write_str("'-'"),
            Tok::Star => f.write_str("'*'"),
            Tok::Slash => f.write_str("'/'"),
            Tok::Caret => f.write_str("'^'"),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
            Tok::Comma => f.write_str("','"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Tok,
    offset: usize,
}

fn lex(source: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            c if c.is_ascii_digit() || c == '.' => {
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                // optional exponent: e[+-]digits
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].is_ascii_digit() {
                        while j < chars.len() && chars[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let value: f64 = text.parse().map_err(|_| Error::Parse {
                    offset: start,
                    message: format!("malformed number '{text}'"),
                })?;
                out.push(Token {
                    kind: Tok::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token {
                    kind: Tok::Ident(chars[start..i].iter().collect()),
                    offset: start,
                });
                continue;
            }
            other => {
                return Err(Error::Parse {
                    offset: start,
                    message: format!("unexpected character '{other}'"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
        i += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------- parsing

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next_is(&self, kind: &Tok) -> bool {
        self.peek().is_some_and(|t| &t.kind == kind)
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.offset)
    }

    fn expect(&mut self, kind: Tok, what: &str) -> Result<()> {
        if self.next_is(&kind) {
            self.pos += 1;
            Ok(())
        } else {
            let message = match self.peek() {
                Some(t) => format!("expected {what}, found {}", t.kind),
                None if kind == Tok::RParen => "unbalanced parentheses: missing ')'".into(),
                None => format!("expected {what}, found end of input"),
            };
            Err(Error::Parse {
                offset: self.here(),
                message,
            })
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.next_is(&Tok::Plus) {
                BinaryOp::Add
            } else if self.next_is(&Tok::Minus) {
                BinaryOp::Sub
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.next_is(&Tok::Star) {
                BinaryOp::Mul
            } else if self.next_is(&Tok::Slash) {
                BinaryOp::Div
            } else {
                return Ok(lhs);
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.next_is(&Tok::Minus) {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Node::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if self.next_is(&Tok::Caret) {
            self.pos += 1;
            let exponent = self.exponent()?;
            return Ok(Node::Binary(BinaryOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    // The right operand of `^` may carry its own unary minus: `2^-x`.
    fn exponent(&mut self) -> Result<Node> {
        if self.next_is(&Tok::Minus) {
            self.pos += 1;
            let inner = self.exponent()?;
            return Ok(Node::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn primary(&mut self) -> Result<Node> {
        let Some(tok) = self.peek().cloned() else {
            return Err(Error::Parse {
                offset: self.end,
                message: "unexpected end of input".into(),
            });
        };
        self.pos += 1;
        match tok.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(inner)
            }
            Tok::Ident(name) => match name.as_str() {
                "t" => Ok(Node::Var(Var::T)),
                "x" => Ok(Node::Var(Var::X)),
                "exp" | "abs" | "sin" | "cos" | "sqrt" => {
                    let op = match name.as_str() {
                        "exp" => UnaryOp::Exp,
                        "abs" => UnaryOp::Abs,
                        "sin" => UnaryOp::Sin,
                        "cos" => UnaryOp::Cos,
                        _ => UnaryOp::Sqrt,
                    };
                    self.expect(Tok::LParen, "'(' after function name")?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "')'")?;
                    Ok(Node::Unary(op, Box::new(arg)))
                }
                "max" | "min" => {
                    let op = if name == "max" {
                        BinaryOp::Max
                    } else {
                        BinaryOp::Min
                    };
                    self.expect(Tok::LParen, "'(' after function name")?;
                    let a = self.expr()?;
                    self.expect(Tok::Comma, "','")?;
                    let b = self.expr()?;
                    self.expect(Tok::RParen, "')'")?;
                    Ok(Node::Binary(op, Box::new(a), Box::new(b)))
                }
                _ => Err(Error::Parse {
                    offset: tok.offset,
                    message: format!("unknown identifier '{name}'"),
                }),
            },
            Tok::RParen => Err(Error::Parse {
                offset: tok.offset,
                message: "unbalanced parentheses: unexpected ')'".into(),
            }),
            other => Err(Error::Parse {
                offset: tok.offset,
                message: format!("unexpected token {other}"),
            }),
        }
    }
}

// ---------------------------------------------------------------- printing

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_NEG: u8 = 3;
const PREC_POW: u8 = 4;
const PREC_ATOM: u8 = 5;

fn prec(n: &Node) -> u8 {
    match n {
        Node::Const(_) | Node::Var(_) => PREC_ATOM,
        Node::Unary(UnaryOp::Neg, _) => PREC_NEG,
        Node::Unary(..) => PREC_ATOM,
        Node::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => PREC_ADD,
        Node::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => PREC_MUL,
        Node::Binary(BinaryOp::Pow, ..) => PREC_POW,
        Node::Binary(BinaryOp::Max | BinaryOp::Min, ..) => PREC_ATOM,
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, n: &Node, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({})", DisplayNode(n))
    } else {
        write!(f, "{}", DisplayNode(n))
    }
}

struct DisplayNode<'a>(&'a Node);

impl fmt::Display for DisplayNode<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Node::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "(-{})", -c)
                } else {
                    write!(f, "{c}")
                }
            }
            Node::Var(Var::T) => f.write_str("t"),
            Node::Var(Var::X) => f.write_str("x"),
            Node::Unary(UnaryOp::Neg, a) => {
                f.write_str("-")?;
                write_wrapped(f, a, prec(a) < PREC_NEG)
            }
            Node::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Exp => "exp",
                    UnaryOp::Abs => "abs",
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({})", DisplayNode(a))
            }
            Node::Binary(op @ (BinaryOp::Max | BinaryOp::Min), a, b) => {
                let name = if *op == BinaryOp::Max { "max" } else { "min" };
                write!(f, "{name}({}, {})", DisplayNode(a), DisplayNode(b))
            }
            Node::Binary(BinaryOp::Pow, a, b) => {
                write_wrapped(f, a, prec(a) <= PREC_POW)?;
                f.write_str("^")?;
                // exponent position accepts a bare unary minus or another power
                let rhs_ok = matches!(
                    **b,
                    Node::Unary(UnaryOp::Neg, _) | Node::Binary(BinaryOp::Pow, ..)
                ) || prec(b) == PREC_ATOM;
                write_wrapped(f, b, !rhs_ok)
            }
            Node::Binary(op, a, b) => {
                let (p, sym) = match op {
                    BinaryOp::Add => (PREC_ADD, " + "),
                    BinaryOp::Sub => (PREC_ADD, " - "),
                    BinaryOp::Mul => (PREC_MUL, "*"),
                    BinaryOp::Div => (PREC_MUL, "/"),
                    _ => unreachable!(),
                };
                write_wrapped(f, a, prec(a) < p)?;
                f.write_str(sym)?;
                write_wrapped(f, b, prec(b) <= p)
            }
        }
    }
}

/// Canonical form with minimal parentheses; re-parses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", DisplayNode(&self.root))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(v: f64) -> Box<Node> {
        Box::new(Node::Const(v))
    }
    fn x() -> Box<Node> {
        Box::new(Node::Var(Var::X))
    }
    fn t() -> Box<Node> {
        Box::new(Node::Var(Var::T))
    }

    #[test]
    fn parses_sum_of_power_and_exp() {
        let e = Expr::parse("x^2 + exp(t)").unwrap();
        let expected = Node::Binary(
            BinaryOp::Add,
            Box::new(Node::Binary(BinaryOp::Pow, x(), c(2.0))),
            Box::new(Node::Unary(UnaryOp::Exp, t())),
        );
        assert_eq!(e.root(), &expected);
        assert_eq!(e.eval(0.0, 2.0).unwrap(), 5.0);
    }

    #[test]
    fn parses_max_call() {
        let e = Expr::parse("max(x, 0)").unwrap();
        assert_eq!(e.root(), &Node::Binary(BinaryOp::Max, x(), c(0.0)));
        assert_eq!(e.eval(0.0, -3.0).unwrap(), 0.0);
    }

    #[test]
    fn reports_offset_of_bad_token() {
        match Expr::parse("x + * 2") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn reports_unbalanced_and_unknown() {
        assert!(matches!(
            Expr::parse("(x + 1"),
            Err(Error::Parse { offset: 6, .. })
        ));
        assert!(matches!(
            Expr::parse("x + 1)"),
            Err(Error::Parse { offset: 5, .. })
        ));
        assert!(matches!(
            Expr::parse("2*y"),
            Err(Error::Parse { offset: 2, .. })
        ));
        assert!(matches!(Expr::parse(""), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn precedence_rules() {
        // unary minus binds looser than ^
        assert_eq!(Expr::parse("-x^2").unwrap().eval(0.0, 3.0).unwrap(), -9.0);
        // ^ is right-associative
        assert_eq!(Expr::parse("2^3^2").unwrap().eval(0.0, 0.0).unwrap(), 512.0);
        assert_eq!(Expr::parse("2^-1").unwrap().eval(0.0, 0.0).unwrap(), 0.5);
        assert_eq!(Expr::parse("1 - 2 - 3").unwrap().eval(0.0, 0.0).unwrap(), -4.0);
        assert_eq!(Expr::parse("8/4/2").unwrap().eval(0.0, 0.0).unwrap(), 1.0);
        assert_eq!(Expr::parse("2*-3").unwrap().eval(0.0, 0.0).unwrap(), -6.0);
        assert_eq!(Expr::parse("1.5e-1*10").unwrap().eval(0.0, 0.0).unwrap(), 1.5);
    }

    #[test]
    fn domain_errors() {
        let inv = Expr::parse("1/x").unwrap();
        assert!(matches!(inv.eval(0.0, 0.0), Err(Error::Domain(_))));
        let root = Expr::parse("sqrt(x)").unwrap();
        assert!(matches!(root.eval(0.0, -1.0), Err(Error::Domain(_))));
        let pow = Expr::parse("x^0.5").unwrap();
        assert!(matches!(pow.eval(0.0, -4.0), Err(Error::Domain(_))));
        assert_eq!(Expr::parse("x^3").unwrap().eval(0.0, -2.0).unwrap(), -8.0);
        assert!(matches!(
            Expr::parse("exp(x)").unwrap().eval(0.0, 1000.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn printing_is_minimal() {
        for (src, printed) in [
            ("x^2 + exp(t)", "x^2 + exp(t)"),
            ("((x))*(t+1)", "x*(t + 1)"),
            ("x - (t - 1)", "x - (t - 1)"),
            ("(x - t) - 1", "x - t - 1"),
            ("(-x)^2", "(-x)^2"),
            ("2^-(x+1)", "2^-(x + 1)"),
            ("(2^3)^2", "(2^3)^2"),
            ("max(x,0) - max(-x,0)^3", "max(x, 0) - max(-x, 0)^3"),
        ] {
            assert_eq!(Expr::parse(src).unwrap().to_string(), printed, "{src}");
        }
    }

    fn arb_node() -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Node::Const(f64::from(v) / 8.0)),
            Just(Node::Var(Var::T)),
            Just(Node::Var(Var::X)),
        ];
        leaf.prop_recursive(5, 48, 2, |inner| {
            prop_oneof![
                (
                    prop_oneof![
                        Just(UnaryOp::Neg),
                        Just(UnaryOp::Exp),
                        Just(UnaryOp::Abs),
                        Just(UnaryOp::Sin),
                        Just(UnaryOp::Cos),
                        Just(UnaryOp::Sqrt)
                    ],
                    inner.clone()
                )
                    .prop_map(|(op, a)| Node::Unary(op, Box::new(a))),
                (
                    prop_oneof![
                        Just(BinaryOp::Add),
                        Just(BinaryOp::Sub),
                        Just(BinaryOp::Mul),
                        Just(BinaryOp::Div),
                        Just(BinaryOp::Pow),
                        Just(BinaryOp::Max),
                        Just(BinaryOp::Min)
                    ],
                    inner.clone(),
                    inner
                )
                    .prop_map(|(op, a, b)| Node::Binary(op, Box::new(a), Box::new(b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_parse_roundtrip(node in arb_node()) {
            let e = Expr::from_node(node);
            let printed = e.to_string();
            let reparsed = Expr::parse(&printed).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(reparsed.to_string(), printed);
        }

        #[test]
        fn eval_is_pure(node in arb_node(), t in -2.0f64..2.0, x in -2.0f64..2.0) {
            let e = Expr::from_node(node);
            let a = e.eval(t, x).ok().map(f64::to_bits);
            let b = e.eval(t, x).ok().map(f64::to_bits);
            prop_assert_eq!(a, b);
        }
    }
}

//! Arithmetic expressions over the variables `t`, `x`, `y` and `mu`.
//!
//! The grammar is fixed (no user functions, no conditionals):
//!
//! ```text
//! expr     := term   (('+' | '-') term)*
//! term     := unary  (('*' | '/') unary)*
//! unary    := '-' unary | power
//! power    := primary ('^' exponent)?
//! exponent := '-' exponent | power
//! primary  := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! so `^` binds tighter than unary minus (`-x^2 == -(x^2)`), `^` is right
//! associative and the other binary operators are left associative. Angles are
//! in radians; `pi` and `e` are reserved constants.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X,
    Y,
    Mu,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Mu => "mu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Sqrt,
    Exp,
    Abs,
    Pow,
}

impl Func {
    pub const ALL: [Func; 6] = [Func::Sin, Func::Cos, Func::Sqrt, Func::Exp, Func::Abs, Func::Pow];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Pow => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Expression tree. Constants produced by the parser are always finite and
/// non-negative; negation is an explicit [`Node::Neg`].
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Neg(Box<Node>),
    Binary(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

const PREC_NEG: u8 = 3;
const PREC_ATOM: u8 = 5;

impl Node {
    pub fn binary(op: BinOp, lhs: Node, rhs: Node) -> Node {
        Node::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    fn precedence(&self) -> u8 {
        match self {
            Node::Const(_) | Node::Var(_) | Node::Call(..) => PREC_ATOM,
            Node::Neg(_) => PREC_NEG,
            Node::Binary(op, ..) => op.precedence(),
        }
    }

    fn write_child(&self, f: &mut fmt::Formatter<'_>, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }

    /// Evaluates the tree at the given point.
    pub fn eval(&self, t: f64, x: f64, y: f64, mu: f64) -> Result<f64, ExprError> {
        let env = Env { t, x, y, mu };
        self.eval_in(&env)
    }

    fn eval_in(&self, env: &Env) -> Result<f64, ExprError> {
        let value = match self {
            Node::Const(c) => return Ok(*c),
            Node::Var(v) => return Ok(env.get(*v)),
            Node::Neg(inner) => -inner.eval_in(env)?,
            Node::Binary(op, lhs, rhs) => {
                let a = lhs.eval_in(env)?;
                let b = rhs.eval_in(env)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(self.domain(DomainKind::DivisionByZero));
                        }
                        a / b
                    }
                    BinOp::Pow => a.powf(b),
                }
            }
            Node::Call(func, args) => {
                let a = args[0].eval_in(env)?;
                match func {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(self.domain(DomainKind::SqrtOfNegative));
                        }
                        a.sqrt()
                    }
                    Func::Exp => a.exp(),
                    Func::Abs => a.abs(),
                    Func::Pow => a.powf(args[1].eval_in(env)?),
                }
            }
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(self.domain(DomainKind::NonFinite))
        }
    }

    fn domain(&self, kind: DomainKind) -> ExprError {
        ExprError::Domain {
            kind,
            subexpr: self.to_string(),
        }
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Node::Const(_) | Node::Var(_) => 1,
            Node::Neg(inner) => 1 + inner.size(),
            Node::Binary(_, a, b) => 1 + a.size() + b.size(),
            Node::Call(_, args) => 1 + args.iter().map(Node::size).sum::<usize>(),
        }
    }
}

struct Env {
    t: f64,
    x: f64,
    y: f64,
    mu: f64,
}

impl Env {
    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::X => self.x,
            Var::Y => self.y,
            Var::Mu => self.mu,
        }
    }
}

/// Unparses with the minimal parenthesization that reparses to the same tree.
impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) => write!(f, "{c}"),
            Node::Var(v) => f.write_str(v.name()),
            Node::Neg(inner) => {
                f.write_str("-")?;
                inner.write_child(f, inner.precedence() < PREC_NEG)
            }
            Node::Binary(op, lhs, rhs) => {
                let p = op.precedence();
                if *op == BinOp::Pow {
                    lhs.write_child(f, lhs.precedence() <= p)?;
                    f.write_str("^")?;
                    rhs.write_child(f, rhs.precedence() < PREC_NEG)
                } else {
                    lhs.write_child(f, lhs.precedence() < p)?;
                    write!(f, " {} ", op.symbol())?;
                    rhs.write_child(f, rhs.precedence() <= p)
                }
            }
            Node::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, arg) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{arg}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    DivisionByZero,
    SqrtOfNegative,
    NonFinite,
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainKind::DivisionByZero => "division by zero",
            DomainKind::SqrtOfNegative => "square root of a negative number",
            DomainKind::NonFinite => "non-finite result",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("`{name}` takes {expected} argument(s) but {found} were given (byte {offset})")]
    Arity {
        name: String,
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("domain error: {kind} in `{subexpr}`")]
    Domain { kind: DomainKind, subexpr: String },
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    source: String,
    ast: Node,
}

impl Expression {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        let ast = parse(source)?;
        Ok(Expression {
            source: source.to_owned(),
            ast,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn ast(&self) -> &Node {
        &self.ast
    }

    pub fn unparse(&self) -> String {
        self.ast.to_string()
    }

    pub fn eval(&self, t: f64, x: f64, y: f64, mu: f64) -> Result<f64, ExprError> {
        self.ast.eval(t, x, y, mu)
    }
}

impl std::str::FromStr for Expression {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

/// Parses `source` into an expression tree.
pub fn parse(source: &str) -> Result<Node, ExprError> {
    let tokens = lex(source)?;
    if tokens.len() == 1 {
        return Err(ExprError::Empty);
    }
    let mut parser = Parser { tokens, pos: 0 };
    let node = parser.expr()?;
    let tok = parser.peek();
    if tok.kind != TokenKind::End {
        return Err(ExprError::Syntax {
            offset: tok.offset,
            message: format!("unexpected {}", tok.kind.describe()),
        });
    }
    Ok(node)
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
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
    End,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Num(v) => format!("number {v}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Slash => "`/`".into(),
            TokenKind::Caret => "`^`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
            TokenKind::Comma => "`,`".into(),
            TokenKind::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn lex(source: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => TokenKind::Plus,
            b'-' => TokenKind::Minus,
            b'*' => TokenKind::Star,
            b'/' => TokenKind::Slash,
            b'^' => TokenKind::Caret,
            b'(' => TokenKind::LParen,
            b')' => TokenKind::RParen,
            b',' => TokenKind::Comma,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // exponent part only when followed by digits, so `2e` stays an error
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &source[start..i];
                let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                })?;
                tokens.push(Token {
                    kind: TokenKind::Num(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(source[start..i].to_owned()),
                    offset: start,
                });
                continue;
            }
            _ => {
                let ch = source[start..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        i += 1;
        tokens.push(Token { kind, offset: start });
    }
    tokens.push(Token {
        kind: TokenKind::End,
        offset: source.len(),
    });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].clone();
        if tok.kind != TokenKind::End {
            self.pos += 1;
        }
        tok
    }

    fn expect(&mut self, kind: TokenKind) -> Result<Token, ExprError> {
        let tok = self.bump();
        if tok.kind == kind {
            Ok(tok)
        } else {
            Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("expected {}, found {}", kind.describe(), tok.kind.describe()),
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Plus => BinOp::Add,
                TokenKind::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Star => BinOp::Mul,
                TokenKind::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.peek().kind == TokenKind::Minus {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.primary()?;
        if self.peek().kind == TokenKind::Caret {
            self.bump();
            let exponent = self.exponent()?;
            return Ok(Node::binary(BinOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<Node, ExprError> {
        if self.peek().kind == TokenKind::Minus {
            self.bump();
            return Ok(Node::Neg(Box::new(self.exponent()?)));
        }
        self.power()
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let tok = self.bump();
        match tok.kind {
            TokenKind::Num(v) => Ok(Node::Const(v)),
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                Ok(inner)
            }
            TokenKind::Ident(name) => {
                if self.peek().kind == TokenKind::LParen {
                    return self.call(name, tok.offset);
                }
                match name.as_str() {
                    "t" => Ok(Node::Var(Var::T)),
                    "x" => Ok(Node::Var(Var::X)),
                    "y" => Ok(Node::Var(Var::Y)),
                    "mu" => Ok(Node::Var(Var::Mu)),
                    "pi" => Ok(Node::Const(std::f64::consts::PI)),
                    "e" => Ok(Node::Const(std::f64::consts::E)),
                    _ => Err(ExprError::UnknownIdentifier {
                        name,
                        offset: tok.offset,
                    }),
                }
            }
            other => Err(ExprError::Syntax {
                offset: tok.offset,
                message: format!("expected an operand, found {}", other.describe()),
            }),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Node, ExprError> {
        let func = Func::lookup(&name).ok_or_else(|| ExprError::UnknownIdentifier {
            name: name.clone(),
            offset,
        })?;
        self.expect(TokenKind::LParen)?;
        let mut args = Vec::new();
        if self.peek().kind != TokenKind::RParen {
            args.push(self.expr()?);
            while self.peek().kind == TokenKind::Comma {
                self.bump();
                args.push(self.expr()?);
            }
        }
        self.expect(TokenKind::RParen)?;
        if args.len() != func.arity() {
            return Err(ExprError::Arity {
                name,
                expected: func.arity(),
                found: args.len(),
                offset,
            });
        }
        Ok(Node::Call(func, args))
    }
}

/// Builds a planar standard-form field whose `i`-th term has the two given
/// component expressions in `(t, x, y, mu)`.
pub fn planar_field(
    period: f64,
    terms: Vec<[Expression; 2]>,
) -> Result<crate::ode::FieldSpec, crate::ode::OdeError> {
    let mut field = crate::ode::FieldSpec::new(2, period)?;
    for [fx, fy] in terms {
        field = field.with_term(move |t, s, mu, out| {
            out[0] = fx.eval(t, s[0], s[1], mu)?;
            out[1] = fy.eval(t, s[0], s[1], mu)?;
            Ok(())
        });
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(v: Var) -> Node {
        Node::Var(v)
    }

    fn c(v: f64) -> Node {
        Node::Const(v)
    }

    #[test]
    fn single_variable() {
        assert_eq!(parse("x").unwrap(), var(Var::X));
    }

    #[test]
    fn precedence_of_unary_minus_and_power() {
        let expected = Node::binary(
            BinOp::Add,
            Node::Neg(Box::new(var(Var::Y))),
            Node::binary(BinOp::Mul, c(2.0), Node::binary(BinOp::Pow, var(Var::X), c(2.0))),
        );
        assert_eq!(parse("-y + 2*x^2").unwrap(), expected);
        // -x^2 is -(x^2)
        assert_eq!(
            parse("-x^2").unwrap(),
            Node::Neg(Box::new(Node::binary(BinOp::Pow, var(Var::X), c(2.0))))
        );
    }

    #[test]
    fn associativity() {
        // left for -, right for ^
        assert_eq!(
            parse("x - y - t").unwrap(),
            Node::binary(BinOp::Sub, Node::binary(BinOp::Sub, var(Var::X), var(Var::Y)), var(Var::T))
        );
        assert_eq!(
            parse("x ^ y ^ t").unwrap(),
            Node::binary(BinOp::Pow, var(Var::X), Node::binary(BinOp::Pow, var(Var::Y), var(Var::T)))
        );
        assert_eq!(
            parse("x^-y").unwrap(),
            Node::binary(BinOp::Pow, var(Var::X), Node::Neg(Box::new(var(Var::Y))))
        );
    }

    #[test]
    fn rho_expression() {
        let expected = Node::binary(
            BinOp::Div,
            c(1.0),
            Node::Call(
                Func::Sqrt,
                vec![Node::binary(
                    BinOp::Add,
                    Node::binary(BinOp::Pow, var(Var::X), c(2.0)),
                    Node::binary(BinOp::Pow, var(Var::Y), c(2.0)),
                )],
            ),
        );
        assert_eq!(parse("1/sqrt(x^2+y^2)").unwrap(), expected);
    }

    #[test]
    fn evaluation_examples() {
        let x = Expression::parse("x").unwrap();
        assert_eq!(x.eval(0.0, 3.0, 0.0, 0.0).unwrap(), 3.0);
        let r2 = Expression::parse("x^2+y^2").unwrap();
        assert_eq!(r2.eval(0.0, 3.0, 4.0, 0.0).unwrap(), 25.0);
        let rho = Expression::parse("1/sqrt(x^2+y^2)").unwrap();
        assert!((rho.eval(0.0, 0.6, 0.8, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_and_functions() {
        let e = Expression::parse("pow(e, 2) - exp(2) + cos(pi) + abs(-mu)").unwrap();
        let v = e.eval(0.0, 0.0, 0.0, 0.5).unwrap();
        assert!((v - (-0.5)).abs() < 1e-14);
        let s = Expression::parse("sin(t)").unwrap();
        assert_eq!(s.eval(1.25, 0.0, 0.0, 0.0).unwrap(), 1.25f64.sin());
        let sci = Expression::parse("2.5e-3 * x").unwrap();
        assert_eq!(sci.eval(0.0, 2.0, 0.0, 0.0).unwrap(), 5e-3);
    }

    #[test]
    fn domain_errors_name_the_subexpression() {
        let e = Expression::parse("1 + 1/(x - 1)").unwrap();
        match e.eval(0.0, 1.0, 0.0, 0.0) {
            Err(ExprError::Domain { kind, subexpr }) => {
                assert_eq!(kind, DomainKind::DivisionByZero);
                assert_eq!(subexpr, "1 / (x - 1)");
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let e = Expression::parse("sqrt(y)").unwrap();
        assert!(matches!(
            e.eval(0.0, 0.0, -1.0, 0.0),
            Err(ExprError::Domain {
                kind: DomainKind::SqrtOfNegative,
                ..
            })
        ));
        let e = Expression::parse("1/sqrt(x^2+y^2)").unwrap();
        assert!(matches!(
            e.eval(0.0, 0.0, 0.0, 0.0),
            Err(ExprError::Domain {
                kind: DomainKind::DivisionByZero,
                ..
            })
        ));
        let e = Expression::parse("pow(x, 0.5)").unwrap();
        assert!(matches!(
            e.eval(0.0, -2.0, 0.0, 0.0),
            Err(ExprError::Domain {
                kind: DomainKind::NonFinite,
                ..
            })
        ));
    }

    #[test]
    fn syntax_errors_report_offsets() {
        assert_eq!(parse(""), Err(ExprError::Empty));
        assert_eq!(parse("   "), Err(ExprError::Empty));
        match parse("x + * y") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match parse("(x + y") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        match parse("x y") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        match parse("x # y") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identifier_and_arity_errors() {
        assert_eq!(
            parse("2*z"),
            Err(ExprError::UnknownIdentifier {
                name: "z".into(),
                offset: 2
            })
        );
        assert!(matches!(parse("tan(x)"), Err(ExprError::UnknownIdentifier { .. })));
        assert_eq!(
            parse("pow(x)"),
            Err(ExprError::Arity {
                name: "pow".into(),
                expected: 2,
                found: 1,
                offset: 0
            })
        );
        assert!(matches!(parse("sin(x, y)"), Err(ExprError::Arity { found: 2, .. })));
    }

    #[test]
    fn unparse_minimal_parentheses() {
        for (src, out) in [
            ("x - (y - t)", "x - (y - t)"),
            ("(x - y) - t", "x - y - t"),
            ("(-x)^2", "(-x)^2"),
            ("-(x*y)", "-(x * y)"),
            ("(x^y)^t", "(x^y)^t"),
            ("x^(y+1)", "x^(y + 1)"),
            ("2*-x", "2 * -x"),
        ] {
            let node = parse(src).unwrap();
            assert_eq!(node.to_string(), out, "unparse of {src}");
            assert_eq!(parse(out).unwrap(), node);
        }
    }
}

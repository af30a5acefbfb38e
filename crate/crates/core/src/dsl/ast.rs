use std::fmt;

/// Byte range in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn join(self, other: Span) -> Span {
        Span::new(self.start.min(other.start), self.end.max(other.end))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub bindings: Vec<Binding>,
    pub result: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub name: String,
    pub value: Expr,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    /// Canonical decimal text, always non-negative.
    Number(String),
    Text(String),
    Column(String),
    Name(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    Arg {
        which: ArgKind,
        values: Box<Expr>,
        keys: Box<Expr>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Contains,
    And,
    Or,
}

impl BinOp {
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq
            | BinOp::Ne
            | BinOp::Lt
            | BinOp::Le
            | BinOp::Gt
            | BinOp::Ge
            | BinOp::Contains => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div => 5,
        }
    }

    pub fn is_comparison(self) -> bool {
        self.precedence() == 3
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Contains => "contains",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }

    pub const ALL: [BinOp; 13] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Contains,
        BinOp::And,
        BinOp::Or,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    ToNumber,
    Count,
    Sum,
    Min,
    Max,
    Avg,
    Filter,
    Concat,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::ToNumber => "to_number",
            Func::Count => "count",
            Func::Sum => "sum",
            Func::Min => "min",
            Func::Max => "max",
            Func::Avg => "avg",
            Func::Filter => "filter",
            Func::Concat => "concat",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "to_number" => Func::ToNumber,
            "count" => Func::Count,
            "sum" => Func::Sum,
            "min" => Func::Min,
            "max" => Func::Max,
            "avg" => Func::Avg,
            "filter" => Func::Filter,
            "concat" => Func::Concat,
            _ => return None,
        })
    }

    /// Accepted argument counts as `(min, max)`.
    pub fn arity(self) -> (usize, Option<usize>) {
        match self {
            Func::Filter => (2, Some(2)),
            Func::Concat => (1, None),
            _ => (1, Some(1)),
        }
    }

    pub const ALL: [Func; 8] = [
        Func::ToNumber,
        Func::Count,
        Func::Sum,
        Func::Min,
        Func::Max,
        Func::Avg,
        Func::Filter,
        Func::Concat,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Min,
    Max,
}

impl ArgKind {
    pub fn name(self) -> &'static str {
        match self {
            ArgKind::Min => "argmin",
            ArgKind::Max => "argmax",
        }
    }
}

impl Expr {
    pub fn new(kind: ExprKind) -> Self {
        Self {
            kind,
            span: Span::default(),
        }
    }

    /// Copy of the tree with every span zeroed, for structural comparison.
    pub fn without_spans(&self) -> Expr {
        let kind = match &self.kind {
            ExprKind::Neg(e) => ExprKind::Neg(Box::new(e.without_spans())),
            ExprKind::Binary(op, a, b) => {
                ExprKind::Binary(*op, Box::new(a.without_spans()), Box::new(b.without_spans()))
            }
            ExprKind::Call(f, args) => {
                ExprKind::Call(*f, args.iter().map(Expr::without_spans).collect())
            }
            ExprKind::Arg { which, values, keys } => ExprKind::Arg {
                which: *which,
                values: Box::new(values.without_spans()),
                keys: Box::new(keys.without_spans()),
            },
            other => other.clone(),
        };
        Expr::new(kind)
    }
}

impl Program {
    pub fn without_spans(&self) -> Program {
        Program {
            bindings: self
                .bindings
                .iter()
                .map(|b| Binding {
                    name: b.name.clone(),
                    value: b.value.without_spans(),
                    span: Span::default(),
                })
                .collect(),
            result: self.result.without_spans(),
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::print::print_program(self))
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::print::print_expr(self))
    }
}

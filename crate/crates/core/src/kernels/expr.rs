//! Kernel expression language.
//!
//! ```text
//! expr   := name '(' [arg (',' arg)*] ')'
//! arg    := expr | number | key '=' value
//! value  := number | '[' number (',' number)* ']'
//! ```
//!
//! Base kernels take keyword arguments, all optional and defaulting to 1:
//! `rbf`, `matern12`, `matern32`, `matern52` (`s2`, `l`), `rq` (`s2`, `l`, `alpha`),
//! `periodic` (`s2`, `l`, `T`) and `linear` (`w`, `b`). `l` accepts a list for
//! per-dimension lengthscales. Combinators take positional arguments:
//! `sum(e, e, ...)`, `product(e, e, ...)` and `scaled(c, e)`.
//!
//! Example: `scaled(0.5, product(rbf(l=1.0), periodic(l=0.5, T=1.0)))`.

use std::fmt;

use super::{Kernel, Lengthscale};

/// Parse failure with a 1-based column into the expression.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParseError {
    pub column: usize,
    pub message: String,
}

impl fmt::Display for KernelParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

impl std::error::Error for KernelParseError {}

pub fn parse_kernel(source: &str) -> Result<Kernel, KernelParseError> {
    let mut parser = Parser {
        src: source.as_bytes(),
        pos: 0,
    };
    let kernel = parser.expr()?;
    parser.skip_ws();
    if parser.pos != parser.src.len() {
        return Err(parser.error("unexpected trailing input"));
    }
    Ok(kernel)
}

enum Arg {
    Kernel(Kernel, usize),
    Number(f64, usize),
    Keyword(String, Value, usize),
}

enum Value {
    Number(f64),
    List(Vec<f64>),
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> KernelParseError {
        self.error_at(self.pos, message)
    }

    fn error_at(&self, pos: usize, message: impl Into<String>) -> KernelParseError {
        KernelParseError {
            column: pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), KernelParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> Result<(String, usize), KernelParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        if start == self.pos || self.src[start].is_ascii_digit() {
            self.pos = start;
            return Err(self.error("expected a name"));
        }
        Ok((String::from_utf8_lossy(&self.src[start..self.pos]).into_owned(), start))
    }

    fn number(&mut self) -> Result<f64, KernelParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let sign_after_exp = (c == b'-' || c == b'+')
                && self.pos > start
                && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || sign_after_exp || (self.pos == start && (c == b'-' || c == b'+')) {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        text.parse::<f64>().map_err(|_| self.error_at(start, format!("invalid number `{text}`")))
    }

    fn value(&mut self) -> Result<Value, KernelParseError> {
        if self.peek() == Some(b'[') {
            self.pos += 1;
            let mut values = vec![self.number()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                values.push(self.number()?);
            }
            self.expect(b']')?;
            Ok(Value::List(values))
        } else {
            Ok(Value::Number(self.number()?))
        }
    }

    fn arg(&mut self) -> Result<Arg, KernelParseError> {
        let start = {
            self.skip_ws();
            self.pos
        };
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() => {
                let (name, _) = self.ident()?;
                match self.peek() {
                    Some(b'=') => {
                        self.pos += 1;
                        Ok(Arg::Keyword(name, self.value()?, start))
                    }
                    Some(b'(') => {
                        self.pos = start;
                        Ok(Arg::Kernel(self.expr()?, start))
                    }
                    _ => Err(self.error("expected `=` or `(` after name")),
                }
            }
            _ => Ok(Arg::Number(self.number()?, start)),
        }
    }

    fn expr(&mut self) -> Result<Kernel, KernelParseError> {
        let (name, name_pos) = self.ident()?;
        self.expect(b'(')?;
        let mut args = Vec::new();
        if self.peek() != Some(b')') {
            args.push(self.arg()?);
            while self.peek() == Some(b',') {
                self.pos += 1;
                args.push(self.arg()?);
            }
        }
        self.expect(b')')?;
        self.build(&name, name_pos, args)
    }

    fn build(&self, name: &str, at: usize, args: Vec<Arg>) -> Result<Kernel, KernelParseError> {
        let invalid = |e: crate::error::Error| self.error_at(at, e.to_string());
        match name {
            "sum" | "product" => {
                let mut kernels = Vec::new();
                for arg in args {
                    match arg {
                        Arg::Kernel(k, _) => kernels.push(k),
                        Arg::Number(_, p) | Arg::Keyword(_, _, p) => {
                            return Err(self.error_at(p, format!("`{name}` takes kernel arguments only")))
                        }
                    }
                }
                if kernels.len() < 2 {
                    return Err(self.error_at(at, format!("`{name}` needs at least two kernels")));
                }
                let mut iter = kernels.into_iter();
                let first = iter.next().unwrap();
                Ok(iter.fold(first, |acc, k| {
                    if name == "sum" {
                        Kernel::sum(acc, k)
                    } else {
                        Kernel::product(acc, k)
                    }
                }))
            }
            "scaled" => match <[Arg; 2]>::try_from(args) {
                Ok([Arg::Number(c, _), Arg::Kernel(k, _)]) => Kernel::scaled(c, k).map_err(invalid),
                _ => Err(self.error_at(at, "`scaled` takes a number and a kernel")),
            },
            "rbf" | "matern12" | "matern32" | "matern52" | "rq" | "periodic" | "linear" => {
                let allowed: &[&str] = match name {
                    "rq" => &["s2", "l", "alpha"],
                    "periodic" => &["s2", "l", "T"],
                    "linear" => &["w", "b"],
                    _ => &["s2", "l"],
                };
                let mut s2 = 1.0;
                let mut l = Lengthscale::Scalar(1.0);
                let mut extra = 1.0;
                let (mut w, mut b) = (1.0, 1.0);
                for arg in args {
                    let (key, value, p) = match arg {
                        Arg::Keyword(k, v, p) => (k, v, p),
                        Arg::Kernel(_, p) | Arg::Number(_, p) => {
                            return Err(self.error_at(p, format!("`{name}` takes keyword arguments only")))
                        }
                    };
                    if !allowed.contains(&key.as_str()) {
                        return Err(self.error_at(
                            p,
                            format!("unknown parameter `{key}` for `{name}` (expected one of {})", allowed.join(", ")),
                        ));
                    }
                    match (key.as_str(), value) {
                        ("l", Value::Number(v)) => l = Lengthscale::Scalar(v),
                        ("l", Value::List(v)) => l = Lengthscale::PerDim(v),
                        (_, Value::List(_)) => return Err(self.error_at(p, format!("`{key}` must be a number"))),
                        ("s2", Value::Number(v)) => s2 = v,
                        ("w", Value::Number(v)) => w = v,
                        ("b", Value::Number(v)) => b = v,
                        (_, Value::Number(v)) => extra = v,
                    }
                }
                let kernel = match name {
                    "rbf" => Kernel::Rbf { variance: s2, lengthscale: l },
                    "matern12" => Kernel::Matern12 { variance: s2, lengthscale: l },
                    "matern32" => Kernel::Matern32 { variance: s2, lengthscale: l },
                    "matern52" => Kernel::Matern52 { variance: s2, lengthscale: l },
                    "rq" => Kernel::RationalQuadratic {
                        variance: s2,
                        lengthscale: l,
                        alpha: extra,
                    },
                    "periodic" => Kernel::Periodic {
                        variance: s2,
                        lengthscale: l,
                        period: extra,
                    },
                    _ => Kernel::Linear {
                        weight_variance: w,
                        bias_variance: b,
                    },
                };
                kernel.validate().map_err(invalid)?;
                Ok(kernel)
            }
            other => Err(self.error_at(at, format!("unknown kernel `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_expression() {
        let k = parse_kernel("scaled(0.5, product(rbf(l=1.0), periodic(l=0.5, T=1.0)))").unwrap();
        let want = Kernel::scaled(
            0.5,
            Kernel::product(Kernel::rbf(1.0, 1.0).unwrap(), Kernel::periodic(1.0, 0.5, 1.0).unwrap()),
        )
        .unwrap();
        assert_eq!(k, want);
    }

    #[test]
    fn parses_lists_and_exponents() {
        let k = parse_kernel(" matern52( s2 = 2e-1, l=[1.0, 2.5] ) ").unwrap();
        assert_eq!(
            k,
            Kernel::Matern52 {
                variance: 0.2,
                lengthscale: Lengthscale::PerDim(vec![1.0, 2.5])
            }
        );
        let s = parse_kernel("sum(rbf(), linear(w=0.5, b=2), rq(alpha=3))").unwrap();
        assert!(matches!(s, Kernel::Sum(..)));
    }

    #[test]
    fn display_round_trips() {
        for src in [
            "rbf(s2=1.5, l=0.25)",
            "scaled(2, sum(matern12(l=[1, 2]), periodic(T=3.5)))",
            "product(matern32(), linear(w=0.1, b=0.2))",
        ] {
            let k = parse_kernel(src).unwrap();
            assert_eq!(parse_kernel(&k.to_string()).unwrap(), k);
        }
    }

    #[test]
    fn reports_columns() {
        let e = parse_kernel("rbf(l=1.0, q=2)").unwrap_err();
        assert_eq!(e.column, 12);
        let e = parse_kernel("rbf(l=1.0").unwrap_err();
        assert_eq!(e.column, 10);
        let e = parse_kernel("gauss(l=1)").unwrap_err();
        assert_eq!(e.column, 1);
        let e = parse_kernel("rbf(l=-1)").unwrap_err();
        assert!(e.message.contains("positive"));
        assert!(parse_kernel("sum(rbf())").is_err());
        assert!(parse_kernel("rbf() extra").is_err());
        assert!(parse_kernel("scaled(rbf(), 2)").is_err());
    }
}

use super::{Func, QueryExpr, Selector};
use crate::error::{Error, Result};

/// Parse `func_over_time([arg,] metric{k="v",...}[dur] [offset dur])`.
pub fn parse(input: &str) -> Result<QueryExpr> {
    let mut p = Parser { s: input.as_bytes(), pos: 0 };
    let e = p.expr()?;
    p.ws();
    if p.pos != p.s.len() {
        return Err(Error::parse(p.pos, "trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b':'
}

fn is_ident(c: u8) -> bool {
    is_ident_start(c) || c.is_ascii_digit()
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::parse(self.pos, format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.ws();
        let start = self.pos;
        if !self.peek().is_some_and(is_ident_start) {
            return Err(Error::parse(start, "expected identifier"));
        }
        while self.peek().is_some_and(is_ident) {
            self.pos += 1;
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<f64> {
        self.ws();
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, b'.' | b'e' | b'E' | b'+' | b'-'))
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse::<f64>().ok())
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(start, "expected number"))
    }

    fn duration(&mut self) -> Result<i64> {
        self.ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let n: i64 = std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(start, "expected duration"))?;
        let unit_start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
            self.pos += 1;
        }
        let mult = match &self.s[unit_start..self.pos] {
            b"ms" => 1,
            b"s" => 1_000,
            b"m" => 60_000,
            b"h" => 3_600_000,
            b"d" => 86_400_000,
            _ => return Err(Error::parse(unit_start, "expected unit ms, s, m, h or d")),
        };
        n.checked_mul(mult)
            .ok_or_else(|| Error::parse(start, "duration overflows"))
    }

    fn string(&mut self) -> Result<String> {
        self.expect(b'"')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None => return Err(Error::parse(self.pos, "unterminated string")),
                Some(b'"') => {
                    self.pos += 1;
                    break;
                }
                Some(b'\\') => {
                    self.pos += 1;
                    let c = match self.peek() {
                        Some(b'n') => b'\n',
                        Some(b't') => b'\t',
                        Some(c @ (b'"' | b'\\')) => c,
                        _ => return Err(Error::parse(self.pos, "bad escape")),
                    };
                    out.push(c);
                    self.pos += 1;
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
        String::from_utf8(out).map_err(|_| Error::parse(self.pos, "invalid UTF-8"))
    }

    fn selector(&mut self) -> Result<Selector> {
        let metric = self.ident()?;
        let mut matchers: Vec<(String, String)> = Vec::new();
        self.ws();
        if self.peek() == Some(b'{') {
            self.pos += 1;
            self.ws();
            if self.peek() == Some(b'}') {
                self.pos += 1;
            } else {
                loop {
                    let at = self.pos;
                    let k = self.ident()?;
                    self.expect(b'=')?;
                    let v = self.string()?;
                    if matchers.iter().any(|(x, _)| *x == k) {
                        return Err(Error::parse(at, format!("label `{k}` matched twice")));
                    }
                    matchers.push((k, v));
                    self.ws();
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b'}') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(Error::parse(self.pos, "expected `,` or `}`")),
                    }
                }
            }
        }
        Ok(Selector { metric, matchers })
    }

    fn expr(&mut self) -> Result<QueryExpr> {
        let at = {
            self.ws();
            self.pos
        };
        let name = self.ident()?;
        let func = match name.strip_suffix("_over_time") {
            Some(stem) => Func::from_stem(stem).ok_or(Error::UnsupportedFunction(name.clone()))?,
            None => return Err(Error::parse(at, format!("`{name}` is not a range function"))),
        };
        self.expect(b'(')?;
        let mut arg = None;
        if func.takes_arg() {
            let at = {
                self.ws();
                self.pos
            };
            let v = self.number()?;
            match func {
                Func::Quantile if !(0.0..=1.0).contains(&v) => {
                    return Err(Error::parse(at, "quantile level must be in [0, 1]"));
                }
                Func::TopK if v < 1.0 || v.fract() != 0.0 => {
                    return Err(Error::parse(at, "k must be a positive integer"));
                }
                _ => {}
            }
            arg = Some(v);
            self.expect(b',')?;
        }
        let selector = self.selector()?;
        self.expect(b'[')?;
        let at = {
            self.ws();
            self.pos
        };
        let range = self.duration()?;
        if range <= 0 {
            return Err(Error::parse(at, "range must be positive"));
        }
        self.expect(b']')?;
        self.ws();
        let mut offset = 0;
        if self.s[self.pos..].starts_with(b"offset") {
            self.pos += "offset".len();
            offset = self.duration()?;
        }
        self.expect(b')')?;
        Ok(QueryExpr {
            func,
            arg,
            selector,
            range,
            offset,
        })
    }
}

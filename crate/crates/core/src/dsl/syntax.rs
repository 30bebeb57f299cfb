//! Text syntax for programs.
//!
//! ```text
//! program := 'if' cond 'then' program 'else' program | sum
//! sum     := term ('+' term)*
//! term    := NUMBER '*' atom | atom
//! atom    := NUMBER | '[' NUMBER (',' NUMBER)* ']' | pid | '(' program ')'
//! pid     := 'pid' ('@' INT)? '<' sensor ',' NUMBER ',' NUMBER ',' NUMBER ',' NUMBER '>'
//! cond    := conj ('or' conj)*
//! conj    := unary ('and' unary)*
//! unary   := 'not' unary | '(' cond ')' | 's' '[' sensor ']' ('<' | '>') NUMBER
//! sensor  := INT | NAME
//! ```
//!
//! Keywords are case-insensitive, `⟨ ⟩` may stand in for `< >` around PID
//! arguments, and `−` is accepted as a minus sign. Sensor names resolve
//! through the table passed to [`parse_with_sensors`].

use std::fmt::{self, Write as _};

use thiserror::Error;

use super::{Comparator, Cond, PidConfig, Program};

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: Vec<String>,
    pub found: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: expected ", self.line, self.column)?;
        match self.expected.as_slice() {
            [one] => write!(f, "{one}")?,
            many => write!(f, "one of {}", many.join(", "))?,
        }
        write!(f, ", found {}", self.found)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64, String),
    Ident(String),
    Sym(char),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(_, text) => format!("number {text}"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Sym(c) => format!("`{c}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let (start_line, start_col) = (line, col);
        let is_minus = c == '-' || c == '−';
        let next_is_num = chars.get(i + 1).is_some_and(|n| n.is_ascii_digit() || *n == '.');
        if c.is_ascii_digit() || c == '.' || (is_minus && next_is_num) {
            let mut s = String::new();
            if is_minus {
                s.push('-');
                i += 1;
                col += 1;
            }
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let sign = chars.get(i + 1).is_some_and(|n| *n == '+' || *n == '-');
                let digit_at = if sign { i + 2 } else { i + 1 };
                if chars.get(digit_at).is_some_and(|n| n.is_ascii_digit()) {
                    for _ in i..digit_at {
                        s.push(chars[i]);
                        i += 1;
                        col += 1;
                    }
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        s.push(chars[i]);
                        i += 1;
                        col += 1;
                    }
                }
            }
            let value: f64 = s.parse().map_err(|_| ParseError {
                line: start_line,
                column: start_col,
                expected: vec!["number".into()],
                found: format!("`{s}`"),
            })?;
            out.push(Spanned { tok: Tok::Num(value, s), line: start_line, column: start_col });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                i += 1;
                col += 1;
            }
            out.push(Spanned { tok: Tok::Ident(s), line: start_line, column: start_col });
            continue;
        }
        let sym = match c {
            '⟨' => '<',
            '⟩' => '>',
            '(' | ')' | '[' | ']' | '<' | '>' | ',' | '+' | '*' | '@' => c,
            other => {
                return Err(ParseError {
                    line,
                    column: col,
                    expected: vec!["a program token".into()],
                    found: format!("`{other}`"),
                })
            }
        };
        out.push(Spanned { tok: Tok::Sym(sym), line: start_line, column: start_col });
        i += 1;
        col += 1;
    }
    out.push(Spanned { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    sensors: &'a [(&'a str, usize)],
}

type PResult<T> = Result<T, ParseError>;

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].tok
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        let at = &self.toks[self.pos];
        ParseError {
            line: at.line,
            column: at.column,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: at.tok.describe(),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> PResult<()> {
        if self.is_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&[&format!("`{kw}`")]))
        }
    }

    fn sym(&mut self, c: char) -> PResult<()> {
        if *self.peek() == Tok::Sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&[&format!("`{c}`")]))
        }
    }

    fn number(&mut self) -> PResult<f64> {
        match self.peek() {
            Tok::Num(v, _) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.error(&["number"])),
        }
    }

    fn index(&mut self) -> PResult<usize> {
        match self.peek() {
            Tok::Num(v, text) if v.fract() == 0.0 && *v >= 0.0 && !text.contains(['.', 'e', 'E', '-']) => {
                let v = *v as usize;
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.error(&["non-negative integer"])),
        }
    }

    fn sensor(&mut self) -> PResult<usize> {
        if let Tok::Ident(name) = self.peek() {
            if let Some((_, idx)) = self.sensors.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)) {
                let idx = *idx;
                self.pos += 1;
                return Ok(idx);
            }
            return Err(self.error(&["sensor index", "known sensor name"]));
        }
        self.index().map_err(|_| self.error(&["sensor index", "sensor name"]))
    }

    fn program(&mut self) -> PResult<Program> {
        if self.is_keyword("if") {
            self.pos += 1;
            let cond = self.cond()?;
            self.keyword("then")?;
            let then = self.program()?;
            self.keyword("else")?;
            let otherwise = self.program()?;
            return Ok(Program::if_then_else(cond, then, otherwise));
        }
        let mut terms = vec![self.term()?];
        while *self.peek() == Tok::Sym('+') {
            self.pos += 1;
            terms.push(self.term()?);
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Program::Add(terms) })
    }

    fn term(&mut self) -> PResult<Program> {
        if let (Tok::Num(c, _), Tok::Sym('*')) = (self.peek(), self.peek2()) {
            let c = *c;
            self.pos += 2;
            let inner = self.atom()?;
            return Ok(Program::Scale(c, Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> PResult<Program> {
        match self.peek().clone() {
            Tok::Num(v, _) => {
                self.pos += 1;
                Ok(Program::Const(vec![v]))
            }
            Tok::Sym('[') => {
                self.pos += 1;
                let mut values = vec![self.number()?];
                while *self.peek() == Tok::Sym(',') {
                    self.pos += 1;
                    values.push(self.number()?);
                }
                self.sym(']')?;
                Ok(Program::Const(values))
            }
            Tok::Sym('(') => {
                self.pos += 1;
                let p = self.program()?;
                self.sym(')')?;
                Ok(p)
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("pid") => {
                self.pos += 1;
                let output = if *self.peek() == Tok::Sym('@') {
                    self.pos += 1;
                    self.index()?
                } else {
                    0
                };
                self.sym('<')?;
                let sensor = self.sensor()?;
                let mut params = [0.0; 4];
                for p in params.iter_mut() {
                    self.sym(',')?;
                    *p = self.number()?;
                }
                self.sym('>')?;
                let [target, kp, ki, kd] = params;
                Ok(Program::Pid(PidConfig { sensor, target, kp, ki, kd, output }))
            }
            _ => Err(self.error(&["number", "`[`", "`(`", "`pid`", "`if`"])),
        }
    }

    fn cond(&mut self) -> PResult<Cond> {
        let mut c = self.conj()?;
        while self.is_keyword("or") {
            self.pos += 1;
            c = Cond::Or(Box::new(c), Box::new(self.conj()?));
        }
        Ok(c)
    }

    fn conj(&mut self) -> PResult<Cond> {
        let mut c = self.unary()?;
        while self.is_keyword("and") {
            self.pos += 1;
            c = Cond::And(Box::new(c), Box::new(self.unary()?));
        }
        Ok(c)
    }

    fn unary(&mut self) -> PResult<Cond> {
        if self.is_keyword("not") {
            self.pos += 1;
            return Ok(Cond::Not(Box::new(self.unary()?)));
        }
        if *self.peek() == Tok::Sym('(') {
            self.pos += 1;
            let c = self.cond()?;
            self.sym(')')?;
            return Ok(c);
        }
        if self.is_keyword("s") {
            self.pos += 1;
            self.sym('[')?;
            let sensor = self.sensor()?;
            self.sym(']')?;
            let cmp = match self.peek() {
                Tok::Sym('<') => Comparator::Less,
                Tok::Sym('>') => Comparator::Greater,
                _ => return Err(self.error(&["`<`", "`>`"])),
            };
            self.pos += 1;
            let threshold = self.number()?;
            return Ok(Cond::Atom { sensor, cmp, threshold });
        }
        Err(self.error(&["`s`", "`(`", "`not`"]))
    }
}

/// Parses a program using numeric sensor indices only.
pub fn parse(text: &str) -> Result<Program, ParseError> {
    parse_with_sensors(text, &[])
}

/// Parses a program, resolving symbolic sensor names through `sensors`.
pub fn parse_with_sensors(text: &str, sensors: &[(&str, usize)]) -> Result<Program, ParseError> {
    let mut p = Parser { toks: lex(text)?, pos: 0, sensors };
    let prog = p.program()?;
    if *p.peek() != Tok::Eof {
        return Err(p.error(&["end of input", "`+`"]));
    }
    Ok(prog)
}

pub(super) fn print(p: &Program) -> String {
    let mut s = String::new();
    write_program(&mut s, p);
    s
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v}").unwrap();
}

fn write_program(out: &mut String, p: &Program) {
    match p {
        Program::If { cond, then, otherwise } => {
            out.push_str("if (");
            write_cond(out, cond);
            out.push_str(") then ");
            write_program(out, then);
            out.push_str(" else ");
            write_program(out, otherwise);
        }
        Program::Add(children) => {
            for (i, c) in children.iter().enumerate() {
                if i > 0 {
                    out.push_str(" + ");
                }
                write_term(out, c);
            }
        }
        other => write_term(out, other),
    }
}

fn write_term(out: &mut String, p: &Program) {
    match p {
        Program::Scale(c, inner) => {
            num(out, *c);
            out.push_str(" * ");
            write_atom(out, inner);
        }
        other => write_atom(out, other),
    }
}

fn write_atom(out: &mut String, p: &Program) {
    match p {
        Program::Const(v) if v.len() == 1 => num(out, v[0]),
        Program::Const(v) => {
            out.push('[');
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                num(out, *x);
            }
            out.push(']');
        }
        Program::Pid(pid) => {
            out.push_str("pid");
            if pid.output != 0 {
                write!(out, "@{}", pid.output).unwrap();
            }
            write!(out, "<{}, ", pid.sensor).unwrap();
            for (i, x) in [pid.target, pid.kp, pid.ki, pid.kd].into_iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                num(out, x);
            }
            out.push('>');
        }
        other => {
            out.push('(');
            write_program(out, other);
            out.push(')');
        }
    }
}

fn write_cond(out: &mut String, c: &Cond) {
    match c {
        Cond::Or(a, b) => {
            write_cond(out, a);
            out.push_str(" or ");
            write_cond_paren_if(out, b, |c| matches!(c, Cond::Or(..)));
        }
        Cond::And(a, b) => {
            write_cond_paren_if(out, a, |c| matches!(c, Cond::Or(..)));
            out.push_str(" and ");
            write_cond_paren_if(out, b, |c| matches!(c, Cond::Or(..) | Cond::And(..)));
        }
        Cond::Not(a) => {
            out.push_str("not ");
            write_cond_paren_if(out, a, |c| matches!(c, Cond::Or(..) | Cond::And(..)));
        }
        Cond::Atom { sensor, cmp, threshold } => {
            write!(out, "s[{sensor}] {} ", if *cmp == Comparator::Less { '<' } else { '>' }).unwrap();
            num(out, *threshold);
        }
    }
}

fn write_cond_paren_if(out: &mut String, c: &Cond, needs: impl Fn(&Cond) -> bool) {
    if needs(c) {
        out.push('(');
        write_cond(out, c);
        out.push(')');
    } else {
        write_cond(out, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TRACK_PROGRAM: &str = "if (s[TrackPos] < 0.011 and s[TrackPos] > −0.011) \
        then PID⟨RPM,0.45,3.54,0.03,53.39⟩ else PID⟨RPM,0.39,3.54,0.03,53.39⟩";

    #[test]
    fn scalar_constant_round_trip() {
        let p = Program::constant(0.5);
        assert_eq!(print(&p), "0.5");
        assert_eq!(parse("0.5").unwrap(), p);
    }

    #[test]
    fn track_program_text_parses() {
        let p = parse_with_sensors(TRACK_PROGRAM, &[("TrackPos", 0), ("RPM", 1)]).unwrap();
        match &p {
            Program::If { cond: Cond::And(..), then, otherwise } => {
                assert_eq!(**then, Program::Pid(PidConfig::new(1, 0.45, 3.54, 0.03, 53.39)));
                assert_eq!(**otherwise, Program::Pid(PidConfig::new(1, 0.39, 3.54, 0.03, 53.39)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
        let text = print(&p);
        assert_eq!(
            text,
            "if (s[0] < 0.011 and s[0] > -0.011) then pid<1, 0.45, 3.54, 0.03, 53.39> else pid<1, 0.39, 3.54, 0.03, 53.39>"
        );
        assert_eq!(parse(&text).unwrap(), p);
        assert_eq!(print(&parse(&text).unwrap()), text);
    }

    #[test]
    fn missing_threshold_is_reported() {
        let err = parse("if (s[0] < )").unwrap_err();
        assert_eq!((err.line, err.column), (1, 12));
        assert_eq!(err.expected, vec!["number".to_string()]);
        assert!(err.to_string().contains("found `)`"));
    }

    #[test]
    fn errors_track_lines() {
        let err = parse("if (s[0] < 1)\nthen 1\nels 2").unwrap_err();
        assert_eq!((err.line, err.column), (3, 1));
    }

    #[test]
    fn unknown_sensor_name() {
        assert!(parse("pid<RPM, 0, 1, 0, 0>").is_err());
    }

    #[test]
    fn precedence_and_grouping() {
        let p = parse("0.5 * (pid<0, 1, 2, 3, 4> + 1) + [2]").unwrap();
        assert!(matches!(&p, Program::Add(c) if c.len() == 2 && matches!(c[0], Program::Scale(..))));
        let q = parse("if (not s[0] < 1 or s[1] > 2 and s[0] > -3) then 1 else 2").unwrap();
        match q {
            Program::If { cond: Cond::Or(a, b), .. } => {
                assert!(matches!(*a, Cond::Not(_)));
                assert!(matches!(*b, Cond::And(..)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_sums_and_conditionals_round_trip() {
        let text = "1 + (if (s[0] < 0) then 2 else 3 + 4) + 0.25 * (1 + 2)";
        let p = parse(text).unwrap();
        assert_eq!(print(&p), text);
        let q = parse("if (s[0] < 1) then if (s[1] > 2) then 3 else 4 else 5").unwrap();
        assert_eq!(parse(&print(&q)).unwrap(), q);
    }

    #[test]
    fn output_index_and_vectors() {
        let text = "[1, -2.5] + pid@1<0, 0.1, 2, 0, 1e-7>";
        let p = parse(text).unwrap();
        assert_eq!(parse(&print(&p)).unwrap(), p);
        assert!(matches!(&p, Program::Add(c) if matches!(&c[1], Program::Pid(PidConfig { output: 1, kd, .. }) if *kd == 1e-7)));
    }
}

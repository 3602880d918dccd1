//! Reader and writer for the MATPOWER version-2 case subset used by the
//! bundled IEEE systems: `baseMVA`, `bus`, `gen`, `branch`, `gencost`
//! (polynomial only) and the ignored `areas` table. Everything else is
//! rejected.

use std::fmt::Write as _;

use super::{Branch, Bus, BusKind, CaseError, Generator, NetworkCase, PolyCost};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    LBracket,
    RBracket,
    Semi,
    Comma,
    Eq,
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> CaseError {
    CaseError::Syntax {
        line,
        column: col,
        message: message.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Token>, CaseError> {
    let mut out = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = li + 1;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line, col });
            match c {
                '%' => break,
                ' ' | '\t' | '\r' => i += 1,
                '[' => {
                    push(&mut out, Tok::LBracket);
                    i += 1;
                }
                ']' => {
                    push(&mut out, Tok::RBracket);
                    i += 1;
                }
                ';' => {
                    push(&mut out, Tok::Semi);
                    i += 1;
                }
                ',' => {
                    push(&mut out, Tok::Comma);
                    i += 1;
                }
                '=' => {
                    push(&mut out, Tok::Eq);
                    i += 1;
                }
                '\'' => {
                    let start = i + 1;
                    let end = chars[start..]
                        .iter()
                        .position(|&ch| ch == '\'')
                        .map(|p| start + p)
                        .ok_or_else(|| syntax(line, col, "unterminated string literal"))?;
                    push(&mut out, Tok::Str(chars[start..end].iter().collect()));
                    i = end + 1;
                }
                '{' | '}' => {
                    return Err(CaseError::Unsupported(format!(
                        "cell arrays (line {line}, column {col})"
                    )))
                }
                c if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' => {
                    let start = i;
                    i += 1;
                    while i < chars.len() {
                        let ch = chars[i];
                        let exp_sign = (ch == '-' || ch == '+') && matches!(chars[i - 1], 'e' | 'E');
                        if ch.is_ascii_digit() || ch == '.' || ch == 'e' || ch == 'E' || exp_sign {
                            i += 1;
                        } else {
                            break;
                        }
                    }
                    let s: String = chars[start..i].iter().collect();
                    // signed infinities
                    if (s == "-" || s == "+") && chars[i..].starts_with(&['I', 'n', 'f']) {
                        i += 3;
                        let v = if s == "-" {
                            f64::NEG_INFINITY
                        } else {
                            f64::INFINITY
                        };
                        push(&mut out, Tok::Num(v));
                        continue;
                    }
                    let v: f64 = s
                        .parse()
                        .map_err(|_| syntax(line, col, format!("malformed number `{s}`")))?;
                    push(&mut out, Tok::Num(v));
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                    {
                        i += 1;
                    }
                    let s: String = chars[start..i].iter().collect();
                    if s == "Inf" {
                        push(&mut out, Tok::Num(f64::INFINITY));
                    } else {
                        push(&mut out, Tok::Ident(s));
                    }
                }
                other => return Err(syntax(line, col, format!("unexpected character `{other}`"))),
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line,
            col: chars.len() + 1,
        });
    }
    Ok(out)
}

#[derive(Debug)]
enum Value {
    Num(f64),
    Str(String),
    Matrix { rows: Vec<Vec<f64>>, line: usize },
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eof_error(&self) -> CaseError {
        let (line, col) = self.toks.last().map(|t| (t.line, t.col)).unwrap_or((1, 1));
        syntax(line, col, "unexpected end of input")
    }

    fn skip_newlines(&mut self) {
        while matches!(
            self.peek(),
            Some(Token {
                tok: Tok::Newline | Tok::Semi,
                ..
            })
        ) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, CaseError> {
        let t = self.next().ok_or_else(|| self.eof_error())?;
        if t.tok == want {
            Ok(t)
        } else {
            Err(syntax(t.line, t.col, format!("expected {what}")))
        }
    }

    fn value(&mut self) -> Result<Value, CaseError> {
        let t = self.next().ok_or_else(|| self.eof_error())?;
        match t.tok {
            Tok::Num(v) => Ok(Value::Num(v)),
            Tok::Str(s) => Ok(Value::Str(s)),
            Tok::LBracket => self.matrix(t.line),
            _ => Err(syntax(t.line, t.col, "expected a number, string, or matrix")),
        }
    }

    fn matrix(&mut self, line: usize) -> Result<Value, CaseError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut row: Vec<f64> = Vec::new();
        let mut width: Option<usize> = None;
        let mut row_start = (line, 1);
        loop {
            let t = self.next().ok_or_else(|| self.eof_error())?;
            match t.tok {
                Tok::Num(v) => {
                    if row.is_empty() {
                        row_start = (t.line, t.col);
                    }
                    row.push(v)
                }
                Tok::Comma => {}
                Tok::Semi | Tok::Newline | Tok::RBracket => {
                    if !row.is_empty() {
                        match width {
                            None => width = Some(row.len()),
                            Some(w) if w != row.len() => {
                                return Err(syntax(
                                    row_start.0,
                                    row_start.1,
                                    format!(
                                        "matrix row {} has {} columns, expected {w}",
                                        rows.len() + 1,
                                        row.len()
                                    ),
                                ))
                            }
                            _ => {}
                        }
                        rows.push(std::mem::take(&mut row));
                    }
                    if t.tok == Tok::RBracket {
                        return Ok(Value::Matrix { rows, line });
                    }
                }
                _ => return Err(syntax(t.line, t.col, "unexpected token inside matrix")),
            }
        }
    }
}

#[derive(Default)]
struct Fields {
    name: Option<String>,
    base_mva: Option<f64>,
    bus: Option<(Vec<Vec<f64>>, usize)>,
    gen: Option<(Vec<Vec<f64>>, usize)>,
    branch: Option<(Vec<Vec<f64>>, usize)>,
    gencost: Option<(Vec<Vec<f64>>, usize)>,
}

/// Parses a MATPOWER case file and validates the resulting network.
pub fn parse_matpower_case(text: &str) -> Result<NetworkCase, CaseError> {
    let mut p = Parser {
        toks: lex(text)?,
        pos: 0,
    };
    let mut f = Fields::default();
    let mut struct_name: Option<String> = None;

    p.skip_newlines();
    if let Some(Token {
        tok: Tok::Ident(kw), ..
    }) = p.peek()
    {
        if kw == "function" {
            p.pos += 1;
            let out = p.next().ok_or_else(|| p.eof_error())?;
            let Tok::Ident(out_name) = out.tok else {
                return Err(syntax(out.line, out.col, "expected output variable name"));
            };
            p.expect(Tok::Eq, "`=`")?;
            let fname = p.next().ok_or_else(|| p.eof_error())?;
            let Tok::Ident(fname) = fname.tok else {
                return Err(syntax(fname.line, fname.col, "expected function name"));
            };
            struct_name = Some(out_name);
            f.name = Some(fname);
        }
    }

    loop {
        p.skip_newlines();
        let Some(t) = p.next() else { break };
        let Tok::Ident(lhs) = t.tok else {
            return Err(syntax(t.line, t.col, "expected an assignment"));
        };
        let (head, field) = match lhs.split_once('.') {
            Some((h, fld)) => (h.to_string(), fld.to_string()),
            None => return Err(syntax(t.line, t.col, format!("unsupported statement `{lhs}`"))),
        };
        match &struct_name {
            Some(s) if *s != head => return Err(syntax(t.line, t.col, format!("unknown variable `{head}`"))),
            None => struct_name = Some(head),
            _ => {}
        }
        p.expect(Tok::Eq, "`=`")?;
        let value = p.value()?;
        // optional terminator then end of line
        if let Some(Token { tok: Tok::Semi, .. }) = p.peek() {
            p.pos += 1;
        }
        match p.next() {
            None => {}
            Some(Token {
                tok: Tok::Newline, ..
            }) => {}
            Some(t) => return Err(syntax(t.line, t.col, "expected end of statement")),
        }

        let (line, col) = (t.line, t.col);
        match (field.as_str(), value) {
            ("version", Value::Str(v)) => {
                if v != "2" {
                    return Err(CaseError::Unsupported(format!("case format version {v}")));
                }
            }
            ("baseMVA", Value::Num(v)) => f.base_mva = Some(v),
            ("bus", Value::Matrix { rows, line }) => f.bus = Some((rows, line)),
            ("gen", Value::Matrix { rows, line }) => f.gen = Some((rows, line)),
            ("branch", Value::Matrix { rows, line }) => f.branch = Some((rows, line)),
            ("gencost", Value::Matrix { rows, line }) => f.gencost = Some((rows, line)),
            ("areas", Value::Matrix { .. }) => {}
            ("dcline", _) => return Err(CaseError::Unsupported("DC lines (mpc.dcline)".into())),
            ("version" | "baseMVA" | "bus" | "gen" | "branch" | "gencost" | "areas", _) => {
                return Err(syntax(line, col, format!("wrong value type for `{field}`")))
            }
            (other, _) => return Err(CaseError::Unsupported(format!("case field `{other}`"))),
        }
    }
    build(f)
}

fn need(rows: &[Vec<f64>], cols: usize, table: &str, line: usize) -> Result<(), CaseError> {
    match rows.first() {
        Some(r) if r.len() < cols => Err(syntax(
            line,
            1,
            format!("`{table}` needs at least {cols} columns, found {}", r.len()),
        )),
        _ => Ok(()),
    }
}

fn as_id(v: f64, what: &str, row: usize) -> Result<u32, CaseError> {
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(CaseError::Semantic(format!(
            "{what} row {row}: `{v}` is not a valid bus number"
        )));
    }
    Ok(v as u32)
}

fn build(f: Fields) -> Result<NetworkCase, CaseError> {
    let missing = |what: &str| CaseError::Semantic(format!("missing `{what}`"));
    let base_mva = f.base_mva.ok_or_else(|| missing("baseMVA"))?;
    let (bus_rows, bus_line) = f.bus.ok_or_else(|| missing("bus"))?;
    let (gen_rows, gen_line) = f.gen.ok_or_else(|| missing("gen"))?;
    let (br_rows, br_line) = f.branch.ok_or_else(|| missing("branch"))?;
    need(&bus_rows, 13, "bus", bus_line)?;
    need(&gen_rows, 10, "gen", gen_line)?;
    need(&br_rows, 11, "branch", br_line)?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, r) in bus_rows.iter().enumerate() {
        let kind = match r[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => {
                return Err(CaseError::Unsupported(format!(
                    "isolated bus (type 4) at bus row {}",
                    i + 1
                )))
            }
            t => {
                return Err(CaseError::Semantic(format!(
                    "bus row {}: unknown bus type {t}",
                    i + 1
                )))
            }
        };
        buses.push(Bus {
            id: as_id(r[0], "bus", i + 1)?,
            kind,
            p_demand: r[2],
            q_demand: r[3],
            g_shunt: r[4],
            b_shunt: r[5],
            base_kv: r[9],
            v_max: r[11],
            v_min: r[12],
        });
    }

    let mut generators = Vec::with_capacity(gen_rows.len());
    for (i, r) in gen_rows.iter().enumerate() {
        generators.push(Generator {
            bus: as_id(r[0], "gen", i + 1)?,
            q_max: r[3],
            q_min: r[4],
            in_service: r[7] > 0.0,
            p_max: r[8],
            p_min: r[9],
            cost: PolyCost::default(),
        });
    }

    if let Some((rows, line)) = f.gencost {
        if rows.len() == 2 * generators.len() && !generators.is_empty() {
            return Err(CaseError::Unsupported(
                "reactive power cost rows in gencost".into(),
            ));
        }
        if rows.len() != generators.len() {
            return Err(CaseError::Semantic(format!(
                "gencost has {} rows for {} generators",
                rows.len(),
                generators.len()
            )));
        }
        need(&rows, 4, "gencost", line)?;
        for (i, (r, g)) in rows.iter().zip(generators.iter_mut()).enumerate() {
            let row = i + 1;
            match r[0] as i64 {
                1 => {
                    return Err(CaseError::Unsupported(format!(
                        "piecewise-linear cost at gencost row {row}"
                    )))
                }
                2 => {}
                m => {
                    return Err(CaseError::Semantic(format!(
                        "gencost row {row}: unknown cost model {m}"
                    )))
                }
            }
            let n = r[3];
            if n.fract() != 0.0 || !(0.0..=3.0).contains(&n) {
                return Err(CaseError::Unsupported(format!(
                    "gencost row {row}: polynomial with {n} coefficients (at most 3 supported)"
                )));
            }
            let n = n as usize;
            if r.len() < 4 + n {
                return Err(syntax(line + row, 1, format!("gencost row {row} is truncated")));
            }
            let coeffs = &r[4..4 + n];
            let mut c = [0.0; 3];
            // highest order first in the file
            for (slot, v) in c[3 - n..].iter_mut().zip(coeffs) {
                *slot = *v;
            }
            g.cost = PolyCost {
                c2: c[0],
                c1: c[1],
                c0: c[2],
            };
        }
    } else if !generators.is_empty() {
        return Err(CaseError::Semantic("missing `gencost`".into()));
    }

    let mut branches = Vec::with_capacity(br_rows.len());
    for (i, r) in br_rows.iter().enumerate() {
        branches.push(Branch {
            from_bus: as_id(r[0], "branch", i + 1)?,
            to_bus: as_id(r[1], "branch", i + 1)?,
            r: r[2],
            x: r[3],
            b_charging: r[4],
            s_max: r[5],
            tap_ratio: if r[8] == 0.0 { 1.0 } else { r[8] },
            phase_shift: r[9].to_radians(),
            in_service: r[10] > 0.0,
        });
    }

    let case = NetworkCase {
        name: f.name.unwrap_or_else(|| "case".into()),
        base_mva,
        buses,
        branches,
        generators,
    };
    case.validate()?;
    Ok(case)
}

/// Emits `case` in the same subset [`parse_matpower_case`] accepts.
pub fn write_matpower_case(case: &NetworkCase) -> String {
    let mut s = String::new();
    let name = if case.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && case.name.starts_with(|c: char| c.is_ascii_alphabetic())
    {
        case.name.as_str()
    } else {
        "case"
    };
    let _ = writeln!(s, "function mpc = {name}");
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {};", case.base_mva);
    let _ = writeln!(
        s,
        "\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin"
    );
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let kind = match b.kind {
            BusKind::Pq => 1,
            BusKind::Pv => 2,
            BusKind::Slack => 3,
        };
        let _ = writeln!(
            s,
            "\t{}\t{kind}\t{}\t{}\t{}\t{}\t1\t1\t0\t{}\t1\t{}\t{};",
            b.id, b.p_demand, b.q_demand, b.g_shunt, b.b_shunt, b.base_kv, b.v_max, b.v_min
        );
    }
    let _ = writeln!(
        s,
        "];\n\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin"
    );
    let _ = writeln!(s, "mpc.gen = [");
    for g in &case.generators {
        let _ = writeln!(
            s,
            "\t{}\t0\t0\t{}\t{}\t1\t{}\t{}\t{}\t{};",
            g.bus,
            g.q_max,
            g.q_min,
            case.base_mva,
            u8::from(g.in_service),
            g.p_max,
            g.p_min
        );
    }
    let _ = writeln!(
        s,
        "];\n\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax"
    );
    let _ = writeln!(s, "mpc.branch = [");
    for br in &case.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t-360\t360;",
            br.from_bus,
            br.to_bus,
            br.r,
            br.x,
            br.b_charging,
            br.s_max,
            br.s_max,
            br.s_max,
            br.tap_ratio,
            br.phase_shift.to_degrees(),
            u8::from(br.in_service)
        );
    }
    let _ = writeln!(s, "];\n\n%\t2\tstartup\tshutdown\tn\tc2\tc1\tc0");
    let _ = writeln!(s, "mpc.gencost = [");
    for g in &case.generators {
        let c = g.cost;
        let _ = writeln!(s, "\t2\t0\t0\t3\t{}\t{}\t{};", c.c2, c.c1, c.c0);
    }
    let _ = writeln!(s, "];");
    s
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;

    #[test]
    fn ieee14_totals() {
        let c = parse_matpower_case(CASE14).unwrap();
        assert_eq!(c.name, "case14");
        assert_eq!(c.n_buses(), 14);
        assert_eq!(c.n_generators(), 5);
        assert_eq!(c.n_branches(), 20);
        assert_eq!(c.n_load_buses(), 11);
        assert!((c.total_p_max() - 772.4).abs() < 1e-9);
        assert!((c.total_p_demand() - 259.0).abs() < 1e-9);
        assert_eq!(c.slack_bus(), Some(1));
        // bus 9 carries a 19 MVAr shunt capacitor
        assert_eq!(c.buses[8].b_shunt, 19.0);
        assert_eq!(
            c.generators[0].cost,
            PolyCost {
                c2: 0.0430293,
                c1: 20.0,
                c0: 0.0
            }
        );
    }

    #[test]
    fn ieee30_totals() {
        let c = parse_matpower_case(CASE30).unwrap();
        assert_eq!(c.n_buses(), 30);
        assert_eq!(c.n_generators(), 6);
        assert_eq!(c.n_load_buses(), 20);
        assert!((c.total_p_max() - 335.0).abs() < 1e-9);
        assert!((c.total_p_demand() - 189.2).abs() < 1e-9);
    }

    #[test]
    fn rts_totals() {
        let c = parse_matpower_case(CASE24).unwrap();
        assert_eq!(c.n_buses(), 24);
        assert_eq!(c.n_branches(), 38);
        assert!((c.total_p_max() - 3405.0).abs() < 1e-9);
        assert!((c.total_p_demand() - 2850.0).abs() < 1e-9);
        // one synchronous condenser plus 32 units
        let units = c.generators.iter().filter(|g| g.p_max > 0.0).count();
        assert_eq!(units, 32);
        assert_eq!(c.generator_buses().len(), 11);
    }

    #[test]
    fn minimal_two_bus() {
        let text = "function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
  2 1 50 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [ 1 0 0 100 -100 1 100 1 200 0 ];
mpc.branch = [ 1 2 0 0.1 0 0 0 0 0 0 1 -360 360 ];
mpc.gencost = [ 2 0 0 2 20 0 ];
";
        let c = parse_matpower_case(text).unwrap();
        assert_eq!(c.n_buses(), 2);
        assert_eq!(c.n_branches(), 1);
        assert_eq!(c.generators[0].cost, PolyCost::linear(20.0));
        assert_eq!(c.branches[0].tap_ratio, 1.0);
    }

    #[test]
    fn reemitted_fixtures_parse_equal() {
        for text in [CASE14, CASE30, CASE24] {
            let c = parse_matpower_case(text).unwrap();
            let again = parse_matpower_case(&write_matpower_case(&c)).unwrap();
            assert_eq!(again, c);
        }
    }

    #[test]
    fn syntax_error_has_position() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [\n 1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;\n 2 1 5 0 0;\n];\n";
        match parse_matpower_case(text) {
            Err(CaseError::Syntax { line, column, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(column, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        match parse_matpower_case("mpc.baseMVA = 1$0;") {
            Err(CaseError::Syntax {
                line: 1, column: 16, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unsupported_features() {
        let pwl = CASE14.replacen("2\t0\t0\t3\t0.0430293", "1\t0\t0\t3\t0.0430293", 1);
        assert!(
            matches!(parse_matpower_case(&pwl), Err(CaseError::Unsupported(m)) if m.contains("piecewise"))
        );
        let dc = format!("{CASE14}\nmpc.dcline = [1 2 1];\n");
        assert!(matches!(parse_matpower_case(&dc), Err(CaseError::Unsupported(m)) if m.contains("DC")));
        let names = format!("{CASE14}\nmpc.bus_name = {{ 'a' }};\n");
        assert!(matches!(
            parse_matpower_case(&names),
            Err(CaseError::Unsupported(_))
        ));
    }

    #[test]
    fn corrupted_branch_reports_row() {
        // point branch row 3 at a bus that does not exist
        let bad = CASE14.replacen("\t2\t3\t0.04699", "\t2\t99\t0.04699", 1);
        assert_ne!(bad, CASE14);
        match parse_matpower_case(&bad) {
            Err(CaseError::Semantic(m)) => assert!(m.contains("branch row 3"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! CPLEX-style LP text export of the allocation model, plus a reader for
//! the subset of the format the writer emits.

use std::io::Write;

use super::MilpInstance;
use crate::error::{Error, Result};

const TERMS_PER_LINE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

impl Relation {
    fn as_str(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub name: String,
    pub terms: Vec<(String, f64)>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpModel {
    pub objective: Vec<(String, f64)>,
    pub rows: Vec<LpRow>,
    pub bounds: Vec<(String, f64, f64)>,
    pub general: Vec<String>,
    pub binary: Vec<String>,
}

pub fn stand_var(s: usize) -> String {
    format!("n_s{s}")
}

pub fn segment_var(e: usize) -> String {
    format!("y_e{e}")
}

impl MilpInstance {
    /// The big-M model with `N_e` substituted into both indicator rows:
    /// `Σ p n - M y >= K - M` and `Σ p n - M y <= K`.
    pub fn to_lp_model(&self) -> LpModel {
        let objective = self
            .candidates
            .iter()
            .map(|e| (segment_var(e.0), self.lengths[e.0]))
            .collect();
        let mut rows = Vec::with_capacity(2 * self.candidates.len() + 1);
        for (e, col) in self.candidates.iter().zip(&self.columns) {
            let mut terms: Vec<(String, f64)> =
                col.iter().map(|&(s, p)| (stand_var(s.0), p)).collect();
            terms.push((segment_var(e.0), -self.big_m));
            rows.push(LpRow {
                name: format!("lo_e{}", e.0),
                terms: terms.clone(),
                relation: Relation::Ge,
                rhs: self.k - self.big_m,
            });
            rows.push(LpRow {
                name: format!("hi_e{}", e.0),
                terms,
                relation: Relation::Le,
                rhs: self.k,
            });
        }
        rows.push(LpRow {
            name: "budget".into(),
            terms: (0..self.stand_count()).map(|s| (stand_var(s), 1.0)).collect(),
            relation: Relation::Le,
            rhs: self.budget as f64,
        });
        LpModel {
            objective,
            rows,
            bounds: (0..self.stand_count())
                .map(|s| (stand_var(s), 0.0, self.caps[s] as f64))
                .collect(),
            general: (0..self.stand_count()).map(stand_var).collect(),
            binary: self.candidates.iter().map(|e| segment_var(e.0)).collect(),
        }
    }
}

fn write_terms<W: Write>(w: &mut W, terms: &[(String, f64)]) -> std::io::Result<()> {
    for (i, (var, coef)) in terms.iter().enumerate() {
        if i > 0 && i % TERMS_PER_LINE == 0 {
            write!(w, "\n   ")?;
        }
        let sign = if coef.is_sign_negative() { '-' } else { '+' };
        write!(w, " {sign} {} {var}", coef.abs())?;
    }
    Ok(())
}

fn write_names<W: Write>(w: &mut W, names: &[String]) -> std::io::Result<()> {
    for chunk in names.chunks(TERMS_PER_LINE) {
        writeln!(w, " {}", chunk.join(" "))?;
    }
    Ok(())
}

pub fn write_lp<W: Write>(model: &LpModel, mut w: W) -> Result<()> {
    writeln!(w, "\\ sensor-to-stand allocation")?;
    writeln!(w, "Maximize")?;
    write!(w, " obj:")?;
    if model.objective.is_empty() {
        // keep the objective syntactically non-empty
        match model.general.first() {
            Some(v) => write!(w, " + 0 {v}")?,
            None => write!(w, " 0")?,
        }
    } else {
        write_terms(&mut w, &model.objective)?;
    }
    writeln!(w)?;
    writeln!(w, "Subject To")?;
    for row in &model.rows {
        write!(w, " {}:", row.name)?;
        write_terms(&mut w, &row.terms)?;
        writeln!(w, " {} {}", row.relation.as_str(), row.rhs)?;
    }
    writeln!(w, "Bounds")?;
    for (v, lo, hi) in &model.bounds {
        writeln!(w, " {lo} <= {v} <= {hi}")?;
    }
    if !model.general.is_empty() {
        writeln!(w, "General")?;
        write_names(&mut w, &model.general)?;
    }
    if !model.binary.is_empty() {
        writeln!(w, "Binary")?;
        write_names(&mut w, &model.binary)?;
    }
    writeln!(w, "End")?;
    w.flush()?;
    Ok(())
}

/// Writes the allocation model as LP text.
pub fn export_lp<W: Write>(inst: &MilpInstance, sink: W) -> Result<()> {
    write_lp(&inst.to_lp_model(), sink)
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Objective,
    Constraints,
    Bounds,
    General,
    Binary,
}

fn section_of(line: &str) -> Option<Option<Section>> {
    match line.to_ascii_lowercase().as_str() {
        "maximize" | "maximise" | "max" => Some(Some(Section::Objective)),
        "subject to" | "st" | "s.t." => Some(Some(Section::Constraints)),
        "bounds" => Some(Some(Section::Bounds)),
        "general" | "generals" | "gen" => Some(Some(Section::General)),
        "binary" | "binaries" | "bin" => Some(Some(Section::Binary)),
        "end" => Some(None),
        _ => None,
    }
}

fn num(tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| Error::malformed(format!("LP: expected a number, found {tok:?}")))
}

/// Parses `[name:] (± coef var)* [rel rhs]`.
fn parse_expr(text: &str) -> Result<(Option<String>, Vec<(String, f64)>, Option<(Relation, f64)>)> {
    let (name, body) = match text.split_once(':') {
        Some((n, b)) => (Some(n.trim().to_string()), b),
        None => (None, text),
    };
    let toks: Vec<&str> = body.split_whitespace().collect();
    let mut terms = Vec::new();
    let mut rel = None;
    let mut i = 0;
    let mut sign = 1.0;
    let mut coef: Option<f64> = None;
    while i < toks.len() {
        match toks[i] {
            "+" => sign = 1.0,
            "-" => sign = -1.0,
            "<=" | ">=" | "=" => {
                let r = match toks[i] {
                    "<=" => Relation::Le,
                    ">=" => Relation::Ge,
                    _ => Relation::Eq,
                };
                let rhs = toks
                    .get(i + 1)
                    .ok_or_else(|| Error::malformed("LP: missing right-hand side"))?;
                rel = Some((r, num(rhs)?));
                break;
            }
            t => match t.parse::<f64>() {
                Ok(v) => coef = Some(v),
                Err(_) => {
                    terms.push((t.to_string(), sign * coef.take().unwrap_or(1.0)));
                    sign = 1.0;
                }
            },
        }
        i += 1;
    }
    Ok((name, terms, rel))
}

/// Reads LP text produced by `write_lp` back into a model.
pub fn parse_lp(text: &str) -> Result<LpModel> {
    let mut model = LpModel {
        objective: Vec::new(),
        rows: Vec::new(),
        bounds: Vec::new(),
        general: Vec::new(),
        binary: Vec::new(),
    };
    let mut section: Option<Section> = None;
    let mut pending: Vec<String> = Vec::new();

    let flush = |section: Option<Section>, pending: &mut Vec<String>, model: &mut LpModel| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let stmt = pending.join(" ");
        pending.clear();
        let (name, terms, rel) = parse_expr(&stmt)?;
        match section {
            Some(Section::Objective) => {
                model.objective = terms.into_iter().filter(|(_, c)| *c != 0.0).collect()
            }
            Some(Section::Constraints) => {
                let (relation, rhs) =
                    rel.ok_or_else(|| Error::malformed(format!("LP: row without relation: {stmt}")))?;
                model.rows.push(LpRow {
                    name: name.unwrap_or_default(),
                    terms,
                    relation,
                    rhs,
                });
            }
            _ => {}
        }
        Ok(())
    };

    for raw in text.lines() {
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(next) = section_of(line) {
            flush(section, &mut pending, &mut model)?;
            section = next;
            continue;
        }
        let continuation = raw.starts_with("   ");
        match section {
            Some(Section::Objective) | Some(Section::Constraints) => {
                if !continuation {
                    flush(section, &mut pending, &mut model)?;
                }
                pending.push(line.to_string());
            }
            Some(Section::Bounds) => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                match toks.as_slice() {
                    [lo, "<=", v, "<=", hi] => {
                        model.bounds.push((v.to_string(), num(lo)?, num(hi)?))
                    }
                    _ => return Err(Error::malformed(format!("LP: unsupported bound {line:?}"))),
                }
            }
            Some(Section::General) => {
                model.general.extend(line.split_whitespace().map(str::to_string))
            }
            Some(Section::Binary) => {
                model.binary.extend(line.split_whitespace().map(str::to_string))
            }
            None => return Err(Error::malformed(format!("LP: text outside a section: {line:?}"))),
        }
    }
    flush(section, &mut pending, &mut model)?;
    Ok(model)
}

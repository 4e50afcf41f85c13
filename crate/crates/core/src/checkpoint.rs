//! Plain-text model checkpoints.
//!
//! ```text
//! opencil-checkpoint 1
//! tasks_done 2
//! tensor encoder.w1 3 4
//! <3 lines of 4 values>
//! ...
//! prototypes 5 4
//! <class id> <4 values>
//! unknown_prototype 4
//! <4 values>
//! end
//! ```
//!
//! Every tensor of the encoder and CVAE appears once with its shape; values
//! are whitespace separated and printed with round-trip precision. The
//! `unknown_prototype` block is optional.

use std::fmt::Write as _;

use ndarray::{Array1, Array2};

use crate::engine::ModelState;
use crate::error::{Error, Result};
use crate::graph::EncoderParams;
use crate::model::{CvaeParams, PrototypeTable, TeacherSnapshot};

pub const MAGIC: &str = "opencil-checkpoint 1";

/// Refuse tensors larger than this many entries.
const MAX_ENTRIES: usize = 1 << 26;

const ENCODER_NAMES: [&str; 2] = ["encoder.w1", "encoder.w2"];

fn write_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

fn write_tensor(out: &mut String, name: &str, t: &Array2<f64>) {
    let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
    for row in t.outer_iter() {
        write_row(out, row.iter());
    }
}

pub fn write_checkpoint(state: &ModelState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "tasks_done {}", state.tasks_done);
    write_tensor(&mut out, ENCODER_NAMES[0], &state.encoder.w1);
    write_tensor(&mut out, ENCODER_NAMES[1], &state.encoder.w2);
    for (name, t) in CvaeParams::TENSOR_NAMES.iter().zip(state.cvae.tensors()) {
        write_tensor(&mut out, name, t);
    }
    let classes = state.prototypes.classes();
    let _ = writeln!(out, "prototypes {} {}", classes.len(), state.prototypes.dim());
    for c in classes {
        let p = state.prototypes.get(c).expect("listed class");
        let _ = write!(out, "{c} ");
        write_row(&mut out, p.iter());
    }
    if let Some(u) = &state.unknown_prototype {
        let _ = writeln!(out, "unknown_prototype {}", u.len());
        write_row(&mut out, u.iter());
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::parse(0, "unexpected end of checkpoint"))
    }
}

fn parse_usize(line: usize, s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::parse(line, format!("bad {what} `{s}`")))
}

fn parse_values(line: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        let v: f64 = tok.parse().map_err(|_| Error::parse(line, format!("bad number `{tok}`")))?;
        if !v.is_finite() {
            return Err(Error::parse(line, format!("non-finite value `{tok}`")));
        }
        out.push(v);
        if out.len() > expected {
            break;
        }
    }
    if out.len() != expected {
        return Err(Error::parse(line, format!("expected {expected} values")));
    }
    Ok(out)
}

fn checked_shape(line: usize, rows: usize, cols: usize) -> Result<()> {
    if rows.checked_mul(cols).is_none_or(|n| n > MAX_ENTRIES) {
        return Err(Error::parse(line, format!("tensor shape {rows}x{cols} too large")));
    }
    Ok(())
}

pub fn parse_checkpoint(text: &str) -> Result<ModelState> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, first) = lines.next()?;
    if first != MAGIC {
        return Err(Error::parse(n, "missing checkpoint header"));
    }
    let (n, l) = lines.next()?;
    let tasks_done = match l.split_whitespace().collect::<Vec<_>>()[..] {
        ["tasks_done", v] => parse_usize(n, v, "task count")?,
        _ => return Err(Error::parse(n, "expected `tasks_done <n>`")),
    };

    let names: Vec<&str> = ENCODER_NAMES.iter().chain(CvaeParams::TENSOR_NAMES.iter()).copied().collect();
    let mut tensors: Vec<Option<Array2<f64>>> = vec![None; names.len()];
    let mut prototypes: Option<PrototypeTable> = None;
    let mut unknown: Option<Array1<f64>> = None;
    loop {
        let (n, l) = lines.next()?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words[..] {
            ["end"] => break,
            ["tensor", name, r, c] => {
                let idx = names
                    .iter()
                    .position(|&x| x == name)
                    .ok_or_else(|| Error::parse(n, format!("unknown tensor `{name}`")))?;
                if tensors[idx].is_some() {
                    return Err(Error::parse(n, format!("tensor `{name}` appears twice")));
                }
                let (rows, cols) = (parse_usize(n, r, "row count")?, parse_usize(n, c, "column count")?);
                checked_shape(n, rows, cols)?;
                let mut data = Vec::new();
                for _ in 0..rows {
                    let (n, l) = lines.next()?;
                    data.extend(parse_values(n, l, cols)?);
                }
                tensors[idx] = Some(Array2::from_shape_vec((rows, cols), data).expect("counted"));
            }
            ["prototypes", count, dim] => {
                if prototypes.is_some() {
                    return Err(Error::parse(n, "prototype block appears twice"));
                }
                let (count, dim) = (parse_usize(n, count, "prototype count")?, parse_usize(n, dim, "width")?);
                checked_shape(n, count, dim)?;
                let mut table = PrototypeTable::new(dim);
                for _ in 0..count {
                    let (n, l) = lines.next()?;
                    let (id, rest) = l.split_once(char::is_whitespace).unwrap_or((l, ""));
                    let class: i64 = id.parse().map_err(|_| Error::parse(n, format!("bad class id `{id}`")))?;
                    if table.contains(class) {
                        return Err(Error::parse(n, format!("class {class} listed twice")));
                    }
                    table.set(class, Array1::from(parse_values(n, rest, dim)?))?;
                }
                prototypes = Some(table);
            }
            ["unknown_prototype", dim] => {
                if unknown.is_some() {
                    return Err(Error::parse(n, "unknown prototype appears twice"));
                }
                let dim = parse_usize(n, dim, "width")?;
                checked_shape(n, 1, dim)?;
                let (n, l) = lines.next()?;
                unknown = Some(Array1::from(parse_values(n, l, dim)?));
            }
            _ => return Err(Error::parse(n, format!("unexpected line `{l}`"))),
        }
    }

    let mut taken = Vec::with_capacity(names.len());
    for (name, t) in names.iter().zip(tensors) {
        taken.push(t.ok_or_else(|| Error::parse(0, format!("tensor `{name}` missing")))?);
    }
    let mut it = taken.into_iter();
    let encoder = EncoderParams::new(it.next().unwrap(), it.next().unwrap())?;
    let mut cvae = CvaeParams::zeros(0, 0, 0);
    for (slot, t) in cvae.tensors_mut().into_iter().zip(it) {
        *slot = t;
    }
    cvae.validate()?;
    if encoder.output_dim() != cvae.embed_dim() {
        return Err(Error::shape("encoder output width differs from CVAE input width"));
    }
    let prototypes = prototypes.ok_or_else(|| Error::parse(0, "prototype block missing"))?;
    if prototypes.dim() != cvae.latent_dim() {
        return Err(Error::shape("prototype width differs from latent width"));
    }
    if unknown.as_ref().is_some_and(|u| u.len() != cvae.latent_dim()) {
        return Err(Error::shape("unknown prototype width differs from latent width"));
    }
    let teacher = (tasks_done > 0).then(|| TeacherSnapshot::capture(&encoder, &cvae, tasks_done));
    Ok(ModelState {
        encoder,
        cvae,
        prototypes,
        unknown_prototype: unknown,
        teacher,
        tasks_done,
    })
}

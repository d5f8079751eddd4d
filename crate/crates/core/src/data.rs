//! Long-format trial data and its CSV form.

use std::fmt;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Within {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Between {
    X,
    Y,
}

impl Within {
    pub fn as_char(self) -> char {
        match self {
            Within::A => 'A',
            Within::B => 'B',
        }
    }
}

impl Between {
    pub fn as_char(self) -> char {
        match self {
            Between::X => 'X',
            Between::Y => 'Y',
        }
    }
}

/// Generator-side truth for one row, kept for audits and oracle checks.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatentTruth {
    /// Fixed-effect part `beta + beta_w + beta_b + beta_bw`.
    pub fixed: f64,
    pub intercept: f64,
    /// Random within-treatment slope contribution (zero on level A rows).
    pub slope: f64,
    /// Time-varying component: sine or random curve.
    pub curve: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub subject: u32,
    pub trial: u32,
    pub time: f64,
    pub within: Within,
    pub between: Between,
    pub response: f64,
    pub latent: Option<LatentTruth>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongDataset {
    pub rows: Vec<Row>,
}

pub const CSV_HEADER: &str = "subject,trial,time,factor_within,factor_between,response";
const LATENT_HEADER: &str = "latent_fixed,latent_intercept,latent_slope,latent_curve,latent_noise";

impl LongDataset {
    pub fn new(rows: Vec<Row>) -> Self {
        LongDataset { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct subject ids in ascending order.
    pub fn subjects(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.subject).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn responses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.response).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time).collect()
    }

    /// Rows of one subject, in stored order.
    pub fn subject_rows(&self, subject: u32) -> impl Iterator<Item = &Row> {
        self.rows.iter().filter(move |r| r.subject == subject)
    }

    /// Multiply every response by `c`, leaving the design untouched.
    pub fn scaled(&self, c: f64) -> LongDataset {
        let rows = self
            .rows
            .iter()
            .map(|r| Row {
                response: r.response * c,
                latent: None,
                ..r.clone()
            })
            .collect();
        LongDataset { rows }
    }

    /// SHA-256 over the bit patterns of every field that a model can see.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.subject.to_le_bytes());
            h.update(r.trial.to_le_bytes());
            h.update(r.time.to_bits().to_le_bytes());
            h.update([r.within.as_char() as u8, r.between.as_char() as u8]);
            h.update(r.response.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn write_csv<W: Write>(&self, mut out: W, with_latent: bool) -> Result<()> {
        if with_latent {
            writeln!(out, "{CSV_HEADER},{LATENT_HEADER}")?;
        } else {
            writeln!(out, "{CSV_HEADER}")?;
        }
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.subject,
                r.trial,
                r.time,
                r.within.as_char(),
                r.between.as_char(),
                r.response
            )?;
            if with_latent {
                let l = r.latent.unwrap_or_default();
                write!(
                    out,
                    ",{},{},{},{},{}",
                    l.fixed, l.intercept, l.slope, l.curve, l.noise
                )?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Parse the CSV form. Lines starting with `#` and blank lines are skipped;
    /// extra columns are ignored unless they are the latent-truth columns.
    pub fn read_csv<R: BufRead>(input: R) -> Result<LongDataset> {
        let mut lines = input.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, line)) => {
                    let line = line?;
                    let t = line.trim();
                    if t.is_empty() || t.starts_with('#') {
                        continue;
                    }
                    break t.to_string();
                }
                None => {
                    return Err(Error::Parse {
                        line: 0,
                        message: "empty input".into(),
                    })
                }
            }
        };
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let c_subject = find("subject")?;
        let c_trial = find("trial")?;
        let c_time = find("time")?;
        let c_within = find("factor_within")?;
        let c_between = find("factor_between")?;
        let c_response = find("response")?;
        let latent_cols: Option<Vec<usize>> = LATENT_HEADER
            .split(',')
            .map(|n| names.iter().position(|c| *c == n))
            .collect();

        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split(',').map(str::trim).collect();
            if fields.len() != names.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", names.len(), fields.len()),
                });
            }
            let perr = |col: &str, v: &str| Error::Parse {
                line: line_no,
                message: format!("invalid value `{v}` in column `{col}`"),
            };
            let num = |c: usize, col: &str| -> Result<f64> {
                let v: f64 = fields[c].parse().map_err(|_| perr(col, fields[c]))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(perr(col, fields[c]))
                }
            };
            let subject: u32 = fields[c_subject]
                .parse()
                .map_err(|_| perr("subject", fields[c_subject]))?;
            let trial: u32 = fields[c_trial]
                .parse()
                .map_err(|_| perr("trial", fields[c_trial]))?;
            let within = match fields[c_within] {
                "A" => Within::A,
                "B" => Within::B,
                v => return Err(perr("factor_within", v)),
            };
            let between = match fields[c_between] {
                "X" => Between::X,
                "Y" => Between::Y,
                v => return Err(perr("factor_between", v)),
            };
            let latent = match &latent_cols {
                Some(cols) => Some(LatentTruth {
                    fixed: num(cols[0], "latent_fixed")?,
                    intercept: num(cols[1], "latent_intercept")?,
                    slope: num(cols[2], "latent_slope")?,
                    curve: num(cols[3], "latent_curve")?,
                    noise: num(cols[4], "latent_noise")?,
                }),
                None => None,
            };
            rows.push(Row {
                subject,
                trial,
                time: num(c_time, "time")?,
                within,
                between,
                response: num(c_response, "response")?,
                latent,
            });
        }
        Ok(LongDataset { rows })
    }
}

impl fmt::Display for LongDataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "LongDataset({} rows, {} subjects)",
            self.rows.len(),
            self.subjects().len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LongDataset {
        LongDataset::new(vec![
            Row {
                subject: 1,
                trial: 1,
                time: 0.1,
                within: Within::A,
                between: Between::X,
                response: 1.0 / 3.0,
                latent: None,
            },
            Row {
                subject: 2,
                trial: 1,
                time: std::f64::consts::PI,
                within: Within::B,
                between: Between::Y,
                response: -2.5e-17,
                latent: None,
            },
        ])
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, false).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let back = LongDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint(), d.fingerprint());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = format!("# comment\n{CSV_HEADER}\n1,1,0.0,A,X,1.0\n1,2,0.1,C,X,1.0\n");
        match LongDataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let text = format!("{CSV_HEADER}\n1,1,abc,A,X,1.0\n");
        assert!(matches!(
            LongDataset::read_csv(text.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let text = "subject,trial,time,factor_within,response\n1,1,0,A,1\n";
        match LongDataset::read_csv(text.as_bytes()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "factor_between"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

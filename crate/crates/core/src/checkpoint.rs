//! Text checkpoint for trained networks.
//!
//! ```text
//! dssfn-network 1
//! dims <P> <Q> <n> <L>
//! activation relu
//! weights <count>
//! matrix <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! output none | output
//! matrix <rows> <cols>
//! ...
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! `f64`, so save/load is bit-exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Activation, Matrix, SsfnDims, SsfnNetwork, WeightMatrix};

pub const MAGIC: &str = "dssfn-network";
pub const VERSION: u32 = 1;

fn write_matrix<W: Write>(out: &mut W, m: &Matrix) -> Result<()> {
    writeln!(out, "matrix {} {}", m.nrows(), m.ncols())?;
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_network<W: Write>(net: &SsfnNetwork, mut out: W) -> Result<()> {
    let d = net.dims();
    writeln!(out, "{MAGIC} {VERSION}")?;
    writeln!(
        out,
        "dims {} {} {} {}",
        d.input, d.classes, d.hidden, d.layers
    )?;
    writeln!(out, "activation {}", net.activation().name())?;
    writeln!(out, "weights {}", net.weights().len())?;
    for w in net.weights() {
        write_matrix(&mut out, w.full())?;
    }
    match net.output() {
        Some(o) => {
            writeln!(out, "output")?;
            write_matrix(&mut out, o)?;
        }
        None => writeln!(out, "output none")?,
    }
    out.flush()?;
    Ok(())
}

pub fn save_network(net: &SsfnNetwork, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_network(net, std::io::BufWriter::new(file))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(Error::Checkpoint(format!(
                "unexpected end of file at line {}",
                self.line_no
            ))),
        }
    }

    fn fail(&self, msg: impl std::fmt::Display) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line_no))
    }

    /// Reads `<keyword> <usize>...`.
    fn expect(&mut self, keyword: &str, count: usize) -> Result<Vec<usize>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(self.fail(format!("expected '{keyword}', found '{line}'")));
        }
        let values = parts
            .map(|p| p.parse::<usize>().map_err(|e| self.fail(e)))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(self.fail(format!("'{keyword}' takes {count} values")));
        }
        Ok(values)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let shape = self.expect("matrix", 2)?;
        let (rows, cols) = (shape[0], shape[1]);
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let line = self.next_line()?;
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| self.fail(e)))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != cols {
                return Err(self.fail(format!("row has {} values, expected {cols}", values.len())));
            }
            for (j, v) in values.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }
}

pub fn read_network<R: Read>(input: R) -> Result<SsfnNetwork> {
    let mut lines = Lines {
        inner: BufReader::new(input).lines(),
        line_no: 0,
    };
    let header = lines.next_line()?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| lines.fail("not a dssfn network checkpoint"))?;
    if version != VERSION.to_string() {
        return Err(lines.fail(format!("unsupported version {version}")));
    }
    let d = lines.expect("dims", 4)?;
    let dims = SsfnDims::new(d[0], d[1], d[2], d[3])?;
    let act = lines.next_line()?;
    let activation = match act.strip_prefix("activation ").map(str::trim) {
        Some("relu") => Activation::Relu,
        _ => return Err(lines.fail(format!("unknown activation line '{act}'"))),
    };
    let count = lines.expect("weights", 1)?[0];
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        weights.push(WeightMatrix::from_full(lines.matrix()?, dims.classes)?);
    }
    let out_line = lines.next_line()?;
    let output = match out_line.trim() {
        "output none" => None,
        "output" => Some(lines.matrix()?),
        other => return Err(lines.fail(format!("expected output section, found '{other}'"))),
    };
    SsfnNetwork::from_parts(dims, activation, weights, output)
}

pub fn load_network(path: impl AsRef<Path>) -> Result<SsfnNetwork> {
    read_network(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_random_matrix, RandomDistribution};

    #[test]
    fn rejects_foreign_files() {
        assert!(read_network("hello\n".as_bytes()).is_err());
        assert!(read_network("dssfn-network 9\n".as_bytes()).is_err());
    }

    #[test]
    fn partial_network_round_trip() {
        let dims = SsfnDims::new(3, 2, 6, 2).unwrap();
        let mut net = SsfnNetwork::new(dims);
        let o = sample_random_matrix(2, 3, 1, 0, RandomDistribution::ScaledNormal);
        let r = sample_random_matrix(2, 3, 1, 1, RandomDistribution::ScaledNormal);
        net.push_layer(WeightMatrix::build(&o, &r).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_network(&net, &mut buf).unwrap();
        assert_eq!(read_network(buf.as_slice()).unwrap(), net);
    }
}

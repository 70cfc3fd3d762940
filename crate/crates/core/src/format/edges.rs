//! Text edge inputs: whitespace-separated `u v [w]` lines and Matrix Market
//! coordinate files.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::format::tile::Entry;

/// Streaming reader for `u v [w]` lines with `#` comments and 0-based ids.
pub struct EdgeListReader<R> {
    input: R,
    line: String,
    line_no: usize,
}

impl<R: BufRead> EdgeListReader<R> {
    pub fn new(input: R) -> Self {
        Self {
            input,
            line: String::new(),
            line_no: 0,
        }
    }

    fn parse_line(&self) -> Option<Result<Entry>> {
        let content = self.line.split('#').next().unwrap_or("");
        let mut fields = content.split_whitespace();
        let u = fields.next()?;
        let err = |reason: String| Error::Parse {
            line: self.line_no,
            reason,
        };
        let v = match fields.next() {
            Some(v) => v,
            None => return Some(Err(err("expected `u v [w]`".into()))),
        };
        let parse_id = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| err(format!("bad vertex id `{s}`")))
        };
        let row = match parse_id(u) {
            Ok(x) => x,
            Err(e) => return Some(Err(e)),
        };
        let col = match parse_id(v) {
            Ok(x) => x,
            Err(e) => return Some(Err(e)),
        };
        let value = match fields.next() {
            None => 1.0,
            Some(w) => match w.parse::<f64>() {
                Ok(x) => x,
                Err(_) => return Some(Err(err(format!("bad weight `{w}`")))),
            },
        };
        if fields.next().is_some() {
            return Some(Err(err("too many fields".into())));
        }
        Some(Ok(Entry::new(row, col, value)))
    }
}

impl<R: BufRead> Iterator for EdgeListReader<R> {
    type Item = Result<Entry>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line.clear();
            match self.input.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => self.line_no += 1,
                Err(e) => return Some(Err(e.into())),
            }
            if let Some(item) = self.parse_line() {
                return Some(item);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmField {
    Pattern,
    Real,
    Integer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MmHeader {
    pub rows: u64,
    pub cols: u64,
    pub entries: u64,
    pub field: MmField,
    pub symmetric: bool,
}

/// Matrix Market coordinate reader. Ids are converted to 0-based and the
/// mirrored entry of every off-diagonal symmetric entry is emitted.
pub struct MatrixMarketReader<R> {
    input: R,
    header: MmHeader,
    line: String,
    line_no: usize,
    mirror: Option<Entry>,
}

impl<R: BufRead> MatrixMarketReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut line = String::new();
        let mut line_no = 0;
        input.read_line(&mut line)?;
        line_no += 1;
        let banner: Vec<String> = line
            .split_whitespace()
            .map(|s| s.to_ascii_lowercase())
            .collect();
        let parse_err = |line, reason: &str| Error::Parse {
            line,
            reason: reason.to_owned(),
        };
        if banner.len() != 5 || banner[0] != "%%matrixmarket" || banner[1] != "matrix" {
            return Err(parse_err(1, "missing %%MatrixMarket matrix banner"));
        }
        if banner[2] != "coordinate" {
            return Err(parse_err(1, "only coordinate format is supported"));
        }
        let field = match banner[3].as_str() {
            "pattern" => MmField::Pattern,
            "real" | "double" => MmField::Real,
            "integer" => MmField::Integer,
            other => return Err(parse_err(1, &format!("unsupported field `{other}`"))),
        };
        let symmetric = match banner[4].as_str() {
            "general" => false,
            "symmetric" => true,
            other => return Err(parse_err(1, &format!("unsupported symmetry `{other}`"))),
        };
        let size = loop {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(parse_err(line_no, "missing size line"));
            }
            line_no += 1;
            let l = line.trim();
            if !l.is_empty() && !l.starts_with('%') {
                break l.to_owned();
            }
        };
        let dims: Vec<u64> = size
            .split_whitespace()
            .map(|s| s.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(line_no, "bad size line"))?;
        if dims.len() != 3 {
            return Err(parse_err(line_no, "size line needs `rows cols entries`"));
        }
        Ok(Self {
            input,
            header: MmHeader {
                rows: dims[0],
                cols: dims[1],
                entries: dims[2],
                field,
                symmetric,
            },
            line,
            line_no,
            mirror: None,
        })
    }

    pub fn header(&self) -> MmHeader {
        self.header
    }

    fn parse_line(&self) -> Option<Result<Entry>> {
        let l = self.line.trim();
        if l.is_empty() || l.starts_with('%') {
            return None;
        }
        let err = |reason: String| Error::Parse {
            line: self.line_no,
            reason,
        };
        let fields: Vec<&str> = l.split_whitespace().collect();
        let want = if self.header.field == MmField::Pattern { 2 } else { 3 };
        if fields.len() != want {
            return Some(Err(err(format!("expected {want} fields"))));
        }
        let id = |s: &str| match s.parse::<u64>() {
            Ok(x) if x >= 1 => Ok(x - 1),
            _ => Err(err(format!("bad 1-based index `{s}`"))),
        };
        let entry = (|| {
            let row = id(fields[0])?;
            let col = id(fields[1])?;
            let value = if want == 3 {
                fields[2]
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad value `{}`", fields[2])))?
            } else {
                1.0
            };
            Ok(Entry::new(row, col, value))
        })();
        Some(entry)
    }
}

impl<R: BufRead> Iterator for MatrixMarketReader<R> {
    type Item = Result<Entry>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(m) = self.mirror.take() {
            return Some(Ok(m));
        }
        loop {
            self.line.clear();
            match self.input.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => self.line_no += 1,
                Err(e) => return Some(Err(e.into())),
            }
            if let Some(item) = self.parse_line() {
                if let Ok(e) = &item {
                    if self.header.symmetric && e.row != e.col {
                        self.mirror = Some(Entry::new(e.col, e.row, e.value));
                    }
                }
                return Some(item);
            }
        }
    }
}

/// Write edges in the `u v [w]` text format.
pub fn write_edge_list(
    out: &mut impl Write,
    edges: impl IntoIterator<Item = (u64, u64)>,
) -> std::io::Result<()> {
    for (u, v) in edges {
        writeln!(out, "{u} {v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_list_with_comments_and_weights() {
        let text = "# header\n0 1\n\n2 3 0.5 # trailing\n  4\t5  \n";
        let edges: Vec<Entry> = EdgeListReader::new(text.as_bytes())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(
            edges,
            [
                Entry::new(0, 1, 1.0),
                Entry::new(2, 3, 0.5),
                Entry::new(4, 5, 1.0)
            ]
        );
    }

    #[test]
    fn edge_list_errors_name_the_line() {
        let err = EdgeListReader::new("0 1\nx 2\n".as_bytes())
            .collect::<Result<Vec<_>>>()
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(EdgeListReader::new("3\n".as_bytes()).next().unwrap().is_err());
        assert!(EdgeListReader::new("1 2 3 4\n".as_bytes())
            .next()
            .unwrap()
            .is_err());
    }

    #[test]
    fn matrix_market_symmetric() {
        let text = "%%MatrixMarket matrix coordinate real symmetric\n% c\n3 3 2\n1 1 2.0\n3 1 -1\n";
        let mut r = MatrixMarketReader::new(text.as_bytes()).unwrap();
        assert_eq!(r.header().rows, 3);
        let entries: Vec<Entry> = r.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(
            entries,
            [
                Entry::new(0, 0, 2.0),
                Entry::new(2, 0, -1.0),
                Entry::new(0, 2, -1.0)
            ]
        );
    }

    #[test]
    fn matrix_market_rejects_bad_input() {
        assert!(MatrixMarketReader::new("%%MatrixMarket matrix array real general\n".as_bytes()).is_err());
        let text = "%%MatrixMarket matrix coordinate pattern general\n2 2 1\n0 1\n";
        let mut r = MatrixMarketReader::new(text.as_bytes()).unwrap();
        assert!(r.next().unwrap().is_err());
    }
}

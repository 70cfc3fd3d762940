use std::io::Write;
use std::time::Instant;

pub const TRACE_HEADER: &str = "iter,metric,value,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub metric: &'static str,
    pub value: f64,
    pub wall_seconds: f64,
}

/// Per-iteration metrics of an application run.
#[derive(Debug, Clone)]
pub struct Trace {
    start: Instant,
    pub rows: Vec<TraceRow>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            rows: Vec::new(),
        }
    }

    pub fn record(&mut self, iter: usize, metric: &'static str, value: f64) {
        self.rows.push(TraceRow {
            iter,
            metric,
            value,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        });
    }

    /// Values of one metric in recording order.
    pub fn series(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:e},{:.6}", r.iter, r.metric, r.value, r.wall_seconds)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Trace::new();
        t.record(1, "delta", 0.5);
        t.record(2, "delta", 0.25);
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert!(lines[1].starts_with("1,delta,5e-1,"));
        assert_eq!(t.series("delta"), [0.5, 0.25]);
    }
}

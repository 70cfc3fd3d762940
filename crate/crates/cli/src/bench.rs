//! SpMM timing sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use tilespmm::apps::{multiply_in_passes, InMemoryEngine};
use tilespmm::dense::VerticalPartitionPlan;
use tilespmm::format::{MatrixHeader, TiledSparseMatrix};
use tilespmm::sem::{spmm_large_dense, spmm_sem};
use tilespmm::storage::{FileSource, MemStore, ReadSource, WriteSink};
use tilespmm::{DenseMatrix, Error, KernelConfig};

use crate::{invalid, EngineArgs, Mode};

pub const SCHEMA: &str = "# schema=bench/v1";
pub const COLUMNS: &str = "graph,mode,p,mem_cols,threads,seconds,bytes_read,bytes_written";

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Label for the graph column; the file stem by default.
    #[arg(long)]
    graph: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    p: Vec<usize>,
    /// Resident dense columns; values at or above p mean a single pass.
    #[arg(long, value_delimiter = ',')]
    mem_cols: Vec<usize>,
    #[arg(long = "thread-counts", value_delimiter = ',')]
    thread_counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "im,sem")]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = crate::defaults::SEED)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

/// Discards everything, counting bytes.
#[derive(Default)]
struct NullSink {
    bytes: u64,
}

impl WriteSink for NullSink {
    fn append(&mut self, bytes: &[u8]) -> tilespmm::Result<()> {
        self.bytes += bytes.len() as u64;
        Ok(())
    }

    fn write_at(&mut self, _offset: u64, bytes: &[u8]) -> tilespmm::Result<()> {
        self.bytes += bytes.len() as u64;
        Ok(())
    }

    fn finish(&mut self) -> tilespmm::Result<()> {
        Ok(())
    }
}

struct Row {
    seconds: f64,
    bytes_read: u64,
    bytes_written: u64,
}

fn run_im(m: &TiledSparseMatrix, x: &DenseMatrix, mem_cols: usize, cfg: KernelConfig) -> Result<Row, Error> {
    let start = Instant::now();
    let engine = InMemoryEngine::new(m, cfg);
    let y = multiply_in_passes(&engine, x, mem_cols)?;
    let mut sink = NullSink::default();
    y.write_image(&mut sink)?;
    Ok(Row {
        seconds: start.elapsed().as_secs_f64(),
        bytes_read: m.as_bytes().len() as u64,
        bytes_written: sink.bytes,
    })
}

fn run_sem(src: &dyn ReadSource, x: &DenseMatrix, mem_cols: usize, engine: &EngineArgs) -> Result<Row, Error> {
    let cfg = engine.sem();
    let p = x.cols();
    if mem_cols >= p {
        let mut sink = NullSink::default();
        let start = Instant::now();
        let r = spmm_sem(src, x, &cfg, &mut sink)?;
        return Ok(Row {
            seconds: start.elapsed().as_secs_f64(),
            bytes_read: r.sparse_bytes_read,
            bytes_written: sink.bytes,
        });
    }
    let store = MemStore::new();
    store.insert("x", x.to_image());
    let plan = VerticalPartitionPlan::new(p, mem_cols)?;
    let start = Instant::now();
    let r = spmm_large_dense(src, &store, "x", "y", &plan, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let pass_bytes: u64 = r.passes.iter().map(|p| p.bytes_written()).sum();
    Ok(Row {
        seconds,
        bytes_read: r.sparse_bytes_read,
        bytes_written: pass_bytes + r.interleave_bytes,
    })
}

pub fn run(a: BenchArgs) -> Result<(), Error> {
    a.engine.validate()?;
    if a.p.contains(&0) {
        return Err(invalid("--p", "widths must be at least 1"));
    }
    if a.mem_cols.contains(&0) {
        return Err(invalid("--mem-cols", "must be at least 1"));
    }
    if a.thread_counts.contains(&0) {
        return Err(invalid("--thread-counts", "must be at least 1"));
    }
    let graph = a.graph.clone().unwrap_or_else(|| {
        a.matrix
            .file_stem()
            .map_or_else(|| "graph".into(), |s| s.to_string_lossy().into_owned())
    });
    let src = FileSource::open(&a.matrix)?;
    let header = MatrixHeader::read_from(&src)?;
    let needs_im = a.modes.contains(&Mode::Im);
    let m = if needs_im {
        Some(TiledSparseMatrix::read(&src)?)
    } else {
        None
    };
    let threads = if a.thread_counts.is_empty() {
        vec![a.engine.threads]
    } else {
        a.thread_counts.clone()
    };

    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "{SCHEMA}")?;
    writeln!(out, "{COLUMNS}")?;
    for &p in &a.p {
        let x = DenseMatrix::random(header.n_cols as usize, p, a.seed);
        let mut budgets: Vec<usize> = if a.mem_cols.is_empty() {
            vec![p]
        } else {
            a.mem_cols.iter().map(|&m| m.min(p)).collect()
        };
        budgets.dedup();
        for &mem_cols in &budgets {
            for &t in &threads {
                let engine = EngineArgs {
                    threads: t,
                    ..a.engine.clone()
                };
                for &mode in &a.modes {
                    let row = match mode {
                        Mode::Im => run_im(m.as_ref().unwrap(), &x, mem_cols, engine.kernel())?,
                        Mode::Sem => run_sem(&src, &x, mem_cols, &engine)?,
                    };
                    let label = match mode {
                        Mode::Im => "im",
                        Mode::Sem => "sem",
                    };
                    writeln!(
                        out,
                        "{graph},{label},{p},{mem_cols},{t},{:.6},{},{}",
                        row.seconds, row.bytes_read, row.bytes_written
                    )?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

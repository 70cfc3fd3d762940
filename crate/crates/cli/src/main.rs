mod bench;
mod defaults;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tilespmm::apps::{
    self, check_symmetric, multiply_in_passes, nmf, out_degrees, pagerank, subspace_iteration,
    EigenConfig, InMemoryEngine, NmfConfig, PageRankConfig, Residency, SemEngine, SpmmEngine,
};
use tilespmm::dense::{DenseImageMeta, VerticalPartitionPlan};
use tilespmm::format::{
    convert, matrix_stats, scsr_dcsc_ratio, ConvertOptions, EdgeListReader, Entry, MatrixMarketReader,
    TiledSparseMatrix, ValueKind,
};
use tilespmm::generators::{gen_rmat, gen_sbm, RmatParams, SbmParams, VertexOrder};
use tilespmm::sem::{spmm_large_dense, spmm_sem, SemConfig};
use tilespmm::storage::{
    CountingReader, CountingSink, DirStore, FileSink, FileSource, IoCounters, ReadSource, Store,
};
use tilespmm::{DenseMatrix, Error, KernelConfig};

#[derive(Parser, Debug)]
#[command(name = "tilespmm", version, about = "Tiled sparse matrix tools and SpMM engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert an edge list or Matrix Market file into a tiled image.
    Convert(ConvertArgs),
    /// Print the header and storage statistics of a tiled image.
    Info(InfoArgs),
    /// Multiply a tiled image by a dense matrix.
    Spmm(SpmmArgs),
    /// PageRank over the transposed adjacency image.
    Pagerank(PageRankArgs),
    /// Top eigenpairs of a symmetric image.
    Eigen(EigenArgs),
    /// Nonnegative factorization A ≈ W·H.
    Nmf(NmfArgs),
    /// Write an R-MAT edge list.
    GenRmat(RmatArgs),
    /// Write a stochastic block model edge list.
    GenSbm(SbmArgs),
    /// Time SpMM over a sweep of widths, budgets and thread counts; emits CSV.
    Bench(bench::BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Whole image resident in memory.
    Im,
    /// Image streamed from storage.
    Sem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Auto,
    Edges,
    Mtx,
}

#[derive(Args, Debug, Clone)]
pub struct EngineArgs {
    #[arg(long, value_enum, default_value_t = Mode::Sem)]
    pub mode: Mode,
    #[arg(long, default_value_t = defaults::threads())]
    pub threads: usize,
    /// Per-worker cache budget used to size tasks.
    #[arg(long, default_value_t = defaults::CACHE_BYTES)]
    pub cache_bytes: usize,
    /// Minimum size of merged output writes.
    #[arg(long, default_value_t = defaults::MERGE_BYTES)]
    pub merge_bytes: usize,
}

impl EngineArgs {
    pub fn validate(&self) -> Result<(), Error> {
        if self.threads == 0 {
            return Err(Error::InvalidArgument {
                name: "--threads",
                reason: "must be at least 1".into(),
            });
        }
        if self.cache_bytes == 0 {
            return Err(Error::InvalidArgument {
                name: "--cache-bytes",
                reason: "must be positive".into(),
            });
        }
        if self.merge_bytes == 0 {
            return Err(Error::InvalidArgument {
                name: "--merge-bytes",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            cache_bytes: self.cache_bytes,
            threads: self.threads,
        }
    }

    pub fn sem(&self) -> SemConfig {
        SemConfig {
            kernel: self.kernel(),
            merge_threshold: self.merge_bytes,
            ..SemConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct ConvertArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    format: InputFormat,
    #[arg(long, default_value_t = defaults::TILE_SIZE)]
    tile_size: u32,
    /// Keep edge weights (float64 values) instead of a binary pattern.
    #[arg(long)]
    weighted: bool,
    /// Store the transposed matrix.
    #[arg(long)]
    transpose: bool,
    /// Also store (v, u) for every edge (u, v), e.g. for undirected edge lists.
    #[arg(long)]
    symmetrize: bool,
    #[arg(long)]
    rows: Option<u64>,
    #[arg(long)]
    cols: Option<u64>,
    /// In-memory sort budget before spilling sorted runs to disk.
    #[arg(long, default_value_t = defaults::SORT_BUDGET)]
    sort_budget: usize,
}

#[derive(Args, Debug)]
struct InfoArgs {
    image: PathBuf,
}

#[derive(Args, Debug)]
struct SpmmArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Dense input image; a seeded random matrix of `--cols` columns if absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    cols: usize,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
    /// Dense columns resident per pass; defaults to all of them.
    #[arg(long)]
    mem_cols: Option<usize>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args, Debug)]
struct PageRankArgs {
    /// Image of the transposed adjacency (row u lists the in-neighbours of u).
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = defaults::DAMPING)]
    damping: f64,
    #[arg(long, default_value_t = defaults::PAGERANK_ITERS)]
    iters: usize,
    /// Stop early once an iteration changes the ranks by less than this (L1).
    #[arg(long)]
    tol: Option<f64>,
    /// Drop the rank of vertices without out-edges instead of spreading it.
    #[arg(long)]
    no_dangling: bool,
    /// One rank per line.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ResidencyArg {
    Memory,
    Storage,
}

#[derive(Args, Debug)]
struct EigenArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = defaults::EIGEN_BLOCK)]
    block: usize,
    #[arg(long, default_value_t = defaults::EIGEN_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = defaults::EIGEN_TOL)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = ResidencyArg::Memory)]
    residency: ResidencyArg,
    /// Directory holding the subspace in storage residency (temporary if absent).
    #[arg(long)]
    store_dir: Option<PathBuf>,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    /// Write the Ritz vectors as a dense image.
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args, Debug)]
struct NmfArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Image of the transposed matrix.
    #[arg(long)]
    transpose: PathBuf,
    #[arg(long, default_value_t = defaults::NMF_RANK)]
    k: usize,
    #[arg(long, default_value_t = defaults::NMF_ITERS)]
    iters: usize,
    /// Factor columns per sparse pass; defaults to k.
    #[arg(long)]
    mem_cols: Option<usize>,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    #[arg(long)]
    w_out: Option<PathBuf>,
    /// Output for Hᵀ (m × k).
    #[arg(long)]
    h_out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args, Debug)]
struct RmatArgs {
    #[arg(long)]
    scale: u32,
    #[arg(long, default_value_t = 16)]
    edge_factor: u64,
    #[arg(long, default_value_t = 0.57)]
    a: f64,
    #[arg(long, default_value_t = 0.19)]
    b: f64,
    #[arg(long, default_value_t = 0.19)]
    c: f64,
    #[arg(long, default_value_t = 0.05)]
    d: f64,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    #[arg(long)]
    undirected: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SbmArgs {
    #[arg(long)]
    vertices: u64,
    #[arg(long)]
    clusters: u64,
    #[arg(long)]
    edges: u64,
    /// Ratio of intra-cluster to inter-cluster edges.
    #[arg(long, default_value_t = 4.0)]
    in_out: f64,
    /// Shuffle vertex ids with a seeded permutation.
    #[arg(long)]
    unclustered: bool,
    #[arg(long)]
    directed: bool,
    #[arg(long, default_value_t = defaults::SEED)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

/// Usage errors exit with 2, budget violations with 4, everything else
/// (bad or unreadable data) with 3.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument { .. } => 2,
        Error::Budget { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    eprintln!("config: {:?}", cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Convert(a) => cmd_convert(a),
        Command::Info(a) => cmd_info(a),
        Command::Spmm(a) => cmd_spmm(a),
        Command::Pagerank(a) => cmd_pagerank(a),
        Command::Eigen(a) => cmd_eigen(a),
        Command::Nmf(a) => cmd_nmf(a),
        Command::GenRmat(a) => cmd_rmat(a),
        Command::GenSbm(a) => cmd_sbm(a),
        Command::Bench(a) => bench::run(a),
    }
}

/// Re-label a library validation error with the flag that caused it.
fn flag_error(name: &'static str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { reason, .. } => invalid(name, reason),
        e => invalid(name, e.to_string()),
    }
}

fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}

fn cmd_convert(a: ConvertArgs) -> Result<(), Error> {
    tilespmm::format::header::validate_tile_size(a.tile_size)
        .map_err(|e| flag_error("--tile-size", e))?;
    let format = match a.format {
        InputFormat::Auto if a.input.extension().is_some_and(|e| e == "mtx") => InputFormat::Mtx,
        InputFormat::Auto => InputFormat::Edges,
        f => f,
    };
    let in_counters = IoCounters::new();
    let reader = BufReader::with_capacity(
        1 << 20,
        CountingReader::new(File::open(&a.input)?, Arc::clone(&in_counters)),
    );
    let mut opts = ConvertOptions {
        n_rows: a.rows,
        n_cols: a.cols,
        tile_size: a.tile_size,
        value_kind: if a.weighted {
            ValueKind::Float64
        } else {
            ValueKind::Binary
        },
        transpose: a.transpose,
        sort_budget: a.sort_budget,
        spill_dir: a.output.parent().map(Path::to_path_buf),
    };
    let out_counters = IoCounters::new();
    let mut sink = CountingSink::new(FileSink::create(&a.output)?, Arc::clone(&out_counters));
    let report = match format {
        InputFormat::Mtx => {
            let mm = MatrixMarketReader::new(reader)?;
            let h = mm.header();
            opts.n_rows = opts.n_rows.or(Some(h.rows));
            opts.n_cols = opts.n_cols.or(Some(h.cols));
            convert(mirrored(mm, a.symmetrize), &opts, &mut sink)?
        }
        _ => convert(mirrored(EdgeListReader::new(reader), a.symmetrize), &opts, &mut sink)?,
    };
    println!("rows={}", report.header.n_rows);
    println!("cols={}", report.header.n_cols);
    println!("edges_in={}", report.edges_in);
    println!("nnz={}", report.nnz);
    println!("duplicates_dropped={}", report.duplicates_dropped);
    println!("spilled_runs={}", report.spilled_runs);
    println!("input_bytes_read={}", in_counters.bytes_read());
    println!("output_bytes_written={}", out_counters.bytes_written());
    Ok(())
}

/// Adds the mirror of every off-diagonal entry when `on` is set.
fn mirrored<I>(edges: I, on: bool) -> impl Iterator<Item = tilespmm::Result<Entry>>
where
    I: IntoIterator<Item = tilespmm::Result<Entry>>,
{
    edges.into_iter().flat_map(move |e| {
        let mirror = match &e {
            Ok(x) if on && x.row != x.col => Some(Ok(Entry::new(x.col, x.row, x.value))),
            _ => None,
        };
        std::iter::once(e).chain(mirror)
    })
}

fn cmd_info(a: InfoArgs) -> Result<(), Error> {
    let src = FileSource::open(&a.image)?;
    let s = matrix_stats(&src)?;
    println!("n={}", s.n_rows);
    println!("m={}", s.n_cols);
    println!("t={}", s.tile_size);
    println!(
        "value_kind={}",
        match s.value_kind {
            ValueKind::Binary => "binary",
            ValueKind::Float64 => "float64",
        }
    );
    println!("nnz={}", s.aggregate.nnz);
    println!("tiles={}", s.tiles.len());
    println!("header_bytes={}", s.header_bytes);
    println!("record_bytes={}", s.record_bytes);
    println!("file_bytes={}", s.file_bytes);
    if s.aggregate.nnz > 0 {
        println!("scsr_dcsc_ratio={:.6}", scsr_dcsc_ratio(&s.aggregate));
    }
    Ok(())
}

fn open_source(path: &Path) -> Result<Arc<dyn ReadSource>, Error> {
    Ok(Arc::new(FileSource::open(path)?))
}

/// Directory store rooted at the parent of `path`, and `path`'s file name.
fn store_for(path: &Path) -> Result<(DirStore, String), Error> {
    let abs = std::path::absolute(path)?;
    let dir = abs.parent().unwrap_or(Path::new("/")).to_path_buf();
    let name = abs
        .file_name()
        .ok_or_else(|| invalid("--output", format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    Ok((DirStore::new(dir)?, name))
}

fn cmd_spmm(a: SpmmArgs) -> Result<(), Error> {
    a.engine.validate()?;
    if a.input.is_none() && a.cols == 0 {
        return Err(invalid("--cols", "must be at least 1"));
    }
    if a.mem_cols == Some(0) {
        return Err(invalid("--mem-cols", "must be at least 1"));
    }
    let src = open_source(&a.matrix)?;
    let header = tilespmm::format::MatrixHeader::read_from(&*src)?;
    let p = match &a.input {
        Some(path) => DenseImageMeta::read_from(&FileSource::open(path)?)?.cols,
        None => a.cols,
    };
    let mem_cols = a.mem_cols.unwrap_or(p).min(p);
    let start = Instant::now();
    let load_input = || -> Result<DenseMatrix, Error> {
        match &a.input {
            Some(path) => DenseMatrix::read_image(&FileSource::open(path)?),
            None => Ok(DenseMatrix::random(header.n_cols as usize, p, a.seed)),
        }
    };
    let (bytes_read, bytes_written, passes) = match a.engine.mode {
        Mode::Im => {
            let m = TiledSparseMatrix::read(&*src)?;
            let x = load_input()?;
            let engine = InMemoryEngine::new(&m, a.engine.kernel());
            let y = multiply_in_passes(&engine, &x, mem_cols)?;
            let mut sink = FileSink::create(&a.output)?;
            y.write_image(&mut sink)?;
            let plan = VerticalPartitionPlan::new(p, mem_cols)?;
            (src.len(), y.to_image().len() as u64, plan.num_passes())
        }
        Mode::Sem if mem_cols == p => {
            let x = load_input()?;
            let mut sink = FileSink::create(&a.output)?;
            let r = spmm_sem(&*src, &x, &a.engine.sem(), &mut sink)?;
            (r.sparse_bytes_read, r.bytes_written(), 1)
        }
        Mode::Sem => {
            let (store, out_name) = store_for(&a.output)?;
            let (in_name, temp_input) = match &a.input {
                Some(path) => (std::path::absolute(path)?.to_string_lossy().into_owned(), false),
                None => {
                    let name = format!("{out_name}.input");
                    let mut sink = FileSink::create(store.path(&name))?;
                    load_input()?.write_image(&mut sink)?;
                    (name, true)
                }
            };
            let plan = VerticalPartitionPlan::new(p, mem_cols)?;
            let r = spmm_large_dense(&*src, &store, &in_name, &out_name, &plan, &a.engine.sem());
            if temp_input {
                store.remove(&in_name)?;
            }
            let r = r?;
            (
                r.sparse_bytes_read,
                r.passes.iter().map(|p| p.bytes_written()).sum::<u64>() + r.interleave_bytes,
                plan.num_passes(),
            )
        }
    };
    println!("rows={} cols={p}", header.n_rows);
    println!("passes={passes}");
    println!("sparse_bytes_read={bytes_read}");
    println!("bytes_written={bytes_written}");
    println!("seconds={:.6}", start.elapsed().as_secs_f64());
    Ok(())
}

/// Build the engine for `mode` and hand it to `f`.
fn with_engine<T>(
    path: &Path,
    engine: &EngineArgs,
    f: impl FnOnce(&dyn SpmmEngine) -> Result<T, Error>,
) -> Result<T, Error> {
    match engine.mode {
        Mode::Im => {
            let m = TiledSparseMatrix::read(&FileSource::open(path)?)?;
            f(&InMemoryEngine::new(&m, engine.kernel()))
        }
        Mode::Sem => f(&SemEngine::new(open_source(path)?, engine.sem())?),
    }
}

fn write_trace(path: &Option<PathBuf>, trace: &apps::Trace) -> Result<(), Error> {
    if let Some(p) = path {
        trace.write_csv(BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

fn cmd_pagerank(a: PageRankArgs) -> Result<(), Error> {
    a.engine.validate()?;
    if !(a.damping > 0.0 && a.damping < 1.0) {
        return Err(invalid("--damping", format!("{} is outside (0, 1)", a.damping)));
    }
    let cfg = PageRankConfig {
        damping: a.damping,
        max_iters: a.iters,
        tol: a.tol,
        redistribute_dangling: !a.no_dangling,
    };
    let r = with_engine(&a.matrix, &a.engine, |e| {
        let deg = out_degrees(e)?;
        pagerank(e, &deg, &cfg)
    })?;
    if let Some(p) = &a.output {
        let mut w = BufWriter::new(File::create(p)?);
        for x in &r.ranks {
            writeln!(w, "{x:e}")?;
        }
        w.flush()?;
    }
    write_trace(&a.trace, &r.trace)?;
    println!("iterations={}", r.iterations);
    println!("last_delta={:e}", r.deltas.last().copied().unwrap_or(0.0));
    println!("rank_sum={:.12}", r.ranks.iter().sum::<f64>());
    Ok(())
}

fn cmd_eigen(a: EigenArgs) -> Result<(), Error> {
    a.engine.validate()?;
    if a.k == 0 || a.block < a.k || a.block > apps::eigen::MAX_BLOCK {
        return Err(invalid(
            "--block",
            format!("need 1 <= k <= block <= {}", apps::eigen::MAX_BLOCK),
        ));
    }
    let cfg = EigenConfig {
        k: a.k,
        block: a.block,
        max_iters: a.max_iters,
        tol: a.tol,
        residency: match a.residency {
            ResidencyArg::Memory => Residency::Memory,
            ResidencyArg::Storage => Residency::Storage,
        },
        seed: a.seed,
        check_symmetry: false,
    };
    let store = a.store_dir.as_ref().map(DirStore::new).transpose()?;
    let r = with_engine(&a.matrix, &a.engine, |e| {
        check_symmetric(e)?;
        subspace_iteration(e, &cfg, store.as_ref().map(|s| s as _))
    })?;
    for (i, (v, res)) in r.values.iter().zip(&r.residuals).enumerate() {
        println!("lambda[{i}]={v:.15e} residual={res:.3e}");
    }
    println!("iterations={}", r.iterations);
    println!("converged={}", r.converged);
    if let Some(p) = &a.vectors {
        r.vectors.write_image(&mut FileSink::create(p)?)?;
    }
    write_trace(&a.trace, &r.trace)?;
    Ok(())
}

fn cmd_nmf(a: NmfArgs) -> Result<(), Error> {
    a.engine.validate()?;
    if a.k == 0 {
        return Err(invalid("--k", "must be at least 1"));
    }
    if a.mem_cols.is_some_and(|m| m == 0 || m > a.k) {
        return Err(invalid("--mem-cols", format!("must lie in [1, {}]", a.k)));
    }
    let cfg = NmfConfig {
        k: a.k,
        iters: a.iters,
        mem_cols: a.mem_cols,
        seed: a.seed,
        ..NmfConfig::default()
    };
    let r = with_engine(&a.matrix, &a.engine, |ea| {
        with_engine(&a.transpose, &a.engine, |eat| nmf(ea, eat, &cfg, None))
    })?;
    for (i, o) in r.objective.iter().enumerate() {
        println!("iter={} objective={o:.12e}", i + 1);
    }
    if let Some(p) = &a.w_out {
        r.w.write_image(&mut FileSink::create(p)?)?;
    }
    if let Some(p) = &a.h_out {
        r.h_t.write_image(&mut FileSink::create(p)?)?;
    }
    write_trace(&a.trace, &r.trace)?;
    Ok(())
}

fn write_edges(path: &Path, edges: &[(u64, u64)]) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    tilespmm::format::write_edge_list(&mut w, edges.iter().copied())?;
    w.flush()?;
    println!("edges={}", edges.len());
    Ok(())
}

fn cmd_rmat(a: RmatArgs) -> Result<(), Error> {
    let p = RmatParams {
        scale: a.scale,
        edge_factor: a.edge_factor,
        a: a.a,
        b: a.b,
        c: a.c,
        d: a.d,
        seed: a.seed,
        directed: !a.undirected,
    };
    p.validate().map_err(|e| flag_error("--scale/--a/--b/--c/--d", e))?;
    write_edges(&a.output, &gen_rmat(&p)?)
}

fn cmd_sbm(a: SbmArgs) -> Result<(), Error> {
    let p = SbmParams {
        n: a.vertices,
        num_clusters: a.clusters,
        edges: a.edges,
        in_out_ratio: a.in_out,
        order: if a.unclustered {
            VertexOrder::Unclustered
        } else {
            VertexOrder::Clustered
        },
        seed: a.seed,
        directed: a.directed,
    };
    p.validate().map_err(|e| flag_error("--vertices/--clusters/--in-out", e))?;
    write_edges(&a.output, &gen_sbm(&p)?)
}

//! Storage shim.
//!
//! Every byte the engine moves to or from "storage" goes through the traits in
//! this module. Real runs use files; tests swap in the in-memory store, whose
//! counters make byte accounting exact and let faults be injected.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

/// Random-access, read-only byte source.
pub trait ReadSource: Send + Sync {
    fn len(&self) -> u64;

    /// Fill `buf` from `offset`. A short read is an error.
    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Destination for images. `append` writes at the current end; `write_at`
/// allows the header to be filled in after the body has been streamed out.
pub trait WriteSink: Send {
    fn append(&mut self, bytes: &[u8]) -> Result<()>;
    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()>;
    /// Make every previous write durable.
    fn finish(&mut self) -> Result<()>;
}

/// Shared byte/operation counters.
#[derive(Debug, Default)]
pub struct IoCounters {
    bytes_read: AtomicU64,
    reads: AtomicU64,
    bytes_written: AtomicU64,
    writes: AtomicU64,
}

impl IoCounters {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record_read(&self, bytes: u64) {
        self.bytes_read.fetch_add(bytes, Ordering::Relaxed);
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_write(&self, bytes: u64) {
        self.bytes_written.fetch_add(bytes, Ordering::Relaxed);
        self.writes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written.load(Ordering::Relaxed)
    }

    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.bytes_read.store(0, Ordering::Relaxed);
        self.reads.store(0, Ordering::Relaxed);
        self.bytes_written.store(0, Ordering::Relaxed);
        self.writes.store(0, Ordering::Relaxed);
    }
}

/// Byte buffer shared between a [`MemSink`] and later [`MemSource`]s.
pub type SharedBytes = Arc<RwLock<Vec<u8>>>;

#[derive(Debug, Clone)]
pub struct MemSource {
    bytes: SharedBytes,
}

impl MemSource {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self {
            bytes: Arc::new(RwLock::new(bytes)),
        }
    }

    pub fn shared(bytes: SharedBytes) -> Self {
        Self { bytes }
    }
}

impl ReadSource for MemSource {
    fn len(&self) -> u64 {
        self.bytes.read().unwrap().len() as u64
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        let bytes = self.bytes.read().unwrap();
        let start = usize::try_from(offset).unwrap_or(usize::MAX);
        let end = start.saturating_add(buf.len());
        if end > bytes.len() {
            return Err(short_read(offset, buf.len(), bytes.len() as u64));
        }
        buf.copy_from_slice(&bytes[start..end]);
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileSource {
    file: File,
    len: u64,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        Ok(Self { file, len })
    }
}

impl ReadSource for FileSource {
    fn len(&self) -> u64 {
        self.len
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        if offset + buf.len() as u64 > self.len {
            return Err(short_read(offset, buf.len(), self.len));
        }
        self.file.read_exact_at(buf, offset)?;
        Ok(())
    }
}

fn short_read(offset: u64, want: usize, len: u64) -> Error {
    Error::corrupt(
        offset,
        format!("short read: wanted {want} bytes, source holds {len}"),
    )
}

/// Wraps a source and records every read in shared counters.
pub struct CountingSource<S> {
    inner: S,
    counters: Arc<IoCounters>,
}

impl<S: ReadSource> CountingSource<S> {
    pub fn new(inner: S, counters: Arc<IoCounters>) -> Self {
        Self { inner, counters }
    }

    pub fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }
}

impl<S: ReadSource> ReadSource for CountingSource<S> {
    fn len(&self) -> u64 {
        self.inner.len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        self.inner.read_at(offset, buf)?;
        self.counters.record_read(buf.len() as u64);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemSink {
    bytes: SharedBytes,
}

impl MemSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shared(&self) -> SharedBytes {
        Arc::clone(&self.bytes)
    }

    pub fn to_source(&self) -> MemSource {
        MemSource::shared(self.shared())
    }

    pub fn into_bytes(self) -> Vec<u8> {
        match Arc::try_unwrap(self.bytes) {
            Ok(lock) => lock.into_inner().unwrap(),
            Err(shared) => shared.read().unwrap().clone(),
        }
    }
}

impl WriteSink for MemSink {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        self.bytes.write().unwrap().extend_from_slice(bytes);
        Ok(())
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        let mut buf = self.bytes.write().unwrap();
        let start = offset as usize;
        let end = start + bytes.len();
        if buf.len() < end {
            buf.resize(end, 0);
        }
        buf[start..end].copy_from_slice(bytes);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileSink {
    file: File,
    end: u64,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        Ok(Self { file, end: 0 })
    }
}

impl WriteSink for FileSink {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        self.file.write_all_at(bytes, self.end)?;
        self.end += bytes.len() as u64;
        Ok(())
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        self.file.write_all_at(bytes, offset)?;
        self.end = self.end.max(offset + bytes.len() as u64);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.file.sync_data()?;
        Ok(())
    }
}

pub struct CountingSink<W> {
    inner: W,
    counters: Arc<IoCounters>,
    write_sizes: Vec<u64>,
}

impl<W: WriteSink> CountingSink<W> {
    pub fn new(inner: W, counters: Arc<IoCounters>) -> Self {
        Self {
            inner,
            counters,
            write_sizes: Vec::new(),
        }
    }

    /// Size of every individual write, in issue order.
    pub fn write_sizes(&self) -> &[u64] {
        &self.write_sizes
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: WriteSink> WriteSink for CountingSink<W> {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.append(bytes)?;
        self.counters.record_write(bytes.len() as u64);
        self.write_sizes.push(bytes.len() as u64);
        Ok(())
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        self.inner.write_at(offset, bytes)?;
        self.counters.record_write(bytes.len() as u64);
        self.write_sizes.push(bytes.len() as u64);
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.inner.finish()
    }
}

impl<W: WriteSink + ?Sized> WriteSink for &mut W {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        (**self).append(bytes)
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        (**self).write_at(offset, bytes)
    }

    fn finish(&mut self) -> Result<()> {
        (**self).finish()
    }
}

impl<W: WriteSink + ?Sized> WriteSink for Box<W> {
    fn append(&mut self, bytes: &[u8]) -> Result<()> {
        (**self).append(bytes)
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<()> {
        (**self).write_at(offset, bytes)
    }

    fn finish(&mut self) -> Result<()> {
        (**self).finish()
    }
}

impl<S: ReadSource + ?Sized> ReadSource for &S {
    fn len(&self) -> u64 {
        (**self).len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_at(offset, buf)
    }
}

impl<S: ReadSource + ?Sized> ReadSource for Arc<S> {
    fn len(&self) -> u64 {
        (**self).len()
    }

    fn read_at(&self, offset: u64, buf: &mut [u8]) -> Result<()> {
        (**self).read_at(offset, buf)
    }
}

/// `Read` adapter counting consumed bytes, used for streamed text inputs.
pub struct CountingReader<R> {
    inner: R,
    counters: Arc<IoCounters>,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R, counters: Arc<IoCounters>) -> Self {
        Self { inner, counters }
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        if n > 0 {
            self.counters.record_read(n as u64);
        }
        Ok(n)
    }
}

/// A namespace of named objects (matrix images) with shared I/O counters.
pub trait Store: Send + Sync {
    fn open(&self, name: &str) -> Result<Arc<dyn ReadSource>>;
    fn create(&self, name: &str) -> Result<Box<dyn WriteSink>>;
    fn remove(&self, name: &str) -> Result<()>;
    fn counters(&self) -> &Arc<IoCounters>;
}

/// Store keeping every object in memory.
#[derive(Default)]
pub struct MemStore {
    objects: Mutex<HashMap<String, SharedBytes>>,
    counters: Arc<IoCounters>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, name: &str, bytes: Vec<u8>) {
        self.objects
            .lock()
            .unwrap()
            .insert(name.to_owned(), Arc::new(RwLock::new(bytes)));
    }

    pub fn get(&self, name: &str) -> Option<Vec<u8>> {
        let objects = self.objects.lock().unwrap();
        objects.get(name).map(|b| b.read().unwrap().clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.objects.lock().unwrap().keys().cloned().collect();
        names.sort();
        names
    }
}

impl Store for MemStore {
    fn open(&self, name: &str) -> Result<Arc<dyn ReadSource>> {
        let objects = self.objects.lock().unwrap();
        let bytes = objects.get(name).ok_or_else(|| {
            Error::Io(io::Error::new(
                io::ErrorKind::NotFound,
                format!("no object named {name}"),
            ))
        })?;
        Ok(Arc::new(CountingSource::new(
            MemSource::shared(Arc::clone(bytes)),
            Arc::clone(&self.counters),
        )))
    }

    fn create(&self, name: &str) -> Result<Box<dyn WriteSink>> {
        let sink = MemSink::new();
        self.objects
            .lock()
            .unwrap()
            .insert(name.to_owned(), sink.shared());
        Ok(Box::new(CountingSink::new(sink, Arc::clone(&self.counters))))
    }

    fn remove(&self, name: &str) -> Result<()> {
        self.objects.lock().unwrap().remove(name);
        Ok(())
    }

    fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }
}

/// Store backed by files in one directory.
pub struct DirStore {
    root: PathBuf,
    counters: Arc<IoCounters>,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            counters: IoCounters::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Store for DirStore {
    fn open(&self, name: &str) -> Result<Arc<dyn ReadSource>> {
        Ok(Arc::new(CountingSource::new(
            FileSource::open(self.path(name))?,
            Arc::clone(&self.counters),
        )))
    }

    fn create(&self, name: &str) -> Result<Box<dyn WriteSink>> {
        Ok(Box::new(CountingSink::new(
            FileSink::create(self.path(name))?,
            Arc::clone(&self.counters),
        )))
    }

    fn remove(&self, name: &str) -> Result<()> {
        match fs::remove_file(self.path(name)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn counters(&self) -> &Arc<IoCounters> {
        &self.counters
    }
}

//! Correlation-matrix size and memory benchmark.
//!
//! For each feature-map size and patch geometry the harness counts query and
//! key patches, the correlation-matrix elements and their `f32` footprint.
//! Cells above the memory limit are reported as out of memory without being
//! allocated; the rest can optionally be materialized to time them and to
//! measure their peak allocation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matcher::{correlate_normalized, normalize_rows};
use crate::patch::{patch_count, unfold, PatchGeometry};
use crate::tensor::Tensor;

/// 24 GiB.
pub const DEFAULT_MEM_LIMIT: u64 = 24 << 30;

pub const CSV_HEADER: &str = "k,s,p,H,W,Nq,Nk,elements,bytes_est,bytes_peak,ms,status";

/// Allocation accounting for measuring peak heap use.
///
/// Install [`alloc::TrackingAllocator`] as the global allocator of a binary
/// to enable it; without it every measurement is `None`.
pub mod alloc {
    use std::alloc::{GlobalAlloc, Layout, System};
    use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);
    static ACTIVE: AtomicBool = AtomicBool::new(false);

    /// System allocator that tracks live and peak bytes.
    pub struct TrackingAllocator;

    fn grow(n: usize) {
        let now = CURRENT.fetch_add(n, Ordering::SeqCst) + n;
        PEAK.fetch_max(now, Ordering::SeqCst);
    }

    unsafe impl GlobalAlloc for TrackingAllocator {
        unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
            ACTIVE.store(true, Ordering::Relaxed);
            let p = System.alloc(layout);
            if !p.is_null() {
                grow(layout.size());
            }
            p
        }

        unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
            ACTIVE.store(true, Ordering::Relaxed);
            let p = System.alloc_zeroed(layout);
            if !p.is_null() {
                grow(layout.size());
            }
            p
        }

        unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
            System.dealloc(ptr, layout);
            CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
        }

        unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
            let p = System.realloc(ptr, layout, new_size);
            if !p.is_null() {
                if new_size >= layout.size() {
                    grow(new_size - layout.size());
                } else {
                    CURRENT.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
                }
            }
            p
        }
    }

    pub fn is_active() -> bool {
        ACTIVE.load(Ordering::Relaxed)
    }

    /// Live bytes right now.
    pub fn current() -> usize {
        CURRENT.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the live total and returns that total.
    pub fn reset_peak() -> usize {
        let now = current();
        PEAK.store(now, Ordering::SeqCst);
        now
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::SeqCst)
    }
}

/// Parses `"k,s,p;k,s,p;..."`.
pub fn parse_configs(s: &str) -> Result<Vec<PatchGeometry>> {
    s.split(';')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(|cell| {
            let parts: Vec<_> = cell.split(',').map(|v| v.trim().parse::<usize>()).collect();
            match parts.as_slice() {
                [Ok(k), Ok(s), Ok(p)] => PatchGeometry::new(*k, *s, *p),
                _ => Err(Error::Config(format!(
                    "bad geometry `{cell}`, expected k,s,p"
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config("no geometries given".into()))
            } else {
                Ok(v)
            }
        })
}

/// Parses `"HxW"`.
pub fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad dims `{s}`, expected HxW"));
    let (h, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Parses a byte count with an optional `B`, `KB`, `MB`, `GB`, `TB`
/// (powers of 1000) or `KiB`, `MiB`, `GiB`, `TiB` (powers of 1024) suffix.
pub fn parse_mem_limit(s: &str) -> Result<u64> {
    let t = s.trim();
    let split = t
        .find(|c: char| !c.is_ascii_digit() && c != '.')
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num
        .parse()
        .map_err(|_| Error::Config(format!("bad memory limit `{s}`")))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        "tb" => 1_000_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        "tib" => 1 << 40,
        other => return Err(Error::Config(format!("unknown memory unit `{other}`"))),
    };
    Ok((value * mult as f64).round() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    /// Predicted out of memory; nothing was allocated.
    Ofm,
    /// The window does not fit the padded map.
    Unfit,
}

impl CellStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Ofm => "OFM",
            CellStatus::Unfit => "unfit",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub geometry: PatchGeometry,
    pub dims: (usize, usize),
    pub n_q: u64,
    pub n_k: u64,
    pub elements: u64,
    pub bytes_est: u64,
    /// Peak heap growth while the matrix was built, when measured.
    pub bytes_peak: Option<u64>,
    /// Wall time of materialization, when performed.
    pub ms: Option<f64>,
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub mem_limit: u64,
    /// Build every fitting matrix from random features.
    pub materialize: bool,
    /// Feature channels used when materializing.
    pub channels: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            mem_limit: DEFAULT_MEM_LIMIT,
            materialize: false,
            channels: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Element count and OFM prediction of one cell, without allocating.
pub fn analyze(dims: (usize, usize), g: &PatchGeometry, mem_limit: u64) -> BenchRow {
    let (n, status) = match patch_count((1, dims.0, dims.1), g) {
        Ok((_, _, n)) => (n as u64, None),
        Err(_) => (0, Some(CellStatus::Unfit)),
    };
    let elements = n * n;
    let bytes_est = elements * 4;
    let status = status.unwrap_or(if bytes_est > mem_limit {
        CellStatus::Ofm
    } else {
        CellStatus::Ok
    });
    BenchRow {
        geometry: *g,
        dims,
        n_q: n,
        n_k: n,
        elements,
        bytes_est,
        bytes_peak: None,
        ms: None,
        status,
    }
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data = (0..c * h * w)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::new(vec![c, h, w], data)
}

fn materialize(row: &mut BenchRow, opts: &BenchOptions) -> Result<()> {
    let (h, w) = row.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let q = unfold(&random_map(opts.channels, h, w, &mut rng)?, &row.geometry)?;
    let k = unfold(&random_map(opts.channels, h, w, &mut rng)?, &row.geometry)?;
    let (qn, kn) = (normalize_rows(&q), normalize_rows(&k));
    drop((q, k));

    let base = alloc::reset_peak();
    let start = Instant::now();
    let c = correlate_normalized(&qn, &kn, row.geometry.patch_len(opts.channels))?;
    row.ms = Some(start.elapsed().as_secs_f64() * 1e3);
    if alloc::is_active() {
        row.bytes_peak = Some(alloc::peak().saturating_sub(base) as u64);
    }
    debug_assert_eq!(c.values().len() as u64, row.elements);
    Ok(())
}

/// Runs every `dims x configs` cell, dims-major.
pub fn run_bench(
    dims: &[(usize, usize)],
    configs: &[PatchGeometry],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    let mut rows = Vec::with_capacity(dims.len() * configs.len());
    for &d in dims {
        for g in configs {
            let mut row = analyze(d, g, opts.mem_limit);
            if opts.materialize && row.status == CellStatus::Ok {
                materialize(&mut row, opts)?;
            }
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let g = r.geometry;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                g.window,
                g.stride,
                g.padding,
                r.dims.0,
                r.dims.1,
                r.n_q,
                r.n_k,
                r.elements,
                r.bytes_est,
                r.bytes_peak.map(|b| b.to_string()).unwrap_or_default(),
                r.ms.map(|m| format!("{m:.3}")).unwrap_or_default(),
                r.status.as_str()
            );
        }
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>9} {:>11} {:>9} {:>16} {:>12} {:>12} {:>10} {:>6}\n",
            "k,s,p", "HxW", "N", "elements", "est", "peak", "ms", "status"
        );
        for r in &self.rows {
            let g = r.geometry;
            let _ = writeln!(
                out,
                "{:>9} {:>11} {:>9} {:>16} {:>12} {:>12} {:>10} {:>6}",
                format!("{},{},{}", g.window, g.stride, g.padding),
                format!("{}x{}", r.dims.0, r.dims.1),
                r.n_q,
                r.elements,
                human_bytes(r.bytes_est),
                r.bytes_peak.map(human_bytes).unwrap_or_else(|| "-".into()),
                r.ms.map(|m| format!("{m:.2}"))
                    .unwrap_or_else(|| "-".into()),
                r.status.as_str()
            );
        }
        out
    }
}

pub fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = b as f64;
    let mut i = 0;
    while v >= 1024.0 && i + 1 < UNITS.len() {
        v /= 1024.0;
        i += 1;
    }
    if i == 0 {
        format!("{b} B")
    } else {
        format!("{v:.2} {}", UNITS[i])
    }
}

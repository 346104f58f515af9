//! Reconstruction timing sweeps, memory accounting and the explicit
//! kernel-map baseline.

use std::alloc::{GlobalAlloc, Layout, System};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    apply_kernel_map, construct_kernel_map, filter_fuse_streaming, fuse, BlendLogits, FusionConfig,
    ImportanceMaps, KernelMap,
};
use crate::{Error, Result, Tensor};

pub const MIN_REPS: usize = 5;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static MAX_SINGLE: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// Counting wrapper around the system allocator. Install it with
/// `#[global_allocator]` to enable the measured columns.
pub struct TrackingAllocator;

impl TrackingAllocator {
    fn record(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
        MAX_SINGLE.fetch_max(size, Ordering::Relaxed);
        if !INSTALLED.load(Ordering::Relaxed) {
            INSTALLED.store(true, Ordering::Relaxed);
        }
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            Self::record(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            Self::record(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            Self::record(new_size);
        }
        p
    }
}

pub fn tracking_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Heap statistics of one closure run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    /// Peak live bytes above the level at entry.
    pub peak_aux_bytes: usize,
    pub max_single_alloc: usize,
}

/// Runs `f` and reports its heap high-water mark. Only meaningful with
/// [`TrackingAllocator`] installed and nothing else allocating concurrently.
pub fn measure_allocations<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    MAX_SINGLE.store(0, Ordering::SeqCst);
    let r = f();
    let stats = AllocStats {
        peak_aux_bytes: PEAK.load(Ordering::SeqCst).saturating_sub(base),
        max_single_alloc: MAX_SINGLE.load(Ordering::SeqCst),
    };
    (r, stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAccounting {
    pub total_taps: usize,
    /// `4·H·W·Σk²`: every kernel map resident at once.
    pub explicit_bytes: usize,
    /// `4·H·W·(2M + 6)`: importance maps, blend logits, input and output.
    pub streaming_bytes: usize,
}

pub fn memory_accounting(cfg: &FusionConfig, width: usize, height: usize) -> MemoryAccounting {
    let px = 4 * width * height;
    MemoryAccounting {
        total_taps: cfg.total_taps(),
        explicit_bytes: px * cfg.total_taps(),
        streaming_bytes: px * (2 * cfg.kernel_count + 6),
    }
}

/// KPCN-style reconstruction: materializes every kernel map, applies each
/// and fuses. Fails with `Resource` when the maps do not fit in memory.
pub fn explicit_kp_oracle(
    imaps: &ImportanceMaps,
    blend: &BlendLogits,
    noisy: &Tensor,
    cfg: &FusionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let m = cfg.kernel_count;
    imaps.0.expect_size(noisy, "importance maps")?;
    imaps.0.expect_channels(m, "importance maps")?;
    let floats = noisy
        .pixels()
        .checked_mul(cfg.total_taps())
        .ok_or_else(|| Error::Resource("kernel map size overflows".into()))?;
    let mut probe: Vec<f32> = Vec::new();
    probe
        .try_reserve_exact(floats)
        .map_err(|e| Error::Resource(format!("cannot allocate {} kernel-map bytes: {e}", floats * 4)))?;
    drop(probe);
    let maps: Vec<KernelMap> = cfg
        .sizes()
        .iter()
        .enumerate()
        .map(|(i, &k)| construct_kernel_map(&imaps.0.slice_channels(i, 1)?, k))
        .collect::<Result<_>>()?;
    let filtered: Vec<Tensor> = maps
        .iter()
        .map(|km| apply_kernel_map(km, noisy))
        .collect::<Result<_>>()?;
    fuse(&filtered, blend)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub width: usize,
    pub height: usize,
    pub sizes: Vec<usize>,
    pub wall_ms: f64,
    pub peak_aux_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
    pub reps: usize,
    /// `false`: the tracking allocator was absent and `peak_aux_bytes` is the
    /// output buffer size.
    pub memory_measured: bool,
}

/// `M = 1..=6` with the default base size and step.
pub fn default_sweep() -> Vec<FusionConfig> {
    let d = FusionConfig::default();
    (1..=6)
        .map(|m| FusionConfig { kernel_count: m, ..d })
        .collect()
}

pub fn random_inputs(cfg: &FusionConfig, width: usize, height: usize, seed: u64) -> (ImportanceMaps, BlendLogits, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.kernel_count;
    let mut gen = |c: usize, lo: f32, hi: f32| Tensor::from_fn(height, width, c, |_, _, _| rng.random_range(lo..hi));
    let imaps = ImportanceMaps(gen(m, -2.0, 2.0));
    let blend = BlendLogits(gen(m, -2.0, 2.0));
    let noisy = gen(3, 0.0, 4.0);
    (imaps, blend, noisy)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `filter_fuse_streaming` for each configuration,
/// after one discarded warm-up run.
pub fn bench_reconstruction(width: usize, height: usize, sweep: &[FusionConfig], reps: usize) -> Result<BenchResult> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    let measured = tracking_installed();
    let mut rows = Vec::with_capacity(sweep.len());
    for (i, cfg) in sweep.iter().enumerate() {
        cfg.validate_for(height, width)?;
        let (imaps, blend, noisy) = random_inputs(cfg, width, height, i as u64);
        let (warm, stats) = measure_allocations(|| filter_fuse_streaming(&imaps, &blend, &noisy, cfg));
        warm?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            let out = filter_fuse_streaming(&imaps, &blend, &noisy, cfg)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            drop(out);
        }
        rows.push(BenchRow {
            label: format!("M{}_kb{}_ks{}", cfg.kernel_count, cfg.base_size, cfg.step),
            width,
            height,
            sizes: cfg.sizes(),
            wall_ms: median(times).max(f64::MIN_POSITIVE),
            peak_aux_bytes: if measured { stats.peak_aux_bytes } else { 12 * width * height },
        });
    }
    Ok(BenchResult {
        rows,
        threads: rayon::current_num_threads(),
        reps,
        memory_measured: measured,
    })
}

pub fn bench_csv(result: &BenchResult) -> String {
    let mut out = String::from("label,width,height,sizes,wall_ms,peak_aux_bytes\n");
    for r in &result.rows {
        let sizes: Vec<String> = r.sizes.iter().map(|k| k.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{:.4},{}\n",
            r.label,
            r.width,
            r.height,
            sizes.join(";"),
            r.wall_ms,
            r.peak_aux_bytes
        ));
    }
    out
}

pub fn write_bench_csv(result: &BenchResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bench_csv(result).as_bytes()))
        .map_err(|e| Error::io(path, e))
}

//! Two-lane executor for the SSM and attention branches of a block.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    /// Each branch runs on its own thread; the block joins both before fusion.
    #[default]
    Parallel,
    /// SSM then attention on the calling thread.
    Serial,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ExecMode::Parallel => "parallel",
            ExecMode::Serial => "serial",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "parallel" => Ok(ExecMode::Parallel),
            "serial" => Ok(ExecMode::Serial),
            _ => Err(Error::InvalidArgument(format!("unknown exec mode {s:?} (expected parallel or serial)"))),
        }
    }
}

/// Accumulated lane timings, in nanoseconds.
#[derive(Debug, Default)]
struct Counters {
    ssm_busy: AtomicU64,
    attn_busy: AtomicU64,
    join_wall: AtomicU64,
    joins: AtomicU64,
}

/// Snapshot of lane timers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LaneTimes {
    pub ssm_busy_ms: f64,
    pub attn_busy_ms: f64,
    /// Wall time spent inside joins.
    pub join_wall_ms: f64,
    /// Lane time inside joins not spent computing: `2 * wall - ssm - attn`.
    pub idle_ms: f64,
    pub joins: u64,
}

/// Runs branch pairs according to an [`ExecMode`], optionally timing each lane.
///
/// Lane busy time is per-thread CPU time where the platform provides it, so
/// it stays meaningful when the two lanes share a core.
#[derive(Debug)]
pub struct Lanes {
    mode: ExecMode,
    counters: Option<Counters>,
}

impl Lanes {
    pub fn new(mode: ExecMode) -> Self {
        Self { mode, counters: None }
    }

    pub fn timed(mode: ExecMode) -> Self {
        Self { mode, counters: Some(Counters::default()) }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    /// Runs `ssm` and `attn`, returning both results once both are done.
    pub fn join<A, B, FA, FB>(&self, ssm: FA, attn: FB) -> (A, B)
    where
        A: Send,
        B: Send,
        FA: FnOnce() -> A + Send,
        FB: FnOnce() -> B + Send,
    {
        let Some(counters) = &self.counters else {
            return self.run(ssm, attn);
        };
        let start = Instant::now();
        let ((a, ssm_ns), (b, attn_ns)) = self.run(|| busy(ssm), || busy(attn));
        let wall = start.elapsed().as_nanos() as u64;
        counters.ssm_busy.fetch_add(ssm_ns, Ordering::Relaxed);
        counters.attn_busy.fetch_add(attn_ns, Ordering::Relaxed);
        counters.join_wall.fetch_add(wall, Ordering::Relaxed);
        counters.joins.fetch_add(1, Ordering::Relaxed);
        (a, b)
    }

    fn run<A, B, FA, FB>(&self, ssm: FA, attn: FB) -> (A, B)
    where
        A: Send,
        B: Send,
        FA: FnOnce() -> A + Send,
        FB: FnOnce() -> B + Send,
    {
        match self.mode {
            ExecMode::Serial => {
                let a = ssm();
                let b = attn();
                (a, b)
            }
            ExecMode::Parallel => std::thread::scope(|scope| {
                let handle = scope.spawn(attn);
                let a = ssm();
                let b = match handle.join() {
                    Ok(b) => b,
                    Err(panic) => std::panic::resume_unwind(panic),
                };
                (a, b)
            }),
        }
    }

    pub fn times(&self) -> LaneTimes {
        let Some(c) = &self.counters else {
            return LaneTimes::default();
        };
        let ms = |a: &AtomicU64| a.load(Ordering::Relaxed) as f64 / 1e6;
        let (ssm, attn, wall) = (ms(&c.ssm_busy), ms(&c.attn_busy), ms(&c.join_wall));
        LaneTimes {
            ssm_busy_ms: ssm,
            attn_busy_ms: attn,
            join_wall_ms: wall,
            idle_ms: (2.0 * wall - ssm - attn).max(0.0),
            joins: c.joins.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        if let Some(c) = &self.counters {
            for a in [&c.ssm_busy, &c.attn_busy, &c.join_wall, &c.joins] {
                a.store(0, Ordering::Relaxed);
            }
        }
    }
}

fn busy<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = thread_cpu_ns();
    let wall = Instant::now();
    let out = f();
    let ns = match (start, thread_cpu_ns()) {
        (Some(a), Some(b)) => b.saturating_sub(a),
        _ => wall.elapsed().as_nanos() as u64,
    };
    (out, ns)
}

#[cfg(unix)]
fn thread_cpu_ns() -> Option<u64> {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    (rc == 0).then(|| ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64)
}

#[cfg(not(unix))]
fn thread_cpu_ns() -> Option<u64> {
    None
}

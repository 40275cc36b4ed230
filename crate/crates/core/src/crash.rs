//! Crash-injection hooks.
//!
//! Every pipeline phase boundary calls [`hit`]. When a point is armed (via
//! the `AISLSM_CRASH_POINT` environment variable or [`arm`]) and its n-th
//! occurrence is reached, the registered power-loss handler discards every
//! byte that was not confirmed by an fsync and the process aborts.
//!
//! ```text
//! AISLSM_CRASH_POINT=<point-name>[:<nth occurrence, default 1>]
//! ```

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;

pub const CRASH_ENV: &str = "AISLSM_CRASH_POINT";

macro_rules! crash_points {
    ($($variant:ident => $name:literal,)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum CrashPoint {
            $($variant,)*
        }

        impl CrashPoint {
            pub const ALL: &'static [CrashPoint] = &[$(CrashPoint::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(CrashPoint::$variant => $name,)*
                }
            }
        }

        impl FromStr for CrashPoint {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok(CrashPoint::$variant),)*
                    other => Err(format!("unknown crash point '{other}'")),
                }
            }
        }
    };
}

crash_points! {
    WalTornAppend => "wal-torn-append",
    WalAppended => "wal-appended",
    FlushWritten => "flush-written",
    FlushSynced => "flush-synced",
    FlushCommitted => "flush-committed",
    CompactionWriteSubmitted => "compaction-write-submitted",
    CompactionOutputRolled => "compaction-output-rolled",
    CompactionWritesDone => "compaction-writes-done",
    CompactionFsyncSubmitted => "compaction-fsync-submitted",
    CompactionCheckedUp => "compaction-checked-up",
    CompactionCommitted => "compaction-committed",
    LedgerMarkedDurable => "ledger-marked-durable",
    LedgerParentsDeleted => "ledger-parents-deleted",
    LedgerClosed => "ledger-closed",
    SyncOutputSynced => "sync-output-synced",
    SyncCommitted => "sync-committed",
}

const N_POINTS: usize = CrashPoint::ALL.len();

impl CrashPoint {
    fn index(self) -> usize {
        CrashPoint::ALL.iter().position(|p| *p == self).unwrap()
    }

    /// Points only reached by the asynchronous compaction pipeline.
    pub fn async_only(self) -> bool {
        matches!(
            self,
            CrashPoint::CompactionFsyncSubmitted
                | CrashPoint::CompactionCheckedUp
                | CrashPoint::CompactionCommitted
                | CrashPoint::LedgerMarkedDurable
                | CrashPoint::LedgerParentsDeleted
                | CrashPoint::LedgerClosed
        )
    }

    pub fn sync_only(self) -> bool {
        matches!(self, CrashPoint::SyncOutputSynced | CrashPoint::SyncCommitted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmedPoint {
    pub point: CrashPoint,
    pub nth: u64,
}

impl FromStr for ArmedPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (name, nth) = match s.split_once(':') {
            Some((n, k)) => (n, k.parse().map_err(|_| format!("bad occurrence '{k}'"))?),
            None => (s, 1),
        };
        if nth == 0 {
            return Err("occurrence must be >= 1".into());
        }
        Ok(ArmedPoint {
            point: name.parse()?,
            nth,
        })
    }
}

type Handler = Arc<dyn Fn() + Send + Sync>;

struct Registry {
    any_armed: AtomicBool,
    armed: Mutex<Option<ArmedPoint>>,
    hits: [AtomicU64; N_POINTS],
    power_loss: Mutex<Option<Handler>>,
}

fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(|| {
        let armed = std::env::var(CRASH_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .map(|v| v.parse().unwrap_or_else(|e| panic!("{CRASH_ENV}: {e}")));
        Registry {
            any_armed: AtomicBool::new(armed.is_some()),
            armed: Mutex::new(armed),
            hits: std::array::from_fn(|_| AtomicU64::new(0)),
            power_loss: Mutex::new(None),
        }
    })
}

/// Arms a crash point programmatically (overrides the environment).
pub fn arm(point: Option<ArmedPoint>) {
    let reg = registry();
    *reg.armed.lock() = point;
    reg.any_armed.store(point.is_some(), Ordering::Release);
}

/// Whether some crash point is armed in this process.
pub fn is_armed() -> bool {
    registry().any_armed.load(Ordering::Acquire)
}

pub fn armed() -> Option<ArmedPoint> {
    *registry().armed.lock()
}

/// Installs the handler run right before the process aborts.
pub fn set_power_loss_handler(handler: Option<Handler>) {
    *registry().power_loss.lock() = handler;
}

/// Number of times `point` has been reached in this process.
pub fn hits(point: CrashPoint) -> u64 {
    registry().hits[point.index()].load(Ordering::Relaxed)
}

/// Marks a phase boundary.
pub fn hit(point: CrashPoint) {
    let reg = registry();
    let n = reg.hits[point.index()].fetch_add(1, Ordering::Relaxed) + 1;
    if !reg.any_armed.load(Ordering::Acquire) {
        return;
    }
    let armed = *reg.armed.lock();
    if let Some(a) = armed {
        if a.point == point && a.nth == n {
            trigger(point);
        }
    }
}

fn trigger(point: CrashPoint) -> ! {
    if let Some(handler) = registry().power_loss.lock().clone() {
        handler();
    }
    eprintln!("crash injected at {}", point.name());
    std::process::abort();
}

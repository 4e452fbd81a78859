//! Wall-clock abstraction. The core has no access to an OS timer, so callers
//! that want timings inject one.

/// Monotonic seconds since an arbitrary origin.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that advances by a fixed tick every time it is read.
///
/// Timings measured with it count clock reads rather than seconds; useful
/// where a real timer is unavailable and in deterministic tests.
#[derive(Debug, Default)]
pub struct TickClock {
    ticks: core::cell::Cell<u64>,
    tick: f64,
}

impl TickClock {
    pub fn new(tick: f64) -> Self {
        TickClock {
            ticks: core::cell::Cell::new(0),
            tick,
        }
    }
}

impl Clock for TickClock {
    fn now(&self) -> f64 {
        let t = self.ticks.get() + 1;
        self.ticks.set(t);
        t as f64 * self.tick
    }
}

/// Elapsed seconds, floored at one nanosecond so reported durations are
/// always strictly positive.
pub fn elapsed(clock: &dyn Clock, start: f64) -> f64 {
    let dt = clock.now() - start;
    if dt > 1e-9 {
        dt
    } else {
        1e-9
    }
}

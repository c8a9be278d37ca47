//! Global numeric precision mode.
//!
//! Training runs in 32-bit mode (values are rounded through `f32` after
//! every op, and checkpoints store `f32` buffers); gradient verification
//! switches to 64-bit mode where values pass through untouched. The mode
//! is thread-local so concurrently running tests cannot interfere.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

thread_local! {
    static MODE: Cell<Precision> = const { Cell::new(Precision::F32) };
}

pub fn set_precision(p: Precision) {
    MODE.with(|m| m.set(p));
}

pub fn precision() -> Precision {
    MODE.with(|m| m.get())
}

/// Round a freshly computed buffer to the active precision.
pub fn round_buf(buf: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in buf.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Run `f` with the given precision, restoring the previous mode after.
pub fn with_precision<T>(p: Precision, f: impl FnOnce() -> T) -> T {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

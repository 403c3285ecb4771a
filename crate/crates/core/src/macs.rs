//! Instrumented multiply-accumulate counting.
//!
//! Kernels that perform multiplies (dense products, convolutions, attention
//! products) report how many they executed through [`record`]. Counting is
//! only active inside [`instrument`], and each thread has its own log, so
//! concurrent instrumented passes never share a counter.

use std::cell::RefCell;
use std::collections::HashMap;

const UNSCOPED: &str = "(unscoped)";

#[derive(Default)]
struct MacLog {
    scopes: Vec<String>,
    index: HashMap<String, usize>,
    per_layer: Vec<(String, u64)>,
}

impl MacLog {
    fn charge(&mut self, n: u64) {
        let key = self.scopes.last().map(String::as_str).unwrap_or(UNSCOPED);
        let slot = match self.index.get(key) {
            Some(&i) => i,
            None => {
                self.per_layer.push((key.to_string(), 0));
                self.index.insert(key.to_string(), self.per_layer.len() - 1);
                self.per_layer.len() - 1
            }
        };
        self.per_layer[slot].1 += n;
    }
}

thread_local! {
    static LOG: RefCell<Option<MacLog>> = const { RefCell::new(None) };
}

/// Multiply counts observed during one instrumented evaluation, in the order
/// layers first executed a multiply.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacTally {
    pub per_layer: Vec<(String, u64)>,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.per_layer.iter().map(|(_, n)| n).sum()
    }

    pub fn get(&self, layer: &str) -> u64 {
        self.per_layer
            .iter()
            .find(|(name, _)| name == layer)
            .map_or(0, |(_, n)| *n)
    }
}

/// Runs `f` with multiply counting enabled on the current thread.
///
/// Nested calls are not supported; the inner call would discard the outer log.
pub fn instrument<R>(f: impl FnOnce() -> R) -> (R, MacTally) {
    LOG.with(|log| *log.borrow_mut() = Some(MacLog::default()));
    let out = f();
    let log = LOG.with(|log| log.borrow_mut().take()).unwrap_or_default();
    (
        out,
        MacTally {
            per_layer: log.per_layer,
        },
    )
}

/// Attributes every multiply recorded while `f` runs to `layer`.
pub fn scope<R>(layer: &str, f: impl FnOnce() -> R) -> R {
    let active = LOG.with(|log| match log.borrow_mut().as_mut() {
        Some(log) => {
            log.scopes.push(layer.to_string());
            true
        }
        None => false,
    });
    let out = f();
    if active {
        LOG.with(|log| {
            if let Some(log) = log.borrow_mut().as_mut() {
                log.scopes.pop();
            }
        });
    }
    out
}

pub(crate) fn record(n: u64) {
    LOG.with(|log| {
        if let Some(log) = log.borrow_mut().as_mut() {
            log.charge(n);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inactive_outside_instrument() {
        record(10);
        let ((), tally) = instrument(|| ());
        assert_eq!(tally.total(), 0);
    }

    #[test]
    fn scoped_attribution() {
        let ((), tally) = instrument(|| {
            record(1);
            scope("a", || {
                record(2);
                scope("b", || record(5));
                record(3);
            });
        });
        assert_eq!(tally.get(UNSCOPED), 1);
        assert_eq!(tally.get("a"), 5);
        assert_eq!(tally.get("b"), 5);
        assert_eq!(tally.total(), 11);
    }
}

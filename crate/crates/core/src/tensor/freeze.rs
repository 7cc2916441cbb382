//! Record/replay of discrete decisions and detached values.
//!
//! Finite-difference checks probe a function whose discrete choices (top-k
//! sets, threshold indicators, sampled indices) and stop-gradient constants
//! must stay fixed at their base-point values; otherwise the probe measures a
//! different function than the one backward differentiates. Code that makes
//! such a choice routes the resulting values through [`frozen`]; a recording
//! pass stores them and replay passes substitute the stored copies in order.

use std::cell::RefCell;

enum Mode {
    Off,
    Record(Vec<Vec<f64>>),
    Replay { tape: Vec<Vec<f64>>, cursor: usize },
}

thread_local! {
    static MODE: RefCell<Mode> = const { RefCell::new(Mode::Off) };
}

/// Decisions captured by [`record`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decisions(Vec<Vec<f64>>);

impl Decisions {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct ModeGuard(Option<Mode>);

impl Drop for ModeGuard {
    fn drop(&mut self) {
        if let Some(prev) = self.0.take() {
            MODE.with(|m| *m.borrow_mut() = prev);
        }
    }
}

/// Passes values through unchanged, recording them or substituting the
/// recorded copy depending on the active mode.
pub fn frozen(values: Vec<f64>) -> Vec<f64> {
    MODE.with(|m| match &mut *m.borrow_mut() {
        Mode::Off => values,
        Mode::Record(tape) => {
            tape.push(values.clone());
            values
        }
        Mode::Replay { tape, cursor } => {
            let stored = tape
                .get(*cursor)
                .unwrap_or_else(|| panic!("replay tape exhausted at entry {cursor}"));
            assert_eq!(
                stored.len(),
                values.len(),
                "replayed decision {cursor} changed length"
            );
            *cursor += 1;
            stored.clone()
        }
    })
}

pub fn is_replaying() -> bool {
    MODE.with(|m| matches!(&*m.borrow(), Mode::Replay { .. }))
}

/// Runs `f`, capturing every frozen decision it makes.
pub fn record<R>(f: impl FnOnce() -> R) -> (R, Decisions) {
    let prev = MODE.with(|m| std::mem::replace(&mut *m.borrow_mut(), Mode::Record(Vec::new())));
    let mut guard = ModeGuard(Some(prev));
    let out = f();
    let prev = guard.0.take().expect("guard holds previous mode");
    let tape = MODE.with(|m| match std::mem::replace(&mut *m.borrow_mut(), prev) {
        Mode::Record(tape) => tape,
        _ => unreachable!("mode changed during record"),
    });
    (out, Decisions(tape))
}

/// Runs `f` with every frozen decision replaced by the recorded one.
pub fn replay<R>(decisions: &Decisions, f: impl FnOnce() -> R) -> R {
    let prev = MODE.with(|m| {
        std::mem::replace(
            &mut *m.borrow_mut(),
            Mode::Replay {
                tape: decisions.0.clone(),
                cursor: 0,
            },
        )
    });
    let _guard = ModeGuard(Some(prev));
    f()
}

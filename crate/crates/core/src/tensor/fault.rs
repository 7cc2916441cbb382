//! Deliberate corruption of one operation's gradient rule, so verification
//! harnesses can prove they detect a broken backward pass.

use std::cell::Cell;

use super::Op;

/// Factor applied to every parent gradient of the faulty op.
pub const FAULT_SCALE: f64 = 1.5;

thread_local! {
    static ACTIVE: Cell<Option<Op>> = const { Cell::new(None) };
}

pub fn active() -> Option<Op> {
    ACTIVE.with(Cell::get)
}

/// Restores the previous fault setting when dropped.
pub struct FaultGuard(Option<Op>);

impl Drop for FaultGuard {
    fn drop(&mut self) {
        ACTIVE.with(|c| c.set(self.0));
    }
}

/// Corrupts the backward rule of `op` on the current thread until the guard drops.
#[must_use = "the fault is cleared when the guard drops"]
pub fn inject(op: Op) -> FaultGuard {
    FaultGuard(ACTIVE.with(|c| c.replace(Some(op))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn injected_fault_scales_gradient() {
        let x = Tensor::parameter(&[], vec![0.0]).unwrap();
        {
            let _g = inject(Op::Sigmoid);
            x.sigmoid().sum_all().backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![0.25 * FAULT_SCALE]);
        assert_eq!(active(), None);
    }
}

//! Shared inputs for the benchmarks.

use slotaug::corpus::LabeledUtterance;
use slotaug::fixture;

pub fn labeled(n: usize) -> Vec<LabeledUtterance> {
    fixture::slot_dataset("bench", n, 7).items
}

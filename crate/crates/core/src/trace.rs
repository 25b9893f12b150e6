//! Per-thread call counters for asserting which code paths a computation
//! touched, e.g. that evaluation never builds contribution maps.

use std::cell::RefCell;
use std::collections::BTreeMap;

pub const CONTRIBUTION_MAP: &str = "frl::contribution_map";
pub const PATCH_MASK: &str = "frl::patch_mask";
pub const PROJECTOR: &str = "mca::projector";

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, u64>> = const { RefCell::new(BTreeMap::new()) };
}

pub fn hit(site: &'static str) {
    COUNTS.with(|c| *c.borrow_mut().entry(site).or_default() += 1);
}

pub fn count(site: &str) -> u64 {
    COUNTS.with(|c| c.borrow().get(site).copied().unwrap_or(0))
}

pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_per_site_and_resettable() {
        reset();
        hit(PATCH_MASK);
        hit(PATCH_MASK);
        assert_eq!(count(PATCH_MASK), 2);
        assert_eq!(count(PROJECTOR), 0);
        reset();
        assert_eq!(count(PATCH_MASK), 0);
    }
}

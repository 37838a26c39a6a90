//! Exit-criteria suite for `gradnet`; everything lives in `tests/acceptance.rs`.

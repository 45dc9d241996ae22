//! Holds the end-to-end acceptance run in `tests/acceptance.rs`.

//! Carries the workspace acceptance suite in `tests/acceptance.rs`.

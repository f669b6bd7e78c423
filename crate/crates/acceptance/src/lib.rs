//! Acceptance suite for the workspace; the checks live in
//! `tests/acceptance.rs` and run last under `cargo test --workspace`.

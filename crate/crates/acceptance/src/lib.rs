//! Acceptance checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p carma-hawkes-validation --test acceptance`.

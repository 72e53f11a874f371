//! Holds the `acceptance` test target; there is no library code.
//!
//! Run it with `cargo test -p rvi-validation --test acceptance -- --nocapture`.

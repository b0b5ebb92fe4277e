//! Holds the `acceptance` test target; run it with
//! `cargo test -p lifelong-edit-validation --test acceptance`.

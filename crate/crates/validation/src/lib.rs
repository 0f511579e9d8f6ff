//! Holds the `acceptance` test target; run it with `cargo test -p seampatch-validation --test acceptance`.

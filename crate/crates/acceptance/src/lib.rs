//! Acceptance checks for the whole pipeline. Everything lives in the
//! `acceptance` test target; run it with `cargo test -p segguide-acceptance`.

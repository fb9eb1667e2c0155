//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod experiment;
mod gradcheck;
mod oracles;
mod service;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub type Check = Result<Outcome, String>;

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(lines: &mut Vec<Line>, id: &'static str, title: &'static str, f: impl FnOnce() -> Check) {
    let start = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(o)) => (o.pass, o.detail),
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{id} {verdict} {title}: {detail} [{secs:.1}s]");
    lines.push(Line {
        id,
        title,
        pass,
        detail,
        secs,
    });
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    run(&mut lines, "A2", "gradient correctness", gradcheck::a2);
    run(&mut lines, "A3", "query generator oracle", oracles::a3);
    run(&mut lines, "A9", "metric oracle", oracles::a9);
    run(&mut lines, "A10", "weight map fixture", oracles::a10);

    let start = Instant::now();
    let world = experiment::World::build();
    match &world {
        Ok(w) => println!(
            "setup: {} train / {} test images, backbone test mIoU {:.4} [{:.1}s]",
            w.exp.dataset.train.len(),
            w.exp.dataset.test.len(),
            w.unguided_miou,
            start.elapsed().as_secs_f64()
        ),
        Err(e) => println!("setup failed: {e}"),
    }
    let mut world = world.map_err(|e| e.to_string());
    let mut with = |id, title, f: &dyn Fn(&mut experiment::World) -> Check| {
        run(&mut lines, id, title, || match &mut world {
            Ok(w) => f(w),
            Err(e) => Err(format!("setup failed: {e}")),
        })
    };
    with("A1", "identity at zero guidance", &experiment::a1);
    with("A4", "back-propagation question protocol", &experiment::a4);
    with("A5", "text guiding gain", &experiment::a5);
    with("A6", "hint complexity ordering", &experiment::a6);
    with("A7", "repeated guiding", &experiment::a7);
    with("A8", "split location trend", &experiment::a8);
    with("A11", "service replay determinism", &service::a11);

    lines.sort_by_key(|l| l.id[1..].parse::<u32>().unwrap_or(u32::MAX));
    println!();
    println!("acceptance summary");
    for l in &lines {
        let verdict = if l.pass { "PASS" } else { "FAIL" };
        println!("  {:<4} {verdict}  {:<38} {:>7.1}s  {}", l.id, l.title, l.secs, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

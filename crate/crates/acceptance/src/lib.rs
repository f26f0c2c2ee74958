//! A tiny runner for named pass/fail checks. Each check runs in isolation;
//! a panic counts as a failure. One line is printed per check.

use std::panic::{catch_unwind, UnwindSafe};
use std::time::Instant;

pub type Outcome = Result<String, String>;

#[derive(Default)]
pub struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    pub fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome + UnwindSafe) -> bool {
        let start = Instant::now();
        let outcome = catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} {name}: {detail} [{secs:.2}s]", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
        ok
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

/// `Err(message)` unless `cond` holds.
pub fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

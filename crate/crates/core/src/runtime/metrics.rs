//! Per-generation stats CSV and a JSONL event log.
//!
//! `stats.csv` has a fixed header, one row per generation:
//!
//! | column | meaning |
//! |---|---|
//! | `g` | generation, from 0 |
//! | `best_F` | best constrained fitness in the population |
//! | `mean_F` | population mean of F |
//! | `sigma_F` | population standard deviation of F |
//! | `p_m` | base mutation rate used to breed the next generation |
//! | `stopped_early` | `true` on the row where early stopping fired |
//!
//! Floats use the shortest representation that round-trips, so identical
//! runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::evolution::GenerationStats;

pub const STATS_HEADER: &str = "g,best_F,mean_F,sigma_F,p_m,stopped_early";

pub fn stats_csv(history: &[GenerationStats]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(STATS_HEADER);
    out.push('\n');
    for s in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.generation, s.best_f, s.mean_f, s.sigma_f, s.p_m, s.stopped_early
        ));
    }
    out
}

pub fn write_stats_csv(path: &Path, history: &[GenerationStats]) -> std::io::Result<()> {
    std::fs::write(path, stats_csv(history))
}

/// Appends one JSON object per line.
pub struct EventLog {
    out: BufWriter<File>,
}

#[derive(Serialize)]
struct Line<'a, T: Serialize> {
    event: &'a str,
    #[serde(flatten)]
    data: T,
}

impl EventLog {
    /// Opens `path` for appending, so resumed runs extend the same log.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            out: BufWriter::new(file),
        })
    }

    pub fn emit<T: Serialize>(&mut self, event: &str, data: T) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, &Line { event, data })?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }

    pub fn generation(&mut self, s: &GenerationStats) -> std::io::Result<()> {
        self.emit("generation", s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::ComponentCategory;
    use std::collections::BTreeMap;

    fn row(g: usize, best: f64, stop: bool) -> GenerationStats {
        GenerationStats {
            generation: g,
            best_f: best,
            mean_f: best / 2.0,
            sigma_f: 0.125,
            p_m: 0.3,
            modifications: BTreeMap::from([(ComponentCategory::RoleDefinition, 2)]),
            replace_fallbacks: 0,
            stopped_early: stop,
        }
    }

    #[test]
    fn csv_golden() {
        let csv = stats_csv(&[row(0, 0.5, false), row(1, 0.75, true)]);
        assert_eq!(
            csv,
            "g,best_F,mean_F,sigma_F,p_m,stopped_early\n\
             0,0.5,0.25,0.125,0.3,false\n\
             1,0.75,0.375,0.125,0.3,true\n"
        );
    }

    #[test]
    fn events_are_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut log = EventLog::open(&path).unwrap();
        log.generation(&row(0, 0.5, false)).unwrap();
        log.emit("run_finished", serde_json::json!({"best_f": 0.5})).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["event"], "generation");
        assert_eq!(lines[0]["modifications"]["role_definition"], 2);
        assert_eq!(lines[1]["best_f"], 0.5);
    }
}

//! Run-log parsing and report generation: per-program speedup tables
//! (sorted, best and worst five marked per set) and the per-evaluation
//! aggregate series as CSV, with an optional static SVG chart.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRecord {
    pub step: u64,
    pub phase: String,
    pub program_id: String,
    pub metric: String,
    pub value: serde_json::Value,
}

impl RunLogRecord {
    pub fn number(&self) -> Option<f64> {
        self.value.as_f64()
    }
}

/// Append-only JSONL writer for the run log.
pub struct RunLogWriter {
    out: BufWriter<File>,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn log(
        &mut self,
        step: u64,
        phase: &str,
        program_id: &str,
        metric: &str,
        value: serde_json::Value,
    ) -> std::io::Result<()> {
        let record = RunLogRecord {
            step,
            phase: phase.to_string(),
            program_id: program_id.to_string(),
            metric: metric.to_string(),
            value,
        };
        writeln!(self.out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        self.out.flush()
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("run log is empty or holds no evaluation records")]
    EmptyLog,
    #[error("run log {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("run log {path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

pub fn parse_run_log(path: &Path) -> Result<Vec<RunLogRecord>, ReportError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ReportError::Io { path: path.display().to_string(), source })?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| ReportError::Malformed {
            path: path.display().to_string(),
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// One program's row in the final table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub set: String,
    pub program_id: String,
    pub sequence: String,
    pub o3_speedup: f64,
    pub agent_speedup: f64,
}

impl ReportRow {
    /// Agent speedup over O3 speedup, the per-row comparison metric.
    pub fn ratio(&self) -> f64 {
        self.agent_speedup / self.o3_speedup
    }
}

/// One evaluation's aggregates for one program set.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPoint {
    pub eval_index: usize,
    pub step: u64,
    pub set: String,
    pub agent_geomean: f64,
    pub best_geomean: f64,
    pub o3_geomean: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ReportTables {
    /// Final-evaluation rows, per program.
    pub rows: Vec<ReportRow>,
    /// Aggregate curves across evaluations.
    pub series: Vec<SeriesPoint>,
}

/// Geometric mean over strictly positive values; ignores the rest.
pub fn geometric_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        if v > 0.0 && v.is_finite() {
            sum += v.ln();
            count += 1;
        }
    }
    (count > 0).then(|| (sum / count as f64).exp())
}

pub fn build_report(records: &[RunLogRecord]) -> Result<ReportTables, ReportError> {
    let eval_records: Vec<&RunLogRecord> =
        records.iter().filter(|r| r.phase == "eval").collect();
    if eval_records.is_empty() {
        return Err(ReportError::EmptyLog);
    }

    // Evaluations are identified by their train step, in order.
    let mut eval_steps: Vec<u64> = eval_records.iter().map(|r| r.step).collect();
    eval_steps.sort_unstable();
    eval_steps.dedup();

    // Aggregate series from the per-set geomean records.
    let mut series = Vec::new();
    for (eval_index, &step) in eval_steps.iter().enumerate() {
        for set in ["training", "validation"] {
            let metric_of = |name: &str| -> Option<f64> {
                eval_records
                    .iter()
                    .find(|r| r.step == step && r.program_id == set && r.metric == name)
                    .and_then(|r| r.number())
            };
            if let (Some(agent), Some(best), Some(o3)) = (
                metric_of("geomean_agent"),
                metric_of("geomean_best"),
                metric_of("geomean_o3"),
            ) {
                series.push(SeriesPoint {
                    eval_index,
                    step,
                    set: set.to_string(),
                    agent_geomean: agent,
                    best_geomean: best,
                    o3_geomean: o3,
                });
            }
        }
    }

    // Per-program rows from the last evaluation that covered the program.
    let mut per_program: BTreeMap<String, (String, String, Option<f64>, Option<f64>)> =
        BTreeMap::new();
    for record in &eval_records {
        if record.program_id.is_empty()
            || record.program_id == "training"
            || record.program_id == "validation"
        {
            continue;
        }
        let entry = per_program
            .entry(record.program_id.clone())
            .or_insert_with(|| (String::new(), String::new(), None, None));
        match record.metric.as_str() {
            "set" => entry.0 = record.value.as_str().unwrap_or_default().to_string(),
            "sequence" => entry.1 = record.value.as_str().unwrap_or_default().to_string(),
            "agent_speedup" => entry.2 = record.number(),
            "o3_speedup" => entry.3 = record.number(),
            _ => {}
        }
    }
    let mut rows = Vec::new();
    for (program_id, (set, sequence, agent, o3)) in per_program {
        if let (Some(agent_speedup), Some(o3_speedup)) = (agent, o3) {
            rows.push(ReportRow { set, program_id, sequence, o3_speedup, agent_speedup });
        }
    }
    if rows.is_empty() && series.is_empty() {
        return Err(ReportError::EmptyLog);
    }
    Ok(ReportTables { rows, series })
}

/// Render per-set tables sorted by the agent-vs-O3 ratio, marking the
/// best and worst `highlight` rows of each set.
pub fn render_program_tables(tables: &ReportTables, highlight: usize) -> String {
    let mut out = String::new();
    for set in ["training", "validation"] {
        let mut rows: Vec<&ReportRow> =
            tables.rows.iter().filter(|r| r.set == set).collect();
        if rows.is_empty() {
            continue;
        }
        rows.sort_by(|a, b| b.ratio().total_cmp(&a.ratio()));
        out.push_str(&format!("== {set} set ({} programs)\n", rows.len()));
        out.push_str("rank\tprogram\tsequence\to3\tagent\tagent_vs_o3\n");
        for (i, row) in rows.iter().enumerate() {
            let marker = if i < highlight {
                "top"
            } else if i + highlight >= rows.len() {
                "bottom"
            } else {
                ""
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.2}x\t{:.2}x\t{:.2}x\t{}\n",
                i + 1,
                row.program_id,
                if row.sequence.is_empty() { "-" } else { &row.sequence },
                row.o3_speedup,
                row.agent_speedup,
                row.ratio(),
                marker
            ));
        }
        out.push('\n');
    }
    out
}

/// The three curves per set, one CSV row per (evaluation, set).
pub fn render_series_csv(tables: &ReportTables) -> String {
    let mut out = String::from("eval_index,step,set,agent_geomean,best_geomean,o3_geomean\n");
    for p in &tables.series {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.eval_index, p.step, p.set, p.agent_geomean, p.best_geomean, p.o3_geomean
        ));
    }
    out
}

/// Minimal static SVG with the aggregate curves of one set.
pub fn render_series_svg(tables: &ReportTables, set: &str) -> String {
    let points: Vec<&SeriesPoint> =
        tables.series.iter().filter(|p| p.set == set).collect();
    let (w, h, pad) = (640.0, 360.0, 42.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"14\">geometric-mean speedup ({set})</text>\n",
        pad
    );
    if points.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let max_y = points
        .iter()
        .flat_map(|p| [p.agent_geomean, p.best_geomean, p.o3_geomean])
        .fold(1.0f64, f64::max)
        * 1.1;
    let n = points.len().max(2) as f64;
    let x_of = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y_of = |v: f64| h - pad - (h - 2.0 * pad) * (v / max_y);
    let curves: [(&str, Box<dyn Fn(&SeriesPoint) -> f64>); 3] = [
        ("#1f77b4", Box::new(|p| p.agent_geomean)),
        ("#2ca02c", Box::new(|p| p.best_geomean)),
        ("#d62728", Box::new(|p| p.o3_geomean)),
    ];
    for (color, value) in &curves {
        let path: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{},{}", x_of(i), y_of(value(p))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{pad}\" y=\"{}\" font-size=\"11\" fill=\"#1f77b4\">agent</text>\
         <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#2ca02c\">best observed</text>\
         <text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"#d62728\">o3</text>\n",
        h - 12.0,
        pad + 60.0,
        h - 12.0,
        pad + 170.0,
        h - 12.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(
        step: u64,
        program: &str,
        metric: &str,
        value: serde_json::Value,
    ) -> RunLogRecord {
        RunLogRecord {
            step,
            phase: "eval".into(),
            program_id: program.into(),
            metric: metric.into(),
            value,
        }
    }

    fn program_records(step: u64, program: &str, set: &str, agent: f64, o3: f64) -> Vec<RunLogRecord> {
        vec![
            record(step, program, "set", set.into()),
            record(step, program, "sequence", "1→6→1".into()),
            record(step, program, "agent_speedup", agent.into()),
            record(step, program, "o3_speedup", o3.into()),
        ]
    }

    #[test]
    fn geometric_mean_matches_hand_values() {
        assert!((geometric_mean([2.0, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        assert!((geometric_mean([1.0, 1.0, 8.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(geometric_mean([]), None);
        assert_eq!(geometric_mean([-1.0, 0.0]), None, "only positive speedups count");
    }

    #[test]
    fn ratios_round_to_expected_two_decimals() {
        let mut records = program_records(100, "dynprog.c", "validation", 3.85, 2.91);
        records.extend(program_records(100, "floyd-warshall.c", "training", 3.19, 4.55));
        let tables = build_report(&records).unwrap();
        let rendered = render_program_tables(&tables, 5);
        assert!(rendered.contains("1.32x"), "{rendered}");
        assert!(rendered.contains("0.70x"), "{rendered}");
    }

    #[test]
    fn equal_speedups_give_ratio_one() {
        let records = program_records(1, "even.c", "training", 2.5, 2.5);
        let tables = build_report(&records).unwrap();
        assert!((tables.rows[0].ratio() - 1.0).abs() < 1e-12);
        assert!(render_program_tables(&tables, 5).contains("1.00x"));
    }

    #[test]
    fn every_rendered_ratio_is_agent_over_o3_at_two_decimals() {
        let mut records = Vec::new();
        let cases = [(1.23, 4.56), (2.0, 1.0), (0.5, 0.7), (3.333, 3.332)];
        for (i, (agent, o3)) in cases.iter().enumerate() {
            records.extend(program_records(5, &format!("p{i}.c"), "training", *agent, *o3));
        }
        let tables = build_report(&records).unwrap();
        let rendered = render_program_tables(&tables, 2);
        for (i, (agent, o3)) in cases.iter().enumerate() {
            let expected = format!("{:.2}x", agent / o3);
            let row = rendered
                .lines()
                .find(|l| l.contains(&format!("p{i}.c")))
                .expect("row exists");
            assert!(row.contains(&expected), "row `{row}` lacks `{expected}`");
        }
    }

    #[test]
    fn series_points_group_by_evaluation_and_set() {
        let mut records = Vec::new();
        for (step, agent) in [(10u64, 1.1), (20, 1.3)] {
            for set in ["training", "validation"] {
                records.push(record(step, set, "geomean_agent", agent.into()));
                records.push(record(step, set, "geomean_best", (agent + 0.1).into()));
                records.push(record(step, set, "geomean_o3", 1.5.into()));
            }
        }
        let tables = build_report(&records).unwrap();
        assert_eq!(tables.series.len(), 4);
        assert_eq!(tables.series[0].eval_index, 0);
        assert_eq!(tables.series[3].eval_index, 1);
        let csv = render_series_csv(&tables);
        assert_eq!(csv.lines().count(), 5, "header plus four points");
    }

    #[test]
    fn empty_logs_are_an_error() {
        assert!(matches!(build_report(&[]), Err(ReportError::EmptyLog)));
        let only_training_phase = vec![RunLogRecord {
            step: 1,
            phase: "train".into(),
            program_id: String::new(),
            metric: "loss".into(),
            value: 0.5.into(),
        }];
        assert!(matches!(build_report(&only_training_phase), Err(ReportError::EmptyLog)));
    }

    #[test]
    fn log_writer_and_parser_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.log");
        {
            let mut writer = RunLogWriter::create(&path).unwrap();
            writer.log(3, "eval", "p.c", "agent_speedup", 1.5.into()).unwrap();
            writer.log(3, "train", "", "loss", 0.25.into()).unwrap();
        }
        let records = parse_run_log(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].metric, "agent_speedup");
        assert_eq!(records[1].number(), Some(0.25));
    }

    #[test]
    fn svg_renders_without_points_and_with_points() {
        let records = [
            record(10, "training", "geomean_agent", 1.2.into()),
            record(10, "training", "geomean_best", 1.4.into()),
            record(10, "training", "geomean_o3", 1.3.into()),
        ];
        let tables = build_report(&records).unwrap();
        let svg = render_series_svg(&tables, "training");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        let empty = render_series_svg(&tables, "validation");
        assert!(empty.ends_with("</svg>\n"));
    }
}

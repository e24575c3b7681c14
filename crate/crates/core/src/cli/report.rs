use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::config::{ibi_us, SweepConfig};
use super::CliError;
use crate::metrics::SweepSummary;

/// A whitespace-separated table with a `#` header line. Blank lines split
/// it into blocks, one per plotted series.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub blocks: Vec<Vec<Vec<String>>>,
}

impl Table {
    fn new(name: &'static str, columns: &[&'static str]) -> Self {
        Self {
            name,
            columns: columns.to_vec(),
            blocks: Vec::new(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &Vec<String>> {
        self.blocks.iter().flatten()
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {}\n", self.columns.join(" "));
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for row in block {
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }
}

fn wifi_num(on: bool) -> String {
    (on as u8).to_string()
}

fn ci(s: &SweepSummary) -> String {
    s.ci95.map_or_else(|| "NaN".to_string(), |c| c.to_string())
}

/// Builds the report tables: outcome shares and RGB vs. CW at
/// `report_ibi`, RGB vs. IBI at `report_cw`, and the best CW per density
/// and Wi-Fi state.
pub fn emit_report(summaries: &[SweepSummary], config: &SweepConfig) -> Result<Vec<Table>, CliError> {
    if summaries.is_empty() {
        return Err(CliError::Invariant("no summaries to report".into()));
    }
    let at_ibi = ibi_us(config.report_ibi);
    let mut sorted: Vec<&SweepSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| s.point);

    let mut outcomes = Table::new("fig3", &["density", "cw", "wifi", "p_dlvy", "p_exp", "p_sync", "p_hn", "pdr"]);
    let mut by_cw: BTreeMap<(u32, bool), Vec<&SweepSummary>> = BTreeMap::new();
    let mut by_ibi: BTreeMap<(u32, bool), Vec<&SweepSummary>> = BTreeMap::new();
    for &s in &sorted {
        let p = s.point;
        if p.ibi_us == at_ibi {
            by_cw.entry((p.density, p.wifi)).or_default().push(s);
        }
        if p.cw == config.report_cw {
            by_ibi.entry((p.density, p.wifi)).or_default().push(s);
        }
    }

    let mut by_density: BTreeMap<u32, Vec<Vec<String>>> = BTreeMap::new();
    for s in sorted.iter().filter(|s| s.point.ibi_us == at_ibi) {
        let q = &s.probabilities;
        let sent = q.p_dlvy + q.p_sync + q.p_hn;
        let pdr = if sent > 0.0 { q.p_dlvy / sent } else { f64::NAN };
        by_density.entry(s.point.density).or_default().push(vec![
            s.point.density.to_string(),
            s.point.cw.to_string(),
            wifi_num(s.point.wifi),
            q.p_dlvy.to_string(),
            q.p_exp.to_string(),
            q.p_sync.to_string(),
            q.p_hn.to_string(),
            pdr.to_string(),
        ]);
    }
    outcomes.blocks = by_density.into_values().collect();

    let mut vs_ibi = Table::new("fig4", &["density", "wifi", "ibi_ms", "mean_rgb", "ci95"]);
    for (&(density, wifi), series) in &by_ibi {
        vs_ibi.blocks.push(
            series
                .iter()
                .map(|s| {
                    vec![
                        density.to_string(),
                        wifi_num(wifi),
                        s.point.ibi_ms().to_string(),
                        s.pooled_mean.to_string(),
                        ci(s),
                    ]
                })
                .collect(),
        );
    }

    let mut vs_cw = Table::new("fig5", &["density", "wifi", "cw", "mean_rgb", "ci95"]);
    let mut best = Table::new("argmax_cw", &["density", "wifi", "best_cw", "mean_rgb"]);
    let mut best_rows = Vec::new();
    for (&(density, wifi), series) in &by_cw {
        vs_cw.blocks.push(
            series
                .iter()
                .map(|s| {
                    vec![
                        density.to_string(),
                        wifi_num(wifi),
                        s.point.cw.to_string(),
                        s.pooled_mean.to_string(),
                        ci(s),
                    ]
                })
                .collect(),
        );
        let top = best_cw(series);
        best_rows.push(vec![
            density.to_string(),
            wifi_num(wifi),
            top.point.cw.to_string(),
            top.pooled_mean.to_string(),
        ]);
    }
    if !best_rows.is_empty() {
        best.blocks.push(best_rows);
    }
    Ok(vec![outcomes, vs_ibi, vs_cw, best])
}

/// Highest pooled mean; the smaller CW wins a tie.
pub fn best_cw<'a>(series: &[&'a SweepSummary]) -> &'a SweepSummary {
    series
        .iter()
        .copied()
        .min_by(|a, b| {
            b.pooled_mean
                .total_cmp(&a.pooled_mean)
                .then(a.point.cw.cmp(&b.point.cw))
        })
        .expect("series is non-empty")
}

pub fn write_report(tables: &[Table], dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for t in tables {
        let path = dir.join(format!("{}.dat", t.name));
        std::fs::write(&path, t.render()).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

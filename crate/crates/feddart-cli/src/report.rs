//! Metrics report: summarizes a metrics.jsonl file as CSV plus a per-cluster
//! loss-curve summary on stdout.

use std::fmt::Write as _;
use std::path::Path;

use fact::RoundMetrics;

pub struct Report {
    pub csv: String,
    pub summary: String,
}

/// Parses a metrics.jsonl file. A malformed line aborts with its number.
pub fn load_metrics(path: &Path) -> Result<Vec<RoundMetrics>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RoundMetrics = serde_json::from_str(line)
            .map_err(|e| format!("{} line {}: {e}", path.display(), idx + 1))?;
        records.push(record);
    }
    Ok(records)
}

pub fn build_report(records: &[RoundMetrics]) -> Report {
    let mut csv = String::from("clustering_round,cluster,training_round,loss,participants\n");
    for r in records {
        let loss = r
            .loss
            .map(|l| format!("{l}"))
            .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.clustering_round,
            r.cluster,
            r.training_round,
            loss,
            r.participants.len()
        );
    }

    let mut summary = String::new();
    let mut clusters: Vec<usize> = records.iter().map(|r| r.cluster).collect();
    clusters.sort_unstable();
    clusters.dedup();
    for cluster in clusters {
        let losses: Vec<String> = records
            .iter()
            .filter(|r| r.cluster == cluster)
            .map(|r| {
                r.loss
                    .map(|l| format!("{l:.6}"))
                    .unwrap_or_else(|| "-".into())
            })
            .collect();
        let _ = writeln!(summary, "cluster {cluster}: loss {}", losses.join(" -> "));
    }
    if records.is_empty() {
        summary.push_str("no rounds recorded\n");
    }
    Report { csv, summary }
}

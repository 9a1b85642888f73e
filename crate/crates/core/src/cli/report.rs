use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fedsim::{read_jsonl, TraceRecord};

pub const BAND_NAMES: [&str; 4] = ["Lower", "Middle", "Higher", "Output"];

/// Quartile band (0..4) of a 1-based layer id.
pub fn band_of(layer: usize, num_layers: usize) -> usize {
    ((layer - 1) * 4 / num_layers).min(3)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandRow {
    pub band: &'static str,
    pub first_layer: usize,
    pub last_layer: usize,
    pub selections: usize,
    /// Share of all selections, in percent.
    pub selection_pct: f64,
    /// Mean raw layer score over the band's layers and all scored records.
    pub avg_raw_attention: Option<f64>,
    pub avg_normalized_attention: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerReport {
    pub num_layers: usize,
    pub records: usize,
    pub rounds: usize,
    pub strategies: Vec<String>,
    pub tie_events: usize,
    pub total_selections: usize,
    /// Times each layer was selected, index 0 = layer 1.
    pub layer_counts: Vec<usize>,
    pub bands: Vec<BandRow>,
}

/// Builds the band table from trace records alone.
pub fn layer_report(trace: &[TraceRecord]) -> Result<LayerReport> {
    let first = trace.first().ok_or_else(|| Error::Input("selection trace is empty".into()))?;
    let num_layers = first.num_layers;
    if num_layers == 0 {
        return Err(Error::Input("trace records have zero layers".into()));
    }
    let mut counts = vec![0usize; num_layers];
    let mut raw_sum = vec![0.0; num_layers];
    let mut norm_sum = vec![0.0; num_layers];
    let mut scored = 0usize;
    let mut strategies: Vec<String> = Vec::new();
    let mut tie_events = 0;
    for r in trace {
        if r.num_layers != num_layers {
            return Err(Error::Input(format!(
                "trace mixes {} and {} layers",
                num_layers, r.num_layers
            )));
        }
        for &l in &r.mask {
            if l == 0 || l > num_layers {
                return Err(Error::Input(format!("layer {l} out of range 1..={num_layers}")));
            }
            counts[l - 1] += 1;
        }
        if let (Some(raw), Some(norm)) = (&r.raw_scores, &r.normalized_scores) {
            if raw.len() != num_layers || norm.len() != num_layers {
                return Err(Error::Input(format!("round {} client {}: score length", r.round, r.client)));
            }
            for l in 0..num_layers {
                raw_sum[l] += raw[l];
                norm_sum[l] += norm[l];
            }
            scored += 1;
        }
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy.clone());
        }
        tie_events += usize::from(r.tie_at_boundary);
    }
    let total: usize = counts.iter().sum();
    let bands = (0..4)
        .filter_map(|b| {
            let layers: Vec<usize> = (1..=num_layers).filter(|l| band_of(*l, num_layers) == b).collect();
            let (&lo, &hi) = (layers.first()?, layers.last()?);
            let selections: usize = layers.iter().map(|l| counts[l - 1]).sum();
            let avg = |sums: &[f64]| {
                (scored > 0).then(|| layers.iter().map(|l| sums[l - 1]).sum::<f64>() / (scored * layers.len()) as f64)
            };
            Some(BandRow {
                band: BAND_NAMES[b],
                first_layer: lo,
                last_layer: hi,
                selections,
                selection_pct: if total == 0 { 0.0 } else { 100.0 * selections as f64 / total as f64 },
                avg_raw_attention: avg(&raw_sum),
                avg_normalized_attention: avg(&norm_sum),
            })
        })
        .collect();
    let mut rounds: Vec<usize> = trace.iter().map(|r| r.round).collect();
    rounds.sort_unstable();
    rounds.dedup();
    Ok(LayerReport {
        num_layers,
        records: trace.len(),
        rounds: rounds.len(),
        strategies,
        tie_events,
        total_selections: total,
        layer_counts: counts,
        bands,
    })
}

/// Reads `selection_trace.jsonl` from a run directory and reports on it.
pub fn report_dir(run_dir: &Path) -> Result<LayerReport> {
    let path = run_dir.join(super::TRACE_FILE);
    if !path.is_file() {
        return Err(Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "selection trace not found"),
        });
    }
    layer_report(&read_jsonl(&path)?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl fmt::Display for LayerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} records over {} rounds, {} layers, strategy {}",
            self.records,
            self.rounds,
            self.num_layers,
            self.strategies.join(", ")
        )?;
        writeln!(f, "{:<8} {:>8} {:>12} {:>14} {:>14}", "band", "layers", "selected %", "avg raw attn", "avg norm attn")?;
        for b in &self.bands {
            writeln!(
                f,
                "{:<8} {:>8} {:>12.2} {:>14} {:>14}",
                b.band,
                format!("{}-{}", b.first_layer, b.last_layer),
                b.selection_pct,
                opt(b.avg_raw_attention),
                opt(b.avg_normalized_attention)
            )?;
        }
        write!(
            f,
            "{} selections, {} boundary ties; per layer: {:?}",
            self.total_selections, self.tie_events, self.layer_counts
        )
    }
}

pub fn write_report_csv(report: &LayerReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for b in &report.bands {
        w.serialize(b).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, mask: Vec<usize>, l: usize) -> TraceRecord {
        TraceRecord {
            round,
            client: 0,
            strategy: "safl(k=1)".into(),
            num_layers: l,
            mask,
            tie_at_boundary: false,
            raw_scores: Some((1..=l).map(|x| x as f64).collect()),
            normalized_scores: Some(vec![1.0 / l as f64; l]),
            num_examples: Some(4),
        }
    }

    #[test]
    fn bands_split_twelve_layers_in_threes() {
        let bands: Vec<usize> = (1..=12).map(|l| band_of(l, 12)).collect();
        assert_eq!(bands, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(band_of(1, 1), 0);
    }

    #[test]
    fn always_selected_layer_owns_its_band() {
        let trace: Vec<_> = (1..=20).map(|r| rec(r, vec![12], 12)).collect();
        let rep = layer_report(&trace).unwrap();
        assert_eq!(rep.bands[3].selection_pct, 100.0);
        assert_eq!(rep.bands[0].selection_pct, 0.0);
        assert_eq!(rep.bands[0].avg_raw_attention, Some(2.0));
        assert_eq!(rep.rounds, 20);
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(layer_report(&[]).is_err());
        assert!(matches!(report_dir(Path::new("/nonexistent")), Err(Error::Io { .. })));
    }
}

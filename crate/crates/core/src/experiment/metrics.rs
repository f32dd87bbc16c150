use std::io::Write;

use crate::error::Result;
use crate::federation::RoundMetrics;

pub const METRICS_HEADER: &str = "round,scale,accuracy,mean_loss,fusion_layer,snn_energy_joules,elapsed_ms";

/// One row per scale, then an `Avg.` row holding the mean over scales.
/// Energies use scientific notation (they are far below 1e-6 J); every
/// other real is fixed-point with six decimals.
pub fn format_rows(m: &RoundMetrics, record_wall_time: bool) -> Vec<String> {
    let fusion = m.fusion_layer.map(|l| l.to_string()).unwrap_or_default();
    let elapsed = if record_wall_time { m.elapsed_ms } else { 0.0 };
    let row = |scale: &str, acc: f64, loss: f64, energy: f64| {
        format!("{},{scale},{acc:.6},{loss:.6},{fusion},{energy:.6e},{elapsed:.6}", m.round)
    };
    let mut rows: Vec<String> = m
        .scales
        .iter()
        .map(|s| row(&format!("{:.6}", s.scale), s.accuracy, s.loss, s.snn_energy_joules))
        .collect();
    let n = m.scales.len() as f64;
    let mean = |f: fn(&crate::federation::ScaleMetrics) -> f64| m.scales.iter().map(f).sum::<f64>() / n;
    rows.push(row(
        "Avg.",
        mean(|s| s.accuracy),
        mean(|s| s.loss),
        mean(|s| s.snn_energy_joules),
    ));
    rows
}

/// CSV sink that writes the header before the first rows.
pub struct MetricsSink<W: Write> {
    out: W,
    header_written: bool,
    record_wall_time: bool,
}

impl<W: Write> MetricsSink<W> {
    pub fn new(out: W, record_wall_time: bool) -> Self {
        Self {
            out,
            header_written: false,
            record_wall_time,
        }
    }

    /// For appending to a file that already has its header.
    pub fn resume(out: W, record_wall_time: bool) -> Self {
        Self {
            out,
            header_written: true,
            record_wall_time,
        }
    }

    pub fn write_header(&mut self) -> Result<()> {
        if !self.header_written {
            writeln!(self.out, "{METRICS_HEADER}")?;
            self.header_written = true;
        }
        Ok(())
    }

    pub fn emit(&mut self, m: &RoundMetrics) -> Result<()> {
        self.write_header()?;
        for r in format_rows(m, self.record_wall_time) {
            writeln!(self.out, "{r}")?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn emit_metrics<W: Write>(m: &RoundMetrics, sink: &mut MetricsSink<W>) -> Result<()> {
    sink.emit(m)
}

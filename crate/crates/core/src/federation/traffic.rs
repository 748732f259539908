//! Communication-cost accounting.

/// Bytes moved over a run: one model transfer per round plus the style bank once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrafficLedger {
    pub model_bytes: u64,
    pub rounds: u64,
    pub style_bytes: u64,
    pub total_bytes: u64,
}

impl TrafficLedger {
    /// Cumulative bytes after `round` rounds (style bytes counted from the start).
    pub fn after_round(&self, round: u64) -> u64 {
        self.model_bytes * round + self.style_bytes
    }
}

pub fn traffic_report(rounds: u64, model_bytes: u64, style_bytes: u64) -> TrafficLedger {
    TrafficLedger { model_bytes, rounds, style_bytes, total_bytes: model_bytes * rounds + style_bytes }
}

/// Decimal size with one digit after the point, e.g. `2.5T`, `31.5G`, `84B`.
pub fn format_bytes(bytes: u64) -> String {
    const UNITS: [(&str, u64); 5] = [
        ("P", 1_000_000_000_000_000),
        ("T", 1_000_000_000_000),
        ("G", 1_000_000_000),
        ("M", 1_000_000),
        ("K", 1_000),
    ];
    for (unit, scale) in UNITS {
        if bytes >= scale {
            return format!("{:.1}{unit}", bytes as f64 / scale as f64);
        }
    }
    format!("{bytes}B")
}

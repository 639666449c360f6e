//! Timestamp conventions shared across the crate.
//!
//! All timestamps are signed nanoseconds. "Reference" time is the scenario's
//! single true timeline (zero at scenario start); "device" time is whatever a
//! sensor's skewed clock reads. Wall-clock-of-day only matters to rule
//! predicates, which see seconds since midnight derived from a scenario's
//! declared start-of-day.

/// Nanoseconds on either the reference or a device timeline.
pub type Nanos = i64;

pub const NS_PER_SEC: i64 = 1_000_000_000;
pub const NS_PER_MS: i64 = 1_000_000;

pub fn secs_to_ns(s: f64) -> Nanos {
    (s * NS_PER_SEC as f64).round() as Nanos
}

pub fn ns_to_secs(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_SEC as f64
}

/// Seconds since midnight for a reference timestamp, given the wall-clock
/// second-of-day at reference zero. Wraps modulo 24 h.
pub fn time_of_day_s(ref_ns: Nanos, start_of_day_s: f64) -> f64 {
    const DAY_S: f64 = 86_400.0;
    let t = start_of_day_s + ns_to_secs(ref_ns);
    t.rem_euclid(DAY_S)
}

/// Parses "HH:MM" or "HH:MM:SS" into seconds since midnight.
pub fn parse_clock(s: &str) -> Option<f64> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 && parts.len() != 3 {
        return None;
    }
    let h: u32 = parts[0].parse().ok()?;
    let m: u32 = parts[1].parse().ok()?;
    let sec: u32 = if parts.len() == 3 { parts[2].parse().ok()? } else { 0 };
    if h >= 24 || m >= 60 || sec >= 60 {
        return None;
    }
    Some(h as f64 * 3600.0 + m as f64 * 60.0 + sec as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_parsing() {
        assert_eq!(parse_clock("00:00"), Some(0.0));
        assert_eq!(parse_clock("21:55"), Some(78_900.0));
        assert_eq!(parse_clock("06:30:15"), Some(23_415.0));
        assert_eq!(parse_clock("24:00"), None);
        assert_eq!(parse_clock("12"), None);
        assert_eq!(parse_clock("12:60"), None);
    }

    #[test]
    fn time_of_day_wraps_past_midnight() {
        let start = parse_clock("23:59").unwrap();
        assert_eq!(time_of_day_s(0, start), 86_340.0);
        assert_eq!(time_of_day_s(60 * NS_PER_SEC, start), 0.0);
        assert_eq!(time_of_day_s(90 * NS_PER_SEC, start), 30.0);
    }

    #[test]
    fn ns_round_trip() {
        assert_eq!(secs_to_ns(1.5), 1_500_000_000);
        assert_eq!(ns_to_secs(250_000_000), 0.25);
    }
}

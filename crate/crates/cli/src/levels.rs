//! Parsing for the `--levels` flag: an inclusive range of fusion levels.

/// Accepts `"A..B"` (both ends inclusive) or a single level `"K"`.
pub fn parse(spec: &str) -> Result<(u8, u8), String> {
    let (lo, hi) = match spec.split_once("..") {
        Some((a, b)) => (parse_level(a)?, parse_level(b)?),
        None => {
            let k = parse_level(spec)?;
            (k, k)
        }
    };
    if lo > hi {
        return Err(format!("empty level range {spec:?}"));
    }
    Ok((lo, hi))
}

fn parse_level(s: &str) -> Result<u8, String> {
    match s.trim().parse::<u8>() {
        Ok(k) if k <= 3 => Ok(k),
        _ => Err(format!("levels are 0, 1, 2 or 3 (got {:?})", s.trim())),
    }
}

#[cfg(test)]
mod tests {
    use super::parse;

    #[test]
    fn ranges_and_single_levels() {
        assert_eq!(parse("0..3"), Ok((0, 3)));
        assert_eq!(parse("0..0"), Ok((0, 0)));
        assert_eq!(parse("2"), Ok((2, 2)));
        assert_eq!(parse(" 1 .. 2 "), Ok((1, 2)));
    }

    #[test]
    fn rejects_out_of_range_and_backwards() {
        assert!(parse("0..4").is_err());
        assert!(parse("3..1").is_err());
        assert!(parse("a..b").is_err());
        assert!(parse("").is_err());
    }
}

//! Number formatting shared by the CSV writers.

use crate::error::{Error, Result};

/// 17 significant digits, `.` decimal separator; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn formatting_round_trips_bits(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let back = parse_f64(&fmt_f64(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}

//! Text formatting for CSV artifacts: '.'-decimal, 17-significant-digit
//! floats so every f64 round-trips exactly through text.

use crate::error::{Error, Result};

/// Scientific notation with 17 significant digits (1 + 16 fractional).
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Input(format!("cannot parse float '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn floats_round_trip_exactly() {
        let mut rng = Rng::for_phase(1, "fmt");
        let mut cases = vec![0.0, -0.0, 1.0, -1.0, 0.1, 2.0 / 3.0, 1e-300, 1e300];
        for _ in 0..1000 {
            cases.push(rng.normal() * 10f64.powi((rng.below(40) as i32) - 20));
        }
        for v in cases {
            let back = parse_float(&format_float(v)).unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {}", format_float(v));
        }
    }
}

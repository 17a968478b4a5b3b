//! Text formatting for numeric output files.

/// Format with 9 significant digits in plain decimal, the convention for
/// every CSV this crate writes. Rounds via scientific notation, then lets
/// the standard shortest-roundtrip formatter print the rounded value.
pub fn sig9(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("rounded float reparses");
    format!("{rounded}")
}

/// Full-precision decimal round trip; `f64` Display is shortest-roundtrip.
pub fn full(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounds_to_nine_digits() {
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(123456789.123), "123456789");
        assert_eq!(sig9(0.5), "0.5");
        assert_eq!(sig9(-2.718281828459045), "-2.71828183");
        assert_eq!(sig9(0.0), "0");
    }

    #[test]
    fn full_round_trips() {
        for &x in &[0.1, -3.25e-17, 1.0 / 3.0, f64::MIN_POSITIVE, 12345.6789] {
            let s = full(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}

//! Fixed-precision number formatting shared by every report writer.

/// Six significant digits in plain decimal notation. Magnitudes outside
/// `[1e-6, 1e6)` fall back to scientific notation to keep fields short.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs();
    if !(1e-6..1e6).contains(&mag) {
        return format!("{x:.5e}");
    }
    // Round first so that e.g. 9.999996 picks the exponent of 10.0000.
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

/// `fmt6`, or `-` when the value is absent.
pub fn fmt6_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_owned(), fmt6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt6(100.0), "100.000");
        assert_eq!(fmt6(0.00123456789), "0.00123457");
        assert_eq!(fmt6(-2.5), "-2.50000");
        assert_eq!(fmt6(9.999996), "10.0000");
        assert_eq!(fmt6(123456789.0), "1.23457e8");
        assert_eq!(fmt6(999999.4), "999999");
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(1e-9), "1.00000e-9");
        assert_eq!(fmt6_opt(None), "-");
    }
}

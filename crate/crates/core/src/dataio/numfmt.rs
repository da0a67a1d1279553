/// Formats `x` with 9 significant digits, positional notation for moderate
/// exponents and scientific otherwise. Trailing zeros are trimmed.
///
/// Rounding is done once (by the `{:e}` formatter) and the digits are then
/// placed by hand, so the output never carries more than 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    if (-5..9).contains(&exp) {
        let body = if exp >= 0 {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                format!("{digits}{}", "0".repeat(int_len - digits.len()))
            } else {
                format!("{}.{}", &digits[..int_len], &digits[int_len..])
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
        };
        format!("{sign}{body}")
    } else {
        let frac = &digits[1..];
        if frac.is_empty() {
            format!("{sign}{}e{exp}", &digits[..1])
        } else {
            format!("{sign}{}.{frac}e{exp}", &digits[..1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_and_scientific() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(1234.5), "1234.5");
        assert_eq!(format_sig9(100.0), "100");
        assert_eq!(format_sig9(0.001), "0.001");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1.5e12), "1.5e12");
        assert_eq!(format_sig9(-2.25e-9), "-2.25e-9");
        assert_eq!(format_sig9(9.9999999996), "10");
    }

    #[test]
    fn round_trips_to_nine_digits() {
        for &x in &[std::f64::consts::PI, -1.0e-3 / 7.0, 6.02214076e23, 42.000000001] {
            let y: f64 = format_sig9(x).parse().unwrap();
            assert!(((x - y) / x).abs() < 1e-8, "{x} -> {y}");
        }
    }
}

//! Shared helpers for the line-oriented text formats used by codebook and
//! checkpoint files, and for fixed-precision CSV output.

/// 9 significant digits: enough for a lossless f32 round trip.
pub fn f32_sig9(v: f32) -> String {
    format!("{v:.8e}")
}

/// 6 significant digits for CSV reals.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let s = format!("{v:.5e}");
    // re-render small-exponent values in plain decimal
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let mut out = format!("{v:.decimals$}");
        if out.contains('.') {
            while out.ends_with('0') {
                out.pop();
            }
            if out.ends_with('.') {
                out.pop();
            }
        }
        out
    } else {
        s
    }
}

pub fn parse_floats(line: &str) -> Result<Vec<f32>, String> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f32>()
                .map_err(|e| format!("bad float {tok:?}: {e}"))
        })
        .collect()
}

/// Splits a `key: value` header line.
pub fn header_kv(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once(':')?;
    Some((k.trim(), v.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig6_plain_and_exponent() {
        assert_eq!(sig6(0.853244), "0.853244");
        assert_eq!(sig6(123456.0), "123456");
        assert_eq!(sig6(0.25), "0.25");
        assert_eq!(sig6(0.0), "0");
        assert!(sig6(1.25e-7).contains('e'));
    }

    proptest! {
        #[test]
        fn f32_nine_digits_roundtrip_bit_identical(bits in any::<u32>()) {
            let v = f32::from_bits(bits);
            prop_assume!(v.is_finite());
            let s = f32_sig9(v);
            let back: f32 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}

//! `%.9g`-style formatting. Manifest and embedding files print reals with
//! nine significant digits.

pub const SIG_DIGITS: usize = 9;

pub fn sig9(x: f64) -> String {
    format_sig(x, SIG_DIGITS)
}

/// The value a reader recovers after `sig9` formatting.
pub fn round_sig9(x: f64) -> f64 {
    sig9(x).parse().unwrap_or(x)
}

pub fn format_sig(x: f64, digits: usize) -> String {
    assert!(digits >= 1);
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        format!("{}e{}", trim_fraction(mantissa), exp)
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_owned()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

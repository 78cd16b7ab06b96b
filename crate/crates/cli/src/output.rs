//! `%.15e` number formatting for CSV and JSON.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

/// C-style `%.15e`: 15 fractional digits, signed exponent of at least two
/// digits. Non-finite values become the empty string.
pub fn sci(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    let s = format!("{v:.15e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}

pub fn sci_opt(v: Option<f64>) -> String {
    v.map(sci).unwrap_or_default()
}

/// Pretty JSON whose floats are written with [`sci`]; NaN and infinities are
/// written as `null` by the serializer.
struct SciFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(sci(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SciFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_c_format() {
        assert_eq!(sci(0.0), "0.000000000000000e+00");
        assert_eq!(sci(-1.5e-3), "-1.500000000000000e-03");
        assert_eq!(sci(123456.0), "1.234560000000000e+05");
        assert_eq!(sci(1e-300), "1.000000000000000e-300");
        assert_eq!(sci(f64::NAN), "");
    }

    #[test]
    fn json_floats_and_nan() {
        let v = serde_json::json!({"a": 0.25, "b": [1.0, -2.0], "n": 3});
        let text = String::from_utf8(to_json(&v).unwrap()).unwrap();
        assert!(text.contains("\"a\": 2.500000000000000e-01"));
        assert!(text.contains("-2.000000000000000e+00"));
        assert!(text.contains("\"n\": 3"));
        let text = String::from_utf8(to_json(&[f64::NAN]).unwrap()).unwrap();
        assert!(text.contains("null"));
    }
}

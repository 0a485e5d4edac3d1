//! File formats. Floats are written with 17 significant digits so that they
//! round-trip exactly; column order is fixed.

use std::fs;
use std::path::Path;

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;
use structgp::training::TrainTrace;

use crate::CliError;

/// `x` with 17 significant digits; `nan`, `inf` and `-inf` otherwise.
pub fn f17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn raw(x: f64) -> Option<Box<RawValue>> {
    x.is_finite().then(|| RawValue::from_string(f17(x)).expect("valid JSON number"))
}

/// Serializes an `f64` with 17 significant digits (`null` when not finite).
pub fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*x).serialize(s)
}

pub fn ser_opt<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    x.and_then(raw).serialize(s)
}

pub fn ser_vec<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
    x.iter().map(|&v| raw(v)).collect::<Vec<_>>().serialize(s)
}

pub fn ser_rows<S: Serializer>(x: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    x.iter().map(|r| r.iter().map(|&v| raw(v)).collect::<Vec<_>>()).collect::<Vec<_>>().serialize(s)
}

/// Provenance carried by every output file.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Stamp {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn csv_comment(&self) -> String {
        format!("# structgp {} config_hash={} seed={}\n", self.version, self.config_hash, self.seed)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write(path, &text)
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Run(format!("creating {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Run(format!("writing {}: {e}", path.display())))
}

/// `step,objective,sigma2,kernel_var,lengthscale_1..D,m`; `m` is empty when absent.
pub fn trace_csv(stamp: &Stamp, trace: &TrainTrace, dim: usize) -> String {
    let mut s = stamp.csv_comment();
    s.push_str("step,objective,sigma2,kernel_var");
    for d in 1..=dim {
        s.push_str(&format!(",lengthscale_{d}"));
    }
    s.push_str(",m\n");
    for r in &trace.rows {
        s.push_str(&format!("{},{},{},{}", r.step, f17(r.objective), f17(r.sigma2), f17(r.kernel_var)));
        for &l in &r.lengthscales {
            s.push(',');
            s.push_str(&f17(l));
        }
        s.push(',');
        if let Some(m) = r.m {
            s.push_str(&f17(m));
        }
        s.push('\n');
    }
    s
}

/// Header plus rows of floats.
pub fn table_csv(stamp: &Stamp, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = stamp.csv_comment();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in rows {
        s.push_str(&r.iter().map(|&v| f17(v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// File-name form of a method label, e.g. `BT-SGPR[B=10]` becomes `BT-SGPR_B10`.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        match c {
            '[' => s.push('_'),
            ']' | '=' => {}
            c if c.is_ascii_alphanumeric() || c == '-' || c == '.' => s.push(c),
            _ => s.push('_'),
        }
    }
    s.replace("alpha", "a")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 1.0] {
            let s = f17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17);
        }
        assert_eq!(f17(f64::NAN), "nan");
    }

    #[test]
    fn json_numbers_use_seventeen_digits() {
        #[derive(Serialize)]
        struct W {
            #[serde(serialize_with = "ser_f64")]
            a: f64,
            #[serde(serialize_with = "ser_opt")]
            b: Option<f64>,
            #[serde(serialize_with = "ser_vec")]
            c: Vec<f64>,
        }
        let t = serde_json::to_string(&W { a: 0.1, b: None, c: vec![f64::NAN, 2.0] }).unwrap();
        assert_eq!(t, r#"{"a":1.0000000000000001e-1,"b":null,"c":[null,2.0000000000000000e0]}"#);
        let v: serde_json::Value = serde_json::from_str(&t).unwrap();
        assert_eq!(v["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("BT-SGPR[B=10]"), "BT-SGPR_B10");
        assert_eq!(slug("T-PEP[alpha=0.5][B=4]"), "T-PEP_a0.5_B4");
    }
}

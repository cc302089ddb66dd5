use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};

/// Signed fixed-point format `Qm.n`: `m` integer bits including the sign,
/// `n` fraction bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QFormat {
    integer_bits: u32,
    fraction_bits: u32,
}

impl QFormat {
    pub fn new(integer_bits: u32, fraction_bits: u32) -> Result<Self> {
        if integer_bits == 0 || integer_bits + fraction_bits > 52 {
            return Err(Error::Validation(format!(
                "Q{integer_bits}.{fraction_bits} is not a usable format (need m ≥ 1 and m + n ≤ 52)"
            )));
        }
        Ok(Self {
            integer_bits,
            fraction_bits,
        })
    }

    pub fn integer_bits(self) -> u32 {
        self.integer_bits
    }

    pub fn fraction_bits(self) -> u32 {
        self.fraction_bits
    }

    pub fn step(self) -> f64 {
        (-(self.fraction_bits as f64)).exp2()
    }

    pub fn min(self) -> f64 {
        -((self.integer_bits - 1) as f64).exp2()
    }

    pub fn max(self) -> f64 {
        ((self.integer_bits - 1) as f64).exp2() - self.step()
    }

    /// Nearest multiple of the step, ties away from zero, saturated to the
    /// representable range. The flag reports saturation.
    pub fn quantize(self, x: f64) -> (f64, bool) {
        let scale = (self.fraction_bits as f64).exp2();
        let q = (x * scale).round() / scale;
        if q > self.max() {
            (self.max(), true)
        } else if q < self.min() {
            (self.min(), true)
        } else {
            (q, false)
        }
    }

    pub fn quantize_f32(self, x: f32) -> (f32, bool) {
        let (q, sat) = self.quantize(x as f64);
        (q as f32, sat)
    }
}

impl fmt::Display for QFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}.{}", self.integer_bits, self.fraction_bits)
    }
}

impl FromStr for QFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let body = s.strip_prefix(['Q', 'q']).unwrap_or(s);
        let (m, n) = body
            .split_once('.')
            .ok_or_else(|| Error::Validation(format!("expected a format like Q4.8, got {s:?}")))?;
        let parse = |v: &str| {
            v.parse::<u32>()
                .map_err(|_| Error::Validation(format!("expected a format like Q4.8, got {s:?}")))
        };
        QFormat::new(parse(m)?, parse(n)?)
    }
}

impl TryFrom<String> for QFormat {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QFormat> for String {
    fn from(q: QFormat) -> String {
        q.to_string()
    }
}

/// One row per quantized parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantRow {
    pub format: String,
    pub layer: usize,
    pub parameter: String,
    pub count: usize,
    pub saturated: usize,
    pub min: f32,
    pub max: f32,
    pub max_abs_error: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantReport {
    pub rows: Vec<QuantRow>,
}

impl QuantReport {
    pub fn saturated(&self) -> usize {
        self.rows.iter().map(|r| r.saturated).sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// Rounds every dense/conv weight and bias to `q`. Batchnorm parameters, if
/// any remain, are left in floating point.
pub fn quantize_weights(net: &Network, q: QFormat) -> Result<(Network, QuantReport)> {
    let mut out = net.clone();
    let mut report = QuantReport::default();
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        let tensors = match layer {
            Layer::Dense { weights, bias, .. } => [("weights", weights), ("bias", bias)],
            Layer::Conv2d { kernels, bias, .. } => [("kernels", kernels), ("bias", bias)],
            _ => continue,
        };
        for (name, t) in tensors {
            let (mut lo, mut hi, mut err, mut sat) = (f32::INFINITY, f32::NEG_INFINITY, 0f32, 0);
            for v in t.data_mut() {
                lo = lo.min(*v);
                hi = hi.max(*v);
                let (qv, s) = q.quantize_f32(*v);
                err = err.max((qv - *v).abs());
                sat += s as usize;
                *v = qv;
            }
            report.rows.push(QuantRow {
                format: q.to_string(),
                layer: i,
                parameter: name.into(),
                count: t.len(),
                saturated: sat,
                min: lo,
                max: hi,
                max_abs_error: err,
            });
        }
    }
    Ok((out, report))
}

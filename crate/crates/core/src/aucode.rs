//! Action-Unit expression codes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// AU count used when a model does not configure one.
pub const DEFAULT_AU_COUNT: usize = 17;

/// Entries this far outside `[0, 1]` are clamped instead of rejected.
pub const RANGE_TOLERANCE: f64 = 1e-9;

/// Scale of raw detector intensities; annotations are divided by this.
pub const RAW_INTENSITY_MAX: f64 = 5.0;

/// Expression code: one intensity in `[0, 1]` per Action Unit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuVector(Vec<f64>);

impl AuVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with entry `index` set to `value` (validated).
    pub fn with_entry(&self, index: usize, value: f64) -> Result<Self> {
        if index >= self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: index + 1,
            });
        }
        let mut v = self.0.clone();
        v[index] = value;
        validate_au(&v, self.len())
    }

    pub fn mean_abs_diff(&self, other: &AuVector) -> Result<f64> {
        check_same_len(self, other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.len().max(1) as f64)
    }
}

impl fmt::Display for AuVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| format!("{v}")).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

fn check_same_len(x: &AuVector, y: &AuVector) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

/// Checks length and range; entries within [`RANGE_TOLERANCE`] of the
/// interval are clamped onto it.
pub fn validate_au(raw: &[f64], n_expected: usize) -> Result<AuVector> {
    if raw.len() != n_expected {
        return Err(Error::DimensionMismatch {
            expected: n_expected,
            got: raw.len(),
        });
    }
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&v) {
                Err(Error::Range(format!("AU entry {i} = {v} outside [0, 1]")))
            } else {
                Ok(v.clamp(0.0, 1.0))
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(AuVector)
}

/// `(1 - alpha) * x + alpha * y`, element-wise.
pub fn interpolate_au(x: &AuVector, y: &AuVector, alpha: f64) -> Result<AuVector> {
    check_same_len(x, y)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range(format!("alpha = {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    if alpha == 1.0 {
        return Ok(y.clone());
    }
    let v: Vec<f64> =
        x.0.iter()
            .zip(&y.0)
            .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
            .collect();
    validate_au(&v, x.len())
}

/// Named expressions with shipped presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Expression {
    Anger,
    Disgust,
    Fear,
    Happy,
    Sad,
    Surprise,
    Neutral,
}

impl Expression {
    pub const ALL: [Expression; 7] = [
        Expression::Anger,
        Expression::Disgust,
        Expression::Fear,
        Expression::Happy,
        Expression::Sad,
        Expression::Surprise,
        Expression::Neutral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Expression::Anger => "anger",
            Expression::Disgust => "disgust",
            Expression::Fear => "fear",
            Expression::Happy => "happy",
            Expression::Sad => "sad",
            Expression::Surprise => "surprise",
            Expression::Neutral => "neutral",
        }
    }
}

impl FromStr for Expression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Expression::ALL
            .into_iter()
            .find(|e| e.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownExpression(s.to_string()))
    }
}

/// Expression presets table: header `expression,au_1,...,au_N`, one row per
/// expression, values already scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct PresetTable {
    n_au: usize,
    rows: BTreeMap<String, AuVector>,
}

impl PresetTable {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPresetFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Csv("empty presets file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"expression") {
            return Err(Error::Csv(format!(
                "presets header must start with `expression`: {header}"
            )));
        }
        for (i, c) in cols[1..].iter().enumerate() {
            if *c != format!("au_{}", i + 1) {
                return Err(Error::Csv(format!("unexpected presets column {c:?}")));
            }
        }
        let n_au = cols.len() - 1;
        let mut rows = BTreeMap::new();
        for line in lines {
            let mut fields = line.split(',').map(str::trim);
            let name = fields.next().unwrap_or_default().to_ascii_lowercase();
            let vals = fields
                .map(|f| f.parse::<f64>().map_err(|e| Error::Csv(format!("{name}: {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.insert(name, validate_au(&vals, n_au)?);
        }
        Ok(Self { n_au, rows })
    }

    pub fn n_au(&self) -> usize {
        self.n_au
    }

    pub fn get(&self, expression: Expression) -> Result<AuVector> {
        if expression == Expression::Neutral {
            return Ok(AuVector::zeros(self.n_au));
        }
        self.rows
            .get(expression.name())
            .cloned()
            .ok_or_else(|| Error::Csv(format!("presets file has no row for {}", expression.name())))
    }
}

/// Looks up a named expression in the presets file at `presets`.
pub fn preset_expression(name: &str, presets: &Path) -> Result<AuVector> {
    let expression: Expression = name.parse()?;
    PresetTable::load(presets)?.get(expression)
}

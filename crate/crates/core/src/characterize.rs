//! Per-layer compute and memory accounting.

use serde::{Deserialize, Serialize};

use crate::cronet::{layer_plan, LayerOp, ModelConfig, Size, TABLE_V1};
use crate::error::{Error, Result};
use crate::numerics::ElemType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerChar {
    pub network: String,
    pub name: String,
    pub kind: String,
    pub parameter_count: u64,
    pub macs: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTotals {
    pub parameter_count: u64,
    pub macs: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharReport {
    pub model: String,
    pub size: Size,
    pub etype: ElemType,
    pub layers: Vec<LayerChar>,
    pub totals: CharTotals,
}

impl CharReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Parameterized layers only: pooling, activation and the join carry no
/// parameters and no MACs. Activation bytes count each layer's output
/// tensor once.
pub fn characterize(cfg: &ModelConfig, size: Size, etype: ElemType) -> Result<CharReport> {
    let bytes = etype.size_bytes();
    let mut layers = Vec::new();
    for l in layer_plan(cfg, size)? {
        let params = l.op.params();
        if params == 0 {
            continue;
        }
        let out_elems: u64 = match &l.op {
            LayerOp::Rnn(p) => (p.seq_len * p.hidden_size) as u64,
            _ => l.out_shape.iter().product::<usize>() as u64,
        };
        let weight_bytes = params * bytes;
        let activation_bytes = out_elems * bytes;
        layers.push(LayerChar {
            network: l.network.clone(),
            name: l.name.clone(),
            kind: l.op.kind_name().into(),
            parameter_count: params,
            macs: l.op.macs(),
            weight_bytes,
            activation_bytes,
            total_bytes: weight_bytes + activation_bytes,
        });
    }
    let mut totals = CharTotals::default();
    for l in &layers {
        totals.parameter_count += l.parameter_count;
        totals.macs += l.macs;
        totals.weight_bytes += l.weight_bytes;
        totals.activation_bytes += l.activation_bytes;
        totals.total_bytes += l.total_bytes;
    }
    Ok(CharReport { model: cfg.name.clone(), size, etype, layers, totals })
}

/// Human-readable count: `288`, `9.2K`, `27.6M`.
pub fn human(v: f64, unit: &str) -> String {
    if v >= 1e6 {
        format!("{:.1}M{unit}", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}K{unit}", v / 1e3)
    } else {
        format!("{v:.0}{unit}")
    }
}

/// Side-by-side table over several sizes of the same model.
pub fn render_table(reports: &[CharReport]) -> String {
    let mut out = String::new();
    let mut head = format!("{:<8} {:<16} {:>8}", "network", "layer", "params");
    for r in reports {
        head += &format!(" | {:>9} {:>9}", format!("{} MACs", r.size), "A+W");
    }
    out += &head;
    out.push('\n');
    let Some(first) = reports.first() else { return out };
    for (i, l) in first.layers.iter().enumerate() {
        let mut line = format!("{:<8} {:<16} {:>8}", l.network, l.name, human(l.parameter_count as f64, ""));
        for r in reports {
            let x = &r.layers[i];
            line += &format!(" | {:>9} {:>9}", human(x.macs as f64, ""), human(x.total_bytes as f64, "B"));
        }
        out += &line;
        out.push('\n');
    }
    let mut line = format!("{:<8} {:<16} {:>8}", "", "total", human(first.totals.parameter_count as f64, ""));
    for r in reports {
        line += &format!(" | {:>9} {:>9}", human(r.totals.macs as f64, ""), human(r.totals.total_bytes as f64, "B"));
    }
    out += &line;
    out.push('\n');
    out
}

/// A number as printed in a table, e.g. `4.6K` or `1.3MB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Printed {
    pub value: f64,
    /// Half a unit in the last printed place.
    pub half_ulp: f64,
}

impl Printed {
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let t = t.strip_suffix('B').unwrap_or(t);
        let (num, scale) = match t.chars().last() {
            Some('K') => (&t[..t.len() - 1], 1e3),
            Some('M') => (&t[..t.len() - 1], 1e6),
            _ => (t, 1.0),
        };
        let value: f64 = num.parse().map_err(|_| Error::Parse(format!("bad table value `{s}`")))?;
        let decimals = num.split_once('.').map_or(0, |(_, f)| f.len()) as i32;
        Ok(Printed { value: value * scale, half_ulp: 0.5 * 10f64.powi(-decimals) * scale })
    }

    /// Whether `x` prints as this value.
    pub fn matches(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.half_ulp
    }

    pub fn rel_err(&self, x: f64) -> f64 {
        (x - self.value).abs() / self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLayer {
    pub network: String,
    pub kind: String,
    pub params: String,
    pub macs: Vec<String>,
    pub memory: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTotal {
    pub params: String,
    pub macs: Vec<String>,
    pub memory: Vec<String>,
}

/// Published characterization targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub sizes: Vec<String>,
    pub layer: Vec<TargetLayer>,
    pub total: TargetTotal,
}

impl Targets {
    pub fn shipped() -> Self {
        Self::from_toml(TABLE_V1).expect("shipped targets parse")
    }

    pub fn from_toml(doc: &str) -> Result<Self> {
        let t: Self = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        for l in &t.layer {
            Printed::parse(&l.params)?;
            if l.macs.len() != t.sizes.len() || l.memory.len() != t.sizes.len() {
                return Err(Error::Parse(format!("{} {}: one value per size expected", l.network, l.kind)));
            }
            for v in l.macs.iter().chain(&l.memory) {
                Printed::parse(v)?;
            }
        }
        Ok(t)
    }

    pub fn sizes(&self) -> Result<Vec<Size>> {
        self.sizes.iter().map(|s| s.parse()).collect()
    }
}

/// One comparison against a published value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub what: String,
    pub expected: String,
    pub actual: f64,
    pub rel_err: f64,
    pub pass: bool,
}

/// Tolerances used by [`compare`].
pub const MAC_TOL: f64 = 0.10;
pub const MEM_TOL: f64 = 0.15;

/// Parameters must print identically; MACs (per layer and total) within
/// [`MAC_TOL`]; total memory within [`MEM_TOL`].
pub fn compare(cfg: &ModelConfig, targets: &Targets) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut check = |what: String, expected: &str, actual: f64, tol: Option<f64>| -> Result<()> {
        let p = Printed::parse(expected)?;
        let rel_err = p.rel_err(actual);
        let pass = match tol {
            None => p.matches(actual),
            Some(t) => rel_err <= t,
        };
        checks.push(Check { what, expected: expected.into(), actual, rel_err, pass });
        Ok(())
    };
    for (si, size) in targets.sizes()?.into_iter().enumerate() {
        let r = characterize(cfg, size, ElemType::Bf16)?;
        if r.layers.len() != targets.layer.len() {
            return Err(Error::InvalidParams(format!(
                "model has {} parameterized layers, targets list {}",
                r.layers.len(),
                targets.layer.len()
            )));
        }
        for (l, t) in r.layers.iter().zip(&targets.layer) {
            if si == 0 {
                check(format!("{} params", l.name), &t.params, l.parameter_count as f64, None)?;
            }
            check(format!("{} MACs @{size}", l.name), &t.macs[si], l.macs as f64, Some(MAC_TOL))?;
        }
        check(format!("total params @{size}"), &targets.total.params, r.totals.parameter_count as f64, None)?;
        check(format!("total MACs @{size}"), &targets.total.macs[si], r.totals.macs as f64, Some(MAC_TOL))?;
        check(format!("total memory @{size}"), &targets.total.memory[si], r.totals.total_bytes as f64, Some(MEM_TOL))?;
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_values() {
        let p = Printed::parse("4.6K").unwrap();
        assert_eq!(p.value, 4600.0);
        assert!((p.half_ulp - 50.0).abs() < 1e-9);
        assert!(p.matches(4608.0));
        assert!(!p.matches(4700.0));
        let p = Printed::parse("1.3MB").unwrap();
        assert_eq!(p.value, 1.3e6);
        assert!(Printed::parse("288").unwrap().matches(288.0));
        assert!(!Printed::parse("288").unwrap().matches(289.0));
        assert!(Printed::parse("abc").is_err());
    }

    #[test]
    fn linear_layer_accounting() {
        let r = characterize(&ModelConfig::shipped(), Size::SMALL, ElemType::Bf16).unwrap();
        let fc = r.layers.iter().find(|l| l.name == "trunk.fc1").unwrap();
        assert_eq!(fc.macs, fc.parameter_count);
        assert_eq!(fc.weight_bytes, 2 * 192_192);
    }

    #[test]
    fn totals_are_sums() {
        let r = characterize(&ModelConfig::shipped(), Size::LARGE, ElemType::Bf16).unwrap();
        assert_eq!(r.totals.total_bytes, r.totals.weight_bytes + r.totals.activation_bytes);
        assert_eq!(r.totals.macs, r.layers.iter().map(|l| l.macs).sum::<u64>());
    }
}

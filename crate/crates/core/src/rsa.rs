//! Representational similarity analysis.
//!
//! RSA between two token-level representations of one sample is the Pearson
//! correlation of the strictly-upper-triangular entries of their Gram matrices.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Strictly-upper-triangular entries of `H·Hᵀ`, row-major.
pub fn gram_upper(h: &Matrix) -> Result<Vec<f64>> {
    let n = h.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!("Gram upper triangle needs at least 2 rows, got {n}")));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let ri = h.row(i);
        for j in i + 1..n {
            out.push(ri.iter().zip(h.row(j)).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// Centered correlation coefficient, clamped to `[-1, 1]` against rounding.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "pearson",
            lhs: (u.len(), 1),
            rhs: (v.len(), 1),
        });
    }
    if u.len() < 2 {
        return Err(Error::Degenerate(format!("correlation needs at least 2 entries, got {}", u.len())));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    // relative threshold so vectors that are constant up to rounding count as constant
    let tiny = |ss: f64, mean: f64| ss <= (1e-24 * n * mean * mean).max(f64::MIN_POSITIVE);
    if tiny(suu, mu) || tiny(svv, mv) {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

/// `pearson(gram_upper(h1), gram_upper(h2))`; widths may differ.
pub fn rsa(h1: &Matrix, h2: &Matrix) -> Result<f64> {
    if h1.rows() != h2.rows() {
        return Err(Error::Dimension {
            op: "rsa",
            lhs: h1.shape(),
            rhs: h2.shape(),
        });
    }
    pearson(&gram_upper(h1)?, &gram_upper(h2)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        })
    }
}

/// Activations captured at one adapted layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    /// 1-based over all adapted layers: encoder layers first, then decoder.
    pub layer: usize,
    pub side: Side,
    /// Adapter input (residual stream).
    pub h: Matrix,
    /// Adapter delta before the residual add.
    pub ha: Matrix,
    /// Final output of the encoder or decoder stack.
    pub htilde: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleActivations {
    pub sample: usize,
    pub layers: Vec<LayerActivations>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ActivationDump {
    /// Number of adapted layers on the encoder side; later layers are decoder layers.
    pub encoder_layers: usize,
    pub samples: Vec<SampleActivations>,
}

const ENCODER_LAYERS_RECORD: &str = "dump/meta/encoder_layers";

impl ActivationDump {
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            for l in &s.layers {
                if l.h.shape() != l.ha.shape() || l.h.shape() != l.htilde.shape() {
                    return Err(Error::Contract(format!(
                        "sample {} layer {}: H {:?}, Ha {:?}, Htilde {:?}",
                        s.sample,
                        l.layer,
                        l.h.shape(),
                        l.ha.shape(),
                        l.htilde.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![(ENCODER_LAYERS_RECORD.to_owned(), Matrix::scalar(self.encoder_layers as f64))];
        for s in &self.samples {
            for l in &s.layers {
                for (tag, m) in [("H", &l.h), ("Ha", &l.ha), ("Htilde", &l.htilde)] {
                    out.push((format!("dump/sample{}/layer{}/{tag}", s.sample, l.layer), m.clone()));
                }
            }
        }
        out
    }

    pub fn from_records(records: &[(String, Matrix)]) -> Result<Self> {
        let mut encoder_layers = None;
        type Parts = (Option<Matrix>, Option<Matrix>, Option<Matrix>);
        let mut parts: BTreeMap<(usize, usize), Parts> = BTreeMap::new();
        for (name, m) in records {
            if name == ENCODER_LAYERS_RECORD {
                encoder_layers = Some(m.get(0, 0) as usize);
                continue;
            }
            let bad = || Error::Checkpoint(format!("unexpected dump record {name}"));
            let rest = name.strip_prefix("dump/sample").ok_or_else(bad)?;
            let (sample, rest) = rest.split_once("/layer").ok_or_else(bad)?;
            let (layer, tag) = rest.split_once('/').ok_or_else(bad)?;
            let key = (sample.parse().map_err(|_| bad())?, layer.parse().map_err(|_| bad())?);
            let entry = parts.entry(key).or_default();
            match tag {
                "H" => entry.0 = Some(m.clone()),
                "Ha" => entry.1 = Some(m.clone()),
                "Htilde" => entry.2 = Some(m.clone()),
                _ => return Err(bad()),
            }
        }
        let encoder_layers =
            encoder_layers.ok_or_else(|| Error::Checkpoint(format!("missing record {ENCODER_LAYERS_RECORD}")))?;
        let mut samples: Vec<SampleActivations> = Vec::new();
        for ((sample, layer), (h, ha, htilde)) in parts {
            let missing = |t: &str| Error::Checkpoint(format!("sample {sample} layer {layer}: missing {t}"));
            let acts = LayerActivations {
                layer,
                side: if layer <= encoder_layers { Side::Encoder } else { Side::Decoder },
                h: h.ok_or_else(|| missing("H"))?,
                ha: ha.ok_or_else(|| missing("Ha"))?,
                htilde: htilde.ok_or_else(|| missing("Htilde"))?,
            };
            match samples.last_mut() {
                Some(s) if s.sample == sample => s.layers.push(acts),
                _ => samples.push(SampleActivations {
                    sample,
                    layers: vec![acts],
                }),
            }
        }
        let dump = Self { encoder_layers, samples };
        dump.validate()?;
        Ok(dump)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaRow {
    pub layer: usize,
    pub side: Side,
    pub rsa_ha_h_mean: f64,
    pub rsa_ha_h_std: f64,
    pub rsa_ha_htilde_mean: f64,
    pub rsa_ha_htilde_std: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RsaReport {
    pub rows: Vec<RsaRow>,
}

impl RsaReport {
    /// Mean over layers of `(RSA(h_a, h), RSA(h_a, h̃))`.
    pub fn layer_means(&self) -> (f64, f64) {
        let k = self.rows.len().max(1) as f64;
        (
            self.rows.iter().map(|r| r.rsa_ha_h_mean).sum::<f64>() / k,
            self.rows.iter().map(|r| r.rsa_ha_htilde_mean).sum::<f64>() / k,
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report(e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-layer RSA(h_a, h) and RSA(h_a, h̃) statistics over the samples of `dump`.
///
/// A sample is skipped for a layer when either correlation is undefined.
/// Every layer needs at least two usable samples.
pub fn rsa_profile(dump: &ActivationDump) -> Result<RsaReport> {
    dump.validate()?;
    let mut per_layer: BTreeMap<usize, (Side, Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for s in &dump.samples {
        for l in &s.layers {
            let entry = per_layer.entry(l.layer).or_insert((l.side, Vec::new(), Vec::new(), 0));
            match (rsa(&l.ha, &l.h), rsa(&l.ha, &l.htilde)) {
                (Ok(a), Ok(b)) => {
                    entry.1.push(a);
                    entry.2.push(b);
                }
                (Err(Error::UndefinedCorrelation(_) | Error::Degenerate(_)), _)
                | (_, Err(Error::UndefinedCorrelation(_) | Error::Degenerate(_))) => entry.3 += 1,
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
    }
    if per_layer.is_empty() {
        return Err(Error::Report("activation dump is empty".into()));
    }
    let mut rows = Vec::with_capacity(per_layer.len());
    for (layer, (side, to_h, to_htilde, skipped)) in per_layer {
        if to_h.len() < 2 {
            return Err(Error::Report(format!(
                "layer {layer}: only {} usable samples ({skipped} skipped)",
                to_h.len()
            )));
        }
        let (hm, hs) = mean_std(&to_h);
        let (tm, ts) = mean_std(&to_htilde);
        rows.push(RsaRow {
            layer,
            side,
            rsa_ha_h_mean: hm,
            rsa_ha_h_std: hs,
            rsa_ha_htilde_mean: tm,
            rsa_ha_htilde_std: ts,
            n_used: to_h.len(),
            n_skipped: skipped,
        });
    }
    Ok(RsaReport { rows })
}

//! Closed-form trainable-parameter counts for MixPHM and the adapter baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phm::PhmConfig;

/// `2·L·d_k·(d + d_r)·(N_e + 1) + n³` for `2L` mixtures (L encoder + L decoder blocks).
pub fn mixphm_param_count(layers: usize, n_experts: usize, d: usize, d_r: usize, d_k: usize, n: usize) -> Result<u64> {
    PhmConfig::new(n, d, d_r, d_k)?;
    if layers == 0 || n_experts == 0 {
        return Err(Error::Config(format!(
            "need L ≥ 1 and N_e ≥ 1, got L={layers}, N_e={n_experts}"
        )));
    }
    let (l, ne, d, d_r, d_k, n) = (layers as u64, n_experts as u64, d as u64, d_r as u64, d_k as u64, n as u64);
    Ok(2 * l * d_k * (d + d_r) * (ne + 1) + n * n * n)
}

/// Dense mixture of plain adapters: `4·L·N_e·d·d_r`.
pub fn dense_moe_param_count(layers: usize, n_experts: usize, d: usize, d_r: usize) -> u64 {
    4 * (layers * n_experts * d * d_r) as u64
}

/// Weight-decomposition / weight-sharing switches of a MixPHM variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    /// PHM (Kronecker) decomposition of each projection.
    pub d1: bool,
    /// Low-rank factorization of each PHM block.
    pub d2: bool,
    pub share_s: bool,
    pub share_down: bool,
    pub share_up: bool,
}

impl VariantFlags {
    pub const FULL: VariantFlags = VariantFlags {
        d1: true,
        d2: true,
        share_s: true,
        share_down: true,
        share_up: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Houlsby,
    Pfeiffer,
    Compacter,
    Lora,
    AdaMix,
    MixPhm(VariantFlags),
}

impl FromStr for Method {
    type Err = Error;

    /// `houlsby | pfeiffer | compacter | lora | adamix | mixphm | mixphm:<flags>`,
    /// where `<flags>` is a comma list drawn from `d1,d2,s,dn,up`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "houlsby" => Method::Houlsby,
            "pfeiffer" => Method::Pfeiffer,
            "compacter" => Method::Compacter,
            "lora" => Method::Lora,
            "adamix" => Method::AdaMix,
            "mixphm" => Method::MixPhm(VariantFlags::FULL),
            other => {
                let flags = other
                    .strip_prefix("mixphm:")
                    .ok_or_else(|| Error::UnknownMethod(other.to_owned()))?;
                let mut v = VariantFlags {
                    d1: false,
                    d2: false,
                    share_s: false,
                    share_down: false,
                    share_up: false,
                };
                for f in flags.split(',').filter(|f| !f.is_empty()) {
                    match f {
                        "d1" => v.d1 = true,
                        "d2" => v.d2 = true,
                        "s" => v.share_s = true,
                        "dn" => v.share_down = true,
                        "up" => v.share_up = true,
                        _ => return Err(Error::UnknownMethod(other.to_owned())),
                    }
                }
                Method::MixPhm(v)
            }
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Houlsby => f.write_str("houlsby"),
            Method::Pfeiffer => f.write_str("pfeiffer"),
            Method::Compacter => f.write_str("compacter"),
            Method::Lora => f.write_str("lora"),
            Method::AdaMix => f.write_str("adamix"),
            Method::MixPhm(v) if *v == VariantFlags::FULL => f.write_str("mixphm"),
            Method::MixPhm(v) => {
                let names: Vec<&str> = [
                    (v.d1, "d1"),
                    (v.d2, "d2"),
                    (v.share_s, "s"),
                    (v.share_down, "dn"),
                    (v.share_up, "up"),
                ]
                .into_iter()
                .filter_map(|(on, name)| on.then_some(name))
                .collect();
                write!(f, "mixphm:{}", names.join(","))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditDims {
    /// Blocks per stack (encoder and decoder each have `layers`).
    pub layers: usize,
    pub d: usize,
    pub d_r: usize,
    pub n: usize,
    pub d_k: usize,
    /// LoRA rank.
    pub r: usize,
    pub n_experts: usize,
}

impl AuditDims {
    pub fn canonical() -> Self {
        Self {
            layers: 12,
            d: 768,
            d_r: 64,
            n: 4,
            d_k: 8,
            r: 4,
            n_experts: 4,
        }
    }
}

/// Analytical trainable-parameter count of `method`, biases excluded.
///
/// Placement follows each method's usual recipe on an L+L encoder-decoder:
/// Pfeiffer puts one adapter after every feed-forward sublayer, Houlsby two per
/// block, Compacter is Houlsby-placed with PHM rank-`d_k` factors and a shared
/// rule tensor, LoRA adapts query and value of every self- and cross-attention,
/// AdaMix is a Pfeiffer-placed mixture of `N_e` dense adapters.
pub fn baseline_param_count(method: Method, dims: &AuditDims) -> Result<u64> {
    let AuditDims {
        layers,
        d,
        d_r,
        n,
        d_k,
        r,
        n_experts,
    } = *dims;
    let blocks = 2 * layers as u64;
    let (d, d_r, n, d_k, r, ne) = (d as u64, d_r as u64, n as u64, d_k as u64, r as u64, n_experts as u64);
    let adapter = 2 * d * d_r;
    Ok(match method {
        Method::Pfeiffer => blocks * adapter,
        Method::Houlsby => blocks * 2 * adapter,
        Method::AdaMix => blocks * ne * adapter,
        Method::Compacter => {
            PhmConfig::new(n as usize, d as usize, d_r as usize, d_k as usize)?;
            blocks * 2 * 2 * d_k * (d + d_r) + n * n * n
        }
        Method::Lora => {
            // encoder blocks: q,v of self-attention; decoder blocks: q,v of self- and cross-attention
            let matrices = 2 * layers as u64 + 4 * layers as u64;
            matrices * r * (d + d)
        }
        Method::MixPhm(v) => {
            if v == VariantFlags::FULL {
                return mixphm_param_count(layers, n_experts, d as usize, d_r as usize, d_k as usize, n as usize);
            }
            if v.d1 || v.d2 {
                PhmConfig::new(
                    if v.d1 { n as usize } else { 1 },
                    d as usize,
                    d_r as usize,
                    if v.d2 { d_k as usize } else { 1 },
                )?;
            }
            let projection = match (v.d1, v.d2) {
                (true, true) | (false, true) => d_k * (d + d_r),
                (true, false) => d * d_r / n,
                (false, false) => d * d_r,
            };
            let copies = |shared: bool| if shared { 1 } else { ne };
            let per_block = (copies(v.share_down) + copies(v.share_up)) * projection;
            let rules = match (v.d1, v.share_s) {
                (false, _) => 0,
                (true, true) => n * n * n,
                (true, false) => blocks * ne * n * n * n,
            };
            blocks * per_block + rules
        }
    })
}

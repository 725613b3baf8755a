//! Closed-form communication volume and overlap makespan models.
//!
//! Volumes are exact rationals in units of `N·d` scalars, averaged per
//! worker. The runtime's counters divided by `P·N·d` land on the finite-`P`
//! form [`comm_volume_finite`], which tends to [`comm_volume`] as `P` grows.

use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ratio_to_f64;

pub type Volume = Ratio<u64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommStrategy {
    DistFlashAttn,
    MegatronTP,
}

impl FromStr for CommStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "distflashattn" | "distflash" => Ok(CommStrategy::DistFlashAttn),
            "megatrontp" | "megatron" => Ok(CommStrategy::MegatronTP),
            _ => Err(Error::config(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommScenario {
    pub n: u64,
    pub d: u64,
    pub p: u64,
    pub causal: bool,
    /// Key/value heads over query heads.
    pub kv_ratio: Ratio<u64>,
    pub with_checkpoint_recompute: bool,
    pub strategy: CommStrategy,
}

impl CommScenario {
    pub fn new(strategy: CommStrategy, n: u64, d: u64, p: u64) -> Self {
        CommScenario {
            n,
            d,
            p,
            causal: true,
            kv_ratio: Ratio::from_integer(1),
            with_checkpoint_recompute: true,
            strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.p == 0 {
            return Err(Error::config(format!("N, d, P must be positive: {self:?}")));
        }
        if *self.kv_ratio.numer() == 0 || self.kv_ratio > Ratio::from_integer(1) {
            return Err(Error::config(format!(
                "kv ratio {} outside (0, 1]",
                self.kv_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommVolume {
    pub forward: Volume,
    pub backward: Volume,
}

impl CommVolume {
    pub fn total(&self) -> Volume {
        self.forward + self.backward
    }

    /// Total in scalars for the scenario's `N·d`.
    pub fn scalars(&self, s: &CommScenario) -> Ratio<u64> {
        self.total() * Ratio::from_integer(s.n * s.d)
    }
}

fn megatron(s: &CommScenario) -> CommVolume {
    // six all-gathers and four reduce-scatters of N/P × d per worker, plus
    // four more all-gathers when the forward is rerun for checkpointing
    let forward = 4 + if s.with_checkpoint_recompute { 4 } else { 0 };
    CommVolume {
        forward: Ratio::from_integer(forward),
        backward: Ratio::from_integer(6),
    }
}

fn dist_flash(s: &CommScenario, fraction: Ratio<u64>) -> CommVolume {
    // each key/value pair is 2 chunks; causal masking skips half the pairs
    let pairs = if s.causal {
        Ratio::from_integer(1)
    } else {
        Ratio::from_integer(2)
    };
    let forward = pairs * fraction * s.kv_ratio;
    // keys and values are fetched again and their gradients returned
    CommVolume {
        forward,
        backward: forward * 2,
    }
}

/// Large-`P` volume in units of `N·d`.
pub fn comm_volume(s: &CommScenario) -> Result<CommVolume> {
    s.validate()?;
    Ok(match s.strategy {
        CommStrategy::DistFlashAttn => dist_flash(s, Ratio::from_integer(1)),
        CommStrategy::MegatronTP => megatron(s),
    })
}

/// Volume at the scenario's `P`: only `(P-1)/P` of chunks leave their owner.
pub fn comm_volume_finite(s: &CommScenario) -> Result<CommVolume> {
    s.validate()?;
    Ok(match s.strategy {
        CommStrategy::DistFlashAttn => dist_flash(s, Ratio::new(s.p - 1, s.p)),
        CommStrategy::MegatronTP => megatron(s),
    })
}

/// Parses `"0.25"`, `"1"` or `"8/32"` exactly.
pub fn parse_ratio(text: &str) -> Result<Ratio<u64>> {
    let bad = || Error::config(format!("cannot parse {text:?} as a ratio"));
    let t = text.trim();
    if t.contains('/') {
        let r: Ratio<u64> = t.parse().map_err(|_| bad())?;
        return Ok(r);
    }
    let (whole, frac) = t.split_once('.').unwrap_or((t, ""));
    if whole.is_empty() && frac.is_empty()
        || !frac.bytes().all(|b| b.is_ascii_digit())
        || frac.len() > 18
    {
        return Err(bad());
    }
    let whole: u64 = if whole.is_empty() {
        0
    } else {
        whole.parse().map_err(|_| bad())?
    };
    let scale = 10u64.pow(frac.len() as u32);
    let frac: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().map_err(|_| bad())?
    };
    let numer = whole
        .checked_mul(scale)
        .and_then(|w| w.checked_add(frac))
        .ok_or_else(bad)?;
    Ok(Ratio::new(numer, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScenario {
    /// Number of steps.
    pub t: u64,
    /// Compute per step.
    pub c: f64,
    /// Fetch per step.
    pub m: f64,
    /// The first step works on local data and needs no fetch.
    pub first_step_local: bool,
}

impl OverlapScenario {
    pub fn new(t: u64, c: f64, m: f64) -> Self {
        OverlapScenario {
            t,
            c,
            m,
            first_step_local: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::config("need at least one step"));
        }
        if !(self.c.is_finite() && self.m.is_finite() && self.c >= 0.0 && self.m >= 0.0) {
            return Err(Error::config(format!(
                "costs must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Virtual completion time. With overlap the fetch for step `t+1` starts
/// when step `t`'s compute starts (one step of prefetch).
pub fn overlap_makespan(s: &OverlapScenario, overlapped: bool) -> Result<f64> {
    s.validate()?;
    let rest = (s.t - 1) as f64;
    let first = if s.first_step_local { s.c } else { s.m + s.c };
    Ok(if overlapped {
        first + rest * s.c.max(s.m)
    } else {
        first + rest * (s.m + s.c)
    })
}

/// Time beyond the communication-free `T·C`, as a percentage of it.
pub fn comm_overhead_pct(s: &OverlapScenario, overlapped: bool) -> Result<f64> {
    s.validate()?;
    if s.c == 0.0 {
        return Err(Error::config("overhead is undefined with zero compute"));
    }
    let ideal = s.t as f64 * s.c;
    Ok((overlap_makespan(s, overlapped)? - ideal) / ideal * 100.0)
}

/// One row of the comparison table. Columns that do not apply are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub n: Option<u64>,
    pub d: Option<u64>,
    #[serde(rename = "P")]
    pub p: Option<u64>,
    pub kv_ratio: Option<f64>,
    #[serde(rename = "volume_Nd")]
    pub volume_nd: Option<f64>,
    pub makespan: Option<f64>,
    pub overhead_pct: Option<f64>,
}

pub fn comm_row(s: &CommScenario) -> Result<TableRow> {
    let v = comm_volume(s)?;
    Ok(TableRow {
        strategy: format!("{:?}", s.strategy),
        n: Some(s.n),
        d: Some(s.d),
        p: Some(s.p),
        kv_ratio: Some(ratio_to_f64(s.kv_ratio)),
        volume_nd: Some(ratio_to_f64(v.total())),
        makespan: None,
        overhead_pct: None,
    })
}

pub fn overlap_row(s: &OverlapScenario, overlapped: bool) -> Result<TableRow> {
    Ok(TableRow {
        strategy: if overlapped {
            "overlapped"
        } else {
            "sequential"
        }
        .into(),
        n: None,
        d: None,
        p: None,
        kv_ratio: None,
        volume_nd: None,
        makespan: Some(overlap_makespan(s, overlapped)?),
        overhead_pct: if s.c > 0.0 {
            Some(comm_overhead_pct(s, overlapped)?)
        } else {
            None
        },
    })
}

use std::collections::BTreeMap;
use std::io;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use super::config::{AttackKind, DefenseKind};
use super::UserType;

pub const REPORT_SCHEMA: &str = "report-v1";

/// Hit ratios at one cutoff.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct HitRatios {
    pub k: usize,
    /// One entry per target, in target order.
    pub per_target: Vec<f64>,
    pub mean: f64,
}

impl HitRatios {
    pub fn new(k: usize, per_target: Vec<f64>) -> Self {
        let mean = if per_target.is_empty() {
            0.0
        } else {
            per_target.iter().sum::<f64>() / per_target.len() as f64
        };
        Self { k, per_target, mean }
    }
}

/// Metrics of one successful seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct SeedMetrics {
    pub targets: Vec<String>,
    pub n_injected: usize,
    pub pre_attack: Vec<HitRatios>,
    pub post_attack: Vec<HitRatios>,
    pub rmse_pre_attack: f64,
    pub rmse: f64,
    /// Held-out detector AUC after each training epoch; null when undefined.
    pub auc: Vec<Option<f64>>,
    /// Mean fake-class posterior per user type after each training epoch.
    pub type_scores: Vec<BTreeMap<UserType, f64>>,
    /// Epoch at which label adjustment started, if it did.
    pub adjust_from_epoch: Option<usize>,
    pub adv_loss: Vec<f64>,
}

impl SeedMetrics {
    pub fn hr(&self, k: usize) -> Option<(f64, f64)> {
        let pre = self.pre_attack.iter().find(|h| h.k == k)?;
        let post = self.post_attack.iter().find(|h| h.k == k)?;
        Some((pre.mean, post.mean))
    }

    /// Final-epoch mean fake posterior of a user type.
    pub fn final_score(&self, t: UserType) -> Option<f64> {
        self.type_scores.last()?.get(&t).copied()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<SeedMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, Deserialize)]
pub struct AggregateStat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub sd: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> AggregateStat {
    let n = values.len();
    if n == 0 {
        return AggregateStat { mean: f64::NAN, sd: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    AggregateStat { mean, sd, n }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct HrSummary {
    pub k: usize,
    pub pre_attack: AggregateStat,
    pub post_attack: AggregateStat,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub attack: AttackKind,
    pub defense: DefenseKind,
    pub tau: f64,
    pub hr: Vec<HrSummary>,
    pub rmse: AggregateStat,
    pub final_type_scores: BTreeMap<UserType, AggregateStat>,
    pub seeds: Vec<SeedRecord>,
}

impl ExperimentReport {
    pub fn build(
        attack: AttackKind,
        defense: DefenseKind,
        tau: f64,
        hr_k: &[usize],
        mut seeds: Vec<SeedRecord>,
    ) -> Self {
        seeds.sort_by_key(|r| r.seed);
        let ok: Vec<&SeedMetrics> = seeds.iter().filter_map(|r| r.metrics.as_ref()).collect();
        let hr = hr_k
            .iter()
            .map(|&k| {
                let pairs: Vec<(f64, f64)> = ok.iter().filter_map(|m| m.hr(k)).collect();
                HrSummary {
                    k,
                    pre_attack: aggregate(&pairs.iter().map(|p| p.0).collect::<Vec<_>>()),
                    post_attack: aggregate(&pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
                }
            })
            .collect();
        let rmse = aggregate(&ok.iter().map(|m| m.rmse).collect::<Vec<_>>());
        let final_type_scores = UserType::ALL
            .iter()
            .filter_map(|&t| {
                let v: Vec<f64> = ok.iter().filter_map(|m| m.final_score(t)).collect();
                (!v.is_empty()).then(|| (t, aggregate(&v)))
            })
            .collect();
        Self {
            schema: REPORT_SCHEMA.to_string(),
            attack,
            defense,
            tau,
            hr,
            rmse,
            final_type_scores,
            seeds,
        }
    }

    pub fn mean_hr(&self, k: usize) -> Option<(f64, f64)> {
        let h = self.hr.iter().find(|h| h.k == k)?;
        Some((h.pre_attack.mean, h.post_attack.mean))
    }
}

/// Pretty printer that writes every float with six decimals.
struct SixDecimals(PrettyFormatter<'static>);

impl Formatter for SixDecimals {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.6}")
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        write!(w, "{value:.6}")
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

/// Pretty JSON with fixed six-decimal floats and `null` for non-finite values.
pub fn to_json_6<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SixDecimals(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn report_json(report: &ExperimentReport) -> Result<String, serde_json::Error> {
    to_json_6(report)
}

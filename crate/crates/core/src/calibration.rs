//! Post-hoc calibration of score differences into preference probabilities.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ece, sigmoid, ReliabilityBins, RELIABILITY_BINS};

/// Search interval for `ln τ`.
pub const LN_TAU_BOUNDS: (f64, f64) = (-10.0, 10.0);
pub const GOLDEN_TOL: f64 = 1e-6;
/// Isotonic outputs are clipped to `[CLIP, 1 − CLIP]`.
pub const ISOTONIC_CLIP: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum CalibrationMap {
    Temperature { tau: f64 },
    Isotonic { breakpoints: Vec<f64>, values: Vec<f64> },
}

impl CalibrationMap {
    pub fn validate(&self) -> Result<()> {
        match self {
            CalibrationMap::Temperature { tau } => {
                if !(tau.is_finite() && *tau > 0.0) {
                    return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
                }
            }
            CalibrationMap::Isotonic { breakpoints, values } => {
                if breakpoints.is_empty() || breakpoints.len() != values.len() {
                    return Err(Error::Contract("isotonic map is not fitted".into()));
                }
                if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Contract("isotonic breakpoints must increase strictly".into()));
                }
                if values.windows(2).any(|w| w[0] > w[1]) || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Contract("isotonic values must be non-decreasing in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Probability that the first sample is preferred given `Δs`.
    pub fn apply(&self, delta: f64) -> Result<f64> {
        self.validate()?;
        if !delta.is_finite() {
            return Err(Error::Numeric("non-finite score difference".into()));
        }
        Ok(match self {
            CalibrationMap::Temperature { tau } => sigmoid(delta / tau),
            CalibrationMap::Isotonic { breakpoints, values } => {
                let k = breakpoints.partition_point(|&b| b <= delta);
                values[k.saturating_sub(1)].clamp(ISOTONIC_CLIP, 1.0 - ISOTONIC_CLIP)
            }
        })
    }

    pub fn apply_all(&self, deltas: &[f64]) -> Result<Vec<f64>> {
        deltas.iter().map(|&d| self.apply(d)).collect()
    }
}

fn check_inputs(deltas: &[f64], labels: &[f64]) -> Result<()> {
    if deltas.len() != labels.len() {
        return Err(Error::dim("calibration labels", deltas.len(), labels.len()));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite score difference".into()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean Bernoulli negative log-likelihood of `σ(Δs/τ)`.
pub fn temperature_nll(deltas: &[f64], labels: &[f64], tau: f64) -> f64 {
    let total: f64 = deltas
        .iter()
        .zip(labels)
        .map(|(&d, &l)| {
            // −log σ(m) = softplus(−m) with m signed by the label.
            let m = if l > 0.5 { d / tau } else { -d / tau };
            if m > 0.0 {
                (-m).exp().ln_1p()
            } else {
                -m + m.exp().ln_1p()
            }
        })
        .sum();
    total / deltas.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub tau: f64,
    pub nll: f64,
    pub nll_at_unit: f64,
    /// The optimum sits on the lower search bound: labels are separable.
    pub separable: bool,
}

impl TemperatureFit {
    pub fn map(&self) -> CalibrationMap {
        CalibrationMap::Temperature { tau: self.tau }
    }
}

/// Golden-section search over `ln τ` minimizing the NLL.
pub fn fit_temperature(deltas: &[f64], labels: &[f64]) -> Result<TemperatureFit> {
    check_inputs(deltas, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Contract("temperature fit needs both label classes".into()));
    }
    let f = |u: f64| temperature_nll(deltas, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LN_TAU_BOUNDS;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut u = 0.5 * (a + b);
    let mut nll = f(u);
    // Guard the bracket ends and the unit temperature explicitly.
    for cand in [LN_TAU_BOUNDS.0, 0.0] {
        let v = f(cand);
        if v < nll {
            u = cand;
            nll = v;
        }
    }
    let nll_at_unit = f(0.0);
    Ok(TemperatureFit {
        tau: u.exp(),
        nll,
        nll_at_unit,
        separable: u - LN_TAU_BOUNDS.0 < 1e-3,
    })
}

/// A contiguous run of sorted samples sharing one fitted value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PavBlock {
    pub start: usize,
    pub len: usize,
    pub weight: f64,
    pub mean: f64,
}

/// Weighted pool-adjacent-violators over already ordered values.
pub fn pav(values: &[f64], weights: &[f64]) -> Vec<PavBlock> {
    let mut stack: Vec<PavBlock> = Vec::with_capacity(values.len());
    for (i, (&v, &w)) in values.iter().zip(weights).enumerate() {
        stack.push(PavBlock {
            start: i,
            len: 1,
            weight: w,
            mean: v,
        });
        while stack.len() >= 2 && stack[stack.len() - 2].mean > stack[stack.len() - 1].mean {
            let top = stack.pop().unwrap();
            let prev = stack.last_mut().unwrap();
            let weight = prev.weight + top.weight;
            prev.mean = (prev.mean * prev.weight + top.mean * top.weight) / weight;
            prev.weight = weight;
            prev.len += top.len;
        }
    }
    stack
}

/// Isotonic fit expanded back to one value per input (in input order of
/// the sorted sequence).
pub fn isotonic_regression(values: &[f64]) -> Vec<f64> {
    let blocks = pav(values, &vec![1.0; values.len()]);
    blocks.iter().flat_map(|b| std::iter::repeat_n(b.mean, b.len)).collect()
}

/// Sorts by `Δs`, pools tied `Δs` by mean, then runs PAV.
pub fn fit_isotonic(deltas: &[f64], labels: &[f64]) -> Result<CalibrationMap> {
    check_inputs(deltas, labels)?;
    if deltas.len() < 2 {
        return Err(Error::Contract("isotonic fit needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].partial_cmp(&deltas[b]).unwrap_or(Ordering::Equal));
    let mut xs: Vec<f64> = Vec::new();
    let mut means: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for &i in &order {
        if xs.last() == Some(&deltas[i]) {
            let k = xs.len() - 1;
            means[k] = (means[k] * weights[k] + labels[i]) / (weights[k] + 1.0);
            weights[k] += 1.0;
        } else {
            xs.push(deltas[i]);
            means.push(labels[i]);
            weights.push(1.0);
        }
    }
    let blocks = pav(&means, &weights);
    let map = CalibrationMap::Isotonic {
        breakpoints: blocks.iter().map(|b| xs[b.start]).collect(),
        values: blocks.iter().map(|b| b.mean.clamp(0.0, 1.0)).collect(),
    };
    map.validate()?;
    Ok(map)
}

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    Temperature,
    Isotonic,
    Both,
}

impl VariantChoice {
    fn temperature(self) -> bool {
        self != VariantChoice::Isotonic
    }

    fn isotonic(self) -> bool {
        self != VariantChoice::Temperature
    }
}

/// ECE of one readout on both halves of the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEce {
    pub fit: f64,
    pub test: f64,
    pub reliability_test: ReliabilityBins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSection {
    pub fit: TemperatureFit,
    pub map: CalibrationMap,
    pub ece: SplitEce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicSection {
    pub map: CalibrationMap,
    pub ece: SplitEce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub readout_tau: f64,
    pub fit_pairs: usize,
    pub test_pairs: usize,
    pub uncalibrated: SplitEce,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<TemperatureSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub isotonic: Option<IsotonicSection>,
}

/// Shuffles pair indices with `seed` and splits them in half: the first
/// half fits, the second tests.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n / 2);
    (idx, test)
}

fn split_ece(probs: &[f64], labels: &[f64], fit: &[usize], test: &[usize]) -> Result<SplitEce> {
    let pick = |ix: &[usize]| -> (Vec<f64>, Vec<f64>) { ix.iter().map(|&i| (probs[i], labels[i])).unzip() };
    let (pf, lf) = pick(fit);
    let (pt, lt) = pick(test);
    let fit_bins = ece(&pf, &lf, RELIABILITY_BINS)?;
    let test_bins = ece(&pt, &lt, RELIABILITY_BINS)?;
    Ok(SplitEce {
        fit: fit_bins.ece,
        test: test_bins.ece,
        reliability_test: test_bins,
    })
}

/// Fits the chosen maps on one half of the pairs and reports ECE before and
/// after calibration on both halves.
pub fn calibrate_pairs(deltas: &[f64], labels: &[f64], readout_tau: f64, choice: VariantChoice, seed: u64) -> Result<CalibrationReport> {
    check_inputs(deltas, labels)?;
    if deltas.len() < 4 {
        return Err(Error::Config(format!("calibration needs at least 4 pairs, found {}", deltas.len())));
    }
    if !(readout_tau > 0.0) {
        return Err(Error::Config("readout temperature must be positive".into()));
    }
    let (fit, test) = split_indices(deltas.len(), seed);
    let fd: Vec<f64> = fit.iter().map(|&i| deltas[i]).collect();
    let fl: Vec<f64> = fit.iter().map(|&i| labels[i]).collect();
    let raw: Vec<f64> = deltas.iter().map(|&d| sigmoid(d / readout_tau)).collect();
    let uncalibrated = split_ece(&raw, labels, &fit, &test)?;
    let temperature = if choice.temperature() {
        let t = fit_temperature(&fd, &fl)?;
        let map = t.map();
        let probs = map.apply_all(deltas)?;
        Some(TemperatureSection {
            fit: t,
            ece: split_ece(&probs, labels, &fit, &test)?,
            map,
        })
    } else {
        None
    };
    let isotonic = if choice.isotonic() {
        let map = fit_isotonic(&fd, &fl)?;
        let probs = map.apply_all(deltas)?;
        Some(IsotonicSection {
            ece: split_ece(&probs, labels, &fit, &test)?,
            map,
        })
    } else {
        None
    };
    Ok(CalibrationReport {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        readout_tau,
        fit_pairs: fit.len(),
        test_pairs: test.len(),
        uncalibrated,
        temperature,
        isotonic,
    })
}

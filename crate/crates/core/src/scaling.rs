//! Dyadic scale functions, the admissibility test for a pair (Φ, Ψ), exponent
//! fitting, and synthesis of integer branching/gluing functions whose
//! products track a target profile.
//!
//! Every profile is sampled at powers of two only. Values are exact rationals;
//! power laws additionally remember their exponent so that logarithmic
//! comparisons stay exact on dyadic grids.

use crate::error::{Error, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::ops::RangeInclusive;
use std::str::FromStr;

const LOG_TOL: f64 = 1e-9;

/// `2^k` as an exact rational.
pub fn pow2(k: i64) -> BigRational {
    if k >= 0 {
        BigRational::from_integer(BigInt::one() << (k as usize))
    } else {
        BigRational::new(BigInt::one(), BigInt::one() << ((-k) as usize))
    }
}

fn log2_int(x: &BigInt) -> f64 {
    let bits = x.bits();
    if bits < 1000 {
        x.to_f64().unwrap_or(f64::NAN).log2()
    } else {
        let shift = bits - 64;
        (x >> shift).to_f64().unwrap_or(f64::NAN).log2() + shift as f64
    }
}

/// Base-2 logarithm of a positive rational, robust to huge numerators.
pub fn log2_rational(x: &BigRational) -> f64 {
    log2_int(x.numer()) - log2_int(x.denom())
}

pub fn rational_to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

pub fn format_rational(x: &BigRational) -> String {
    if x.denom().is_one() {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

pub fn parse_rational(s: &str) -> Result<BigRational> {
    BigRational::from_str(s.trim())
        .map_err(|_| Error::InvalidProfile(format!("not a rational: {s:?}")))
}

fn rational_from_f64(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or_else(|| Error::InvalidProfile(format!("non-finite value {x}")))
}

/// `2^e` for a real exponent; exact whenever `e` is an integer.
fn pow2_real(e: f64) -> Result<BigRational> {
    if e.fract() == 0.0 && e.abs() < 4096.0 {
        Ok(pow2(e as i64))
    } else {
        rational_from_f64(e.exp2())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Phi,
    Psi,
    Branching,
    Gluing,
}

/// On-disk profile format shared by scale functions and digit profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub lo_level: i32,
    pub hi_level: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    pub role: Role,
}

/// Samples `values[i] = Φ(2^{lo_level + i})` of a scale function.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicProfile {
    pub lo_level: i32,
    pub hi_level: i32,
    pub values: Vec<BigRational>,
    /// Exponent when the profile is the power law `r^power`.
    pub power: Option<f64>,
}

impl DyadicProfile {
    /// Validates positivity, monotonicity (non-decreasing) and `lo ≤ 0 ≤ hi`.
    pub fn new(lo_level: i32, hi_level: i32, values: Vec<BigRational>) -> Result<Self> {
        if lo_level > 0 || hi_level < 0 {
            return Err(Error::InvalidProfile(format!(
                "range [{lo_level}, {hi_level}] must contain level 0"
            )));
        }
        if values.len() != (hi_level - lo_level + 1) as usize {
            return Err(Error::InvalidProfile(format!(
                "expected {} values, got {}",
                hi_level - lo_level + 1,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_positive()) {
            return Err(Error::InvalidProfile(format!(
                "non-positive value at level {}",
                lo_level + i as i32
            )));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidProfile(format!(
                "profile decreases at level {}",
                lo_level + i as i32 + 1
            )));
        }
        Ok(Self { lo_level, hi_level, values, power: None })
    }

    pub fn power_law(exponent: f64, lo_level: i32, hi_level: i32) -> Result<Self> {
        if !exponent.is_finite() || exponent < 0.0 {
            return Err(Error::InvalidProfile(format!("bad exponent {exponent}")));
        }
        let values = (lo_level..=hi_level)
            .map(|k| pow2_real(exponent * k as f64))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Self::new(lo_level, hi_level, values)?;
        p.power = Some(exponent);
        Ok(p)
    }

    pub fn from_fn(lo_level: i32, hi_level: i32, f: impl Fn(i32) -> BigRational) -> Result<Self> {
        Self::new(lo_level, hi_level, (lo_level..=hi_level).map(f).collect())
    }

    pub fn levels(&self) -> RangeInclusive<i32> {
        self.lo_level..=self.hi_level
    }

    pub fn value(&self, level: i32) -> Result<&BigRational> {
        if !self.levels().contains(&level) {
            return Err(Error::LevelOutOfRange { level, lo: self.lo_level, hi: self.hi_level });
        }
        Ok(&self.values[(level - self.lo_level) as usize])
    }

    pub fn log2_at(&self, level: i32) -> f64 {
        match self.power {
            Some(e) => e * level as f64,
            None => log2_rational(&self.values[(level - self.lo_level) as usize]),
        }
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }

    /// `max Φ(2^{i+1}) / Φ(2^i)` over the sampled range.
    pub fn doubling_constant(&self) -> f64 {
        (self.lo_level..self.hi_level)
            .map(|k| (self.log2_at(k + 1) - self.log2_at(k)).exp2())
            .fold(1.0, f64::max)
    }

    pub fn from_file(file: &ProfileFile) -> Result<Self> {
        let mut prof = match (&file.values, file.power) {
            (Some(vals), power) => {
                let values = vals.iter().map(|s| parse_rational(s)).collect::<Result<Vec<_>>>()?;
                let mut p = Self::new(file.lo_level, file.hi_level, values)?;
                p.power = power;
                p
            }
            (None, Some(e)) => Self::power_law(e, file.lo_level, file.hi_level)?,
            (None, None) => {
                return Err(Error::InvalidProfile("profile needs values or power".into()))
            }
        };
        if matches!(file.role, Role::Phi | Role::Psi) && !prof.is_strictly_increasing() {
            return Err(Error::InvalidProfile("scale functions must be strictly increasing".into()));
        }
        prof.power = prof.power.or(file.power);
        Ok(prof)
    }

    pub fn to_file(&self, role: Role) -> ProfileFile {
        ProfileFile {
            lo_level: self.lo_level,
            hi_level: self.hi_level,
            values: Some(self.values.iter().map(format_rational).collect()),
            power: self.power,
            role,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentBounds {
    pub theta1: f64,
    pub theta2: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl ExponentBounds {
    pub fn new(theta1: f64, theta2: f64, c: f64) -> Result<Self> {
        if !(theta1 >= 0.0 && theta1 <= theta2 && c >= 1.0 && theta2.is_finite() && c.is_finite()) {
            return Err(Error::Invalid(format!("bad exponent bounds ({theta1}, {theta2}, {c})")));
        }
        Ok(Self { theta1, theta2, c })
    }

    pub fn rounded(&self) -> (u32, u32) {
        ((self.theta1 + LOG_TOL).floor() as u32, (self.theta2 - LOG_TOL).ceil().max(0.0) as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigitRole {
    Branching,
    Gluing,
}

/// Integer level function `b` or `g` on `[lo_level, hi_level]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchingProfile {
    pub lo_level: i32,
    pub hi_level: i32,
    pub digits: Vec<u64>,
    pub role: DigitRole,
}

impl BranchingProfile {
    pub fn new(lo_level: i32, hi_level: i32, digits: Vec<u64>, role: DigitRole) -> Result<Self> {
        if lo_level > hi_level || digits.len() != (hi_level - lo_level + 1) as usize {
            return Err(Error::InvalidProfile(format!(
                "{} digits for range [{lo_level}, {hi_level}]",
                digits.len()
            )));
        }
        let min = match role {
            DigitRole::Branching => 2,
            DigitRole::Gluing => 1,
        };
        if let Some(i) = digits.iter().position(|&d| d < min) {
            return Err(Error::InvalidProfile(format!(
                "digit {} at level {} below {min}",
                digits[i],
                lo_level + i as i32
            )));
        }
        Ok(Self { lo_level, hi_level, digits, role })
    }

    pub fn constant(digit: u64, lo_level: i32, hi_level: i32, role: DigitRole) -> Result<Self> {
        Self::new(lo_level, hi_level, vec![digit; (hi_level - lo_level + 1).max(0) as usize], role)
    }

    pub fn levels(&self) -> RangeInclusive<i32> {
        self.lo_level..=self.hi_level
    }

    pub fn digit(&self, level: i32) -> Result<u64> {
        if !self.levels().contains(&level) {
            return Err(Error::LevelOutOfRange { level, lo: self.lo_level, hi: self.hi_level });
        }
        Ok(self.digits[(level - self.lo_level) as usize])
    }

    pub fn sup(&self) -> u64 {
        self.digits.iter().copied().max().unwrap_or(1)
    }

    pub fn inf(&self) -> u64 {
        self.digits.iter().copied().min().unwrap_or(1)
    }

    pub fn from_file(file: &ProfileFile) -> Result<Self> {
        let role = match file.role {
            Role::Branching => DigitRole::Branching,
            Role::Gluing => DigitRole::Gluing,
            r => return Err(Error::InvalidProfile(format!("role {r:?} is not a digit profile"))),
        };
        let vals = file
            .values
            .as_ref()
            .ok_or_else(|| Error::InvalidProfile("digit profile needs values".into()))?;
        let digits = vals
            .iter()
            .map(|s| {
                let q = parse_rational(s)?;
                if !q.is_integer() {
                    return Err(Error::InvalidProfile(format!("digit {s} is not an integer")));
                }
                q.to_integer()
                    .to_u64()
                    .ok_or_else(|| Error::InvalidProfile(format!("digit {s} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.lo_level, file.hi_level, digits, role)
    }

    pub fn to_file(&self) -> ProfileFile {
        ProfileFile {
            lo_level: self.lo_level,
            hi_level: self.hi_level,
            values: Some(self.digits.iter().map(|d| d.to_string()).collect()),
            power: None,
            role: match self.role {
                DigitRole::Branching => Role::Branching,
                DigitRole::Gluing => Role::Gluing,
            },
        }
    }
}

/// `values[i] = V(2^{lo_level + i})`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeProfile {
    pub lo_level: i32,
    pub hi_level: i32,
    pub values: Vec<BigRational>,
}

impl VolumeProfile {
    pub fn at_level(&self, level: i32) -> Result<&BigRational> {
        if level < self.lo_level || level > self.hi_level {
            return Err(Error::LevelOutOfRange { level, lo: self.lo_level, hi: self.hi_level });
        }
        Ok(&self.values[(level - self.lo_level) as usize])
    }

    /// `V(r)`, constant on each block `[2^j, 2^{j+1})`.
    pub fn at_radius(&self, r: f64) -> Result<&BigRational> {
        if !(r > 0.0) {
            return Err(Error::Invalid(format!("radius {r} must be positive")));
        }
        self.at_level(dyadic_floor(r))
    }
}

/// `⌊log2 r⌋`, exact at powers of two.
pub fn dyadic_floor(r: f64) -> i32 {
    let mut j = r.log2().floor() as i32;
    if (j as f64).exp2() > r {
        j -= 1;
    }
    if ((j + 1) as f64).exp2() <= r {
        j += 1;
    }
    j
}

/// Piecewise product volume: `V(1) = 1`, `V(2^j) = Π_{k=1}^{j} a(k)` for
/// `j ≥ 1` and `V(2^j) = (Π_{k=j+1}^{0} a(k))^{-1}` for `j ≤ -1`.
///
/// The result covers levels `[lo - 1, hi]`, which requires `lo ≤ 1 ≤ hi + 1`.
pub fn volume_profile(prof: &BranchingProfile) -> Result<VolumeProfile> {
    if prof.lo_level > 1 || prof.hi_level < 0 {
        return Err(Error::LevelOutOfRange {
            level: if prof.lo_level > 1 { 1 } else { 0 },
            lo: prof.lo_level,
            hi: prof.hi_level,
        });
    }
    let lo = prof.lo_level - 1;
    let hi = prof.hi_level;
    let mut values = vec![BigRational::zero(); (hi - lo + 1) as usize];
    let idx = |j: i32| (j - lo) as usize;
    values[idx(0)] = BigRational::one();
    for j in 1..=hi {
        values[idx(j)] = &values[idx(j - 1)] * BigRational::from_integer(BigInt::from(prof.digit(j)?));
    }
    for j in (lo..0).rev() {
        values[idx(j)] = &values[idx(j + 1)] / BigRational::from_integer(BigInt::from(prof.digit(j + 1)?));
    }
    Ok(VolumeProfile { lo_level: lo, hi_level: hi, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    /// `min Ψ(R)/Ψ(r) ÷ ((R/r)^p / C)` and its pair `(i, j)`, `r = 2^i ≤ R = 2^j`.
    pub lower_margin: f64,
    pub lower_witness: (i32, i32),
    /// `min C (R/r)^{p-1} Φ(R)/Φ(r) ÷ (Ψ(R)/Ψ(r))` and its pair.
    pub upper_margin: f64,
    pub upper_witness: (i32, i32),
    /// First failing pair in order of increasing separation, then increasing `i`.
    pub first_violation: Option<(Bound, i32, i32)>,
}

/// Checks `(1/C)(R/r)^p ≤ Ψ(R)/Ψ(r) ≤ C (R/r)^{p-1} Φ(R)/Φ(r)` on all dyadic pairs.
pub fn check_admissible(
    phi: &DyadicProfile,
    psi: &DyadicProfile,
    p: f64,
    c: f64,
) -> Result<AdmissibilityReport> {
    if phi.lo_level != psi.lo_level || phi.hi_level != psi.hi_level {
        return Err(Error::RangeMismatch(phi.lo_level, phi.hi_level, psi.lo_level, psi.hi_level));
    }
    if !(p > 1.0) || !(c >= 1.0) {
        return Err(Error::Invalid(format!("need p > 1 and C ≥ 1, got p={p}, C={c}")));
    }
    let lc = c.log2();
    let (lo, hi) = (phi.lo_level, phi.hi_level);
    let mut report = AdmissibilityReport {
        admissible: true,
        lower_margin: f64::INFINITY,
        lower_witness: (lo, lo),
        upper_margin: f64::INFINITY,
        upper_witness: (lo, lo),
        first_violation: None,
    };
    let (mut lower_min, mut upper_min) = (f64::INFINITY, f64::INFINITY);
    for k in 1..=(hi - lo) {
        for i in lo..=(hi - k) {
            let j = i + k;
            let lpsi = psi.log2_at(j) - psi.log2_at(i);
            let lphi = phi.log2_at(j) - phi.log2_at(i);
            let lower = lpsi - p * k as f64 + lc;
            let upper = lc + (p - 1.0) * k as f64 + lphi - lpsi;
            if lower < lower_min {
                lower_min = lower;
                report.lower_witness = (i, j);
            }
            if upper < upper_min {
                upper_min = upper;
                report.upper_witness = (i, j);
            }
            if report.first_violation.is_none() {
                if lower < -LOG_TOL {
                    report.first_violation = Some((Bound::Lower, i, j));
                } else if upper < -LOG_TOL {
                    report.first_violation = Some((Bound::Upper, i, j));
                }
            }
        }
    }
    report.admissible = report.first_violation.is_none();
    report.lower_margin = lower_min.exp2();
    report.upper_margin = upper_min.exp2();
    Ok(report)
}

/// Smallest `C ≥ 1` with `(1/C) 2^{θ1 k} ≤ Φ(2^{i+k})/Φ(2^i) ≤ C 2^{θ2 k}` on all pairs.
pub fn comparability_constant(phi: &DyadicProfile, theta1: f64, theta2: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in phi.lo_level..=phi.hi_level {
        for j in (i + 1)..=phi.hi_level {
            let k = (j - i) as f64;
            let l = phi.log2_at(j) - phi.log2_at(i);
            worst = worst.max(l - theta2 * k).max(theta1 * k - l);
        }
    }
    worst.exp2().max(1.0)
}

/// Fits `θ1 ≤ θ2` from the slopes that persist over at least two consecutive
/// dyadic steps (all slopes if none persist), then measures the smallest `C`.
pub fn fit_exponents(phi: &DyadicProfile) -> Result<ExponentBounds> {
    if let Some(e) = phi.power {
        return ExponentBounds::new(e, e, 1.0);
    }
    let slopes: Vec<f64> =
        (phi.lo_level..phi.hi_level).map(|k| phi.log2_at(k + 1) - phi.log2_at(k)).collect();
    if slopes.is_empty() {
        return Err(Error::InvalidProfile("need at least two samples".into()));
    }
    if let Some(i) = slopes.iter().position(|&s| s < -LOG_TOL) {
        return Err(Error::InvalidProfile(format!(
            "profile decreases at level {}",
            phi.lo_level + i as i32 + 1
        )));
    }
    let persistent: Vec<f64> = (0..slopes.len())
        .filter(|&i| {
            (i > 0 && (slopes[i] - slopes[i - 1]).abs() <= LOG_TOL)
                || (i + 1 < slopes.len() && (slopes[i] - slopes[i + 1]).abs() <= LOG_TOL)
        })
        .map(|i| slopes[i])
        .collect();
    let pool = if persistent.is_empty() { &slopes } else { &persistent };
    let theta1 = pool.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let theta2 = pool.iter().copied().fold(0.0, f64::max).max(theta1);
    ExponentBounds::new(theta1, theta2, comparability_constant(phi, theta1, theta2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub profile: BranchingProfile,
    /// Achieved `S`: every ratio `Φ(2^n)/(Φ(1) Π a)` lies in `[1/S, S]`.
    pub slack: f64,
    pub slack_level: i32,
    pub low_digit: u64,
    pub high_digit: u64,
    /// Levels where the construction switched alphabet letter.
    pub switches: Vec<i32>,
    /// `C^3 2^{⌈θ2⌉-⌊θ1⌋}`, kept for comparison with the measured slack.
    pub stated_constant: f64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Low,
    High,
}

/// One-sided construction on `ratios[j] = Φ(2^j)/Φ(1)`, `j ≥ 0` (or the mirrored
/// sequence). Returns `a(0..len)` and the switch indices.
fn construct_one_side(
    ratios: &[BigRational],
    t1: u32,
    t2: u32,
    c: &BigRational,
) -> Result<(Vec<u64>, Vec<usize>)> {
    let len = ratios.len();
    let (low, high) = (1u64 << t1, 1u64 << t2);
    let low_q = BigRational::from_integer(BigInt::from(low));
    let high_q = BigRational::from_integer(BigInt::from(high));
    let mut a = vec![low; len];
    let mut prefix = vec![BigRational::zero(); len];
    prefix[0] = low_q.clone();
    let mut switches = Vec::new();
    let mut anchor = 0usize;
    let mut anchor_val = BigRational::one();
    let mut phase = Phase::Low;
    let mut empty_phases = 0;
    while anchor + 1 < len {
        let mut scale = anchor_val.clone();
        let mut trigger = None;
        for (k, r) in ratios.iter().enumerate().skip(anchor) {
            let hit = match phase {
                Phase::Low => *r > c * &scale,
                Phase::High => r * c < scale,
            };
            if hit {
                trigger = Some(k);
                break;
            }
            scale *= match phase {
                Phase::Low => &low_q,
                Phase::High => &high_q,
            };
        }
        let digit = if phase == Phase::Low { low } else { high };
        let end = trigger.unwrap_or(len - 1);
        for n in (anchor + 1)..=end {
            a[n] = digit;
            prefix[n] = &prefix[n - 1] * BigRational::from_integer(BigInt::from(digit));
        }
        if trigger.is_none() {
            break;
        }
        if end == anchor {
            empty_phases += 1;
            if empty_phases > 1 {
                return Err(Error::HypothesisViolated { i: 0, j: anchor as i32 });
            }
        } else {
            empty_phases = 0;
        }
        switches.push(end);
        anchor = end;
        anchor_val = prefix[end].clone();
        phase = if phase == Phase::Low { Phase::High } else { Phase::Low };
    }
    Ok((a, switches))
}

/// Builds `a` with values in `{2^⌊θ1⌋, 2^⌈θ2⌉}` following the alternating
/// threshold construction on `n ≥ 0` and its mirror on `n ≤ 0`, then measures
/// the achieved comparability slack.
pub fn synthesize_branching(phi: &DyadicProfile, bounds: &ExponentBounds) -> Result<Synthesis> {
    let (lo, hi) = (phi.lo_level, phi.hi_level);
    let lc = bounds.c.log2();
    for i in lo..=hi {
        for j in (i + 1)..=hi {
            let k = (j - i) as f64;
            let l = phi.log2_at(j) - phi.log2_at(i);
            if l < bounds.theta1 * k - lc - LOG_TOL || l > bounds.theta2 * k + lc + LOG_TOL {
                return Err(Error::HypothesisViolated { i, j });
            }
        }
    }
    let (t1, t2) = bounds.rounded();
    if t2 >= 63 {
        return Err(Error::Invalid(format!("exponent {t2} too large for integer digits")));
    }
    let c = rational_from_f64(bounds.c)?;
    let one = phi.value(0)?.clone();
    let forward: Vec<BigRational> =
        (0..=hi).map(|n| phi.value(n).map(|v| v / &one)).collect::<Result<_>>()?;
    let backward: Vec<BigRational> =
        (0..=-lo).map(|j| phi.value(-j).map(|v| &one / v)).collect::<Result<_>>()?;
    let (fa, fsw) = construct_one_side(&forward, t1, t2, &c)?;
    let (ba, bsw) = construct_one_side(&backward, t1, t2, &c)?;

    let mut digits = vec![0u64; (hi - lo + 1) as usize];
    for (n, &d) in fa.iter().enumerate() {
        digits[(n as i32 - lo) as usize] = d;
    }
    for (j, &d) in ba.iter().enumerate() {
        digits[(-(j as i32) - lo) as usize] = d;
    }
    let mut switches: Vec<i32> = fsw.iter().map(|&n| n as i32).collect();
    switches.extend(bsw.iter().map(|&j| -(j as i32)));
    switches.sort_unstable();

    let mut worst = 0.0f64;
    let mut worst_level = 0;
    let mut acc = 0.0f64;
    for (n, &d) in fa.iter().enumerate() {
        acc += (d as f64).log2();
        let q = (log2_rational(&forward[n]) - acc).abs();
        if q > worst {
            worst = q;
            worst_level = n as i32;
        }
    }
    acc = (ba[0] as f64).log2();
    for (j, &d) in ba.iter().enumerate().skip(1) {
        acc += (d as f64).log2();
        let q = (log2_rational(&backward[j]) - acc).abs();
        if q > worst {
            worst = q;
            worst_level = -(j as i32);
        }
    }
    let (low, high) = (1u64 << t1, 1u64 << t2);
    let role = if low >= 2 { DigitRole::Branching } else { DigitRole::Gluing };
    Ok(Synthesis {
        profile: BranchingProfile::new(lo, hi, digits, role)?,
        slack: worst.exp2(),
        slack_level: worst_level,
        low_digit: low,
        high_digit: high,
        switches,
        stated_constant: bounds.c.powi(3) * ((t2 - t1) as f64).exp2(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbPair {
    pub g: Synthesis,
    pub b: Synthesis,
    pub g_bounds: ExponentBounds,
    pub b_bounds: ExponentBounds,
}

/// Target profiles `Ψ(2^n)/2^{(p-1)n}` (for `b`) and `2^{(p-1)n}Φ(2^n)/Ψ(2^n)` (for `g`).
pub fn gb_targets(phi: &DyadicProfile, psi: &DyadicProfile, p: f64) -> Result<(DyadicProfile, DyadicProfile)> {
    let (lo, hi) = (phi.lo_level, phi.hi_level);
    if let (Some(dh), Some(beta)) = (phi.power, psi.power) {
        let tb = DyadicProfile::power_law(beta - (p - 1.0), lo, hi)?;
        let tg = DyadicProfile::power_law((p - 1.0) + dh - beta, lo, hi)?;
        return Ok((tb, tg));
    }
    let scale = |n: i32| pow2_real((p - 1.0) * n as f64);
    let mut tb = Vec::new();
    let mut tg = Vec::new();
    for n in lo..=hi {
        let s = scale(n)?;
        tb.push(psi.value(n)? / &s);
        tg.push(s * phi.value(n)? / psi.value(n)?);
    }
    Ok((DyadicProfile::new(lo, hi, tb)?, DyadicProfile::new(lo, hi, tg)?))
}

/// Synthesizes `(g, b)` with `V_b(r) ≍ Ψ(r)/r^{p-1}` and `V_g(r) ≍ r^{p-1}Φ(r)/Ψ(r)`.
///
/// Exponents are fitted on each target; `θ1` is clamped to at least 1 for `b`
/// so that every branching digit is at least 2.
pub fn derive_gb(phi: &DyadicProfile, psi: &DyadicProfile, p: f64, c: f64) -> Result<GbPair> {
    let rep = check_admissible(phi, psi, p, c)?;
    if let Some((bound, i, j)) = rep.first_violation {
        return Err(Error::NotAdmissible(format!("{bound:?} bound fails between levels {i} and {j}")));
    }
    let (tb, tg) = gb_targets(phi, psi, p)?;
    let mut bb = fit_exponents(&tb)?;
    if bb.theta1 < 1.0 {
        bb.theta1 = 1.0;
        bb.theta2 = bb.theta2.max(1.0);
        bb.c = comparability_constant(&tb, bb.theta1, bb.theta2);
    }
    let gb = fit_exponents(&tg)?;
    let mut b = synthesize_branching(&tb, &bb)?;
    b.profile.role = DigitRole::Branching;
    let mut g = synthesize_branching(&tg, &gb)?;
    g.profile.role = DigitRole::Gluing;
    Ok(GbPair { g, b, g_bounds: gb, b_bounds: bb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn volume_of_constant_two() {
        let b = BranchingProfile::constant(2, -3, 6, DigitRole::Branching).unwrap();
        let v = volume_profile(&b).unwrap();
        assert_eq!(v.lo_level, -4);
        for j in -4..=6 {
            assert_eq!(v.at_level(j).unwrap(), &pow2(j as i64), "level {j}");
        }
        assert_eq!(v.at_radius(1.0).unwrap(), &BigRational::one());
        assert_eq!(v.at_radius(1.999).unwrap(), &BigRational::one());
        assert_eq!(v.at_radius(2.0).unwrap(), &q(2, 1));
        assert_eq!(v.at_radius(3.5).unwrap(), &q(2, 1));
    }

    #[test]
    fn volume_negative_branch() {
        let g = BranchingProfile::constant(3, -2, 2, DigitRole::Gluing).unwrap();
        let v = volume_profile(&g).unwrap();
        assert_eq!(v.at_radius(0.25).unwrap(), &q(1, 9));
        assert_eq!(v.at_radius(0.49).unwrap(), &q(1, 9));
        assert_eq!(v.at_radius(0.5).unwrap(), &q(1, 3));
    }

    #[test]
    fn volume_needs_levels_near_zero() {
        let b = BranchingProfile::constant(2, 3, 6, DigitRole::Branching).unwrap();
        assert!(matches!(volume_profile(&b), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn dyadic_floor_exact() {
        for j in -20..20 {
            let r = (j as f64).exp2();
            assert_eq!(dyadic_floor(r), j);
            assert_eq!(dyadic_floor(r * 1.5), j);
            assert_eq!(dyadic_floor(r * 0.999_999), j - 1);
        }
    }

    proptest! {
        #[test]
        fn volume_is_multiplicative(digits in prop::collection::vec(1u64..6, 2..12), lo in -6i32..=1) {
            let hi = lo + digits.len() as i32 - 1;
            prop_assume!(hi >= 0);
            let g = BranchingProfile::new(lo, hi, digits.clone(), DigitRole::Gluing).unwrap();
            let v = volume_profile(&g).unwrap();
            for j in (lo)..=hi {
                let ratio = v.at_level(j).unwrap() / v.at_level(j - 1).unwrap();
                prop_assert_eq!(ratio, BigRational::from_integer(BigInt::from(g.digit(j).unwrap())));
            }
        }
    }

    #[test]
    fn power_law_admissible() {
        let phi = DyadicProfile::power_law(2.0, -3, 5).unwrap();
        let psi = DyadicProfile::power_law(2.5, -3, 5).unwrap();
        assert!(check_admissible(&phi, &psi, 2.0, 1.0).unwrap().admissible);
        let tight = DyadicProfile::power_law(2.0, -3, 5).unwrap();
        let rep = check_admissible(&tight, &tight, 2.0, 1.0).unwrap();
        assert!(rep.admissible);
        assert_eq!(rep.lower_margin, 1.0);
    }

    #[test]
    fn upper_bound_flip_at_ratio_two() {
        // Direct evaluation at R/r = 2: Ψ ratio 8, C·2·2 must reach it.
        let phi = DyadicProfile::power_law(1.0, 0, 1).unwrap();
        let psi = DyadicProfile::power_law(3.0, 0, 1).unwrap();
        for (c, expect) in [(1.0, false), (1.5, false), (1.999, false), (2.0, true), (3.0, true)] {
            let direct = 8.0 <= c * 2.0 * 2.0;
            assert_eq!(direct, expect);
            let rep = check_admissible(&phi, &psi, 2.0, c).unwrap();
            assert_eq!(rep.admissible, expect, "C = {c}");
            if !expect {
                assert_eq!(rep.first_violation, Some((Bound::Upper, 0, 1)));
            }
        }
        let phi = DyadicProfile::power_law(1.0, 0, 4).unwrap();
        let psi = DyadicProfile::power_law(3.0, 0, 4).unwrap();
        let rep = check_admissible(&phi, &psi, 2.0, 1.5).unwrap();
        assert_eq!(rep.first_violation, Some((Bound::Upper, 0, 1)));
        assert_eq!(rep.upper_witness, (0, 4));
    }

    #[test]
    fn mismatched_ranges_rejected() {
        let a = DyadicProfile::power_law(1.0, -1, 3).unwrap();
        let b = DyadicProfile::power_law(1.0, -2, 3).unwrap();
        assert!(matches!(check_admissible(&a, &b, 2.0, 1.0), Err(Error::RangeMismatch(..))));
    }

    #[test]
    fn non_positive_values_rejected() {
        let vals = vec![q(0, 1), q(1, 1), q(2, 1)];
        assert!(DyadicProfile::new(-1, 1, vals).is_err());
    }

    fn oracle_constant(phi: &DyadicProfile, t1: f64, t2: f64) -> f64 {
        // Independent scan in linear space over exact rationals.
        let mut c: f64 = 1.0;
        for i in phi.levels() {
            for j in phi.levels().filter(|&j| j > i) {
                let ratio = rational_to_f64(&(phi.value(j).unwrap() / phi.value(i).unwrap()));
                let k = (j - i) as f64;
                c = c.max(ratio / (t2 * k).exp2()).max((t1 * k).exp2() / ratio);
            }
        }
        c
    }

    #[test]
    fn fit_exact_power() {
        let vals: Vec<_> = (-4..=8).map(|k| pow2(2 * k)).collect();
        let phi = DyadicProfile::new(-4, 8, vals).unwrap();
        let b = fit_exponents(&phi).unwrap();
        assert_eq!((b.theta1, b.theta2, b.c), (2.0, 2.0, 1.0));
    }

    #[test]
    fn fit_two_slopes() {
        let phi = DyadicProfile::from_fn(-4, 8, |n| if n < 0 { pow2(2 * n as i64) } else { pow2(n as i64) }).unwrap();
        let b = fit_exponents(&phi).unwrap();
        assert_eq!((b.theta1, b.theta2), (1.0, 2.0));
        assert_eq!(b.c, 1.0);
        assert_eq!(oracle_constant(&phi, 1.0, 2.0), 1.0);
    }

    #[test]
    fn fit_perturbed_sample() {
        let phi = DyadicProfile::from_fn(-4, 8, |n| {
            let v = pow2(2 * n as i64);
            if n == 3 { v * q(3, 2) } else { v }
        })
        .unwrap();
        let b = fit_exponents(&phi).unwrap();
        assert_eq!((b.theta1, b.theta2), (2.0, 2.0));
        assert!(b.c >= 1.5);
        assert!((b.c - oracle_constant(&phi, 2.0, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn synth_power_law_constant() {
        for theta in 0..=3u32 {
            let phi = DyadicProfile::power_law(theta as f64, -5, 9).unwrap();
            let bounds = ExponentBounds::new(theta as f64, theta as f64, 1.0).unwrap();
            let s = synthesize_branching(&phi, &bounds).unwrap();
            assert!(s.profile.digits.iter().all(|&d| d == 1 << theta), "theta {theta}");
            assert!(s.switches.is_empty());
        }
    }

    #[test]
    fn synth_constant_profile_gives_ones() {
        let phi = DyadicProfile::from_fn(0, 6, |_| BigRational::one()).unwrap();
        let bounds = ExponentBounds::new(0.0, 1.0, 1.0).unwrap();
        let s = synthesize_branching(&phi, &bounds).unwrap();
        assert!(s.profile.digits.iter().all(|&d| d == 1));
    }

    fn two_slope() -> DyadicProfile {
        DyadicProfile::from_fn(-3, 10, |n| {
            if n <= 4 { pow2(n as i64) } else { pow2(2 * (n as i64 - 4)) * pow2(4) }
        })
        .unwrap()
    }

    fn slack_of(phi: &DyadicProfile, digits: &[u64]) -> f64 {
        // Direct product evaluation, forward and mirrored.
        let lo = phi.lo_level;
        let a = |n: i32| digits[(n - lo) as usize] as f64;
        let one = rational_to_f64(phi.value(0).unwrap());
        let mut worst: f64 = 1.0;
        let mut prod = 1.0;
        for n in 0..=phi.hi_level {
            prod *= a(n);
            let r = rational_to_f64(phi.value(n).unwrap()) / one / prod;
            worst = worst.max(r).max(1.0 / r);
        }
        prod = a(0);
        for n in (lo..0).rev() {
            prod *= a(n);
            let r = one / rational_to_f64(phi.value(n).unwrap()) / prod;
            worst = worst.max(r).max(1.0 / r);
        }
        worst
    }

    #[test]
    fn synth_two_slope_switch_and_slack() {
        let phi = two_slope();
        let bounds = ExponentBounds::new(1.0, 2.0, 1.0).unwrap();
        let s = synthesize_branching(&phi, &bounds).unwrap();
        let first_four = s.profile.digits.iter().position(|&d| d == 4).unwrap() as i32 + phi.lo_level;
        assert!((4..=6).contains(&first_four), "switch at {first_four}");
        assert!(s.profile.digits.iter().all(|&d| d == 2 || d == 4));
        assert!((s.slack - slack_of(&phi, &s.profile.digits)).abs() < 1e-12);
        // Brute force over single switch points.
        let best = (phi.lo_level..=phi.hi_level + 1)
            .map(|sw| {
                let d: Vec<u64> = phi.levels().map(|n| if n < sw || n <= 0 { 2 } else { 4 }).collect();
                slack_of(&phi, &d)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(s.slack <= 2.0 * best, "slack {} vs best {best}", s.slack);
        assert!(s.slack <= 16.0);
    }

    #[test]
    fn synth_rejects_violated_hypothesis() {
        let phi = DyadicProfile::power_law(3.0, -2, 4).unwrap();
        let bounds = ExponentBounds::new(1.0, 2.0, 1.0).unwrap();
        assert!(matches!(synthesize_branching(&phi, &bounds), Err(Error::HypothesisViolated { .. })));
    }

    #[test]
    fn derive_tree_corner() {
        let phi = DyadicProfile::power_law(1.0, -4, 6).unwrap();
        let psi = DyadicProfile::power_law(2.0, -4, 6).unwrap();
        let gb = derive_gb(&phi, &psi, 2.0, 1.0).unwrap();
        assert!(gb.b.profile.digits.iter().all(|&d| d == 2));
        assert!(gb.g.profile.digits.iter().all(|&d| d == 1));
    }

    #[test]
    fn derive_square_laakso() {
        let phi = DyadicProfile::power_law(2.0, -4, 6).unwrap();
        let psi = DyadicProfile::power_law(2.0, -4, 6).unwrap();
        let gb = derive_gb(&phi, &psi, 2.0, 1.0).unwrap();
        assert!(gb.b.profile.digits.iter().all(|&d| d == 2));
        assert!(gb.g.profile.digits.iter().all(|&d| d == 2));
    }

    #[test]
    fn derive_upper_boundary_has_no_gluing() {
        let phi = DyadicProfile::power_law(2.0, -4, 6).unwrap();
        let psi = DyadicProfile::power_law(3.5, -4, 6).unwrap();
        let gb = derive_gb(&phi, &psi, 2.5, 1.0).unwrap();
        assert!(gb.g.profile.digits.iter().all(|&d| d == 1));
        assert!(gb.b.profile.digits.iter().all(|&d| d == 2 || d == 4));
    }

    #[test]
    fn derive_refuses_outside_region() {
        let phi = DyadicProfile::power_law(1.0, -2, 3).unwrap();
        let psi = DyadicProfile::power_law(3.0, -2, 3).unwrap();
        assert!(matches!(derive_gb(&phi, &psi, 2.0, 1.0), Err(Error::NotAdmissible(_))));
    }

    #[test]
    fn derived_products_track_targets() {
        let phi = DyadicProfile::power_law(2.0, -6, 10).unwrap();
        let psi = DyadicProfile::power_law(2.5, -6, 10).unwrap();
        let gb = derive_gb(&phi, &psi, 2.0, 1.0).unwrap();
        assert!(gb.b.profile.digits.iter().all(|&d| d == 2 || d == 4));
        assert!(gb.g.profile.digits.iter().all(|&d| d == 1 || d == 2));
        assert!(gb.b.slack <= 4.0 && gb.g.slack <= 4.0, "{} {}", gb.b.slack, gb.g.slack);
    }

    #[test]
    fn profile_file_round_trip() {
        let phi = DyadicProfile::power_law(1.5, -3, 4).unwrap();
        let f = phi.to_file(Role::Psi);
        let text = serde_json::to_string(&f).unwrap();
        let back = DyadicProfile::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, phi);
        let b = BranchingProfile::new(-1, 2, vec![2, 3, 2, 4], DigitRole::Branching).unwrap();
        let text = serde_json::to_string(&b.to_file()).unwrap();
        assert_eq!(BranchingProfile::from_file(&serde_json::from_str(&text).unwrap()).unwrap(), b);
    }

    #[test]
    fn power_shorthand_expands() {
        let f: ProfileFile =
            serde_json::from_str(r#"{"lo_level":-2,"hi_level":3,"power":2,"role":"phi"}"#).unwrap();
        let p = DyadicProfile::from_file(&f).unwrap();
        assert_eq!(p.value(-2).unwrap(), &q(1, 16));
        assert_eq!(p.value(3).unwrap(), &q(64, 1));
    }
}

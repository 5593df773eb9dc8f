//! Random subnetworks and stage schedules.
//!
//! Layer indices are 0-based in the API. The serialized schedule format uses
//! 1-based layer numbers, matching how schedules are usually written down.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LabError, Result};
use crate::numkit::RngStream;

/// Which layers are active in one step, plus the always-on set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatePattern {
    bits: Vec<bool>,
    fixed: Vec<usize>,
}

impl GatePattern {
    /// Errors if a fixed layer is out of range or not set.
    pub fn from_bits(bits: Vec<bool>, mut fixed: Vec<usize>) -> Result<Self> {
        fixed.sort_unstable();
        fixed.dedup();
        for &i in &fixed {
            if i >= bits.len() {
                return arg_err(format!("fixed layer {i} out of range for depth {}", bits.len()));
            }
            if !bits[i] {
                return arg_err(format!("fixed layer {i} is not active"));
            }
        }
        Ok(Self { bits, fixed })
    }

    pub fn full(depth: usize) -> Self {
        Self {
            bits: vec![true; depth],
            fixed: (0..depth).collect(),
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn depth(&self) -> usize {
        self.bits.len()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }
}

fn check_fixed(fixed: &[usize], depth: usize) -> Result<()> {
    match fixed.iter().find(|&&i| i >= depth) {
        Some(i) => arg_err(format!("fixed layer {i} out of range for depth {depth}")),
        None => Ok(()),
    }
}

/// Keeps every layer in `fixed` and each other layer with probability `p`.
pub fn sample_gates(p: f64, fixed: &[usize], depth: usize, rng: &mut RngStream) -> Result<GatePattern> {
    if !(0.0..=1.0).contains(&p) {
        return arg_err(format!("keep probability {p} outside [0, 1]"));
    }
    check_fixed(fixed, depth)?;
    let mut bits = vec![false; depth];
    for &i in fixed {
        bits[i] = true;
    }
    for b in bits.iter_mut() {
        // draw for every layer so the stream position does not depend on I
        let keep = rng.bernoulli(p);
        *b |= keep;
    }
    GatePattern::from_bits(bits, fixed.to_vec())
}

/// Expected active count of a `(p, I)` subnetwork.
pub fn expected_active(p: f64, fixed_count: usize, depth: usize) -> f64 {
    fixed_count as f64 + (depth - fixed_count) as f64 * p
}

/// FLOPs of a `(p, I)` subnetwork relative to the full model.
pub fn relative_flops(p: f64, fixed_count: usize, depth: usize) -> f64 {
    if depth == 0 {
        return 1.0;
    }
    expected_active(p, fixed_count, depth) / depth as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub start: usize,
    pub p: f64,
    /// 0-based, sorted.
    pub fixed: Vec<usize>,
}

impl Stage {
    pub fn mean_active(&self, depth: usize) -> f64 {
        expected_active(self.p, self.fixed.len(), depth)
    }
}

/// A validated sequence of stages covering `[0, total_steps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    stages: Vec<Stage>,
    total_steps: usize,
    depth: usize,
    warmup_stages: usize,
}

impl StageSchedule {
    /// Checks start ordering and progressive growth of `p` and `I`. The first
    /// `warmup_stages` stages are exempt from the growth check.
    pub fn new(mut stages: Vec<Stage>, total_steps: usize, depth: usize, warmup_stages: usize) -> Result<Self> {
        if stages.is_empty() {
            return arg_err("a schedule needs at least one stage");
        }
        if depth == 0 {
            return arg_err("schedule depth must be positive");
        }
        if warmup_stages >= stages.len() {
            return arg_err("warmup prefix must leave at least one stage");
        }
        if stages[0].start != 0 {
            return arg_err("first stage must start at step 0");
        }
        for s in stages.iter_mut() {
            s.fixed.sort_unstable();
            s.fixed.dedup();
            check_fixed(&s.fixed, depth)?;
            if !(0.0..=1.0).contains(&s.p) {
                return arg_err(format!("stage keep probability {} outside [0, 1]", s.p));
            }
        }
        for w in stages.windows(2) {
            if w[1].start <= w[0].start {
                return arg_err("stage starts must be strictly increasing");
            }
        }
        if stages.last().map(|s| s.start).unwrap_or(0) >= total_steps {
            return arg_err("every stage must contain at least one step");
        }
        for w in stages[warmup_stages..].windows(2) {
            if w[1].p < w[0].p {
                return arg_err(format!("keep probability decreases from {} to {}", w[0].p, w[1].p));
            }
            if !w[0].fixed.iter().all(|i| w[1].fixed.contains(i)) {
                return arg_err("always-on set shrinks across stages");
            }
        }
        Ok(Self {
            stages,
            total_steps,
            depth,
            warmup_stages,
        })
    }

    /// Single stage training the full model.
    pub fn full(depth: usize, total_steps: usize) -> Result<Self> {
        Self::new(
            vec![Stage {
                start: 0,
                p: 1.0,
                fixed: vec![],
            }],
            total_steps,
            depth,
            0,
        )
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn warmup_stages(&self) -> usize {
        self.warmup_stages
    }

    pub fn boundaries(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.start).collect()
    }

    pub fn stage_len(&self, index: usize) -> usize {
        let end = self
            .stages
            .get(index + 1)
            .map(|s| s.start)
            .unwrap_or(self.total_steps);
        end - self.stages[index].start
    }

    /// Index of the stage containing `step`; a boundary step belongs to the
    /// stage it starts.
    pub fn stage_index(&self, step: usize) -> Result<usize> {
        if step >= self.total_steps {
            return arg_err(format!("step {step} outside schedule of {} steps", self.total_steps));
        }
        Ok(self.stages.partition_point(|s| s.start <= step) - 1)
    }

    pub fn stage_at(&self, step: usize) -> Result<(f64, &[usize])> {
        let s = &self.stages[self.stage_index(step)?];
        Ok((s.p, &s.fixed))
    }

    /// Time-weighted mean of the expected active count.
    pub fn avg_length(&self) -> f64 {
        let weighted: f64 = (0..self.stages.len())
            .map(|i| self.stage_len(i) as f64 * self.stages[i].mean_active(self.depth))
            .sum();
        weighted / self.total_steps as f64
    }

    /// Time-weighted mean of per-stage relative FLOPs.
    pub fn avg_relative_flops(&self) -> f64 {
        let weighted: f64 = (0..self.stages.len())
            .map(|i| self.stage_len(i) as f64 * relative_flops(self.stages[i].p, self.stages[i].fixed.len(), self.depth))
            .sum();
        weighted / self.total_steps as f64
    }
}

pub fn schedule_avg_length(schedule: &StageSchedule) -> f64 {
    schedule.avg_length()
}

/// A stage described by its mean active count and always-on set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSize {
    pub size: f64,
    /// 1-based layer numbers.
    #[serde(default)]
    pub fixed: Vec<usize>,
}

impl StageSize {
    pub fn new(size: f64, fixed_one_based: &[usize]) -> Self {
        Self {
            size,
            fixed: fixed_one_based.to_vec(),
        }
    }

    fn to_zero_based(&self, depth: usize) -> Result<Vec<usize>> {
        self.fixed
            .iter()
            .map(|&i| {
                if i == 0 || i > depth {
                    arg_err(format!("fixed layer {i} outside 1..={depth}"))
                } else {
                    Ok(i - 1)
                }
            })
            .collect()
    }

    fn keep_probability(&self, depth: usize) -> Result<(f64, Vec<usize>)> {
        let fixed = self.to_zero_based(depth)?;
        let mut uniq = fixed.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let size = self.size;
        if !size.is_finite() || size > depth as f64 {
            return arg_err(format!("stage size {size} exceeds depth {depth}"));
        }
        if size < uniq.len() as f64 {
            return arg_err(format!("stage size {size} is below its {} always-on layers", uniq.len()));
        }
        let free = depth - uniq.len();
        let p = if free == 0 { 1.0 } else { (size - uniq.len() as f64) / free as f64 };
        Ok((p, uniq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    Equal,
    Proportional,
}

fn check_sizes(sizes: &[StageSize], depth: usize) -> Result<()> {
    if sizes.is_empty() {
        return arg_err("no stages given");
    }
    for w in sizes.windows(2) {
        if w[1].size < w[0].size {
            return arg_err("stage sizes must be nondecreasing");
        }
    }
    let last = sizes.last().expect("nonempty").size;
    if (last - depth as f64).abs() > 1e-12 {
        return arg_err(format!("final stage size {last} must equal depth {depth}"));
    }
    Ok(())
}

/// Stage lengths for `k` stages over `total` steps.
pub fn stage_lengths(mode: LengthMode, k: usize, total: usize) -> Vec<usize> {
    match mode {
        LengthMode::Equal => {
            let mut v = vec![total / k; k];
            v[k - 1] += total - (total / k) * k;
            v
        }
        LengthMode::Proportional => {
            let denom = k * (k + 1) / 2;
            let mut v: Vec<usize> = (1..=k).map(|s| total * s / denom).collect();
            let used: usize = v.iter().sum();
            v[k - 1] += total - used;
            v
        }
    }
}

/// Builds a schedule with explicit stage lengths, preceded by an optional
/// full-model warmup stage of `warmup` steps.
pub fn build_with_lengths(sizes: &[StageSize], lengths: &[usize], depth: usize, warmup: usize) -> Result<StageSchedule> {
    check_sizes(sizes, depth)?;
    if lengths.len() != sizes.len() {
        return arg_err("one length per stage required");
    }
    if lengths.iter().any(|&l| l == 0) {
        return Err(LabError::InfeasibleSchedule("a stage would have no steps".into()));
    }
    let mut stages = Vec::with_capacity(sizes.len() + 1);
    let mut start = 0;
    if warmup > 0 {
        stages.push(Stage {
            start: 0,
            p: 1.0,
            fixed: vec![],
        });
        start = warmup;
    }
    for (spec, &len) in sizes.iter().zip(lengths) {
        let (p, fixed) = spec.keep_probability(depth)?;
        stages.push(Stage { start, p, fixed });
        start += len;
    }
    StageSchedule::new(stages, start, depth, usize::from(warmup > 0))
}

pub fn build_equal(sizes: &[StageSize], depth: usize, total_steps: usize) -> Result<StageSchedule> {
    if total_steps < sizes.len() {
        return arg_err("fewer steps than stages");
    }
    build_with_lengths(sizes, &stage_lengths(LengthMode::Equal, sizes.len(), total_steps), depth, 0)
}

pub fn build_proportional(sizes: &[StageSize], depth: usize, total_steps: usize) -> Result<StageSchedule> {
    if total_steps < sizes.len() * (sizes.len() + 1) / 2 {
        return arg_err("fewer steps than proportional stages need");
    }
    build_with_lengths(
        sizes,
        &stage_lengths(LengthMode::Proportional, sizes.len(), total_steps),
        depth,
        0,
    )
}

/// Result of shifting steps between stages to hit a target average length.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSolution {
    pub schedule: StageSchedule,
    /// Steps removed from each of the first k−1 stages (negative: added).
    pub shift: i64,
    pub lengths: Vec<usize>,
}

/// Moves `x` steps out of each of the first `k−1` stages and `(k−1)·x` into
/// the final one so the average active count meets `target`. `x` is rounded
/// to the nearest multiple of `quantum`.
pub fn solve_target_average(
    sizes: &[StageSize],
    base_lengths: &[usize],
    depth: usize,
    target: f64,
    quantum: usize,
) -> Result<TargetSolution> {
    check_sizes(sizes, depth)?;
    if base_lengths.len() != sizes.len() {
        return arg_err("one length per stage required");
    }
    if quantum == 0 {
        return arg_err("quantum must be positive");
    }
    let infeasible = |msg: String| Err(LabError::InfeasibleSchedule(msg));
    let means: Vec<f64> = sizes
        .iter()
        .map(|s| s.keep_probability(depth).map(|(p, f)| expected_active(p, f.len(), depth)))
        .collect::<Result<_>>()?;
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(target >= lo && target <= hi) {
        return infeasible(format!("target {target} outside stage sizes [{lo}, {hi}]"));
    }
    let total: usize = base_lengths.iter().sum();
    let k = sizes.len();
    let current: f64 = base_lengths.iter().zip(&means).map(|(&l, &m)| l as f64 * m).sum::<f64>() / total as f64;
    let slope = ((k - 1) as f64 * means[k - 1] - means[..k - 1].iter().sum::<f64>()) / total as f64;
    let raw = if (target - current).abs() < 1e-12 {
        0.0
    } else if slope.abs() < 1e-15 {
        return infeasible(format!("moving steps cannot change the average from {current}"));
    } else {
        (target - current) / slope
    };
    let q = quantum as f64;
    let shift = ((raw / q).round() * q) as i64;
    let mut lengths = Vec::with_capacity(k);
    for (i, &l) in base_lengths.iter().enumerate() {
        let delta = if i + 1 < k { -shift } else { shift * (k as i64 - 1) };
        let new_len = l as i64 + delta;
        if new_len <= 0 {
            return infeasible(format!("stage {} would have {new_len} steps", i + 1));
        }
        lengths.push(new_len as usize);
    }
    let schedule = build_with_lengths(sizes, &lengths, depth, 0)?;
    Ok(TargetSolution {
        schedule,
        shift,
        lengths,
    })
}

/// Serialized schedule description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub stages: Vec<StageSize>,
    pub mode: LengthMode,
    #[serde(default)]
    pub target_avg: Option<f64>,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Granularity of the solved shift, in steps.
    #[serde(default = "one")]
    pub quantum: usize,
}

fn one() -> usize {
    1
}

/// A built schedule plus what the solver did, for reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltSchedule {
    pub schedule: StageSchedule,
    pub shift: i64,
    pub lengths: Vec<usize>,
}

impl ScheduleSpec {
    /// Builds over `total_steps`, the warmup (if any) included.
    pub fn build(&self, depth: usize, total_steps: usize) -> Result<BuiltSchedule> {
        let k = self.stages.len();
        if k == 0 {
            return arg_err("no stages given");
        }
        if self.warmup_steps >= total_steps {
            return Err(LabError::InfeasibleSchedule("warmup covers the whole run".into()));
        }
        let body = total_steps - self.warmup_steps;
        let min_body = match self.mode {
            LengthMode::Equal => k,
            LengthMode::Proportional => k * (k + 1) / 2,
        };
        if body < min_body {
            return Err(LabError::InfeasibleSchedule("too few steps for the stage count".into()));
        }
        let base = stage_lengths(self.mode, k, body);
        let (lengths, shift) = match self.target_avg {
            Some(target) => {
                let sol = solve_target_average(&self.stages, &base, depth, target, self.quantum)?;
                (sol.lengths, sol.shift)
            }
            None => (base, 0),
        };
        let schedule = build_with_lengths(&self.stages, &lengths, depth, self.warmup_steps)?;
        Ok(BuiltSchedule {
            schedule,
            shift,
            lengths,
        })
    }
}

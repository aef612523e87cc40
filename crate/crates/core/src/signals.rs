//! Mode schedules, switching controls and the conversions between them.
//!
//! A [`ModeSchedule`] is the canonical representation: the sequence of active
//! modes plus the strictly increasing switching times. A [`SwitchingControl`]
//! is the equivalent indicator-vector signal `u(t) = e_σ(t)`; it is never
//! materialised on a grid, only evaluated on demand.
//!
//! Mode indices are zero-based in the API. Serialized forms (JSON, CSV) use
//! one-based indices so that "mode 1" in a file is index 0 in code.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SchedError};
use crate::scalar::Real;

/// Fraction of the horizon used as the default minimum dwell time.
pub const DEFAULT_DWELL_FRACTION: f64 = 1e-6;

/// Mode sequence together with its switching times over `[0, horizon]`.
///
/// Interval `i` is `[T_{i-1}, T_i)` with `T_0 = 0` and `T_M = horizon`; the
/// value at a switching time belongs to the following mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSchedule<S> {
    sequence: Vec<usize>,
    times: Vec<S>,
    horizon: S,
    num_modes: usize,
}

impl<S: Real> ModeSchedule<S> {
    /// Validates and canonicalises a schedule. Adjacent repeated modes are
    /// merged (the switch between them is vacuous); zero-length intervals and
    /// non-increasing times are rejected.
    pub fn new(sequence: Vec<usize>, times: Vec<S>, horizon: S, num_modes: usize) -> Result<Self> {
        if num_modes == 0 {
            return Err(SchedError::InvalidSchedule(
                "num_modes must be positive".into(),
            ));
        }
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(SchedError::InvalidSchedule(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if sequence.is_empty() {
            return Err(SchedError::InvalidSchedule("empty mode sequence".into()));
        }
        if times.len() + 1 != sequence.len() {
            return Err(SchedError::InvalidSchedule(format!(
                "{} modes need {} switching times, got {}",
                sequence.len(),
                sequence.len() - 1,
                times.len()
            )));
        }
        if let Some(&bad) = sequence.iter().find(|&&m| m >= num_modes) {
            return Err(SchedError::InvalidSchedule(format!(
                "mode index {} out of range 1..={num_modes}",
                bad + 1
            )));
        }
        let mut prev = S::zero();
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t <= prev || t >= horizon {
                return Err(SchedError::InvalidSchedule(format!(
                    "switching time T{} = {t} must lie in ({prev}, {horizon}) and increase strictly",
                    i + 1
                )));
            }
            prev = t;
        }

        let mut merged_seq = Vec::with_capacity(sequence.len());
        let mut merged_times = Vec::with_capacity(times.len());
        merged_seq.push(sequence[0]);
        for (i, &m) in sequence.iter().enumerate().skip(1) {
            if m != *merged_seq.last().unwrap() {
                merged_seq.push(m);
                merged_times.push(times[i - 1]);
            }
        }
        Ok(Self {
            sequence: merged_seq,
            times: merged_times,
            horizon,
            num_modes,
        })
    }

    /// A schedule that stays in one mode for the whole horizon.
    pub fn constant(mode: usize, horizon: S, num_modes: usize) -> Result<Self> {
        Self::new(vec![mode], Vec::new(), horizon, num_modes)
    }

    /// Builds a schedule from `(start_time, mode)` pieces. The first piece must
    /// start at 0. Zero-length pieces are dropped and vacuous switches merged.
    pub fn from_pieces(pieces: &[(S, usize)], horizon: S, num_modes: usize) -> Result<Self> {
        if pieces.is_empty() {
            return Err(SchedError::InvalidSchedule("no pieces".into()));
        }
        if pieces[0].0 != S::zero() {
            return Err(SchedError::InvalidSchedule(format!(
                "first piece starts at {} instead of 0",
                pieces[0].0
            )));
        }
        let mut seq: Vec<usize> = Vec::new();
        let mut times: Vec<S> = Vec::new();
        for (k, &(start, mode)) in pieces.iter().enumerate() {
            let end = pieces.get(k + 1).map_or(horizon, |p| p.0);
            if end < start {
                return Err(SchedError::InvalidSchedule(format!(
                    "piece starts decrease at {start}"
                )));
            }
            if end == start {
                continue;
            }
            match seq.last() {
                None => seq.push(mode),
                Some(&last) if last == mode => {}
                Some(_) => {
                    seq.push(mode);
                    times.push(start);
                }
            }
        }
        if seq.is_empty() {
            return Err(SchedError::InvalidSchedule(
                "all pieces have zero length".into(),
            ));
        }
        // the first retained piece may have started after 0 if earlier pieces were empty
        Self::new(seq, times, horizon, num_modes)
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    pub fn times(&self) -> &[S] {
        &self.times
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    /// Number of intervals `M`.
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn num_switches(&self) -> usize {
        self.times.len()
    }

    /// Start of interval `i`.
    pub fn interval_start(&self, i: usize) -> S {
        if i == 0 {
            S::zero()
        } else {
            self.times[i - 1]
        }
    }

    /// End of interval `i`.
    pub fn interval_end(&self, i: usize) -> S {
        self.times.get(i).copied().unwrap_or(self.horizon)
    }

    pub fn interval(&self, i: usize) -> (S, S) {
        (self.interval_start(i), self.interval_end(i))
    }

    /// Iterates `(start, end, mode)` over all intervals.
    pub fn intervals(&self) -> impl Iterator<Item = (S, S, usize)> + '_ {
        (0..self.len()).map(move |i| {
            let (a, b) = self.interval(i);
            (a, b, self.sequence[i])
        })
    }

    /// `[0, T_1, ..., T_{M-1}, horizon]`.
    pub fn boundaries(&self) -> Vec<S> {
        let mut b = Vec::with_capacity(self.times.len() + 2);
        b.push(S::zero());
        b.extend_from_slice(&self.times);
        b.push(self.horizon);
        b
    }

    /// Index of the interval containing `t` under the half-open convention.
    /// Times at or beyond the horizon map to the last interval, negative
    /// times to the first.
    pub fn interval_index(&self, t: S) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    pub fn mode_at(&self, t: S) -> usize {
        self.sequence[self.interval_index(t)]
    }

    /// Shortest interval length.
    pub fn min_dwell(&self) -> S {
        (0..self.len())
            .map(|i| {
                let (a, b) = self.interval(i);
                b - a
            })
            .fold(S::infinity(), S::min)
    }

    /// Default minimum dwell for this horizon.
    pub fn default_dwell(&self) -> S {
        self.horizon * S::lit(DEFAULT_DWELL_FRACTION)
    }

    /// Merges every interval shorter than `min_len` into its longer neighbour.
    /// Returns the merged schedule and the number of intervals removed.
    pub fn merge_short_intervals(&self, min_len: S) -> (Self, usize) {
        let mut pieces: Vec<(S, S, usize)> = self.intervals().collect();
        let mut removed = 0;
        loop {
            if pieces.len() <= 1 {
                break;
            }
            let shortest = pieces
                .iter()
                .enumerate()
                .filter(|(_, p)| p.1 - p.0 < min_len)
                .min_by(|a, b| (a.1 .1 - a.1 .0).partial_cmp(&(b.1 .1 - b.1 .0)).unwrap());
            let Some((k, _)) = shortest else { break };
            let left_len = if k > 0 {
                pieces[k - 1].1 - pieces[k - 1].0
            } else {
                -S::one()
            };
            let right_len = if k + 1 < pieces.len() {
                pieces[k + 1].1 - pieces[k + 1].0
            } else {
                -S::one()
            };
            let (start, end) = (pieces[k].0, pieces[k].1);
            if left_len >= right_len {
                pieces[k - 1].1 = end;
            } else {
                pieces[k + 1].0 = start;
            }
            pieces.remove(k);
            removed += 1;
            // neighbours may now share a mode
            let mut j = 1;
            while j < pieces.len() {
                if pieces[j].2 == pieces[j - 1].2 {
                    pieces[j - 1].1 = pieces[j].1;
                    pieces.remove(j);
                } else {
                    j += 1;
                }
            }
        }
        let sequence = pieces.iter().map(|p| p.2).collect();
        let times = pieces.iter().skip(1).map(|p| p.0).collect();
        let merged = Self::new(sequence, times, self.horizon, self.num_modes)
            .expect("merging preserves schedule validity");
        (merged, removed)
    }

    /// The part of the schedule on `[from, to]`, re-based to start at 0.
    /// When `to` exceeds the horizon the final mode is held.
    pub fn window(&self, from: S, to: S) -> Result<Self> {
        if !(to > from) || from < S::zero() || from >= self.horizon {
            return Err(SchedError::InvalidArgument(format!(
                "window [{from}, {to}] outside schedule"
            )));
        }
        let mut pieces = vec![(S::zero(), self.mode_at(from))];
        for (i, &t) in self.times.iter().enumerate() {
            if t > from && t < to {
                pieces.push((t - from, self.sequence[i + 1]));
            }
        }
        Self::from_pieces(&pieces, to - from, self.num_modes)
    }

    /// Appends `other` after this schedule; the result spans both horizons.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.num_modes != self.num_modes {
            return Err(SchedError::Mismatch(
                "concatenating schedules with different mode counts".into(),
            ));
        }
        let mut pieces: Vec<(S, usize)> = self.intervals().map(|(a, _, m)| (a, m)).collect();
        pieces.extend(other.intervals().map(|(a, _, m)| (a + self.horizon, m)));
        Self::from_pieces(&pieces, self.horizon + other.horizon, self.num_modes)
    }

    /// JSON document `{"horizon", "num_modes", "sequence", "times"}` with
    /// one-based mode indices.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ScheduleFile::from(self)).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScheduleFile<S> = serde_json::from_str(text)?;
        file.into_schedule()
    }

    /// Plot-friendly CSV with columns `t_start,t_end,mode`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_start,t_end,mode\n");
        for (a, b, m) in self.intervals() {
            let _ = writeln!(out, "{a},{b},{}", m + 1);
        }
        out
    }
}

/// Serialized form of a [`ModeSchedule`]; modes are one-based.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScheduleFile<S> {
    pub horizon: S,
    pub num_modes: usize,
    pub sequence: Vec<usize>,
    pub times: Vec<S>,
}

impl<S: Real> From<&ModeSchedule<S>> for ScheduleFile<S> {
    fn from(s: &ModeSchedule<S>) -> Self {
        Self {
            horizon: s.horizon,
            num_modes: s.num_modes,
            sequence: s.sequence.iter().map(|m| m + 1).collect(),
            times: s.times.clone(),
        }
    }
}

impl<S: Real> ScheduleFile<S> {
    pub fn into_schedule(self) -> Result<ModeSchedule<S>> {
        if self.sequence.contains(&0) {
            return Err(SchedError::InvalidSchedule(
                "mode indices in files are one-based".into(),
            ));
        }
        ModeSchedule::new(
            self.sequence.into_iter().map(|m| m - 1).collect(),
            self.times,
            self.horizon,
            self.num_modes,
        )
    }
}

/// Indicator-vector switching control. Stores raw `(start, mode)` pieces,
/// which may contain vacuous switches; [`control_to_schedule`] removes them.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingControl<S> {
    starts: Vec<S>,
    modes: Vec<usize>,
    horizon: S,
    num_modes: usize,
}

impl<S: Real> SwitchingControl<S> {
    /// Piecewise-constant control from `(start, mode)` pieces; the first piece
    /// must start at 0 and starts must increase strictly.
    pub fn from_pieces(pieces: &[(S, usize)], horizon: S, num_modes: usize) -> Result<Self> {
        if pieces.is_empty() || pieces[0].0 != S::zero() {
            return Err(SchedError::InvalidSchedule(
                "control pieces must start at t = 0".into(),
            ));
        }
        for w in pieces.windows(2) {
            if w[1].0 <= w[0].0 || w[1].0 >= horizon {
                return Err(SchedError::InvalidSchedule(format!(
                    "piece start {} out of order",
                    w[1].0
                )));
            }
        }
        if let Some(p) = pieces.iter().find(|p| p.1 >= num_modes) {
            return Err(SchedError::InvalidSchedule(format!(
                "mode index {} out of range",
                p.1 + 1
            )));
        }
        Ok(Self {
            starts: pieces.iter().map(|p| p.0).collect(),
            modes: pieces.iter().map(|p| p.1).collect(),
            horizon,
            num_modes,
        })
    }

    pub fn horizon(&self) -> S {
        self.horizon
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    /// Index of the channel equal to one at `t`.
    pub fn active_mode(&self, t: S) -> usize {
        let k = self.starts.partition_point(|&s| s <= t);
        self.modes[k.saturating_sub(1)]
    }

    /// `u(t)`: the unit coordinate vector of the active mode.
    pub fn eval(&self, t: S) -> Vec<S> {
        let mut u = vec![S::zero(); self.num_modes];
        u[self.active_mode(t)] = S::one();
        u
    }

    /// Times in `(0, horizon)` where `u(t⁺) ≠ u(t⁻)`.
    pub fn discontinuities(&self) -> Vec<S> {
        (1..self.modes.len())
            .filter(|&k| self.modes[k] != self.modes[k - 1])
            .map(|k| self.starts[k])
            .collect()
    }
}

/// `u(t) = e_{σ_i}` on `[T_{i-1}, T_i)`.
pub fn schedule_to_control<S: Real>(sched: &ModeSchedule<S>) -> SwitchingControl<S> {
    SwitchingControl {
        starts: (0..sched.len()).map(|i| sched.interval_start(i)).collect(),
        modes: sched.sequence.clone(),
        horizon: sched.horizon,
        num_modes: sched.num_modes,
    }
}

/// Recovers the canonical schedule of a switching control.
pub fn control_to_schedule<S: Real>(u: &SwitchingControl<S>) -> ModeSchedule<S> {
    let pieces: Vec<(S, usize)> = u
        .starts
        .iter()
        .copied()
        .zip(u.modes.iter().copied())
        .collect();
    ModeSchedule::from_pieces(&pieces, u.horizon, u.num_modes)
        .expect("valid control yields a valid schedule")
}

/// True iff every interval (including the first and last) lasts at least
/// `dwell`.
pub fn check_non_chattering<S: Real>(sched: &ModeSchedule<S>, dwell: S) -> Result<bool> {
    if !(dwell > S::zero()) {
        return Err(SchedError::InvalidArgument(format!(
            "dwell must be positive, got {dwell}"
        )));
    }
    Ok(sched.min_dwell() >= dwell)
}

//! Runtime-adaptive speculation depth control.
//!
//! The controller keeps a circular buffer of acceptance-rate gradients (the
//! flow vector) per decode worker. Each adaptation:
//!
//! 1. computes the gradient of the current acceptance rate against the
//!    buffer mean, writes it into the buffer, and advances the write index;
//! 2. reads volatility as the mean absolute value of the updated buffer;
//! 3. scales the depth boost by a throughput deficit factor (never below 1)
//!    and a load headroom factor;
//! 4. clips the resulting depth, rounds half-up to an integer token count,
//!    and couples the verification micro-batch size inversely to it;
//! 5. projects throughput and folds it into an exponentially smoothed
//!    recent-throughput estimate.
//!
//! State transitions are value-in/value-out; callers own one [`FlowState`]
//! per decode worker and serialize updates to it.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Controller parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    /// Baseline speculation depth, tokens.
    pub d_base: u32,
    /// Amplification factor on the volatility boost.
    pub gamma: f64,
    pub d_min: u32,
    pub d_max: u32,
    /// Flow vector history length.
    pub h: usize,
    /// Target throughput, tokens/second.
    pub tau_target: f64,
    /// Numerator of the inverse depth/micro-batch coupling.
    pub micro_batch_numerator: u32,
    /// Which throughput feeds the projection: the measured input (the
    /// operational algorithm) or the smoothed recent estimate (the equation
    /// variant). Defaults to measured.
    pub projection_source: ProjectionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSource {
    Measured,
    Smoothed,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            d_base: 5,
            gamma: 5.0,
            d_min: 2,
            d_max: 20,
            h: 10,
            tau_target: 400.0,
            micro_batch_numerator: 80,
            projection_source: ProjectionSource::Measured,
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<(), SpecError> {
        if !(1 <= self.d_min && self.d_min <= self.d_base && self.d_base <= self.d_max) {
            return Err(SpecError::InvalidConfig(
                "depth bounds must satisfy 1 <= d_min <= d_base <= d_max",
            ));
        }
        if self.h == 0 {
            return Err(SpecError::InvalidConfig("history length h must be >= 1"));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(SpecError::InvalidConfig("gamma must be >= 0"));
        }
        if self.tau_target.is_nan() || self.tau_target <= 0.0 {
            return Err(SpecError::InvalidConfig("tau_target must be > 0"));
        }
        if self.micro_batch_numerator == 0 {
            return Err(SpecError::InvalidConfig("micro_batch_numerator must be >= 1"));
        }
        Ok(())
    }
}

/// The controller's only mutable memory: the gradient ring, its write
/// index, and the smoothed recent throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    flow: Vec<f64>,
    write_index: usize,
    pub tau_recent: f64,
}

impl FlowState {
    /// Fresh state: zeroed gradients and `tau_recent` seeded at the target
    /// so a cold start yields the baseline plan without a scale spike.
    pub fn reset(cfg: &SpecConfig) -> Self {
        Self {
            flow: vec![0.0; cfg.h],
            write_index: 0,
            tau_recent: cfg.tau_target,
        }
    }

    /// Rebuild a state from raw parts, validating its invariants.
    pub fn from_parts(
        flow: Vec<f64>,
        write_index: usize,
        tau_recent: f64,
    ) -> Result<Self, SpecError> {
        if flow.is_empty() {
            return Err(SpecError::InvalidConfig("flow vector must be nonempty"));
        }
        if write_index >= flow.len() {
            return Err(SpecError::InvalidConfig("write index out of range"));
        }
        if tau_recent.is_nan() || tau_recent < 0.0 {
            return Err(SpecError::InvalidConfig("tau_recent must be >= 0"));
        }
        Ok(Self {
            flow,
            write_index,
            tau_recent,
        })
    }

    pub fn flow_vector(&self) -> &[f64] {
        &self.flow
    }

    pub fn write_index(&self) -> usize {
        self.write_index
    }
}

/// Output of one adaptation: the integer plan for the next request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeculationPlan {
    /// Clipped, rounded speculation depth in tokens.
    pub depth: u32,
    /// Verification micro-batch size, `max(1, numerator / depth)`.
    pub micro_batch: u32,
    pub projected_throughput: f64,
    /// Pre-rounding depth, kept for audit.
    pub raw_depth: f64,
}

/// One adaptation's inputs, intermediates, and outputs; serializes to the
/// per-adapt JSON audit line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptAudit {
    pub acceptance: f64,
    pub load: f64,
    pub throughput: f64,
    pub delta: f64,
    pub magnitude: f64,
    pub scale: f64,
    pub load_adj: f64,
    pub raw_depth: f64,
    pub depth: u32,
    pub micro_batch: u32,
    pub projected_throughput: f64,
    pub tau_recent_after: f64,
}

impl AdaptAudit {
    pub fn to_json_line(&self) -> alloc::string::String {
        serde_json::to_string(self).expect("audit serializes")
    }
}

/// Plan, successor state, and audit trail of one adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub plan: SpeculationPlan,
    pub state: FlowState,
    pub audit: AdaptAudit,
}

/// Run one adaptation against `state` without mutating it.
///
/// Inputs are clamped to their domains (`a`, `l` into `[0, 1]`, `t` to be
/// nonnegative). The gradient is taken against the buffer *before* the
/// write; the magnitude is read *after* it. The buffer is divided by its
/// full length even before it has wrapped once, which biases the magnitude
/// low during warm-up.
pub fn adapt(state: &FlowState, a: f64, l: f64, t: f64, cfg: &SpecConfig) -> Adaptation {
    debug_assert_eq!(state.flow.len(), cfg.h);
    let a = a.clamp(0.0, 1.0);
    let l = l.clamp(0.0, 1.0);
    let t = t.max(0.0);

    let h = cfg.h as f64;
    let mean_before: f64 = state.flow.iter().sum::<f64>() / h;
    let delta = a - mean_before;

    let mut next = state.clone();
    next.flow[next.write_index] = delta;
    next.write_index = (next.write_index + 1) % cfg.h;

    let magnitude: f64 = next.flow.iter().map(|x| x.abs()).sum::<f64>() / h;
    let scale = (cfg.tau_target / t.max(1.0)).max(1.0);
    let load_adj = 1.0 - l.min(0.9);
    let raw_depth = cfg.d_base as f64 + (a * magnitude * cfg.gamma) * load_adj * scale;
    let clipped = raw_depth.clamp(cfg.d_min as f64, cfg.d_max as f64);
    // Half-up rounding; the clip bounds are integers so the rounded value
    // stays inside them.
    let depth = libm::round(clipped) as u32;
    let micro_batch = (cfg.micro_batch_numerator / depth).max(1);

    let projection_base = match cfg.projection_source {
        ProjectionSource::Measured => t,
        ProjectionSource::Smoothed => state.tau_recent,
    };
    let projected_throughput = projection_base * (1.0 + a * 0.5);
    next.tau_recent = 0.9 * state.tau_recent + 0.1 * projected_throughput;

    let plan = SpeculationPlan {
        depth,
        micro_batch,
        projected_throughput,
        raw_depth,
    };
    let audit = AdaptAudit {
        acceptance: a,
        load: l,
        throughput: t,
        delta,
        magnitude,
        scale,
        load_adj,
        raw_depth,
        depth,
        micro_batch,
        projected_throughput,
        tau_recent_after: next.tau_recent,
    };
    Adaptation {
        plan,
        state: next,
        audit,
    }
}

/// The plan a frozen controller hands out: fixed depth, coupled micro-batch,
/// no projection. Used for the fixed-depth ablations.
pub fn fixed_plan(depth: u32, cfg: &SpecConfig) -> SpeculationPlan {
    let depth = depth.clamp(cfg.d_min, cfg.d_max);
    SpeculationPlan {
        depth,
        micro_batch: (cfg.micro_batch_numerator / depth).max(1),
        projected_throughput: 0.0,
        raw_depth: depth as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecError {
    InvalidConfig(&'static str),
}

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecError::InvalidConfig(msg) => write!(f, "invalid speculation config: {msg}"),
        }
    }
}

impl core::error::Error for SpecError {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reset_is_neutral_and_deterministic() {
        let cfg = SpecConfig::default();
        let s1 = FlowState::reset(&cfg);
        let s2 = FlowState::reset(&cfg);
        assert_eq!(s1, s2);
        assert_eq!(s1.tau_recent, 400.0);
        assert!(s1.flow_vector().iter().all(|&x| x == 0.0));
        assert_eq!(s1.write_index(), 0);
    }

    #[test]
    fn zero_signal_keeps_baseline() {
        let cfg = SpecConfig::default();
        let out = adapt(&FlowState::reset(&cfg), 0.0, 0.37, 400.0, &cfg);
        assert_eq!(out.audit.delta, 0.0);
        assert_eq!(out.audit.magnitude, 0.0);
        assert_eq!(out.plan.raw_depth, 5.0);
        assert_eq!(out.plan.depth, 5);
        assert_eq!(out.plan.micro_batch, 16);
        assert_eq!(out.plan.projected_throughput, 400.0);
    }

    #[test]
    fn worked_trace_cold_state() {
        // a=0.8, l=0, t=400 against a cold state; expected values verified
        // with an independent straight-line evaluation.
        let cfg = SpecConfig::default();
        let out = adapt(&FlowState::reset(&cfg), 0.8, 0.0, 400.0, &cfg);
        assert_eq!(out.audit.delta, 0.8);
        assert_eq!(out.audit.magnitude, 0.08);
        assert_eq!(out.audit.scale, 1.0);
        assert_eq!(out.audit.load_adj, 1.0);
        assert_eq!(out.plan.raw_depth, 5.32);
        assert_eq!(out.plan.depth, 5);
        assert_eq!(out.plan.micro_batch, 16);
        assert_eq!(out.plan.projected_throughput, 560.0);
        assert_eq!(out.state.tau_recent, 416.0);
        assert_eq!(out.state.write_index(), 1);
        assert_eq!(out.state.flow_vector()[0], 0.8);
    }

    #[test]
    fn upper_clip_and_micro_batch_coupling() {
        // Buffer constructed so the post-write magnitude is exactly 1:
        // overwritten slot balances the other nine +/-1 entries to mean 0.
        let cfg = SpecConfig::default();
        let mut state = FlowState::reset(&cfg);
        state.flow = alloc::vec![-1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0];
        let out = adapt(&state, 1.0, 0.0, 100.0, &cfg);
        assert_eq!(out.audit.delta, 1.0);
        assert_eq!(out.audit.magnitude, 1.0);
        assert_eq!(out.audit.scale, 4.0);
        assert_eq!(out.plan.raw_depth, 25.0);
        assert_eq!(out.plan.depth, 20);
        assert_eq!(out.plan.micro_batch, 4);
    }

    #[test]
    fn input_state_is_not_mutated() {
        let cfg = SpecConfig::default();
        let state = FlowState::reset(&cfg);
        let before = state.clone();
        let _ = adapt(&state, 0.9, 0.5, 50.0, &cfg);
        assert_eq!(state, before);
    }

    #[test]
    fn projection_source_toggle() {
        let mut cfg = SpecConfig::default();
        let mut state = FlowState::reset(&cfg);
        state.tau_recent = 200.0;
        cfg.projection_source = ProjectionSource::Measured;
        let m = adapt(&state, 0.5, 0.0, 400.0, &cfg);
        assert_eq!(m.plan.projected_throughput, 400.0 * 1.25);
        cfg.projection_source = ProjectionSource::Smoothed;
        let s = adapt(&state, 0.5, 0.0, 400.0, &cfg);
        assert_eq!(s.plan.projected_throughput, 200.0 * 1.25);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SpecConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.d_min = 8;
        assert!(cfg.validate().is_err());
        cfg = SpecConfig { h: 0, ..SpecConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn audit_json_line_has_all_stages() {
        let cfg = SpecConfig::default();
        let out = adapt(&FlowState::reset(&cfg), 0.8, 0.0, 400.0, &cfg);
        let line = out.audit.to_json_line();
        for key in [
            "acceptance", "load", "throughput", "delta", "magnitude", "scale",
            "load_adj", "raw_depth", "depth", "micro_batch",
            "projected_throughput", "tau_recent_after",
        ] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
    }

    /// Brute-force replay of the gradient/magnitude recurrence, independent
    /// of the incremental ring-buffer bookkeeping.
    fn replay_flow(inputs: &[f64], h: usize) -> Vec<f64> {
        let mut flow = alloc::vec![0.0; h];
        let mut idx = 0;
        for &a in inputs {
            let mean: f64 = flow.iter().sum::<f64>() / h as f64;
            flow[idx] = a - mean;
            idx = (idx + 1) % h;
        }
        flow
    }

    proptest! {
        #[test]
        fn depth_and_batch_bounds(
            a in 0.0f64..=1.0,
            l in 0.0f64..=1.0,
            t in 0.0f64..5_000.0,
            seed_flow in proptest::collection::vec(-1.0f64..=1.0, 10),
            tau in 0.0f64..2_000.0,
        ) {
            let cfg = SpecConfig::default();
            let mut state = FlowState::reset(&cfg);
            state.flow = seed_flow;
            state.tau_recent = tau;
            let out = adapt(&state, a, l, t, &cfg);
            prop_assert!(out.plan.depth >= cfg.d_min && out.plan.depth <= cfg.d_max);
            prop_assert!(out.plan.micro_batch >= 1);
            prop_assert_eq!(
                out.plan.micro_batch,
                (cfg.micro_batch_numerator / out.plan.depth).max(1)
            );
            // floor slack on the coupling
            prop_assert!(out.plan.micro_batch * out.plan.depth
                <= cfg.micro_batch_numerator + out.plan.depth);
            prop_assert!(out.audit.scale >= 1.0);
            if t >= cfg.tau_target {
                prop_assert_eq!(out.audit.scale, 1.0);
            }
            // purity
            let again = adapt(&state, a, l, t, &cfg);
            prop_assert_eq!(out, again);
        }

        #[test]
        fn raw_depth_nonincreasing_in_load(
            a in 0.0f64..=1.0,
            t in 0.0f64..2_000.0,
            l1 in 0.0f64..=1.0,
            l2 in 0.0f64..=1.0,
            seed_flow in proptest::collection::vec(-1.0f64..=1.0, 10),
        ) {
            let cfg = SpecConfig::default();
            let mut state = FlowState::reset(&cfg);
            state.flow = seed_flow;
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let out_lo = adapt(&state, a, lo, t, &cfg);
            let out_hi = adapt(&state, a, hi, t, &cfg);
            prop_assert!(out_hi.plan.raw_depth <= out_lo.plan.raw_depth + 1e-12);
        }

        #[test]
        fn flow_buffer_matches_brute_force_replay(
            inputs in proptest::collection::vec(0.0f64..=1.0, 1..40),
        ) {
            let cfg = SpecConfig::default();
            let mut state = FlowState::reset(&cfg);
            for &a in &inputs {
                state = adapt(&state, a, 0.0, 400.0, &cfg).state;
            }
            let expect = replay_flow(&inputs, cfg.h);
            for (got, want) in state.flow_vector().iter().zip(&expect) {
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }

        #[test]
        fn smoothing_is_a_contraction(
            tau in 0.0f64..2_000.0,
            a in 0.0f64..=1.0,
            t in 0.0f64..2_000.0,
        ) {
            let cfg = SpecConfig::default();
            let mut state = FlowState::reset(&cfg);
            state.tau_recent = tau;
            let out = adapt(&state, a, 0.0, t, &cfg);
            let proj = out.plan.projected_throughput;
            let lhs = (out.state.tau_recent - proj).abs();
            let rhs = 0.9 * (tau - proj).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}

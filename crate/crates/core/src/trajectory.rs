//! Nominal state/input sequences produced by the planner.

use std::ops::Range;

use crate::model::{
    rear_to_front, select_frame, step_euler, to_frame, ControlInput, Frame, VehicleParams, VehicleState,
};

/// One nominal sample. `state` is always in rear-axle coordinates; `frame`
/// is the representation the tracking controllers use at this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    pub state: VehicleState,
    pub input: ControlInput,
    pub frame: Frame,
}

impl TrajectoryStep {
    /// Nominal state expressed in `frame`.
    pub fn state_in(&self, frame: Frame, params: &VehicleParams) -> VehicleState {
        to_frame(&self.state, frame, params)
    }

    pub fn front_state(&self, params: &VehicleParams) -> VehicleState {
        rear_to_front(&self.state, params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub steps: Vec<TrajectoryStep>,
    /// Indices `k` where `steps[k].frame != steps[k - 1].frame`.
    pub switch_indices: Vec<usize>,
}

impl Trajectory {
    /// Build from `states.len() == inputs.len() + 1` rear-frame states. The
    /// final step carries `final_input` (the rest command).
    pub fn from_states_inputs(
        ts: f64,
        states: &[VehicleState],
        inputs: &[ControlInput],
        final_input: ControlInput,
    ) -> Self {
        assert_eq!(states.len(), inputs.len() + 1, "need one more state than inputs");
        let all_inputs: Vec<ControlInput> = inputs.iter().copied().chain(std::iter::once(final_input)).collect();
        let frames = frame_tags(&all_inputs);
        let steps = states
            .iter()
            .zip(&all_inputs)
            .zip(&frames)
            .map(|((s, u), f)| TrajectoryStep {
                state: VehicleState {
                    frame: Frame::Rear,
                    ..*s
                },
                input: *u,
                frame: *f,
            })
            .collect();
        Self::from_steps(ts, steps)
    }

    /// Wrap precomputed steps, deriving the switch indices from the tags.
    pub fn from_steps(ts: f64, steps: Vec<TrajectoryStep>) -> Self {
        let switch_indices = (1..steps.len())
            .filter(|&k| steps[k].frame != steps[k - 1].frame)
            .collect();
        Self {
            ts,
            steps,
            switch_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &VehicleState> {
        self.steps.iter().map(|s| &s.state)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &ControlInput> {
        self.steps.iter().map(|s| &s.input)
    }

    pub fn first(&self) -> Option<&TrajectoryStep> {
        self.steps.first()
    }

    pub fn last(&self) -> Option<&TrajectoryStep> {
        self.steps.last()
    }

    /// Range of the same-frame run that contains `index`.
    pub fn segment_range(&self, index: usize) -> Range<usize> {
        let index = index.min(self.len().saturating_sub(1));
        let start = self
            .switch_indices
            .iter()
            .rev()
            .find(|&&s| s <= index)
            .copied()
            .unwrap_or(0);
        let end = self
            .switch_indices
            .iter()
            .find(|&&s| s > index)
            .copied()
            .unwrap_or(self.len());
        start..end
    }

    /// Number of sign changes of the nominal speed, ignoring zeros.
    pub fn direction_changes(&self) -> usize {
        let mut last = 0.0_f64;
        let mut count = 0;
        for u in self.inputs() {
            if u.v.abs() < 1e-6 {
                continue;
            }
            if last != 0.0 && last.signum() != u.v.signum() {
                count += 1;
            }
            last = u.v;
        }
        count
    }

    /// Largest per-step discrepancy between the stored states and an Euler
    /// replay of the stored inputs.
    pub fn max_defect(&self, params: &VehicleParams) -> f64 {
        self.steps
            .windows(2)
            .map(|w| {
                let pred = step_euler(&w[0].state, &w[0].input, params, self.ts);
                (pred.to_vector() - w[1].state.to_vector()).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Open-loop replay from the first state, without resetting per step.
    pub fn replay(&self, params: &VehicleParams) -> Vec<VehicleState> {
        let mut out = Vec::with_capacity(self.len());
        let Some(first) = self.first() else {
            return out;
        };
        let mut x = first.state;
        out.push(x);
        for s in &self.steps[..self.len() - 1] {
            x = step_euler(&x, &s.input, params, self.ts);
            out.push(x);
        }
        out
    }
}

/// Tracking-frame tag for each input, holding the previous tag through
/// (near) zero speed. Leading zeros take the tag of the first moving step.
pub fn frame_tags(inputs: &[ControlInput]) -> Vec<Frame> {
    let initial = inputs
        .iter()
        .find(|u| u.v.abs() >= 1e-6)
        .map(|u| select_frame(u.v, Frame::Rear))
        .unwrap_or(Frame::Rear);
    let mut prev = initial;
    inputs
        .iter()
        .map(|u| {
            prev = select_frame(u.v, prev);
            prev
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trajectory {
        let p = VehicleParams::default();
        let inputs = vec![
            ControlInput::new(0.0, 0.0),
            ControlInput::new(-1.0, 0.1),
            ControlInput::new(-0.5, 0.1),
            ControlInput::new(0.0, -0.1),
            ControlInput::new(0.8, -0.1),
            ControlInput::new(1.0, 0.0),
        ];
        let mut states = vec![VehicleState::rear(0.0, 0.0, 0.5, 0.0)];
        for u in &inputs {
            let last = *states.last().unwrap();
            states.push(step_euler(&last, u, &p, 0.2));
        }
        Trajectory::from_states_inputs(0.2, &states, &inputs, ControlInput::ZERO)
    }

    #[test]
    fn frames_follow_speed_sign_with_hold() {
        let t = sample();
        let frames: Vec<Frame> = t.steps.iter().map(|s| s.frame).collect();
        use Frame::*;
        assert_eq!(frames, vec![Rear, Rear, Rear, Rear, Front, Front, Front]);
        assert_eq!(t.switch_indices, vec![4]);
        assert_eq!(t.direction_changes(), 1);
    }

    #[test]
    fn segments() {
        let t = sample();
        assert_eq!(t.segment_range(0), 0..4);
        assert_eq!(t.segment_range(3), 0..4);
        assert_eq!(t.segment_range(4), 4..7);
        assert_eq!(t.segment_range(100), 4..7);
    }

    #[test]
    fn replay_is_consistent() {
        let p = VehicleParams::default();
        let t = sample();
        assert!(t.max_defect(&p) < 1e-15);
        let replay = t.replay(&p);
        for (a, b) in replay.iter().zip(t.states()) {
            assert_eq!(a, b);
        }
    }
}

//! Adam optimizer over named parameter groups.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Adam with bias correction. Moment buffers are kept per registered
/// parameter group, addressed by name; the step counter is shared so all
/// groups see the same bias-correction schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    name: String,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// One parameter group update: the group's name, its parameters (mutated in
/// place), and the gradient of the current loss w.r.t. them.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, len: usize) {
        assert!(
            self.slots.iter().all(|s| s.name != name),
            "parameter group {name} registered twice"
        );
        self.slots.push(Slot {
            name: name.to_string(),
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        });
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one Adam step to every listed group. Rejects non-finite
    /// gradients (naming the offending group) before touching any state.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_>]) -> Result<()> {
        for u in updates.iter() {
            if u.grads.len() != u.params.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("adam group {}", u.name),
                    expected: u.params.len(),
                    got: u.grads.len(),
                });
            }
            if !u.grads.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteGradient(u.name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for u in updates.iter_mut() {
            let slot_idx = self
                .slots
                .iter()
                .position(|s| s.name == u.name)
                .unwrap_or_else(|| panic!("unregistered parameter group {}", u.name));
            let slot = &mut self.slots[slot_idx];
            debug_assert_eq!(slot.first_moment.len(), u.params.len());
            for i in 0..u.params.len() {
                let g = u.grads[i];
                slot.first_moment[i] = self.beta1 * slot.first_moment[i] + (1.0 - self.beta1) * g;
                slot.second_moment[i] =
                    self.beta2 * slot.second_moment[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.first_moment[i] / bc1;
                let v_hat = slot.second_moment[i] / bc2;
                u.params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut adam = Adam::new(0.1);
        adam.register("p", 3);
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.0; 3];
        adam.step(&mut [ParamUpdate {
            name: "p",
            params: &mut params,
            grads: &grads,
        }])
        .unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With g=1 the bias-corrected update is lr·1/(1+ε) ≈ lr.
        let mut adam = Adam::new(0.1);
        adam.register("p", 1);
        let mut params = vec![5.0];
        adam.step(&mut [ParamUpdate {
            name: "p",
            params: &mut params,
            grads: &[1.0],
        }])
        .unwrap();
        assert!((params[0] - 4.9).abs() < 1e-7, "param {}", params[0]);
    }

    #[test]
    fn constant_grad_moves_monotonically_against_it() {
        let mut adam = Adam::new(0.05);
        adam.register("p", 1);
        let mut params = vec![0.0];
        let mut prev = params[0];
        for _ in 0..50 {
            adam.step(&mut [ParamUpdate {
                name: "p",
                params: &mut params,
                grads: &[2.5],
            }])
            .unwrap();
            assert!(params[0] < prev);
            prev = params[0];
        }
    }

    #[test]
    fn non_finite_grad_is_rejected_with_name() {
        let mut adam = Adam::new(0.1);
        adam.register("proj.weights", 2);
        let mut params = vec![0.0, 0.0];
        let err = adam
            .step(&mut [ParamUpdate {
                name: "proj.weights",
                params: &mut params,
                grads: &[1.0, f64::NAN],
            }])
            .unwrap_err();
        assert!(err.to_string().contains("proj.weights"));
        // state untouched
        assert_eq!(adam.step_count(), 0);
    }
}

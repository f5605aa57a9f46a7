//! The virtual testbed robot: a nominal kinematic model plus the learned
//! residual, stepped deterministically (no noise) so rollouts are pure
//! functions of state, commands and model version.
//!
//! The nominal model responds to a body-twist command with the command
//! itself within one tick; commands are chassis-achievable by contract.
//! Everything the physical robot does beyond that (slip, friction, lag) is
//! the residual's job to reproduce.

use crate::learning::ModelParams;
use crate::plant::CameraObservation;
use crate::types::{wrap_angle, Pose2D, Timestamp, Twist2D};
use crate::kinematics::body_to_world;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("stale observation at {obs} behind twin state at {state}")]
    StaleObservation { obs: Timestamp, state: Timestamp },
}

/// Virtual robot state. The twist is kept in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub pose: Pose2D,
    /// Body-frame twist achieved over the last step.
    pub twist: Twist2D,
    pub t: Timestamp,
    /// Version of the model used for the last step.
    pub model_version: u64,
}

impl TwinState {
    pub fn at_rest(pose: Pose2D) -> Self {
        TwinState {
            pose,
            twist: Twist2D::zero(),
            t: Timestamp::ZERO,
            model_version: 0,
        }
    }
}

/// Advance the twin one step under a body-twist command.
///
/// The next twist is the nominal response (the command) plus the model's
/// predicted residual for the current (twist, command) pair; the pose
/// integrates with the same semi-implicit scheme as the plant.
pub fn twin_step(
    state: &TwinState,
    command: &Twist2D,
    model: &ModelParams,
    dt_ms: u64,
) -> TwinState {
    let dt_s = dt_ms as f64 / 1000.0;
    let residual = model.predict_residual(&state.twist, command);
    let next_body = Twist2D::new(
        command.vx + residual.vx,
        command.vy + residual.vy,
        command.omega + residual.omega,
    );
    let world = body_to_world(&next_body, state.pose.theta);
    let pose = Pose2D {
        x: state.pose.x + world.vx * dt_s,
        y: state.pose.y + world.vy * dt_s,
        theta: wrap_angle(state.pose.theta + next_body.omega * dt_s),
    };
    TwinState {
        pose,
        twist: next_body,
        t: state.t.advance(dt_ms),
        model_version: model.version,
    }
}

/// Roll the twin forward through a command sequence. Returns the full state
/// trajectory including the initial state (length = commands + 1).
pub fn twin_rollout(
    state: &TwinState,
    commands: &[Twist2D],
    model: &ModelParams,
    dt_ms: u64,
) -> Vec<TwinState> {
    let mut out = Vec::with_capacity(commands.len() + 1);
    out.push(*state);
    let mut current = *state;
    for command in commands {
        current = twin_step(&current, command, model, dt_ms);
        out.push(current);
    }
    out
}

/// Reset the twin pose to a camera observation (converted to millimeters),
/// keeping the twist. Observations older than the twin state are rejected.
pub fn twin_sync(state: &TwinState, observation: &CameraObservation) -> Result<TwinState, TwinError> {
    if observation.t < state.t {
        return Err(TwinError::StaleObservation {
            obs: observation.t,
            state: state.t,
        });
    }
    let pos = observation.pixel_pose.to_mm();
    Ok(TwinState {
        pose: Pose2D::new(pos.x, pos.y, observation.pixel_pose.theta),
        twist: state.twist,
        t: state.t,
        model_version: state.model_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{inverse_kinematics, ChassisGeometry};
    use crate::learning::{fit_least_squares, ReplayBuffer, Transition};
    use crate::plant::{Plant, PlantParams};
    use crate::types::PixelPose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn omni() -> ChassisGeometry {
        ChassisGeometry::default_omni()
    }

    #[test]
    fn zero_command_from_rest_is_fixed_point() {
        let state = TwinState::at_rest(Pose2D::new(10.0, 20.0, 0.5));
        let next = twin_step(&state, &Twist2D::zero(), &ModelParams::zero(), 8);
        assert_eq!(next.pose, state.pose);
        assert_eq!(next.twist, Twist2D::zero());
        assert_eq!(next.t.millis(), 8);
    }

    #[test]
    fn zero_residual_matches_disturbance_free_plant() {
        let mut plant = Plant::new(0, PlantParams::ideal(), omni(), Pose2D::default(), 1).unwrap();
        let mut twin = TwinState::at_rest(Pose2D::default());
        let model = ModelParams::zero();
        let command = Twist2D::new(200.0, 100.0, 0.3);
        let wheels = inverse_kinematics(&command, &omni()).unwrap().wheels;
        for _ in 0..300 {
            plant.step(&wheels, 8).unwrap();
            twin = twin_step(&twin, &command, &model, 8);
            assert!((twin.pose.x - plant.state().pose.x).abs() < 1e-9);
            assert!((twin.pose.y - plant.state().pose.y).abs() < 1e-9);
            assert!((twin.pose.theta - plant.state().pose.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn rollout_single_step_equals_twin_step() {
        let state = TwinState::at_rest(Pose2D::default());
        let cmd = Twist2D::new(100.0, 0.0, 0.1);
        let model = ModelParams::zero();
        let rollout = twin_rollout(&state, &[cmd], &model, 8);
        assert_eq!(rollout.len(), 2);
        assert_eq!(rollout[0], state);
        assert_eq!(rollout[1], twin_step(&state, &cmd, &model, 8));
    }

    #[test]
    fn rollout_constant_command_is_straight_line() {
        let state = TwinState::at_rest(Pose2D::default());
        let cmd = Twist2D::new(250.0, 0.0, 0.0);
        let model = ModelParams::zero();
        let traj = twin_rollout(&state, &vec![cmd; 50], &model, 8);
        assert_eq!(traj.len(), 51);
        for (k, s) in traj.iter().enumerate() {
            assert!((s.pose.x - 250.0 * 0.008 * k as f64).abs() < 1e-9);
            assert_eq!(s.pose.y, 0.0);
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let state = TwinState::at_rest(Pose2D::new(5.0, -3.0, 0.2));
        let cmds: Vec<Twist2D> = (0..40)
            .map(|k| Twist2D::new(k as f64, -(k as f64), 0.01 * k as f64))
            .collect();
        let model = ModelParams::zero();
        assert_eq!(
            twin_rollout(&state, &cmds, &model, 8),
            twin_rollout(&state, &cmds, &model, 8)
        );
    }

    /// Train a residual model on excitation data from one plant. Commands
    /// stay inside the wheel-speed envelope so the response is in the
    /// model family.
    fn train_on_plant(params: PlantParams, seed: u64) -> ModelParams {
        let mut plant = Plant::new(0, params, omni(), Pose2D::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let mut buffer = ReplayBuffer::new(4096);
        let mut prev = plant.body_twist();
        for _ in 0..2000 {
            let command = Twist2D::new(
                rng.random_range(-150.0..150.0),
                rng.random_range(-150.0..150.0),
                rng.random_range(-0.4..0.4),
            );
            let wheels = inverse_kinematics(&command, &omni()).unwrap().wheels;
            plant.step(&wheels, 8).unwrap();
            let next = plant.body_twist();
            buffer.push(Transition {
                twist: prev,
                command,
                next_twist: next,
            });
            prev = next;
        }
        let mut model = fit_least_squares(&buffer).unwrap();
        model.version = 1;
        model
    }

    #[test]
    fn residual_learns_slip_response_within_two_percent() {
        let mut params = PlantParams::ideal();
        params.slip_long = 0.3;
        let model = train_on_plant(params, 11);

        // held-out commands: compare one-step vx response
        let mut plant = Plant::new(0, params, omni(), Pose2D::default(), 99).unwrap();
        let mut twin = TwinState::at_rest(Pose2D::default());
        for &vx in &[150.0f64, 250.0, 350.0, -200.0] {
            let command = Twist2D::new(vx, 0.0, 0.0);
            let wheels = inverse_kinematics(&command, &omni()).unwrap().wheels;
            plant.step(&wheels, 8).unwrap();
            twin = twin_step(&twin, &command, &model, 8);
            let plant_vx = plant.body_twist().vx;
            assert!(
                (twin.twist.vx - plant_vx).abs() <= 0.02 * plant_vx.abs(),
                "twin {} vs plant {plant_vx}",
                twin.twist.vx
            );
            // keep both in the same state for the next probe
            twin.twist = plant.body_twist();
            twin.pose = plant.state().pose;
        }
    }

    #[test]
    fn rollout_error_grows_sublinearly_for_well_fit_model() {
        // Full disturbance set minus noise. Rollouts start from states along
        // a driven trajectory (the situation the corrector predicts from);
        // the average gap per step must not grow with the horizon.
        let mut params = PlantParams::default();
        params.process_noise_sigma = 0.0;
        params.sensors = crate::plant::SensorNoise::zero();
        let model = train_on_plant(params, 13);

        // evaluation commands drawn from the training distribution
        let eval_cmds: Vec<Twist2D> = {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            (0..400)
                .map(|_| {
                    Twist2D::new(
                        r.random_range(-150.0..150.0),
                        r.random_range(-150.0..150.0),
                        r.random_range(-0.4..0.4),
                    )
                })
                .collect()
        };
        let command_at = |k: usize| eval_cmds[k];
        let mut plant = Plant::new(0, params, omni(), Pose2D::default(), 55).unwrap();
        let total = 400usize;
        let mut states = Vec::with_capacity(total + 1);
        states.push((*plant.state(), plant.body_twist()));
        for k in 0..total {
            let wheels = inverse_kinematics(&command_at(k), &omni()).unwrap().wheels;
            plant.step(&wheels, 8).unwrap();
            states.push((*plant.state(), plant.body_twist()));
        }

        let horizons = [1usize, 10, 50];
        let mut mean_gap = [0.0f64; 3];
        let starts: Vec<usize> = (100..300).step_by(10).collect();
        for &k0 in &starts {
            let (ps, body) = states[k0];
            let twin0 = TwinState {
                pose: ps.pose,
                twist: body,
                t: ps.t,
                model_version: model.version,
            };
            let cmds: Vec<Twist2D> = (k0..k0 + 50).map(command_at).collect();
            let rollout = twin_rollout(&twin0, &cmds, &model, 8);
            for (hi, &h) in horizons.iter().enumerate() {
                let truth = states[k0 + h].0.pose.position();
                mean_gap[hi] += (rollout[h].pose.position() - truth).norm();
            }
        }
        for g in mean_gap.iter_mut() {
            *g /= starts.len() as f64;
        }
        let per_step: Vec<f64> = horizons
            .iter()
            .zip(mean_gap.iter())
            .map(|(h, g)| g / *h as f64)
            .collect();
        // sub-linear growth: the mean gap per step shrinks with the horizon
        assert!(
            per_step[1] <= per_step[0],
            "h=10 {} vs h=1 {}",
            per_step[1],
            per_step[0]
        );
        assert!(
            per_step[2] <= per_step[1],
            "h=50 {} vs h=10 {}",
            per_step[2],
            per_step[1]
        );
        assert!(mean_gap[2] < 1.0, "h=50 mean gap {} mm", mean_gap[2]);
    }

    #[test]
    fn sync_converts_pixels_to_mm() {
        let state = TwinState::at_rest(Pose2D::default());
        let obs = CameraObservation {
            robot_id: 0,
            pixel_pose: PixelPose::new(500, 500, 0.0),
            t: Timestamp::from_millis(8),
        };
        let synced = twin_sync(&state, &obs).unwrap();
        assert_eq!(synced.pose.x, 1250.0);
        assert_eq!(synced.pose.y, 1250.0);
        assert_eq!(synced.twist, state.twist);
    }

    #[test]
    fn sync_with_matching_pose_is_noop() {
        let state = TwinState::at_rest(Pose2D::new(1250.0, 1250.0, 0.0));
        let obs = CameraObservation {
            robot_id: 0,
            pixel_pose: PixelPose::new(500, 500, 0.0),
            t: Timestamp::ZERO,
        };
        let synced = twin_sync(&state, &obs).unwrap();
        assert_eq!(synced.pose, state.pose);
        assert_eq!(synced.t, state.t);
    }

    #[test]
    fn sync_rejects_stale_and_applies_last() {
        let mut state = TwinState::at_rest(Pose2D::default());
        state.t = Timestamp::from_millis(100);
        let stale = CameraObservation {
            robot_id: 0,
            pixel_pose: PixelPose::new(1, 1, 0.0),
            t: Timestamp::from_millis(50),
        };
        assert!(matches!(
            twin_sync(&state, &stale),
            Err(TwinError::StaleObservation { .. })
        ));
        let mk = |px: i32, t: u64| CameraObservation {
            robot_id: 0,
            pixel_pose: PixelPose::new(px, px, 0.0),
            t: Timestamp::from_millis(t),
        };
        let s1 = twin_sync(&state, &mk(10, 100)).unwrap();
        let s2 = twin_sync(&s1, &mk(20, 108)).unwrap();
        assert_eq!(s2.pose.x, 50.0); // 20 px = 50 mm
    }
}

//! Robot-side three-layer control: state estimation fused from encoders,
//! IMU, magnetic heading and the latency-compensated camera; the waypoint
//! position-setpoint generator; dynamic-level wheel allocation; per-motor
//! PID; and the twin-feedback command corrector.

use crate::kinematics::{
    body_to_world, forward_kinematics, inverse_kinematics, world_to_body, Actuation,
    ChassisGeometry, KinematicsError,
};
use crate::learning::ModelParams;
use crate::plant::{CameraObservation, SensorFrame};
use crate::types::{wrap_angle, Pose2D, Twist2D, Vec2, MM_PER_PX};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("waypoint plan exhausted")]
    PlanExhausted,
    #[error("no converged model snapshot available")]
    ModelUnavailable,
    #[error("invalid waypoint plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Fused robot state estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedState {
    /// Position, mm, world frame.
    pub x: f64,
    pub y: f64,
    /// Velocity, mm/s, world frame.
    pub vx: f64,
    pub vy: f64,
    /// Heading, rad.
    pub theta: f64,
    /// Angular rate, rad/s.
    pub omega: f64,
}

impl EstimatedState {
    pub fn from_pose(pose: Pose2D) -> Self {
        EstimatedState {
            x: pose.x,
            y: pose.y,
            vx: 0.0,
            vy: 0.0,
            theta: pose.theta,
            omega: 0.0,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn position_px(&self) -> Vec2 {
        Vec2::new(self.x / MM_PER_PX, self.y / MM_PER_PX)
    }

    /// Estimated twist rotated into the body frame.
    pub fn body_twist(&self) -> Twist2D {
        world_to_body(&Twist2D::new(self.vx, self.vy, self.omega), self.theta)
    }
}

/// Command fusion estimator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Correction gain toward a (propagated) camera observation, [0, 1].
    pub camera_gain: f64,
    /// Complementary weight on the gyro-integrated heading; the rest goes to
    /// the magnetic heading.
    pub gyro_weight: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            camera_gain: 0.85,
            gyro_weight: 0.98,
        }
    }
}

/// Fuses encoder dead reckoning, gyro/magnetic heading and camera fixes.
#[derive(Debug, Clone)]
pub struct StateEstimator {
    geometry: ChassisGeometry,
    config: EstimatorConfig,
}

impl StateEstimator {
    pub fn new(geometry: ChassisGeometry, config: EstimatorConfig) -> Self {
        StateEstimator { geometry, config }
    }

    /// Advance the estimate by one tick.
    ///
    /// Dead-reckons from the encoders through forward kinematics (rotating by
    /// the pre-update heading, the same scheme the plant integrates with),
    /// blends gyro and magnetic heading with complementary weights, and, when
    /// a camera fix is present, corrects position and heading toward the
    /// observation propagated forward over its transport age.
    pub fn fuse(
        &self,
        prev: &EstimatedState,
        sensors: &SensorFrame,
        camera: Option<&CameraObservation>,
        dt_ms: u64,
    ) -> EstimatedState {
        let dt_s = dt_ms as f64 / 1000.0;
        let cfg = &self.config;

        // heading: integrate gyro, pull toward the magnetic reading
        let theta_gyro = prev.theta + sensors.gyro * dt_s;
        let mut theta = wrap_angle(
            theta_gyro + (1.0 - cfg.gyro_weight) * wrap_angle(sensors.mag_theta - theta_gyro),
        );

        // dead reckoning from encoders
        let v_body = forward_kinematics(&Actuation::from_wheels(sensors.encoders), &self.geometry);
        let v_world = body_to_world(&v_body, prev.theta);
        let delta = Vec2::new(v_world.vx * dt_s, v_world.vy * dt_s);
        let mut pos = prev.position() + delta;

        if let Some(obs) = camera {
            // The observation shows the pose one transport delay ago;
            // propagate it forward with this tick's dead-reckoning delta
            // scaled by the age, then blend.
            let age_frac = sensors.t.since(obs.t) as f64 / dt_ms as f64;
            let propagated = obs.pixel_pose.to_mm() + delta * age_frac;
            pos = pos + (propagated - pos) * cfg.camera_gain;
            let obs_theta = obs.pixel_pose.theta + sensors.gyro * dt_s * age_frac;
            theta = wrap_angle(theta + cfg.camera_gain * wrap_angle(obs_theta - theta));
        }

        EstimatedState {
            x: pos.x,
            y: pos.y,
            vx: v_world.vx,
            vy: v_world.vy,
            theta,
            omega: sensors.gyro,
        }
    }
}

/// Waypoint sequence with the proportional setpoint generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPlan {
    targets: Vec<Vec2>,
    /// Arrival threshold, px, Chebyshev.
    pub threshold_px: f64,
    /// Proportional setpoint coefficient, (0, 1].
    pub epsilon_p: f64,
    index: usize,
}

impl WaypointPlan {
    pub fn new(targets: Vec<Vec2>, threshold_px: f64, epsilon_p: f64) -> Result<Self, ControlError> {
        if targets.is_empty() {
            return Err(ControlError::InvalidPlan("no waypoints".into()));
        }
        if !(epsilon_p > 0.0 && epsilon_p <= 1.0) {
            return Err(ControlError::InvalidPlan(format!(
                "epsilon_p must be in (0, 1], got {epsilon_p}"
            )));
        }
        if !(threshold_px > 0.0) {
            return Err(ControlError::InvalidPlan(format!(
                "threshold must be positive, got {threshold_px}"
            )));
        }
        Ok(WaypointPlan {
            targets,
            threshold_px,
            epsilon_p,
            index: 0,
        })
    }

    pub fn targets(&self) -> &[Vec2] {
        &self.targets
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn is_complete(&self) -> bool {
        self.index >= self.targets.len()
    }

    pub fn current_target(&self) -> Option<Vec2> {
        self.targets.get(self.index).copied()
    }

    /// Number of waypoints reached so far.
    pub fn reached(&self) -> usize {
        self.index
    }

    /// Proportional step toward the current target: `x + eps * (target - x)`
    /// per axis. Positions are in pixels.
    pub fn setpoint(&self, x: Vec2) -> Result<Vec2, ControlError> {
        let target = self.current_target().ok_or(ControlError::PlanExhausted)?;
        Ok(x + (target - x) * self.epsilon_p)
    }

    /// Advance to the next waypoint once within the arrival threshold
    /// (Chebyshev distance). Returns true if the index moved.
    pub fn advance(&mut self, x: Vec2) -> bool {
        match self.current_target() {
            Some(target) if (x - target).linf_norm() <= self.threshold_px => {
                self.index += 1;
                true
            }
            _ => false,
        }
    }
}

/// Per-motor PID gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Clamp on the integral state.
    pub integral_limit: f64,
    /// Saturation of the drive output, rad/s.
    pub output_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains {
            kp: 0.5,
            ki: 0.5,
            kd: 0.0,
            integral_limit: 4.0,
            output_limit: 10.0,
        }
    }
}

/// Discrete PID with clamped integral and saturated output.
///
/// The output is the correction term (zero at zero error); the caller adds it
/// to the wheel-speed feedforward.
#[derive(Debug, Clone, Default)]
pub struct MotorPid {
    pub gains: PidGains,
    integral: f64,
    prev_error: Option<f64>,
}

impl MotorPid {
    pub fn new(gains: PidGains) -> Self {
        MotorPid {
            gains,
            integral: 0.0,
            prev_error: None,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }

    /// One PID step; `measured` is the current-feedback proxy (encoder wheel
    /// speed), `dt_s` the control period in seconds.
    pub fn step(&mut self, setpoint: f64, measured: f64, dt_s: f64) -> f64 {
        let g = &self.gains;
        let error = setpoint - measured;
        self.integral = (self.integral + error * dt_s)
            .clamp(-g.integral_limit, g.integral_limit);
        let derivative = match self.prev_error {
            Some(prev) if dt_s > 0.0 => (error - prev) / dt_s,
            _ => 0.0,
        };
        self.prev_error = Some(error);
        (g.kp * error + g.ki * self.integral + g.kd * derivative)
            .clamp(-g.output_limit, g.output_limit)
    }
}

/// The three-layer command chain for one tick: fusion-level, dynamic-level
/// and measured per-motor values, each sized to the chassis motor count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandLayers {
    /// Fusion-layer per-motor command.
    pub q_c: Vec<f64>,
    /// Dynamic-layer per-motor command.
    pub q_d: Vec<f64>,
    /// Per-motor feedback (encoder speed as the current proxy).
    pub q_m: Vec<f64>,
}

/// Rotate a world-frame velocity setpoint into the body frame and allocate
/// it to wheel setpoints.
pub fn allocate_dynamic(
    setpoint_vel: &Twist2D,
    est: &EstimatedState,
    geometry: &ChassisGeometry,
) -> Result<Actuation, ControlError> {
    let body = world_to_body(setpoint_vel, est.theta);
    Ok(inverse_kinematics(&body, geometry)?)
}

/// Damping factor of the corrector's fixed-point iteration.
pub const CORRECT_GAMMA: f64 = 0.5;

/// Iteration cap of the corrector.
pub const CORRECT_MAX_ITERS: usize = 20;

/// Weight (mm) converting angular-rate error into an equivalent rim-speed
/// error for the corrector's residual norm.
const OMEGA_WEIGHT_MM: f64 = 350.0;

fn prediction_error(model: &ModelParams, v: &Twist2D, u: &Twist2D, desired: &Twist2D) -> f64 {
    let pred = model.predict_next(v, u);
    let ex = pred.vx - desired.vx;
    let ey = pred.vy - desired.vy;
    let ew = (pred.omega - desired.omega) * OMEGA_WEIGHT_MM;
    (ex * ex + ey * ey + ew * ew).sqrt()
}

/// Invert the learned one-step model around the current state: find the
/// command whose predicted response is the nominal setpoint velocity.
///
/// Runs the damped fixed-point iteration `u <- u + gamma * (desired -
/// f(state, u))` for at most [`CORRECT_MAX_ITERS`] steps and falls back to
/// the nominal command if the result does not predict better.
pub fn twin_correct(nominal: &Twist2D, est: &EstimatedState, model: &ModelParams) -> Twist2D {
    let v = est.body_twist();
    let desired = world_to_body(nominal, est.theta);
    let mut u = desired;
    for _ in 0..CORRECT_MAX_ITERS {
        let pred = model.predict_next(&v, &u);
        let step = Twist2D::new(
            desired.vx - pred.vx,
            desired.vy - pred.vy,
            desired.omega - pred.omega,
        );
        u.vx += CORRECT_GAMMA * step.vx;
        u.vy += CORRECT_GAMMA * step.vy;
        u.omega += CORRECT_GAMMA * step.omega;
        if step.linear_speed() + step.omega.abs() * OMEGA_WEIGHT_MM < 1e-9 {
            break;
        }
    }
    if !u.is_finite()
        || prediction_error(model, &v, &u, &desired)
            > prediction_error(model, &v, &desired, &desired)
    {
        return *nominal;
    }
    body_to_world(&u, est.theta)
}

/// [`twin_correct`] behind the snapshot-availability contract: errors when
/// no converged snapshot exists so callers fall back to the nominal command.
pub fn twin_correct_checked(
    nominal: &Twist2D,
    est: &EstimatedState,
    model: Option<&ModelParams>,
) -> Result<Twist2D, ControlError> {
    match model {
        Some(m) if m.converged => Ok(twin_correct(nominal, est, m)),
        _ => Err(ControlError::ModelUnavailable),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{Plant, PlantParams};
    use std::f64::consts::FRAC_PI_2;

    fn omni() -> ChassisGeometry {
        ChassisGeometry::default_omni()
    }

    fn estimator(camera_gain: f64) -> StateEstimator {
        StateEstimator::new(
            omni(),
            EstimatorConfig {
                camera_gain,
                gyro_weight: 0.98,
            },
        )
    }

    #[test]
    fn fuse_full_correction_is_exact_on_grid() {
        // Stationary robot on a pixel grid point, zero noise, camera gain 1:
        // the estimate must equal the true pose exactly.
        let mut plant = Plant::new(
            0,
            PlantParams::ideal(),
            omni(),
            Pose2D::new(1250.0, 1250.0, 0.0),
            1,
        )
        .unwrap();
        let est0 = EstimatedState::from_pose(Pose2D::new(0.0, 0.0, 0.0)); // wrong prior
        let fuser = estimator(1.0);
        plant.step(&crate::types::WheelSpeeds::zero(), 8).unwrap();
        let sensors = plant.sense(8);
        let obs = plant.observe_camera().unwrap();
        let est = fuser.fuse(&est0, &sensors, Some(&obs), 8);
        assert_eq!(est.x, 1250.0);
        assert_eq!(est.y, 1250.0);
        assert_eq!(est.theta, 0.0);
    }

    #[test]
    fn fuse_tracks_moving_robot_within_quantization() {
        use crate::kinematics::inverse_kinematics;
        let mut plant = Plant::new(
            0,
            PlantParams::ideal(),
            omni(),
            Pose2D::new(1250.0, 1250.0, 0.0),
            2,
        )
        .unwrap();
        let fuser = estimator(1.0);
        let mut est = EstimatedState::from_pose(Pose2D::new(1250.0, 1250.0, 0.0));
        let cmd = inverse_kinematics(&Twist2D::new(200.0, 120.0, 0.3), &omni())
            .unwrap()
            .wheels;
        let mut pending_obs: Option<crate::plant::CameraObservation> = None;
        for _ in 0..500 {
            plant.step(&cmd, 8).unwrap();
            let sensors = plant.sense(8);
            let obs = pending_obs.take();
            est = fuser.fuse(&est, &sensors, obs.as_ref(), 8);
            pending_obs = plant.observe_camera();
        }
        // error bounded by camera quantization (half-pixel = 1.25 mm/axis)
        let err = (est.position() - plant.state().pose.position()).norm();
        assert!(err <= 2.6, "tracking error {err} mm");
    }

    #[test]
    fn fuse_without_camera_equals_kinematic_integration() {
        use crate::kinematics::inverse_kinematics;
        let mut plant = Plant::new(0, PlantParams::ideal(), omni(), Pose2D::default(), 3).unwrap();
        let fuser = estimator(0.9);
        let mut est = EstimatedState::from_pose(Pose2D::default());
        let cmd = inverse_kinematics(&Twist2D::new(150.0, -80.0, 0.4), &omni())
            .unwrap()
            .wheels;
        for _ in 0..300 {
            plant.step(&cmd, 8).unwrap();
            let sensors = plant.sense(8);
            est = fuser.fuse(&est, &sensors, None, 8);
        }
        // no slip, perfect encoders: dead reckoning is exact
        assert!((est.x - plant.state().pose.x).abs() < 1e-9);
        assert!((est.y - plant.state().pose.y).abs() < 1e-9);
        assert!((est.theta - plant.state().pose.theta).abs() < 1e-9);
    }

    #[test]
    fn fusion_beats_dead_reckoning_under_noise() {
        use crate::kinematics::inverse_kinematics;
        // full default disturbances: dead reckoning cannot see slip and
        // drifts, camera fusion stays locked on
        let params = PlantParams::default();
        let mut plant = Plant::new(0, params, omni(), Pose2D::default(), 4).unwrap();
        let fuser = estimator(0.85);
        let mut fused = EstimatedState::from_pose(Pose2D::default());
        let mut dead = EstimatedState::from_pose(Pose2D::default());
        let cmd = inverse_kinematics(&Twist2D::new(180.0, 90.0, 0.2), &omni())
            .unwrap()
            .wheels;
        let mut pending_obs: Option<crate::plant::CameraObservation> = None;
        let (mut se_fused, mut se_dead) = (0.0, 0.0);
        for _ in 0..1000 {
            plant.step(&cmd, 8).unwrap();
            let sensors = plant.sense(8);
            let obs = pending_obs.take();
            fused = fuser.fuse(&fused, &sensors, obs.as_ref(), 8);
            dead = fuser.fuse(&dead, &sensors, None, 8);
            pending_obs = plant.observe_camera();
            let truth = plant.state().pose.position();
            se_fused += (fused.position() - truth).norm().powi(2);
            se_dead += (dead.position() - truth).norm().powi(2);
        }
        let rmse_fused = (se_fused / 1000.0).sqrt();
        let rmse_dead = (se_dead / 1000.0).sqrt();
        assert!(
            rmse_fused < rmse_dead,
            "fused {rmse_fused} vs dead-reckoned {rmse_dead}"
        );
    }

    #[test]
    fn setpoint_fixed_point_at_target() {
        let plan =
            WaypointPlan::new(vec![Vec2::new(100.0, 50.0)], 30.0, 0.2).unwrap();
        let x = Vec2::new(100.0, 50.0);
        assert_eq!(plan.setpoint(x).unwrap(), x);
    }

    #[test]
    fn setpoint_proportional_step() {
        let plan = WaypointPlan::new(vec![Vec2::new(100.0, 0.0)], 30.0, 0.1).unwrap();
        let s = plan.setpoint(Vec2::new(0.0, 0.0)).unwrap();
        assert_eq!(s, Vec2::new(10.0, 0.0));
    }

    #[test]
    fn setpoint_sequence_decays_geometrically() {
        // x(k) tracking the setpoint exactly: error shrinks by (1 - eps)
        // per step, matching the closed form.
        let eps = 0.2;
        let plan = WaypointPlan::new(vec![Vec2::new(200.0, -100.0)], 30.0, eps).unwrap();
        let target = plan.current_target().unwrap();
        let mut x = Vec2::new(0.0, 0.0);
        let initial = (x - target).norm();
        for k in 1..=40 {
            x = plan.setpoint(x).unwrap();
            let expected = initial * (1.0 - eps).powi(k);
            assert!(
                ((x - target).norm() - expected).abs() < 1e-9 * (1.0 + expected),
                "step {k}"
            );
        }
    }

    #[test]
    fn advance_within_threshold_only() {
        let mut plan = WaypointPlan::new(
            vec![Vec2::new(500.0, 500.0), Vec2::new(500.0, 900.0)],
            30.0,
            0.2,
        )
        .unwrap();
        assert!(!plan.advance(Vec2::new(500.0, 469.0))); // 31 px away
        assert_eq!(plan.index(), 0);
        assert!(plan.advance(Vec2::new(500.0, 470.0))); // exactly 30 px
        assert_eq!(plan.index(), 1);
        assert!(!plan.is_complete());
        assert!(plan.advance(Vec2::new(495.0, 905.0)));
        assert!(plan.is_complete());
        assert!(matches!(
            plan.setpoint(Vec2::new(0.0, 0.0)),
            Err(ControlError::PlanExhausted)
        ));
    }

    #[test]
    fn plan_validation() {
        assert!(WaypointPlan::new(vec![], 30.0, 0.2).is_err());
        assert!(WaypointPlan::new(vec![Vec2::new(0.0, 0.0)], 30.0, 0.0).is_err());
        assert!(WaypointPlan::new(vec![Vec2::new(0.0, 0.0)], 30.0, 1.5).is_err());
        assert!(WaypointPlan::new(vec![Vec2::new(0.0, 0.0)], -1.0, 0.2).is_err());
    }

    #[test]
    fn pid_zero_error_zero_output() {
        let mut pid = MotorPid::new(PidGains::default());
        assert_eq!(pid.step(5.0, 5.0, 0.008), 0.0);
    }

    #[test]
    fn pid_pure_proportional() {
        let mut pid = MotorPid::new(PidGains {
            kp: 2.0,
            ki: 0.0,
            kd: 0.0,
            integral_limit: 1.0,
            output_limit: 100.0,
        });
        assert_eq!(pid.step(4.0, 1.0, 0.008), 6.0);
    }

    #[test]
    fn pid_output_saturates() {
        let mut pid = MotorPid::new(PidGains {
            kp: 100.0,
            ki: 0.0,
            kd: 0.0,
            integral_limit: 1.0,
            output_limit: 10.0,
        });
        assert_eq!(pid.step(100.0, 0.0, 0.008), 10.0);
    }

    #[test]
    fn pid_settles_on_first_order_motor() {
        // Closed loop against the plant's motor lag: step setpoint settles
        // within 2 % in at most 10 * motor_tau without diverging.
        let mut params = PlantParams::ideal();
        params.motor_tau = 40.0;
        let mut plant = Plant::new(0, params, omni(), Pose2D::default(), 5).unwrap();
        let mut pid = MotorPid::new(PidGains::default());
        let setpoint = 5.0; // rad/s
        let budget_ticks = (10.0 * 40.0 / 8.0) as usize;
        let mut settled_at = None;
        for tick in 0..budget_ticks {
            let measured = plant.state().wheel_actual.r[0];
            let correction = pid.step(setpoint, measured, 0.008);
            let cmd = (setpoint + correction).clamp(-10.0, 10.0);
            plant
                .step(&crate::types::WheelSpeeds::new([cmd; 4]), 8)
                .unwrap();
            let w = plant.state().wheel_actual.r[0];
            assert!(w.abs() < 50.0, "diverged at tick {tick}");
            if settled_at.is_none() && (w - setpoint).abs() <= 0.02 * setpoint {
                settled_at = Some(tick);
            }
        }
        assert!(settled_at.is_some(), "did not settle within 10 tau");
        // stays settled at the end
        assert!((plant.state().wheel_actual.r[0] - setpoint).abs() <= 0.02 * setpoint);
    }

    #[test]
    fn allocate_zero_velocity_zero_wheels() {
        let est = EstimatedState::from_pose(Pose2D::default());
        let a = allocate_dynamic(&Twist2D::zero(), &est, &omni()).unwrap();
        assert_eq!(a.wheels, crate::types::WheelSpeeds::zero());
    }

    #[test]
    fn allocate_identity_rotation_matches_ik() {
        let est = EstimatedState::from_pose(Pose2D::default());
        let v = Twist2D::new(100.0, 50.0, 0.3);
        let a = allocate_dynamic(&v, &est, &omni()).unwrap();
        let direct = inverse_kinematics(&v, &omni()).unwrap();
        assert_eq!(a, direct);
    }

    #[test]
    fn allocate_quarter_turn_swaps_axes() {
        let est = EstimatedState::from_pose(Pose2D::new(0.0, 0.0, FRAC_PI_2));
        // world +x at heading pi/2 is body -y... check against direct IK of
        // the rotated twist
        let a = allocate_dynamic(&Twist2D::new(100.0, 0.0, 0.0), &est, &omni()).unwrap();
        let expected = inverse_kinematics(&Twist2D::new(0.0, -100.0, 0.0), &omni()).unwrap();
        for i in 0..4 {
            assert!((a.wheels.r[i] - expected.wheels.r[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn correct_identity_model_returns_nominal() {
        let est = EstimatedState::from_pose(Pose2D::default());
        let model = ModelParams::zero(); // residual 0: predicted response == command
        let nominal = Twist2D::new(120.0, -40.0, 0.5);
        let corrected = twin_correct(&nominal, &est, &model);
        assert!((corrected.vx - nominal.vx).abs() < 1e-9);
        assert!((corrected.vy - nominal.vy).abs() < 1e-9);
        assert!((corrected.omega - nominal.omega).abs() < 1e-9);
    }

    fn slip_model(s: f64) -> ModelParams {
        // residual_vx = -s * ux  ->  predicted vx = (1 - s) ux
        let mut model = ModelParams::zero();
        model.weights[0][3] = -s;
        model.converged = true;
        model
    }

    #[test]
    fn correct_inverts_small_slip_command_exactly() {
        // d = 0.1 mm/s: 20 damped iterations reach the analytic inverse
        // d / (1 - s) within 1e-6.
        let est = EstimatedState::from_pose(Pose2D::default());
        let model = slip_model(0.2);
        let corrected = twin_correct(&Twist2D::new(0.1, 0.0, 0.0), &est, &model);
        assert!((corrected.vx - 0.1 / 0.8).abs() < 1e-6);
    }

    #[test]
    fn correct_inverts_slip_at_speed() {
        let est = EstimatedState::from_pose(Pose2D::default());
        let model = slip_model(0.2);
        let d = 300.0;
        let corrected = twin_correct(&Twist2D::new(d, 0.0, 0.0), &est, &model);
        let exact = d / 0.8;
        assert!(
            (corrected.vx - exact).abs() <= 1e-4 * exact,
            "{} vs {exact}",
            corrected.vx
        );
        // the corrected command must predict closer to desired than nominal
        let v = est.body_twist();
        let pred = model.predict_next(&v, &world_to_body(&corrected, est.theta));
        assert!((pred.vx - d).abs() < (model.predict_next(&v, &Twist2D::new(d, 0.0, 0.0)).vx - d).abs());
    }

    #[test]
    fn correct_checked_requires_converged_snapshot() {
        let est = EstimatedState::from_pose(Pose2D::default());
        let nominal = Twist2D::new(100.0, 0.0, 0.0);
        assert!(matches!(
            twin_correct_checked(&nominal, &est, None),
            Err(ControlError::ModelUnavailable)
        ));
        let mut unconverged = slip_model(0.2);
        unconverged.converged = false;
        assert!(matches!(
            twin_correct_checked(&nominal, &est, Some(&unconverged)),
            Err(ControlError::ModelUnavailable)
        ));
        let ok = twin_correct_checked(&nominal, &est, Some(&slip_model(0.2))).unwrap();
        assert!(ok.vx > nominal.vx);
    }

    #[test]
    fn correct_never_worsens_predicted_error() {
        // adversarial model: large wrong-signed weights make the fixed point
        // diverge; the fallback must return the nominal command
        let est = EstimatedState::from_pose(Pose2D::default());
        let mut model = ModelParams::zero();
        model.weights[0][3] = 5.0; // f(u) = 6u: iteration map expands
        model.converged = true;
        let nominal = Twist2D::new(100.0, 0.0, 0.0);
        let corrected = twin_correct(&nominal, &est, &model);
        let v = est.body_twist();
        let err_corr = (model.predict_next(&v, &corrected).vx - 100.0).abs();
        let err_nom = (model.predict_next(&v, &nominal).vx - 100.0).abs();
        assert!(err_corr <= err_nom);
    }
}

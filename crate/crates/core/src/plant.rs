//! The simulated physical testbed: ground-truth robot dynamics with motor
//! lag, saturation, slip, friction and process noise, plus sensor and
//! overhead-camera emulation and the transport latency queues.
//!
//! The plant hides the disturbance parameters from the rest of the system;
//! the learning server has to identify them from telemetry. All randomness
//! comes from a seeded ChaCha8 stream so that identical (seed, params,
//! command) inputs reproduce bit-identical trajectories.

use crate::kinematics::{body_to_world, forward_kinematics, Actuation, ChassisGeometry};
use crate::types::{wrap_angle, PixelPose, Pose2D, Timestamp, Twist2D, WheelSpeeds, MM_PER_PX};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

/// Command-path latency, ms: 12 ms wireless one-way plus 13 ms processing.
pub const CMD_LATENCY_MS: u64 = 25;

/// Observation-path latency, ms: 6 ms image compute plus 1 ms fusion.
pub const OBS_LATENCY_MS: u64 = 7;

/// Camera localization period, ms (120 Hz).
pub const CAMERA_PERIOD_MS: u64 = 8;

#[derive(Debug, Error)]
pub enum PlantError {
    /// A state component overflowed; usually mis-tuned parameters.
    #[error("non-finite plant state: {0}")]
    NonFiniteState(String),
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
}

/// Per-channel sensor noise, standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Accelerometer, mm/s^2.
    pub accel_sigma: f64,
    /// Gyro, rad/s.
    pub gyro_sigma: f64,
    /// Magnetic heading, rad.
    pub mag_sigma: f64,
    /// Wheel encoders, rad/s.
    pub encoder_sigma: f64,
    /// Camera pixel position, px.
    pub pixel_sigma: f64,
    /// Camera heading, rad.
    pub camera_theta_sigma: f64,
}

impl SensorNoise {
    pub fn zero() -> Self {
        SensorNoise {
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            mag_sigma: 0.0,
            encoder_sigma: 0.0,
            pixel_sigma: 0.0,
            camera_theta_sigma: 0.0,
        }
    }
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise {
            accel_sigma: 50.0,
            gyro_sigma: 0.02,
            mag_sigma: 0.03,
            encoder_sigma: 0.05,
            pixel_sigma: 1.0,
            camera_theta_sigma: 0.01,
        }
    }
}

/// Hidden ground-truth dynamics parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Steady-state ratio of achieved to commanded wheel speed.
    pub motor_gain: f64,
    /// First-order motor lag time constant, ms.
    pub motor_tau: f64,
    /// Wheel speed saturation, rad/s.
    pub wheel_speed_max: f64,
    /// Longitudinal slip: fraction of commanded forward speed lost, [0, 1).
    pub slip_long: f64,
    /// Lateral drift coupling: mm/s of sideways drift per mm/s of forward
    /// speed.
    pub slip_lat: f64,
    /// Coulomb friction expressed as a speed decay rate, mm/s^2.
    pub coulomb_friction: f64,
    /// Viscous friction rate, 1/s.
    pub viscous_friction: f64,
    /// Process noise on the body linear velocity, mm/s.
    pub process_noise_sigma: f64,
    /// Below this linear speed the robot sticks if it is not being driven
    /// harder than the same breakaway level, mm/s.
    pub stiction_speed: f64,
    pub sensors: SensorNoise,
}

impl PlantParams {
    /// Disturbance-free parameters with a near-instant motor: the plant then
    /// matches pure kinematic integration, which the oracle tests rely on.
    pub fn ideal() -> Self {
        PlantParams {
            motor_gain: 1.0,
            motor_tau: 1e-6,
            wheel_speed_max: 10.0,
            slip_long: 0.0,
            slip_lat: 0.0,
            coulomb_friction: 0.0,
            viscous_friction: 0.0,
            process_noise_sigma: 0.0,
            stiction_speed: 0.0,
            sensors: SensorNoise::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.motor_tau > 0.0) {
            return Err(PlantError::InvalidParams(format!(
                "motor_tau must be positive, got {}",
                self.motor_tau
            )));
        }
        if !(0.0..1.0).contains(&self.slip_long) {
            return Err(PlantError::InvalidParams(format!(
                "slip_long must be in [0, 1), got {}",
                self.slip_long
            )));
        }
        if !(self.wheel_speed_max > 0.0) {
            return Err(PlantError::InvalidParams(
                "wheel_speed_max must be positive".into(),
            ));
        }
        let sigmas = [
            self.process_noise_sigma,
            self.sensors.accel_sigma,
            self.sensors.gyro_sigma,
            self.sensors.mag_sigma,
            self.sensors.encoder_sigma,
            self.sensors.pixel_sigma,
            self.sensors.camera_theta_sigma,
        ];
        if sigmas.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(PlantError::InvalidParams("negative noise sigma".into()));
        }
        Ok(())
    }
}

impl Default for PlantParams {
    /// Calibrated defaults: disturbance magnitudes chosen so the baseline
    /// waypoint experiment lands in its reference error band.
    fn default() -> Self {
        PlantParams {
            motor_gain: 1.0,
            motor_tau: 40.0,
            wheel_speed_max: 10.0,
            slip_long: 0.22,
            slip_lat: 0.35,
            coulomb_friction: 30.0,
            viscous_friction: 0.3,
            process_noise_sigma: 4.0,
            stiction_speed: 12.0,
            sensors: SensorNoise::default(),
        }
    }
}

/// Ground-truth robot state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub pose: Pose2D,
    /// World-frame twist achieved over the last step.
    pub twist: Twist2D,
    /// Wheel speeds after motor lag and saturation.
    pub wheel_actual: WheelSpeeds,
    pub t: Timestamp,
}

impl PlantState {
    pub fn at_rest(pose: Pose2D) -> Self {
        PlantState {
            pose,
            twist: Twist2D::zero(),
            wheel_actual: WheelSpeeds::zero(),
            t: Timestamp::ZERO,
        }
    }
}

/// Onboard sensor readings for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    /// World-frame acceleration (x, y) plus gravity on z, mm/s^2.
    pub accel: [f64; 3],
    /// Angular rate, rad/s.
    pub gyro: f64,
    /// Magnetic heading, rad.
    pub mag_theta: f64,
    /// Encoder wheel speeds, rad/s.
    pub encoders: WheelSpeeds,
    pub t: Timestamp,
}

/// One overhead-camera detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraObservation {
    pub robot_id: u8,
    pub pixel_pose: PixelPose,
    pub t: Timestamp,
}

/// FIFO queue whose entries become visible only after a fixed latency.
#[derive(Debug, Clone)]
pub struct DelayQueue<T> {
    latency_ms: u64,
    entries: VecDeque<(Timestamp, T)>,
}

impl<T> DelayQueue<T> {
    pub fn new(latency_ms: u64) -> Self {
        DelayQueue {
            latency_ms,
            entries: VecDeque::new(),
        }
    }

    pub fn latency_ms(&self) -> u64 {
        self.latency_ms
    }

    /// Enqueue a payload that becomes visible at `now + latency`.
    pub fn push(&mut self, payload: T, now: Timestamp) {
        self.entries.push_back((now.advance(self.latency_ms), payload));
    }

    /// Pop the oldest payload whose delivery time has been reached.
    pub fn pop_ready(&mut self, now: Timestamp) -> Option<T> {
        match self.entries.front() {
            Some((deliver_at, _)) if *deliver_at <= now => {
                self.entries.pop_front().map(|(_, p)| p)
            }
            _ => None,
        }
    }

    /// Pop everything deliverable at `now`, in FIFO order.
    pub fn drain_ready(&mut self, now: Timestamp) -> Vec<T> {
        let mut out = Vec::new();
        while let Some(p) = self.pop_ready(now) {
            out.push(p);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The simulated physical robot.
pub struct Plant {
    pub robot_id: u8,
    params: PlantParams,
    geometry: ChassisGeometry,
    state: PlantState,
    /// World twist before the last step, for the accelerometer model.
    prev_twist: Twist2D,
    /// Body twist achieved over the last step.
    body_twist: Twist2D,
    rng: ChaCha8Rng,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    }
}

impl Plant {
    pub fn new(
        robot_id: u8,
        params: PlantParams,
        geometry: ChassisGeometry,
        initial_pose: Pose2D,
        seed: u64,
    ) -> Result<Self, PlantError> {
        params.validate()?;
        Ok(Plant {
            robot_id,
            params,
            geometry,
            state: PlantState::at_rest(initial_pose),
            prev_twist: Twist2D::zero(),
            body_twist: Twist2D::zero(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn geometry(&self) -> &ChassisGeometry {
        &self.geometry
    }

    /// Body-frame twist achieved over the last step.
    pub fn body_twist(&self) -> Twist2D {
        self.body_twist
    }

    /// Advance the ground truth by one step of `dt_ms` under the given wheel
    /// command.
    ///
    /// The order is: motor lag toward the saturated command, ideal kinematic
    /// twist, slip and friction disturbances, process noise, then
    /// semi-implicit Euler pose integration (position advances with the new
    /// twist rotated by the pre-step heading).
    pub fn step(&mut self, wheel_cmd: &WheelSpeeds, dt_ms: u64) -> Result<&PlantState, PlantError> {
        debug_assert!(dt_ms > 0);
        let p = &self.params;
        let dt_s = dt_ms as f64 / 1000.0;

        // 1. first-order lag toward the clamped command
        let alpha = 1.0 - (-(dt_ms as f64) / p.motor_tau).exp();
        let max = p.wheel_speed_max;
        for i in 0..4 {
            let target = (p.motor_gain * wheel_cmd.r[i]).clamp(-max, max);
            self.state.wheel_actual.r[i] += alpha * (target - self.state.wheel_actual.r[i]);
        }

        // 2. ideal body twist from the wheels that actually turned
        let ideal = forward_kinematics(
            &Actuation::from_wheels(self.state.wheel_actual),
            &self.geometry,
        );

        // 3. slip, viscous and Coulomb friction, stiction
        let mut vx = ideal.vx * (1.0 - p.slip_long);
        let mut vy = ideal.vy + p.slip_lat * ideal.vx;
        let mut omega = ideal.omega;

        let viscous = (1.0 - p.viscous_friction * dt_s).max(0.0);
        vx *= viscous;
        vy *= viscous;
        omega *= viscous;

        let speed = vx.hypot(vy);
        let coulomb_drop = p.coulomb_friction * dt_s;
        if speed > 0.0 {
            let keep = (speed - coulomb_drop).max(0.0) / speed;
            vx *= keep;
            vy *= keep;
        }

        // Breakaway level equals the stiction speed; rotation counts via its
        // rim speed so a commanded spin does not stick.
        let lever = self.geometry.half_length + self.geometry.half_width;
        let drive_level = ideal.linear_speed().max(lever * ideal.omega.abs());
        if vx.hypot(vy) < p.stiction_speed && drive_level < p.stiction_speed {
            vx = 0.0;
            vy = 0.0;
            omega = 0.0;
        }

        // 4. process noise on the body linear velocity
        vx += gauss(&mut self.rng, p.process_noise_sigma);
        vy += gauss(&mut self.rng, p.process_noise_sigma);

        // 5. integrate
        let body = Twist2D::new(vx, vy, omega);
        let world = body_to_world(&body, self.state.pose.theta);
        self.prev_twist = self.state.twist;
        self.body_twist = body;
        self.state.twist = world;
        self.state.pose.x += world.vx * dt_s;
        self.state.pose.y += world.vy * dt_s;
        self.state.pose.theta = wrap_angle(self.state.pose.theta + omega * dt_s);
        self.state.t = self.state.t.advance(dt_ms);

        let finite = self.state.pose.x.is_finite()
            && self.state.pose.y.is_finite()
            && self.state.pose.theta.is_finite()
            && self.state.twist.is_finite()
            && self.state.wheel_actual.is_finite();
        if !finite {
            return Err(PlantError::NonFiniteState(format!(
                "at t={} pose={:?}",
                self.state.t, self.state.pose
            )));
        }
        Ok(&self.state)
    }

    /// Emulate the onboard IMU, magnetic sensor and wheel encoders.
    pub fn sense(&mut self, dt_ms: u64) -> SensorFrame {
        let p = self.params;
        let dt_s = dt_ms as f64 / 1000.0;
        let ax = (self.state.twist.vx - self.prev_twist.vx) / dt_s
            + gauss(&mut self.rng, p.sensors.accel_sigma);
        let ay = (self.state.twist.vy - self.prev_twist.vy) / dt_s
            + gauss(&mut self.rng, p.sensors.accel_sigma);
        let az = crate::types::GRAVITY_MM_S2 + gauss(&mut self.rng, p.sensors.accel_sigma);
        let gyro = self.state.twist.omega + gauss(&mut self.rng, p.sensors.gyro_sigma);
        let mag_theta = wrap_angle(self.state.pose.theta + gauss(&mut self.rng, p.sensors.mag_sigma));
        let mut encoders = self.state.wheel_actual;
        for r in encoders.r.iter_mut() {
            *r += gauss(&mut self.rng, p.sensors.encoder_sigma);
        }
        SensorFrame {
            accel: [ax, ay, az],
            gyro,
            mag_theta,
            encoders,
            t: self.state.t,
        }
    }

    /// Emulate the overhead localization: a quantized pixel pose on every
    /// camera tick (t divisible by 8 ms), nothing otherwise.
    pub fn observe_camera(&mut self) -> Option<CameraObservation> {
        if self.state.t.millis() % CAMERA_PERIOD_MS != 0 {
            return None;
        }
        let sigma = self.params.sensors.pixel_sigma;
        let u = (self.state.pose.x / MM_PER_PX + gauss(&mut self.rng, sigma)).round() as i32;
        let v = (self.state.pose.y / MM_PER_PX + gauss(&mut self.rng, sigma)).round() as i32;
        let theta = wrap_angle(
            self.state.pose.theta + gauss(&mut self.rng, self.params.sensors.camera_theta_sigma),
        );
        Some(CameraObservation {
            robot_id: self.robot_id,
            pixel_pose: PixelPose::new(u, v, theta),
            t: self.state.t,
        })
    }
}

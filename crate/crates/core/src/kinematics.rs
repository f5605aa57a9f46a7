//! Forward/inverse kinematics for the heterogeneous chassis kinds.
//!
//! Omni4 uses the X-configuration Jacobian with wheels numbered 1-2 on the
//! left side (front, rear) and 3-4 on the right side; the mounting convention
//! is ours, the physical layout being unspecified. Differential kinds use the
//! usual two-wheel model (entries 1-2 = left, right; the 2x2 variant pairs
//! entries 1-2 left and 3-4 right). Steered kinds (FWD/RWD/WD4) use a
//! kinematic bicycle model with the steering angle limited to +/-30 degrees.

use crate::types::{ChassisKind, Twist2D, WheelSpeeds};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Steering angle limit for the bicycle-model kinds, rad.
pub const MAX_STEER_RAD: f64 = 30.0 * std::f64::consts::PI / 180.0;

/// Tolerance below which a lateral velocity counts as zero for
/// non-holonomic chassis.
pub const LATERAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    /// The requested twist needs a lateral or in-place motion the chassis
    /// cannot produce.
    #[error("twist not achievable for {kind} chassis: {detail}")]
    NonholonomicViolation { kind: ChassisKind, detail: String },
    #[error("invalid chassis geometry: {0}")]
    InvalidGeometry(String),
}

/// Physical dimensions of a chassis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChassisGeometry {
    pub kind: ChassisKind,
    /// Wheel radius, mm.
    pub wheel_radius: f64,
    /// Half the chassis length (front axle to center), mm.
    pub half_length: f64,
    /// Half the track width (wheel to centerline), mm.
    pub half_width: f64,
    /// Front-to-rear axle distance for steered kinds, mm.
    pub wheelbase: f64,
}

impl ChassisGeometry {
    pub fn new(
        kind: ChassisKind,
        wheel_radius: f64,
        half_length: f64,
        half_width: f64,
        wheelbase: f64,
    ) -> Result<Self, KinematicsError> {
        for (name, v) in [
            ("wheel_radius", wheel_radius),
            ("half_length", half_length),
            ("half_width", half_width),
            ("wheelbase", wheelbase),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(KinematicsError::InvalidGeometry(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(ChassisGeometry {
            kind,
            wheel_radius,
            half_length,
            half_width,
            wheelbase,
        })
    }

    /// The 350 mm square omni chassis with 50 mm wheels.
    pub fn default_omni() -> Self {
        ChassisGeometry::new(ChassisKind::Omni4, 50.0, 175.0, 175.0, 350.0).unwrap()
    }

    /// Lever arm of the omni Jacobian's rotational column, mm.
    fn lw(&self) -> f64 {
        self.half_length + self.half_width
    }
}

/// Wheel speeds plus the steering angle; the angle is zero for
/// non-steered kinds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Actuation {
    pub wheels: WheelSpeeds,
    /// Steering angle, rad. Meaningful only for FWD/RWD/WD4.
    pub steering: f64,
}

impl Actuation {
    pub fn from_wheels(wheels: WheelSpeeds) -> Self {
        Actuation {
            wheels,
            steering: 0.0,
        }
    }
}

// Omni4 X-configuration sign patterns for wheels 1..4.
const OMNI_A: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const OMNI_B: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const OMNI_C: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Map a body-frame twist to wheel speeds (and steering angle for the
/// bicycle-model kinds).
///
/// Differential and steered chassis reject twists with a lateral component;
/// steered chassis additionally reject rotation without forward motion.
/// Steering angles beyond the +/-30 degree gear limit are clamped.
pub fn inverse_kinematics(
    twist: &Twist2D,
    geometry: &ChassisGeometry,
) -> Result<Actuation, KinematicsError> {
    if !geometry.kind.can_translate_laterally() && twist.vy.abs() > LATERAL_TOL {
        return Err(KinematicsError::NonholonomicViolation {
            kind: geometry.kind,
            detail: format!("lateral velocity {} mm/s", twist.vy),
        });
    }
    let r = geometry.wheel_radius;
    match geometry.kind {
        ChassisKind::Omni4 => {
            let lw = geometry.lw();
            let mut wheels = [0.0; 4];
            for i in 0..4 {
                wheels[i] =
                    (twist.vx * OMNI_A[i] + twist.vy * OMNI_B[i] + lw * OMNI_C[i] * twist.omega)
                        / r;
            }
            Ok(Actuation::from_wheels(WheelSpeeds::new(wheels)))
        }
        ChassisKind::Diff2 => {
            let w = geometry.half_width;
            let left = (twist.vx - w * twist.omega) / r;
            let right = (twist.vx + w * twist.omega) / r;
            Ok(Actuation::from_wheels(WheelSpeeds::new([
                left, right, 0.0, 0.0,
            ])))
        }
        ChassisKind::Diff2x2 => {
            let w = geometry.half_width;
            let left = (twist.vx - w * twist.omega) / r;
            let right = (twist.vx + w * twist.omega) / r;
            Ok(Actuation::from_wheels(WheelSpeeds::new([
                left, left, right, right,
            ])))
        }
        ChassisKind::Fwd | ChassisKind::Rwd | ChassisKind::Wd4 => {
            if twist.vx.abs() <= LATERAL_TOL && twist.omega.abs() > LATERAL_TOL {
                return Err(KinematicsError::NonholonomicViolation {
                    kind: geometry.kind,
                    detail: format!("rotation {} rad/s without forward motion", twist.omega),
                });
            }
            let steering = if twist.vx.abs() <= LATERAL_TOL {
                0.0
            } else {
                (twist.omega * geometry.wheelbase / twist.vx)
                    .atan()
                    .clamp(-MAX_STEER_RAD, MAX_STEER_RAD)
            };
            let drive = twist.vx / r;
            let wheels = match geometry.kind {
                ChassisKind::Wd4 => [drive; 4],
                _ => [drive, drive, 0.0, 0.0],
            };
            Ok(Actuation {
                wheels: WheelSpeeds::new(wheels),
                steering,
            })
        }
    }
}

/// Recover the body-frame twist from an actuation.
///
/// This is the least-squares pseudo-inverse of [`inverse_kinematics`]: exact
/// on consistent wheel vectors, minimal-residual otherwise.
pub fn forward_kinematics(actuation: &Actuation, geometry: &ChassisGeometry) -> Twist2D {
    let r = geometry.wheel_radius;
    let wheels = &actuation.wheels.r;
    match geometry.kind {
        ChassisKind::Omni4 => {
            let lw = geometry.lw();
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut om = 0.0;
            for i in 0..4 {
                vx += OMNI_A[i] * wheels[i];
                vy += OMNI_B[i] * wheels[i];
                om += OMNI_C[i] * wheels[i];
            }
            Twist2D::new(r * vx / 4.0, r * vy / 4.0, r * om / (4.0 * lw))
        }
        ChassisKind::Diff2 => {
            let w = geometry.half_width;
            let (left, right) = (wheels[0], wheels[1]);
            Twist2D::new(r * (left + right) / 2.0, 0.0, r * (right - left) / (2.0 * w))
        }
        ChassisKind::Diff2x2 => {
            let w = geometry.half_width;
            let left = (wheels[0] + wheels[1]) / 2.0;
            let right = (wheels[2] + wheels[3]) / 2.0;
            Twist2D::new(r * (left + right) / 2.0, 0.0, r * (right - left) / (2.0 * w))
        }
        ChassisKind::Fwd | ChassisKind::Rwd | ChassisKind::Wd4 => {
            let drive = match geometry.kind {
                ChassisKind::Wd4 => (wheels[0] + wheels[1] + wheels[2] + wheels[3]) / 4.0,
                _ => (wheels[0] + wheels[1]) / 2.0,
            };
            let vx = r * drive;
            let omega = vx * actuation.steering.tan() / geometry.wheelbase;
            Twist2D::new(vx, 0.0, omega)
        }
    }
}

/// Uniformly scale a body twist down until every wheel speed it maps to is
/// within the given limit. Returns the twist unchanged when already
/// achievable, zero on kinematically invalid twists.
pub fn scale_to_wheel_limit(
    twist: &Twist2D,
    geometry: &ChassisGeometry,
    wheel_speed_max: f64,
) -> Twist2D {
    let Ok(actuation) = inverse_kinematics(twist, geometry) else {
        return Twist2D::zero();
    };
    let peak = actuation.wheels.max_abs();
    if peak <= wheel_speed_max {
        *twist
    } else {
        let k = wheel_speed_max / peak;
        Twist2D::new(twist.vx * k, twist.vy * k, twist.omega * k)
    }
}

/// Rotate a body-frame twist into the world frame given the heading.
pub fn body_to_world(twist: &Twist2D, theta: f64) -> Twist2D {
    let (s, c) = theta.sin_cos();
    Twist2D::new(
        twist.vx * c - twist.vy * s,
        twist.vx * s + twist.vy * c,
        twist.omega,
    )
}

/// Rotate a world-frame twist into the body frame given the heading.
pub fn world_to_body(twist: &Twist2D, theta: f64) -> Twist2D {
    body_to_world(twist, -theta)
}

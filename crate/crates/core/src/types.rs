//! Shared domain types, units and coordinate conventions.
//!
//! All positions are millimeters in a world frame with the origin at the
//! arena corner, x right, y up, angles counterclockwise-positive and
//! normalized into `(-PI, PI]`. The overhead localization system works in
//! pixels; one pixel is 2.5 mm, so pixel `(u, v)` maps to `(2.5*u, 2.5*v)` mm.
//! Time is integer milliseconds since experiment start, advancing in 8 ms
//! ticks (the camera period).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};

/// Millimeters per pixel of the overhead localization cameras.
pub const MM_PER_PX: f64 = 2.5;

/// Simulation tick, ms. One camera frame per tick.
pub const TICK_MS: u64 = 8;

/// Gravity along the sensor z axis, mm/s^2.
pub const GRAVITY_MM_S2: f64 = 9810.0;

/// Convert pixels to millimeters (exact multiplication by 2.5).
pub fn px_to_mm(px: f64) -> f64 {
    px * MM_PER_PX
}

/// Convert millimeters to integer pixels, rounding half away from zero.
///
/// `1251.0` mm is `500.4` px and rounds to `500`.
pub fn mm_to_px(mm: f64) -> i64 {
    // f64::round rounds half away from zero, which is the convention here.
    (mm / MM_PER_PX).round() as i64
}

/// Convert millimeters to fractional pixels (no quantization).
pub fn mm_to_px_f(mm: f64) -> f64 {
    mm / MM_PER_PX
}

/// Normalize an angle into `(-PI, PI]`.
///
/// `-PI` maps to the upper half-open end, `+PI`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = theta % two_pi;
    if a <= -PI {
        a += two_pi;
    } else if a > PI {
        a -= two_pi;
    }
    a
}

/// Planar pose: position in millimeters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    /// World-frame x, mm.
    pub x: f64,
    /// World-frame y, mm.
    pub y: f64,
    /// Heading, rad, normalized into `(-PI, PI]`.
    pub theta: f64,
}

impl Pose2D {
    /// Construct a pose, normalizing the heading.
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// Position component as a vector.
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Position in fractional pixels.
    pub fn position_px(&self) -> Vec2 {
        Vec2::new(mm_to_px_f(self.x), mm_to_px_f(self.y))
    }
}

impl fmt::Display for Pose2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.1} mm, {:.1} mm, {:.3} rad)", self.x, self.y, self.theta)
    }
}

/// Planar twist: linear velocity in mm/s, angular velocity in rad/s.
///
/// Whether the linear part is expressed in the body or the world frame is
/// contextual; functions state which they expect.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist2D {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl Twist2D {
    pub const fn new(vx: f64, vy: f64, omega: f64) -> Self {
        Twist2D { vx, vy, omega }
    }

    pub const fn zero() -> Self {
        Twist2D::new(0.0, 0.0, 0.0)
    }

    /// Magnitude of the linear component, mm/s.
    pub fn linear_speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.omega.is_finite()
    }
}

impl fmt::Display for Twist2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.1}, {:.1} mm/s, {:.3} rad/s)", self.vx, self.vy, self.omega)
    }
}

/// Per-wheel rotational speeds, rad/s.
///
/// Always four entries; chassis with fewer motors leave the unused trailing
/// entries at zero (a two-wheel differential uses entries 1-2).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub r: [f64; 4],
}

impl WheelSpeeds {
    pub const fn new(r: [f64; 4]) -> Self {
        WheelSpeeds { r }
    }

    pub const fn zero() -> Self {
        WheelSpeeds { r: [0.0; 4] }
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().all(|v| v.is_finite())
    }

    /// Largest absolute wheel speed, rad/s.
    pub fn max_abs(&self) -> f64 {
        self.r.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Drive method of a chassis.
///
/// The steered kinds (front-, rear- and four-wheel drive) carry one steering
/// gear; `Diff2x2` is a four-motor differential with side-paired wheels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChassisKind {
    /// Four omni wheels, holonomic.
    Omni4,
    /// Two-wheel differential drive.
    Diff2,
    /// Front-wheel drive with steering gear.
    Fwd,
    /// Rear-wheel drive with steering gear.
    Rwd,
    /// Four-wheel drive with steering gear.
    Wd4,
    /// 2x2 differential drive (four motors, paired per side).
    Diff2x2,
}

impl ChassisKind {
    /// Number of drive motors.
    pub fn motor_count(&self) -> usize {
        match self {
            ChassisKind::Omni4 | ChassisKind::Wd4 | ChassisKind::Diff2x2 => 4,
            ChassisKind::Diff2 | ChassisKind::Fwd | ChassisKind::Rwd => 2,
        }
    }

    /// Whether the chassis has a steering gear.
    pub fn has_steering_gear(&self) -> bool {
        matches!(self, ChassisKind::Fwd | ChassisKind::Rwd | ChassisKind::Wd4)
    }

    /// Connector pin count of the drive method (3 power + 4 feedback pins
    /// per motor, 3 pins per steering gear).
    pub fn pin_count(&self) -> usize {
        self.motor_count() * 7 + if self.has_steering_gear() { 3 } else { 0 }
    }

    /// Whether the chassis can translate laterally (body-frame vy).
    pub fn can_translate_laterally(&self) -> bool {
        matches!(self, ChassisKind::Omni4)
    }
}

impl fmt::Display for ChassisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ChassisKind::Omni4 => "omni4",
            ChassisKind::Diff2 => "diff2",
            ChassisKind::Fwd => "fwd",
            ChassisKind::Rwd => "rwd",
            ChassisKind::Wd4 => "wd4",
            ChassisKind::Diff2x2 => "diff2x2",
        };
        f.write_str(name)
    }
}

/// Milliseconds since experiment start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_millis(ms: u64) -> Self {
        Timestamp(ms)
    }

    pub const fn millis(&self) -> u64 {
        self.0
    }

    /// Time in seconds, for integration math.
    pub fn seconds(&self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn advance(&self, dt_ms: u64) -> Timestamp {
        Timestamp(self.0 + dt_ms)
    }

    /// Millisecond delta to an earlier timestamp (saturating at zero).
    pub fn since(&self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ms", self.0)
    }
}

/// Pose as seen by the overhead cameras: quantized pixel position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPose {
    pub u: i32,
    pub v: i32,
    pub theta: f64,
}

impl PixelPose {
    pub const fn new(u: i32, v: i32, theta: f64) -> Self {
        PixelPose { u, v, theta }
    }

    /// Position in millimeters.
    pub fn to_mm(&self) -> Vec2 {
        Vec2::new(px_to_mm(self.u as f64), px_to_mm(self.v as f64))
    }
}

/// Small 2-vector used for pixel- and millimeter-space positions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Chebyshev norm, used for waypoint arrival checks.
    pub fn linf_norm(&self) -> f64 {
        self.x.abs().max(self.y.abs())
    }

    pub fn dot(&self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn distance(&self, other: Vec2) -> f64 {
        (*self - other).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

//! Online identification of the residual dynamics model.
//!
//! The model is linear in a fixed nonlinear feature map of (current body
//! twist, commanded body twist): a 3x11 coefficient matrix predicts the
//! per-tick twist residual (achieved minus commanded). The sign and v*|v|
//! features let the linear family express Coulomb-like and drag-like
//! friction. Training is seeded minibatch gradient descent with per-feature
//! step normalization; an exact ordinary-least-squares fit is provided as an
//! independent oracle.
//!
//! Snapshots are versioned. Consumers read them through an atomic
//! [`SnapshotCell`]; each publication also announces (version, loss,
//! converged, weight checksum) on the `model.snapshot` bus topic. Wire frames
//! carry 16-bit fixed-point fields and cannot hold full-precision weights,
//! so the cell is the data path and the frame is the notification.

use crate::bus::{msg_type, topics, BusError, Cursor, Frame, MessageBus};
use crate::types::{Timestamp, Twist2D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::{Arc, RwLock};
use thiserror::Error;

/// Length of the feature vector.
pub const FEATURE_DIM: usize = 11;

/// Feature map output: `[vx, vy, w, ux, uy, uw, sign(vx), sign(vy),
/// vx|vx|, vy|vy|, 1]`.
pub type FeatureVector = [f64; FEATURE_DIM];

#[derive(Debug, Error)]
pub enum LearningError {
    /// Normal equations are singular: the data does not excite every feature
    /// direction.
    #[error("rank-deficient regression: insufficient excitation in the data")]
    RankDeficient,
    /// Training loss exploded; the learning rate is too high.
    #[error("training diverged: loss {loss} exceeds {limit}")]
    Diverged { loss: f64, limit: f64 },
    #[error(transparent)]
    Bus(#[from] BusError),
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Deterministic feature map of (current twist, commanded twist).
pub fn featurize(twist: &Twist2D, command: &Twist2D) -> FeatureVector {
    [
        twist.vx,
        twist.vy,
        twist.omega,
        command.vx,
        command.vy,
        command.omega,
        sign(twist.vx),
        sign(twist.vy),
        twist.vx * twist.vx.abs(),
        twist.vy * twist.vy.abs(),
        1.0,
    ]
}

/// One observed (state, command, next state) transition, body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// Body twist before the step.
    pub twist: Twist2D,
    /// Commanded body twist applied over the step (chassis-achievable by
    /// contract, so the nominal response equals the command).
    pub command: Twist2D,
    /// Body twist achieved over the step.
    pub next_twist: Twist2D,
}

impl Transition {
    /// Residual the model must predict: achieved minus commanded twist.
    pub fn residual(&self) -> [f64; 3] {
        [
            self.next_twist.vx - self.command.vx,
            self.next_twist.vy - self.command.vy,
            self.next_twist.omega - self.command.omega,
        ]
    }
}

/// The learned residual model, versioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Rows predict (vx, vy, omega) residuals from the feature vector.
    pub weights: [[f64; FEATURE_DIM]; 3],
    pub version: u64,
    /// MSE on the training buffer at publication, (mm/s)^2 per component.
    pub train_loss: f64,
    pub converged: bool,
}

impl ModelParams {
    /// The all-zero (purely nominal) model.
    pub fn zero() -> Self {
        ModelParams {
            weights: [[0.0; FEATURE_DIM]; 3],
            version: 0,
            train_loss: f64::MAX,
            converged: false,
        }
    }

    /// Predicted twist residual for a (state, command) pair.
    pub fn predict_residual(&self, twist: &Twist2D, command: &Twist2D) -> Twist2D {
        let phi = featurize(twist, command);
        let mut out = [0.0; 3];
        for (row, w) in self.weights.iter().enumerate() {
            out[row] = w.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
        }
        Twist2D::new(out[0], out[1], out[2])
    }

    /// Predicted next twist: nominal (the command itself) plus residual.
    pub fn predict_next(&self, twist: &Twist2D, command: &Twist2D) -> Twist2D {
        let r = self.predict_residual(twist, command);
        Twist2D::new(command.vx + r.vx, command.vy + r.vy, command.omega + r.omega)
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .all(|row| row.iter().all(|w| w.is_finite()))
    }

    /// 15-bit checksum over the weight bits, carried in announce frames so
    /// consumers can verify they read a complete snapshot.
    pub fn weight_checksum(&self) -> u16 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for row in &self.weights {
            for w in row {
                for byte in w.to_bits().to_be_bytes() {
                    acc ^= byte as u64;
                    acc = acc.wrapping_mul(0x100000001b3);
                }
            }
        }
        ((acc ^ (acc >> 15) ^ (acc >> 30) ^ (acc >> 45)) & 0x7FFF) as u16
    }
}

/// Bounded FIFO of training transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    ring: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            ring: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.ring.iter()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.ring[idx]
    }
}

/// Trainer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size in the per-feature normalized metric.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient-descent passes per retraining round.
    pub epochs_per_round: usize,
    /// Relative MSE delta under which a round counts as stable; five
    /// consecutive stable rounds set the converged flag.
    pub convergence_tol: f64,
    /// Retrain after this many new transitions.
    pub retrain_interval: usize,
    /// Replay buffer capacity.
    pub replay_capacity: usize,
    /// Seed for minibatch shuffling.
    pub shuffle_seed: u64,
    /// Normalize gradient steps by per-feature second moments. Without this
    /// the mixed feature scales (mm/s vs v|v| terms) make plain SGD
    /// impractically slow.
    pub normalize_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.08,
            batch_size: 64,
            epochs_per_round: 4,
            convergence_tol: 0.05,
            retrain_interval: 120,
            replay_capacity: 4096,
            shuffle_seed: 0x5eed,
            normalize_features: true,
        }
    }
}

/// Loss level treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Number of consecutive stable rounds required for the converged flag.
pub const CONVERGED_STABLE_ROUNDS: u32 = 5;

/// Mean squared residual-prediction error over a dataset, per component.
pub fn evaluate_mse<'a>(
    params: &ModelParams,
    dataset: impl IntoIterator<Item = &'a Transition>,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in dataset {
        let phi = featurize(&t.twist, &t.command);
        let y = t.residual();
        for row in 0..3 {
            let pred: f64 = params.weights[row]
                .iter()
                .zip(phi.iter())
                .map(|(a, b)| a * b)
                .sum();
            let e = pred - y[row];
            sum += e * e;
        }
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / (3.0 * n as f64)
    }
}

/// Analytic gradient of [`evaluate_mse`] with respect to the weights.
pub fn mse_gradient<'a>(
    params: &ModelParams,
    dataset: impl IntoIterator<Item = &'a Transition>,
) -> [[f64; FEATURE_DIM]; 3] {
    let mut grad = [[0.0; FEATURE_DIM]; 3];
    let mut n = 0usize;
    for t in dataset {
        let phi = featurize(&t.twist, &t.command);
        let y = t.residual();
        for row in 0..3 {
            let pred: f64 = params.weights[row]
                .iter()
                .zip(phi.iter())
                .map(|(a, b)| a * b)
                .sum();
            let e = pred - y[row];
            for (g, p) in grad[row].iter_mut().zip(phi.iter()) {
                *g += e * p;
            }
        }
        n += 1;
    }
    if n > 0 {
        let scale = 2.0 / (3.0 * n as f64);
        for row in grad.iter_mut() {
            for g in row.iter_mut() {
                *g *= scale;
            }
        }
    }
    grad
}

/// Root-mean-square of each feature over the buffer; used both for the
/// normalized SGD metric and for conditioning the least-squares solve.
fn feature_scales(buffer: &ReplayBuffer) -> [f64; FEATURE_DIM] {
    let mut sq = [0.0; FEATURE_DIM];
    for t in buffer.iter() {
        let phi = featurize(&t.twist, &t.command);
        for (s, p) in sq.iter_mut().zip(phi.iter()) {
            *s += p * p;
        }
    }
    let n = buffer.len().max(1) as f64;
    sq.map(|s| (s / n).sqrt())
}

/// Exact ordinary-least-squares fit of the residual model.
///
/// Solves the normal equations with per-column scaling and partial pivoting.
/// This is the independent oracle the iterative trainer is checked against.
pub fn fit_least_squares(buffer: &ReplayBuffer) -> Result<ModelParams, LearningError> {
    let n = buffer.len();
    if n < FEATURE_DIM {
        return Err(LearningError::RankDeficient);
    }
    let scales = feature_scales(buffer);
    if scales.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(LearningError::RankDeficient);
    }

    // Accumulate scaled normal equations: A = X'X, B = X'Y.
    let mut a = [[0.0f64; FEATURE_DIM]; FEATURE_DIM];
    let mut b = [[0.0f64; 3]; FEATURE_DIM];
    for t in buffer.iter() {
        let mut phi = featurize(&t.twist, &t.command);
        for (p, s) in phi.iter_mut().zip(scales.iter()) {
            *p /= s;
        }
        let y = t.residual();
        for i in 0..FEATURE_DIM {
            for j in 0..FEATURE_DIM {
                a[i][j] += phi[i] * phi[j];
            }
            for c in 0..3 {
                b[i][c] += phi[i] * y[c];
            }
        }
    }

    // Gauss elimination with partial pivoting.
    let pivot_tol = 1e-10 * a.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max);
    for col in 0..FEATURE_DIM {
        let (pivot_row, pivot_val) = (col..FEATURE_DIM)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot_val <= pivot_tol {
            return Err(LearningError::RankDeficient);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..FEATURE_DIM {
            let factor = a[row][col] / a[col][col];
            for k in col..FEATURE_DIM {
                a[row][k] -= factor * a[col][k];
            }
            for c in 0..3 {
                b[row][c] -= factor * b[col][c];
            }
        }
    }
    let mut w_scaled = [[0.0f64; FEATURE_DIM]; 3];
    for c in 0..3 {
        for row in (0..FEATURE_DIM).rev() {
            let mut acc = b[row][c];
            for k in row + 1..FEATURE_DIM {
                acc -= a[row][k] * w_scaled[c][k];
            }
            w_scaled[c][row] = acc / a[row][row];
        }
    }
    // Undo the column scaling.
    let mut weights = [[0.0f64; FEATURE_DIM]; 3];
    for c in 0..3 {
        for j in 0..FEATURE_DIM {
            weights[c][j] = w_scaled[c][j] / scales[j];
        }
    }
    let mut params = ModelParams {
        weights,
        version: 0,
        train_loss: 0.0,
        converged: false,
    };
    params.train_loss = evaluate_mse(&params, buffer.iter());
    Ok(params)
}

/// One seeded pass of minibatch gradient descent over the buffer.
///
/// The step is preconditioned per feature by the inverse squared feature
/// scale (plain SGD in the normalized feature space); with
/// `normalize_features` off it is unpreconditioned SGD. `epoch_index` salts
/// the shuffle so repeated epochs are deterministic but not identical.
pub fn sgd_epoch(
    params: &ModelParams,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    epoch_index: u64,
) -> Result<ModelParams, LearningError> {
    if buffer.is_empty() || config.learning_rate == 0.0 {
        let mut out = params.clone();
        out.train_loss = evaluate_mse(params, buffer.iter());
        return Ok(out);
    }
    let scales = if config.normalize_features {
        feature_scales(buffer)
    } else {
        [1.0; FEATURE_DIM]
    };
    let precond = scales.map(|s| if s > 0.0 { 1.0 / (s * s) } else { 0.0 });

    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.shuffle_seed ^ epoch_index.wrapping_mul(0x9E3779B97F4A7C15));
    order.shuffle(&mut rng);

    let mut out = params.clone();
    let batch = config.batch_size.max(1);
    for chunk in order.chunks(batch) {
        let mut grad = [[0.0; FEATURE_DIM]; 3];
        for &idx in chunk {
            let t = buffer.get(idx);
            let phi = featurize(&t.twist, &t.command);
            let y = t.residual();
            for row in 0..3 {
                let pred: f64 = out.weights[row]
                    .iter()
                    .zip(phi.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let e = pred - y[row];
                for (g, p) in grad[row].iter_mut().zip(phi.iter()) {
                    *g += e * p;
                }
            }
        }
        let scale = 2.0 / (3.0 * chunk.len() as f64);
        for row in 0..3 {
            for j in 0..FEATURE_DIM {
                out.weights[row][j] -= config.learning_rate * scale * grad[row][j] * precond[j];
            }
        }
    }
    out.train_loss = evaluate_mse(&out, buffer.iter());
    if !out.train_loss.is_finite() || out.train_loss > DIVERGENCE_LIMIT {
        return Err(LearningError::Diverged {
            loss: out.train_loss,
            limit: DIVERGENCE_LIMIT,
        });
    }
    Ok(out)
}

/// A published, immutable model snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub params: ModelParams,
    pub published_at: Timestamp,
    pub checksum: u16,
}

impl ModelSnapshot {
    pub fn verify(&self) -> bool {
        self.params.weight_checksum() == self.checksum
    }
}

/// Atomic latest-snapshot cell shared between the learning server and its
/// consumers. Readers always see a complete snapshot or none.
#[derive(Clone, Default)]
pub struct SnapshotCell {
    inner: Arc<RwLock<Option<Arc<ModelSnapshot>>>>,
}

impl SnapshotCell {
    pub fn new() -> Self {
        SnapshotCell::default()
    }

    pub fn publish(&self, snapshot: ModelSnapshot) {
        *self.inner.write().unwrap() = Some(Arc::new(snapshot));
    }

    pub fn latest(&self) -> Option<Arc<ModelSnapshot>> {
        self.inner.read().unwrap().clone()
    }

    pub fn latest_converged(&self) -> Option<Arc<ModelSnapshot>> {
        self.latest().filter(|s| s.params.converged)
    }
}

/// The online learning server: consumes plant telemetry from the bus, keeps
/// the replay buffer, retrains periodically and publishes versioned
/// snapshots.
pub struct LearningServer {
    config: TrainConfig,
    buffer: ReplayBuffer,
    model: ModelParams,
    state_cursor: Cursor,
    command_cursor: Cursor,
    /// (t, body twist) of the last seen state frame.
    prev_state: Option<(u32, Twist2D)>,
    pending: usize,
    prev_round_mse: Option<f64>,
    stable_rounds: u32,
    epoch_counter: u64,
    robot_id: u8,
}

impl LearningServer {
    pub fn new(robot_id: u8, config: TrainConfig) -> Self {
        LearningServer {
            buffer: ReplayBuffer::new(config.replay_capacity),
            config,
            model: ModelParams::zero(),
            state_cursor: Cursor::default(),
            command_cursor: Cursor::default(),
            prev_state: None,
            pending: 0,
            prev_round_mse: None,
            stable_rounds: 0,
            epoch_counter: 0,
            robot_id,
        }
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Feed a transition directly (offline fitting from a log).
    pub fn push_transition(&mut self, t: Transition) {
        self.buffer.push(t);
        self.pending += 1;
    }

    /// Drain new plant telemetry from the bus and pair state/command frames
    /// into transitions. State frames carry `[x, y, theta, vx, vy, omega]`
    /// (body twist), command frames `[ux, uy, uomega]`, both stamped with the
    /// end-of-step time.
    pub fn ingest(&mut self, bus: &MessageBus) -> Result<usize, LearningError> {
        let states = bus.consume_all(topics::PLANT_STATE, &mut self.state_cursor)?;
        let commands = bus.consume_all(topics::PLANT_COMMAND, &mut self.command_cursor)?;
        let mut added = 0;
        let mut cmd_iter = commands.iter().peekable();
        for state in &states {
            let p = state.physical_payload();
            if p.len() < 6 {
                continue;
            }
            let twist = Twist2D::new(p[3], p[4], p[5]);
            // find the command stamped with the same end-of-step time
            let mut command = None;
            while let Some(c) = cmd_iter.peek() {
                if c.timestamp_ms < state.timestamp_ms {
                    cmd_iter.next();
                } else if c.timestamp_ms == state.timestamp_ms {
                    let cp = c.physical_payload();
                    if cp.len() >= 3 {
                        command = Some(Twist2D::new(cp[0], cp[1], cp[2]));
                    }
                    cmd_iter.next();
                    break;
                } else {
                    break;
                }
            }
            if let (Some((_, prev_twist)), Some(command)) = (self.prev_state, command) {
                self.push_transition(Transition {
                    twist: prev_twist,
                    command,
                    next_twist: twist,
                });
                added += 1;
            }
            self.prev_state = Some((state.timestamp_ms, twist));
        }
        Ok(added)
    }

    /// Run a training round if enough new data arrived; publish a snapshot
    /// when a round ran. Returns the published version, if any.
    pub fn maybe_train(
        &mut self,
        bus: &MessageBus,
        cell: &SnapshotCell,
        now: Timestamp,
    ) -> Result<Option<u64>, LearningError> {
        if self.pending < self.config.retrain_interval || self.buffer.len() < FEATURE_DIM {
            return Ok(None);
        }
        self.pending = 0;
        for _ in 0..self.config.epochs_per_round.max(1) {
            self.model = sgd_epoch(&self.model, &self.buffer, &self.config, self.epoch_counter)?;
            self.epoch_counter += 1;
        }
        let version = self.publish_snapshot(bus, cell, now)?;
        Ok(Some(version))
    }

    /// Version, stability-check and publish the current model: swap the
    /// snapshot cell and announce on the `model.snapshot` topic.
    pub fn publish_snapshot(
        &mut self,
        bus: &MessageBus,
        cell: &SnapshotCell,
        now: Timestamp,
    ) -> Result<u64, LearningError> {
        let mse = self.model.train_loss;
        if let Some(prev) = self.prev_round_mse {
            let delta = (mse - prev).abs();
            if delta <= self.config.convergence_tol * prev.max(1e-12) {
                self.stable_rounds += 1;
            } else {
                self.stable_rounds = 0;
            }
        }
        self.prev_round_mse = Some(mse);
        if self.stable_rounds >= CONVERGED_STABLE_ROUNDS {
            self.model.converged = true;
        }
        self.model.version += 1;

        let snapshot = ModelSnapshot {
            params: self.model.clone(),
            published_at: now,
            checksum: self.model.weight_checksum(),
        };
        cell.publish(snapshot);

        let announce = Frame::from_physical(
            msg_type::MODEL_SNAPSHOT,
            self.robot_id,
            0,
            now.millis() as u32,
            &[
                (self.model.version.min(3276) as f64),
                self.model.train_loss.clamp(0.0, 3276.7),
                if self.model.converged { 1.0 } else { 0.0 },
                self.model.weight_checksum() as f64 / 10.0,
            ],
        )?;
        bus.publish(topics::MODEL_SNAPSHOT, announce)?;
        Ok(self.model.version)
    }
}

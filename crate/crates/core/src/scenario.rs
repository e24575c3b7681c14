//! Road, vehicle placement, and mobility.
//!
//! Lanes are indexed from 0. Lane 0 is the lane nearest the Wi-Fi AP and its
//! outer edge is the line `y = 0`; lane centers increase in `y`, with the
//! dividing strip between lane `lanes/2 - 1` and lane `lanes/2`. The first
//! half of the lanes drives toward `+x`, the second half toward `-x`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Point, RadioGeometry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid road: {0}")]
    Road(String),
    #[error("invalid traffic: {0}")]
    Traffic(String),
    #[error("spacing must be positive, got {0}")]
    NonPositiveSpacing(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadConfig {
    pub length: f64,
    pub lanes: u32,
    pub lane_width: f64,
    pub strip_width: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            length: 1000.0,
            lanes: 6,
            lane_width: 4.0,
            strip_width: 5.0,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(ScenarioError::Road(format!("length must be positive, got {}", self.length)));
        }
        if self.lanes < 2 || self.lanes % 2 != 0 {
            return Err(ScenarioError::Road(format!(
                "lanes must be even and at least 2, got {}",
                self.lanes
            )));
        }
        if !(self.lane_width.is_finite() && self.lane_width > 0.0) {
            return Err(ScenarioError::Road(format!(
                "lane_width must be positive, got {}",
                self.lane_width
            )));
        }
        if !(self.strip_width.is_finite() && self.strip_width > 0.0) {
            return Err(ScenarioError::Road(format!(
                "strip_width must be positive, got {}",
                self.strip_width
            )));
        }
        Ok(())
    }

    /// Center line of `lane`.
    pub fn lane_y(&self, lane: u32) -> f64 {
        let base = self.lane_width * (lane as f64 + 0.5);
        if lane < self.lanes / 2 {
            base
        } else {
            base + self.strip_width
        }
    }

    /// `+1.0` for lanes driving toward `+x`, `-1.0` otherwise.
    pub fn direction(&self, lane: u32) -> f64 {
        if lane < self.lanes / 2 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Homogeneous traffic: the same number of vehicles in every lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    pub vehicles_total: u32,
    /// Vehicles per lane over the road length.
    pub per_lane_intensity: u32,
    /// Average in-lane spacing, `length / per_lane_intensity`.
    pub d_avg: f64,
    /// Speed magnitude shared by every vehicle.
    pub velocity: f64,
}

impl TrafficConfig {
    pub fn from_total(vehicles_total: u32, road: &RoadConfig) -> Result<Self, ScenarioError> {
        road.validate()?;
        if vehicles_total == 0 {
            return Err(ScenarioError::Traffic("vehicle count must be positive".into()));
        }
        if vehicles_total % road.lanes != 0 {
            return Err(ScenarioError::Traffic(format!(
                "{vehicles_total} vehicles do not split evenly over {} lanes",
                road.lanes
            )));
        }
        Self::from_intensity(vehicles_total / road.lanes, road)
    }

    pub fn from_intensity(per_lane_intensity: u32, road: &RoadConfig) -> Result<Self, ScenarioError> {
        road.validate()?;
        if per_lane_intensity == 0 {
            return Err(ScenarioError::Traffic("per-lane intensity must be at least 1".into()));
        }
        let d_avg = road.length / per_lane_intensity as f64;
        Ok(Self {
            vehicles_total: per_lane_intensity * road.lanes,
            per_lane_intensity,
            d_avg,
            velocity: spacing_to_velocity(d_avg)?,
        })
    }
}

/// Where the Wi-Fi AP sits: `x` along the road, `offset` meters outside the
/// outer edge of lane 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApPlacement {
    pub x: f64,
    pub offset: f64,
}

impl Default for ApPlacement {
    fn default() -> Self {
        Self { x: 500.0, offset: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vehicle {
    pub id: u32,
    pub lane: u32,
    pub x: f64,
    /// Signed speed along x, m/s.
    pub velocity: f64,
}

impl Vehicle {
    pub fn position(&self, road: &RoadConfig) -> Point {
        Point::new(self.x, road.lane_y(self.lane))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub road: RoadConfig,
    pub traffic: TrafficConfig,
    pub vehicles: Vec<Vehicle>,
    pub ap_position: Point,
    pub geometry: RadioGeometry,
    pub seed: u64,
}

impl Scenario {
    pub fn positions(&self) -> Vec<Point> {
        self.vehicles.iter().map(|v| v.position(&self.road)).collect()
    }

    pub fn step_mobility(&mut self, dt: f64) {
        step_mobility(&mut self.vehicles, self.road.length, dt);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Per-lane x coordinates, i.i.d. uniform over the road, conditioned on
/// exactly `per_lane_intensity` vehicles per lane. Returned as `(lane, x)`
/// grouped by lane.
pub fn sample_positions<R: Rng + ?Sized>(
    traffic: &TrafficConfig,
    road: &RoadConfig,
    rng: &mut R,
) -> Result<Vec<(u32, f64)>, ScenarioError> {
    road.validate()?;
    if traffic.per_lane_intensity == 0 {
        return Err(ScenarioError::Traffic("per-lane intensity must be at least 1".into()));
    }
    let mut out = Vec::with_capacity((traffic.per_lane_intensity * road.lanes) as usize);
    for lane in 0..road.lanes {
        for _ in 0..traffic.per_lane_intensity {
            out.push((lane, rng.gen_range(0.0..road.length)));
        }
    }
    Ok(out)
}

/// Published spacing/velocity pairs, sorted by spacing.
pub const VELOCITY_ANCHORS: [(f64, f64); 4] =
    [(22.22, 9.72), (28.57, 11.93), (50.0, 17.49), (200.0, 42.07)];

/// Speed for an average in-lane spacing, by monotone piecewise-cubic
/// Hermite interpolation through [`VELOCITY_ANCHORS`].
///
/// Slopes follow the Fritsch–Butland harmonic mean at interior knots and the
/// shape-preserving three-point formula at the ends, so the curve never
/// overshoots the anchors. Outside the anchor range the endpoint speed is
/// returned.
pub fn spacing_to_velocity(d_avg: f64) -> Result<f64, ScenarioError> {
    if !(d_avg.is_finite() && d_avg > 0.0) {
        return Err(ScenarioError::NonPositiveSpacing(d_avg));
    }
    Ok(MonotoneCubic::new(&VELOCITY_ANCHORS).eval(d_avg))
}

struct MonotoneCubic<const N: usize> {
    xs: [f64; N],
    ys: [f64; N],
    slopes: [f64; N],
}

impl<const N: usize> MonotoneCubic<N> {
    fn new(points: &[(f64, f64); N]) -> Self {
        let xs = points.map(|p| p.0);
        let ys = points.map(|p| p.1);
        let mut h = [0.0; N];
        let mut delta = [0.0; N];
        for k in 0..N - 1 {
            h[k] = xs[k + 1] - xs[k];
            delta[k] = (ys[k + 1] - ys[k]) / h[k];
        }
        let mut slopes = [0.0; N];
        for k in 1..N - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        slopes[N - 1] = end_slope(h[N - 2], h[N - 3], delta[N - 2], delta[N - 3]);
        Self { xs, ys, slopes }
    }

    fn eval(&self, x: f64) -> f64 {
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[N - 1] {
            return self.ys[N - 1];
        }
        let k = self.xs.partition_point(|&xk| xk <= x) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[k] + h10 * h * self.slopes[k] + h01 * self.ys[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > 3.0 * del0.abs() {
        3.0 * del0
    } else {
        d
    }
}

pub fn build_scenario(
    road: RoadConfig,
    traffic: TrafficConfig,
    ap: ApPlacement,
    geometry: RadioGeometry,
    seed: u64,
) -> Result<Scenario, ScenarioError> {
    road.validate()?;
    geometry.validate()?;
    if traffic.vehicles_total != traffic.per_lane_intensity * road.lanes {
        return Err(ScenarioError::Traffic(format!(
            "{} vehicles is not {} lanes x {} per lane",
            traffic.vehicles_total, road.lanes, traffic.per_lane_intensity
        )));
    }
    if !(ap.x.is_finite() && ap.offset.is_finite()) {
        return Err(ScenarioError::Road("AP placement must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vehicles = sample_positions(&traffic, &road, &mut rng)?
        .into_iter()
        .enumerate()
        .map(|(id, (lane, x))| Vehicle {
            id: id as u32,
            lane,
            x,
            velocity: road.direction(lane) * traffic.velocity,
        })
        .collect();
    Ok(Scenario {
        road,
        traffic,
        vehicles,
        ap_position: Point::new(ap.x, -ap.offset),
        geometry,
        seed,
    })
}

/// Advances every vehicle by `v * dt` on a road that wraps at `length`.
pub fn step_mobility(vehicles: &mut [Vehicle], length: f64, dt: f64) {
    for v in vehicles {
        let mut x = (v.x + v.velocity * dt).rem_euclid(length);
        if x >= length {
            x = 0.0;
        }
        v.x = x;
    }
}

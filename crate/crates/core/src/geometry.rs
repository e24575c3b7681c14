//! Reception areas and RGB values for the four broadcast outcomes.
//!
//! RGB (reception geometry for broadcast) is the fraction of a transmitter's
//! coverage disk of radius `r_tx` in which its packet can still be decoded.
//! A delivered packet scores 1, an expired one 0. For a collision the
//! colliders' footprints are removed from the transmitter's disk; with a
//! single equal-radius collider at distance `d` the removed part is the
//! symmetric lens
//!
//! ```text
//! A_col(d) = 2 r^2 acos(d / 2r) - (d / 2) sqrt(4 r^2 - d^2),   d < 2r
//! ```
//!
//! and the reception area is `A_rx(d) = pi r^2 - A_col(d)`.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest sample count accepted by [`rgb_multi_collider`].
pub const MIN_SAMPLES: usize = 1000;

/// Default Monte-Carlo sample count per collision event.
pub const DEFAULT_SAMPLES: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("distance must be finite and non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("radius must be finite and positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("invalid radio geometry: {0}")]
    InvalidRadio(String),
    #[error("collision geometry needs at least one collider")]
    NoColliders,
    #[error("{0} samples requested, at least {MIN_SAMPLES} required")]
    TooFewSamples(usize),
    #[error("{0} outcome requires collision geometry")]
    MissingCollision(OutcomeClass),
    #[error("{0} outcome must not carry collision geometry")]
    UnexpectedCollision(OutcomeClass),
    #[error("average spacing {d_avg} m outside (0, r_cs = {r_cs} m]")]
    SpacingOutOfRange { d_avg: f64, r_cs: f64 },
}

/// A point in the road plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Disk radii of the unit-disk radio model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioGeometry {
    /// Transmission range of a vehicle.
    pub r_tx: f64,
    /// Carrier-sense range of a vehicle.
    pub r_cs: f64,
    /// Blanking radius of the Wi-Fi AP at DSRC receivers.
    pub r_wifi: f64,
}

impl Default for RadioGeometry {
    fn default() -> Self {
        Self {
            r_tx: 300.0,
            r_cs: 300.0,
            r_wifi: 300.0,
        }
    }
}

impl RadioGeometry {
    pub fn new(r_tx: f64, r_cs: f64, r_wifi: f64) -> Result<Self, GeometryError> {
        let g = Self { r_tx, r_cs, r_wifi };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.r_tx.is_finite() && self.r_tx > 0.0) {
            return Err(GeometryError::InvalidRadio(format!(
                "r_tx must be positive, got {}",
                self.r_tx
            )));
        }
        if !(self.r_cs.is_finite() && self.r_cs >= self.r_tx) {
            return Err(GeometryError::InvalidRadio(format!(
                "r_cs must be at least r_tx = {}, got {}",
                self.r_tx, self.r_cs
            )));
        }
        if !(self.r_wifi.is_finite() && self.r_wifi > 0.0) {
            return Err(GeometryError::InvalidRadio(format!(
                "r_wifi must be positive, got {}",
                self.r_wifi
            )));
        }
        Ok(())
    }

    /// Area of the transmission disk, `pi r_tx^2`.
    pub fn tx_area(&self) -> f64 {
        PI * self.r_tx * self.r_tx
    }

    fn collider_radius(&self, kind: ColliderKind) -> f64 {
        match kind {
            ColliderKind::Vehicle(_) => self.r_tx,
            ColliderKind::AccessPoint => self.r_wifi,
        }
    }
}

/// Result of one broadcast attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutcomeClass {
    /// Delivered to the whole transmission disk.
    Dlvy,
    /// Replaced by the next BSM before it got on the air.
    Exp,
    /// Collided with an in-range transmitter that started in the same slot.
    Sync,
    /// Collided with a transmitter the sender could not hear.
    Hn,
}

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 4] = [Self::Dlvy, Self::Exp, Self::Sync, Self::Hn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dlvy => "DLVY",
            Self::Exp => "EXP",
            Self::Sync => "SYNC",
            Self::Hn => "HN",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OutcomeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DLVY" => Ok(Self::Dlvy),
            "EXP" => Ok(Self::Exp),
            "SYNC" => Ok(Self::Sync),
            "HN" => Ok(Self::Hn),
            other => Err(format!("unknown outcome `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColliderKind {
    Vehicle(u32),
    AccessPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collider {
    pub kind: ColliderKind,
    pub position: Point,
}

impl Collider {
    pub fn vehicle(id: u32, position: Point) -> Self {
        Self {
            kind: ColliderKind::Vehicle(id),
            position,
        }
    }

    pub fn access_point(position: Point) -> Self {
        Self {
            kind: ColliderKind::AccessPoint,
            position,
        }
    }
}

/// Transmitter and collider positions of one collided packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionGeometry {
    tx_position: Point,
    colliders: Vec<Collider>,
}

impl CollisionGeometry {
    pub fn new(tx_position: Point, colliders: Vec<Collider>) -> Result<Self, GeometryError> {
        if colliders.is_empty() {
            return Err(GeometryError::NoColliders);
        }
        Ok(Self {
            tx_position,
            colliders,
        })
    }

    /// Single vehicle collider at distance `d` along the x axis.
    pub fn single(d: f64) -> Self {
        Self {
            tx_position: Point::default(),
            colliders: vec![Collider::vehicle(0, Point::new(d, 0.0))],
        }
    }

    pub fn tx_position(&self) -> Point {
        self.tx_position
    }

    pub fn colliders(&self) -> &[Collider] {
        &self.colliders
    }

    pub fn distances(&self) -> impl Iterator<Item = f64> + '_ {
        self.colliders
            .iter()
            .map(move |c| c.position.distance(&self.tx_position))
    }

    /// Distance to the only collider, when it is a vehicle.
    pub fn single_vehicle_distance(&self) -> Option<f64> {
        match self.colliders.as_slice() {
            [c] if matches!(c.kind, ColliderKind::Vehicle(_)) => {
                Some(c.position.distance(&self.tx_position))
            }
            _ => None,
        }
    }
}

fn check_distance(d: f64) -> Result<(), GeometryError> {
    if d.is_finite() && d >= 0.0 {
        Ok(())
    } else {
        Err(GeometryError::NegativeDistance(d))
    }
}

/// Intersection area of two circles of radius `r` whose centers are `d` apart.
///
/// Zero once the circles no longer overlap (`d >= 2r`).
pub fn lens_area(d: f64, r: f64) -> Result<f64, GeometryError> {
    check_distance(d)?;
    if !(r.is_finite() && r > 0.0) {
        return Err(GeometryError::NonPositiveRadius(r));
    }
    if d >= 2.0 * r {
        return Ok(0.0);
    }
    let r2 = r * r;
    let lens = 2.0 * r2 * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r2 - d * d).sqrt();
    Ok(lens.clamp(0.0, PI * r2))
}

/// Part of the transmitter's disk outside a single collider's disk.
pub fn reception_area(d: f64, geometry: &RadioGeometry) -> Result<f64, GeometryError> {
    let area = geometry.tx_area();
    Ok((area - lens_area(d, geometry.r_tx)?).clamp(0.0, area))
}

/// RGB of a packet collided by one vehicle at distance `d`.
pub fn rgb_single_collider(d: f64, geometry: &RadioGeometry) -> Result<f64, GeometryError> {
    Ok((reception_area(d, geometry)? / geometry.tx_area()).clamp(0.0, 1.0))
}

/// Monte-Carlo estimate of the fraction of the transmitter's disk not covered
/// by any collider's footprint.
///
/// Points are drawn uniformly over the transmission disk; vehicle colliders
/// blank a disk of radius `r_tx`, the access point one of radius `r_wifi`.
pub fn rgb_multi_collider<R: Rng + ?Sized>(
    geom: &CollisionGeometry,
    geometry: &RadioGeometry,
    samples: usize,
    rng: &mut R,
) -> Result<f64, GeometryError> {
    if geom.colliders.is_empty() {
        return Err(GeometryError::NoColliders);
    }
    if samples < MIN_SAMPLES {
        return Err(GeometryError::TooFewSamples(samples));
    }
    let disks = relevant_disks(geom, geometry);
    if disks.is_empty() {
        return Ok(1.0);
    }
    let center = geom.tx_position;
    let r = geometry.r_tx;
    let mut clear = 0usize;
    for _ in 0..samples {
        let rho = r * rng.gen::<f64>().sqrt();
        let theta = TAU * rng.gen::<f64>();
        let px = center.x + rho * theta.cos();
        let py = center.y + rho * theta.sin();
        let covered = disks.iter().any(|d| {
            let dx = px - d.cx;
            let dy = py - d.cy;
            dx * dx + dy * dy <= d.r * d.r
        });
        if !covered {
            clear += 1;
        }
    }
    Ok(clear as f64 / samples as f64)
}

/// Exact fraction of the transmitter's disk not covered by any collider's
/// footprint, from the boundary integral of the disk union.
pub fn rgb_union_exact(geom: &CollisionGeometry, geometry: &RadioGeometry) -> Result<f64, GeometryError> {
    if geom.colliders.is_empty() {
        return Err(GeometryError::NoColliders);
    }
    let disks = relevant_disks(geom, geometry);
    match disks.as_slice() {
        [] => return Ok(1.0),
        [only] if only.r == geometry.r_tx => {
            let d = (only.cx - geom.tx_position.x).hypot(only.cy - geom.tx_position.y);
            return rgb_single_collider(d, geometry);
        }
        _ => {}
    }
    let tx = Disk {
        cx: geom.tx_position.x,
        cy: geom.tx_position.y,
        r: geometry.r_tx,
    };
    let mut with_tx = disks.clone();
    with_tx.push(tx);
    let uncovered = union_area(&with_tx) - union_area(&disks);
    Ok((uncovered / geometry.tx_area()).clamp(0.0, 1.0))
}

/// Method used to score collided packets that involve more than one
/// footprint.
#[derive(Debug, Clone)]
pub enum RgbEstimator<R> {
    /// Boundary-integral union area. Deterministic.
    Exact,
    /// Uniform point sampling over the transmission disk.
    MonteCarlo { samples: usize, rng: R },
}

impl<R: Rng> RgbEstimator<R> {
    pub fn estimate(
        &mut self,
        geom: &CollisionGeometry,
        geometry: &RadioGeometry,
    ) -> Result<f64, GeometryError> {
        if let Some(d) = geom.single_vehicle_distance() {
            return rgb_single_collider(d, geometry);
        }
        match self {
            Self::Exact => rgb_union_exact(geom, geometry),
            Self::MonteCarlo { samples, rng } => rgb_multi_collider(geom, geometry, *samples, rng),
        }
    }
}

/// RGB of one packet given its outcome.
pub fn rgb_for_outcome<R: Rng>(
    class: OutcomeClass,
    geom: Option<&CollisionGeometry>,
    geometry: &RadioGeometry,
    estimator: &mut RgbEstimator<R>,
) -> Result<f64, GeometryError> {
    match (class, geom) {
        (OutcomeClass::Dlvy, None) => Ok(1.0),
        (OutcomeClass::Exp, None) => Ok(0.0),
        (OutcomeClass::Dlvy | OutcomeClass::Exp, Some(_)) => {
            Err(GeometryError::UnexpectedCollision(class))
        }
        (OutcomeClass::Sync | OutcomeClass::Hn, None) => Err(GeometryError::MissingCollision(class)),
        (OutcomeClass::Sync | OutcomeClass::Hn, Some(g)) => estimator.estimate(g, geometry),
    }
}

/// RGB range of a synchronized collision whose collider lies between the
/// average spacing `d_avg` and the carrier-sense range.
pub fn sync_rgb_bounds(d_avg: f64, geometry: &RadioGeometry) -> Result<(f64, f64), GeometryError> {
    if !(d_avg.is_finite() && d_avg > 0.0 && d_avg <= geometry.r_cs) {
        return Err(GeometryError::SpacingOutOfRange {
            d_avg,
            r_cs: geometry.r_cs,
        });
    }
    Ok((
        rgb_single_collider(d_avg, geometry)?,
        rgb_single_collider(geometry.r_cs, geometry)?,
    ))
}

/// RGB range of a hidden-node collision, collider between `r_cs` and `2 r_cs`.
pub fn hn_rgb_bounds(geometry: &RadioGeometry) -> (f64, f64) {
    let low = rgb_single_collider(geometry.r_cs, geometry).unwrap_or(1.0);
    let high = rgb_single_collider(2.0 * geometry.r_cs, geometry).unwrap_or(1.0);
    (low, high)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

/// Collider footprints that reach into the transmission disk.
fn relevant_disks(geom: &CollisionGeometry, geometry: &RadioGeometry) -> Vec<Disk> {
    let mut out: Vec<Disk> = Vec::with_capacity(geom.colliders.len());
    for c in &geom.colliders {
        let r = geometry.collider_radius(c.kind);
        if c.position.distance(&geom.tx_position) >= geometry.r_tx + r {
            continue;
        }
        let disk = Disk {
            cx: c.position.x,
            cy: c.position.y,
            r,
        };
        if !out.contains(&disk) {
            out.push(disk);
        }
    }
    out
}

/// Area of a union of disks.
///
/// Sums, over every disk, the boundary integral `1/2 * (x dy - y dx)` along the
/// arcs of its circle that no other disk covers.
fn union_area(disks: &[Disk]) -> f64 {
    let mut total = 0.0;
    let mut covered: Vec<(f64, f64)> = Vec::new();
    'outer: for (i, a) in disks.iter().enumerate() {
        covered.clear();
        for (j, b) in disks.iter().enumerate() {
            if i == j {
                continue;
            }
            let dx = b.cx - a.cx;
            let dy = b.cy - a.cy;
            let d = dx.hypot(dy);
            if d + a.r <= b.r {
                if d == 0.0 && a.r == b.r && j > i {
                    // identical disks: only the first copy contributes
                    continue;
                }
                continue 'outer;
            }
            if d >= a.r + b.r || d + b.r <= a.r {
                continue;
            }
            let mid = dy.atan2(dx);
            let cos_half = ((a.r * a.r + d * d - b.r * b.r) / (2.0 * a.r * d)).clamp(-1.0, 1.0);
            let half = cos_half.acos();
            push_interval(&mut covered, mid - half, mid + half);
        }
        covered.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut cursor = 0.0;
        for &(lo, hi) in &covered {
            if lo > cursor {
                total += arc_term(a, cursor, lo);
            }
            cursor = cursor.max(hi);
        }
        if cursor < TAU {
            total += arc_term(a, cursor, TAU);
        }
    }
    total
}

/// Adds `[lo, hi]` normalized into `[0, 2pi)`, splitting at the wrap point.
fn push_interval(out: &mut Vec<(f64, f64)>, lo: f64, hi: f64) {
    let span = hi - lo;
    let lo = lo.rem_euclid(TAU);
    let hi = lo + span;
    if hi <= TAU {
        out.push((lo, hi));
    } else {
        out.push((lo, TAU));
        out.push((0.0, hi - TAU));
    }
}

fn arc_term(disk: &Disk, from: f64, to: f64) -> f64 {
    0.5 * (disk.r * disk.r * (to - from)
        + disk.r * (disk.cx * (to.sin() - from.sin()) - disk.cy * (to.cos() - from.cos())))
}

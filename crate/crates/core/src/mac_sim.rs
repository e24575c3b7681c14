//! Continuous-time discrete-event simulation of DSRC broadcast with a
//! saturated co-channel Wi-Fi AP.
//!
//! Time is kept in integer nanoseconds so that runs are bit-reproducible and
//! DSRC (13 us) and Wi-Fi (9 us) slot boundaries never need to line up.
//!
//! Access rules, per node:
//!
//! * every vehicle generates a BSM each `ibi`, starting at a random phase.
//!   The MAC holds one frame; a new BSM replaces an unsent one, which is
//!   recorded as expired;
//! * a node with a frame draws a backoff from `{0, .., cw - 1}` slots and
//!   counts it down only while no transmitter within `r_cs` is on the air;
//! * a transmission that starts less than one slot before a node's countdown
//!   ends cannot be detected in time, so that node transmits anyway. This is
//!   the only way two nodes that hear each other overlap;
//! * the AP always has a frame and re-contends right after each transmission.
//!
//! Vehicles move on a wrapping road. Positions are advanced every
//! `mobility_tick` and held constant in between; sensing relations are
//! refreshed on every tick.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    rgb_for_outcome, Collider, ColliderKind, CollisionGeometry, GeometryError, OutcomeClass, Point,
    RadioGeometry, RgbEstimator,
};
use crate::scenario::{step_mobility, Scenario, Vehicle};

pub type Nanos = u64;

pub fn secs_to_nanos(s: f64) -> Nanos {
    (s * 1e9).round() as Nanos
}

pub fn nanos_to_secs(ns: Nanos) -> f64 {
    ns as f64 * 1e-9
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// DSRC MAC timing. Times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsrcMacParams {
    pub ibi: f64,
    pub cw: u32,
    pub slot: f64,
    pub airtime: f64,
}

impl DsrcMacParams {
    pub const SLOT: f64 = 13e-6;
    /// 500-byte BSM at 6 Mb/s.
    pub const AIRTIME: f64 = 500.0 * 8.0 / 6e6;

    pub fn new(ibi: f64, cw: u32) -> Self {
        Self {
            ibi,
            cw,
            slot: Self::SLOT,
            airtime: Self::AIRTIME,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.slot.is_finite() && self.slot > 0.0) {
            return Err(SimError::Config(format!("DSRC slot must be positive, got {}", self.slot)));
        }
        if !(self.airtime.is_finite() && self.airtime > 0.0) {
            return Err(SimError::Config(format!("DSRC airtime must be positive, got {}", self.airtime)));
        }
        if !(self.ibi.is_finite() && self.ibi > self.airtime) {
            return Err(SimError::Config(format!(
                "IBI {} s must exceed the BSM airtime {} s",
                self.ibi, self.airtime
            )));
        }
        if self.cw < 1 {
            return Err(SimError::Config("contention window must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for DsrcMacParams {
    fn default() -> Self {
        Self::new(0.1, 63)
    }
}

/// Saturated Wi-Fi AP. Times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WifiMacParams {
    pub enabled: bool,
    /// Window the saturated AP draws from.
    pub cw_min: u32,
    /// Ceiling only; a broadcast-style saturated AP never doubles its window.
    pub cw_max: u32,
    pub slot: f64,
    pub airtime: f64,
    /// Distance at which the AP detects DSRC transmissions. `None` means the
    /// vehicles' carrier-sense range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cs_range: Option<f64>,
}

impl WifiMacParams {
    pub const SLOT: f64 = 9e-6;
    /// 10 800-byte frame at 54 Mb/s.
    pub const AIRTIME: f64 = 10_800.0 * 8.0 / 54e6;

    pub fn enabled(enabled: bool) -> Self {
        Self {
            enabled,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.cw_min < 1 || self.cw_min > self.cw_max {
            return Err(SimError::Config(format!(
                "Wi-Fi window needs 1 <= cw_min <= cw_max, got [{}, {}]",
                self.cw_min, self.cw_max
            )));
        }
        if !(self.slot.is_finite() && self.slot > 0.0) {
            return Err(SimError::Config(format!("Wi-Fi slot must be positive, got {}", self.slot)));
        }
        if !(self.airtime.is_finite() && self.airtime > 0.0) {
            return Err(SimError::Config(format!(
                "Wi-Fi airtime must be positive, got {}",
                self.airtime
            )));
        }
        if let Some(r) = self.cs_range {
            if !(r.is_finite() && r >= 0.0) {
                return Err(SimError::Config(format!(
                    "Wi-Fi carrier-sense range must be non-negative, got {r}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for WifiMacParams {
    fn default() -> Self {
        Self {
            enabled: false,
            cw_min: 15,
            cw_max: 1023,
            slot: Self::SLOT,
            airtime: Self::AIRTIME,
            cs_range: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseMode {
    /// Each vehicle's first BSM is drawn uniformly in `[0, ibi)`.
    Random,
    /// Every vehicle generates at `t = 0, ibi, 2 ibi, ..`.
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// Period between position updates, seconds.
    pub mobility_tick: f64,
    pub phase: PhaseMode,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            mobility_tick: 0.1,
            phase: PhaseMode::Random,
        }
    }
}

/// Everything besides the scenario that a run depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    pub dsrc: DsrcMacParams,
    pub wifi: WifiMacParams,
    /// BSMs generated in `[0, duration)` are recorded.
    pub duration: f64,
    pub options: SimOptions,
}

impl RunParams {
    pub fn validate(&self) -> Result<(), SimError> {
        self.dsrc.validate()?;
        self.wifi.validate()?;
        if !(self.duration.is_finite() && self.duration > self.dsrc.ibi) {
            return Err(SimError::Config(format!(
                "duration {} s must exceed the IBI {} s",
                self.duration, self.dsrc.ibi
            )));
        }
        if !(self.options.mobility_tick.is_finite() && self.options.mobility_tick > 0.0) {
            return Err(SimError::Config(format!(
                "mobility tick must be positive, got {}",
                self.options.mobility_tick
            )));
        }
        Ok(())
    }
}

/// One broadcast attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub tx_id: u32,
    pub lane: u32,
    pub generation_ns: Nanos,
    pub tx_start_ns: Option<Nanos>,
    pub outcome: OutcomeClass,
    pub collision: Option<CollisionGeometry>,
    /// Start time of each collider relative to this packet's start, parallel
    /// to the collider list.
    pub collider_start_offsets_ns: Vec<i64>,
    /// Position at transmission start, or at generation for expired packets.
    pub tx_position: Point,
}

impl PacketRecord {
    pub fn generation_time(&self) -> f64 {
        nanos_to_secs(self.generation_ns)
    }

    pub fn tx_start(&self) -> Option<f64> {
        self.tx_start_ns.map(nanos_to_secs)
    }
}

/// What the engine saw of one overlapping transmission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColliderObservation {
    pub kind: ColliderKind,
    pub position: Point,
    /// Collider start minus packet start.
    pub start_offset_ns: i64,
}

/// Classifies a finished transmission from the transmissions that overlapped
/// it.
///
/// SYNC when at least one collider within `r_cs` started less than one DSRC
/// slot apart; HN when colliders exist but none qualifies; DLVY otherwise.
pub fn classify_outcome(
    tx_position: Point,
    colliders: &[ColliderObservation],
    geometry: &RadioGeometry,
    slot_ns: Nanos,
) -> (OutcomeClass, Option<CollisionGeometry>) {
    if colliders.is_empty() {
        return (OutcomeClass::Dlvy, None);
    }
    let sync = colliders.iter().any(|c| {
        c.start_offset_ns.unsigned_abs() < slot_ns && c.position.distance(&tx_position) <= geometry.r_cs
    });
    let geom = CollisionGeometry::new(
        tx_position,
        colliders
            .iter()
            .map(|c| Collider {
                kind: c.kind,
                position: c.position,
            })
            .collect(),
    )
    .expect("collider list is non-empty");
    let class = if sync { OutcomeClass::Sync } else { OutcomeClass::Hn };
    (class, Some(geom))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub dlvy: u64,
    pub exp: u64,
    pub sync: u64,
    pub hn: u64,
}

impl OutcomeCounts {
    pub fn add(&mut self, class: OutcomeClass) {
        match class {
            OutcomeClass::Dlvy => self.dlvy += 1,
            OutcomeClass::Exp => self.exp += 1,
            OutcomeClass::Sync => self.sync += 1,
            OutcomeClass::Hn => self.hn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.dlvy + self.exp + self.sync + self.hn
    }

    pub fn get(&self, class: OutcomeClass) -> u64 {
        match class {
            OutcomeClass::Dlvy => self.dlvy,
            OutcomeClass::Exp => self.exp,
            OutcomeClass::Sync => self.sync,
            OutcomeClass::Hn => self.hn,
        }
    }

    pub fn merge(&mut self, other: &OutcomeCounts) {
        self.dlvy += other.dlvy;
        self.exp += other.exp;
        self.sync += other.sync;
        self.hn += other.hn;
    }
}

/// All packet records of one run plus what is needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub scenario: Scenario,
    pub params: RunParams,
    pub seed: u64,
    pub records: Vec<PacketRecord>,
    /// Number of BSMs generated inside the recording window.
    pub generated: u64,
    /// Smallest vehicle-to-vehicle distance seen at any position update.
    pub min_spacing_m: f64,
    /// Per-vehicle time on air within `[0, duration)`, seconds.
    pub vehicle_busy: Vec<f64>,
    /// AP time on air within `[0, duration)`, seconds.
    pub ap_busy: f64,
}

impl EventLog {
    pub fn counts(&self) -> OutcomeCounts {
        let mut c = OutcomeCounts::default();
        for r in &self.records {
            c.add(r.outcome);
        }
        c
    }

    pub fn geometry(&self) -> &RadioGeometry {
        &self.scenario.geometry
    }

    /// Writes one line per record:
    /// `run_id,tx_id,lane,gen_time_us,tx_start_us,outcome,collider_count,collider_distances_m,rgb`.
    ///
    /// Collider distances are `;`-separated; a missing start is `NA`.
    pub fn write_trace<W: Write, R: Rng>(
        &self,
        run_id: &str,
        estimator: &mut RgbEstimator<R>,
        out: &mut W,
    ) -> io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        let geometry = self.scenario.geometry;
        for r in &self.records {
            let rgb = rgb_for_outcome(r.outcome, r.collision.as_ref(), &geometry, estimator)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let row = TraceRow::from_record(run_id, r, rgb);
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

pub const TRACE_HEADER: &str =
    "run_id,tx_id,lane,gen_time_us,tx_start_us,outcome,collider_count,collider_distances_m,rgb";

/// One parsed trace line.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub run_id: String,
    pub tx_id: u32,
    pub lane: u32,
    pub gen_time_us: f64,
    pub tx_start_us: Option<f64>,
    pub outcome: OutcomeClass,
    pub collider_distances_m: Vec<f64>,
    pub rgb: f64,
}

impl TraceRow {
    pub fn from_record(run_id: &str, r: &PacketRecord, rgb: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            tx_id: r.tx_id,
            lane: r.lane,
            gen_time_us: r.generation_ns as f64 / 1e3,
            tx_start_us: r.tx_start_ns.map(|t| t as f64 / 1e3),
            outcome: r.outcome,
            collider_distances_m: r
                .collision
                .as_ref()
                .map(|g| g.distances().collect())
                .unwrap_or_default(),
            rgb,
        }
    }
}

impl std::fmt::Display for TraceRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let start = match self.tx_start_us {
            Some(t) => format!("{t:.3}"),
            None => "NA".to_string(),
        };
        let mut dists = String::new();
        for (i, d) in self.collider_distances_m.iter().enumerate() {
            if i > 0 {
                dists.push(';');
            }
            let _ = write!(dists, "{d:.3}");
        }
        write!(
            f,
            "{},{},{},{:.3},{},{},{},{},{:.6}",
            self.run_id,
            self.tx_id,
            self.lane,
            self.gen_time_us,
            start,
            self.outcome,
            self.collider_distances_m.len(),
            dists,
            self.rgb
        )
    }
}

impl std::str::FromStr for TraceRow {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(format!("expected 9 fields, got {}", fields.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            fields[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"))
        };
        let count: usize = fields[6].parse().map_err(|e| format!("collider_count: {e}"))?;
        let collider_distances_m = if fields[7].is_empty() {
            Vec::new()
        } else {
            fields[7]
                .split(';')
                .map(|d| d.parse::<f64>().map_err(|e| format!("collider distance: {e}")))
                .collect::<Result<Vec<_>, _>>()?
        };
        if collider_distances_m.len() != count {
            return Err(format!(
                "collider_count {count} does not match {} distances",
                collider_distances_m.len()
            ));
        }
        Ok(Self {
            run_id: fields[0].to_string(),
            tx_id: fields[1].parse().map_err(|e| format!("tx_id: {e}"))?,
            lane: fields[2].parse().map_err(|e| format!("lane: {e}"))?,
            gen_time_us: num(3)?,
            tx_start_us: if fields[4] == "NA" { None } else { Some(num(4)?) },
            outcome: fields[5].parse()?,
            collider_distances_m,
            rgb: num(8)?,
        })
    }
}

/// Runs one simulation. Deterministic in `(scenario, params, seed)`.
pub fn run_simulation(scenario: &Scenario, params: &RunParams, seed: u64) -> Result<EventLog, SimError> {
    params.validate()?;
    scenario
        .geometry
        .validate()
        .map_err(|e: GeometryError| SimError::Config(e.to_string()))?;
    scenario
        .road
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    Engine::new(scenario, params, seed).run()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("record {index} diverged: logged {logged}, replayed {replayed}")]
    Diverged {
        index: usize,
        logged: String,
        replayed: String,
    },
    #[error("replay produced {replayed} records, log has {logged}")]
    Length { logged: usize, replayed: usize },
}

/// Reruns the log's scenario with its stored parameters and seed and compares
/// the record sequences bit for bit.
pub fn replay_check(log: &EventLog) -> Result<(), ReplayError> {
    let fresh = run_simulation(&log.scenario, &log.params, log.seed)?;
    for (index, (a, b)) in log.records.iter().zip(&fresh.records).enumerate() {
        if a != b {
            return Err(ReplayError::Diverged {
                index,
                logged: format!("{a:?}"),
                replayed: format!("{b:?}"),
            });
        }
    }
    if log.records.len() != fresh.records.len() {
        return Err(ReplayError::Length {
            logged: log.records.len(),
            replayed: fresh.records.len(),
        });
    }
    Ok(())
}

// --- engine -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    TxEnd { serial: u64 },
    Tick,
    Generate { vehicle: u32 },
    BackoffDone { node: u32, version: u32 },
}

impl EventKind {
    fn priority(&self) -> u8 {
        match self {
            Self::TxEnd { .. } => 0,
            Self::Tick => 1,
            Self::Generate { .. } => 2,
            Self::BackoffDone { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Nanos,
    priority: u8,
    seq: u64,
    kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
struct Bsm {
    record: Option<usize>,
}

#[derive(Debug, Clone, Default)]
struct Node {
    busy: u32,
    version: u32,
    /// Remaining backoff slots while contending.
    backoff: Option<u32>,
    /// Start of the running countdown, if counting.
    counting_since: Option<Nanos>,
    /// Countdown will finish regardless of the channel.
    committed: bool,
    transmitting: bool,
    frame: Option<BsmSlot>,
    busy_ns: Nanos,
}

#[derive(Debug, Clone, Copy)]
enum BsmSlot {
    Vehicle(Bsm),
    Saturated,
}

#[derive(Debug, Clone)]
struct ActiveTx {
    serial: u64,
    node: u32,
    start: Nanos,
    end: Nanos,
    record: Option<usize>,
    colliders: Vec<ColliderObservation>,
    sensed_by: Vec<u32>,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    params: RunParams,
    seed: u64,
    geometry: RadioGeometry,
    vehicles: Vec<Vehicle>,
    /// Vehicles first, then the AP when enabled.
    pos: Vec<Point>,
    /// `neighbors[i]` lists the nodes that sense transmissions from `i`.
    neighbors: Vec<Vec<u32>>,
    nodes: Vec<Node>,
    ap: Option<u32>,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    serial: u64,
    active: Vec<ActiveTx>,
    records: Vec<PacketRecord>,
    resolved: Vec<bool>,
    generated: u64,
    min_spacing: f64,
    rng: ChaCha8Rng,
    dsrc_slot: Nanos,
    dsrc_air: Nanos,
    wifi_slot: Nanos,
    wifi_air: Nanos,
    ibi: Nanos,
    tick: Nanos,
    duration: Nanos,
    horizon: Nanos,
    marks: Vec<u8>,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario, params: &RunParams, seed: u64) -> Self {
        let n = scenario.vehicles.len();
        let ap = params.wifi.enabled.then_some(n as u32);
        let total = n + ap.is_some() as usize;
        let dsrc_air = secs_to_nanos(params.dsrc.airtime);
        let ibi = secs_to_nanos(params.dsrc.ibi);
        let duration = secs_to_nanos(params.duration);
        Self {
            scenario,
            params: *params,
            seed,
            geometry: scenario.geometry,
            vehicles: scenario.vehicles.clone(),
            pos: vec![Point::default(); total],
            neighbors: vec![Vec::new(); total],
            nodes: vec![Node::default(); total],
            ap,
            queue: BinaryHeap::new(),
            seq: 0,
            serial: 0,
            active: Vec::new(),
            records: Vec::new(),
            resolved: Vec::new(),
            generated: 0,
            min_spacing: f64::INFINITY,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dsrc_slot: secs_to_nanos(params.dsrc.slot).max(1),
            dsrc_air,
            wifi_slot: secs_to_nanos(params.wifi.slot).max(1),
            wifi_air: secs_to_nanos(params.wifi.airtime),
            ibi,
            tick: secs_to_nanos(params.options.mobility_tick).max(1),
            duration,
            horizon: duration + ibi + dsrc_air,
            marks: vec![0; total],
        }
    }

    fn push(&mut self, time: Nanos, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            priority: kind.priority(),
            seq: self.seq,
            kind,
        }));
    }

    fn is_ap(&self, node: u32) -> bool {
        self.ap == Some(node)
    }

    fn slot_of(&self, node: u32) -> Nanos {
        if self.is_ap(node) {
            self.wifi_slot
        } else {
            self.dsrc_slot
        }
    }

    fn run(mut self) -> Result<EventLog, SimError> {
        self.refresh_geometry();
        let n = self.vehicles.len();
        for v in 0..n as u32 {
            let phase = match self.params.options.phase {
                PhaseMode::Random => self.rng.gen_range(0..self.ibi),
                PhaseMode::Aligned => 0,
            };
            self.push(phase, EventKind::Generate { vehicle: v });
        }
        if let Some(ap) = self.ap {
            self.nodes[ap as usize].frame = Some(BsmSlot::Saturated);
            self.start_contention(ap, 0);
        }
        if self.tick <= self.horizon {
            self.push(self.tick, EventKind::Tick);
        }

        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.horizon {
                break;
            }
            let t = ev.time;
            match ev.kind {
                EventKind::TxEnd { serial } => self.on_tx_end(serial, t)?,
                EventKind::Tick => self.on_tick(t),
                EventKind::Generate { vehicle } => self.on_generate(vehicle, t),
                EventKind::BackoffDone { node, version } => {
                    if self.nodes[node as usize].version == version
                        && self.nodes[node as usize].counting_since.is_some()
                    {
                        self.start_tx(node, t);
                    }
                }
            }
        }

        if let Some(i) = self.resolved.iter().position(|r| !r) {
            return Err(SimError::Invariant(format!(
                "BSM record {i} unresolved at the end of the run"
            )));
        }
        let vehicle_busy = self.nodes[..n]
            .iter()
            .map(|nd| nanos_to_secs(nd.busy_ns))
            .collect();
        let ap_busy = self.ap.map_or(0.0, |a| nanos_to_secs(self.nodes[a as usize].busy_ns));
        Ok(EventLog {
            scenario: self.scenario.clone(),
            params: self.params,
            seed: self.seed,
            records: self.records,
            generated: self.generated,
            min_spacing_m: self.min_spacing,
            vehicle_busy,
            ap_busy,
        })
    }

    /// Recomputes positions and carrier-sense neighbor lists from the current
    /// vehicle state.
    fn refresh_geometry(&mut self) {
        let road = &self.scenario.road;
        let n = self.vehicles.len();
        for (i, v) in self.vehicles.iter().enumerate() {
            self.pos[i] = v.position(road);
        }
        if let Some(ap) = self.ap {
            self.pos[ap as usize] = self.scenario.ap_position;
        }
        for list in &mut self.neighbors {
            list.clear();
        }
        let r_cs2 = self.geometry.r_cs * self.geometry.r_cs;
        let ap_cs = self.params.wifi.cs_range.unwrap_or(self.geometry.r_cs);
        let ap_cs2 = ap_cs * ap_cs;
        let mut min2 = f64::INFINITY;
        for i in 0..n {
            let pi = self.pos[i];
            for j in i + 1..n {
                let dx = pi.x - self.pos[j].x;
                let dy = pi.y - self.pos[j].y;
                let d2 = dx * dx + dy * dy;
                min2 = min2.min(d2);
                if d2 <= r_cs2 {
                    self.neighbors[i].push(j as u32);
                    self.neighbors[j].push(i as u32);
                }
            }
        }
        if let Some(ap) = self.ap {
            let pa = self.pos[ap as usize];
            for i in 0..n {
                let d2 = {
                    let dx = pa.x - self.pos[i].x;
                    let dy = pa.y - self.pos[i].y;
                    dx * dx + dy * dy
                };
                // vehicles hear the AP within r_cs
                if d2 <= r_cs2 {
                    self.neighbors[ap as usize].push(i as u32);
                }
                // the AP hears a vehicle within its own range
                if d2 <= ap_cs2 {
                    self.neighbors[i].push(ap);
                }
            }
        }
        if n >= 2 {
            self.min_spacing = self.min_spacing.min(min2.sqrt());
        }
    }

    fn on_tick(&mut self, t: Nanos) {
        let dt = nanos_to_secs(self.tick);
        step_mobility(&mut self.vehicles, self.scenario.road.length, dt);
        self.refresh_geometry();

        // Rebuild who senses each ongoing transmission. Apply every rise
        // before any fall so a node handed from one transmitter to another
        // stays frozen.
        let mut rises = Vec::new();
        let mut falls = Vec::new();
        for k in 0..self.active.len() {
            let node = self.active[k].node as usize;
            let old = std::mem::take(&mut self.active[k].sensed_by);
            let new = self.neighbors[node].clone();
            for &j in &old {
                self.marks[j as usize] |= 1;
            }
            for &j in &new {
                self.marks[j as usize] |= 2;
            }
            for &j in old.iter().chain(&new) {
                match self.marks[j as usize] {
                    1 => falls.push(j),
                    2 => rises.push(j),
                    _ => {}
                }
                self.marks[j as usize] = 0;
            }
            self.active[k].sensed_by = new;
        }
        for j in rises {
            let nd = &mut self.nodes[j as usize];
            nd.busy += 1;
            if nd.busy == 1 && nd.counting_since.is_some() && !nd.committed {
                self.freeze(j, t);
            }
        }
        for j in falls {
            self.nodes[j as usize].busy -= 1;
            if self.nodes[j as usize].busy == 0 {
                self.on_idle(j, t);
            }
        }

        let next = t + self.tick;
        if next <= self.horizon {
            self.push(next, EventKind::Tick);
        }
    }

    fn on_generate(&mut self, v: u32, t: Nanos) {
        let next = t + self.ibi;
        if next <= self.horizon {
            self.push(next, EventKind::Generate { vehicle: v });
        }
        let record = if t < self.duration {
            let veh = self.vehicles[v as usize];
            self.records.push(PacketRecord {
                tx_id: v,
                lane: veh.lane,
                generation_ns: t,
                tx_start_ns: None,
                outcome: OutcomeClass::Exp,
                collision: None,
                collider_start_offsets_ns: Vec::new(),
                tx_position: self.pos[v as usize],
            });
            self.resolved.push(false);
            self.generated += 1;
            Some(self.records.len() - 1)
        } else {
            None
        };
        let node = &mut self.nodes[v as usize];
        let old = node.frame.replace(BsmSlot::Vehicle(Bsm { record }));
        if let Some(BsmSlot::Vehicle(Bsm { record: Some(i) })) = old {
            // never got on the air
            self.records[i].outcome = OutcomeClass::Exp;
            self.resolved[i] = true;
        }
        let node = &self.nodes[v as usize];
        if !node.transmitting && node.backoff.is_none() {
            self.start_contention(v, t);
        }
    }

    fn start_contention(&mut self, node: u32, t: Nanos) {
        let cw = if self.is_ap(node) {
            self.params.wifi.cw_min
        } else {
            self.params.dsrc.cw
        };
        let draw = self.rng.gen_range(0..cw);
        let nd = &mut self.nodes[node as usize];
        nd.backoff = Some(draw);
        nd.committed = false;
        nd.counting_since = None;
        if nd.busy == 0 {
            self.start_countdown(node, t);
        }
    }

    fn start_countdown(&mut self, node: u32, t: Nanos) {
        let slot = self.slot_of(node);
        let nd = &mut self.nodes[node as usize];
        let remaining = nd.backoff.expect("countdown needs a backoff") as Nanos;
        nd.version = nd.version.wrapping_add(1);
        nd.counting_since = Some(t);
        let version = nd.version;
        self.push(t + remaining * slot, EventKind::BackoffDone { node, version });
    }

    fn freeze(&mut self, node: u32, t: Nanos) {
        let slot = self.slot_of(node);
        let nd = &mut self.nodes[node as usize];
        if let (Some(since), Some(left)) = (nd.counting_since, nd.backoff) {
            let done = ((t - since) / slot).min(left as Nanos) as u32;
            nd.backoff = Some(left - done);
            nd.counting_since = None;
            nd.version = nd.version.wrapping_add(1);
        }
    }

    fn on_idle(&mut self, node: u32, t: Nanos) {
        let nd = &self.nodes[node as usize];
        if nd.backoff.is_some() && nd.counting_since.is_none() && !nd.transmitting {
            self.start_countdown(node, t);
        }
    }

    /// Channel at `node` just turned busy because a transmission started.
    fn on_busy_from_start(&mut self, node: u32, t: Nanos) {
        let slot = self.slot_of(node);
        let nd = &self.nodes[node as usize];
        let (Some(since), Some(left)) = (nd.counting_since, nd.backoff) else {
            return;
        };
        if nd.committed {
            return;
        }
        let deadline = since + left as Nanos * slot;
        if deadline.saturating_sub(t) < slot {
            self.nodes[node as usize].committed = true;
        } else {
            self.freeze(node, t);
        }
    }

    fn interferes(&self, a: u32, b: u32) -> bool {
        let d = self.pos[a as usize].distance(&self.pos[b as usize]);
        if self.is_ap(a) || self.is_ap(b) {
            d <= self.geometry.r_cs + self.geometry.r_wifi
        } else {
            d <= 2.0 * self.geometry.r_tx
        }
    }

    fn kind_of(&self, node: u32) -> ColliderKind {
        if self.is_ap(node) {
            ColliderKind::AccessPoint
        } else {
            ColliderKind::Vehicle(node)
        }
    }

    fn start_tx(&mut self, node: u32, t: Nanos) {
        let air = if self.is_ap(node) { self.wifi_air } else { self.dsrc_air };
        let record = {
            let nd = &mut self.nodes[node as usize];
            nd.backoff = None;
            nd.counting_since = None;
            nd.committed = false;
            nd.transmitting = true;
            nd.version = nd.version.wrapping_add(1);
            match nd.frame.take() {
                Some(BsmSlot::Vehicle(b)) => b.record,
                Some(BsmSlot::Saturated) => None,
                None => None,
            }
        };
        if let Some(i) = record {
            self.records[i].tx_start_ns = Some(t);
            self.records[i].tx_position = self.pos[node as usize];
        }

        let here = self.pos[node as usize];
        let mut colliders = Vec::new();
        for k in 0..self.active.len() {
            let other = self.active[k].node;
            if !self.interferes(node, other) {
                continue;
            }
            let there = self.pos[other as usize];
            let offset = (self.active[k].start as i64) - (t as i64);
            if record.is_some() {
                colliders.push(ColliderObservation {
                    kind: self.kind_of(other),
                    position: there,
                    start_offset_ns: offset,
                });
            }
            if self.active[k].record.is_some() {
                let kind = self.kind_of(node);
                let tx = &mut self.active[k];
                // keep the relative vector measured now, anchored at the
                // other packet's own start position
                let anchor = match tx.record {
                    Some(i) => self.records[i].tx_position,
                    None => there,
                };
                tx.colliders.push(ColliderObservation {
                    kind,
                    position: Point::new(anchor.x + here.x - there.x, anchor.y + here.y - there.y),
                    start_offset_ns: -offset,
                });
            }
        }

        let sensed_by = self.neighbors[node as usize].clone();
        for &j in &sensed_by {
            self.nodes[j as usize].busy += 1;
            if self.nodes[j as usize].busy == 1 {
                self.on_busy_from_start(j, t);
            }
        }

        self.serial += 1;
        let serial = self.serial;
        self.active.push(ActiveTx {
            serial,
            node,
            start: t,
            end: t + air,
            record,
            colliders,
            sensed_by,
        });
        self.push(t + air, EventKind::TxEnd { serial });
    }

    fn on_tx_end(&mut self, serial: u64, t: Nanos) -> Result<(), SimError> {
        let k = self
            .active
            .iter()
            .position(|a| a.serial == serial)
            .ok_or_else(|| SimError::Invariant(format!("unknown transmission {serial}")))?;
        let tx = self.active.swap_remove(k);
        debug_assert_eq!(tx.end, t);

        let counted = tx.start.min(self.duration)..tx.end.min(self.duration);
        self.nodes[tx.node as usize].busy_ns += counted.end - counted.start;
        self.nodes[tx.node as usize].transmitting = false;

        for &j in &tx.sensed_by {
            let nd = &mut self.nodes[j as usize];
            nd.busy = nd.busy.checked_sub(1).ok_or_else(|| {
                SimError::Invariant(format!("busy count underflow at node {j}"))
            })?;
            if nd.busy == 0 {
                self.on_idle(j, t);
            }
        }

        if let Some(i) = tx.record {
            let pos = self.records[i].tx_position;
            let (class, collision) = classify_outcome(pos, &tx.colliders, &self.geometry, self.dsrc_slot);
            let rec = &mut self.records[i];
            rec.outcome = class;
            rec.collider_start_offsets_ns = tx.colliders.iter().map(|c| c.start_offset_ns).collect();
            rec.collision = collision;
            self.resolved[i] = true;
        }

        if self.is_ap(tx.node) {
            self.nodes[tx.node as usize].frame = Some(BsmSlot::Saturated);
        }
        if self.nodes[tx.node as usize].frame.is_some() {
            self.start_contention(tx.node, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ApPlacement, RoadConfig, TrafficConfig};

    fn hand_scenario(xs: &[(u32, f64)], ap_x: f64) -> Scenario {
        let road = RoadConfig::default();
        let traffic = TrafficConfig::from_total(6, &road).unwrap();
        Scenario {
            road,
            traffic,
            vehicles: xs
                .iter()
                .enumerate()
                .map(|(id, &(lane, x))| Vehicle {
                    id: id as u32,
                    lane,
                    x,
                    velocity: 0.0,
                })
                .collect(),
            ap_position: Point::new(ap_x, -ApPlacement::default().offset),
            geometry: RadioGeometry::default(),
            seed: 0,
        }
    }

    fn params(ibi: f64, cw: u32, wifi: bool) -> RunParams {
        RunParams {
            dsrc: DsrcMacParams::new(ibi, cw),
            wifi: WifiMacParams::enabled(wifi),
            duration: 2.0,
            options: SimOptions::default(),
        }
    }

    #[test]
    fn lone_vehicle_always_delivers() {
        let s = hand_scenario(&[(0, 100.0)], 500.0);
        let log = run_simulation(&s, &params(0.1, 63, false), 1).unwrap();
        assert_eq!(log.generated, 20);
        assert!(log.records.iter().all(|r| r.outcome == OutcomeClass::Dlvy));
    }

    #[test]
    fn forced_equal_backoff_gives_sync() {
        let s = hand_scenario(&[(0, 100.0), (0, 110.0)], 500.0);
        let mut p = params(0.1, 1, false);
        p.options.phase = PhaseMode::Aligned;
        let log = run_simulation(&s, &p, 7).unwrap();
        assert_eq!(log.records.len(), 40);
        for r in &log.records {
            assert_eq!(r.outcome, OutcomeClass::Sync);
            let g = r.collision.as_ref().unwrap();
            let d: Vec<f64> = g.distances().collect();
            assert_eq!(d.len(), 1);
            assert!((d[0] - 10.0).abs() < 1e-9);
            assert_eq!(r.collider_start_offsets_ns, vec![0]);
        }
    }

    #[test]
    fn distant_pair_is_hidden() {
        // 450 m apart: beyond carrier sense, inside 2 r_tx
        let s = hand_scenario(&[(0, 100.0), (0, 550.0)], 500.0);
        let mut p = params(0.1, 1, false);
        p.options.phase = PhaseMode::Aligned;
        let log = run_simulation(&s, &p, 7).unwrap();
        assert!(log.records.iter().all(|r| r.outcome == OutcomeClass::Hn));
    }

    #[test]
    fn far_pair_never_collides() {
        let s = hand_scenario(&[(0, 0.0), (0, 700.0)], 500.0);
        let mut p = params(0.1, 1, false);
        p.options.phase = PhaseMode::Aligned;
        let log = run_simulation(&s, &p, 7).unwrap();
        assert!(log.records.iter().all(|r| r.outcome == OutcomeClass::Dlvy));
    }

    #[test]
    fn classify_rules() {
        let g = RadioGeometry::default();
        let tx = Point::default();
        let slot = 13_000;
        assert_eq!(classify_outcome(tx, &[], &g, slot).0, OutcomeClass::Dlvy);
        let near = ColliderObservation {
            kind: ColliderKind::Vehicle(1),
            position: Point::new(0.9 * g.r_cs, 0.0),
            start_offset_ns: 0,
        };
        assert_eq!(classify_outcome(tx, &[near], &g, slot).0, OutcomeClass::Sync);
        let far = ColliderObservation {
            position: Point::new(1.5 * g.r_cs, 0.0),
            ..near
        };
        assert_eq!(classify_outcome(tx, &[far], &g, slot).0, OutcomeClass::Hn);
        let late = ColliderObservation {
            start_offset_ns: 200_000,
            ..near
        };
        assert_eq!(classify_outcome(tx, &[late], &g, slot).0, OutcomeClass::Hn);
        assert_eq!(classify_outcome(tx, &[far, near], &g, slot).0, OutcomeClass::Sync);
    }

    #[test]
    fn config_errors() {
        let s = hand_scenario(&[(0, 100.0)], 500.0);
        assert!(matches!(
            run_simulation(&s, &params(0.1, 0, false), 1),
            Err(SimError::Config(_))
        ));
        assert!(run_simulation(&s, &params(0.0005, 3, false), 1).is_err());
        let mut p = params(0.1, 3, false);
        p.duration = 0.05;
        assert!(run_simulation(&s, &p, 1).is_err());
        let mut p = params(0.1, 3, true);
        p.wifi.cw_min = 2000;
        assert!(run_simulation(&s, &p, 1).is_err());
    }

    #[test]
    fn trace_rows_parse_back() {
        let s = hand_scenario(&[(0, 100.0), (0, 110.0), (3, 520.0)], 500.0);
        let mut p = params(0.1, 2, true);
        p.options.phase = PhaseMode::Aligned;
        let log = run_simulation(&s, &p, 3).unwrap();
        let mut buf = Vec::new();
        let mut est: RgbEstimator<ChaCha8Rng> = RgbEstimator::Exact;
        log.write_trace("r0", &mut est, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        let rows: Vec<TraceRow> = lines.map(|l| l.parse().unwrap()).collect();
        assert_eq!(rows.len(), log.records.len());
        for (row, rec) in rows.iter().zip(&log.records) {
            assert_eq!(row.outcome, rec.outcome);
            assert_eq!(row.tx_start_us.is_none(), rec.tx_start_ns.is_none());
            assert_eq!(row.to_string().parse::<TraceRow>().unwrap().to_string(), row.to_string());
        }
        assert!("a,1".parse::<TraceRow>().is_err());
    }
    fn random_log(density: u32, cw: u32, wifi: bool, seed: u64) -> EventLog {
        let road = RoadConfig::default();
        let traffic = TrafficConfig::from_total(density, &road).unwrap();
        let s = crate::scenario::build_scenario(
            road,
            traffic,
            ApPlacement::default(),
            RadioGeometry::default(),
            seed,
        )
        .unwrap();
        let mut p = params(0.1, cw, wifi);
        // positions stay put for the whole run
        p.options.mobility_tick = 10.0;
        run_simulation(&s, &p, seed).unwrap()
    }

    #[test]
    fn run_invariants() {
        let slot = secs_to_nanos(DsrcMacParams::SLOT) as i64;
        for (seed, wifi) in [(1, false), (2, true), (3, true)] {
            let log = random_log(120, 31, wifi, seed);
            let g = log.scenario.geometry;
            assert_eq!(log.counts().total(), log.generated);
            assert_eq!(log.generated, 120 * 20);
            assert!(log.records.windows(2).all(|w| w[0].generation_ns <= w[1].generation_ns));
            for r in &log.records {
                assert_eq!(r.outcome == OutcomeClass::Exp, r.tx_start_ns.is_none());
                let Some(c) = &r.collision else {
                    assert!(matches!(r.outcome, OutcomeClass::Dlvy | OutcomeClass::Exp));
                    continue;
                };
                assert!(!c.colliders().is_empty());
                // carrier sense: an in-range overlap is always a same-slot start
                for (d, off) in c.distances().zip(&r.collider_start_offsets_ns) {
                    if d <= g.r_cs {
                        assert!(off.abs() < slot, "offset {off} at {d} m");
                    }
                }
                match r.outcome {
                    OutcomeClass::Sync => assert!(c.distances().any(|d| d <= g.r_cs)),
                    OutcomeClass::Hn => assert!(c.distances().all(|d| d > g.r_cs)),
                    _ => unreachable!(),
                }
            }
            if wifi {
                let busiest = log.vehicle_busy.iter().cloned().fold(0.0, f64::max);
                assert!(log.ap_busy > busiest, "{} vs {busiest}", log.ap_busy);
            }
        }
    }

    #[test]
    fn replay_detects_mutation() {
        let log = random_log(30, 15, true, 9);
        assert_eq!(replay_check(&log), Ok(()));
        let mut bad = log.clone();
        let r = &mut bad.records[5];
        r.outcome = if r.outcome == OutcomeClass::Dlvy {
            OutcomeClass::Exp
        } else {
            OutcomeClass::Dlvy
        };
        assert!(matches!(replay_check(&bad), Err(ReplayError::Diverged { index: 5, .. })));
    }
}

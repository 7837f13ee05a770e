//! Fixed-tick agent simulation of customers moving through a store.
//!
//! Each customer is spawned at the spawn node, walks to a handful of bays,
//! queues at a randomly chosen till, is served and leaves through the
//! despawn node. Every tick all agents advance along shortest-path routes;
//! proximity contacts are then detected and merged into collision events.
//!
//! All randomness comes from per-agent ChaCha streams derived from the
//! config seed, so a run is a pure function of `(layout, config)`.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::basket::ClusterReport;
use crate::collision::{detect_contacts, AgentId, CollisionEvent, CollisionTracker, Contact, SpatialHash};
use crate::layout::{LayoutError, NodeIdx, Position, StoreLayout};

/// Namespace for every name-based simulation id produced by this crate.
pub const ID_NAMESPACE: Uuid = Uuid::from_u128(0x5a0c_33f1_8d2e_5b7a_9c41_0e6f_d2b8_a417);

const POS_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layout has {have} bays but each agent needs {need}")]
    TooFewBays { have: usize, need: usize },
    #[error("unknown feature flag: {0}")]
    UnknownFeature(String),
    #[error("cluster report: {0}")]
    Report(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

macro_rules! feature_flags {
    ($($row:literal $name:ident),* $(,)?) => {
        /// One switch per row of the customer-behaviour feature table.
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct FeatureFlags {
            $(pub $name: bool,)*
        }

        impl FeatureFlags {
            /// `(row, name)` for every flag in table order.
            pub const ALL: &'static [(u8, &'static str)] = &[$(($row, stringify!($name)),)*];

            pub fn get(&self, name: &str) -> Option<bool> {
                match name {
                    $(stringify!($name) => Some(self.$name),)*
                    _ => None,
                }
            }

            pub fn set(&mut self, name: &str, on: bool) -> Result<(), SimError> {
                match name {
                    $(stringify!($name) => self.$name = on,)*
                    _ => return Err(SimError::UnknownFeature(name.to_string())),
                }
                Ok(())
            }
        }
    };
}

feature_flags! {
    1 variable_speed,
    2 speed_penalty_per_item,
    3 heavy_item_speed_penalty,
    4 put_item_aside,
    5 distracted_by_items,
    6 has_baggage,
    7 zone_dependent_speed,
    8 return_to_item_later,
    9 wander,
    10 avoid_aisles,
    11 use_trolley,
    12 multiple_baskets,
    13 return_trolley,
    14 leave_trolley_at_car,
    15 return_from_queue,
    16 return_from_checkout,
    17 revisit_inaccessible_bay,
    18 return_next_day_out_of_stock,
    19 cold_items_last,
    20 compare_multiple_copies,
    21 child_touches_products,
    22 child_carried,
    23 shoplift,
    24 pay_cash,
    25 pay_card,
    26 pay_contactless,
    27 violate_social_distancing,
    28 deliberate_infection,
    29 parent_shouts,
    30 parking_ticket,
    31 abandon_leave_basket,
    32 abandon_return_items,
    33 wear_gloves_masks,
    34 change_gloves_masks,
    35 consume_pack_in_store,
    36 consume_pack_put_back,
    37 shop_with_others,
}

impl FeatureFlags {
    /// Flags that change simulation behaviour. All others are accepted but inert.
    pub const IMPLEMENTED: [&'static str; 4] = [
        "variable_speed",
        "speed_penalty_per_item",
        "avoid_aisles",
        "violate_social_distancing",
    ];

    pub fn enabled(&self) -> Vec<&'static str> {
        Self::ALL
            .iter()
            .filter(|(_, n)| self.get(n) == Some(true))
            .map(|(_, n)| *n)
            .collect()
    }

    /// Enabled flags that have no effect.
    pub fn inert(&self) -> Vec<&'static str> {
        self.enabled()
            .into_iter()
            .filter(|n| !Self::IMPLEMENTED.contains(n))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    #[default]
    Random,
    /// Path to a cluster report written by the `cluster` command.
    Clustered(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Seconds per tick.
    pub tick_length: f64,
    pub agents_total: u32,
    /// Seconds between spawns.
    pub spawn_interval: f64,
    pub bays_per_agent: usize,
    /// Metres per second.
    pub base_speed: f64,
    /// Metres.
    pub collision_radius: f64,
    pub features: FeatureFlags,
    pub trajectory_source: TrajectorySource,
    /// Hard stop in seconds; a run cut here is flagged truncated.
    pub max_sim_time: f64,
    /// Seconds spent at each bay.
    pub bay_dwell: f64,
    pub checkout_base: f64,
    pub checkout_per_item: f64,
    /// Ticks between metrics frames.
    pub frame_every: u64,
    /// Absent ticks tolerated inside one collision event.
    pub gap_ticks: u64,
    /// Cumulative collision seconds that mark an agent at risk.
    pub at_risk_exposure: f64,
    /// Near-miss band upper edge as a multiple of the collision radius.
    pub near_miss_factor: f64,
    /// variable_speed: per-agent speed factor drawn from `1 ± spread`.
    pub speed_spread: f64,
    /// speed_penalty_per_item: fractional slow-down per item in the basket.
    pub item_speed_penalty: f64,
    pub min_speed_factor: f64,
    /// avoid_aisles: chance that an agent avoids a given edge.
    pub avoid_probability: f64,
    /// avoid_aisles: cost multiplier on avoided edges.
    pub avoid_penalty: f64,
    /// Seconds an agent waits for space before moving on regardless.
    pub patience: f64,
    /// Gap between queued customers.
    pub queue_spacing: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            tick_length: 0.1,
            agents_total: 50,
            spawn_interval: 4.0,
            bays_per_agent: 5,
            base_speed: 1.2,
            collision_radius: 2.0,
            features: FeatureFlags::default(),
            trajectory_source: TrajectorySource::Random,
            max_sim_time: 3600.0,
            bay_dwell: 5.0,
            checkout_base: 30.0,
            checkout_per_item: 1.0,
            frame_every: 10,
            gap_ticks: 0,
            at_risk_exposure: 15.0,
            near_miss_factor: 1.5,
            speed_spread: 0.2,
            item_speed_penalty: 0.03,
            min_speed_factor: 0.5,
            avoid_probability: 0.2,
            avoid_penalty: 5.0,
            patience: 10.0,
            queue_spacing: 2.2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("tick_length", self.tick_length),
            ("spawn_interval", self.spawn_interval),
            ("base_speed", self.base_speed),
            ("collision_radius", self.collision_radius),
            ("queue_spacing", self.queue_spacing),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("max_sim_time", self.max_sim_time),
            ("bay_dwell", self.bay_dwell),
            ("checkout_base", self.checkout_base),
            ("checkout_per_item", self.checkout_per_item),
            ("at_risk_exposure", self.at_risk_exposure),
            ("item_speed_penalty", self.item_speed_penalty),
            ("patience", self.patience),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be non-negative")));
            }
        }
        if self.agents_total == 0 {
            return Err(SimError::Config("agents_total must be at least 1".into()));
        }
        if self.bays_per_agent == 0 {
            return Err(SimError::Config("bays_per_agent must be at least 1".into()));
        }
        if self.frame_every == 0 {
            return Err(SimError::Config("frame_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.speed_spread) {
            return Err(SimError::Config("speed_spread must lie in [0, 1)".into()));
        }
        if !(self.min_speed_factor > 0.0 && self.min_speed_factor <= 1.0) {
            return Err(SimError::Config("min_speed_factor must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.avoid_probability) {
            return Err(SimError::Config("avoid_probability must lie in [0, 1]".into()));
        }
        if !(self.avoid_penalty >= 1.0 && self.avoid_penalty.is_finite()) {
            return Err(SimError::Config("avoid_penalty must be at least 1".into()));
        }
        if !(self.near_miss_factor > 1.0 && self.near_miss_factor.is_finite()) {
            return Err(SimError::Config("near_miss_factor must exceed 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Upper bound on the distance any agent covers in one tick.
    pub fn max_step(&self) -> f64 {
        let factor = if self.features.variable_speed {
            1.0 + self.speed_spread
        } else {
            1.0
        };
        self.base_speed * factor * self.tick_length
    }

    fn ticks(&self, seconds: f64) -> u64 {
        (seconds / self.tick_length).round() as u64
    }
}

/// Id of a run outside any experiment.
pub fn standalone_sim_id(cfg: &SimConfig) -> Uuid {
    Uuid::new_v5(&ID_NAMESPACE, format!("standalone/{}", cfg.hash()).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Spawned,
    Shopping,
    Queuing,
    Checkout,
    Despawned,
}

impl Phase {
    /// Whether `self → next` is an edge of the customer state machine.
    pub fn can_become(self, next: Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Spawned, Phase::Shopping)
                | (Phase::Shopping, Phase::Queuing)
                | (Phase::Queuing, Phase::Checkout)
                | (Phase::Checkout, Phase::Despawned)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentState {
    Spawned,
    /// Bays still to visit, front first. Once empty the agent heads to `till`.
    Shopping { bays: VecDeque<usize>, till: Option<usize> },
    Queuing { till: usize },
    /// `remaining` service ticks; zero once served and walking out.
    Checkout { till: usize, remaining: u64 },
    Despawned,
}

impl AgentState {
    pub fn phase(&self) -> Phase {
        match self {
            AgentState::Spawned => Phase::Spawned,
            AgentState::Shopping { .. } => Phase::Shopping,
            AgentState::Queuing { .. } => Phase::Queuing,
            AgentState::Checkout { .. } => Phase::Checkout,
            AgentState::Despawned => Phase::Despawned,
        }
    }
}

/// Where an agent stands on the store graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    Node(NodeIdx),
    Edge { from: NodeIdx, to: NodeIdx, offset: f64 },
}

/// The route currently being walked and how far along it the agent is.
#[derive(Debug, Clone, PartialEq)]
pub struct Leg {
    nodes: Vec<NodeIdx>,
    cum: Vec<f64>,
    travelled: f64,
}

impl Leg {
    fn new(layout: &StoreLayout, nodes: Vec<NodeIdx>) -> Self {
        let mut cum = Vec::with_capacity(nodes.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in nodes.windows(2) {
            acc += layout.edge_length(w[0], w[1]).expect("route follows edges");
            cum.push(acc);
        }
        Self { nodes, cum, travelled: 0.0 }
    }

    fn stay(node: NodeIdx) -> Self {
        Self {
            nodes: vec![node],
            cum: vec![0.0],
            travelled: 0.0,
        }
    }

    pub fn nodes(&self) -> &[NodeIdx] {
        &self.nodes
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn travelled(&self) -> f64 {
        self.travelled
    }

    pub fn done(&self) -> bool {
        self.travelled >= self.length() - POS_EPS
    }

    fn segment(&self, d: f64) -> usize {
        // last i with cum[i] <= d
        self.cum.partition_point(|&c| c <= d + POS_EPS).saturating_sub(1)
    }

    pub fn location_at(&self, d: f64) -> Location {
        let i = self.segment(d);
        if (d - self.cum[i]).abs() <= POS_EPS || i + 1 == self.nodes.len() {
            Location::Node(self.nodes[i])
        } else {
            Location::Edge {
                from: self.nodes[i],
                to: self.nodes[i + 1],
                offset: d - self.cum[i],
            }
        }
    }

    pub fn point_at(&self, layout: &StoreLayout, d: f64) -> Position {
        match self.location_at(d) {
            Location::Node(n) => layout.position(n),
            Location::Edge { from, to, offset } => {
                let len = layout.edge_length(from, to).unwrap();
                layout.position(from).lerp(&layout.position(to), offset / len)
            }
        }
    }

    /// The directed edge an agent at `d` is about to traverse, with its offset.
    fn heading(&self, d: f64) -> Option<(NodeIdx, NodeIdx, f64)> {
        match self.location_at(d) {
            Location::Edge { from, to, offset } => Some((from, to, offset)),
            Location::Node(_) => {
                let i = self.segment(d);
                (i + 1 < self.nodes.len()).then(|| (self.nodes[i], self.nodes[i + 1], 0.0))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentTimers {
    pub checkout: f64,
    pub shopping: f64,
    pub idle: f64,
    pub waiting: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct TickCounts {
    shopping: u64,
    waiting: u64,
    checkout: u64,
    idle: u64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: AgentId,
    pub state: AgentState,
    /// Personal walking speed before basket penalties.
    pub speed: f64,
    pub basket_size: u32,
    pub leg: Leg,
    pub spawn_tick: u64,
    dwell: u64,
    paused: u64,
    forced: bool,
    idle: bool,
    avoided: Vec<bool>,
    counts: TickCounts,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn position(&self, layout: &StoreLayout) -> Position {
        self.leg.point_at(layout, self.leg.travelled)
    }

    pub fn location(&self) -> Location {
        self.leg.location_at(self.leg.travelled)
    }

    pub fn in_store(&self) -> bool {
        !matches!(self.state, AgentState::Spawned | AgentState::Despawned)
    }

    /// Paused by the distancing rule during the last tick.
    pub fn is_idle(&self) -> bool {
        self.idle
    }

    pub fn timers(&self, tick_length: f64) -> AgentTimers {
        let c = self.counts;
        AgentTimers {
            checkout: c.checkout as f64 * tick_length,
            shopping: c.shopping as f64 * tick_length,
            idle: c.idle as f64 * tick_length,
            waiting: c.waiting as f64 * tick_length,
            total: (c.checkout + c.shopping + c.idle + c.waiting) as f64 * tick_length,
        }
    }
}

/// Resolved journey generator: bay indices into the layout.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectories {
    Random { bays: usize },
    Clustered { weights: Vec<f64>, sequences: Vec<Vec<usize>>, bays: usize },
}

impl Trajectories {
    pub fn resolve(source: &TrajectorySource, layout: &StoreLayout) -> Result<Self, SimError> {
        match source {
            TrajectorySource::Random => Ok(Trajectories::Random { bays: layout.bays().len() }),
            TrajectorySource::Clustered(path) => {
                let report = ClusterReport::load(path)
                    .map_err(|e| SimError::Report(format!("{}: {e}", path.display())))?;
                Self::from_report(&report, layout)
            }
        }
    }

    pub fn from_report(report: &ClusterReport, layout: &StoreLayout) -> Result<Self, SimError> {
        let mut weights = Vec::new();
        let mut sequences = Vec::new();
        for c in &report.clusters {
            let seq = c
                .bay_sequence
                .iter()
                .map(|b| {
                    layout
                        .bay(b)
                        .ok_or_else(|| SimError::Report(format!("cluster {} names unknown bay {b}", c.id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(SimError::Report(format!("cluster {} has invalid weight", c.id)));
            }
            weights.push(c.weight);
            sequences.push(seq);
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(SimError::Report("no cluster carries positive weight".into()));
        }
        Ok(Trajectories::Clustered {
            weights,
            sequences,
            bays: layout.bays().len(),
        })
    }
}

/// Draws the ordered bays one agent will visit.
///
/// Random journeys are `n` distinct bays in random order. Clustered journeys
/// pick a cluster by weight, keep at most `n` bays of its sequence and top up
/// with distinct random bays.
pub fn assign_trajectory(
    source: &Trajectories,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, SimError> {
    let total = match source {
        Trajectories::Random { bays } | Trajectories::Clustered { bays, .. } => *bays,
    };
    if total < n {
        return Err(SimError::TooFewBays { have: total, need: n });
    }
    let mut seq = match source {
        Trajectories::Random { .. } => Vec::new(),
        Trajectories::Clustered { weights, sequences, .. } => {
            let dist = WeightedIndex::new(weights).map_err(|e| SimError::Report(e.to_string()))?;
            let mut s = Vec::with_capacity(n);
            for &b in &sequences[dist.sample(rng)] {
                if s.len() < n && !s.contains(&b) {
                    s.push(b);
                }
            }
            s
        }
    };
    if seq.len() < n {
        let mut rest: Vec<usize> = (0..total).filter(|b| !seq.contains(b)).collect();
        let (picked, _) = rest.partial_shuffle(rng, n - seq.len());
        seq.extend_from_slice(picked);
    }
    Ok(seq)
}

/// Uniform till choice.
pub fn choose_till(tills: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(0..tills)
}

#[derive(Debug, Clone)]
struct Till {
    node: NodeIdx,
    queue: VecDeque<usize>,
    serving: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub sim_id: Uuid,
    pub tick: u64,
    pub in_store: u32,
    pub shopping: u32,
    pub queuing: u32,
    pub at_checkout: u32,
    pub idle: u32,
    pub near_misses: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub tick: u64,
    pub agent: AgentId,
    pub from: Phase,
    pub to: Phase,
}

/// Final per-run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub sim_id: Uuid,
    pub config_hash: String,
    pub ticks: u64,
    pub sim_time_s: f64,
    pub spawned: u32,
    pub despawned: u32,
    pub total_collisions: u64,
    pub near_misses: u64,
    pub peak_in_store: u32,
    pub half_empty_s: Option<f64>,
    pub truncated: bool,
    pub at_risk: Vec<AgentId>,
    pub timers: BTreeMap<AgentId, AgentTimers>,
    pub location_visits: BTreeMap<String, u64>,
    pub inert_features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sim_id: Uuid,
    pub error: String,
}

/// One JSONL line of simulation output.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Record {
    Collision(CollisionEvent),
    Frame(MetricsFrame),
    Summary(SimSummary),
    Failure(FailureRecord),
}

// Dispatch on a distinguishing key; untagged buffering can't parse the
// integer map keys in the summary timers.
impl<'de> Deserialize<'de> for Record {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = serde_json::Value::deserialize(d)?;
        let has = |k: &str| v.get(k).is_some();
        let rec = if has("config_hash") {
            serde_json::from_value(v).map(Record::Summary)
        } else if has("agent_a") {
            serde_json::from_value(v).map(Record::Collision)
        } else if has("in_store") {
            serde_json::from_value(v).map(Record::Frame)
        } else if has("error") {
            serde_json::from_value(v).map(Record::Failure)
        } else {
            return Err(D::Error::custom("unrecognised record"));
        };
        rec.map_err(D::Error::custom)
    }
}

impl Record {
    pub fn sim_id(&self) -> Uuid {
        match self {
            Record::Collision(r) => r.sim_id,
            Record::Frame(r) => r.sim_id,
            Record::Summary(r) => r.sim_id,
            Record::Failure(r) => r.sim_id,
        }
    }
}

pub fn write_record(w: &mut impl Write, rec: &Record) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub summary: SimSummary,
    pub collisions: Vec<CollisionEvent>,
    pub frames: Vec<MetricsFrame>,
    pub transitions: Vec<Transition>,
}

/// First time occupancy falls to half its peak, scanning frames after the
/// one where the peak was first reached.
pub fn half_empty_time(frames: &[MetricsFrame], peak: u32, tick_length: f64) -> Result<Option<f64>, SimError> {
    if frames.is_empty() {
        return Err(SimError::Config("no metrics frames".into()));
    }
    if peak == 0 {
        return Ok(None);
    }
    let Some(at_peak) = frames.iter().position(|f| f.in_store >= peak) else {
        return Ok(None);
    };
    Ok(frames[at_peak + 1..]
        .iter()
        .find(|f| 2 * f.in_store <= peak)
        .map(|f| f.tick as f64 * tick_length))
}

/// A single simulation run, advanced one tick at a time.
pub struct Simulation<'a> {
    layout: &'a StoreLayout,
    cfg: SimConfig,
    sim_id: Uuid,
    config_hash: String,
    trajectories: Trajectories,
    agents: Vec<Agent>,
    tills: Vec<Till>,
    spawn_ticks: Vec<u64>,
    tick: u64,
    grid: SpatialHash,
    tracker: CollisionTracker,
    near_tracker: CollisionTracker,
    near_misses: u64,
    visits: Vec<u64>,
    collisions: Vec<CollisionEvent>,
    frames: Vec<MetricsFrame>,
    transitions: Vec<Transition>,
    pending: Vec<Record>,
    truncated: bool,
    dwell_ticks: u64,
    patience_ticks: u64,
    max_ticks: u64,
}

impl<'a> Simulation<'a> {
    pub fn new(layout: &'a StoreLayout, cfg: SimConfig, sim_id: Uuid) -> Result<Self, SimError> {
        cfg.validate()?;
        let trajectories = Trajectories::resolve(&cfg.trajectory_source, layout)?;
        if layout.bays().len() < cfg.bays_per_agent {
            return Err(SimError::TooFewBays {
                have: layout.bays().len(),
                need: cfg.bays_per_agent,
            });
        }
        let spawn_ticks = (0..cfg.agents_total as u64)
            .map(|k| (k as f64 * cfg.spawn_interval / cfg.tick_length).round() as u64)
            .collect();
        let tills = layout
            .tills()
            .iter()
            .map(|&node| Till {
                node,
                queue: VecDeque::new(),
                serving: None,
            })
            .collect();
        Ok(Self {
            layout,
            config_hash: cfg.hash(),
            trajectories,
            agents: Vec::new(),
            tills,
            spawn_ticks,
            tick: 0,
            grid: SpatialHash::new(),
            tracker: CollisionTracker::with_gap(sim_id, cfg.gap_ticks),
            near_tracker: CollisionTracker::with_gap(sim_id, cfg.gap_ticks),
            near_misses: 0,
            visits: vec![0; layout.bays().len()],
            collisions: Vec::new(),
            frames: Vec::new(),
            transitions: Vec::new(),
            pending: Vec::new(),
            truncated: false,
            dwell_ticks: cfg.ticks(cfg.bay_dwell),
            patience_ticks: cfg.ticks(cfg.patience),
            max_ticks: (cfg.max_sim_time / cfg.tick_length + POS_EPS).floor() as u64,
            sim_id,
            cfg,
        })
    }

    pub fn sim_id(&self) -> Uuid {
        self.sim_id
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Number of ticks processed so far.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Every agent spawned so far, indexed by id.
    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn in_store(&self) -> usize {
        self.agents.iter().filter(|a| a.in_store()).count()
    }

    /// All agents have spawned and left.
    pub fn finished(&self) -> bool {
        self.agents.len() == self.spawn_ticks.len() && self.in_store() == 0
    }

    /// Records produced since the last call.
    pub fn drain_records(&mut self) -> Vec<Record> {
        std::mem::take(&mut self.pending)
    }

    /// Advances one tick. Returns false once the run is over (finished or
    /// out of time), in which case nothing is processed.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished() {
            return Ok(false);
        }
        if self.tick >= self.max_ticks {
            self.truncated = true;
            return Ok(false);
        }
        let t = self.tick;
        while self.agents.len() < self.spawn_ticks.len() && self.spawn_ticks[self.agents.len()] <= t {
            self.spawn(t)?;
        }

        // front-most agents on each edge move first so followers see where
        // their leader actually ends up this tick
        let mut live: Vec<Option<(Location, Position)>> = self
            .agents
            .iter()
            .map(|a| a.in_store().then(|| (a.location(), a.position(self.layout))))
            .collect();
        let mut order: Vec<(f64, usize)> = self
            .agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.in_store())
            .map(|(i, a)| (self.to_next_node(a), i))
            .collect();
        order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for (_, i) in order {
            self.update_agent(i, t, &live)?;
            let a = &self.agents[i];
            live[i] = a.in_store().then(|| (a.location(), a.position(self.layout)));
        }
        self.serve_tills(t)?;
        self.detect(t)?;

        for a in self.agents.iter_mut().filter(|a| a.in_store()) {
            let c = &mut a.counts;
            match a.state {
                _ if a.idle => c.idle += 1,
                AgentState::Queuing { .. } => c.waiting += 1,
                AgentState::Checkout { .. } => c.checkout += 1,
                _ => c.shopping += 1,
            }
        }
        if t % self.cfg.frame_every == 0 {
            self.push_frame(t);
        }
        self.tick += 1;
        Ok(true)
    }

    fn set_state(&mut self, i: usize, t: u64, state: AgentState) {
        let from = self.agents[i].state.phase();
        let to = state.phase();
        debug_assert!(from.can_become(to), "{from:?} -> {to:?}");
        self.transitions.push(Transition {
            tick: t,
            agent: self.agents[i].id,
            from,
            to,
        });
        self.agents[i].state = state;
    }

    fn spawn(&mut self, t: u64) -> Result<(), SimError> {
        let i = self.agents.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(i as u64);
        // fixed draw order so that flags never shift other agents' choices
        let bays = assign_trajectory(&self.trajectories, self.cfg.bays_per_agent, &mut rng)?;
        let spread = self.cfg.speed_spread;
        let factor = rng.random_range(1.0 - spread..=1.0 + spread);
        let avoided: Vec<bool> = (0..self.layout.edges().len())
            .map(|_| rng.random_bool(self.cfg.avoid_probability))
            .collect();
        let f = &self.cfg.features;
        self.agents.push(Agent {
            id: AgentId(i as u32),
            state: AgentState::Spawned,
            speed: self.cfg.base_speed * if f.variable_speed { factor } else { 1.0 },
            basket_size: 0,
            leg: Leg::stay(self.layout.spawn()),
            spawn_tick: t,
            dwell: 0,
            paused: 0,
            forced: false,
            idle: false,
            avoided: if f.avoid_aisles { avoided } else { Vec::new() },
            counts: TickCounts::default(),
            rng,
        });
        self.set_state(
            i,
            t,
            AgentState::Shopping {
                bays: bays.into(),
                till: None,
            },
        );
        self.plan_next(i)?;
        if self.agents[i].leg.length() == 0.0 {
            self.arrive_at_bay(i);
        }
        Ok(())
    }

    fn route_to(&self, i: usize, to: NodeIdx) -> Result<Leg, SimError> {
        let a = &self.agents[i];
        let from = *a.leg.nodes.last().unwrap();
        let penalty = self.cfg.avoid_penalty;
        let route = self.layout.route_weighted(from, to, |e| {
            if a.avoided.get(e).copied().unwrap_or(false) {
                penalty
            } else {
                1.0
            }
        })?;
        Ok(Leg::new(self.layout, route.nodes))
    }

    /// Routes the agent toward its next bay, or to a till once the list is done.
    fn plan_next(&mut self, i: usize) -> Result<(), SimError> {
        let AgentState::Shopping { bays, till } = &self.agents[i].state else {
            unreachable!("planning outside shopping");
        };
        let target = match bays.front() {
            Some(&b) => self.layout.bays()[b].node,
            None => {
                let k = match till {
                    Some(k) => *k,
                    None => choose_till(self.tills.len(), &mut self.agents[i].rng),
                };
                if let AgentState::Shopping { till, .. } = &mut self.agents[i].state {
                    *till = Some(k);
                }
                self.tills[k].node
            }
        };
        self.agents[i].leg = self.route_to(i, target)?;
        self.agents[i].forced = false;
        Ok(())
    }

    fn arrive_at_bay(&mut self, i: usize) {
        if let AgentState::Shopping { bays, .. } = &self.agents[i].state {
            if let Some(&b) = bays.front() {
                self.visits[b] += 1;
                self.agents[i].dwell = self.dwell_ticks.max(1);
            }
        }
    }

    /// Distance left on the edge the agent is walking, zero when standing.
    fn to_next_node(&self, a: &Agent) -> f64 {
        match a.leg.heading(a.leg.travelled) {
            Some((u, v, off)) => self.layout.edge_length(u, v).unwrap() - off,
            None => 0.0,
        }
    }

    fn speed(&self, a: &Agent) -> f64 {
        if self.cfg.features.speed_penalty_per_item {
            let f = 1.0 - self.cfg.item_speed_penalty * a.basket_size as f64;
            a.speed * f.max(self.cfg.min_speed_factor)
        } else {
            a.speed
        }
    }

    /// Whether moving agent `i` from `d` to `nd` would close in on someone
    /// ahead of it on the same directed edge to within the collision radius.
    fn blocked(&self, i: usize, d: f64, nd: f64, live: &[Option<(Location, Position)>]) -> bool {
        let leg = &self.agents[i].leg;
        let Some((u, v, off)) = leg.heading(d) else {
            return false;
        };
        let here = leg.point_at(self.layout, d);
        let next = leg.point_at(self.layout, nd);
        let r = self.cfg.collision_radius;
        live.iter().enumerate().any(|(j, entry)| {
            let Some((loc, pos)) = *entry else {
                return false;
            };
            let ahead = j != i
                && match loc {
                    Location::Node(n) => n == v,
                    Location::Edge { from, to, offset } => {
                        from == u && to == v && (offset > off || (offset == off && j < i))
                    }
                };
            ahead && {
                let dn = next.distance(&pos);
                dn <= r && dn < here.distance(&pos)
            }
        })
    }

    /// Walks agent `i` toward `target` along its leg, subject to the distancing rule.
    fn advance(&mut self, i: usize, target: f64, live: &[Option<(Location, Position)>], distancing: bool) {
        let a = &self.agents[i];
        let d = a.leg.travelled;
        if target <= d {
            return;
        }
        let nd = (d + self.speed(a) * self.cfg.tick_length).min(target);
        let rule = distancing && !self.cfg.features.violate_social_distancing && !a.forced;
        if rule && self.blocked(i, d, nd, live) {
            let a = &mut self.agents[i];
            a.idle = true;
            a.paused += 1;
            if a.paused >= self.patience_ticks {
                a.forced = true;
            }
            return;
        }
        let a = &mut self.agents[i];
        a.paused = 0;
        if a.forced && a.leg.segment(nd) != a.leg.segment(d) {
            a.forced = false;
        }
        a.leg.travelled = nd;
    }

    fn update_agent(&mut self, i: usize, t: u64, live: &[Option<(Location, Position)>]) -> Result<(), SimError> {
        self.agents[i].idle = false;
        match self.agents[i].state.clone() {
            AgentState::Shopping { till: None, .. } => {
                let a = &mut self.agents[i];
                if a.dwell > 0 {
                    a.dwell -= 1;
                    if a.dwell == 0 {
                        a.basket_size += 1;
                        if let AgentState::Shopping { bays, .. } = &mut a.state {
                            bays.pop_front();
                        }
                        self.plan_next(i)?;
                        if self.agents[i].leg.length() == 0.0 {
                            self.arrive_at_bay(i);
                        }
                    }
                    return Ok(());
                }
                let len = a.leg.length();
                self.advance(i, len, live, true);
                if self.agents[i].leg.done() {
                    self.arrive_at_bay(i);
                }
            }
            AgentState::Shopping { till: Some(k), .. } => {
                let tail = self.queue_slot(self.occupancy(k), &self.agents[i].leg);
                self.advance(i, tail, live, true);
                let a = &self.agents[i];
                let tail = self.queue_slot(self.occupancy(k), &a.leg);
                if a.leg.travelled >= tail - POS_EPS {
                    self.tills[k].queue.push_back(i);
                    self.set_state(i, t, AgentState::Queuing { till: k });
                }
            }
            AgentState::Queuing { till: k } => {
                let q = self.tills[k].queue.iter().position(|&j| j == i).expect("queued agent is in its queue");
                let slot = q + usize::from(self.tills[k].serving.is_some());
                let target = self.queue_slot(slot, &self.agents[i].leg);
                self.advance(i, target, live, false);
            }
            AgentState::Checkout { remaining: 0, .. } => {
                let len = self.agents[i].leg.length();
                self.advance(i, len, live, true);
                if self.agents[i].leg.done() {
                    self.set_state(i, t, AgentState::Despawned);
                }
            }
            AgentState::Checkout { .. } | AgentState::Spawned | AgentState::Despawned => {}
        }
        Ok(())
    }

    fn occupancy(&self, k: usize) -> usize {
        self.tills[k].queue.len() + usize::from(self.tills[k].serving.is_some())
    }

    /// Distance along `leg` of queue slot `slot` (0 = at the till).
    fn queue_slot(&self, slot: usize, leg: &Leg) -> f64 {
        (leg.length() - slot as f64 * self.cfg.queue_spacing).max(0.0)
    }

    fn serve_tills(&mut self, t: u64) -> Result<(), SimError> {
        for k in 0..self.tills.len() {
            if let Some(j) = self.tills[k].serving {
                if let AgentState::Checkout { remaining, .. } = &mut self.agents[j].state {
                    *remaining -= 1;
                    if *remaining == 0 {
                        self.tills[k].serving = None;
                        self.agents[j].leg = self.route_to(j, self.layout.despawn())?;
                        self.agents[j].forced = false;
                        if self.agents[j].leg.length() == 0.0 {
                            self.set_state(j, t, AgentState::Despawned);
                        }
                    }
                }
            }
            if self.tills[k].serving.is_none() {
                if let Some(&front) = self.tills[k].queue.front() {
                    if self.agents[front].leg.done() {
                        self.tills[k].queue.pop_front();
                        self.tills[k].serving = Some(front);
                        let items = self.agents[front].basket_size as f64;
                        let service = self
                            .cfg
                            .ticks(self.cfg.checkout_base + self.cfg.checkout_per_item * items)
                            .max(1);
                        self.set_state(front, t, AgentState::Checkout { till: k, remaining: service });
                    }
                }
            }
        }
        Ok(())
    }

    fn detect(&mut self, t: u64) -> Result<(), SimError> {
        let positions: Vec<(AgentId, Position)> = self
            .agents
            .iter()
            .filter(|a| a.in_store())
            .map(|a| (a.id, a.position(self.layout)))
            .collect();
        let r = self.cfg.collision_radius;
        let wide = detect_contacts(&mut self.grid, &positions, r * self.cfg.near_miss_factor)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let close: Vec<Contact> = wide.iter().filter(|c| c.distance <= r).copied().collect();
        let closed = self
            .tracker
            .update(&close, t)
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.emit_collisions(closed);
        let near = self
            .near_tracker
            .update(&wide, t)
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.near_misses += near.iter().filter(|e| e.min_distance > r).count() as u64;
        Ok(())
    }

    fn emit_collisions(&mut self, events: Vec<CollisionEvent>) {
        for e in events {
            self.pending.push(Record::Collision(e.clone()));
            self.collisions.push(e);
        }
    }

    fn frame(&self, t: u64) -> MetricsFrame {
        let mut f = MetricsFrame {
            sim_id: self.sim_id,
            tick: t,
            in_store: 0,
            shopping: 0,
            queuing: 0,
            at_checkout: 0,
            idle: 0,
            near_misses: self.near_misses,
        };
        for a in self.agents.iter().filter(|a| a.in_store()) {
            f.in_store += 1;
            match a.state {
                _ if a.idle => f.idle += 1,
                AgentState::Queuing { .. } => f.queuing += 1,
                AgentState::Checkout { .. } => f.at_checkout += 1,
                _ => f.shopping += 1,
            }
        }
        f
    }

    fn push_frame(&mut self, t: u64) {
        let f = self.frame(t);
        self.pending.push(Record::Frame(f.clone()));
        self.frames.push(f);
    }

    /// Closes open events, writes the final frame and summary, and returns
    /// the full result.
    pub fn finish(&mut self) -> Result<SimResult, SimError> {
        let closed = self.tracker.finish();
        self.emit_collisions(closed);
        let r = self.cfg.collision_radius;
        self.near_misses += self.near_tracker.finish().iter().filter(|e| e.min_distance > r).count() as u64;
        if self.tick > 0 && self.frames.last().map(|f| f.tick) != Some(self.tick - 1) {
            self.push_frame(self.tick - 1);
        }
        if self.frames.is_empty() {
            self.push_frame(0);
        }

        let dt = self.cfg.tick_length;
        let peak = self.frames.iter().map(|f| f.in_store).max().unwrap_or(0);
        let half_empty_s = half_empty_time(&self.frames, peak, dt)?;
        let mut exposure: BTreeMap<AgentId, u64> = BTreeMap::new();
        for e in &self.collisions {
            *exposure.entry(e.agent_a).or_default() += e.ticks();
            *exposure.entry(e.agent_b).or_default() += e.ticks();
        }
        let at_risk = exposure
            .into_iter()
            .filter(|&(_, ticks)| ticks as f64 * dt >= self.cfg.at_risk_exposure - POS_EPS)
            .map(|(id, _)| id)
            .collect();
        let summary = SimSummary {
            sim_id: self.sim_id,
            config_hash: self.config_hash.clone(),
            ticks: self.tick,
            sim_time_s: self.tick as f64 * dt,
            spawned: self.agents.len() as u32,
            despawned: self
                .agents
                .iter()
                .filter(|a| a.state == AgentState::Despawned)
                .count() as u32,
            total_collisions: self.collisions.len() as u64,
            near_misses: self.near_misses,
            peak_in_store: peak,
            half_empty_s,
            truncated: self.truncated,
            at_risk,
            timers: self.agents.iter().map(|a| (a.id, a.timers(dt))).collect(),
            location_visits: self
                .layout
                .bays()
                .iter()
                .zip(&self.visits)
                .map(|(b, &n)| (b.id.clone(), n))
                .collect(),
            inert_features: self.cfg.features.inert().into_iter().map(String::from).collect(),
        };
        self.pending.push(Record::Summary(summary.clone()));
        Ok(SimResult {
            summary,
            collisions: std::mem::take(&mut self.collisions),
            frames: std::mem::take(&mut self.frames),
            transitions: std::mem::take(&mut self.transitions),
        })
    }
}

/// Runs to completion, handing every record to `sink` as it is produced.
pub fn run_with(
    layout: &StoreLayout,
    cfg: SimConfig,
    sim_id: Uuid,
    mut sink: impl FnMut(&Record) -> std::io::Result<()>,
) -> Result<SimResult, SimError> {
    let mut sim = Simulation::new(layout, cfg, sim_id)?;
    while sim.step()? {
        for r in sim.drain_records() {
            sink(&r)?;
        }
    }
    let result = sim.finish()?;
    for r in sim.drain_records() {
        sink(&r)?;
    }
    Ok(result)
}

/// Runs to completion, streaming JSONL to `w`.
pub fn run_to_writer(
    layout: &StoreLayout,
    cfg: SimConfig,
    sim_id: Uuid,
    w: &mut impl Write,
) -> Result<SimResult, SimError> {
    run_with(layout, cfg, sim_id, |r| write_record(w, r))
}

/// Runs a standalone simulation with an id derived from the config.
pub fn run(layout: &StoreLayout, cfg: SimConfig) -> Result<SimResult, SimError> {
    let id = standalone_sim_id(&cfg);
    run_with(layout, cfg, id, |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::load_layout;
    use std::collections::BTreeSet;

    fn grid() -> StoreLayout {
        load_layout(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/grid_3x3.layout.json")).unwrap()
    }

    fn corridor() -> StoreLayout {
        load_layout(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/corridor.layout.json")).unwrap()
    }

    fn frame(tick: u64, in_store: u32) -> MetricsFrame {
        MetricsFrame {
            sim_id: Uuid::nil(),
            tick,
            in_store,
            shopping: in_store,
            queuing: 0,
            at_checkout: 0,
            idle: 0,
            near_misses: 0,
        }
    }

    fn report_file(dir: &tempfile::TempDir, clusters: serde_json::Value) -> PathBuf {
        let path = dir.path().join("report.json");
        let report = serde_json::json!({
            "k": 1, "seed": 0, "features": "similarity", "log_likelihood": 0.0, "bic": 0.0,
            "clusters": clusters
        });
        std::fs::write(&path, report.to_string()).unwrap();
        path
    }

    #[test]
    fn config_validation() {
        SimConfig::default().validate().unwrap();
        for bad in [
            SimConfig { tick_length: 0.0, ..Default::default() },
            SimConfig { spawn_interval: -1.0, ..Default::default() },
            SimConfig { agents_total: 0, ..Default::default() },
            SimConfig { bays_per_agent: 0, ..Default::default() },
            SimConfig { speed_spread: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(SimConfig::from_json(r#"{"agents_totl": 3}"#).is_err());
        let c = SimConfig::from_json(r#"{"agents_total": 3, "features": {"avoid_aisles": true}}"#).unwrap();
        assert_eq!(c.agents_total, 3);
        assert!(c.features.avoid_aisles);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = SimConfig::default();
        assert_eq!(a.hash(), SimConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), SimConfig { seed: 1, ..Default::default() }.hash());
    }

    #[test]
    fn flag_table() {
        assert_eq!(FeatureFlags::ALL.len(), 37);
        let names: BTreeSet<_> = FeatureFlags::ALL.iter().map(|(_, n)| n).collect();
        assert_eq!(names.len(), 37);
        let rows: Vec<u8> = FeatureFlags::ALL.iter().map(|(r, _)| *r).collect();
        assert_eq!(rows, (1..=37).collect::<Vec<u8>>());
        let mut f = FeatureFlags::default();
        f.set("shoplift", true).unwrap();
        f.set("avoid_aisles", true).unwrap();
        assert_eq!(f.enabled(), vec!["avoid_aisles", "shoplift"]);
        assert_eq!(f.inert(), vec!["shoplift"]);
        assert!(matches!(f.set("fly", true), Err(SimError::UnknownFeature(_))));
        for name in FeatureFlags::IMPLEMENTED {
            assert!(f.get(name).is_some());
        }
    }

    #[test]
    fn random_trajectory_on_five_bays_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut s = assign_trajectory(&Trajectories::Random { bays: 5 }, 5, &mut rng).unwrap();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
        assert!(matches!(
            assign_trajectory(&Trajectories::Random { bays: 4 }, 5, &mut rng),
            Err(SimError::TooFewBays { have: 4, need: 5 })
        ));
    }

    #[test]
    fn clustered_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = Trajectories::Clustered {
            weights: vec![1.0],
            sequences: vec![vec![3, 1, 4, 0, 2]],
            bays: 5,
        };
        for _ in 0..20 {
            assert_eq!(assign_trajectory(&single, 5, &mut rng).unwrap(), vec![3, 1, 4, 0, 2]);
        }
        assert_eq!(assign_trajectory(&single, 2, &mut rng).unwrap(), vec![3, 1]);
        let short = Trajectories::Clustered {
            weights: vec![1.0],
            sequences: vec![vec![2]],
            bays: 6,
        };
        let s = assign_trajectory(&short, 4, &mut rng).unwrap();
        assert_eq!(s[0], 2);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 4);
    }

    #[test]
    fn report_must_match_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = report_file(
            &dir,
            serde_json::json!([{"id": 0, "weight": 1.0, "archetype_products": [], "bay_sequence": ["bay9"], "member_customers": []}]),
        );
        let cfg = SimConfig {
            trajectory_source: TrajectorySource::Clustered(path),
            ..Default::default()
        };
        assert!(matches!(Simulation::new(&grid(), cfg, Uuid::nil()), Err(SimError::Report(_))));
    }

    #[test]
    fn single_till() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| choose_till(1, &mut rng) == 0));
    }

    #[test]
    fn half_empty_definition() {
        let mut frames: Vec<MetricsFrame> = (0..=50).map(|i| frame(i * 10, i as u32)).collect();
        frames.extend((1..=50).map(|i| frame(500 + i * 10, 50 - i as u32)));
        // drain reaches 25 at i = 25 → tick 750
        assert_eq!(half_empty_time(&frames, 50, 0.1).unwrap(), Some(75.0));

        let flat: Vec<_> = (0..10).map(|i| frame(i, 7)).collect();
        assert_eq!(half_empty_time(&flat, 7, 0.1).unwrap(), None);
        assert!(half_empty_time(&[], 0, 0.1).is_err());

        let saw: Vec<_> = [0, 4, 8, 3, 9, 6, 4, 5, 2]
            .iter()
            .enumerate()
            .map(|(i, &n)| frame(i as u64, n))
            .collect();
        // peak 9 first seen at index 4; first later value <= 4.5 is index 6
        assert_eq!(half_empty_time(&saw, 9, 1.0).unwrap(), Some(6.0));
    }

    #[test]
    fn lone_agent_never_collides() {
        let cfg = SimConfig { agents_total: 1, ..Default::default() };
        let r = run(&grid(), cfg).unwrap();
        assert!(r.collisions.is_empty());
        assert_eq!(r.summary.despawned, 1);
        assert!(!r.summary.truncated);
        let phases: Vec<(Phase, Phase)> = r.transitions.iter().map(|t| (t.from, t.to)).collect();
        assert_eq!(
            phases,
            vec![
                (Phase::Spawned, Phase::Shopping),
                (Phase::Shopping, Phase::Queuing),
                (Phase::Queuing, Phase::Checkout),
                (Phase::Checkout, Phase::Despawned),
            ]
        );
        assert_eq!(r.summary.location_visits.values().sum::<u64>(), 5);
    }

    #[test]
    fn opposite_walkers_in_a_corridor_collide() {
        let cfg = SimConfig { agents_total: 2, seed: 5, ..Default::default() };
        let r = run(&corridor(), cfg).unwrap();
        assert!(!r.collisions.is_empty());
    }

    #[test]
    fn follower_keeps_its_distance_unless_violating() {
        let dir = tempfile::tempdir().unwrap();
        let path = report_file(
            &dir,
            serde_json::json!([{"id": 0, "weight": 1.0, "archetype_products": [], "bay_sequence": ["bay5"], "member_customers": []}]),
        );
        let mut cfg = SimConfig {
            agents_total: 2,
            bays_per_agent: 1,
            spawn_interval: 2.0,
            trajectory_source: TrajectorySource::Clustered(path),
            ..Default::default()
        };
        let polite = run(&corridor(), cfg.clone()).unwrap();
        assert!(polite.collisions.is_empty(), "{:?}", polite.collisions);
        assert!(polite.summary.timers.values().any(|t| t.idle > 0.0));
        cfg.features.violate_social_distancing = true;
        let rude = run(&corridor(), cfg).unwrap();
        assert!(!rude.collisions.is_empty());
        assert!(rude.summary.timers.values().all(|t| t.idle == 0.0));
    }

    #[test]
    fn single_till_serves_in_arrival_order() {
        let cfg = SimConfig { agents_total: 4, spawn_interval: 2.0, seed: 3, ..Default::default() };
        let r = run(&corridor(), cfg).unwrap();
        let order = |to: Phase| -> Vec<AgentId> {
            r.transitions.iter().filter(|t| t.to == to).map(|t| t.agent).collect()
        };
        let queued = order(Phase::Queuing);
        assert_eq!(queued.len(), 4);
        assert_eq!(order(Phase::Checkout), queued);
        assert_eq!(order(Phase::Despawned), queued);
    }

    #[test]
    fn frames_and_timers_balance() {
        let cfg = SimConfig { agents_total: 12, seed: 9, ..Default::default() };
        let r = run(&grid(), cfg.clone()).unwrap();
        for f in &r.frames {
            assert_eq!(f.in_store, f.shopping + f.queuing + f.at_checkout + f.idle);
        }
        assert!(r.frames.windows(2).all(|w| w[0].near_misses <= w[1].near_misses));
        let despawn_tick: BTreeMap<AgentId, u64> = r
            .transitions
            .iter()
            .filter(|t| t.to == Phase::Despawned)
            .map(|t| (t.agent, t.tick))
            .collect();
        let spawn_tick: BTreeMap<AgentId, u64> = r
            .transitions
            .iter()
            .filter(|t| t.from == Phase::Spawned)
            .map(|t| (t.agent, t.tick))
            .collect();
        for (id, t) in &r.summary.timers {
            let sum = t.checkout + t.shopping + t.idle + t.waiting;
            assert!((sum - t.total).abs() < 1e-9);
            let stay = (despawn_tick[id] - spawn_tick[id]) as f64 * cfg.tick_length;
            assert!((t.total - stay).abs() <= cfg.tick_length + 1e-9, "{id}: {} vs {stay}", t.total);
        }
        assert_eq!(r.summary.despawned, 12);
    }

    #[test]
    fn zero_time_budget_truncates() {
        let cfg = SimConfig { max_sim_time: 0.0, ..Default::default() };
        let r = run(&grid(), cfg).unwrap();
        assert!(r.summary.truncated);
        assert_eq!(r.summary.ticks, 0);
        assert_eq!(r.summary.spawned, 0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SimConfig { agents_total: 15, ..Default::default() };
        let layout = grid();
        let bytes = |c: SimConfig| {
            let mut out = Vec::new();
            run_to_writer(&layout, c, Uuid::nil(), &mut out).unwrap();
            out
        };
        let a = bytes(cfg.clone());
        assert_eq!(a, bytes(cfg.clone()));
        assert_ne!(a, bytes(SimConfig { seed: 43, ..cfg }));
        let last = a.split(|&b| b == b'\n').filter(|l| !l.is_empty()).last().unwrap();
        assert!(matches!(serde_json::from_slice::<Record>(last).unwrap(), Record::Summary(_)));
    }

    #[test]
    fn records_round_trip() {
        let cfg = SimConfig { agents_total: 10, ..Default::default() };
        let layout = grid();
        let mut out = Vec::new();
        let r = run_to_writer(&layout, cfg, Uuid::nil(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let recs: Vec<Record> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let collisions = recs.iter().filter(|r| matches!(r, Record::Collision(_))).count();
        let frames = recs.iter().filter(|r| matches!(r, Record::Frame(_))).count();
        assert_eq!(collisions, r.collisions.len());
        assert_eq!(frames, r.frames.len());
        let failure: Record = serde_json::from_str(r#"{"sim_id":"00000000-0000-0000-0000-000000000000","error":"boom"}"#).unwrap();
        assert!(matches!(failure, Record::Failure(_)));
    }

    #[test]
    fn inert_flags_are_reported() {
        let mut cfg = SimConfig { agents_total: 2, ..Default::default() };
        cfg.features.pay_cash = true;
        cfg.features.variable_speed = true;
        let r = run(&grid(), cfg).unwrap();
        assert_eq!(r.summary.inert_features, vec!["pay_cash".to_string()]);
    }

    #[test]
    fn speeds_respect_the_cap() {
        let layout = grid();
        let mut cfg = SimConfig { agents_total: 20, ..Default::default() };
        cfg.features.variable_speed = true;
        cfg.features.speed_penalty_per_item = true;
        cfg.features.avoid_aisles = true;
        let cap = cfg.max_step();
        let mut sim = Simulation::new(&layout, cfg, Uuid::nil()).unwrap();
        let mut last: BTreeMap<AgentId, Position> = BTreeMap::new();
        while sim.step().unwrap() {
            for a in sim.agents().iter().filter(|a| a.in_store()) {
                let p = a.position(&layout);
                if let Some(q) = last.get(&a.id) {
                    // straight-line displacement never exceeds path distance
                    assert!(p.distance(q) <= cap + 1e-9);
                }
                last.insert(a.id, p);
            }
        }
        assert!(sim.finished());
    }
}

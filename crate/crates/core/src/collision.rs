//! Proximity collisions between agents and the Poisson law for their counts.
//!
//! Detection runs once per tick on a uniform hash grid whose cell side equals
//! the query radius, so only the 3×3 block of cells around each agent has to
//! be inspected. [`CollisionTracker`] merges per-tick pair sets into events,
//! and the rest of the module fits and tests the Poisson model
//! `f(n, t) = e^(−λt)(λt)ⁿ/n!` against windowed event counts.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;
use uuid::Uuid;

use crate::layout::Position;

pub const DEFAULT_RADIUS: f64 = 2.0;
/// Minimum number of histogram windows accepted by [`fit_test`].
pub const MIN_WINDOWS: u64 = 30;
/// Expected-count threshold under which histogram bins are pooled.
pub const MIN_EXPECTED: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum CollisionError {
    #[error("duplicate agent id {0}")]
    DuplicateAgent(AgentId),
    #[error("radius must be positive and finite")]
    Radius,
    #[error("tick {tick} does not advance past {last}")]
    TickRegression { last: u64, tick: u64 },
    #[error("negative or non-finite argument")]
    Domain,
    #[error("exposure must be positive")]
    ZeroExposure,
    #[error("too few windows: {0} (need at least {MIN_WINDOWS})")]
    TooFewWindows(u64),
    #[error("too few bins after pooling: {0}")]
    TooFewBins(usize),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// An unordered agent pair stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentPair {
    pub a: AgentId,
    pub b: AgentId,
}

impl AgentPair {
    pub fn new(x: AgentId, y: AgentId) -> Self {
        if x < y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }
}

/// A pair found within range, with its separation and midpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub pair: AgentPair,
    pub distance: f64,
    pub midpoint: Position,
}

/// Uniform hash grid over agent positions. Reusable across ticks.
#[derive(Debug, Default)]
pub struct SpatialHash {
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialHash {
    pub fn new() -> Self {
        Self::default()
    }

    /// All pairs within `radius`, sorted canonically by `(a, b)`. Agent ids
    /// are assumed unique.
    pub fn contacts(
        &mut self,
        positions: &[(AgentId, Position)],
        radius: f64,
    ) -> Result<Vec<Contact>, CollisionError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(CollisionError::Radius);
        }
        for cell in self.cells.values_mut() {
            cell.clear();
        }
        let cell_of = |p: &Position| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
        for (i, (_, p)) in positions.iter().enumerate() {
            self.cells.entry(cell_of(p)).or_default().push(i);
        }

        let r2 = radius * radius;
        let mut out = Vec::new();
        for (i, (id_i, p)) in positions.iter().enumerate() {
            let (cx, cy) = cell_of(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(cell) = self.cells.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in cell {
                        if j <= i {
                            continue;
                        }
                        let (id_j, q) = &positions[j];
                        let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
                        if d2 <= r2 {
                            out.push(Contact {
                                pair: AgentPair::new(*id_i, *id_j),
                                distance: d2.sqrt(),
                                midpoint: p.midpoint(q),
                            });
                        }
                    }
                }
            }
        }
        out.sort_by_key(|c| c.pair);
        self.cells.retain(|_, v| !v.is_empty());
        Ok(out)
    }
}

fn check_unique(positions: &[(AgentId, Position)]) -> Result<(), CollisionError> {
    let mut ids: Vec<AgentId> = positions.iter().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    match ids.windows(2).find(|w| w[0] == w[1]) {
        Some(w) => Err(CollisionError::DuplicateAgent(w[0])),
        None => Ok(()),
    }
}

/// Unordered agent pairs within `radius` (inclusive), sorted canonically.
pub fn detect(
    positions: &[(AgentId, Position)],
    radius: f64,
) -> Result<Vec<AgentPair>, CollisionError> {
    check_unique(positions)?;
    Ok(SpatialHash::new()
        .contacts(positions, radius)?
        .into_iter()
        .map(|c| c.pair)
        .collect())
}

/// Like [`detect`] but keeps distances and midpoints, reusing `grid`.
pub fn detect_contacts(
    grid: &mut SpatialHash,
    positions: &[(AgentId, Position)],
    radius: f64,
) -> Result<Vec<Contact>, CollisionError> {
    check_unique(positions)?;
    grid.contacts(positions, radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub sim_id: Uuid,
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub start_tick: u64,
    pub end_tick: u64,
    pub min_distance: f64,
    pub x: f64,
    pub y: f64,
}

impl CollisionEvent {
    pub fn ticks(&self) -> u64 {
        self.end_tick - self.start_tick + 1
    }

    pub fn location(&self) -> Position {
        Position::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy)]
struct OpenEvent {
    start_tick: u64,
    last_seen: u64,
    min_distance: f64,
    location: Position,
}

/// Turns per-tick contact sets into merged collision events.
///
/// A pair seen at consecutive ticks stays one event; with `gap_ticks = g` an
/// event also survives up to `g` ticks of absence.
#[derive(Debug)]
pub struct CollisionTracker {
    sim_id: Uuid,
    gap_ticks: u64,
    open: BTreeMap<AgentPair, OpenEvent>,
    last_tick: Option<u64>,
}

impl CollisionTracker {
    pub fn new(sim_id: Uuid) -> Self {
        Self::with_gap(sim_id, 0)
    }

    pub fn with_gap(sim_id: Uuid, gap_ticks: u64) -> Self {
        Self {
            sim_id,
            gap_ticks,
            open: BTreeMap::new(),
            last_tick: None,
        }
    }

    pub fn open_pairs(&self) -> impl Iterator<Item = AgentPair> + '_ {
        self.open.keys().copied()
    }

    /// Feeds the contacts seen at `tick`; returns events that closed.
    pub fn update(
        &mut self,
        contacts: &[Contact],
        tick: u64,
    ) -> Result<Vec<CollisionEvent>, CollisionError> {
        if let Some(last) = self.last_tick {
            if tick <= last {
                return Err(CollisionError::TickRegression { last, tick });
            }
        }
        self.last_tick = Some(tick);
        for c in contacts {
            let ev = self.open.entry(c.pair).or_insert(OpenEvent {
                start_tick: tick,
                last_seen: tick,
                min_distance: c.distance,
                location: c.midpoint,
            });
            ev.last_seen = tick;
            if c.distance < ev.min_distance {
                ev.min_distance = c.distance;
                ev.location = c.midpoint;
            }
        }
        let gap = self.gap_ticks;
        let expired: Vec<AgentPair> = self
            .open
            .iter()
            .filter(|(_, ev)| tick - ev.last_seen > gap)
            .map(|(p, _)| *p)
            .collect();
        Ok(expired
            .into_iter()
            .map(|p| {
                let ev = self.open.remove(&p).unwrap();
                self.close(p, ev)
            })
            .collect())
    }

    /// Closes every open event at its last-seen tick.
    pub fn finish(&mut self) -> Vec<CollisionEvent> {
        std::mem::take(&mut self.open)
            .into_iter()
            .map(|(p, ev)| self.close(p, ev))
            .collect()
    }

    fn close(&self, pair: AgentPair, ev: OpenEvent) -> CollisionEvent {
        CollisionEvent {
            sim_id: self.sim_id,
            agent_a: pair.a,
            agent_b: pair.b,
            start_tick: ev.start_tick,
            end_tick: ev.last_seen,
            min_distance: ev.min_distance,
            x: ev.location.x,
            y: ev.location.y,
        }
    }
}

/// Poisson collision model. Multiple simultaneous collisions have zero
/// probability, so the only parameter is the rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonModel {
    /// Collisions per second.
    pub lambda: f64,
}

impl PoissonModel {
    pub fn new(lambda: f64) -> Result<Self, CollisionError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CollisionError::Domain);
        }
        Ok(Self { lambda })
    }

    /// Coefficient of multiple simultaneous collisions; always zero.
    pub fn mu_multi(&self) -> f64 {
        0.0
    }

    pub fn pmf(&self, n: u64, t: f64) -> Result<f64, CollisionError> {
        pmf(self, n, t)
    }

    pub fn mean(&self, t: f64) -> f64 {
        self.lambda * t
    }
}

/// `P(n collisions in an interval of length t) = e^(−λt)(λt)ⁿ/n!`.
pub fn pmf(model: &PoissonModel, n: u64, t: f64) -> Result<f64, CollisionError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(CollisionError::Domain);
    }
    let m = model.lambda * t;
    if m == 0.0 {
        return Ok(if n == 0 { 1.0 } else { 0.0 });
    }
    if n > 20 || m > 50.0 {
        let ln = -m + n as f64 * m.ln() - ln_gamma(n as f64 + 1.0);
        return Ok(ln.exp());
    }
    let mut p = (-m).exp();
    for k in 1..=n {
        p *= m / k as f64;
    }
    Ok(p)
}

/// Signed-argument wrapper for callers holding raw integers.
pub fn pmf_checked(model: &PoissonModel, n: i64, t: f64) -> Result<f64, CollisionError> {
    if n < 0 {
        return Err(CollisionError::Domain);
    }
    pmf(model, n as u64, t)
}

/// Rate maximum-likelihood estimate: events per second of exposure.
pub fn estimate_lambda(
    events: &[CollisionEvent],
    total_exposure: f64,
) -> Result<PoissonModel, CollisionError> {
    rate_from_count(events.len() as u64, total_exposure)
}

pub fn rate_from_count(count: u64, total_exposure: f64) -> Result<PoissonModel, CollisionError> {
    if !(total_exposure > 0.0 && total_exposure.is_finite()) {
        return Err(CollisionError::ZeroExposure);
    }
    PoissonModel::new(count as f64 / total_exposure)
}

/// Number of windows that saw `n` events, for fixed-length windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionHistogram {
    pub window_length: f64,
    pub counts: BTreeMap<u64, u64>,
}

impl CollisionHistogram {
    pub fn new(window_length: f64) -> Self {
        Self {
            window_length,
            counts: BTreeMap::new(),
        }
    }

    /// Bins event times (seconds from 0) into consecutive windows covering
    /// `[0, duration)`; a trailing partial window is dropped.
    pub fn from_times(times: &[f64], duration: f64, window_length: f64) -> Self {
        let windows = (duration / window_length).floor().max(0.0) as u64;
        let mut per_window = vec![0u64; windows as usize];
        for &t in times {
            let w = (t / window_length).floor();
            if w >= 0.0 && (w as u64) < windows {
                per_window[w as usize] += 1;
            }
        }
        Self::from_window_counts(&per_window, window_length)
    }

    pub fn from_window_counts(per_window: &[u64], window_length: f64) -> Self {
        let mut h = Self::new(window_length);
        for &c in per_window {
            *h.counts.entry(c).or_default() += 1;
        }
        h
    }

    pub fn merge(&mut self, other: &CollisionHistogram) {
        for (&n, &c) in &other.counts {
            *self.counts.entry(n).or_default() += c;
        }
    }

    pub fn windows(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_events(&self) -> u64 {
        self.counts.iter().map(|(n, c)| n * c).sum()
    }

    pub fn exposure(&self) -> f64 {
        self.windows() as f64 * self.window_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of a window histogram against the Poisson model.
///
/// Bins are grown from `n = 0` upward until each holds an expected count of
/// at least [`MIN_EXPECTED`]; the last bin is the open tail `n ≥ k`, folded
/// into its neighbour when it falls short. One degree of freedom is spent on
/// the fitted rate and one on normalization.
pub fn fit_test(hist: &CollisionHistogram, model: &PoissonModel) -> Result<FitResult, CollisionError> {
    let windows = hist.windows();
    if windows < MIN_WINDOWS {
        return Err(CollisionError::TooFewWindows(windows));
    }
    let w = windows as f64;
    let t = hist.window_length;

    // (observed, expected) per pooled bin; the final bin is the tail
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc_obs = 0.0;
    let mut acc_exp = 0.0;
    let mut cdf = 0.0;
    let max_observed = hist.counts.keys().next_back().copied().unwrap_or(0);
    let mut n = 0u64;
    loop {
        let p = pmf(model, n, t)?;
        cdf += p;
        acc_exp += w * p;
        acc_obs += *hist.counts.get(&n).unwrap_or(&0) as f64;
        n += 1;
        let tail_exp = w * (1.0 - cdf).max(0.0);
        if acc_exp >= MIN_EXPECTED {
            bins.push((acc_obs, acc_exp));
            acc_obs = 0.0;
            acc_exp = 0.0;
        }
        if tail_exp < MIN_EXPECTED && n > max_observed {
            break;
        }
        if n > 100_000 {
            break;
        }
    }
    let tail_obs: f64 = hist.counts.range(n..).map(|(_, &c)| c as f64).sum();
    let tail_exp = w * (1.0 - cdf).max(0.0);
    acc_obs += tail_obs;
    acc_exp += tail_exp;
    if acc_obs > 0.0 || acc_exp > 0.0 {
        if acc_exp >= MIN_EXPECTED || bins.is_empty() {
            bins.push((acc_obs, acc_exp));
        } else {
            let last = bins.last_mut().unwrap();
            last.0 += acc_obs;
            last.1 += acc_exp;
        }
    }
    bins.retain(|&(o, e)| e > 0.0 || o > 0.0);

    if bins.len() < 3 {
        return Err(CollisionError::TooFewBins(bins.len()));
    }
    let chi2: f64 = bins
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e).powi(2) / e } else { f64::INFINITY })
        .sum();
    let df = bins.len() - 2;
    let p_value = if chi2.is_finite() {
        ChiSquared::new(df as f64).map(|d| d.sf(chi2)).unwrap_or(0.0)
    } else {
        0.0
    };
    Ok(FitResult { chi2, df, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(id: u32, x: f64, y: f64) -> (AgentId, Position) {
        (AgentId(id), Position::new(x, y))
    }

    #[test]
    fn detect_threshold() {
        let pairs = detect(&[at(1, 0.0, 0.0), at(2, 1.99, 0.0)], 2.0).unwrap();
        assert_eq!(pairs, vec![AgentPair::new(AgentId(1), AgentId(2))]);
        let pairs = detect(&[at(1, 0.0, 0.0), at(2, 2.01, 0.0)], 2.0).unwrap();
        assert!(pairs.is_empty());
        // exactly on the radius counts
        let pairs = detect(&[at(1, 0.0, 0.0), at(2, 0.0, 2.0)], 2.0).unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn detect_rejects_duplicates_and_bad_radius() {
        assert_eq!(
            detect(&[at(1, 0.0, 0.0), at(1, 50.0, 0.0)], 2.0),
            Err(CollisionError::DuplicateAgent(AgentId(1)))
        );
        assert_eq!(detect(&[at(1, 0.0, 0.0)], 0.0), Err(CollisionError::Radius));
    }

    #[test]
    fn detect_orders_pairs_canonically() {
        let pairs = detect(&[at(9, 0.0, 0.0), at(3, 1.0, 0.0), at(5, -1.0, 0.0)], 2.0).unwrap();
        let raw: Vec<_> = pairs.iter().map(|p| (p.a.0, p.b.0)).collect();
        assert_eq!(raw, vec![(3, 5), (3, 9), (5, 9)]);
    }

    fn contact(a: u32, b: u32, d: f64) -> Contact {
        Contact {
            pair: AgentPair::new(AgentId(a), AgentId(b)),
            distance: d,
            midpoint: Position::new(d, 0.0),
        }
    }

    #[test]
    fn track_merges_consecutive_ticks() {
        let mut t = CollisionTracker::new(Uuid::nil());
        let mut closed = Vec::new();
        for tick in 5..=9 {
            closed.extend(t.update(&[contact(1, 2, 1.0 + tick as f64 * 0.1)], tick).unwrap());
        }
        closed.extend(t.update(&[], 10).unwrap());
        assert_eq!(closed.len(), 1);
        assert_eq!((closed[0].start_tick, closed[0].end_tick), (5, 9));
        assert!((closed[0].min_distance - 1.5).abs() < 1e-12);
        assert!((closed[0].x - 1.5).abs() < 1e-12);
    }

    #[test]
    fn track_does_not_bridge_gaps_by_default() {
        let mut t = CollisionTracker::new(Uuid::nil());
        let mut closed = Vec::new();
        closed.extend(t.update(&[contact(1, 2, 1.0)], 5).unwrap());
        closed.extend(t.update(&[], 6).unwrap());
        closed.extend(t.update(&[contact(1, 2, 1.0)], 7).unwrap());
        closed.extend(t.finish());
        let spans: Vec<_> = closed.iter().map(|e| (e.start_tick, e.end_tick)).collect();
        assert_eq!(spans, vec![(5, 5), (7, 7)]);
    }

    #[test]
    fn track_bridges_when_configured() {
        let mut t = CollisionTracker::with_gap(Uuid::nil(), 1);
        let mut closed = Vec::new();
        closed.extend(t.update(&[contact(1, 2, 1.0)], 5).unwrap());
        closed.extend(t.update(&[], 6).unwrap());
        closed.extend(t.update(&[contact(1, 2, 1.0)], 7).unwrap());
        closed.extend(t.update(&[], 8).unwrap());
        closed.extend(t.update(&[], 9).unwrap());
        let spans: Vec<_> = closed.iter().map(|e| (e.start_tick, e.end_tick)).collect();
        assert_eq!(spans, vec![(5, 7)]);
    }

    #[test]
    fn track_rejects_tick_regression() {
        let mut t = CollisionTracker::new(Uuid::nil());
        t.update(&[], 3).unwrap();
        assert_eq!(
            t.update(&[], 3),
            Err(CollisionError::TickRegression { last: 3, tick: 3 })
        );
    }

    #[test]
    fn pmf_examples() {
        for lambda in [0.0, 0.3, 7.0] {
            let m = PoissonModel::new(lambda).unwrap();
            assert_eq!(pmf(&m, 0, 0.0).unwrap(), 1.0);
            assert_eq!(pmf(&m, 3, 0.0).unwrap(), 0.0);
        }
        let m = PoissonModel::new(1.0).unwrap();
        assert!((pmf(&m, 1, 1.0).unwrap() - 0.367879441171442).abs() < 1e-12);
        let m = PoissonModel::new(3.0).unwrap();
        let total: f64 = (0..=200).map(|n| pmf(&m, n, 2.0).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(m.mu_multi(), 0.0);
    }

    #[test]
    fn pmf_domain_errors() {
        let m = PoissonModel::new(1.0).unwrap();
        assert_eq!(pmf(&m, 1, -1.0), Err(CollisionError::Domain));
        assert_eq!(pmf_checked(&m, -1, 1.0), Err(CollisionError::Domain));
        assert!(PoissonModel::new(-0.1).is_err());
    }

    #[test]
    fn pmf_large_counts_stay_finite() {
        let m = PoissonModel::new(10.0).unwrap();
        let p = pmf(&m, 1000, 100.0).unwrap();
        assert!(p > 0.0 && p.is_finite());
        let total: f64 = (0..=3000).map(|n| pmf(&m, n, 100.0).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lambda_ratio() {
        assert_eq!(estimate_lambda(&[], 100.0).unwrap().lambda, 0.0);
        assert_eq!(rate_from_count(50, 100.0).unwrap().lambda, 0.5);
        assert_eq!(estimate_lambda(&[], 0.0), Err(CollisionError::ZeroExposure));
    }

    #[test]
    fn constant_counts_are_rejected() {
        let per_window = vec![12u64; 200];
        let h = CollisionHistogram::from_window_counts(&per_window, 60.0);
        let m = rate_from_count(h.total_events(), h.exposure()).unwrap();
        let fit = fit_test(&h, &m).unwrap();
        assert!(fit.p_value < 1e-10, "{fit:?}");
    }

    #[test]
    fn all_zero_histogram_has_too_few_bins() {
        let h = CollisionHistogram::from_window_counts(&[0; 100], 60.0);
        let m = PoissonModel::new(0.0).unwrap();
        assert_eq!(fit_test(&h, &m), Err(CollisionError::TooFewBins(1)));
    }

    #[test]
    fn fit_needs_enough_windows() {
        let h = CollisionHistogram::from_window_counts(&[1, 2, 3], 60.0);
        let m = PoissonModel::new(0.03).unwrap();
        assert_eq!(fit_test(&h, &m), Err(CollisionError::TooFewWindows(3)));
    }

    #[test]
    fn histogram_from_times_drops_partial_window() {
        let h = CollisionHistogram::from_times(&[1.0, 2.0, 61.0, 130.0], 125.0, 60.0);
        assert_eq!(h.windows(), 2);
        assert_eq!(h.counts.get(&2), Some(&1));
        assert_eq!(h.counts.get(&1), Some(&1));
        assert_eq!(h.exposure(), 120.0);
    }
}

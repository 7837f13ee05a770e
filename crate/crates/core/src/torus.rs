//! Linear flows on the two-torus: wrapping the plane onto Tor², the
//! embedding in R³, rotation numbers of circle maps, and proximity
//! "intersections" between two flows sampled at equal times.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TorusError {
    #[error("non-finite input")]
    NonFinite,
    #[error("invalid torus geometry: need R > r > 0 (got R={major}, r={minor})")]
    Geometry { major: f64, minor: f64 },
    #[error("flow direction must be non-zero")]
    ZeroFlow,
    #[error("map is not monotone increasing near x={0}")]
    NotMonotone(f64),
    #[error("map does not commute with +1 near x={0}")]
    NotALift(f64),
    #[error("rotation number needs at least 100 iterations (got {0})")]
    TooFewIterations(u64),
    #[error("tolerance must be in (0, 1)")]
    Tolerance,
    #[error("degenerate sampling window: t1 - t0 must be at least dt")]
    DegenerateWindow,
    #[error("proximity radius must be positive")]
    Radius,
}

/// Default iteration count for rotation-number estimation.
pub const DEFAULT_ITERATIONS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGeometry {
    /// Distance from the origin to the centre of the tube.
    pub major: f64,
    /// Radius of the tube.
    pub minor: f64,
}

impl TorusGeometry {
    pub fn new(major: f64, minor: f64) -> Result<Self, TorusError> {
        if !(major.is_finite() && minor.is_finite() && minor > 0.0 && major > minor) {
            return Err(TorusError::Geometry { major, minor });
        }
        Ok(Self { major, minor })
    }
}

/// Angular coordinates, both reduced to `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    pub theta: f64,
    pub phi: f64,
}

impl TorusPoint {
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        Self {
            theta: reduce_angle(theta),
            phi: reduce_angle(phi),
        }
    }
}

/// Straight-line flow `θ = x0 + lam·t`, `φ = y0 + mu·t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusFlow {
    pub x0: f64,
    pub y0: f64,
    pub lam: f64,
    pub mu: f64,
}

impl TorusFlow {
    pub fn new(x0: f64, y0: f64, lam: f64, mu: f64) -> Result<Self, TorusError> {
        if ![x0, y0, lam, mu].iter().all(|v| v.is_finite()) {
            return Err(TorusError::NonFinite);
        }
        if lam == 0.0 && mu == 0.0 {
            return Err(TorusError::ZeroFlow);
        }
        Ok(Self { x0, y0, lam, mu })
    }

    pub fn point_at(&self, t: f64) -> TorusPoint {
        TorusPoint::from_angles(self.x0 + self.lam * t, self.y0 + self.mu * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrbitClass {
    Recurrent,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationNumber {
    pub alpha: f64,
    /// `(p, q)` with `gcd(p, q) = 1`, present when `alpha` is within tolerance
    /// of a continued-fraction convergent.
    pub rational_approx: Option<(i64, u64)>,
    pub classification: OrbitClass,
}

impl RotationNumber {
    /// Period of a recurrent orbit.
    pub fn period(&self) -> Option<u64> {
        self.rational_approx.map(|(_, q)| q)
    }
}

fn reduce_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

fn reduce_unit(a: f64) -> f64 {
    let r = a.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Projects plane coordinates (in units of one fundamental-domain side) onto
/// the torus via `(e^{2πix}, e^{2πiy})`.
pub fn wrap(x: f64, y: f64) -> Result<TorusPoint, TorusError> {
    if !x.is_finite() || !y.is_finite() {
        return Err(TorusError::NonFinite);
    }
    Ok(TorusPoint {
        theta: reduce_unit(x) * TAU,
        phi: reduce_unit(y) * TAU,
    })
}

pub fn embed(g: &TorusGeometry, p: &TorusPoint) -> [f64; 3] {
    let ring = g.major + g.minor * p.theta.cos();
    [ring * p.phi.cos(), ring * p.phi.sin(), g.minor * p.theta.sin()]
}

pub fn flow_position(g: &TorusGeometry, f: &TorusFlow, t: f64) -> [f64; 3] {
    embed(g, &f.point_at(t))
}

/// Estimates the rotation number of a circle map from its lift.
///
/// `alpha = (fⁿ(x) − x)/n mod 1` at `n = n_iter`. The continued-fraction
/// expansion of `alpha` is walked until a denominator exceeds
/// `ceil(1 / (2·√tol))`; the first convergent within `tol` of `alpha` marks
/// the orbit recurrent with that period.
pub fn rotation_number(
    lift: impl Fn(f64) -> f64,
    x_seed: f64,
    n_iter: u64,
    tol: f64,
) -> Result<RotationNumber, TorusError> {
    if n_iter < 100 {
        return Err(TorusError::TooFewIterations(n_iter));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(TorusError::Tolerance);
    }
    if !x_seed.is_finite() {
        return Err(TorusError::NonFinite);
    }
    check_lift(&lift, x_seed)?;

    let mut x = x_seed;
    for _ in 0..n_iter {
        x = lift(x);
    }
    if !x.is_finite() {
        return Err(TorusError::NonFinite);
    }
    let alpha = reduce_unit((x - x_seed) / n_iter as f64);
    Ok(classify_alpha(alpha, tol))
}

const LIFT_SAMPLES: usize = 64;

fn check_lift(lift: &impl Fn(f64) -> f64, x_seed: f64) -> Result<(), TorusError> {
    let mut prev = lift(x_seed);
    for i in 1..=LIFT_SAMPLES {
        let x = x_seed + i as f64 / LIFT_SAMPLES as f64;
        let y = lift(x);
        if !y.is_finite() {
            return Err(TorusError::NonFinite);
        }
        if y <= prev {
            return Err(TorusError::NotMonotone(x));
        }
        prev = y;
    }
    for i in 0..8 {
        let x = x_seed + i as f64 / 8.0;
        let shift = lift(x + 1.0) - lift(x) - 1.0;
        if shift.abs() > 1e-9 * (1.0 + lift(x).abs()) {
            return Err(TorusError::NotALift(x));
        }
    }
    Ok(())
}

/// Classifies a rotation number in `[0, 1)` by its continued-fraction
/// convergents.
pub fn classify_alpha(alpha: f64, tol: f64) -> RotationNumber {
    let max_q = (1.0 / (2.0 * tol.sqrt())).ceil() as u64;
    let rational_approx = convergents(alpha, max_q)
        .into_iter()
        .find(|&(p, q)| (alpha - p as f64 / q as f64).abs() <= tol)
        .map(|(p, q)| if p as u64 == q { (0, 1) } else { (p, q) });
    RotationNumber {
        alpha,
        rational_approx,
        classification: if rational_approx.is_some() {
            OrbitClass::Recurrent
        } else {
            OrbitClass::Dense
        },
    }
}

/// Continued-fraction convergents `p/q` of `x ≥ 0` with `q ≤ max_q`.
pub fn convergents(x: f64, max_q: u64) -> Vec<(i64, u64)> {
    let mut out = Vec::new();
    // h_{-1}=1, h_{-2}=0; k_{-1}=0, k_{-2}=1
    let (mut h_prev, mut h) = (0i128, 1i128);
    let (mut k_prev, mut k) = (1i128, 0i128);
    let mut rest = x;
    for _ in 0..64 {
        // snap near-integers so 2.9999999 doesn't become 2
        let near = rest.round();
        let a = if (rest - near).abs() < 1e-9 * near.abs().max(1.0) { near } else { rest.floor() };
        if a > 1e15 {
            break;
        }
        let a_int = a as i128;
        let h_next = a_int * h + h_prev;
        let k_next = a_int * k + k_prev;
        if k_next > max_q as i128 {
            break;
        }
        out.push((h_next as i64, k_next as u64));
        (h_prev, h) = (h, h_next);
        (k_prev, k) = (k, k_next);
        let frac = rest - a;
        if frac.abs() < 1e-9 {
            break;
        }
        rest = 1.0 / frac;
    }
    out
}

pub fn classify_orbit(rn: &RotationNumber) -> OrbitClass {
    if rn.rational_approx.is_some() {
        OrbitClass::Recurrent
    } else {
        OrbitClass::Dense
    }
}

/// A maximal run of consecutive samples where two flows were within the
/// proximity radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub start: f64,
    pub end: f64,
    /// Position of the first flow at `start`.
    pub point: TorusPoint,
}

/// Samples both flows at `t0, t0+dt, …, ≤ t1` and reports each maximal run of
/// samples whose embedded distance is within `radius` as one intersection.
pub fn count_intersections(
    g: &TorusGeometry,
    a: &TorusFlow,
    b: &TorusFlow,
    t0: f64,
    t1: f64,
    dt: f64,
    radius: f64,
) -> Result<Vec<Intersection>, TorusError> {
    if ![t0, t1, dt, radius].iter().all(|v| v.is_finite()) {
        return Err(TorusError::NonFinite);
    }
    if !(radius > 0.0) {
        return Err(TorusError::Radius);
    }
    if !(dt > 0.0) || t1 - t0 < dt {
        return Err(TorusError::DegenerateWindow);
    }
    let steps = ((t1 - t0) / dt + 1e-9).floor() as u64;
    let r2 = radius * radius;
    let mut events = Vec::new();
    let mut open: Option<Intersection> = None;
    for i in 0..=steps {
        let t = t0 + i as f64 * dt;
        let pa = flow_position(g, a, t);
        let pb = flow_position(g, b, t);
        let d2: f64 = pa.iter().zip(&pb).map(|(u, v)| (u - v) * (u - v)).sum();
        if d2 <= r2 {
            match open.as_mut() {
                Some(ev) => ev.end = t,
                None => {
                    open = Some(Intersection {
                        start: t,
                        end: t,
                        point: a.point_at(t),
                    })
                }
            }
        } else if let Some(ev) = open.take() {
            events.push(ev);
        }
    }
    events.extend(open);
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn wrap_examples() {
        let p = wrap(0.0, 0.0).unwrap();
        assert_eq!((p.theta, p.phi), (0.0, 0.0));
        let p = wrap(1.25, -0.5).unwrap();
        assert!(close(p.theta, PI / 2.0) && close(p.phi, PI));
        let p = wrap(3.0, 7.0).unwrap();
        assert_eq!((p.theta, p.phi), (0.0, 0.0));
        assert_eq!(wrap(f64::NAN, 0.0), Err(TorusError::NonFinite));
        let p = wrap(-1e-18, 0.0).unwrap();
        assert!(p.theta < TAU);
    }

    #[test]
    fn embed_examples() {
        let g = TorusGeometry::new(2.0, 1.0).unwrap();
        let check = |theta: f64, phi: f64, want: [f64; 3]| {
            let got = embed(&g, &TorusPoint::from_angles(theta, phi));
            for (x, y) in got.iter().zip(want) {
                assert!(close(*x, y), "{got:?} vs {want:?}");
            }
        };
        check(0.0, 0.0, [3.0, 0.0, 0.0]);
        check(PI, 0.0, [1.0, 0.0, 0.0]);
        check(PI / 2.0, PI / 2.0, [0.0, 2.0, 1.0]);
    }

    #[test]
    fn geometry_requires_major_above_minor() {
        assert!(TorusGeometry::new(1.0, 1.0).is_err());
        assert!(TorusGeometry::new(2.0, 0.0).is_err());
        assert!(TorusGeometry::new(2.0, 1.0).is_ok());
    }

    #[test]
    fn flow_examples() {
        let g = TorusGeometry::new(2.0, 1.0).unwrap();
        let f = TorusFlow::new(0.0, 0.0, 0.0, TAU).unwrap();
        let p = flow_position(&g, &f, 1.0);
        assert!(close(p[0], 3.0) && close(p[1], 0.0) && close(p[2], 0.0));

        let f = TorusFlow::new(0.0, 0.0, PI, PI / 2.0).unwrap();
        let p = flow_position(&g, &f, 1.0);
        // ((2 + cos π)·cos(π/2), (2 + cos π)·sin(π/2), sin π)
        assert!(close(p[0], 0.0) && close(p[1], 1.0) && close(p[2], 0.0), "{p:?}");

        let f = TorusFlow::new(7.0, -3.0, 1.0, 1.0).unwrap();
        let p0 = flow_position(&g, &f, 0.0);
        let e = embed(&g, &TorusPoint::from_angles(7.0, -3.0));
        assert_eq!(p0, e);
        assert_eq!(TorusFlow::new(0.0, 0.0, 0.0, 0.0), Err(TorusError::ZeroFlow));
    }

    #[test]
    fn rigid_rotations() {
        let rn = rotation_number(|x| x + 3.0 / 7.0, 0.0, 100_000, 1e-9).unwrap();
        assert!((rn.alpha - 3.0 / 7.0).abs() < 1e-9);
        assert_eq!(rn.rational_approx, Some((3, 7)));
        assert_eq!(rn.classification, OrbitClass::Recurrent);

        let rn = rotation_number(|x| x, 0.3, 1000, 1e-9).unwrap();
        assert_eq!(rn.alpha, 0.0);
        assert_eq!(rn.rational_approx, Some((0, 1)));

        let rn = rotation_number(|x| x + 0.25, 0.0, 1000, 1e-9).unwrap();
        assert_eq!(classify_orbit(&rn), OrbitClass::Recurrent);
        assert_eq!(rn.period(), Some(4));
    }

    #[test]
    fn classify_orbit_examples() {
        let rn = RotationNumber {
            alpha: 0.5,
            rational_approx: Some((1, 2)),
            classification: OrbitClass::Recurrent,
        };
        assert_eq!(classify_orbit(&rn), OrbitClass::Recurrent);
        let rn = RotationNumber {
            alpha: 0.5,
            rational_approx: None,
            classification: OrbitClass::Dense,
        };
        assert_eq!(classify_orbit(&rn), OrbitClass::Dense);
    }

    #[test]
    fn nonlinear_lift_of_rational_rotation() {
        // Arnold map with a mode-locked 0/1 tongue at small omega
        let k = 0.9;
        let omega = 0.01;
        let rn = rotation_number(
            |x: f64| x + omega - k / TAU * (TAU * x).sin(),
            0.1,
            100_000,
            1e-4,
        )
        .unwrap();
        assert_eq!(rn.rational_approx, Some((0, 1)));
    }

    #[test]
    fn rejects_non_lifts() {
        assert!(matches!(
            rotation_number(|x| -x, 0.0, 1000, 1e-9),
            Err(TorusError::NotMonotone(_))
        ));
        assert!(matches!(
            rotation_number(|x| 2.0 * x, 0.0, 1000, 1e-9),
            Err(TorusError::NotALift(_))
        ));
        assert_eq!(
            rotation_number(|x| x, 0.0, 10, 1e-9),
            Err(TorusError::TooFewIterations(10))
        );
    }

    #[test]
    fn convergents_of_simple_fractions() {
        assert_eq!(convergents(3.0 / 7.0, 100), vec![(0, 1), (1, 2), (3, 7)]);
        assert_eq!(convergents(0.0, 10), vec![(0, 1)]);
    }

    #[test]
    fn identical_flows_merge_into_one_event() {
        let g = TorusGeometry::new(2.0, 0.5).unwrap();
        let f = TorusFlow::new(0.3, 1.0, 1.0, 0.7).unwrap();
        let ev = count_intersections(&g, &f, &f, 0.0, 10.0, 0.01, 0.01).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].start, 0.0);
        assert!((ev[0].end - 10.0).abs() < 1e-9);
    }

    #[test]
    fn antipodal_flows_never_meet() {
        let g = TorusGeometry::new(2.0, 0.5).unwrap();
        let a = TorusFlow::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = TorusFlow::new(PI, PI, 1.0, 1.0).unwrap();
        let ev = count_intersections(&g, &a, &b, 0.0, 20.0, 0.01, 0.5).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn window_errors() {
        let g = TorusGeometry::new(2.0, 0.5).unwrap();
        let a = TorusFlow::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(
            count_intersections(&g, &a, &a, 0.0, 0.5, 1.0, 0.1),
            Err(TorusError::DegenerateWindow)
        );
        assert_eq!(
            count_intersections(&g, &a, &a, 0.0, 5.0, 1.0, 0.0),
            Err(TorusError::Radius)
        );
    }
}

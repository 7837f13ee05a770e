//! Detect collisions in a handful of frames, then fit a Poisson model to a
//! synthetic event stream and test it.
//!
//!     cargo run --example collision_stats

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storesim::collision::{
    detect, detect_contacts, fit_test, rate_from_count, AgentId, CollisionHistogram, CollisionTracker, PoissonModel,
    SpatialHash, DEFAULT_RADIUS,
};
use storesim::layout::Position;
use uuid::Uuid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // two walkers pass each other; a third stays away
    let mut tracker = CollisionTracker::new(Uuid::nil());
    let mut grid = SpatialHash::new();
    let mut events = Vec::new();
    for tick in 0..10u64 {
        let x = tick as f64;
        let frame = [
            (AgentId(0), Position::new(x, 0.0)),
            (AgentId(1), Position::new(9.0 - x, 0.5)),
            (AgentId(2), Position::new(50.0, 50.0)),
        ];
        let pairs = detect(&frame, DEFAULT_RADIUS)?;
        println!("tick {tick}: {} pair(s) within {DEFAULT_RADIUS} m", pairs.len());
        let contacts = detect_contacts(&mut grid, &frame, DEFAULT_RADIUS)?;
        events.extend(tracker.update(&contacts, tick)?);
    }
    events.extend(tracker.finish());
    for e in &events {
        println!("event {}-{} ticks {}..{} min distance {:.2}", e.agent_a, e.agent_b, e.start_tick, e.end_tick, e.min_distance);
    }

    // exponential gaps at 0.2 events/s over a day
    let (rate, duration) = (0.2, 86_400.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        t += -(1.0 - rng.random::<f64>()).ln() / rate;
        if t >= duration {
            break;
        }
        times.push(t);
    }
    let hist = CollisionHistogram::from_times(&times, duration, 60.0);
    let model = rate_from_count(hist.total_events(), hist.exposure())?;
    let fit = fit_test(&hist, &model)?;
    println!(
        "{} events in {} windows: lambda_hat {:.4}/s, chi2 {:.2} on {} df, p = {:.3}",
        hist.total_events(),
        hist.windows(),
        model.lambda,
        fit.chi2,
        fit.df,
        fit.p_value
    );
    let p = PoissonModel::new(rate)?;
    for n in 0..5 {
        println!("P(N = {n} in 10 s) = {:.5}", p.pmf(n, 10.0)?);
    }
    Ok(())
}

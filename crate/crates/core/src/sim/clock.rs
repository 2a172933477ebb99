//! Per-robot Poisson clocks.
//!
//! Each robot draws exponential interarrival times from its own ChaCha8
//! stream, so the tick sequence of one robot does not depend on how often
//! other robots tick or on message traffic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Name of the pinned generator, echoed into run metadata.
pub const GENERATOR: &str = "ChaCha8 (rand_chacha 0.9), stream = robot + 1";

/// Stream reserved for delays and send-timer phases.
pub(crate) const AUX_STREAM: u64 = 0;

#[derive(Clone, Debug)]
pub struct PoissonClocks {
    rate_hz: f64,
    streams: Vec<ChaCha8Rng>,
}

impl PoissonClocks {
    pub fn new(seed: u64, robots: usize, rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::Domain(format!("clock rate must be positive, got {rate_hz}")));
        }
        let streams = (0..robots)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        Ok(PoissonClocks { rate_hz, streams })
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn robots(&self) -> usize {
        self.streams.len()
    }

    /// Next interarrival of `robot` by inverse CDF, `−ln(1 − u) / λ`.
    pub fn interarrival(&mut self, robot: usize) -> f64 {
        let u: f64 = self.streams[robot].random();
        -(-u).ln_1p() / self.rate_hz
    }
}

/// The superposition of all robot clocks; ties go to the lower robot index.
#[derive(Clone, Debug)]
pub struct MergedClock {
    clocks: PoissonClocks,
    next: Vec<f64>,
}

impl MergedClock {
    pub fn new(mut clocks: PoissonClocks) -> Self {
        let next = (0..clocks.robots()).map(|i| clocks.interarrival(i)).collect();
        MergedClock { clocks, next }
    }

    /// Pops the earliest pending tick as `(robot, time)`.
    pub fn next_tick(&mut self) -> Option<(usize, f64)> {
        let (robot, &time) = self
            .next
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))?;
        self.next[robot] = time + self.clocks.interarrival(robot);
        Some((robot, time))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_of_each_other() {
        let mut a = PoissonClocks::new(9, 3, 10.0).unwrap();
        let mut b = PoissonClocks::new(9, 3, 10.0).unwrap();
        let first: Vec<f64> = (0..5).map(|_| a.interarrival(2)).collect();
        for _ in 0..7 {
            b.interarrival(0);
        }
        let second: Vec<f64> = (0..5).map(|_| b.interarrival(2)).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn mean_interarrival() {
        let mut c = PoissonClocks::new(1, 1, 4.0).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| c.interarrival(0)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.005);
    }

    #[test]
    fn merged_ticks_are_ordered() {
        let mut m = MergedClock::new(PoissonClocks::new(3, 4, 2.0).unwrap());
        let mut last = 0.0;
        for _ in 0..1000 {
            let (_, t) = m.next_tick().unwrap();
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn rejects_bad_rate() {
        assert!(PoissonClocks::new(0, 2, 0.0).is_err());
    }
}

//! Device mobility: the alternating contact/inter-contact renewal process and
//! a random-waypoint walker used to measure it empirically.
//!
//! Each round has one upload epoch, the end of the compute phase at
//! `r*delta + delta`. A device can upload in round `r` iff that epoch lies in
//! a CONTACT interval, and the upload window is the remaining contact
//! duration capped at one round.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    /// Mean contact duration `c` in seconds.
    pub mean_contact: f64,
    /// Mean inter-contact duration `lambda` in seconds.
    pub mean_intercontact: f64,
}

impl ContactParams {
    pub fn new(mean_contact: f64, mean_intercontact: f64) -> Result<Self> {
        let p = Self {
            mean_contact,
            mean_intercontact,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mean contact", self.mean_contact),
            ("mean inter-contact", self.mean_intercontact),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Long-run fraction of time spent in contact, `c / (c + lambda)`.
    pub fn contact_fraction(&self) -> f64 {
        self.mean_contact / (self.mean_contact + self.mean_intercontact)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalKind {
    Contact,
    Gap,
}

impl IntervalKind {
    fn flip(self) -> Self {
        match self {
            IntervalKind::Contact => IntervalKind::Gap,
            IntervalKind::Gap => IntervalKind::Contact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub kind: IntervalKind,
    pub duration: f64,
}

/// Alternating CONTACT/GAP intervals starting at time zero and covering
/// at least `horizon` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactTrace {
    intervals: Vec<Interval>,
    /// Interval start times, same length as `intervals`.
    starts: Vec<f64>,
    horizon: f64,
}

impl ContactTrace {
    /// Build a trace, merging adjacent intervals of the same kind and
    /// dropping zero-length ones.
    pub fn new(raw: Vec<Interval>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param(format!("horizon must be positive, got {horizon}")));
        }
        let mut intervals: Vec<Interval> = Vec::with_capacity(raw.len());
        for iv in raw {
            if !(iv.duration >= 0.0 && iv.duration.is_finite()) {
                return Err(Error::param(format!("bad interval duration {}", iv.duration)));
            }
            if iv.duration == 0.0 {
                continue;
            }
            match intervals.last_mut() {
                Some(last) if last.kind == iv.kind => last.duration += iv.duration,
                _ => intervals.push(iv),
            }
        }
        let mut starts = Vec::with_capacity(intervals.len());
        let mut t = 0.0;
        for iv in &intervals {
            starts.push(t);
            t += iv.duration;
        }
        if t < horizon {
            return Err(Error::param(format!(
                "intervals cover {t} s, less than horizon {horizon} s"
            )));
        }
        Ok(Self {
            intervals,
            starts,
            horizon,
        })
    }

    /// A trace that is in contact for the whole horizon (and one round past it,
    /// so the final upload epoch still falls inside the interval).
    pub fn always_contact(horizon: f64) -> Result<Self> {
        Self::new(
            vec![Interval {
                kind: IntervalKind::Contact,
                duration: 2.0 * horizon + 1.0,
            }],
            horizon,
        )
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Interval containing time `t` (half-open on the right).
    pub fn locate(&self, t: f64) -> Option<(usize, f64)> {
        if t < 0.0 {
            return None;
        }
        let i = self.starts.partition_point(|&s| s <= t);
        if i == 0 {
            return None;
        }
        let i = i - 1;
        let end = self.starts[i] + self.intervals[i].duration;
        (t < end).then_some((i, end - t))
    }
}

/// Sample an alternating renewal trace with exponential contact and gap
/// durations. The initial phase is CONTACT with probability `c / (c + lambda)`;
/// by memorylessness the first interval is then a full exponential draw.
pub fn sample_contact_trace<R: Rng + ?Sized>(
    params: &ContactParams,
    horizon: f64,
    rng: &mut R,
) -> Result<ContactTrace> {
    params.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param(format!("horizon must be positive, got {horizon}")));
    }
    let contact = Exp::new(1.0 / params.mean_contact).map_err(|e| Error::param(e.to_string()))?;
    let gap = Exp::new(1.0 / params.mean_intercontact).map_err(|e| Error::param(e.to_string()))?;
    let mut kind = if rng.random::<f64>() < params.contact_fraction() {
        IntervalKind::Contact
    } else {
        IntervalKind::Gap
    };
    let mut intervals = Vec::new();
    let mut covered = 0.0;
    while covered < horizon || intervals.is_empty() {
        let d: f64 = match kind {
            IntervalKind::Contact => contact.sample(rng),
            IntervalKind::Gap => gap.sample(rng),
        };
        // Exp can return exactly 0 with vanishing probability
        let d = d.max(f64::MIN_POSITIVE);
        intervals.push(Interval { kind, duration: d });
        covered += d;
        kind = kind.flip();
    }
    ContactTrace::new(intervals, horizon)
}

/// Contact indicator and upload window for round `r` (0-based).
pub fn round_contact(trace: &ContactTrace, r: usize, delta: f64) -> Result<(bool, f64)> {
    if !(delta > 0.0) {
        return Err(Error::param(format!(
            "round duration must be positive, got {delta}"
        )));
    }
    let epoch = (r as f64 + 1.0) * delta;
    if epoch > trace.horizon() {
        return Err(Error::Range(format!(
            "upload epoch {epoch} s of round {r} lies beyond horizon {} s",
            trace.horizon()
        )));
    }
    match trace.locate(epoch) {
        Some((i, remaining)) if trace.intervals[i].kind == IntervalKind::Contact => {
            Ok((true, remaining.min(delta)))
        }
        _ => Ok((false, 0.0)),
    }
}

/// Contact and inter-contact means that scale as `1 / v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedScaling {
    pub contact_const: f64,
    pub intercontact_const: f64,
    pub speed: f64,
}

pub fn scaled_params(s: &SpeedScaling) -> Result<ContactParams> {
    if !(s.speed > 0.0 && s.speed.is_finite()) {
        return Err(Error::param(format!("speed must be positive, got {}", s.speed)));
    }
    ContactParams::new(s.contact_const / s.speed, s.intercontact_const / s.speed)
}

/// Random-waypoint walker in a rectangular area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaypointState {
    pub position: [f64; 2],
    pub destination: [f64; 2],
    pub speed: f64,
    pub pause_remaining: f64,
    pub area: [f64; 2],
    pub comm_range: f64,
    /// Mean speed; new legs draw uniformly from `[0.5, 1.5] * mean_speed`.
    pub mean_speed: f64,
    /// Pauses draw uniformly from `[0, max_pause]`.
    pub max_pause: f64,
}

impl WaypointState {
    /// Walker at a uniform position with a fresh leg.
    pub fn spawn<R: Rng + ?Sized>(
        area: [f64; 2],
        comm_range: f64,
        mean_speed: f64,
        max_pause: f64,
        rng: &mut R,
    ) -> Self {
        let position = [rng.random::<f64>() * area[0], rng.random::<f64>() * area[1]];
        let mut w = Self {
            position,
            destination: position,
            speed: 0.0,
            pause_remaining: 0.0,
            area,
            comm_range,
            mean_speed,
            max_pause,
        };
        w.new_leg(rng);
        w
    }

    fn new_leg<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.destination = [
            rng.random::<f64>() * self.area[0],
            rng.random::<f64>() * self.area[1],
        ];
        self.speed = self.mean_speed * (0.5 + rng.random::<f64>());
    }
}

/// Advance a walker by `dt` seconds. Arrival starts a pause; when the pause
/// ends a new destination and speed are drawn. Leftover time carries over.
pub fn advance_waypoint<R: Rng + ?Sized>(state: &WaypointState, dt: f64, rng: &mut R) -> WaypointState {
    let mut w = *state;
    let mut left = dt;
    // bounded: each pass either consumes all time or finishes a leg/pause
    for _ in 0..10_000 {
        if left <= 0.0 {
            break;
        }
        if w.pause_remaining > 0.0 {
            if w.pause_remaining > left {
                w.pause_remaining -= left;
                break;
            }
            left -= w.pause_remaining;
            w.pause_remaining = 0.0;
            w.new_leg(rng);
            continue;
        }
        let dx = w.destination[0] - w.position[0];
        let dy = w.destination[1] - w.position[1];
        let dist = dx.hypot(dy);
        if w.speed <= 0.0 {
            break;
        }
        let reach = w.speed * left;
        if reach < dist {
            w.position[0] += dx / dist * reach;
            w.position[1] += dy / dist * reach;
            break;
        }
        left -= dist / w.speed;
        w.position = w.destination;
        w.pause_remaining = rng.random::<f64>() * w.max_pause;
        if w.pause_remaining == 0.0 {
            w.new_leg(rng);
        }
    }
    w
}

/// True iff the two walkers are within communication range (inclusive).
pub fn waypoint_contact(a: &WaypointState, b: &WaypointState) -> bool {
    let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
    d <= a.comm_range
}

/// Co-simulate a device and the MES with step `dt` and record the contact
/// process as a trace, plus the device-MES distance sampled at each step.
pub fn waypoint_trace<R: Rng + ?Sized>(
    device: &WaypointState,
    mes: &WaypointState,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<(ContactTrace, Vec<f64>)> {
    if !(dt > 0.0) {
        return Err(Error::param("waypoint step must be positive"));
    }
    let steps = (horizon / dt).ceil() as usize + 1;
    let mut a = *device;
    let mut b = *mes;
    let mut raw = Vec::with_capacity(64);
    let mut distances = Vec::with_capacity(steps);
    for _ in 0..steps {
        let kind = if waypoint_contact(&a, &b) {
            IntervalKind::Contact
        } else {
            IntervalKind::Gap
        };
        distances.push((a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]));
        raw.push(Interval { kind, duration: dt });
        a = advance_waypoint(&a, dt, rng);
        b = advance_waypoint(&b, dt, rng);
    }
    Ok((ContactTrace::new(raw, horizon)?, distances))
}

/// Positions of a walker sampled every `dt` seconds over `horizon`.
pub fn waypoint_path<R: Rng + ?Sized>(
    start: &WaypointState,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>> {
    if !(dt > 0.0) {
        return Err(Error::param("waypoint step must be positive"));
    }
    let steps = (horizon / dt).ceil() as usize + 1;
    let mut w = *start;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(w.position);
        w = advance_waypoint(&w, dt, rng);
    }
    Ok(out)
}

/// Contact trace and distance series of two sampled paths.
pub fn trace_from_paths(
    a: &[[f64; 2]],
    b: &[[f64; 2]],
    comm_range: f64,
    dt: f64,
    horizon: f64,
) -> Result<(ContactTrace, Vec<f64>)> {
    let distances: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .collect();
    let raw = distances
        .iter()
        .map(|&d| Interval {
            kind: if d <= comm_range {
                IntervalKind::Contact
            } else {
                IntervalKind::Gap
            },
            duration: dt,
        })
        .collect();
    Ok((ContactTrace::new(raw, horizon)?, distances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn iv(kind: IntervalKind, duration: f64) -> Interval {
        Interval { kind, duration }
    }

    #[test]
    fn tiny_horizon_is_covered() {
        let p = ContactParams::new(10.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_contact_trace(&p, 0.001, &mut rng).unwrap();
        assert!(!t.intervals().is_empty());
        let total: f64 = t.intervals().iter().map(|i| i.duration).sum();
        assert!(total >= 0.001);
    }

    #[test]
    fn rejects_non_positive_params() {
        assert!(ContactParams::new(0.0, 1.0).is_err());
        assert!(ContactParams::new(1.0, -1.0).is_err());
        assert!(ContactParams::new(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn traces_alternate() {
        let p = ContactParams::new(3.0, 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = sample_contact_trace(&p, 5000.0, &mut rng).unwrap();
        assert!(t.intervals().windows(2).all(|w| w[0].kind != w[1].kind));
        assert!(t.intervals().iter().all(|i| i.duration > 0.0));
    }

    #[test]
    fn contact_mean_matches_parameter() {
        let p = ContactParams::new(10.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = sample_contact_trace(&p, 2.0e7, &mut rng).unwrap();
        let contacts: Vec<f64> = t
            .intervals()
            .iter()
            .filter(|i| i.kind == IntervalKind::Contact)
            .map(|i| i.duration)
            .take(1_000_000)
            .collect();
        assert!(contacts.len() >= 900_000);
        let mean = contacts.iter().sum::<f64>() / contacts.len() as f64;
        assert!((mean - 10.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn stationary_start_is_balanced() {
        let p = ContactParams::new(10.0, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                sample_contact_trace(&p, 1e-3, &mut rng).unwrap().intervals()[0].kind == IntervalKind::Contact
            })
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "frac {frac}");
    }

    #[test]
    fn round_contact_examples() {
        let t = ContactTrace::new(vec![iv(IntervalKind::Contact, 100.0)], 100.0).unwrap();
        assert_eq!(round_contact(&t, 0, 10.0).unwrap(), (true, 10.0));

        let t = ContactTrace::new(
            vec![iv(IntervalKind::Gap, 100.0), iv(IntervalKind::Contact, 50.0)],
            150.0,
        )
        .unwrap();
        assert_eq!(round_contact(&t, 0, 10.0).unwrap(), (false, 0.0));

        let t = ContactTrace::new(
            vec![iv(IntervalKind::Contact, 12.0), iv(IntervalKind::Gap, 50.0)],
            62.0,
        )
        .unwrap();
        let (z, tau) = round_contact(&t, 0, 10.0).unwrap();
        assert!(z);
        assert!((tau - 2.0).abs() < 1e-12);
    }

    #[test]
    fn round_contact_is_pure_and_range_checked() {
        let p = ContactParams::new(5.0, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_contact_trace(&p, 100.0, &mut rng).unwrap();
        for r in 0..10 {
            assert_eq!(
                round_contact(&t, r, 10.0).unwrap(),
                round_contact(&t, r, 10.0).unwrap()
            );
        }
        assert!(matches!(round_contact(&t, 10, 10.0), Err(Error::Range(_))));
    }

    #[test]
    fn memoryless_contact_window() {
        // a round much longer than c leaves tau uncapped, so E[tau | contact] = c
        let p = ContactParams::new(4.0, 6.0).unwrap();
        let delta = 50.0 * p.mean_contact;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut samples = Vec::with_capacity(100_000);
        while samples.len() < 100_000 {
            let t = sample_contact_trace(&p, delta, &mut rng).unwrap();
            let (z, tau) = round_contact(&t, 0, delta).unwrap();
            if z {
                samples.push(tau);
            }
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 4.0).abs() < 3.0 * (var / n).sqrt(), "mean {mean}");
    }

    #[test]
    fn scaled_params_examples() {
        let s = SpeedScaling {
            contact_const: 100.0,
            intercontact_const: 1000.0,
            speed: 10.0,
        };
        assert_eq!(
            scaled_params(&s).unwrap(),
            ContactParams::new(10.0, 100.0).unwrap()
        );
        let s1 = SpeedScaling { speed: 1.0, ..s };
        assert_eq!(
            scaled_params(&s1).unwrap(),
            ContactParams::new(100.0, 1000.0).unwrap()
        );
        let s2 = SpeedScaling { speed: 20.0, ..s };
        let p2 = scaled_params(&s2).unwrap();
        let p1 = scaled_params(&s).unwrap();
        assert_eq!(p2.mean_contact * 2.0, p1.mean_contact);
        assert_eq!(p2.mean_intercontact * 2.0, p1.mean_intercontact);
        assert!(scaled_params(&SpeedScaling { speed: 0.0, ..s }).is_err());
        assert!(scaled_params(&SpeedScaling { speed: -1.0, ..s }).is_err());
    }

    fn walker(pos: [f64; 2], dest: [f64; 2], speed: f64) -> WaypointState {
        WaypointState {
            position: pos,
            destination: dest,
            speed,
            pause_remaining: 0.0,
            area: [1000.0, 1000.0],
            comm_range: 100.0,
            mean_speed: speed,
            max_pause: 10.0,
        }
    }

    #[test]
    fn waypoint_moves_along_unit_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = advance_waypoint(&walker([0.0, 0.0], [30.0, 40.0], 5.0), 1.0, &mut rng);
        assert!((w.position[0] - 3.0).abs() < 1e-12);
        assert!((w.position[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn waypoint_exact_arrival_starts_pause() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = advance_waypoint(&walker([0.0, 0.0], [30.0, 40.0], 5.0), 10.0, &mut rng);
        assert_eq!(w.position, [30.0, 40.0]);
        assert!(w.pause_remaining >= 0.0 && w.pause_remaining <= 10.0);
    }

    #[test]
    fn waypoint_is_deterministic_and_stays_in_area() {
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let mut a = WaypointState::spawn([1000.0, 1000.0], 100.0, 10.0, 10.0, &mut r1);
        let mut b = WaypointState::spawn([1000.0, 1000.0], 100.0, 10.0, 10.0, &mut r2);
        for _ in 0..5000 {
            a = advance_waypoint(&a, 1.0, &mut r1);
            b = advance_waypoint(&b, 1.0, &mut r2);
            assert_eq!(a, b);
            assert!((0.0..=1000.0).contains(&a.position[0]));
            assert!((0.0..=1000.0).contains(&a.position[1]));
            assert!(a.speed >= 5.0 && a.speed <= 15.0);
        }
    }

    #[test]
    fn contact_range_is_inclusive() {
        let a = walker([0.0, 0.0], [0.0, 0.0], 1.0);
        let b = walker([60.0, 80.0], [0.0, 0.0], 1.0);
        let c = walker([60.0, 80.1], [0.0, 0.0], 1.0);
        assert!(waypoint_contact(&a, &b));
        assert!(!waypoint_contact(&a, &c));
        assert!(waypoint_contact(&a, &a));
    }

    fn mean_contact_duration(mean_speed: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..40 {
            let a = WaypointState::spawn([1000.0, 1000.0], 100.0, mean_speed, 10.0, &mut rng);
            let b = WaypointState::spawn([1000.0, 1000.0], 100.0, mean_speed, 10.0, &mut rng);
            let (trace, _) = waypoint_trace(&a, &b, 10_000.0, 0.5, &mut rng).unwrap();
            let ivs = trace.intervals();
            // drop the first and last interval (censored)
            for iv in ivs.iter().skip(1).take(ivs.len().saturating_sub(2)) {
                if iv.kind == IntervalKind::Contact {
                    total += iv.duration;
                    count += 1;
                }
            }
        }
        total / count.max(1) as f64
    }

    #[test]
    fn waypoint_contact_time_shrinks_with_speed() {
        let slow = mean_contact_duration(2.0, 77);
        let mid = mean_contact_duration(8.0, 77);
        let fast = mean_contact_duration(32.0, 77);
        assert!(slow > mid && mid > fast, "{slow} {mid} {fast}");
    }
}

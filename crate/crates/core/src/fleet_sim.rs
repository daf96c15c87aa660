//! Fleet sizing and minute-stepped replay of trips onto physical bikes,
//! with optional guidance toward sensor-equipped bikes.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SegmentId;
use crate::trips::{StandId, TripLog};

pub const TRAJECTORY_FORMAT: &str = "velosense-traj-v1";
pub const FLEET_FORMAT: &str = "velosense-fleet-v1";

/// Generator used for every stochastic step. One `f64` draw per trip for the
/// guidance coin, then one bounded draw to pick the bike.
pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.3, rand 0.8 uniform sampling)";

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BikeId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetPlan {
    /// Initial bike count per stand.
    pub counts: Vec<u32>,
    /// Bike ids per stand; ids are dense and assigned stand by stand.
    pub bikes: Vec<Vec<BikeId>>,
}

impl FleetPlan {
    pub fn from_counts(counts: Vec<u32>) -> Self {
        let mut next = 0;
        let bikes = counts
            .iter()
            .map(|&c| {
                let ids = (next..next + c as usize).map(BikeId).collect();
                next += c as usize;
                ids
            })
            .collect();
        FleetPlan { counts, bikes }
    }

    pub fn total_bikes(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub fn home_stands(&self) -> Vec<StandId> {
        let mut home = vec![StandId(0); self.total_bikes()];
        for (s, ids) in self.bikes.iter().enumerate() {
            for b in ids {
                home[b.0] = StandId(s);
            }
        }
        home
    }

    /// The first `n_s` bikes of each stand, capped at the stand's count.
    pub fn equip(&self, per_stand: &[u32]) -> BTreeSet<BikeId> {
        self.bikes
            .iter()
            .zip(per_stand)
            .flat_map(|(ids, &n)| ids.iter().take(n as usize).copied())
            .collect()
    }

    pub fn write_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer(
            sink,
            &serde_json::json!({ "format": FLEET_FORMAT, "counts": self.counts }),
        )?;
        Ok(())
    }

    pub fn read_json<R: Read>(src: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            counts: Vec<u32>,
        }
        let doc: Doc = serde_json::from_reader(src)?;
        if doc.format != FLEET_FORMAT {
            return Err(Error::malformed(format!("expected format {FLEET_FORMAT}")));
        }
        Ok(FleetPlan::from_counts(doc.counts))
    }
}

/// Minimal per-stand fleet such that replaying the log never empties a
/// stand. Within a minute, arrivals are counted before departures.
pub fn initial_bike_counts(log: &TripLog) -> FleetPlan {
    let (t0, t1) = log.horizon;
    let mut delta: Vec<Vec<(u32, i64, i64)>> = vec![Vec::new(); log.stand_count()];
    for t in &log.trips {
        delta[t.origin.0].push((t.start_min, 0, 1));
        if t.end_min <= t1 {
            delta[t.dest.0].push((t.end_min, 1, 0));
        }
    }
    let counts = delta
        .into_iter()
        .map(|mut ev| {
            ev.sort_unstable();
            let mut balance = 0i64;
            let mut lowest = 0i64;
            let mut i = 0;
            while i < ev.len() {
                let minute = ev[i].0;
                let (mut arr, mut dep) = (0, 0);
                while i < ev.len() && ev[i].0 == minute {
                    arr += ev[i].1;
                    dep += ev[i].2;
                    i += 1;
                }
                if minute >= t0 {
                    balance += arr - dep;
                    lowest = lowest.min(balance);
                }
            }
            (-lowest) as u32
        })
        .collect();
    FleetPlan::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub beta: f64,
    pub equipped: BTreeSet<BikeId>,
}

impl SimConfig {
    pub fn passive(seed: u64) -> Self {
        SimConfig {
            seed,
            beta: 0.0,
            equipped: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BikeTrajectory {
    pub bike: BikeId,
    pub home: StandId,
    /// Indices into `TripLog::trips`, in service order.
    pub served: Vec<usize>,
    pub events: Vec<(SegmentId, u32)>,
}

/// Replays the log minute by minute. Per trip one uniform `u` is drawn; if
/// `u < beta` and an equipped bike is idle at the origin, the bike is drawn
/// among idle equipped bikes, otherwise among all idle bikes.
pub fn simulate(log: &TripLog, plan: &FleetPlan, cfg: &SimConfig) -> Result<Vec<BikeTrajectory>> {
    let mut rng = rng_from_seed(cfg.seed);
    simulate_with(log, plan, cfg, &mut rng)
}

pub fn simulate_with<R: Rng>(
    log: &TripLog,
    plan: &FleetPlan,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Vec<BikeTrajectory>> {
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(Error::Contract(format!("beta {} outside [0,1]", cfg.beta)));
    }
    if plan.bikes.len() != log.stand_count() {
        return Err(Error::Contract(format!(
            "plan covers {} stands, log has {}",
            plan.bikes.len(),
            log.stand_count()
        )));
    }
    let (t0, t1) = log.horizon;
    let home = plan.home_stands();
    let fleet = home.len();
    let mut equipped = vec![false; fleet];
    for b in &cfg.equipped {
        if let Some(e) = equipped.get_mut(b.0) {
            *e = true;
        }
    }

    let mut idle: Vec<Vec<BikeId>> = plan.bikes.clone();
    let mut idle_equipped: Vec<usize> = idle
        .iter()
        .map(|ids| ids.iter().filter(|b| equipped[b.0]).count())
        .collect();
    let mut trajectories: Vec<BikeTrajectory> = (0..fleet)
        .map(|b| BikeTrajectory {
            bike: BikeId(b),
            home: home[b],
            served: Vec::new(),
            events: Vec::new(),
        })
        .collect();

    let span = (t1 - t0) as usize + 1;
    let mut returning: Vec<Vec<(BikeId, StandId)>> = vec![Vec::new(); span];
    let mut next_trip = 0;
    for minute in t0..=t1 {
        for (bike, stand) in std::mem::take(&mut returning[(minute - t0) as usize]) {
            idle[stand.0].push(bike);
            if equipped[bike.0] {
                idle_equipped[stand.0] += 1;
            }
        }
        while next_trip < log.trips.len() && log.trips[next_trip].start_min <= minute {
            let trip = &log.trips[next_trip];
            if trip.start_min < minute {
                return Err(Error::Contract(format!(
                    "trip {} starts before the horizon or log is unsorted",
                    trip.id
                )));
            }
            let s = trip.origin.0;
            let u: f64 = rng.gen();
            let pool = &mut idle[s];
            if pool.is_empty() {
                return Err(Error::InfeasiblePlan {
                    trip: trip.id.clone(),
                    stand: s,
                    minute,
                });
            }
            let pos = if u < cfg.beta && idle_equipped[s] > 0 {
                let k = rng.gen_range(0..idle_equipped[s]);
                pool.iter()
                    .enumerate()
                    .filter(|(_, b)| equipped[b.0])
                    .nth(k)
                    .map(|(i, _)| i)
                    .expect("idle equipped count in sync")
            } else {
                rng.gen_range(0..pool.len())
            };
            let bike = pool.swap_remove(pos);
            if equipped[bike.0] {
                idle_equipped[s] -= 1;
            }
            let traj = &mut trajectories[bike.0];
            traj.served.push(next_trip);
            traj.events.extend(trip.events());
            if trip.end_min <= t1 {
                returning[(trip.end_min - t0) as usize].push((bike, trip.dest));
            }
            next_trip += 1;
        }
    }
    if next_trip < log.trips.len() {
        return Err(Error::Contract(format!(
            "trip {} starts after the horizon",
            log.trips[next_trip].id
        )));
    }
    Ok(trajectories)
}

#[derive(Serialize, Deserialize)]
struct TrajDoc {
    format: String,
    metadata: TrajMeta,
    bikes: Vec<TrajRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajMeta {
    pub seed: u64,
    pub beta: f64,
    pub generator: String,
    pub equipped: Vec<BikeId>,
}

#[derive(Serialize, Deserialize)]
struct TrajRecord {
    bike: BikeId,
    home: StandId,
    served: Vec<String>,
    events: Vec<(SegmentId, u32)>,
}

pub fn write_trajectories<W: Write>(
    log: &TripLog,
    cfg: &SimConfig,
    trajectories: &[BikeTrajectory],
    sink: W,
) -> Result<()> {
    let doc = TrajDoc {
        format: TRAJECTORY_FORMAT.into(),
        metadata: TrajMeta {
            seed: cfg.seed,
            beta: cfg.beta,
            generator: RNG_NAME.into(),
            equipped: cfg.equipped.iter().copied().collect(),
        },
        bikes: trajectories
            .iter()
            .map(|t| TrajRecord {
                bike: t.bike,
                home: t.home,
                served: t.served.iter().map(|&i| log.trips[i].id.clone()).collect(),
                events: t.events.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(sink, &doc)?;
    Ok(())
}

pub fn read_trajectories<R: Read>(
    log: &TripLog,
    src: R,
) -> Result<(TrajMeta, Vec<BikeTrajectory>)> {
    let doc: TrajDoc = serde_json::from_reader(src)?;
    if doc.format != TRAJECTORY_FORMAT {
        return Err(Error::malformed(format!("expected format {TRAJECTORY_FORMAT}")));
    }
    let index: std::collections::HashMap<&str, usize> = log
        .trips
        .iter()
        .enumerate()
        .map(|(i, t)| (t.id.as_str(), i))
        .collect();
    let bikes = doc
        .bikes
        .into_iter()
        .map(|r| {
            let served = r
                .served
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::malformed(format!("unknown trip id {id}")))
                })
                .collect::<Result<_>>()?;
            Ok(BikeTrajectory {
                bike: r.bike,
                home: r.home,
                served,
                events: r.events,
            })
        })
        .collect::<Result<_>>()?;
    Ok((doc.metadata, bikes))
}

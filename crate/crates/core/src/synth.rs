//! Synthetic grid cities with gravity-model trip demand, so the whole
//! pipeline runs without downloaded data.

use chrono::{NaiveDate, NaiveDateTime};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fleet_sim::rng_from_seed;
use crate::network::{EdgeRecord, Node, NodeId, PathCache, RoadNetwork, EARTH_RADIUS_M};
use crate::trips::RawTrip;

const BASE_LAT: f64 = 40.70;
const BASE_LON: f64 = -74.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub block_m: f64,
    pub stand_count: usize,
    pub trips: usize,
    pub horizon: (u32, u32),
    pub gravity_gamma: f64,
    pub seed: u64,
    /// Relative demand per hour of the horizon; uniform when absent.
    #[serde(default)]
    pub hour_weights: Option<Vec<f64>>,
}

impl SynthConfig {
    /// 20×20 grid, 200 m blocks, 50 stands, 20,000 trips, γ = 1.5.
    pub fn reference(seed: u64) -> Self {
        SynthConfig {
            grid_w: 20,
            grid_h: 20,
            block_m: 200.0,
            stand_count: 50,
            trips: 20_000,
            horizon: (360, 1320),
            gravity_gamma: 1.5,
            seed,
            hour_weights: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let nodes = self.grid_w * self.grid_h;
        if self.grid_w == 0 || self.grid_h == 0 || !(self.block_m > 0.0) {
            return Err(Error::ConfigInfeasible("empty grid or non-positive block".into()));
        }
        if self.stand_count > nodes || self.stand_count < 2 {
            return Err(Error::ConfigInfeasible(format!(
                "need 2..={nodes} stands, got {}",
                self.stand_count
            )));
        }
        if !(self.gravity_gamma > 0.0) || self.horizon.1 < self.horizon.0 {
            return Err(Error::ConfigInfeasible("bad gamma or horizon".into()));
        }
        if let Some(w) = &self.hour_weights {
            if w.is_empty() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::ConfigInfeasible("bad hour weights".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub network: RoadNetwork,
    pub stand_nodes: Vec<NodeId>,
    pub trips: Vec<RawTrip>,
}

pub fn grid_network(w: usize, h: usize, block_m: f64) -> Result<RoadNetwork> {
    let dlat = (block_m / EARTH_RADIUS_M).to_degrees();
    let dlon = (block_m / (EARTH_RADIUS_M * BASE_LAT.to_radians().cos())).to_degrees();
    let nodes = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| Node {
            external_id: (y * w + x).to_string(),
            lat: BASE_LAT + y as f64 * dlat,
            lon: BASE_LON + x as f64 * dlon,
        })
        .collect();
    let mut edges = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let id = y * w + x;
            if x + 1 < w {
                edges.push(EdgeRecord {
                    u: id.to_string(),
                    v: (id + 1).to_string(),
                    length_m: Some(block_m),
                });
            }
            if y + 1 < h {
                edges.push(EdgeRecord {
                    u: id.to_string(),
                    v: (id + w).to_string(),
                    length_m: Some(block_m),
                });
            }
        }
    }
    RoadNetwork::from_records(nodes, &edges)
}

/// Grid network, stands on distinct random nodes, and trips whose OD pair
/// is drawn with weight `d^-γ` among pairs routed between 0.5 and 5 km.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCity> {
    cfg.validate()?;
    let network = grid_network(cfg.grid_w, cfg.grid_h, cfg.block_m)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut stand_nodes: Vec<NodeId> = sample(&mut rng, network.node_count(), cfg.stand_count)
        .into_iter()
        .map(NodeId)
        .collect();
    stand_nodes.sort();

    let cache = PathCache::build(&network, &stand_nodes);
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for &o in &stand_nodes {
        for &d in &stand_nodes {
            if o == d {
                continue;
            }
            let dist = cache.path(&network, o, d)?.distance_m;
            if (500.0..=5000.0).contains(&dist) {
                pairs.push((o, d));
                weights.push(dist.powf(-cfg.gravity_gamma));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::ConfigInfeasible(
            "no stand pair lies between 0.5 and 5 km".into(),
        ));
    }
    let od = WeightedIndex::new(&weights)
        .map_err(|e| Error::ConfigInfeasible(format!("OD weights: {e}")))?;

    let (t0, t1) = cfg.horizon;
    let hour_pick = match &cfg.hour_weights {
        Some(w) => Some(
            WeightedIndex::new(w).map_err(|e| Error::ConfigInfeasible(format!("hour weights: {e}")))?,
        ),
        None => None,
    };
    let midnight: NaiveDateTime = NaiveDate::from_ymd_opt(2024, 3, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");

    let trips = (0..cfg.trips)
        .map(|i| {
            let (o, d) = pairs[od.sample(&mut rng)];
            let minute = match &hour_pick {
                Some(hp) => {
                    let h = hp.sample(&mut rng) as u32;
                    let lo = (t0 + 60 * h).min(t1);
                    let hi = (lo + 59).min(t1);
                    rng.gen_range(lo..=hi)
                }
                None => rng.gen_range(t0..=t1),
            };
            let (a, b) = (network.node(o), network.node(d));
            RawTrip {
                id: format!("s{i}"),
                start_time: midnight + chrono::Duration::minutes(minute as i64),
                start_lat: a.lat,
                start_lon: a.lon,
                end_lat: b.lat,
                end_lon: b.lon,
            }
        })
        .collect();
    Ok(SynthCity {
        network,
        stand_nodes,
        trips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trips::{clean_trips, CleanParams};

    fn small(trips: usize) -> SynthConfig {
        SynthConfig {
            grid_w: 2,
            grid_h: 2,
            block_m: 600.0,
            stand_count: 2,
            trips,
            horizon: (360, 1320),
            gravity_gamma: 1.5,
            seed: 4,
            hour_weights: None,
        }
    }

    #[test]
    fn two_stands_one_pair() {
        let city = generate(&small(10)).unwrap();
        assert_eq!(city.network.node_count(), 4);
        assert_eq!(city.network.segment_count(), 4);
        let (log, rep) = clean_trips(&city.trips, &city.network, &CleanParams::default()).unwrap();
        assert_eq!(rep.kept, 10);
        assert_eq!(log.stands.len(), 2);
        for t in &log.trips {
            assert_ne!(t.origin, t.dest);
            assert!((500.0..=5000.0).contains(&t.distance_m));
        }
    }

    #[test]
    fn zero_trips() {
        let city = generate(&small(0)).unwrap();
        assert!(city.trips.is_empty());
    }

    #[test]
    fn infeasible_when_blocks_too_short() {
        let mut cfg = small(5);
        cfg.block_m = 100.0;
        assert!(matches!(generate(&cfg), Err(Error::ConfigInfeasible(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate(&small(50)).unwrap();
        let b = generate(&small(50)).unwrap();
        assert_eq!(a.trips, b.trips);
    }

    #[test]
    fn hour_weights_shape_demand() {
        let mut cfg = small(400);
        let mut w = vec![0.0; 16];
        w[3] = 1.0;
        cfg.hour_weights = Some(w);
        let city = generate(&cfg).unwrap();
        assert!(city.trips.iter().all(|t| t.start_minute() / 60 == 9));
    }
}

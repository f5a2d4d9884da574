//! Named benchmark instances, constructed from bundled data files or
//! hard-coded parameters:
//!
//! - `3n4l` — three nodes, four links, one OD pair, all simple routes;
//! - `hearn` — nine nodes, eighteen links, four OD pairs, all simple routes;
//! - `sioux_falls` — the 24-node benchmark with bundled 5-route sets per OD;
//! - `tolling_{A,B,C}_{with3,without3}` — parallel-route tolling settings,
//!   with routes numbered as in their scenario descriptions (route 1
//!   toll-free, route 2 tolled at 30, route 3 tolled at 34);
//! - `multimodal` — the suburb-to-downtown road network whose commuting
//!   options (transit / driving / park-and-ride) are defined by the scenario
//!   layer, so its classes carry no graph routes.

use serde::{Deserialize, Serialize};

use super::{k_shortest_routes, load_tntp, Link, Network, NetworkError, Route, TravelerClass};

/// Every name accepted by [`builtin_network`].
pub fn builtin_names() -> &'static [&'static str] {
    &[
        "3n4l",
        "hearn",
        "sioux_falls",
        "tolling_A_with3",
        "tolling_A_without3",
        "tolling_B_with3",
        "tolling_B_without3",
        "tolling_C_with3",
        "tolling_C_without3",
        "multimodal",
    ]
}

/// Number of routes per OD pair in the bundled Sioux Falls route sets.
pub const SIOUX_FALLS_ROUTES_PER_OD: usize = 5;

const SIOUX_FALLS_ROUTES_JSON: &str = include_str!("data/siouxfalls_routes.json");

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RouteSetsFile {
    pub k: usize,
    pub routes: Vec<RouteSetRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RouteSetRecord {
    pub origin: usize,
    pub destination: usize,
    pub paths: Vec<Vec<usize>>,
}

/// Returns the named benchmark instance; see the module docs for the list.
pub fn builtin_network(name: &str) -> Result<Network, NetworkError> {
    let net = match name {
        "3n4l" => exhaustive_routes(load_tntp(
            include_str!("data/three_node_net.tntp"),
            include_str!("data/three_node_trips.tntp"),
        )?)?,
        "hearn" => exhaustive_routes(load_tntp(
            include_str!("data/hearn_net.tntp"),
            include_str!("data/hearn_trips.tntp"),
        )?)?,
        "sioux_falls" => sioux_falls()?,
        "tolling_A_with3" => tolling(&[45.0, 30.0, 37.0], &[8.0, 8.0, 8.0], 3),
        "tolling_A_without3" => tolling(&[45.0, 30.0, 37.0], &[8.0, 8.0, 8.0], 2),
        "tolling_B_with3" => tolling(&[45.0, 30.0, 37.0], &[8.0, 4.0, 8.0], 3),
        "tolling_B_without3" => tolling(&[45.0, 30.0, 37.0], &[8.0, 4.0, 8.0], 2),
        "tolling_C_with3" => tolling(&[40.0, 30.0, 37.0], &[8.0, 8.0, 8.0], 3),
        "tolling_C_without3" => tolling(&[40.0, 30.0, 37.0], &[8.0, 8.0, 8.0], 2),
        "multimodal" => multimodal(),
        other => return Err(NetworkError::UnknownBuiltin(other.to_string())),
    };
    net.validate()?;
    Ok(net)
}

/// Attaches every simple route to every class, in (free-flow time, lex) order.
fn exhaustive_routes(mut net: Network) -> Result<Network, NetworkError> {
    let plain = Network { num_nodes: net.num_nodes, links: net.links.clone(), classes: vec![] };
    for class in &mut net.classes {
        class.routes = k_shortest_routes(&plain, class.origin, class.destination, usize::MAX)?;
    }
    Ok(net)
}

fn sioux_falls() -> Result<Network, NetworkError> {
    let mut net = load_tntp(
        include_str!("data/siouxfalls_net.tntp"),
        include_str!("data/siouxfalls_trips.tntp"),
    )?;
    let sets: RouteSetsFile =
        serde_json::from_str(SIOUX_FALLS_ROUTES_JSON).map_err(|e| NetworkError::BadBuiltin {
            name: "sioux_falls",
            message: format!("route sets file: {e}"),
        })?;
    if sets.routes.len() != net.classes.len() {
        return Err(NetworkError::BadBuiltin {
            name: "sioux_falls",
            message: format!(
                "route sets cover {} OD pairs, expected {}",
                sets.routes.len(),
                net.classes.len()
            ),
        });
    }
    for (class, record) in net.classes.iter_mut().zip(sets.routes) {
        if (class.origin, class.destination) != (record.origin, record.destination) {
            return Err(NetworkError::BadBuiltin {
                name: "sioux_falls",
                message: format!(
                    "route set order mismatch at OD ({}, {})",
                    class.origin, class.destination
                ),
            });
        }
        class.routes = record
            .paths
            .into_iter()
            .map(|links| Route { origin: class.origin, destination: class.destination, links })
            .collect();
    }
    Ok(net)
}

/// Parallel-link tolling instance: `route_count` single-link routes from node
/// 1 to node 2, numbered as in the scenario text (tolls 0 / 30 / 34).
fn tolling(u0: &[f64; 3], caps: &[f64; 3], route_count: usize) -> Network {
    const TOLLS: [f64; 3] = [0.0, 30.0, 34.0];
    let links: Vec<Link> = (0..route_count)
        .map(|i| Link {
            id: i,
            tail: 1,
            head: 2,
            free_flow_time: u0[i],
            capacity: caps[i],
            bpr_alpha: 0.15,
            bpr_beta: 4.0,
            toll: TOLLS[i],
        })
        .collect();
    let routes = (0..route_count)
        .map(|i| Route { origin: 1, destination: 2, links: vec![i] })
        .collect();
    Network {
        num_nodes: 2,
        links,
        classes: vec![TravelerClass {
            name: "commuter".into(),
            origin: 1,
            destination: 2,
            demand: 10.0,
            routes,
        }],
    }
}

/// Road side of the multimodal scenario: city link (1,3), highway link
/// (3,10), and the suburban park-and-ride approach (1,8). The three income
/// classes share OD (1,10); their commuting options live in the scenario
/// layer, so the classes carry no graph routes here.
fn multimodal() -> Network {
    let params = [(1usize, 3usize, 5.0, 8.0), (3, 10, 25.0, 10.0), (1, 8, 15.0, 12.0)];
    let links = params
        .iter()
        .enumerate()
        .map(|(i, &(tail, head, u0, cap))| Link {
            id: i,
            tail,
            head,
            free_flow_time: u0,
            capacity: cap,
            bpr_alpha: 0.15,
            bpr_beta: 4.0,
            toll: 0.0,
        })
        .collect();
    let classes = [("high_income", 7.5), ("middle_income", 15.0), ("low_income", 7.5)]
        .into_iter()
        .map(|(name, demand)| TravelerClass {
            name: name.into(),
            origin: 1,
            destination: 10,
            demand,
            routes: Vec::new(),
        })
        .collect();
    Network { num_nodes: 10, links, classes }
}

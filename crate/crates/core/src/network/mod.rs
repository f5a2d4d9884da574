//! Road networks: links with BPR volume-delay functions, traveler classes
//! with enumerated route sets, and the loading map from route flows to link
//! flows. Networks are immutable after construction; every operation here is
//! a pure function of its inputs.

mod builtin;
mod ksp;
mod tntp;

pub use builtin::{builtin_names, builtin_network, SIOUX_FALLS_ROUTES_PER_OD};
pub use ksp::k_shortest_routes;
pub use tntp::load_tntp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;

/// Index of a link in [`Network::links`].
pub type LinkId = usize;

/// Errors raised by network construction, validation, parsing, and loading.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("negative flow {flow} on link {link}")]
    NegativeFlow { link: LinkId, flow: f64 },
    #[error("link {link} has id {id}, expected its position in the link table")]
    MisnumberedLink { link: usize, id: LinkId },
    #[error("link {link} references node {node}, but the network has {num_nodes} nodes")]
    NodeOutOfRange { link: LinkId, node: usize, num_nodes: usize },
    #[error("link {link} is a self-loop at node {node}")]
    SelfLoop { link: LinkId, node: usize },
    #[error("link {link} has non-positive capacity {capacity}")]
    BadCapacity { link: LinkId, capacity: f64 },
    #[error("link {link} has negative {what} ({value})")]
    NegativeParameter { link: LinkId, what: &'static str, value: f64 },
    #[error("class {class} has non-positive demand {demand}")]
    BadDemand { class: usize, demand: f64 },
    #[error("class {class} route {route} references unknown link {link}")]
    UnknownLink { class: usize, route: usize, link: LinkId },
    #[error(
        "class {class} route {route} is broken at position {position}: \
         the link chain does not connect origin to destination"
    )]
    BrokenRoute { class: usize, route: usize, position: usize },
    #[error("class {class} route {route} repeats link {link}")]
    RepeatedLink { class: usize, route: usize, link: LinkId },
    #[error("flow profile has {got} classes, network has {want}")]
    ClassCountMismatch { got: usize, want: usize },
    #[error("flow profile for class {class} has {got} entries, class has {want} routes")]
    RouteCountMismatch { class: usize, got: usize, want: usize },
    #[error("negative route flow {flow} for class {class}, route {route}")]
    NegativeRouteFlow { class: usize, route: usize, flow: f64 },
    #[error(
        "class {class} flows sum to {sum}, demand is {demand} \
         (conservation violated beyond 1e-9 relative)"
    )]
    FlowConservation { class: usize, sum: f64, demand: f64 },
    #[error("{file} line {line}: {message}")]
    Parse { file: &'static str, line: usize, message: String },
    #[error("no route from node {origin} to node {destination}")]
    NoRoute { origin: usize, destination: usize },
    #[error("route enumeration exceeded the search budget for OD ({origin}, {destination})")]
    EnumerationBudget { origin: usize, destination: usize },
    #[error("unknown builtin network `{0}`")]
    UnknownBuiltin(String),
    #[error("builtin network `{name}` is malformed: {message}")]
    BadBuiltin { name: &'static str, message: String },
}

/// A directed link with a BPR volume-delay function and a fixed toll.
///
/// Travel time at flow `x` is `free_flow_time · (1 + bpr_alpha · (x/capacity)^bpr_beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub id: LinkId,
    /// Tail node (1-based, as in the data files).
    pub tail: usize,
    /// Head node (1-based).
    pub head: usize,
    /// Free-flow travel time `u_0`, minutes.
    pub free_flow_time: f64,
    /// Practical capacity `v`, flow units.
    pub capacity: f64,
    pub bpr_alpha: f64,
    pub bpr_beta: f64,
    /// Fixed monetary charge for traversing the link, currency units.
    pub toll: f64,
}

impl Link {
    /// BPR travel time at flow `x`; rejects negative flow.
    pub fn travel_time(&self, x: f64) -> Result<f64, NetworkError> {
        if x < 0.0 {
            return Err(NetworkError::NegativeFlow { link: self.id, flow: x });
        }
        Ok(self.travel_time_at(x))
    }

    /// Unchecked BPR evaluation, used by hot loops after validation.
    pub(crate) fn travel_time_at(&self, x: f64) -> f64 {
        let r = x / self.capacity;
        let factor = if self.bpr_beta == 4.0 {
            let r2 = r * r;
            r2 * r2
        } else {
            r.powf(self.bpr_beta)
        };
        self.free_flow_time * (1.0 + self.bpr_alpha * factor)
    }
}

/// An ordered, loop-free chain of links from an origin node to a destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub origin: usize,
    pub destination: usize,
    pub links: Vec<LinkId>,
}

impl Route {
    /// Sum of tolls along the route.
    pub fn toll(&self, net: &Network) -> f64 {
        self.links.iter().map(|&l| net.links[l].toll).sum()
    }

    /// Sum of the given per-link times along the route, in path order.
    pub fn time(&self, link_times: &[f64]) -> f64 {
        self.links.iter().map(|&l| link_times[l]).sum()
    }
}

/// One traveler class: an OD pair with positive demand and a frozen route set.
///
/// Route sets may be empty for networks whose commuting options are defined
/// outside the graph (the multimodal scenario owns its own option incidence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelerClass {
    pub name: String,
    pub origin: usize,
    pub destination: usize,
    pub demand: f64,
    pub routes: Vec<Route>,
}

/// An immutable road network: nodes are `1..=num_nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub num_nodes: usize,
    pub links: Vec<Link>,
    pub classes: Vec<TravelerClass>,
}

impl Network {
    /// Checks every structural invariant: link numbering, node ranges,
    /// positive capacities, nonnegative parameters, positive demands, and
    /// route chains that connect their origin to their destination without
    /// repeating a link.
    pub fn validate(&self) -> Result<(), NetworkError> {
        for (i, link) in self.links.iter().enumerate() {
            if link.id != i {
                return Err(NetworkError::MisnumberedLink { link: i, id: link.id });
            }
            for node in [link.tail, link.head] {
                if node == 0 || node > self.num_nodes {
                    return Err(NetworkError::NodeOutOfRange {
                        link: i,
                        node,
                        num_nodes: self.num_nodes,
                    });
                }
            }
            if link.tail == link.head {
                return Err(NetworkError::SelfLoop { link: i, node: link.tail });
            }
            if !(link.capacity > 0.0) {
                return Err(NetworkError::BadCapacity { link: i, capacity: link.capacity });
            }
            for (what, value) in [
                ("free-flow time", link.free_flow_time),
                ("BPR alpha", link.bpr_alpha),
                ("BPR beta", link.bpr_beta),
                ("toll", link.toll),
            ] {
                if !(value >= 0.0) {
                    return Err(NetworkError::NegativeParameter { link: i, what, value });
                }
            }
        }
        for (c, class) in self.classes.iter().enumerate() {
            if !(class.demand > 0.0) {
                return Err(NetworkError::BadDemand { class: c, demand: class.demand });
            }
            for (r, route) in class.routes.iter().enumerate() {
                self.validate_route(c, r, route)?;
            }
        }
        Ok(())
    }

    fn validate_route(&self, c: usize, r: usize, route: &Route) -> Result<(), NetworkError> {
        let mut seen = vec![false; self.links.len()];
        let mut at = route.origin;
        for (pos, &l) in route.links.iter().enumerate() {
            let link = self
                .links
                .get(l)
                .ok_or(NetworkError::UnknownLink { class: c, route: r, link: l })?;
            if seen[l] {
                return Err(NetworkError::RepeatedLink { class: c, route: r, link: l });
            }
            seen[l] = true;
            if link.tail != at {
                return Err(NetworkError::BrokenRoute { class: c, route: r, position: pos });
            }
            at = link.head;
        }
        if route.links.is_empty() || at != route.destination {
            return Err(NetworkError::BrokenRoute {
                class: c,
                route: r,
                position: route.links.len(),
            });
        }
        Ok(())
    }
}

/// Per-class route flows: `per_class[m][k]` is class `m`'s flow on its route `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub per_class: Vec<Vec<f64>>,
}

impl FlowProfile {
    /// The profile spreading each class's demand uniformly over its routes.
    pub fn uniform(net: &Network) -> FlowProfile {
        let per_class = net
            .classes
            .iter()
            .map(|class| {
                let n = class.routes.len().max(1);
                vec![class.demand / n as f64; class.routes.len()]
            })
            .collect();
        FlowProfile { per_class }
    }

    /// Shape, nonnegativity, and conservation (1e-9 relative) checks against
    /// a network.
    pub fn validate_for(&self, net: &Network) -> Result<(), NetworkError> {
        self.validate_shape(net)?;
        for (c, (flows, class)) in self.per_class.iter().zip(&net.classes).enumerate() {
            let sum: f64 = flows.iter().sum();
            if (sum - class.demand).abs() > 1e-9 * class.demand {
                return Err(NetworkError::FlowConservation {
                    class: c,
                    sum,
                    demand: class.demand,
                });
            }
        }
        Ok(())
    }

    fn validate_shape(&self, net: &Network) -> Result<(), NetworkError> {
        if self.per_class.len() != net.classes.len() {
            return Err(NetworkError::ClassCountMismatch {
                got: self.per_class.len(),
                want: net.classes.len(),
            });
        }
        for (c, (flows, class)) in self.per_class.iter().zip(&net.classes).enumerate() {
            if flows.len() != class.routes.len() {
                return Err(NetworkError::RouteCountMismatch {
                    class: c,
                    got: flows.len(),
                    want: class.routes.len(),
                });
            }
            for (r, &f) in flows.iter().enumerate() {
                if !(f >= 0.0) {
                    return Err(NetworkError::NegativeRouteFlow { class: c, route: r, flow: f });
                }
            }
        }
        Ok(())
    }
}

/// Aggregates per-class route flows onto links:
/// `x_a = Σ_m Σ_k Λ_{a,k} · f_{m,k}`.
///
/// Accumulation order is fixed (classes, then routes, then links in path
/// order) so results are identical across execution modes.
pub fn load_link_flows(net: &Network, flows: &FlowProfile) -> Result<Vec<f64>, NetworkError> {
    flows.validate_shape(net)?;
    let mut x = vec![0.0; net.links.len()];
    for (c, (class_flows, class)) in flows.per_class.iter().zip(&net.classes).enumerate() {
        for (r, (&f, route)) in class_flows.iter().zip(&class.routes).enumerate() {
            for &l in &route.links {
                if l >= x.len() {
                    return Err(NetworkError::UnknownLink { class: c, route: r, link: l });
                }
                x[l] += f;
            }
        }
    }
    Ok(x)
}

/// BPR travel time of every link at the given link flows.
pub fn link_travel_times(
    net: &Network,
    link_flows: &[f64],
    par: Parallelism,
) -> Result<Vec<f64>, NetworkError> {
    debug_assert_eq!(link_flows.len(), net.links.len());
    for (l, &x) in link_flows.iter().enumerate() {
        if !(x >= 0.0) {
            return Err(NetworkError::NegativeFlow { link: l, flow: x });
        }
    }
    Ok(par.map_indexed(net.links.len(), |l| net.links[l].travel_time_at(link_flows[l])))
}

/// Travel time of every class's routes at the given route flows:
/// `c_{m,k} = Σ_a Λ_{a,k} · link_travel_time(a, x_a)` with `x` from
/// [`load_link_flows`]. Per-route sums run in path order.
pub fn route_costs(
    net: &Network,
    flows: &FlowProfile,
    par: Parallelism,
) -> Result<Vec<Vec<f64>>, NetworkError> {
    let x = load_link_flows(net, flows)?;
    let times = link_travel_times(net, &x, par)?;
    Ok(par.map_indexed(net.classes.len(), |c| {
        net.classes[c].routes.iter().map(|route| route.time(&times)).collect()
    }))
}

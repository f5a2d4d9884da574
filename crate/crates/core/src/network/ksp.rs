//! Loopless route enumeration: best-first search over partial paths ordered
//! by free-flow time, with lexicographic link-sequence tie-breaking, so the
//! same network always yields the same route sets in the same order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{LinkId, Network, NetworkError, Route};

/// Abort threshold for pathological enumeration requests.
const POP_BUDGET: usize = 5_000_000;

struct Partial {
    cost: f64,
    links: Vec<LinkId>,
    node: usize,
    visited: Vec<bool>,
}

impl PartialEq for Partial {
    fn eq(&self, other: &Self) -> bool {
        self.cost.total_cmp(&other.cost) == Ordering::Equal && self.links == other.links
    }
}
impl Eq for Partial {}

impl PartialOrd for Partial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Partial {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert so the cheapest (then
        // lexicographically smallest) partial path pops first.
        self.cost
            .total_cmp(&other.cost)
            .then_with(|| self.links.cmp(&other.links))
            .reverse()
    }
}

/// Returns up to `k` loopless routes from `origin` to `destination` with the
/// smallest free-flow times, in nondecreasing cost order; ties are broken by
/// the lexicographic order of the link-id sequence. Returns fewer than `k`
/// routes when fewer exist; it is an error only if none exist.
pub fn k_shortest_routes(
    net: &Network,
    origin: usize,
    destination: usize,
    k: usize,
) -> Result<Vec<Route>, NetworkError> {
    if k == 0 || origin == destination {
        return Err(NetworkError::NoRoute { origin, destination });
    }
    let mut out_links: Vec<Vec<LinkId>> = vec![Vec::new(); net.num_nodes + 1];
    for link in &net.links {
        out_links[link.tail].push(link.id);
    }

    let mut visited = vec![false; net.num_nodes + 1];
    visited[origin] = true;
    let mut heap = BinaryHeap::new();
    heap.push(Partial { cost: 0.0, links: Vec::new(), node: origin, visited });

    let mut found = Vec::new();
    let mut pops = 0usize;
    while let Some(partial) = heap.pop() {
        pops += 1;
        if pops > POP_BUDGET {
            return Err(NetworkError::EnumerationBudget { origin, destination });
        }
        if partial.node == destination {
            found.push(Route { origin, destination, links: partial.links });
            if found.len() == k {
                break;
            }
            continue;
        }
        for &l in &out_links[partial.node] {
            let link = &net.links[l];
            if partial.visited[link.head] {
                continue;
            }
            let mut links = partial.links.clone();
            links.push(l);
            let mut visited = partial.visited.clone();
            visited[link.head] = true;
            heap.push(Partial {
                cost: partial.cost + link.free_flow_time,
                links,
                node: link.head,
                visited,
            });
        }
    }

    if found.is_empty() {
        return Err(NetworkError::NoRoute { origin, destination });
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{load_tntp, Link, TravelerClass};

    fn parallel_net(ffts: &[f64]) -> Network {
        let links = ffts
            .iter()
            .enumerate()
            .map(|(i, &u0)| Link {
                id: i,
                tail: 1,
                head: 2,
                free_flow_time: u0,
                capacity: 8.0,
                bpr_alpha: 0.15,
                bpr_beta: 4.0,
                toll: 0.0,
            })
            .collect();
        Network {
            num_nodes: 2,
            links,
            classes: vec![TravelerClass {
                name: "commuter".into(),
                origin: 1,
                destination: 2,
                demand: 10.0,
                routes: Vec::new(),
            }],
        }
    }

    #[test]
    fn picks_smallest_free_flow_links_first() {
        let net = parallel_net(&[45.0, 30.0, 37.0]);
        let routes = k_shortest_routes(&net, 1, 2, 2).unwrap();
        assert_eq!(routes.len(), 2);
        assert_eq!(routes[0].links, vec![1]);
        assert_eq!(routes[1].links, vec![2]);
    }

    #[test]
    fn equal_costs_break_ties_lexicographically() {
        let net = parallel_net(&[30.0, 30.0, 30.0]);
        let routes = k_shortest_routes(&net, 1, 2, 3).unwrap();
        let seqs: Vec<Vec<usize>> = routes.into_iter().map(|r| r.links).collect();
        assert_eq!(seqs, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn returns_all_routes_when_fewer_than_k_exist() {
        let net = parallel_net(&[45.0, 30.0]);
        let routes = k_shortest_routes(&net, 1, 2, 10).unwrap();
        assert_eq!(routes.len(), 2);
    }

    #[test]
    fn errors_when_no_route_exists() {
        let net = parallel_net(&[45.0]);
        assert!(matches!(
            k_shortest_routes(&net, 2, 1, 1),
            Err(NetworkError::NoRoute { origin: 2, destination: 1 })
        ));
    }

    #[test]
    fn three_node_instance_has_three_routes_in_cost_order() {
        let net = load_tntp(
            include_str!("data/three_node_net.tntp"),
            include_str!("data/three_node_trips.tntp"),
        )
        .unwrap();
        let routes = k_shortest_routes(&net, 1, 3, usize::MAX).unwrap();
        let seqs: Vec<Vec<usize>> = routes.into_iter().map(|r| r.links).collect();
        assert_eq!(seqs, vec![vec![0, 3], vec![0, 2], vec![1]]);
    }

    #[test]
    fn routes_are_loopless_and_chain_correctly() {
        let net = load_tntp(
            include_str!("data/hearn_net.tntp"),
            include_str!("data/hearn_trips.tntp"),
        )
        .unwrap();
        let routes = k_shortest_routes(&net, 1, 4, usize::MAX).unwrap();
        assert!(!routes.is_empty());
        let mut check = net.clone();
        check.classes[0].routes = routes.clone();
        check.classes[0].origin = 1;
        check.classes[0].destination = 4;
        check.validate().unwrap();
        // Nondecreasing free-flow cost along the enumeration.
        let ffts: Vec<f64> = routes
            .iter()
            .map(|r| r.links.iter().map(|&l| net.links[l].free_flow_time).sum())
            .collect();
        assert!(ffts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sioux_falls_od_1_20_yields_five_distinct_paths() {
        let net = load_tntp(
            include_str!("data/siouxfalls_net.tntp"),
            include_str!("data/siouxfalls_trips.tntp"),
        )
        .unwrap();
        let routes = k_shortest_routes(&net, 1, 20, 5).unwrap();
        assert_eq!(routes.len(), 5);
        let ffts: Vec<f64> = routes
            .iter()
            .map(|r| r.links.iter().map(|&l| net.links[l].free_flow_time).sum())
            .collect();
        assert!(ffts.windows(2).all(|w| w[0] <= w[1]));
        for pair in routes.windows(2) {
            assert_ne!(pair[0].links, pair[1].links);
        }
    }
}

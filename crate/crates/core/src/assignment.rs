//! Equilibrium metrics and the classical averaging solver used as benchmark
//! oracles: relative gap, all-or-nothing loading, successive-averages
//! iteration (time or generalized cost), and value-of-time calibration for
//! two-route tolled instances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Parallelism;
use crate::network::{route_costs, FlowProfile, Network, NetworkError};

#[derive(Debug, Error)]
pub enum AssignmentError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("class {class} has an empty route set")]
    EmptyRouteSet { class: usize },
    #[error("costs cover {got} classes, network has {want}")]
    CostShapeMismatch { got: usize, want: usize },
    #[error("class {class} costs cover {got} routes, class has {want}")]
    CostArityMismatch { class: usize, got: usize, want: usize },
    #[error("total cost is zero (no demand), relative gap undefined")]
    ZeroTotalCost,
    #[error("invalid solver parameters: {0}")]
    BadParams(String),
    #[error("value-of-time must be positive and finite, got {0}")]
    NonPositiveLambda(f64),
    #[error("calibration failed: {0}")]
    Calibration(String),
}

/// Converts travel time to money for generalized-cost assignment:
/// route cost is `vot_lambda · time + toll`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedCostSpec {
    vot_lambda: f64,
}

impl GeneralizedCostSpec {
    pub fn new(vot_lambda: f64) -> Result<Self, AssignmentError> {
        if !(vot_lambda > 0.0 && vot_lambda.is_finite()) {
            return Err(AssignmentError::NonPositiveLambda(vot_lambda));
        }
        Ok(GeneralizedCostSpec { vot_lambda })
    }

    pub fn vot_lambda(&self) -> f64 {
        self.vot_lambda
    }
}

/// Relative-gap evaluation at one flow profile.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// δ(f) = −⟨c(f), f′−f⟩ / ⟨c(f), f⟩, dimensionless.
    pub relative_gap: f64,
    /// ⟨c(f), f⟩.
    pub total_cost: f64,
    /// Per-class minimum route cost (the equilibrium constant when δ = 0).
    pub od_min_costs: Vec<f64>,
    /// The minimizing all-or-nothing profile f′.
    pub aon_profile: FlowProfile,
}

/// Outcome of [`solve_ue`]: the best iterate found and its gap.
#[derive(Debug, Clone, PartialEq)]
pub struct UeSolution {
    pub flows: FlowProfile,
    pub relative_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_cost_shape(net: &Network, costs: &[Vec<f64>]) -> Result<(), AssignmentError> {
    if costs.len() != net.classes.len() {
        return Err(AssignmentError::CostShapeMismatch {
            got: costs.len(),
            want: net.classes.len(),
        });
    }
    for (c, (class_costs, class)) in costs.iter().zip(&net.classes).enumerate() {
        if class.routes.is_empty() {
            return Err(AssignmentError::EmptyRouteSet { class: c });
        }
        if class_costs.len() != class.routes.len() {
            return Err(AssignmentError::CostArityMismatch {
                class: c,
                got: class_costs.len(),
                want: class.routes.len(),
            });
        }
    }
    Ok(())
}

/// Index of the smallest cost, first one on ties.
fn argmin(costs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate().skip(1) {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

/// Puts each class's entire demand on its minimum-cost route (ties break to
/// the lowest route index).
pub fn all_or_nothing(
    net: &Network,
    costs: &[Vec<f64>],
) -> Result<FlowProfile, AssignmentError> {
    check_cost_shape(net, costs)?;
    let per_class = net
        .classes
        .iter()
        .zip(costs)
        .map(|(class, class_costs)| {
            let mut flows = vec![0.0; class.routes.len()];
            flows[argmin(class_costs)] = class.demand;
            flows
        })
        .collect();
    Ok(FlowProfile { per_class })
}

/// Per-class per-route generalized costs: `λ·time + toll` when a spec is
/// given, plain travel time otherwise.
pub(crate) fn generalized_route_costs(
    net: &Network,
    flows: &FlowProfile,
    spec: Option<&GeneralizedCostSpec>,
    par: Parallelism,
) -> Result<Vec<Vec<f64>>, AssignmentError> {
    let times = route_costs(net, flows, par)?;
    match spec {
        None => Ok(times),
        Some(spec) => {
            let lambda = spec.vot_lambda;
            Ok(net
                .classes
                .iter()
                .zip(times)
                .map(|(class, class_times)| {
                    class
                        .routes
                        .iter()
                        .zip(class_times)
                        .map(|(route, t)| lambda * t + route.toll(net))
                        .collect()
                })
                .collect())
        }
    }
}

fn gap_from_costs(
    net: &Network,
    flows: &FlowProfile,
    costs: &[Vec<f64>],
) -> Result<GapReport, AssignmentError> {
    check_cost_shape(net, costs)?;
    let mut total = 0.0;
    let mut aon_total = 0.0;
    let mut od_min_costs = Vec::with_capacity(net.classes.len());
    for ((class, class_costs), class_flows) in
        net.classes.iter().zip(costs).zip(&flows.per_class)
    {
        let mut dot = 0.0;
        for (&c, &f) in class_costs.iter().zip(class_flows) {
            dot += c * f;
        }
        total += dot;
        let b = class_costs[argmin(class_costs)];
        od_min_costs.push(b);
        aon_total += class.demand * b;
    }
    if !(total > 0.0) {
        return Err(AssignmentError::ZeroTotalCost);
    }
    let aon_profile = all_or_nothing(net, costs)?;
    Ok(GapReport {
        relative_gap: (total - aon_total) / total,
        total_cost: total,
        od_min_costs,
        aon_profile,
    })
}

/// Relative gap δ(f) at the given feasible flows, under travel-time costs.
/// δ = 0 exactly when the flows satisfy the equilibrium condition.
pub fn relative_gap(
    net: &Network,
    flows: &FlowProfile,
    par: Parallelism,
) -> Result<GapReport, AssignmentError> {
    flows.validate_for(net)?;
    let costs = route_costs(net, flows, par)?;
    gap_from_costs(net, flows, &costs)
}

/// Flattened route structure for the solver's inner loop.
struct Flat {
    /// Route index range per class: routes of class `c` are
    /// `class_ptr[c]..class_ptr[c+1]`.
    class_ptr: Vec<usize>,
    /// Link index range per route into `link_idx`.
    route_ptr: Vec<usize>,
    link_idx: Vec<usize>,
    route_toll: Vec<f64>,
    demand: Vec<f64>,
}

impl Flat {
    fn build(net: &Network) -> Result<Flat, AssignmentError> {
        let mut class_ptr = Vec::with_capacity(net.classes.len() + 1);
        let mut route_ptr = vec![0usize];
        let mut link_idx = Vec::new();
        let mut route_toll = Vec::new();
        class_ptr.push(0);
        for (c, class) in net.classes.iter().enumerate() {
            if class.routes.is_empty() {
                return Err(AssignmentError::EmptyRouteSet { class: c });
            }
            for route in &class.routes {
                link_idx.extend_from_slice(&route.links);
                route_ptr.push(link_idx.len());
                route_toll.push(route.toll(net));
            }
            class_ptr.push(route_ptr.len() - 1);
        }
        Ok(Flat {
            class_ptr,
            route_ptr,
            link_idx,
            route_toll,
            demand: net.classes.iter().map(|c| c.demand).collect(),
        })
    }
}

/// Iterates `f^{t+1} = (1−η^t)·f^t + η^t·f′` from the uniform profile with
/// the averaging schedule `η^t = 1/(t+2)`, where `f′` is the all-or-nothing
/// profile at the current costs (`λ·time + toll` when `spec` is given).
/// Stops as soon as the relative gap reaches `tol`; otherwise returns the
/// best iterate seen, flagged as not converged.
pub fn solve_ue(
    net: &Network,
    spec: Option<&GeneralizedCostSpec>,
    max_iters: usize,
    tol: f64,
    par: Parallelism,
) -> Result<UeSolution, AssignmentError> {
    if max_iters < 1 {
        return Err(AssignmentError::BadParams("max_iters must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(AssignmentError::BadParams(format!("tol must be positive, got {tol}")));
    }
    let _ = par; // the inner loop is sequential; parallel callers solve whole instances concurrently
    let flat = Flat::build(net)?;
    let num_links = net.links.len();
    let num_routes = flat.route_toll.len();
    let num_classes = net.classes.len();
    let lambda = spec.map(|s| s.vot_lambda);

    // Uniform start: each class spreads its demand evenly over its routes.
    let mut f = Vec::with_capacity(num_routes);
    for c in 0..num_classes {
        let (lo, hi) = (flat.class_ptr[c], flat.class_ptr[c + 1]);
        f.extend(std::iter::repeat(flat.demand[c] / (hi - lo) as f64).take(hi - lo));
    }

    let mut x = vec![0.0f64; num_links];
    let mut times = vec![0.0f64; num_links];
    let mut costs = vec![0.0f64; num_routes];
    let mut best_gap = f64::INFINITY;
    let mut best_f = f.clone();

    for t in 0..max_iters {
        // Load link flows from route flows.
        x.fill(0.0);
        for r in 0..num_routes {
            let fr = f[r];
            if fr != 0.0 {
                for &l in &flat.link_idx[flat.route_ptr[r]..flat.route_ptr[r + 1]] {
                    x[l] += fr;
                }
            }
        }
        for l in 0..num_links {
            times[l] = net.links[l].travel_time_at(x[l]);
        }
        for r in 0..num_routes {
            let mut time = 0.0;
            for &l in &flat.link_idx[flat.route_ptr[r]..flat.route_ptr[r + 1]] {
                time += times[l];
            }
            costs[r] = match lambda {
                Some(lambda) => lambda * time + flat.route_toll[r],
                None => time,
            };
        }

        let mut total = 0.0;
        let mut aon_total = 0.0;
        let mut chosen = Vec::with_capacity(num_classes);
        for c in 0..num_classes {
            let (lo, hi) = (flat.class_ptr[c], flat.class_ptr[c + 1]);
            let mut best = lo;
            let mut dot = 0.0;
            for r in lo..hi {
                dot += costs[r] * f[r];
                if costs[r] < costs[best] {
                    best = r;
                }
            }
            total += dot;
            aon_total += flat.demand[c] * costs[best];
            chosen.push(best);
        }
        if !(total > 0.0) {
            return Err(AssignmentError::ZeroTotalCost);
        }
        let gap = (total - aon_total) / total;
        if gap < best_gap {
            best_gap = gap;
            best_f.copy_from_slice(&f);
        }
        if gap <= tol {
            return Ok(UeSolution {
                flows: unflatten(&flat, &f),
                relative_gap: gap,
                iterations: t,
                converged: true,
            });
        }

        let eta = 1.0 / (t as f64 + 2.0);
        let keep = 1.0 - eta;
        for r in 0..num_routes {
            f[r] *= keep;
        }
        for (c, &r) in chosen.iter().enumerate() {
            f[r] += eta * flat.demand[c];
        }
    }

    Ok(UeSolution {
        flows: unflatten(&flat, &best_f),
        relative_gap: best_gap,
        iterations: max_iters,
        converged: false,
    })
}

fn unflatten(flat: &Flat, f: &[f64]) -> FlowProfile {
    let per_class = (0..flat.demand.len())
        .map(|c| f[flat.class_ptr[c]..flat.class_ptr[c + 1]].to_vec())
        .collect();
    FlowProfile { per_class }
}

/// Solves `λ·t1(x1) + π1 = λ·t2(x2) + π2` at `x = d·target_shares` on a
/// two-route instance and verifies `λ > 0`. The returned λ makes the two
/// routes indifferent in generalized cost exactly at the target split.
pub fn calibrate_vot(
    net: &Network,
    target_shares: (f64, f64),
) -> Result<f64, AssignmentError> {
    if net.classes.len() != 1 {
        return Err(AssignmentError::Calibration(format!(
            "expected a single traveler class, found {}",
            net.classes.len()
        )));
    }
    let class = &net.classes[0];
    if class.routes.len() != 2 {
        return Err(AssignmentError::Calibration(format!(
            "expected exactly two routes, found {}",
            class.routes.len()
        )));
    }
    let (s1, s2) = target_shares;
    if !(s1 > 0.0 && s2 > 0.0) {
        return Err(AssignmentError::Calibration(format!(
            "target shares must be strictly interior, got ({s1}, {s2})"
        )));
    }
    if (s1 + s2 - 1.0).abs() > 1e-9 {
        return Err(AssignmentError::Calibration(format!(
            "target shares must sum to 1, got {}",
            s1 + s2
        )));
    }
    let flows = FlowProfile {
        per_class: vec![vec![class.demand * s1, class.demand * s2]],
    };
    let times = route_costs(net, &flows, Parallelism::Sequential)?;
    let (t1, t2) = (times[0][0], times[0][1]);
    let (pi1, pi2) = (class.routes[0].toll(net), class.routes[1].toll(net));
    if t1 == t2 {
        return Err(AssignmentError::Calibration(
            "route times are equal at the target flows; λ is undefined".into(),
        ));
    }
    let lambda = (pi2 - pi1) / (t1 - t2);
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(AssignmentError::Calibration(format!(
            "calibrated λ = {lambda} is not positive"
        )));
    }
    Ok(lambda)
}

/// Largest relative deviation of a used route's cost above its class minimum
/// (`f > used_tol` counts as used). Diagnostic for the equilibrium condition.
pub fn max_used_route_excess(
    net: &Network,
    flows: &FlowProfile,
    spec: Option<&GeneralizedCostSpec>,
    used_tol: f64,
    par: Parallelism,
) -> Result<f64, AssignmentError> {
    let costs = generalized_route_costs(net, flows, spec, par)?;
    check_cost_shape(net, &costs)?;
    let mut worst: f64 = 0.0;
    for (class_costs, class_flows) in costs.iter().zip(&flows.per_class) {
        let b = class_costs[argmin(class_costs)];
        for (&c, &f) in class_costs.iter().zip(class_flows) {
            if f > used_tol {
                worst = worst.max((c - b) / b);
            }
        }
    }
    Ok(worst)
}

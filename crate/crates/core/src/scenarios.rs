//! Scenario families bound to their networks: classic route choice, tolled
//! parallel routes, and the three-option multimodal commute (transit,
//! driving, park-and-ride). Computes what each traveler class experiences on
//! a day — times, money costs, congestion ratios, transit crowding — from
//! the day's option flows.

use thiserror::Error;

use crate::exec::Parallelism;
use crate::network::{
    builtin_network, route_costs, FlowProfile, LinkId, Network, NetworkError,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("flows cover {got} classes, scenario has {want}")]
    ClassCountMismatch { got: usize, want: usize },
    #[error("class {class} flows cover {got} options, scenario has {want}")]
    OptionCountMismatch { class: usize, got: usize, want: usize },
    #[error("class {class} option {option} has negative flow {flow}")]
    NegativeFlow { class: usize, option: usize, flow: f64 },
    #[error("class {class} flows sum to {got}, demand is {want}")]
    FlowConservation { class: usize, got: f64, want: f64 },
}

/// Seated capacity of each transit leg, in the same unit as class demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitSeats {
    pub bus: f64,
    pub line1: f64,
    pub line2: f64,
}

/// Fixed time components and pricing of the multimodal options, plus which
/// road links congest.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalLayout {
    /// Total fixed transit time: walk, wait, bus, transfers, two metro legs.
    pub transit_minutes: f64,
    /// Walk from the downtown parking lot to the workplace.
    pub driving_walk_minutes: f64,
    /// Station walk/wait, direct metro leg, and final walk for park-and-ride.
    pub park_ride_fixed_minutes: f64,
    pub city_link: LinkId,
    pub highway_link: LinkId,
    pub park_ride_link: LinkId,
    /// Daily money cost per option: transit, driving, park-and-ride.
    pub money: [f64; 3],
    pub seats: TransitSeats,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioDetail {
    /// Route choice with travel time as the only cost.
    Classic,
    /// Parallel routes where some carry a fixed money toll.
    Tolling { with_road3: bool },
    /// Transit / driving / park-and-ride mode choice.
    Multimodal(MultimodalLayout),
}

/// A named scenario: a network plus the option structure layered on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub network: Network,
    pub detail: ScenarioDetail,
}

pub const MULTIMODAL_OPTION_COUNT: usize = 3;

impl ScenarioSpec {
    /// Number of commuting options class `class` chooses among.
    pub fn option_count(&self, class: usize) -> usize {
        match self.detail {
            ScenarioDetail::Classic | ScenarioDetail::Tolling { .. } => {
                self.network.classes[class].routes.len()
            }
            ScenarioDetail::Multimodal(_) => MULTIMODAL_OPTION_COUNT,
        }
    }

    /// Whether option flows are route flows, making the equilibrium gap
    /// well-defined under travel-time costs.
    pub fn has_route_gap(&self) -> bool {
        matches!(
            self.detail,
            ScenarioDetail::Classic | ScenarioDetail::Tolling { .. }
        )
    }

    /// Validates that `flows` has one nonnegative vector per class with the
    /// scenario's option arity, each summing to the class demand.
    pub fn validate_option_flows(&self, flows: &FlowProfile) -> Result<(), ScenarioError> {
        let classes = &self.network.classes;
        if flows.per_class.len() != classes.len() {
            return Err(ScenarioError::ClassCountMismatch {
                got: flows.per_class.len(),
                want: classes.len(),
            });
        }
        for (c, (class_flows, class)) in flows.per_class.iter().zip(classes).enumerate() {
            let want = self.option_count(c);
            if class_flows.len() != want {
                return Err(ScenarioError::OptionCountMismatch {
                    class: c,
                    got: class_flows.len(),
                    want,
                });
            }
            let mut sum = 0.0;
            for (option, &flow) in class_flows.iter().enumerate() {
                if !(flow >= 0.0) {
                    return Err(ScenarioError::NegativeFlow { class: c, option, flow });
                }
                sum += flow;
            }
            if (sum - class.demand).abs() > 1e-9 * class.demand.max(1.0) {
                return Err(ScenarioError::FlowConservation {
                    class: c,
                    got: sum,
                    want: class.demand,
                });
            }
        }
        Ok(())
    }
}

/// Transit-leg crowding: how many riders share how many seats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crowding {
    pub riders: f64,
    pub seats: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrowdingLevel {
    SeatsForEveryone,
    SomeStanding,
    HeavilyCrowded,
}

impl Crowding {
    pub fn occupancy(&self) -> f64 {
        if self.riders <= 0.0 {
            0.0
        } else {
            self.riders / self.seats
        }
    }

    /// Share of riders left standing, rounded to whole percent.
    pub fn standing_percent(&self) -> u32 {
        if self.occupancy() <= 1.0 {
            0
        } else {
            (100.0 * (1.0 - self.seats / self.riders)).round() as u32
        }
    }

    pub fn level(&self) -> CrowdingLevel {
        let occ = self.occupancy();
        if occ <= 1.0 {
            CrowdingLevel::SeatsForEveryone
        } else if occ <= 1.5 {
            CrowdingLevel::SomeStanding
        } else {
            CrowdingLevel::HeavilyCrowded
        }
    }
}

/// Extra observations attached to an option beyond its totals.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperienceDetail {
    /// Classic route: the time is the whole story.
    RouteTime,
    /// Tolled route: the toll shown alongside the time.
    Tolled { toll: f64 },
    /// Transit: crowding on the bus and both metro lines.
    Transit { bus: Crowding, line1: Crowding, line2: Crowding },
    /// Driving: in-vehicle time, its highway share, and the highway's ratio
    /// of experienced to free-flow time.
    Driving { drive_minutes: f64, highway_minutes: f64, congestion_ratio: f64 },
    /// Park-and-ride: the drive to the station and the metro leg's crowding.
    ParkRide { drive_minutes: f64, line2: Crowding },
}

/// What one class experiences on one option for one day.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionExperience {
    /// Full door-to-door time, exact (not rounded for display).
    pub time_minutes: f64,
    /// Money spent for the day on this option.
    pub money: f64,
    pub detail: ExperienceDetail,
}

/// The numeric value a traveler sees once a time is printed to one decimal
/// place. All behavioral decisions downstream consume these reported values,
/// never the exact ones.
pub fn reported_minutes(minutes: f64) -> f64 {
    format!("{minutes:.1}").parse().expect("1-decimal format is valid f64")
}

fn multimodal_layout() -> MultimodalLayout {
    MultimodalLayout {
        transit_minutes: 58.0,
        driving_walk_minutes: 3.0,
        park_ride_fixed_minutes: 16.0,
        city_link: 0,
        highway_link: 1,
        park_ride_link: 2,
        money: [8.0, 44.0, 35.0],
        seats: TransitSeats { bus: 5.0, line1: 3.75, line2: 7.5 },
    }
}

pub fn scenario_catalog() -> Vec<&'static str> {
    vec![
        "classic_3n4l",
        "classic_hearn",
        "classic_sioux_falls",
        "tolling_A_with3",
        "tolling_A_without3",
        "tolling_B_with3",
        "tolling_B_without3",
        "tolling_C_with3",
        "tolling_C_without3",
        "multimodal",
    ]
}

/// Builds a catalog scenario by name.
pub fn scenario(name: &str) -> Result<ScenarioSpec, ScenarioError> {
    let (network_name, detail) = match name {
        "classic_3n4l" => ("3n4l", ScenarioDetail::Classic),
        "classic_hearn" => ("hearn", ScenarioDetail::Classic),
        "classic_sioux_falls" => ("sioux_falls", ScenarioDetail::Classic),
        "tolling_A_with3" | "tolling_B_with3" | "tolling_C_with3" => {
            (name, ScenarioDetail::Tolling { with_road3: true })
        }
        "tolling_A_without3" | "tolling_B_without3" | "tolling_C_without3" => {
            (name, ScenarioDetail::Tolling { with_road3: false })
        }
        "multimodal" => ("multimodal", ScenarioDetail::Multimodal(multimodal_layout())),
        _ => return Err(ScenarioError::UnknownScenario(name.to_string())),
    };
    Ok(ScenarioSpec {
        name: name.to_string(),
        network: builtin_network(network_name)?,
        detail,
    })
}

/// Computes each class's per-option experience from the day's option flows.
/// Pure in its inputs: the same flows always produce the same experiences.
pub fn compute_experiences(
    spec: &ScenarioSpec,
    flows: &FlowProfile,
) -> Result<Vec<Vec<OptionExperience>>, ScenarioError> {
    spec.validate_option_flows(flows)?;
    match &spec.detail {
        ScenarioDetail::Classic => {
            let times = route_costs(&spec.network, flows, Parallelism::Sequential)?;
            Ok(times
                .into_iter()
                .map(|class_times| {
                    class_times
                        .into_iter()
                        .map(|t| OptionExperience {
                            time_minutes: t,
                            money: 0.0,
                            detail: ExperienceDetail::RouteTime,
                        })
                        .collect()
                })
                .collect())
        }
        ScenarioDetail::Tolling { .. } => {
            let times = route_costs(&spec.network, flows, Parallelism::Sequential)?;
            Ok(spec
                .network
                .classes
                .iter()
                .zip(times)
                .map(|(class, class_times)| {
                    class
                        .routes
                        .iter()
                        .zip(class_times)
                        .map(|(route, t)| OptionExperience {
                            time_minutes: t,
                            money: route.toll(&spec.network),
                            detail: ExperienceDetail::Tolled { toll: route.toll(&spec.network) },
                        })
                        .collect()
                })
                .collect())
        }
        ScenarioDetail::Multimodal(layout) => multimodal_experiences(spec, layout, flows),
    }
}

fn multimodal_experiences(
    spec: &ScenarioSpec,
    layout: &MultimodalLayout,
    flows: &FlowProfile,
) -> Result<Vec<Vec<OptionExperience>>, ScenarioError> {
    let mut transit_riders = 0.0;
    let mut drivers = 0.0;
    let mut park_riders = 0.0;
    for class_flows in &flows.per_class {
        transit_riders += class_flows[0];
        drivers += class_flows[1];
        park_riders += class_flows[2];
    }

    let net = &spec.network;
    let city = net.links[layout.city_link].travel_time(drivers)?;
    let highway = net.links[layout.highway_link].travel_time(drivers)?;
    let station_drive = net.links[layout.park_ride_link].travel_time(park_riders)?;
    let highway_free = net.links[layout.highway_link].free_flow_time;

    let bus = Crowding { riders: transit_riders, seats: layout.seats.bus };
    let line1 = Crowding { riders: transit_riders, seats: layout.seats.line1 };
    // The second metro line carries both transit and park-and-ride travelers.
    let line2 = Crowding { riders: transit_riders + park_riders, seats: layout.seats.line2 };

    let options = vec![
        OptionExperience {
            time_minutes: layout.transit_minutes,
            money: layout.money[0],
            detail: ExperienceDetail::Transit { bus, line1, line2 },
        },
        OptionExperience {
            time_minutes: city + highway + layout.driving_walk_minutes,
            money: layout.money[1],
            detail: ExperienceDetail::Driving {
                drive_minutes: city + highway,
                highway_minutes: highway,
                congestion_ratio: highway / highway_free,
            },
        },
        OptionExperience {
            time_minutes: station_drive + layout.park_ride_fixed_minutes,
            money: layout.money[2],
            detail: ExperienceDetail::ParkRide { drive_minutes: station_drive, line2 },
        },
    ];
    Ok(vec![options; flows.per_class.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn multimodal_flows(per_class: [[f64; 3]; 3]) -> FlowProfile {
        FlowProfile { per_class: per_class.iter().map(|f| f.to_vec()).collect() }
    }

    #[test]
    fn catalog_scenarios_all_build() {
        let names = scenario_catalog();
        assert_eq!(names.len(), 10);
        for name in names {
            let spec = scenario(name).unwrap();
            assert_eq!(spec.name, name);
        }
        assert!(matches!(
            scenario("nope"),
            Err(ScenarioError::UnknownScenario(_))
        ));
    }

    #[test]
    fn classic_experiences_are_route_times_with_no_money() {
        let spec = scenario("classic_3n4l").unwrap();
        let flows = FlowProfile::uniform(&spec.network);
        let exps = compute_experiences(&spec, &flows).unwrap();
        let times = route_costs(&spec.network, &flows, Parallelism::Sequential).unwrap();
        assert_eq!(exps.len(), 1);
        for (exp, t) in exps[0].iter().zip(&times[0]) {
            assert_eq!(exp.time_minutes, *t);
            assert_eq!(exp.money, 0.0);
            assert_eq!(exp.detail, ExperienceDetail::RouteTime);
        }
    }

    #[test]
    fn tolling_experiences_carry_the_route_tolls() {
        let spec = scenario("tolling_A_with3").unwrap();
        let flows = FlowProfile::uniform(&spec.network);
        let exps = compute_experiences(&spec, &flows).unwrap();
        let money: Vec<f64> = exps[0].iter().map(|e| e.money).collect();
        assert_eq!(money, vec![0.0, 30.0, 34.0]);
        let spec2 = scenario("tolling_B_without3").unwrap();
        let flows2 = FlowProfile::uniform(&spec2.network);
        let exps2 = compute_experiences(&spec2, &flows2).unwrap();
        let money2: Vec<f64> = exps2[0].iter().map(|e| e.money).collect();
        assert_eq!(money2, vec![0.0, 30.0]);
    }

    #[test]
    fn multimodal_all_on_transit_is_heavily_crowded_and_frees_the_roads() {
        let spec = scenario("multimodal").unwrap();
        let flows = multimodal_flows([[7.5, 0.0, 0.0], [15.0, 0.0, 0.0], [7.5, 0.0, 0.0]]);
        let exps = compute_experiences(&spec, &flows).unwrap();
        assert_eq!(exps.len(), 3);
        // Every class sees the same shared conditions.
        assert_eq!(exps[0], exps[1]);
        assert_eq!(exps[1], exps[2]);

        let transit = &exps[0][0];
        assert_eq!(transit.time_minutes, 58.0);
        assert_eq!(transit.money, 8.0);
        match &transit.detail {
            ExperienceDetail::Transit { bus, line1, line2 } => {
                assert_eq!(bus.occupancy(), 6.0);
                assert_eq!(bus.level(), CrowdingLevel::HeavilyCrowded);
                assert_eq!(bus.standing_percent(), 83);
                assert_eq!(line1.occupancy(), 8.0);
                assert_eq!(line2.riders, 30.0);
            }
            other => panic!("expected transit detail, got {other:?}"),
        }

        let driving = &exps[0][1];
        assert_eq!(driving.time_minutes, 5.0 + 25.0 + 3.0);
        assert_eq!(driving.money, 44.0);
        match &driving.detail {
            ExperienceDetail::Driving { drive_minutes, highway_minutes, congestion_ratio } => {
                assert_eq!(*drive_minutes, 30.0);
                assert_eq!(*highway_minutes, 25.0);
                assert_eq!(*congestion_ratio, 1.0);
            }
            other => panic!("expected driving detail, got {other:?}"),
        }

        let park_ride = &exps[0][2];
        assert_eq!(park_ride.time_minutes, 15.0 + 16.0);
        assert_eq!(park_ride.money, 35.0);
    }

    #[test]
    fn multimodal_line2_pools_transit_and_park_ride_riders() {
        let spec = scenario("multimodal").unwrap();
        let flows = multimodal_flows([[2.5, 2.5, 2.5], [5.0, 5.0, 5.0], [2.5, 2.5, 2.5]]);
        let exps = compute_experiences(&spec, &flows).unwrap();
        match &exps[0][0].detail {
            ExperienceDetail::Transit { bus, line2, .. } => {
                assert_eq!(bus.riders, 10.0);
                assert_eq!(line2.riders, 20.0);
            }
            other => panic!("expected transit detail, got {other:?}"),
        }
        match &exps[0][2].detail {
            ExperienceDetail::ParkRide { line2, .. } => assert_eq!(line2.riders, 20.0),
            other => panic!("expected park-and-ride detail, got {other:?}"),
        }
    }

    #[test]
    fn empty_legs_have_seats_for_everyone() {
        let crowding = Crowding { riders: 0.0, seats: 5.0 };
        assert_eq!(crowding.occupancy(), 0.0);
        assert_eq!(crowding.standing_percent(), 0);
        assert_eq!(crowding.level(), CrowdingLevel::SeatsForEveryone);
    }

    #[test]
    fn crowding_levels_split_at_one_and_one_and_a_half() {
        let seats = 10.0;
        let exactly_full = Crowding { riders: 10.0, seats };
        assert_eq!(exactly_full.level(), CrowdingLevel::SeatsForEveryone);
        let some = Crowding { riders: 12.0, seats };
        assert_eq!(some.level(), CrowdingLevel::SomeStanding);
        assert_eq!(some.standing_percent(), 17);
        let heavy = Crowding { riders: 16.0, seats };
        assert_eq!(heavy.level(), CrowdingLevel::HeavilyCrowded);
        assert_eq!(heavy.standing_percent(), 38);
    }

    #[test]
    fn option_flow_validation_rejects_bad_shapes() {
        let spec = scenario("multimodal").unwrap();
        let short = FlowProfile { per_class: vec![vec![7.5, 0.0, 0.0]] };
        assert!(matches!(
            compute_experiences(&spec, &short),
            Err(ScenarioError::ClassCountMismatch { got: 1, want: 3 })
        ));
        let wrong_arity = FlowProfile {
            per_class: vec![vec![7.5, 0.0], vec![15.0, 0.0], vec![7.5, 0.0]],
        };
        assert!(matches!(
            compute_experiences(&spec, &wrong_arity),
            Err(ScenarioError::OptionCountMismatch { class: 0, .. })
        ));
        let negative = multimodal_flows([[8.5, -1.0, 0.0], [15.0, 0.0, 0.0], [7.5, 0.0, 0.0]]);
        assert!(matches!(
            compute_experiences(&spec, &negative),
            Err(ScenarioError::NegativeFlow { class: 0, option: 1, .. })
        ));
        let off_demand = multimodal_flows([[7.0, 0.0, 0.0], [15.0, 0.0, 0.0], [7.5, 0.0, 0.0]]);
        assert!(matches!(
            compute_experiences(&spec, &off_demand),
            Err(ScenarioError::FlowConservation { class: 0, .. })
        ));
    }

    #[test]
    fn reported_minutes_rounds_to_one_decimal() {
        assert_eq!(reported_minutes(45.6789), 45.7);
        assert_eq!(reported_minutes(45.64), 45.6);
        assert_eq!(reported_minutes(58.0), 58.0);
        assert_eq!(reported_minutes(3880.123), 3880.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn driving_time_grows_with_drivers_while_transit_stays_fixed(
            share in 0.0..1.0f64,
        ) {
            let spec = scenario("multimodal").unwrap();
            let demands = [7.5, 15.0, 7.5];
            let build = |s: f64| {
                FlowProfile {
                    per_class: demands
                        .iter()
                        .map(|d| vec![d * (1.0 - s), d * s, 0.0])
                        .collect(),
                }
            };
            let low = compute_experiences(&spec, &build(share * 0.5)).unwrap();
            let high = compute_experiences(&spec, &build(share * 0.5 + 0.5)).unwrap();
            prop_assert!(high[0][1].time_minutes >= low[0][1].time_minutes);
            prop_assert_eq!(low[0][0].time_minutes, 58.0);
            prop_assert_eq!(high[0][0].time_minutes, 58.0);
        }
    }
}
